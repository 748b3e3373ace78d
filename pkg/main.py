"""
STORM 搜索引导的桌面操作规划
主程序入口：数据生成、训练、评估、消融、报告
"""
import argparse
import sys
from pathlib import Path

# 添加项目根目录到 Python 路径
sys.path.insert(0, str(Path(__file__).parent))

from src.core.errors import ConfigError, SpecError, TrainingError, UsageError
from src.core.experiments import (EVAL_MODES, PLANNER_MODELS, cmd_ablate, cmd_eval, cmd_gen_data,
                                  cmd_report, cmd_train_policy, cmd_train_worldmodel)
from src.utils.config import Config, load_config, with_overrides
from src.utils.logger import setup_from_config, setup_logger

DEFAULT_CONFIG = "config.yaml"
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3


def _global_options() -> argparse.ArgumentParser:
    """全局参数；主命令和子命令上都可以写"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help=f"配置文件（YAML/JSON），默认读取 {DEFAULT_CONFIG}（不存在则用默认值）")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="覆盖配置中的 seed")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="覆盖配置中的 out_dir")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="评估并行进程数")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_options()
    parser = argparse.ArgumentParser(description="STORM：扩散提议 + 世界模型 + MCTS 的桌面操作规划",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="用脚本专家生成示范与转移数据")

    p = sub.add_parser("train-policy", parents=[common], help="训练扩散提议策略")
    p.add_argument("--resume", action="store_true", help="从已有检查点继续训练")
    p.add_argument("--steps", type=int, default=None, help="训练到第 N 步就保存（学习率调度长度不变）")

    p = sub.add_parser("train-worldmodel", parents=[common], help="训练带奖励头的世界模型")
    p.add_argument("--reward-weight", type=float, default=None, help="λ_reward（默认取配置，消融用 0）")
    p.add_argument("--resume", action="store_true", help="从已有检查点继续训练")
    p.add_argument("--steps", type=int, default=None, help="训练到第 N 步就保存（学习率调度长度不变）")

    p = sub.add_parser("eval", parents=[common], help="评估 storm / reactive")
    p.add_argument("--mode", choices=EVAL_MODES, default="storm")
    p.add_argument("--task", default=None, help="put_on_target / stack / put_in_zone，默认全部")
    p.add_argument("--flaky", type=int, default=0, help="每回合前 n 次抓取必然打滑")
    p.add_argument("--planner-model", choices=PLANNER_MODELS, default="learned",
                   help="规划用的模型：训练好的世界模型或精确仿真器")
    p.add_argument("--reward-weight", type=float, default=None, help="选择 λ 对应的世界模型检查点")
    p.add_argument("--trace", action="store_true", help="写出每个决策步的搜索轨迹")

    p = sub.add_parser("ablate", parents=[common], help="对比 λ>0 与 λ=0 两个世界模型")
    p.add_argument("--arm-a", default=None, help="带奖励头的一支检查点")
    p.add_argument("--arm-b", default=None, help="不带奖励头的一支检查点")

    p = sub.add_parser("report", parents=[common], help="合并多个评估目录为成功率表")
    p.add_argument("runs", nargs="+", help="评估输出目录")
    p.add_argument("--force", action="store_true", help="配置哈希不一致时仍然合并")
    p.add_argument("--output", default=None, help="输出目录，默认 <out_dir>/report")
    return parser


def resolve_config(args) -> Config:
    """加载配置并应用命令行覆盖"""
    config_path = getattr(args, "config", None)
    if config_path is None and Path(DEFAULT_CONFIG).exists():
        config_path = DEFAULT_CONFIG
    config = load_config(config_path) if config_path else Config()
    return with_overrides(config, seed=getattr(args, "seed", None), out_dir=getattr(args, "out_dir", None),
                          jobs=getattr(args, "jobs", None))


def dispatch(args, config: Config) -> dict:
    if args.command == "gen-data":
        return cmd_gen_data(config)
    if args.command == "train-policy":
        return cmd_train_policy(config, resume=args.resume, steps=args.steps)
    if args.command == "train-worldmodel":
        return cmd_train_worldmodel(config, args.reward_weight, resume=args.resume, steps=args.steps)
    if args.command == "eval":
        return cmd_eval(config, mode=args.mode, task=args.task, flaky=args.flaky,
                        planner_model=args.planner_model, lambda_reward=args.reward_weight, trace=args.trace)
    if args.command == "ablate":
        return cmd_ablate(config, args.arm_a, args.arm_b)
    if args.command == "report":
        return cmd_report(config, args.runs, force=args.force, output=args.output)
    raise UsageError(f"未知命令: {args.command}")


def main(argv=None) -> int:
    """主函数，返回退出码"""
    args = build_parser().parse_args(argv)

    try:
        config = resolve_config(args)
    except (ConfigError, FileNotFoundError) as e:
        setup_logger(log_file=None).error(f"配置错误: {e}")
        return EXIT_VALIDATION

    logger = setup_from_config(config.logging)
    logger.info(f"命令: {args.command}，seed={config.seed}，日志级别: {config.logging.level}")

    try:
        outputs = dispatch(args, config)
        for name, path in sorted(outputs.items()):
            logger.info(f"  {name}: {path}")
        return EXIT_OK
    except (ConfigError, SpecError, UsageError) as e:
        logger.error(f"参数错误: {e}")
        return EXIT_VALIDATION
    except TrainingError as e:
        where = f"（参数 {e.param_name}）" if e.param_name else ""
        logger.error(f"训练发散{where}: {e}")
        return EXIT_DIVERGENCE
    except KeyboardInterrupt:
        logger.info("\n收到停止信号，正在退出...")
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"系统错误: {e}", exc_info=True)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
