"""
实验流程：数据生成、两个学习组件的训练、评估、消融与报告汇总

每个 cmd_* 对应一个命令行子命令，返回输出文件路径字典。
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffusion import DemoDataset, DiffusionPolicy, mode_fractions, sample_batch, train_policy
from .env import (EXPERT_MODES, TASK_NAMES, SimulatorModel, TabletopEnv, TaskId, TaskSpec,
                  observe, parse_task, reset, scripted_expert)
from .errors import UsageError
from .mcts import run_episode
from .metrics import REPORT_COLUMNS, EvalReport, ReferenceEpisode, ablation_compare, success_report
from .rng import rng_stream
from .statistics import ResultsDB
from .types import MAX_DISPLACEMENT, ActionChunk, ObservationVec, Trajectory, TrajectoryStep, write_trajectory
from .world_model import TransitionBatch, WorldModel, fit_codebook, reward_mse, token_accuracy, train_world_model
from ..utils.config import Config
from ..utils.io import (demo_from_record, demo_record, load_checkpoint, read_csv, read_json, read_jsonl,
                        save_model, transition_from_record, transition_record, write_csv, write_json,
                        write_jsonl)
from ..utils.logger import get_logger
from ..utils.manifest import MANIFEST_FILE, ExperimentManifest

logger = get_logger("harness")

TASK_LABELS = {int(task): name for name, task in TASK_NAMES.items()}
# 训练变体中每 4 个有 1 个打滑一次，让示范与转移数据包含失败后的重试
FLAKY_TRAIN_EVERY = 4
BIMODALITY_SAMPLES = 100
BIMODALITY_MIN_FRACTION = 0.2
EVAL_MODES = ("storm", "reactive")
PLANNER_MODELS = ("learned", "simulator")
SUMMARY_COLUMNS_PREFIX = ("arm",)


@dataclass(frozen=True)
class RunPaths:
    """按配置推导的标准文件位置"""

    data_dir: Path
    checkpoint_dir: Path
    out_dir: Path

    @classmethod
    def from_config(cls, config: Config) -> "RunPaths":
        return cls(Path(config.data_dir), Path(config.checkpoint_dir), Path(config.out_dir))

    @property
    def demos(self) -> Path:
        return self.data_dir / "demos.jsonl"

    @property
    def transitions(self) -> Path:
        return self.data_dir / "transitions.jsonl"

    @property
    def policy(self) -> Path:
        return self.checkpoint_dir / "policy.json"

    @property
    def codebook(self) -> Path:
        return self.checkpoint_dir / "codebook.json"

    def world_model(self, lambda_reward: float) -> Path:
        return self.checkpoint_dir / f"world_model_r{lambda_reward:g}.json"

    @property
    def results_db(self) -> Path:
        return self.out_dir / "results.db"


def _banner(title: str) -> None:
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)


def _selected_tasks(task: Optional[str]) -> List[TaskId]:
    return [parse_task(task)] if task is not None else list(TaskId)


# ==================== 数据生成 ====================

def _dart_perturb(chunk: ActionChunk, noise: float, rng: np.random.Generator) -> ActionChunk:
    """执行的位移加高斯噪声，夹爪指令不变"""
    if noise <= 0:
        return chunk
    actions = chunk.actions.copy()
    actions[:, :2] += rng.normal(0.0, noise, size=(chunk.horizon, 2))
    return ActionChunk(actions)


def _random_chunk(rng: np.random.Generator, horizon: int) -> ActionChunk:
    xy = rng.uniform(-MAX_DISPLACEMENT, MAX_DISPLACEMENT, size=(horizon, 2))
    grip = rng.choice(np.asarray([-1.0, 1.0]), size=(horizon, 1))
    return ActionChunk(np.concatenate([xy, grip], axis=1))


def train_flaky(variation: int) -> int:
    return 1 if variation % FLAKY_TRAIN_EVERY == FLAKY_TRAIN_EVERY - 1 else 0


def expert_episode(config: Config, task: TaskId, variation: int, mode: str, split: str = "train",
                   flaky: int = None, noise: float = None) -> Tuple[List[dict], List[dict], Trajectory, ObservationVec]:
    """
    在真实环境里执行一条专家轨迹

    Returns:
        (示范记录, 转移记录, 轨迹, 终止观测)；示范标签是干净的专家动作块，
        转移与轨迹里记录的是实际执行（加噪后）的动作块
    """
    flaky = train_flaky(variation) if flaky is None else flaky
    noise = config.demo_noise if noise is None else noise
    spec = TaskSpec(task, variation_id=variation, flaky_grasps=flaky, max_steps=config.max_steps, split=split)
    env = TabletopEnv(spec, config.gamma)
    obs = env.reset()
    rng = rng_stream(config.seed, f"gen-data/{split}/{task.name}/{variation}/{mode}")
    demos, transitions = [], []
    trajectory = Trajectory(seed=config.seed, task_id=int(task), variation_id=variation,
                            meta={"mode": mode, "flaky_grasps": flaky, "source": "expert"})
    done = False
    while not done:
        chunk = scripted_expert(env.state, mode, config.chunk_h)
        executed = _dart_perturb(chunk, noise, rng)
        next_obs, reward, done, success = env.step(executed)
        demos.append(demo_record(obs, chunk, mode))
        transitions.append(transition_record(obs, executed, next_obs, reward, "expert"))
        trajectory.steps.append(TrajectoryStep(obs, executed, reward, done, success))
        obs = next_obs
    return demos, transitions, trajectory, obs


def exploration_episode(config: Config, task: TaskId, variation: int, index: int) -> List[dict]:
    """均匀随机动作回合，覆盖专家不会访问的状态"""
    spec = TaskSpec(task, variation_id=variation, flaky_grasps=train_flaky(variation),
                    max_steps=config.max_steps, split="train")
    env = TabletopEnv(spec, config.gamma)
    obs = env.reset()
    rng = rng_stream(config.seed, f"gen-data/explore/{index}")
    records = []
    done = False
    while not done:
        chunk = _random_chunk(rng, config.chunk_h)
        next_obs, reward, done, _ = env.step(chunk)
        records.append(transition_record(obs, chunk, next_obs, reward, "explore"))
        obs = next_obs
    return records


def exploration_count(n_expert_episodes: int, ratio: float) -> int:
    """随机回合数，使其在全部世界模型回合中的占比为 ratio"""
    if ratio <= 0:
        return 0
    if ratio >= 1:
        return n_expert_episodes
    return int(round(n_expert_episodes * ratio / (1.0 - ratio)))


def generate_datasets(config: Config) -> Tuple[List[dict], List[dict], Dict[str, Any]]:
    demos, transitions = [], []
    n_expert = 0
    for task in TaskId:
        for variation in range(config.n_train_variations):
            for mode in EXPERT_MODES:
                episode_demos, episode_transitions, _, _ = expert_episode(config, task, variation, mode)
                demos.extend(episode_demos)
                if config.exploration_ratio < 1:
                    transitions.extend(episode_transitions)
                n_expert += 1

    n_explore = exploration_count(n_expert, config.exploration_ratio)
    tasks = list(TaskId)
    for i in range(n_explore):
        task = tasks[i % len(tasks)]
        variation = (i // len(tasks)) % config.n_train_variations
        transitions.extend(exploration_episode(config, task, variation, i))

    mode_counts = {mode: sum(1 for d in demos if d["mode"] == mode) for mode in EXPERT_MODES}
    stats = {
        "expert_episodes": n_expert,
        "exploration_episodes": n_explore,
        "demos": len(demos),
        "transitions": len(transitions),
        "mode_counts": mode_counts,
    }
    return demos, transitions, stats


def cmd_gen_data(config: Config) -> Dict[str, Path]:
    """生成示范（策略用）与转移（世界模型用）数据集"""
    _banner("生成训练数据")
    paths = RunPaths.from_config(config)
    manifest = ExperimentManifest.create("gen-data", config)

    demos, transitions, stats = generate_datasets(config)
    write_jsonl(paths.demos, demos)
    write_jsonl(paths.transitions, transitions)
    manifest.add_dataset("demos", paths.demos)
    manifest.add_dataset("transitions", paths.transitions)
    manifest_path = manifest.save(paths.data_dir)

    total = max(1, stats["demos"])
    share = ", ".join(f"{mode} {count / total:.1%}" for mode, count in sorted(stats["mode_counts"].items()))
    logger.info(f"[gen-data] 专家回合 {stats['expert_episodes']}，随机回合 {stats['exploration_episodes']}")
    logger.info(f"[gen-data] 示范 {stats['demos']} 条（{share}），转移 {stats['transitions']} 条")
    return {"demos": paths.demos, "transitions": paths.transitions, "manifest": manifest_path}


# ==================== 载入 ====================

def load_demos(path) -> DemoDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"示范数据不存在: {path}（先运行 gen-data）")
    return DemoDataset.from_records([demo_from_record(r) for r in read_jsonl(path)])


def load_transitions(path) -> TransitionBatch:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"转移数据不存在: {path}（先运行 gen-data）")
    return TransitionBatch.from_records([transition_from_record(r) for r in read_jsonl(path)])


def load_policy(path) -> DiffusionPolicy:
    checkpoint = load_checkpoint(path, DiffusionPolicy.kind)
    return DiffusionPolicy.from_checkpoint(checkpoint.meta, checkpoint.params)


def load_world_model(path, greedy: bool = True) -> WorldModel:
    checkpoint = load_checkpoint(path, WorldModel.kind)
    model = WorldModel.from_checkpoint(checkpoint.meta, checkpoint.params)
    model.greedy = greedy
    return model


def _previous_rows(csv_path: Path, start_step: int) -> List[List[str]]:
    """恢复训练时保留已有损失曲线中 step < start_step 的行"""
    if start_step == 0 or not csv_path.exists():
        return []
    header, rows = read_csv(csv_path)
    return [[row[h] for h in header] for row in rows if int(row["step"]) < start_step]


# ==================== 策略训练 ====================

def bimodality_check(policy: DiffusionPolicy, config: Config,
                     task: TaskId = TaskId.PUT_ON_TARGET, variation: int = 0) -> Dict[str, Any]:
    """
    在一个专家左右模式都会出现的初始状态上采样 100 个动作块，统计两种绕行模式的占比

    Returns:
        {"fractions": {...}, "passed": 两种模式各占 >= 20%}
    """
    obs = observe(reset(TaskSpec(task, variation_id=variation, max_steps=config.max_steps, split="train")))
    raw = sample_batch(policy, obs, BIMODALITY_SAMPLES, rng_stream(config.seed, "bimodality-check"))
    chunks = [ActionChunk.from_normalized(v, policy.horizon) for v in raw]
    fractions = mode_fractions(obs, chunks)
    passed = all(f >= BIMODALITY_MIN_FRACTION for f in fractions.values())
    return {"fractions": fractions, "passed": passed}


def cmd_train_policy(config: Config, resume: bool = False, steps: int = None) -> Dict[str, Path]:
    """
    训练扩散策略

    Args:
        config: 运行配置
        resume: 从已有检查点（含优化器状态）继续
        steps: 只训练到第 steps 步就保存，之后可用 resume 继续
    """
    _banner("训练扩散策略")
    paths = RunPaths.from_config(config)
    data = load_demos(paths.demos)
    loss_csv = paths.checkpoint_dir / "policy_loss.csv"

    start_step, optimizer = 0, None
    total_steps = config.policy_train_steps
    if resume and paths.policy.exists():
        checkpoint = load_checkpoint(paths.policy, DiffusionPolicy.kind)
        policy = DiffusionPolicy.from_checkpoint(checkpoint.meta, checkpoint.params)
        optimizer = checkpoint.optimizer
        start_step = int(checkpoint.meta.get("step", 0))
        total_steps = int(checkpoint.meta.get("total_steps", total_steps))
        logger.info(f"[train-policy] 从第 {start_step} 步恢复训练")
    else:
        policy = DiffusionPolicy.create(config, rng_stream(config.seed, "policy-init"),
                                        obs_feature_dim=data.features.shape[1])

    stop_step = total_steps if steps is None else min(steps, total_steps)
    history, optimizer = train_policy(policy, data, config, optimizer, start_step, total_steps, stop_step)

    rows = _previous_rows(loss_csv, start_step) + [[r.step, r.loss, r.lr] for r in history]
    write_csv(loss_csv, ("step", "loss", "lr"), rows)

    check = bimodality_check(policy, config)
    fractions = ", ".join(f"{m} {f:.0%}" for m, f in sorted(check["fractions"].items()))
    if check["passed"]:
        logger.info(f"[train-policy] 双模态检查通过: {fractions}")
    else:
        logger.warning(f"[train-policy] 双模态检查未通过: {fractions}")

    save_model(paths.policy, policy, optimizer, step=stop_step, total_steps=total_steps,
               bimodality=check)
    manifest = ExperimentManifest.create("train-policy", config)
    manifest.add_dataset("demos", paths.demos)
    manifest.add_checkpoint("policy", paths.policy)
    manifest_path = manifest.save(paths.checkpoint_dir, "manifest_policy.json")
    return {"checkpoint": paths.policy, "loss_csv": loss_csv, "manifest": manifest_path}


# ==================== 世界模型训练 ====================

def holdout_split(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """确定性划分 (训练下标, 留出下标)；训练集至少保留一条"""
    order = rng_stream(seed, "wm-holdout").permutation(n)
    n_holdout = min(int(round(n * fraction)), n - 1)
    return np.sort(order[n_holdout:]), np.sort(order[:n_holdout])


def cmd_train_worldmodel(config: Config, lambda_reward: float = None, resume: bool = False,
                         steps: int = None) -> Dict[str, Path]:
    """
    拟合码本并以 L_video + λ·L_reward 训练世界模型

    两支（λ>0 与 λ=0）使用相同的初始化、数据划分与批次随机流，只有 λ 不同。
    """
    lambda_reward = config.lambda_reward if lambda_reward is None else float(lambda_reward)
    if lambda_reward < 0:
        raise UsageError(f"--reward-weight 不能为负: {lambda_reward}")
    _banner(f"训练世界模型（λ_reward={lambda_reward:g}）")
    paths = RunPaths.from_config(config)
    data = load_transitions(paths.transitions)
    train_idx, holdout_idx = holdout_split(len(data), config.holdout_fraction, config.seed)
    train_data = data.subset(train_idx)
    checkpoint_path = paths.world_model(lambda_reward)
    loss_csv = paths.checkpoint_dir / f"world_model_r{lambda_reward:g}_loss.csv"

    start_step, optimizer = 0, None
    total_steps = config.wm_train_steps
    if resume and checkpoint_path.exists():
        checkpoint = load_checkpoint(checkpoint_path, WorldModel.kind)
        model = WorldModel.from_checkpoint(checkpoint.meta, checkpoint.params)
        optimizer = checkpoint.optimizer
        start_step = int(checkpoint.meta.get("step", 0))
        total_steps = int(checkpoint.meta.get("total_steps", total_steps))
        logger.info(f"[train-wm] 从第 {start_step} 步恢复训练")
    else:
        codebook = fit_codebook(np.concatenate([train_data.obs, train_data.next_obs]),
                                config.codebook_size, config.beta_vq)
        write_json(paths.codebook, codebook.to_dict())
        model = WorldModel.create(codebook, config, rng_stream(config.seed, "wm-init"))

    model.train_meta = {
        "seed": config.seed,
        "total_steps": total_steps,
        "batch_size": config.batch_size,
        "codebook_size": config.codebook_size,
        "holdout_fraction": config.holdout_fraction,
        "n_train": int(len(train_idx)),
    }
    stop_step = total_steps if steps is None else min(steps, total_steps)
    history, optimizer = train_world_model(model, train_data, config, lambda_reward, optimizer,
                                           start_step, total_steps, stop_step)

    rows = _previous_rows(loss_csv, start_step) + [
        [r.step, r.loss, r.extras.get("l_video"), r.extras.get("l_reward"), r.lr] for r in history]
    write_csv(loss_csv, ("step", "total", "l_video", "l_reward", "lr"), rows)

    evaluation = {}
    if len(holdout_idx):
        holdout = data.subset(holdout_idx)
        evaluation = {"token_accuracy": token_accuracy(model, holdout), "reward_mse": reward_mse(model, holdout)}
        logger.info(f"[train-wm] 留出集 token 准确率 {evaluation['token_accuracy']:.3f}，"
                    f"奖励 MSE {evaluation['reward_mse']:.4f}")
    else:
        logger.warning("[train-wm] 留出集为空，跳过 token 准确率评估")

    save_model(checkpoint_path, model, optimizer, step=stop_step, total_steps=total_steps,
               holdout=evaluation)
    manifest = ExperimentManifest.create("train-worldmodel", config)
    manifest.add_dataset("transitions", paths.transitions)
    manifest.add_checkpoint("world_model", checkpoint_path)
    manifest.add_input("lambda_reward", f"{lambda_reward:g}")
    manifest_path = manifest.save(paths.checkpoint_dir, f"manifest_world_model_r{lambda_reward:g}.json")
    return {"checkpoint": checkpoint_path, "loss_csv": loss_csv, "manifest": manifest_path}


# ==================== 评估 ====================

@dataclass(frozen=True)
class EvalJob:
    """一个评估回合；字段全部可序列化，供子进程执行"""

    config: Config
    task_id: int
    variation: int
    repeat: int
    mode: str
    flaky: int
    planner_model: str
    policy_path: str
    world_model_path: Optional[str]
    trace: bool


# 进程内按 (路径, 修改时间) 缓存已载入的模型（只读共享）
_MODEL_CACHE: Dict[Tuple[str, str, int], Any] = {}


def _cached(kind: str, path: str, loader):
    key = (kind, path, Path(path).stat().st_mtime_ns)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = loader(path)
    return _MODEL_CACHE[key]


def run_eval_job(job: EvalJob) -> Tuple[EvalJob, Trajectory, List[dict]]:
    config = job.config
    policy = _cached("policy", job.policy_path, load_policy)
    if job.planner_model == "simulator":
        model = SimulatorModel(config.gamma)
    elif job.world_model_path is not None:
        model = _cached("world_model", job.world_model_path,
                        lambda p: load_world_model(p, config.greedy_rollouts))
    else:
        model = None

    task = TaskId(job.task_id)
    spec = TaskSpec(task, variation_id=job.variation, flaky_grasps=job.flaky, max_steps=config.max_steps)
    env = TabletopEnv(spec, config.gamma)
    rng = rng_stream(config.seed, f"eval/{task.name}/{job.variation}/{job.repeat}")
    trace = [] if job.trace else None
    trajectory = run_episode(env, policy, model, config, job.mode, rng, trace)
    trajectory.meta["repeat"] = job.repeat
    return job, trajectory, trace or []


def arm_name(mode: str, flaky: int, planner_model: str = "learned") -> str:
    name = mode
    if mode == "storm" and planner_model == "simulator":
        name += "+sim"
    if flaky:
        name += f"@flaky{flaky}"
    return name


def _episode_stem(job: EvalJob) -> str:
    return f"{TASK_LABELS[job.task_id]}_v{job.variation:02d}_r{job.repeat}"


def write_report(directory: Path, report: EvalReport, stem: str = "report") -> Dict[str, Path]:
    """报告 CSV（每行 任务 x 方法）、JSON 汇总与长格式 CSV"""
    csv_path = write_csv(directory / f"{stem}.csv", REPORT_COLUMNS,
                         [[getattr(row, c) for c in REPORT_COLUMNS] for row in report.rows])
    json_path = write_json(directory / f"{stem}.json", report.to_dict())
    long_path = write_csv(directory / f"{stem}_long.csv", ("task", "arm", "metric", "value"),
                          report.long_format())
    return {"report_csv": csv_path, "report_json": json_path, "long_csv": long_path}


def cmd_eval(config: Config, mode: str = "storm", task: str = None, flaky: int = 0,
             planner_model: str = "learned", lambda_reward: float = None, trace: bool = False,
             jobs: int = None) -> Dict[str, Path]:
    """
    在 n_variations 个留出变体 x eval_repeats 次重复上评估

    Args:
        mode: "storm"（搜索）或 "reactive"（单次采样直接执行）
        task: 任务名；None 表示全部任务
        flaky: 每回合前几次抓取必然打滑
        planner_model: "learned" 用训练好的世界模型，"simulator" 用精确仿真器
        lambda_reward: 选择世界模型检查点（默认取配置里的 λ）
        trace: storm 模式下写出每个决策步的搜索轨迹
        jobs: 并行进程数（默认取配置）
    """
    if mode not in EVAL_MODES:
        raise UsageError(f"--mode 必须是 {EVAL_MODES} 之一: {mode}")
    if planner_model not in PLANNER_MODELS:
        raise UsageError(f"--planner-model 必须是 {PLANNER_MODELS} 之一: {planner_model}")
    if flaky < 0:
        raise UsageError(f"--flaky 不能为负: {flaky}")
    tasks = _selected_tasks(task)
    paths = RunPaths.from_config(config)
    jobs = config.jobs if jobs is None else jobs
    lambda_reward = config.lambda_reward if lambda_reward is None else lambda_reward

    if not paths.policy.exists():
        raise FileNotFoundError(f"策略检查点不存在: {paths.policy}（先运行 train-policy）")
    world_model_path = None
    if mode == "storm" and planner_model == "learned":
        world_model_path = paths.world_model(lambda_reward)
        if not world_model_path.exists():
            raise FileNotFoundError(f"世界模型检查点不存在: {world_model_path}（先运行 train-worldmodel）")

    arm = arm_name(mode, flaky, planner_model)
    run_id = f"eval-{arm}-{task or 'all'}".replace("@", "-").replace("+", "-")
    run_dir = paths.out_dir / run_id
    _banner(f"评估 {arm}：{', '.join(TASK_LABELS[int(t)] for t in tasks)}")

    job_list = [
        EvalJob(config, int(t), v, r, mode, flaky, planner_model, str(paths.policy),
                str(world_model_path) if world_model_path else None, trace and mode == "storm")
        for t in tasks for v in range(config.n_variations) for r in range(config.eval_repeats)
    ]
    logger.info(f"[eval] 共 {len(job_list)} 个回合，并行进程 {jobs}")

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_eval_job, job_list))
    else:
        results = [run_eval_job(job) for job in job_list]
    results.sort(key=lambda item: (item[0].task_id, item[0].variation, item[0].repeat))

    for job, trajectory, search_trace in results:
        stem = _episode_stem(job)
        write_trajectory(run_dir / "trajectories" / f"{stem}.jsonl", trajectory)
        if job.trace:
            write_jsonl(run_dir / "traces" / f"{stem}.jsonl", search_trace)

    manifest = ExperimentManifest.create("eval", config)
    manifest.add_checkpoint("policy", paths.policy)
    if world_model_path is not None:
        manifest.add_checkpoint("world_model", world_model_path)
    manifest.add_input("arm", arm)

    trajectories = [trajectory for _, trajectory, _ in results]
    report = EvalReport(success_report(trajectories, arm, TASK_LABELS), manifest_id=manifest.manifest_id)
    outputs = write_report(run_dir, report)
    outputs["manifest"] = manifest.save(run_dir)

    db = ResultsDB(paths.results_db)
    db.register_run(run_id, manifest.config_hash, str(outputs["manifest"]))
    db.record_trajectories(run_id, arm, TASK_LABELS, [(job.repeat, traj) for job, traj, _ in results],
                           config.gamma)

    for row in report.rows:
        logger.info(f"[eval] {row.task:<14} {arm}: {row.successes}/{row.episodes} "
                    f"= {row.success_rate:.1%} (±{row.stderr:.1%})")
    outputs["run_dir"] = run_dir
    return outputs


# ==================== 消融 ====================

def reference_episodes(config: Config, tasks: Sequence[TaskId] = None) -> List[ReferenceEpisode]:
    """在留出（eval）变体上用带噪专家采集真实参照轨迹；模式按变体交替"""
    episodes = []
    for task in (tasks or list(TaskId)):
        for variation in range(config.n_variations):
            mode = EXPERT_MODES[variation % len(EXPERT_MODES)]
            _, _, trajectory, final_obs = expert_episode(config, task, variation, mode, split="eval", flaky=0)
            episodes.append(ReferenceEpisode(
                TASK_LABELS[int(task)],
                [s.obs for s in trajectory.steps] + [final_obs],
                [s.action for s in trajectory.steps],
                [s.reward for s in trajectory.steps],
            ))
    return episodes


def cmd_ablate(config: Config, arm_a: str = None, arm_b: str = None) -> Dict[str, Path]:
    """
    比较带奖励头（λ>0）与不带奖励头（λ=0）的两个世界模型

    Args:
        arm_a: 第一支检查点路径（默认 world_model_r{λ}.json）
        arm_b: 第二支检查点路径（默认 world_model_r0.json）
    """
    _banner("世界模型消融对比")
    paths = RunPaths.from_config(config)
    if arm_a is None and config.lambda_reward == 0:
        raise UsageError("配置中 lambda_reward 为 0，无法确定带奖励头的一支；请用 --arm-a 指定")
    path_a = Path(arm_a) if arm_a else paths.world_model(config.lambda_reward)
    path_b = Path(arm_b) if arm_b else paths.world_model(0.0)
    for path in (path_a, path_b):
        if not path.exists():
            raise FileNotFoundError(f"世界模型检查点不存在: {path}")

    model_a = load_world_model(path_a, greedy=False)
    model_b = load_world_model(path_b, greedy=False)
    eval_set = reference_episodes(config)
    logger.info(f"[ablate] 参照轨迹 {len(eval_set)} 条，窗口 {config.fd_window}")

    manifest = ExperimentManifest.create("ablate", config)
    manifest.add_checkpoint("arm_a", path_a)
    manifest.add_checkpoint("arm_b", path_b)

    report = ablation_compare(model_a, model_b, eval_set, seed=config.seed, window=config.fd_window)
    report.manifest_id = manifest.manifest_id
    out_dir = paths.out_dir / "ablate"
    outputs = write_report(out_dir, report, "ablation")
    outputs["radar_csv"] = outputs.pop("long_csv")
    delta_rows = [[task, metric, value] for task in sorted(report.deltas)
                  for metric, value in sorted(report.deltas[task].items())]
    outputs["deltas_csv"] = write_csv(out_dir / "deltas.csv", ("task", "metric", "delta"), delta_rows)
    outputs["manifest"] = manifest.save(out_dir)

    for task, deltas in sorted(report.deltas.items()):
        detail = " ".join(f"{k}={v:+.4f}" for k, v in sorted(deltas.items()))
        logger.info(f"[ablate] {task:<14} Δ(a-b) {detail}")
    return outputs


# ==================== 报告汇总 ====================

def _load_run(run_dir: Path) -> Tuple[List[Dict[str, str]], dict]:
    report_csv = run_dir / "report.csv"
    manifest_path = run_dir / MANIFEST_FILE
    if not report_csv.exists() or not manifest_path.exists():
        raise FileNotFoundError(f"{run_dir} 中缺少 report.csv 或 {MANIFEST_FILE}")
    header, rows = read_csv(report_csv)
    if tuple(header) != REPORT_COLUMNS:
        raise UsageError(f"{report_csv} 表头不匹配: {header}")
    return rows, read_json(manifest_path)


def merge_reports(run_dirs: Sequence, force: bool = False) -> Tuple[List[str], List[str], Dict[Tuple[str, str], float]]:
    """
    合并多个评估目录

    Returns:
        (方法列表, 任务列表, {(方法, 任务): 成功率})

    Raises:
        UsageError: 配置哈希冲突（未 force）或同一 (方法, 任务) 重复出现
    """
    if not run_dirs:
        raise UsageError("至少需要一个评估目录")
    table: Dict[Tuple[str, str], float] = {}
    hashes = {}
    for run_dir in run_dirs:
        rows, manifest = _load_run(Path(run_dir))
        hashes[str(run_dir)] = manifest.get("config_hash")
        for row in rows:
            key = (row["arm"], row["task"])
            if key in table:
                raise UsageError(f"重复的结果 {key}（来自 {run_dir}）")
            table[key] = float(row["success_rate"]) if row["success_rate"] != "" else None

    if len(set(hashes.values())) > 1:
        detail = ", ".join(f"{d}={h[:8] if h else None}" for d, h in sorted(hashes.items()))
        if not force:
            raise UsageError(f"评估目录的配置哈希不一致: {detail}（使用 --force 强制合并）")
        logger.warning(f"[report] 配置哈希不一致，按 --force 继续: {detail}")

    arms = sorted({arm for arm, _ in table})
    tasks = [name for name in TASK_LABELS.values() if any(t == name for _, t in table)]
    return arms, tasks, table


def _percent(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.1%}"


def cmd_report(config: Config, run_dirs: Sequence, force: bool = False, output: str = None) -> Dict[str, Path]:
    """把多个评估目录合并成 方法 x 任务 x 平均 的成功率表"""
    _banner("汇总评估报告")
    arms, tasks, table = merge_reports(run_dirs, force)

    rows = []
    summary = {}
    for arm in arms:
        values = [table.get((arm, task)) for task in tasks]
        present = [v for v in values if v is not None]
        average = float(np.mean(present)) if present else None
        rows.append([arm, *values, average])
        summary[arm] = {**{t: v for t, v in zip(tasks, values)}, "average": average}

    out_dir = Path(output) if output else Path(config.out_dir) / "report"
    csv_path = write_csv(out_dir / "summary.csv", (*SUMMARY_COLUMNS_PREFIX, *tasks, "average"), rows)
    json_path = write_json(out_dir / "summary.json", {
        "runs": sorted(str(Path(d)) for d in run_dirs),
        "tasks": tasks,
        "success_rates": summary,
    })

    width = max([len(a) for a in arms] + [6])
    logger.info("方法".ljust(width) + "".join(f"{t:>15}" for t in tasks) + f"{'average':>10}")
    for row in rows:
        cells = "".join(f"{_percent(v):>15}" for v in row[1:-1])
        logger.info(f"{row[0]:<{width}}{cells}{_percent(row[-1]):>10}")
    return {"summary_csv": csv_path, "summary_json": json_path}
