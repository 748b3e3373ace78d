"""
配置文件加载工具
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Tuple

import yaml

from ..core.errors import ConfigError, ConfigValidationError


@dataclass(frozen=True)
class LoggingConfig:
    """日志配置（与 config.example.yaml 中的 logging 段对应）"""

    level: str = "INFO"
    file: str = "logs/storm.log"
    max_size: int = 10485760  # 10MB
    backup_count: int = 5


@dataclass(frozen=True)
class Config:
    """运行配置，构造后不可变，可在并发评估进程间共享"""

    seed: int = 0

    # 搜索参数
    n_sim: int = 8
    depth_d: int = 3
    gamma: float = 0.9
    c_puct: float = 1.0
    k_candidates: int = 8
    discounted_backup: bool = True
    leaf_rollout_steps: int = 1
    prior_mode: str = "uniform"
    greedy_rollouts: bool = True

    # 世界模型
    lambda_reward: float = 20.0
    beta_vq: float = 0.25
    codebook_size: int = 16
    wm_trunk_hidden: Tuple[int, ...] = (64,)
    wm_feature_dim: int = 48
    wm_head_hidden: Tuple[int, ...] = (64,)
    wm_train_steps: int = 3000

    # 扩散策略
    diffusion_steps_t: int = 50
    diffusion_beta_start: float = 1e-4
    diffusion_beta_end: float = 0.02
    diffusion_reference_steps: Any = None  # 非空时按该步数定义 β 端点再缩放到 T
    chunk_h: int = 4
    policy_hidden: Tuple[int, ...] = (128, 128)
    policy_train_steps: int = 4000
    task_embed_dim: int = 4

    # 优化器
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 30.0
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    batch_size: int = 64

    # 环境与评估协议
    max_steps: int = 30
    n_variations: int = 24
    eval_repeats: int = 3
    n_train_variations: int = 96
    exploration_ratio: float = 0.3
    demo_noise: float = 0.02
    holdout_fraction: float = 0.1
    fd_window: int = 4
    jobs: int = 1

    # 路径
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    out_dir: str = "runs"

    logging: LoggingConfig = field(default_factory=LoggingConfig)


_INT_FIELDS = {
    "seed", "n_sim", "depth_d", "k_candidates", "leaf_rollout_steps",
    "codebook_size", "wm_feature_dim", "wm_train_steps", "diffusion_steps_t",
    "chunk_h", "policy_train_steps", "task_embed_dim", "warmup_steps",
    "batch_size", "max_steps", "n_variations", "eval_repeats",
    "n_train_variations", "fd_window", "jobs",
}
_FLOAT_FIELDS = {
    "gamma", "c_puct", "lambda_reward", "beta_vq", "diffusion_beta_start",
    "diffusion_beta_end", "learning_rate", "weight_decay", "grad_clip",
    "min_lr_ratio", "exploration_ratio", "demo_noise", "holdout_fraction",
}
_BOOL_FIELDS = {"discounted_backup", "greedy_rollouts"}
_STR_FIELDS = {"prior_mode", "data_dir", "checkpoint_dir", "out_dir"}
_TUPLE_FIELDS = {"wm_trunk_hidden", "wm_head_hidden", "policy_hidden"}
_POSITIVE_FIELDS = {
    "n_sim", "depth_d", "k_candidates", "leaf_rollout_steps", "codebook_size",
    "wm_feature_dim", "diffusion_steps_t", "chunk_h", "task_embed_dim",
    "batch_size", "max_steps", "n_variations", "eval_repeats",
    "n_train_variations", "fd_window", "jobs",
}
PRIOR_MODES = ("uniform", "density")


def load_config(config_path: str = "config.yaml") -> Config:
    """
    加载配置文件

    Args:
        config_path: 配置文件路径（YAML 或 JSON）

    Returns:
        Config 对象，缺省字段取默认值
    """
    config_file = Path(config_path)

    if not config_file.exists():
        raise FileNotFoundError(f"配置文件不存在: {config_path}")

    with open(config_file, 'r', encoding='utf-8') as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"配置文件解析失败: {config_path}: {e}") from e

    return config_from_dict(raw or {})


def config_from_dict(raw: Dict[str, Any]) -> Config:
    """从字典构造 Config 并校验"""
    if not isinstance(raw, dict):
        raise ConfigError("配置文件顶层必须是映射")

    known = {f.name for f in fields(Config)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"未知配置项: {key}")

    values = {}
    for key, value in raw.items():
        if key == "logging":
            values[key] = _logging_from_dict(value)
        else:
            values[key] = _coerce(key, value)

    config = Config(**values)
    _validate_config(config)
    return config


def _logging_from_dict(raw: Any) -> LoggingConfig:
    if raw is None:
        return LoggingConfig()
    if not isinstance(raw, dict):
        raise ConfigValidationError("logging 必须是映射")
    known = {f.name for f in fields(LoggingConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"未知配置项: logging.{key}")
    if "level" in raw and not isinstance(raw["level"], str):
        raise ConfigValidationError("logging.level 必须是字符串")
    if "file" in raw and raw["file"] is not None and not isinstance(raw["file"], str):
        raise ConfigValidationError("logging.file 必须是字符串或 null")
    for key in ("max_size", "backup_count"):
        value = raw.get(key, 0)
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ConfigValidationError(f"logging.{key} 必须是非负整数")
    return LoggingConfig(**raw)


def _coerce(key: str, value: Any) -> Any:
    """按字段类型做严格转换，失败时报出字段名"""
    if key in _BOOL_FIELDS:
        if not isinstance(value, bool):
            raise ConfigValidationError(f"{key} 必须是布尔值")
        return value
    if key in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(f"{key} 必须是整数")
        return value
    if key in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(f"{key} 必须是数值")
        return float(value)
    if key in _STR_FIELDS:
        if not isinstance(value, str):
            raise ConfigValidationError(f"{key} 必须是字符串")
        return value
    if key in _TUPLE_FIELDS:
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in value):
            raise ConfigValidationError(f"{key} 必须是正整数列表")
        return tuple(value)
    if key == "diffusion_reference_steps":
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigValidationError(f"{key} 必须是整数或 null")
        return value
    return value


def _validate_config(config: Config) -> None:
    """
    验证配置取值范围

    Args:
        config: 配置对象
    """
    if not 0.0 <= config.gamma < 1.0:
        raise ConfigValidationError(f"gamma 必须在 [0, 1) 内: {config.gamma}")

    for key in sorted(_POSITIVE_FIELDS):
        if getattr(config, key) < 1:
            raise ConfigValidationError(f"{key} 必须 >= 1")

    if config.lambda_reward < 0:
        raise ConfigValidationError("lambda_reward 不能为负")
    if config.beta_vq < 0:
        raise ConfigValidationError("beta_vq 不能为负")
    if config.c_puct < 0:
        raise ConfigValidationError("c_puct 不能为负")
    if config.seed < 0:
        raise ConfigValidationError("seed 不能为负")

    for key in ("exploration_ratio", "holdout_fraction", "min_lr_ratio"):
        value = getattr(config, key)
        if not 0.0 <= value <= 1.0:
            raise ConfigValidationError(f"{key} 必须在 [0, 1] 内")

    if config.prior_mode not in PRIOR_MODES:
        raise ConfigValidationError(f"prior_mode 必须是 {PRIOR_MODES} 之一")

    if not 0.0 < config.diffusion_beta_start <= config.diffusion_beta_end:
        raise ConfigValidationError("diffusion_beta_start 必须满足 0 < start <= end")
    ref = config.diffusion_reference_steps
    if ref is not None and ref < 1:
        raise ConfigValidationError("diffusion_reference_steps 必须 >= 1")
    scale = (ref / config.diffusion_steps_t) if ref else 1.0
    if config.diffusion_beta_end * scale >= 1.0:
        raise ConfigValidationError("缩放后的 diffusion_beta_end 必须 < 1")

    for key in ("learning_rate", "grad_clip"):
        if getattr(config, key) <= 0:
            raise ConfigValidationError(f"{key} 必须为正")
    if config.weight_decay < 0 or config.demo_noise < 0:
        raise ConfigValidationError("weight_decay / demo_noise 不能为负")
    if config.warmup_steps < 0 or config.policy_train_steps < 0 or config.wm_train_steps < 0:
        raise ConfigValidationError("训练步数不能为负")

    level = config.logging.level.upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigValidationError(f"logging.level 无效: {config.logging.level}")


def config_to_dict(config: Config) -> Dict[str, Any]:
    """序列化为纯 JSON 兼容字典"""
    data = asdict(config)
    for key in _TUPLE_FIELDS:
        data[key] = list(data[key])
    return data


def save_config(config: Config, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(config_to_dict(config), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def config_hash(config: Config) -> str:
    """规范 JSON 形式的 SHA-256，用于清单与报告合并校验"""
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def with_overrides(config: Config, **overrides) -> Config:
    """命令行覆盖（--seed、--out-dir 等），覆盖后重新校验"""
    updated = replace(config, **{k: v for k, v in overrides.items() if v is not None})
    _validate_config(updated)
    return updated
