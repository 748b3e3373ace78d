"""
扩散动作提议策略

在归一化的展平动作块上训练 DDPM，以观测和任务嵌入为条件，
一次生成 K 个互不重复的候选动作块及其先验。
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .env import EXPERT_MODES, N_TASKS, as_observation, scripted_expert
from .errors import ShapeError, TrainingError, UsageError
from .nn import Mlp, OptimizerState, TrainRecord, backward, forward, init_mlp, train_loop
from .types import ACTION_DIM, ActionChunk, ObservationVec
from ..utils.logger import get_logger

logger = get_logger("policy")

TIME_EMBED_DIM = 8
DEDUP_TOLERANCE = 1e-3
DEDUP_ROUNDS = 5
DENSITY_EPS = 1e-3


# ==================== 噪声调度 ====================

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    β_t 与 ᾱ_t 表；下标 t 取 1..T，ᾱ_0 定义为 1

    数组内部按 0..T 存放，betas[0] 不使用。
    """

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ShapeError("betas 必须是非空一维数组")
        if not (betas[0] > 0 and betas[-1] < 1 and np.all(np.diff(betas) >= 0)):
            raise ValueError("betas 必须满足 0 < β_1 <= ... <= β_T < 1")
        full = np.concatenate([[0.0], betas])
        full.flags.writeable = False
        object.__setattr__(self, "betas", full)
        alphas = 1.0 - full
        alpha_bars = np.cumprod(alphas)
        alphas.flags.writeable = False
        alpha_bars.flags.writeable = False
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return self.betas.size - 1

    @classmethod
    def linear(cls, steps: int, beta_start: float = 1e-4, beta_end: float = 0.02,
               reference_steps: Optional[int] = None) -> "NoiseSchedule":
        """
        线性 β 调度

        reference_steps 非空时，β 区间按 reference_steps / steps 缩放，
        使短调度的 ᾱ_T 与 reference_steps 步调度的终点相当。
        """
        scale = reference_steps / steps if reference_steps else 1.0
        return cls(np.linspace(beta_start * scale, beta_end * scale, steps))

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[t]

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"t 必须在 [1, {self.T}] 内")
        return t


def schedule_from_config(config) -> NoiseSchedule:
    return NoiseSchedule.linear(config.diffusion_steps_t, config.diffusion_beta_start,
                                config.diffusion_beta_end, config.diffusion_reference_steps)


def noise_with_alpha_bar(x0, alpha_bar, eps) -> np.ndarray:
    """x_t = sqrt(ᾱ)·x0 + sqrt(1-ᾱ)·eps"""
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    return np.sqrt(alpha_bar) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - alpha_bar) * np.asarray(eps, dtype=np.float64)


def forward_noise(schedule: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """
    前向加噪

    Args:
        schedule: 噪声调度
        x0: 干净样本 (D,) 或 (n, D)
        t: 扩散步，标量或 (n,)
        eps: 与 x0 同形的标准正态噪声
    """
    t = schedule.check_t(t)
    alpha_bar = schedule.alpha_bar(t)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 2 and alpha_bar.ndim == 1:
        alpha_bar = alpha_bar[:, None]
    return noise_with_alpha_bar(x0, alpha_bar, eps)


def timestep_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """正弦时间步嵌入，(n,) -> (n, dim)"""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# ==================== 条件输入 ====================

def condition_arrays(observations: Sequence) -> Tuple[np.ndarray, np.ndarray]:
    """观测列表 -> (features (n, d_obs-1), task_ids (n,))"""
    obs_list = [as_observation(o) for o in observations]
    features = np.stack([o.features() for o in obs_list])
    task_ids = np.asarray([o.task_id for o in obs_list], dtype=np.int64)
    return features, task_ids


@dataclass(eq=False)
class CandidateSet:
    """K 个候选动作块与归一化先验"""

    chunks: List[ActionChunk]
    priors: List[float]

    def __post_init__(self):
        if len(self.chunks) != len(self.priors) or not self.chunks:
            raise ShapeError("候选与先验数量必须一致且非空")
        priors = np.asarray(self.priors, dtype=np.float64)
        if np.any(priors <= 0) or not np.all(np.isfinite(priors)):
            raise ValueError("先验必须为正的有限值")
        self.priors = [float(p) for p in priors / priors.sum()]

    def __len__(self) -> int:
        return len(self.chunks)


# ==================== 策略网络 ====================

class DiffusionPolicy:
    """
    去噪网络 ε_θ(x_t, t, obs, task) 与任务嵌入表

    输入拼接顺序: [x_t (3H), 时间嵌入 (8), 观测特征 (d_obs-1), 任务嵌入]
    """

    kind = "diffusion-policy"
    uses_world_state = False

    def __init__(self, schedule: NoiseSchedule, horizon: int, denoiser: Mlp,
                 task_embedding: np.ndarray, prior_mode: str = "uniform"):
        self.schedule = schedule
        self.horizon = horizon
        self.denoiser = denoiser
        self.task_embedding = task_embedding
        self.prior_mode = prior_mode
        self.action_dim = horizon * ACTION_DIM
        expected_out = self.action_dim
        if denoiser.out_dim != expected_out:
            raise ShapeError(f"去噪网络输出维度应为 {expected_out}，实际 {denoiser.out_dim}")

    @classmethod
    def create(cls, config, rng: np.random.Generator, obs_feature_dim: int = 10) -> "DiffusionPolicy":
        horizon = config.chunk_h
        in_dim = horizon * ACTION_DIM + TIME_EMBED_DIM + obs_feature_dim + config.task_embed_dim
        dims = [in_dim, *config.policy_hidden, horizon * ACTION_DIM]
        denoiser = init_mlp(dims, rng)
        embedding = rng.normal(0.0, 0.1, size=(N_TASKS, config.task_embed_dim))
        return cls(schedule_from_config(config), horizon, denoiser, embedding, config.prior_mode)

    def parameters(self) -> Dict[str, np.ndarray]:
        params = self.denoiser.named_parameters("denoiser")
        params["task_embedding"] = self.task_embedding
        return params

    def _inputs(self, x_t, t, features, task_ids) -> np.ndarray:
        n = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        return np.concatenate([x_t, timestep_embedding(t), features, self.task_embedding[task_ids]], axis=1)

    def predict_noise(self, x_t, t, features, task_ids) -> np.ndarray:
        return forward(self.denoiser, self._inputs(x_t, t, features, task_ids))

    def noise_grads(self, x_t, t, features, task_ids, upstream) -> Dict[str, np.ndarray]:
        grads, dx = backward(self.denoiser, self._inputs(x_t, t, features, task_ids), upstream)
        named = grads.named("denoiser")
        embed_grad = np.zeros_like(self.task_embedding)
        np.add.at(embed_grad, task_ids, dx[:, -self.task_embedding.shape[1]:])
        named["task_embedding"] = embed_grad
        return named

    # 规划器接口
    def propose(self, state, k: int, rng: np.random.Generator) -> CandidateSet:
        return propose(self, as_observation(state), k, rng, self.prior_mode)

    def act(self, state, rng: np.random.Generator) -> ActionChunk:
        return reactive_policy(self, as_observation(state), rng)

    def meta(self) -> dict:
        return {
            "horizon": self.horizon,
            "layer_dims": list(self.denoiser.layer_dims),
            "betas": [float(b) for b in self.schedule.betas[1:]],
            "prior_mode": self.prior_mode,
        }

    @classmethod
    def from_checkpoint(cls, meta: dict, params: Dict[str, np.ndarray]) -> "DiffusionPolicy":
        n_layers = len(meta["layer_dims"]) - 1
        denoiser = Mlp(tuple(meta["layer_dims"]),
                       [params[f"denoiser.{i}.weight"] for i in range(n_layers)],
                       [params[f"denoiser.{i}.bias"] for i in range(n_layers)])
        return cls(NoiseSchedule(np.asarray(meta["betas"])), meta["horizon"], denoiser,
                   params["task_embedding"], meta.get("prior_mode", "uniform"))


def ddpm_loss(policy: DiffusionPolicy, x0, features, task_ids, rng: np.random.Generator,
              t=None, eps=None, with_grads: bool = True) -> Tuple[float, Optional[Dict[str, np.ndarray]]]:
    """
    DDPM 训练目标 E|eps - ε_θ(x_t, t)|²

    每个样本对维度求和，再对批次取平均。t、eps 缺省时从 rng 抽取
    （t 均匀取自 [1, T]，eps 标准正态）。

    Returns:
        (loss, grads)；with_grads=False 时 grads 为 None
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    features = np.atleast_2d(features)
    task_ids = np.atleast_1d(np.asarray(task_ids, dtype=np.int64))
    n = x0.shape[0]
    if t is None:
        t = rng.integers(1, policy.schedule.T + 1, size=n)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    t = np.broadcast_to(np.asarray(t), (n,))
    eps = np.asarray(eps, dtype=np.float64).reshape(x0.shape)

    x_t = forward_noise(policy.schedule, x0, t, eps)
    pred = policy.predict_noise(x_t, t, features, task_ids)
    diff = pred - eps
    loss = float(np.sum(diff * diff) / n)
    if not math.isfinite(loss):
        raise TrainingError(f"扩散损失为非有限值: {loss}")
    if not with_grads:
        return loss, None
    return loss, policy.noise_grads(x_t, t, features, task_ids, 2.0 * diff / n)


def q_posterior(schedule: NoiseSchedule, x0_hat: np.ndarray, x_t: np.ndarray, t: int) -> Tuple[np.ndarray, float]:
    """后验 q(x_{t-1} | x_t, x0) 的均值与方差"""
    beta = schedule.betas[t]
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t - 1]
    coef1 = beta * math.sqrt(ab_prev) / (1.0 - ab_t)
    coef2 = (1.0 - ab_prev) * math.sqrt(schedule.alphas[t]) / (1.0 - ab_t)
    variance = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return coef1 * x0_hat + coef2 * x_t, variance


def sample_batch(policy: DiffusionPolicy, obs: ObservationVec, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    祖先采样 n 个归一化动作块，返回 (n, 3H)，已夹到 [-1, 1]

    每步按 x0 参数化：x̂0 夹到 [-1, 1] 后代入后验均值，t=1 时不加噪声。
    """
    schedule = policy.schedule
    features, task_ids = condition_arrays([obs])
    features = np.repeat(features, n, axis=0)
    task_ids = np.repeat(task_ids, n)
    x = rng.standard_normal((n, policy.action_dim))
    for t in range(schedule.T, 0, -1):
        eps_hat = policy.predict_noise(x, t, features, task_ids)
        ab_t = schedule.alpha_bars[t]
        x0_hat = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
        mean, variance = q_posterior(schedule, x0_hat, x, t)
        if t > 1:
            x = mean + math.sqrt(variance) * rng.standard_normal(x.shape)
        else:
            x = mean
    return np.clip(x, -1.0, 1.0)


def sample(policy: DiffusionPolicy, obs: ObservationVec, rng: np.random.Generator) -> ActionChunk:
    """单个动作块"""
    return ActionChunk.from_normalized(sample_batch(policy, obs, 1, rng)[0], policy.horizon)


def reactive_policy(policy: DiffusionPolicy, obs: ObservationVec, rng: np.random.Generator) -> ActionChunk:
    """不做搜索，直接执行一个采样（基线）"""
    return sample(policy, obs, rng)


# ==================== 候选提议 ====================

def _is_duplicate(candidate: ActionChunk, kept: List[ActionChunk]) -> bool:
    return any(np.max(np.abs(candidate.actions - other.actions)) < DEDUP_TOLERANCE for other in kept)


def density_priors(chunks: Sequence[ActionChunk]) -> List[float]:
    """先验 ∝ 1 / (ε + 到最近两个其它候选的平均距离)"""
    k = len(chunks)
    if k == 1:
        return [1.0]
    flat = np.stack([c.normalized() for c in chunks])
    dists = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    n_near = min(2, k - 1)
    nearest = np.sort(dists, axis=1)[:, :n_near].mean(axis=1)
    weights = 1.0 / (DENSITY_EPS + nearest)
    return list(weights / weights.sum())


def propose(policy: DiffusionPolicy, obs: ObservationVec, k: int, rng: np.random.Generator,
            prior_mode: str = "uniform") -> CandidateSet:
    """
    生成 K 个候选动作块

    L∞ 距离小于 1e-3 的重复候选最多重采样 5 轮，之后允许重复。

    Args:
        policy: 扩散策略
        obs: 当前观测
        k: 候选数
        rng: 随机流
        prior_mode: "uniform" 或 "density"
    """
    if k < 1:
        raise UsageError(f"k 必须 >= 1: {k}")
    obs = as_observation(obs)
    raw = sample_batch(policy, obs, k, rng)
    chunks = [ActionChunk.from_normalized(v, policy.horizon) for v in raw]

    for round_idx in range(DEDUP_ROUNDS):
        dup_slots = [i for i in range(k) if _is_duplicate(chunks[i], chunks[:i])]
        if not dup_slots:
            break
        fresh = sample_batch(policy, obs, len(dup_slots), rng)
        for slot, vec in zip(dup_slots, fresh):
            chunks[slot] = ActionChunk.from_normalized(vec, policy.horizon)
    else:
        if any(_is_duplicate(chunks[i], chunks[:i]) for i in range(k)):
            logger.debug(f"[propose] {DEDUP_ROUNDS} 轮重采样后仍有重复候选，按原样保留")

    if prior_mode == "density":
        priors = density_priors(chunks)
    else:
        priors = [1.0 / k] * k
    return CandidateSet(chunks, priors)


def mode_of(obs: ObservationVec, chunk: ActionChunk) -> str:
    """
    按首步位移相对"夹爪->物体 0"方向的偏转判定绕行模式

    物体在夹爪正右侧时等价于看首步 dy 的符号。
    """
    gx, gy = obs.gripper_xy
    ox, oy = obs.objects_xy[0]
    dx, dy = chunk.actions[0, 0], chunk.actions[0, 1]
    cross = (ox - gx) * dy - (oy - gy) * dx
    return "left" if cross > 0 else "right"


def mode_fractions(obs: ObservationVec, chunks: Sequence[ActionChunk]) -> Dict[str, float]:
    counts = {mode: 0 for mode in EXPERT_MODES}
    for chunk in chunks:
        counts[mode_of(obs, chunk)] += 1
    return {mode: counts[mode] / len(chunks) for mode in EXPERT_MODES}


# ==================== 训练 ====================

@dataclass
class DemoDataset:
    """示范数据：归一化动作块 + 条件"""

    x0: np.ndarray
    features: np.ndarray
    task_ids: np.ndarray
    modes: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x0.shape[0]

    @classmethod
    def from_records(cls, records: Sequence[Tuple[ObservationVec, ActionChunk, str]]) -> "DemoDataset":
        if not records:
            raise UsageError("示范数据为空")
        features, task_ids = condition_arrays([r[0] for r in records])
        x0 = np.stack([r[1].normalized() for r in records])
        return cls(x0, features, task_ids, [r[2] for r in records])


def train_policy(policy: DiffusionPolicy, data: DemoDataset, config, optimizer: OptimizerState = None,
                 start_step: int = 0, total_steps: int = None,
                 stop_step: int = None) -> Tuple[List[TrainRecord], OptimizerState]:
    """
    训练去噪网络

    Returns:
        (训练记录, 优化器状态)
    """
    total_steps = config.policy_train_steps if total_steps is None else total_steps
    if optimizer is None:
        optimizer = OptimizerState(config.learning_rate, config.weight_decay, config.grad_clip)
    batch = min(config.batch_size, len(data))

    def objective(rng, step):
        idx = rng.integers(0, len(data), size=batch)
        loss, grads = ddpm_loss(policy, data.x0[idx], data.features[idx], data.task_ids[idx], rng)
        return loss, grads, {}

    logger.info(f"[train-policy] 样本数 {len(data)}，批大小 {batch}，步数 {start_step} -> {total_steps}")
    history = train_loop(policy.parameters(), objective, total_steps, optimizer, config.seed,
                         "policy-train", config.warmup_steps, config.min_lr_ratio,
                         start_step=start_step, stop_step=stop_step, logger=logger)
    return history, optimizer


# ==================== 对照策略 ====================

class RegressionPolicy:
    """
    均值回归基线：同样的 MLP 主干，直接以 MSE 回归示范动作块

    多模态数据上会塌缩到两个模式的平均。
    """

    kind = "regression-policy"
    uses_world_state = False

    def __init__(self, horizon: int, net: Mlp, task_embedding: np.ndarray):
        self.horizon = horizon
        self.net = net
        self.task_embedding = task_embedding

    @classmethod
    def create(cls, config, rng: np.random.Generator, obs_feature_dim: int = 10) -> "RegressionPolicy":
        horizon = config.chunk_h
        dims = [obs_feature_dim + config.task_embed_dim, *config.policy_hidden, horizon * ACTION_DIM]
        return cls(horizon, init_mlp(dims, rng), rng.normal(0.0, 0.1, size=(N_TASKS, config.task_embed_dim)))

    def parameters(self) -> Dict[str, np.ndarray]:
        params = self.net.named_parameters("regressor")
        params["task_embedding"] = self.task_embedding
        return params

    def _inputs(self, features, task_ids) -> np.ndarray:
        return np.concatenate([features, self.task_embedding[task_ids]], axis=1)

    def predict(self, features, task_ids) -> np.ndarray:
        return np.clip(forward(self.net, self._inputs(features, task_ids)), -1.0, 1.0)

    def loss_and_grads(self, x0, features, task_ids) -> Tuple[float, Dict[str, np.ndarray]]:
        inputs = self._inputs(features, task_ids)
        diff = forward(self.net, inputs) - x0
        n = x0.shape[0]
        loss = float(np.sum(diff * diff) / n)
        grads, dx = backward(self.net, inputs, 2.0 * diff / n)
        named = grads.named("regressor")
        embed_grad = np.zeros_like(self.task_embedding)
        np.add.at(embed_grad, task_ids, dx[:, -self.task_embedding.shape[1]:])
        named["task_embedding"] = embed_grad
        return loss, named

    def act(self, state, rng=None) -> ActionChunk:
        features, task_ids = condition_arrays([state])
        return ActionChunk.from_normalized(self.predict(features, task_ids)[0], self.horizon)

    def propose(self, state, k: int, rng=None) -> CandidateSet:
        chunk = self.act(state)
        return CandidateSet([chunk] * k, [1.0 / k] * k)


def train_regression(policy: RegressionPolicy, data: DemoDataset, config,
                     total_steps: int = None) -> List[TrainRecord]:
    total_steps = config.policy_train_steps if total_steps is None else total_steps
    optimizer = OptimizerState(config.learning_rate, config.weight_decay, config.grad_clip)
    batch = min(config.batch_size, len(data))

    def objective(rng, step):
        idx = rng.integers(0, len(data), size=batch)
        loss, grads = policy.loss_and_grads(data.x0[idx], data.features[idx], data.task_ids[idx])
        return loss, grads, {}

    return train_loop(policy.parameters(), objective, total_steps, optimizer, config.seed,
                      "regression-train", config.warmup_steps, config.min_lr_ratio, logger=logger)


class ExpertPolicy:
    """把脚本专家包装成提议接口（需要真值状态）；候选在左右模式间交替"""

    kind = "expert"
    uses_world_state = True

    def __init__(self, horizon: int = 4):
        self.horizon = horizon

    def propose(self, state, k: int, rng=None) -> CandidateSet:
        chunks = [scripted_expert(state, EXPERT_MODES[i % 2], self.horizon) for i in range(k)]
        return CandidateSet(chunks, [1.0 / k] * k)

    def act(self, state, rng=None) -> ActionChunk:
        return scripted_expert(state, EXPERT_MODES[0], self.horizon)
