"""
带奖励头的离散化世界模型

观测逐维标量量化（恒等编码器 + 一维 k-means 码本），自回归地预测下一帧
token，奖励头回归动作块累计奖励；二者共享主干与任务嵌入表，
以 L_video + λ·L_reward 联合训练。
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .env import N_TASKS, as_observation
from .errors import ShapeError, TrainingError, UsageError
from .nn import Mlp, OptimizerState, TrainRecord, backward, forward, init_mlp, optimizer_step, train_loop
from .types import ActionChunk, ObservationVec
from ..utils.logger import get_logger

logger = get_logger("world_model")

MASKED_LOGIT = -1e9
KMEANS_MAX_ITER = 100


# ==================== 码本 ====================

@dataclass(eq=False)
class Codebook:
    """每个观测维度一组升序、互不相同的码值"""

    codes: List[np.ndarray]
    beta_vq: float = 0.25

    def __post_init__(self):
        checked = []
        for d, values in enumerate(self.codes):
            arr = np.asarray(values, dtype=np.float64)
            if arr.ndim != 1 or arr.size < 1:
                raise ShapeError(f"第 {d} 维码本为空")
            if arr.size > 1 and not np.all(np.diff(arr) > 0):
                raise ValueError(f"第 {d} 维码值必须严格升序")
            checked.append(arr)
        self.codes = checked

    @property
    def dim(self) -> int:
        return len(self.codes)

    @property
    def max_codes(self) -> int:
        return max(c.size for c in self.codes)

    def sizes(self) -> List[int]:
        return [c.size for c in self.codes]

    def to_dict(self) -> dict:
        return {"beta_vq": self.beta_vq, "codes": [[float(v) for v in c] for c in self.codes]}

    @classmethod
    def from_dict(cls, data: dict) -> "Codebook":
        return cls([np.asarray(c, dtype=np.float64) for c in data["codes"]], data.get("beta_vq", 0.25))


def _kmeans_1d(values: np.ndarray, k: int) -> np.ndarray:
    """一维 Lloyd 迭代，分位数初始化；空簇保留原中心"""
    centers = np.quantile(values, (np.arange(k) + 0.5) / k)
    assign = None
    for _ in range(KMEANS_MAX_ITER):
        new_assign = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = values[assign == j]
            if members.size:
                centers[j] = members.mean()
    return np.unique(centers)


def fit_codebook(observations, size: int = 16, beta_vq: float = 0.25) -> Codebook:
    """
    逐维拟合码本

    不同取值不超过 size 个的维度直接使用这些取值；常数维度只有一个码并告警。

    Args:
        observations: (n, d) 观测数组
        size: 每维码数 B
        beta_vq: 承诺损失权重
    """
    data = np.asarray(observations, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ShapeError(f"观测数据形状应为 (n, d)，实际 {data.shape}")
    codes = []
    for d in range(data.shape[1]):
        column = data[:, d]
        unique = np.unique(column)
        if unique.size == 1:
            logger.warning(f"[codebook] 第 {d} 维为常数 {unique[0]:.4f}，码本退化为单个码")
            codes.append(unique)
        elif unique.size <= size:
            codes.append(unique)
        else:
            codes.append(_kmeans_1d(column, size))
    return Codebook(codes, beta_vq)


@dataclass(frozen=True)
class TokenFrame:
    tokens: Tuple[int, ...]


def encode_values(x, codebook: Codebook) -> np.ndarray:
    """最近码下标；等距时取较小下标"""
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != codebook.dim:
        raise ShapeError(f"输入维度 {arr.shape[-1]} 与码本维度 {codebook.dim} 不一致")
    flat = arr.reshape(-1, codebook.dim)
    tokens = np.empty(flat.shape, dtype=np.int64)
    for d, codes in enumerate(codebook.codes):
        tokens[:, d] = np.argmin(np.abs(flat[:, d, None] - codes[None, :]), axis=1)
    return tokens.reshape(arr.shape)


def decode_values(tokens, codebook: Codebook) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    flat = arr.reshape(-1, codebook.dim)
    values = np.empty(flat.shape, dtype=np.float64)
    for d, codes in enumerate(codebook.codes):
        values[:, d] = codes[flat[:, d]]
    return values.reshape(arr.shape)


def encode(obs, codebook: Codebook) -> TokenFrame:
    x = obs.to_array() if isinstance(obs, ObservationVec) else obs
    return TokenFrame(tuple(int(t) for t in encode_values(x, codebook)))


def decode(frame: TokenFrame, codebook: Codebook) -> ObservationVec:
    values = decode_values(frame.tokens, codebook)
    return ObservationVec.from_array(values, (codebook.dim - 7) // 2)


def vq_loss(x, codebook: Codebook) -> Tuple[float, np.ndarray]:
    """
    VQ 损失（恒等编码器）

    重建项 |x - x̂|²，码本项 |sg[x] - e|²，承诺项 β|x - sg[e]|²；
    编码器固定时三项都等于 |x - x̂|² 的倍数，合计 (2 + β)|x - x̂|²。
    sg 项对其包裹的参数不回传梯度，这里仅作诊断量。
    """
    arr = np.asarray(x.to_array() if isinstance(x, ObservationVec) else x, dtype=np.float64)
    x_hat = decode_values(encode_values(arr, codebook), codebook)
    sq = float(np.sum((arr - x_hat) ** 2))
    return sq * (2.0 + codebook.beta_vq), x_hat


# ==================== 损失 ====================

def masked_logits(raw: np.ndarray, positions: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """该维度不存在的码位置置为 -1e9"""
    mask = np.arange(raw.shape[1])[None, :] >= sizes[positions][:, None]
    return np.where(mask, MASKED_LOGIT, raw)


def token_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """平均交叉熵与对 logits 的梯度"""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), targets].mean())
    grad = probs.copy()
    grad[np.arange(n), targets] -= 1.0
    return loss, grad / n


def hybrid_total(l_video: float, l_reward: float, lambda_reward: float) -> float:
    return l_video + lambda_reward * l_reward


# ==================== 模型 ====================

@dataclass
class TransitionBatch:
    """世界模型训练数据：观测数组、归一化动作、下一观测、块奖励"""

    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]

    def subset(self, idx) -> "TransitionBatch":
        return TransitionBatch(self.obs[idx], self.actions[idx], self.next_obs[idx], self.rewards[idx])

    @classmethod
    def from_records(cls, records: Sequence[Tuple[ObservationVec, ActionChunk, ObservationVec, float]]) -> "TransitionBatch":
        if not records:
            raise UsageError("转移数据为空")
        return cls(
            obs=np.stack([r[0].to_array() for r in records]),
            actions=np.stack([r[1].normalized() for r in records]),
            next_obs=np.stack([r[2].to_array() for r in records]),
            rewards=np.asarray([float(r[3]) for r in records], dtype=np.float64),
        )


def _scale(values: np.ndarray) -> np.ndarray:
    return 2.0 * values - 1.0


class WorldModel:
    """
    主干: [量化后的上一帧, 动作, 任务嵌入] -> 特征
    动力学头: [特征, 当前帧已预测 token 的值（位置 >= j 置零）, 位置 one-hot] -> B 路 logits
    奖励头: 特征 -> 标量 r̂
    """

    kind = "world-model"
    uses_world_state = False

    def __init__(self, codebook: Codebook, horizon: int, trunk: Mlp, dynamics: Mlp, reward: Mlp,
                 task_embedding: np.ndarray):
        self.codebook = codebook
        self.horizon = horizon
        self.trunk = trunk
        self.dynamics = dynamics
        self.reward = reward
        self.task_embedding = task_embedding
        self.sizes = np.asarray(codebook.sizes(), dtype=np.int64)
        # 规划器调用 rollout 时使用的 token 解码方式
        self.greedy = True
        self.lambda_reward = None
        self.train_meta: dict = {}
        if dynamics.out_dim < codebook.max_codes:
            raise ShapeError("动力学头输出维度小于码本大小")
        if reward.out_dim != 1:
            raise ShapeError("奖励头必须输出标量")

    @property
    def obs_dim(self) -> int:
        return self.codebook.dim

    @classmethod
    def create(cls, codebook: Codebook, config, rng: np.random.Generator) -> "WorldModel":
        d = codebook.dim
        action_dim = config.chunk_h * 3
        trunk = init_mlp([d + action_dim + config.task_embed_dim, *config.wm_trunk_hidden, config.wm_feature_dim], rng)
        dynamics = init_mlp([config.wm_feature_dim + 2 * d, *config.wm_head_hidden, config.codebook_size], rng)
        reward = init_mlp([config.wm_feature_dim, *config.wm_head_hidden, 1], rng)
        embedding = rng.normal(0.0, 0.1, size=(N_TASKS, config.task_embed_dim))
        return cls(codebook, config.chunk_h, trunk, dynamics, reward, embedding)

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        params.update(self.trunk.named_parameters("trunk"))
        params.update(self.dynamics.named_parameters("dynamics"))
        params.update(self.reward.named_parameters("reward"))
        params["task_embedding"] = self.task_embedding
        return params

    # ---------- 前向 ----------

    def _trunk_inputs(self, obs: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        quantized = decode_values(encode_values(obs, self.codebook), self.codebook)
        task_ids = np.clip(np.rint(obs[:, -1]).astype(np.int64), 0, N_TASKS - 1)
        inputs = np.concatenate([_scale(quantized), actions, self.task_embedding[task_ids]], axis=1)
        return inputs, task_ids

    def features(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        inputs, _ = self._trunk_inputs(obs, actions)
        return forward(self.trunk, inputs)

    def _head_inputs(self, features: np.ndarray, next_values: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """features (m, F)、next_values (m, d)、positions (m,) -> 动力学头输入"""
        d = self.obs_dim
        causal = np.arange(d)[None, :] < positions[:, None]
        prefix = np.where(causal, _scale(next_values), 0.0)
        onehot = np.eye(d)[positions]
        return np.concatenate([features, prefix, onehot], axis=1)

    def dynamics_logits(self, features: np.ndarray, next_values: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """位置 j 的 logits 只依赖 next_values 中下标 < j 的分量"""
        raw = forward(self.dynamics, self._head_inputs(features, next_values, positions))
        return masked_logits(raw, positions, self.sizes)

    def predict_reward(self, features: np.ndarray) -> np.ndarray:
        return forward(self.reward, features)[:, 0]

    # ---------- 训练 ----------

    def losses_and_grads(self, batch: TransitionBatch, lambda_reward: float,
                         with_grads: bool = True) -> Tuple[Dict[str, float], Optional[Dict[str, np.ndarray]]]:
        """
        混合损失与梯度

        Returns:
            ({"l_video", "l_reward", "total"}, grads)
        """
        n, d = batch.obs.shape
        trunk_in, task_ids = self._trunk_inputs(batch.obs, batch.actions)
        feats = forward(self.trunk, trunk_in)

        target_tokens = encode_values(batch.next_obs, self.codebook)
        target_values = decode_values(target_tokens, self.codebook)
        positions = np.tile(np.arange(d), n)
        rep_feats = np.repeat(feats, d, axis=0)
        rep_values = np.repeat(target_values, d, axis=0)
        head_in = self._head_inputs(rep_feats, rep_values, positions)
        raw = forward(self.dynamics, head_in)
        logits = masked_logits(raw, positions, self.sizes)
        l_video, dlogits = token_cross_entropy(logits, target_tokens.reshape(-1))

        r_hat = forward(self.reward, feats)[:, 0]
        err = r_hat - batch.rewards
        l_reward = float(np.mean(err * err))
        total = hybrid_total(l_video, l_reward, lambda_reward)
        losses = {"l_video": l_video, "l_reward": l_reward, "total": total}
        if not math.isfinite(total):
            raise TrainingError(f"世界模型损失为非有限值: {losses}")
        if not with_grads:
            return losses, None

        dyn_grads, dhead = backward(self.dynamics, head_in, dlogits)
        dfeats = dhead[:, :feats.shape[1]].reshape(n, d, -1).sum(axis=1)
        rew_grads, dfeat_r = backward(self.reward, feats, (lambda_reward * 2.0 * err / n)[:, None])
        dfeats = dfeats + dfeat_r
        trunk_grads, dtrunk_in = backward(self.trunk, trunk_in, dfeats)

        grads = {}
        grads.update(trunk_grads.named("trunk"))
        grads.update(dyn_grads.named("dynamics"))
        grads.update(rew_grads.named("reward"))
        embed_grad = np.zeros_like(self.task_embedding)
        np.add.at(embed_grad, task_ids, dtrunk_in[:, -self.task_embedding.shape[1]:])
        grads["task_embedding"] = embed_grad
        return losses, grads

    # ---------- 推演 ----------

    def rollout(self, state, action: ActionChunk, rng: np.random.Generator = None,
                greedy: bool = None) -> Tuple[ObservationVec, float]:
        greedy = self.greedy if greedy is None else greedy
        return rollout(as_observation(state), action, self, rng, greedy)

    def meta(self) -> dict:
        return {
            "horizon": self.horizon,
            "codebook": self.codebook.to_dict(),
            "trunk_dims": list(self.trunk.layer_dims),
            "dynamics_dims": list(self.dynamics.layer_dims),
            "reward_dims": list(self.reward.layer_dims),
            "lambda_reward": self.lambda_reward,
            "train_meta": self.train_meta,
        }

    @classmethod
    def from_checkpoint(cls, meta: dict, params: Dict[str, np.ndarray]) -> "WorldModel":
        def build(prefix, dims):
            n_layers = len(dims) - 1
            return Mlp(tuple(dims), [params[f"{prefix}.{i}.weight"] for i in range(n_layers)],
                       [params[f"{prefix}.{i}.bias"] for i in range(n_layers)])

        model = cls(Codebook.from_dict(meta["codebook"]), meta["horizon"],
                    build("trunk", meta["trunk_dims"]), build("dynamics", meta["dynamics_dims"]),
                    build("reward", meta["reward_dims"]), params["task_embedding"])
        model.lambda_reward = meta.get("lambda_reward")
        model.train_meta = dict(meta.get("train_meta", {}))
        return model


def hybrid_train_step(model: WorldModel, batch: TransitionBatch, lambda_reward: float,
                      optimizer: OptimizerState) -> Dict[str, float]:
    """一次混合损失的优化步；共享嵌入表同时接收两个头的梯度"""
    losses, grads = model.losses_and_grads(batch, lambda_reward)
    optimizer_step(optimizer, model.parameters(), grads)
    return losses


def rollout(obs: ObservationVec, action: ActionChunk, model: WorldModel,
            rng: np.random.Generator = None, greedy: bool = True) -> Tuple[ObservationVec, float]:
    """
    一步想象：编码 -> 自回归预测下一帧 token -> 解码，并给出 r̂

    Args:
        greedy: True 取 argmax；False 按 softmax 采样（需要 rng）
    """
    if not greedy and rng is None:
        raise UsageError("随机推演需要 rng")
    d = model.obs_dim
    feats = model.features(obs.to_array()[None, :], action.normalized()[None, :])
    values = np.zeros((1, d))
    tokens = []
    for j in range(d):
        logits = model.dynamics_logits(feats, values, np.asarray([j]))[0]
        if greedy:
            token = int(np.argmax(logits))
        else:
            shifted = logits - logits.max()
            probs = np.exp(shifted)
            probs /= probs.sum()
            token = int(rng.choice(probs.size, p=probs))
        tokens.append(token)
        values[0, j] = model.codebook.codes[j][token]
    next_obs = decode(TokenFrame(tuple(tokens)), model.codebook)
    r_hat = float(model.predict_reward(feats)[0])
    return next_obs, r_hat


def train_world_model(model: WorldModel, data: TransitionBatch, config, lambda_reward: float,
                      optimizer: OptimizerState = None, start_step: int = 0,
                      total_steps: int = None, stop_step: int = None) -> Tuple[List[TrainRecord], OptimizerState]:
    """λ=0 时 L_reward 照常记录但不参与总损失"""
    total_steps = config.wm_train_steps if total_steps is None else total_steps
    if optimizer is None:
        optimizer = OptimizerState(config.learning_rate, config.weight_decay, config.grad_clip)
    batch_size = min(config.batch_size, len(data))

    def objective(rng, step):
        idx = rng.integers(0, len(data), size=batch_size)
        losses, grads = model.losses_and_grads(data.subset(idx), lambda_reward)
        return losses["total"], grads, {"l_video": losses["l_video"], "l_reward": losses["l_reward"]}

    model.lambda_reward = lambda_reward
    logger.info(f"[train-wm] 转移数 {len(data)}，λ_reward={lambda_reward}，步数 {start_step} -> {total_steps}")
    history = train_loop(model.parameters(), objective, total_steps, optimizer, config.seed,
                         "wm-train", config.warmup_steps, config.min_lr_ratio,
                         start_step=start_step, stop_step=stop_step, logger=logger)
    return history, optimizer


def token_accuracy(model: WorldModel, data: TransitionBatch) -> float:
    """教师强制下逐 token 的 top-1 准确率"""
    n, d = data.obs.shape
    feats = model.features(data.obs, data.actions)
    target_tokens = encode_values(data.next_obs, model.codebook)
    target_values = decode_values(target_tokens, model.codebook)
    positions = np.tile(np.arange(d), n)
    logits = model.dynamics_logits(np.repeat(feats, d, axis=0), np.repeat(target_values, d, axis=0), positions)
    predicted = np.argmax(logits, axis=1)
    return float(np.mean(predicted == target_tokens.reshape(-1)))


def reward_mse(model: WorldModel, data: TransitionBatch) -> float:
    feats = model.features(data.obs, data.actions)
    err = model.predict_reward(feats) - data.rewards
    return float(np.mean(err * err))
