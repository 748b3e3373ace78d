"""
最小可微函数逼近器：多层感知机、AdamW 优化器与梯度检查

隐藏层激活固定为 tanh，输出层为恒等映射；全部运算使用 float64。
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .errors import ShapeError, TrainingError
from .rng import rng_stream


@dataclass
class Mlp:
    """
    多层感知机

    第 i 层权重形状为 (dims[i+1], dims[i])，偏置形状为 (dims[i+1],)
    """

    layer_dims: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2:
            raise ShapeError("MLP 至少需要输入和输出两层")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("权重/偏置层数与 layer_dims 不一致")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expected or b.shape != (expected[0],):
                raise ShapeError(f"第 {i} 层形状错误: W{w.shape} b{b.shape}，期望 W{expected}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def named_parameters(self, prefix: str) -> Dict[str, np.ndarray]:
        """返回参数字典（引用原数组，优化器原地更新）"""
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}.{i}.weight"] = w
            params[f"{prefix}.{i}.bias"] = b
        return params


@dataclass
class MlpGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def named(self, prefix: str) -> Dict[str, np.ndarray]:
        grads = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            grads[f"{prefix}.{i}.weight"] = w
            grads[f"{prefix}.{i}.bias"] = b
        return grads


def init_mlp(layer_dims: Sequence[int], rng: np.random.Generator) -> Mlp:
    """按 fan-in 缩放的均匀分布初始化：U(-1/sqrt(fan_in), 1/sqrt(fan_in))"""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=(fan_out,)))
    return Mlp(tuple(layer_dims), weights, biases)


def zeros_like_mlp(net: Mlp) -> Mlp:
    return Mlp(net.layer_dims,
               [np.zeros_like(w) for w in net.weights],
               [np.zeros_like(b) for b in net.biases])


def _as_batch(net: Mlp, x) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    batch = arr[None, :] if single else arr
    if batch.ndim != 2 or batch.shape[1] != net.in_dim:
        raise ShapeError(f"输入维度应为 {net.in_dim}，实际 {arr.shape}")
    return batch, single


def _activations(net: Mlp, batch: np.ndarray) -> List[np.ndarray]:
    """逐层激活；activations[i] 是第 i 层的输入"""
    acts = [batch]
    h = batch
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        h = np.tanh(z) if i < last else z
        acts.append(h)
    return acts


def forward(net: Mlp, x) -> np.ndarray:
    """
    前向计算

    Args:
        net: 网络
        x: 单个输入向量 (d_in,) 或批量 (n, d_in)

    Returns:
        与输入同批形状的输出
    """
    batch, single = _as_batch(net, x)
    out = _activations(net, batch)[-1]
    return out[0] if single else out


def backward(net: Mlp, x, upstream_grad) -> Tuple[MlpGrads, np.ndarray]:
    """
    反向传播：计算 upstream_grad · forward(net, x) 对参数与输入的梯度

    批量输入时参数梯度对批次求和。
    """
    batch, single = _as_batch(net, x)
    up = np.asarray(upstream_grad, dtype=np.float64)
    up = up[None, :] if up.ndim == 1 else up
    if up.shape != (batch.shape[0], net.out_dim):
        raise ShapeError(f"上游梯度形状应为 {(batch.shape[0], net.out_dim)}，实际 {up.shape}")

    acts = _activations(net, batch)
    n_layers = len(net.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    delta = up
    for i in range(n_layers - 1, -1, -1):
        grad_w[i] = delta.T @ acts[i]
        grad_b[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i]
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
    dx = delta[0] if single else delta
    return MlpGrads(grad_w, grad_b), dx


# ==================== 优化器 ====================

@dataclass
class OptimizerState:
    """AdamW 状态：一阶/二阶矩与步数"""

    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    max_grad_norm: float = 30.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "max_grad_norm": self.max_grad_norm,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": {k: encode_array(a) for k, a in sorted(self.m.items())},
            "v": {k: encode_array(a) for k, a in sorted(self.v.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerState":
        return cls(
            learning_rate=data["learning_rate"],
            weight_decay=data["weight_decay"],
            max_grad_norm=data["max_grad_norm"],
            beta1=data["beta1"],
            beta2=data["beta2"],
            eps=data["eps"],
            step=data["step"],
            m={k: decode_array(a) for k, a in data["m"].items()},
            v={k: decode_array(a) for k, a in data["v"].items()},
        )


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """全局范数裁剪；返回裁剪后的梯度与裁剪前的范数"""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


def optimizer_step(state: OptimizerState, params: Dict[str, np.ndarray],
                   grads: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """
    AdamW 一步：先做全局范数裁剪，再做解耦权重衰减的自适应矩更新

    Args:
        state: 优化器状态（原地推进）
        params: 参数字典（原地更新）
        grads: 与 params 同名同形的梯度

    Returns:
        (params, state)
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"梯度 {name} 没有对应参数")
        if g.shape != params[name].shape:
            raise ShapeError(f"梯度 {name} 形状 {g.shape} 与参数 {params[name].shape} 不一致")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"参数 {name} 的梯度出现非有限值，已中止本步", param_name=name)

    clipped, _ = clip_grad_norm(grads, state.max_grad_norm)
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    lr = state.learning_rate

    for name, g in clipped.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bias1
        v_hat = v / bias2
        p -= lr * state.weight_decay * p
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def cosine_lr(step: int, total_steps: int, base_lr: float,
              warmup_steps: int = 0, min_ratio: float = 0.1) -> float:
    """线性预热 + 余弦退火学习率"""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class TrainRecord:
    step: int
    loss: float
    lr: float
    extras: Dict[str, float] = field(default_factory=dict)


def train_loop(params: Dict[str, np.ndarray],
               objective: Callable[[np.random.Generator, int], Tuple[float, Dict[str, np.ndarray], Dict[str, float]]],
               total_steps: int,
               optimizer: OptimizerState,
               seed: int,
               label: str,
               warmup_steps: int = 0,
               min_lr_ratio: float = 0.1,
               start_step: int = 0,
               stop_step: int = None,
               log_every: int = 100,
               logger=None) -> List[TrainRecord]:
    """
    通用训练循环

    每一步的随机性来自 rng_stream(seed, "<label>/<step>")，因此从检查点
    恢复后的损失序列与不中断训练完全一致。

    Args:
        params: 参数字典（原地更新）
        objective: (rng, step) -> (loss, grads, extras)
        total_steps: 总步数（学习率调度的长度）
        optimizer: AdamW 状态
        seed: 种子
        label: 随机流标签前缀
        start_step: 起始步（恢复训练时非零）
        stop_step: 提前停止的步数，缺省训练到 total_steps

    Returns:
        每步的训练记录

    Raises:
        TrainingError: 损失或梯度出现非有限值
    """
    base_lr = optimizer.learning_rate
    history = []
    try:
        end = total_steps if stop_step is None else min(stop_step, total_steps)
        for step in range(start_step, end):
            rng = rng_stream(seed, f"{label}/{step}")
            loss, grads, extras = objective(rng, step)
            if not math.isfinite(loss):
                raise TrainingError(f"[{label}] 第 {step} 步损失为非有限值: {loss}")
            lr = cosine_lr(step, total_steps, base_lr, warmup_steps, min_lr_ratio)
            optimizer.learning_rate = lr
            optimizer_step(optimizer, params, grads)
            history.append(TrainRecord(step, float(loss), lr, dict(extras)))
            if logger is not None and (step % log_every == 0 or step == total_steps - 1):
                detail = " ".join(f"{k}={v:.5f}" for k, v in sorted(extras.items()))
                logger.info(f"[{label}] step {step}/{total_steps} loss={loss:.5f} lr={lr:.2e} {detail}".rstrip())
    finally:
        optimizer.learning_rate = base_lr
    return history


# ==================== 梯度检查 ====================

def numerical_gradients(loss_fn: Callable[[], float], params: Dict[str, np.ndarray],
                        h: float = 1e-5) -> Dict[str, np.ndarray]:
    """中心差分数值梯度；loss_fn 读取 params 中的数组（原地扰动后恢复）"""
    numeric = {}
    for name, p in params.items():
        grad = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn()
            flat[i] = original - h
            minus = loss_fn()
            flat[i] = original
            gflat[i] = (plus - minus) / (2.0 * h)
        numeric[name] = grad
    return numeric


def relative_error(analytic: Dict[str, np.ndarray], numeric: Dict[str, np.ndarray]) -> float:
    """整体相对误差 ||a - n|| / (||a|| + ||n||)"""
    a = np.concatenate([analytic[k].reshape(-1) for k in sorted(numeric)])
    n = np.concatenate([numeric[k].reshape(-1) for k in sorted(numeric)])
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(loss_fn: Callable[[], float], params: Dict[str, np.ndarray],
                    analytic: Dict[str, np.ndarray], h: float = 1e-5) -> float:
    """返回解析梯度与中心差分之间的相对误差"""
    return relative_error(analytic, numerical_gradients(loss_fn, params, h))


# ==================== 序列化 ====================

def encode_array(arr: np.ndarray) -> dict:
    """行主序展开；float 使用 repr 保证可逆"""
    return {"shape": list(arr.shape), "data": [float(v) for v in np.asarray(arr).reshape(-1)]}


def decode_array(data: dict) -> np.ndarray:
    return np.asarray(data["data"], dtype=np.float64).reshape(data["shape"])


def mlp_to_dict(net: Mlp) -> dict:
    return {
        "layer_dims": list(net.layer_dims),
        "weights": [encode_array(w) for w in net.weights],
        "biases": [encode_array(b) for b in net.biases],
    }


def mlp_from_dict(data: dict) -> Mlp:
    return Mlp(tuple(data["layer_dims"]),
               [decode_array(w) for w in data["weights"]],
               [decode_array(b) for b in data["biases"]])
