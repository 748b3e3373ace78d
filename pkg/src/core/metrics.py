"""
评估指标：成功率、Fréchet 距离（FD-traj）、PSNR / SSIM、奖励预测误差

FD-traj 的特征是连续 fd_window 个观测向量拼接而成的轨迹窗口，
用来代替视频特征网络；LPIPS 需要预训练感知网络，不在此实现。
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .env import render, state_from_observation
from .errors import NumericalError, ShapeError, UsageError
from .rng import rng_stream
from .types import ActionChunk, ObservationVec, Trajectory
from ..utils.logger import get_logger

logger = get_logger("metrics")

PSNR_IDENTICAL = 100.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
FD_REPORT_EPS = 1e-8
FD_SINGULAR_OFFSET = 1e-6
FD_NEGATIVE_TOLERANCE = 1e-8
REPORT_NOTES = "LPIPS omitted (requires a pretrained perceptual network); FD-traj uses observation-window features"


@dataclass(frozen=True, eq=False)
class GaussianSummary:
    """均值向量与对称半正定协方差"""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ShapeError(f"协方差形状 {cov.shape} 与均值维度 {mean.size} 不一致")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10:
            raise ValueError("协方差矩阵不对称")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size


def success_rate(trajectories: Sequence[Trajectory]) -> Tuple[float, int]:
    """
    Returns:
        (成功率, 回合数)
    """
    if not trajectories:
        raise UsageError("成功率需要至少一条轨迹")
    successes = sum(1 for t in trajectories if t.success)
    return successes / len(trajectories), len(trajectories)


def rate_stderr(rate: float, n: int) -> float:
    return math.sqrt(rate * (1.0 - rate) / n) if n > 0 else 0.0


def summarize_rollouts(features) -> GaussianSummary:
    """样本均值与无偏协方差（分母 n-1）；至少需要 d+1 个样本"""
    data = np.asarray(features, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    n, d = data.shape
    if n < d + 1:
        raise UsageError(f"样本数 {n} 少于维度 + 1 = {d + 1}")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (n - 1)
    return GaussianSummary(mean, 0.5 * (cov + cov.T))


def _sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> np.ndarray:
    """(Σa Σb)^½ 的实部；乘积接近奇异时在对角线上加小偏移重算"""
    covmean = linalg.sqrtm(cov_a @ cov_b)
    if not np.isfinite(covmean).all():
        logger.warning(f"[fd] 协方差乘积接近奇异，对角线加 {FD_SINGULAR_OFFSET:g} 后重算")
        offset = np.eye(cov_a.shape[0]) * FD_SINGULAR_OFFSET
        covmean = linalg.sqrtm((cov_a + offset) @ (cov_b + offset))
    if np.iscomplexobj(covmean):
        imag = float(np.max(np.abs(np.diagonal(covmean).imag)))
        if imag > 1e-3:
            logger.warning(f"[fd] 矩阵平方根虚部过大: {imag:.2e}，只取实部")
        covmean = covmean.real
    return covmean


def frechet_distance(a: GaussianSummary, b: GaussianSummary, eps: float = 0.0) -> float:
    """
    两个高斯之间的 Fréchet 距离平方

    d² = |μa - μb|² + tr(Σa + Σb - 2 (Σa Σb)^½)

    Args:
        eps: 开方前加到两个协方差对角线上的正则项
    """
    if a.dim != b.dim:
        raise ShapeError(f"维度不一致: {a.dim} vs {b.dim}")
    cov_a, cov_b = a.cov, b.cov
    diff = a.mean - b.mean
    value = _frechet_value(diff, cov_a, cov_b, eps)
    if value < -FD_NEGATIVE_TOLERANCE:
        logger.warning(f"[fd] Fréchet 距离为负 ({value:.3e})，对角线加 {FD_SINGULAR_OFFSET:g} 后重算")
        value = _frechet_value(diff, cov_a, cov_b, max(eps, FD_SINGULAR_OFFSET))
        if value < -FD_NEGATIVE_TOLERANCE:
            raise NumericalError(f"Fréchet 距离计算失败: {value:.3e}")
    return max(0.0, value)


def _frechet_value(diff: np.ndarray, cov_a: np.ndarray, cov_b: np.ndarray, eps: float) -> float:
    if eps > 0:
        eye = np.eye(diff.size)
        cov_a = cov_a + eps * eye
        cov_b = cov_b + eps * eye
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(_sqrt_product(cov_a, cov_b)))


def psnr(a, b) -> float:
    """数据范围 1.0；完全相同时返回 100 dB"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"帧尺寸不一致: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b, window: int = 8, stride: int = 4) -> float:
    """8x8 窗口、步长 4 的平均 SSIM，方差取总体方差"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"帧尺寸不一致: {a.shape} vs {b.shape}")
    h, w = a.shape
    win_h, win_w = min(window, h), min(window, w)
    scores = []
    for r in range(0, h - win_h + 1, stride):
        for c in range(0, w - win_w + 1, stride):
            pa = a[r:r + win_h, c:c + win_w]
            pb = b[r:r + win_h, c:c + win_w]
            mu_a, mu_b = pa.mean(), pb.mean()
            da, db = pa - mu_a, pb - mu_b
            var_a = np.mean(da * da)
            var_b = np.mean(db * db)
            cov_ab = np.mean(da * db)
            num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov_ab + SSIM_C2)
            den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
            scores.append(num / den)
    return float(np.mean(scores))


def trajectory_windows(observations: Sequence[ObservationVec], window: int = 4) -> np.ndarray:
    """连续 window 个观测向量拼接；序列不足 window 时返回空数组"""
    arrays = [o.to_array() for o in observations]
    if len(arrays) < window:
        return np.empty((0, window * (arrays[0].size if arrays else 0)))
    return np.stack([np.concatenate(arrays[i:i + window]) for i in range(len(arrays) - window + 1)])


# ==================== 报告 ====================

REPORT_COLUMNS = ("task", "arm", "episodes", "successes", "success_rate", "stderr",
                  "fd_traj", "psnr", "ssim", "reward_mse", "token_accuracy")


@dataclass
class ReportRow:
    task: str
    arm: str
    episodes: int = 0
    successes: Optional[int] = None
    success_rate: Optional[float] = None
    stderr: Optional[float] = None
    fd_traj: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    reward_mse: Optional[float] = None
    token_accuracy: Optional[float] = None


@dataclass
class EvalReport:
    """按 任务 x 方法 组织的指标表"""

    rows: List[ReportRow] = field(default_factory=list)
    manifest_id: str = ""
    notes: str = REPORT_NOTES
    deltas: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def row(self, task: str, arm: str) -> ReportRow:
        for row in self.rows:
            if row.task == task and row.arm == arm:
                return row
        raise KeyError(f"{task}/{arm}")

    def arms(self) -> List[str]:
        return sorted({r.arm for r in self.rows})

    def tasks(self) -> List[str]:
        return sorted({r.task for r in self.rows})

    def to_dict(self) -> dict:
        return {
            "manifest_id": self.manifest_id,
            "notes": self.notes,
            "rows": [asdict(r) for r in self.rows],
            "deltas": self.deltas,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls([ReportRow(**r) for r in data["rows"]], data.get("manifest_id", ""),
                   data.get("notes", REPORT_NOTES), data.get("deltas", {}))

    def long_format(self) -> List[Tuple[str, str, str, float]]:
        """(task, arm, metric, value)，供雷达图 / 误差条图使用"""
        records = []
        for row in self.rows:
            for column in REPORT_COLUMNS[2:]:
                value = getattr(row, column)
                if value is not None:
                    records.append((row.task, row.arm, column, value))
        return records


def success_report(trajectories: Sequence[Trajectory], arm: str, task_names: Dict[int, str]) -> List[ReportRow]:
    """逐任务汇总成功率"""
    rows = []
    by_task: Dict[int, List[Trajectory]] = {}
    for traj in trajectories:
        by_task.setdefault(traj.task_id, []).append(traj)
    for task_id in sorted(by_task):
        rate, n = success_rate(by_task[task_id])
        successes = sum(1 for t in by_task[task_id] if t.success)
        rows.append(ReportRow(task=task_names.get(task_id, str(task_id)), arm=arm, episodes=n,
                              successes=successes, success_rate=rate, stderr=rate_stderr(rate, n)))
    return rows


@dataclass(eq=False)
class ReferenceEpisode:
    """真实环境中的参照轨迹：观测序列（比动作多一个）、动作、块奖励"""

    task: str
    observations: List[ObservationVec]
    actions: List[ActionChunk]
    rewards: List[float]

    def __post_init__(self):
        if len(self.observations) != len(self.actions) + 1 or len(self.rewards) != len(self.actions):
            raise ShapeError("参照轨迹长度不一致")


@dataclass(eq=False)
class ArmRollouts:
    observations: List[List[ObservationVec]]
    predicted_rewards: List[List[float]]


def imagine(model, episodes: Sequence[ReferenceEpisode], seed: int) -> ArmRollouts:
    """从每条参照轨迹的首个观测开环执行同样的动作序列（随机 token 解码）"""
    all_obs, all_rewards = [], []
    for i, episode in enumerate(episodes):
        rng = rng_stream(seed, f"imagine/{i}")
        obs = episode.observations[0]
        observed, rewards = [obs], []
        for action in episode.actions:
            obs, r_hat = model.rollout(obs, action, rng, greedy=False)
            observed.append(obs)
            rewards.append(r_hat)
        all_obs.append(observed)
        all_rewards.append(rewards)
    return ArmRollouts(all_obs, all_rewards)


def _fd_traj(reference: List[List[ObservationVec]], predicted: List[List[ObservationVec]], window: int) -> Optional[float]:
    ref = [w for seq in reference for w in trajectory_windows(seq, window)]
    pred = [w for seq in predicted for w in trajectory_windows(seq, window)]
    try:
        return frechet_distance(summarize_rollouts(np.asarray(ref)), summarize_rollouts(np.asarray(pred)),
                                eps=FD_REPORT_EPS)
    except UsageError as e:
        logger.warning(f"[FD-traj] 样本不足，跳过: {e}")
        return None


def _frame_scores(reference: List[List[ObservationVec]], predicted: List[List[ObservationVec]]) -> Tuple[float, float]:
    psnrs, ssims = [], []
    for ref_seq, pred_seq in zip(reference, predicted):
        # 首帧是共同起点，不计入
        for ref_obs, pred_obs in zip(ref_seq[1:], pred_seq[1:]):
            ref_frame = render(state_from_observation(ref_obs))
            pred_frame = render(state_from_observation(pred_obs))
            psnrs.append(psnr(ref_frame, pred_frame))
            ssims.append(ssim(ref_frame, pred_frame))
    return float(np.mean(psnrs)), float(np.mean(ssims))


def _arm_row(task: str, arm: str, model, episodes: List[ReferenceEpisode], rollouts: ArmRollouts,
             window: int) -> ReportRow:
    reference = [e.observations for e in episodes]
    psnr_mean, ssim_mean = _frame_scores(reference, rollouts.observations)
    row = ReportRow(task=task, arm=arm, episodes=len(episodes),
                    fd_traj=_fd_traj(reference, rollouts.observations, window),
                    psnr=psnr_mean, ssim=ssim_mean)
    # 未训练奖励头的一支不报告奖励误差
    if getattr(model, "lambda_reward", None) != 0:
        errors = [p - r for e, preds in zip(episodes, rollouts.predicted_rewards) for p, r in zip(preds, e.rewards)]
        row.reward_mse = float(np.mean(np.square(errors)))
    return row


def ablation_compare(model_a, model_b, eval_set: Sequence[ReferenceEpisode], seed: int = 0,
                     names: Tuple[str, str] = ("action+reward", "action-only"), window: int = 4) -> EvalReport:
    """
    在同一组参照轨迹上比较两个世界模型

    两支使用同一随机流，同一模型与自身比较时所有差值为 0。

    Raises:
        UsageError: 两个模型的训练设置（除 λ_reward 外）不一致
    """
    meta_a = dict(getattr(model_a, "train_meta", {}))
    meta_b = dict(getattr(model_b, "train_meta", {}))
    meta_a.pop("lambda_reward", None)
    meta_b.pop("lambda_reward", None)
    if meta_a != meta_b:
        diff = sorted(k for k in set(meta_a) | set(meta_b) if meta_a.get(k) != meta_b.get(k))
        raise UsageError(f"两个模型训练设置不一致: {diff}")
    if not eval_set:
        raise UsageError("评估集为空")

    rollouts = {names[0]: imagine(model_a, eval_set, seed), names[1]: imagine(model_b, eval_set, seed)}
    models = {names[0]: model_a, names[1]: model_b}
    report = EvalReport()

    groups: Dict[str, List[int]] = {}
    for i, episode in enumerate(eval_set):
        groups.setdefault(episode.task, []).append(i)
    groups["all"] = list(range(len(eval_set)))

    for task in sorted(groups):
        idx = groups[task]
        episodes = [eval_set[i] for i in idx]
        for arm in names:
            arm_rollouts = ArmRollouts([rollouts[arm].observations[i] for i in idx],
                                       [rollouts[arm].predicted_rewards[i] for i in idx])
            report.rows.append(_arm_row(task, arm, models[arm], episodes, arm_rollouts, window))

    for task in sorted(groups):
        a, b = report.row(task, names[0]), report.row(task, names[1])
        report.deltas[task] = {
            metric: getattr(a, metric) - getattr(b, metric)
            for metric in ("fd_traj", "psnr", "ssim")
            if getattr(a, metric) is not None and getattr(b, metric) is not None
        }
    return report
