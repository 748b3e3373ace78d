"""
共享领域类型：观测向量、动作块、轨迹
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .errors import ShapeError, UsageError

# 单步位移上限与夹爪指令范围
MAX_DISPLACEMENT = 0.1
GRIP_LIMIT = 1.0
ACTION_DIM = 3


def _clamp01(value: float) -> float:
    return float(min(1.0, max(0.0, value)))


@dataclass(frozen=True)
class ObservationVec:
    """
    环境观测（完全可观测，即信念状态）

    展平顺序: gripper_xy(2), holding(1), gripper_closed(1),
    objects_xy(2 * n_objects), target_xy(2), task_id(1)
    """

    gripper_xy: Tuple[float, float]
    holding: int
    gripper_closed: int
    objects_xy: Tuple[Tuple[float, float], ...]
    target_xy: Tuple[float, float]
    task_id: int

    @property
    def n_objects(self) -> int:
        return len(self.objects_xy)

    @property
    def dim(self) -> int:
        return 7 + 2 * self.n_objects

    def to_array(self) -> np.ndarray:
        values = [self.gripper_xy[0], self.gripper_xy[1],
                  float(self.holding), float(self.gripper_closed)]
        for xy in self.objects_xy:
            values.extend(xy)
        values.extend(self.target_xy)
        values.append(float(self.task_id))
        return np.asarray(values, dtype=np.float64)

    def features(self) -> np.ndarray:
        """网络条件输入：去掉 task_id，数值映射到 [-1, 1]"""
        return 2.0 * self.to_array()[:-1] - 1.0

    @classmethod
    def from_array(cls, values, n_objects: int = 2) -> "ObservationVec":
        """从展平向量还原观测；坐标夹到 [0,1]，标志位取整"""
        arr = np.asarray(values, dtype=np.float64)
        expected = 7 + 2 * n_objects
        if arr.shape != (expected,):
            raise ShapeError(f"观测维度应为 {expected}，实际 {arr.shape}")
        objects = tuple(
            (_clamp01(arr[4 + 2 * i]), _clamp01(arr[5 + 2 * i]))
            for i in range(n_objects)
        )
        tail = 4 + 2 * n_objects
        return cls(
            gripper_xy=(_clamp01(arr[0]), _clamp01(arr[1])),
            holding=int(arr[2] >= 0.5),
            gripper_closed=int(arr[3] >= 0.5),
            objects_xy=objects,
            target_xy=(_clamp01(arr[tail]), _clamp01(arr[tail + 1])),
            task_id=max(0, int(round(float(arr[tail + 2])))),
        )


@dataclass(frozen=True, eq=False)
class ActionChunk:
    """
    长度为 H 的连续动作序列，每步 (dx, dy, g)

    构造时夹紧: dx, dy ∈ [-0.1, 0.1]，g ∈ [-1, 1]
    """

    actions: np.ndarray

    def __post_init__(self):
        arr = np.array(self.actions, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[1] != ACTION_DIM or arr.shape[0] < 1:
            raise ShapeError(f"动作块形状应为 (H, 3)，实际 {arr.shape}")
        arr[:, :2] = np.clip(arr[:, :2], -MAX_DISPLACEMENT, MAX_DISPLACEMENT)
        arr[:, 2] = np.clip(arr[:, 2], -GRIP_LIMIT, GRIP_LIMIT)
        arr.flags.writeable = False
        object.__setattr__(self, "actions", arr)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    def flat(self) -> np.ndarray:
        return self.actions.reshape(-1).copy()

    def normalized(self) -> np.ndarray:
        """扩散空间表示：位移除以 0.1，整体落在 [-1, 1]"""
        scaled = self.actions.copy()
        scaled[:, :2] /= MAX_DISPLACEMENT
        return scaled.reshape(-1)

    @classmethod
    def from_normalized(cls, vec, horizon: int) -> "ActionChunk":
        arr = np.asarray(vec, dtype=np.float64).reshape(horizon, ACTION_DIM).copy()
        arr[:, :2] *= MAX_DISPLACEMENT
        return cls(arr)

    def same_as(self, other: "ActionChunk") -> bool:
        return np.array_equal(self.actions, other.actions)

    def to_list(self) -> List[List[float]]:
        return [[float(v) for v in row] for row in self.actions]


@dataclass(frozen=True, eq=False)
class TrajectoryStep:
    obs: ObservationVec
    action: ActionChunk
    reward: float
    done: bool
    success: bool


@dataclass
class Trajectory:
    """单个回合的记录，持久化与指标计算的基本单元"""

    seed: int
    task_id: int
    variation_id: int
    steps: List[TrajectoryStep] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return bool(self.steps) and self.steps[-1].success

    def discounted_return(self, gamma: float) -> float:
        total = 0.0
        for i, step in enumerate(self.steps):
            total += (gamma ** i) * step.reward
        return total

    def validate(self) -> None:
        """检查 done 只出现在最后一步、success 蕴含 done"""
        for i, step in enumerate(self.steps):
            last = i == len(self.steps) - 1
            if step.done and not last:
                raise UsageError(f"轨迹第 {i} 步提前结束")
            if step.success and not step.done:
                raise UsageError(f"轨迹第 {i} 步 success 但未 done")

    def to_lines(self) -> List[str]:
        header = {
            "seed": self.seed,
            "task_id": self.task_id,
            "variation_id": self.variation_id,
            "meta": self.meta,
            "n_steps": len(self.steps),
        }
        lines = [json.dumps(header, sort_keys=True)]
        for step in self.steps:
            record = {
                "obs": [float(v) for v in step.obs.to_array()],
                "action": step.action.to_list(),
                "reward": float(step.reward),
                "done": bool(step.done),
                "success": bool(step.success),
            }
            lines.append(json.dumps(record, sort_keys=True))
        return lines


def write_trajectory(path, trajectory: Trajectory) -> None:
    """写出 JSONL：首行为头信息，其后每行一步"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in trajectory.to_lines():
            f.write(line + "\n")


def read_trajectory(path) -> Trajectory:
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise UsageError(f"轨迹文件为空: {path}")
    header = json.loads(lines[0])
    trajectory = Trajectory(
        seed=header["seed"],
        task_id=header["task_id"],
        variation_id=header["variation_id"],
        meta=header.get("meta", {}),
    )
    for line in lines[1:]:
        record = json.loads(line)
        obs_arr = np.asarray(record["obs"], dtype=np.float64)
        n_objects = (len(obs_arr) - 7) // 2
        trajectory.steps.append(TrajectoryStep(
            obs=ObservationVec.from_array(obs_arr, n_objects),
            action=ActionChunk(np.asarray(record["action"])),
            reward=record["reward"],
            done=record["done"],
            success=record["success"],
        ))
    trajectory.validate()
    return trajectory
