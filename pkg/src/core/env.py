"""
二维桌面操作仿真环境

提供三类任务（放到目标点、叠放、放入区域）、带左右绕行两种模式的脚本专家、
确定性的程序化变体，以及用于失败恢复研究的"抓取打滑"变体。
"""
import math
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import SpecError, UsageError
from .rng import rng_stream
from .types import ActionChunk, ObservationVec
from ..utils.logger import get_logger

logger = get_logger("env")

GRASP_RADIUS = 0.05
NUDGE_DISTANCE = 0.02
OBJECT_RADIUS = 0.03
SUCCESS_BONUS = 10.0
BORDER_MARGIN = 0.1
PLACEMENT_TRIES = 1000
FRAME_SIZE = 16

# 专家控制器参数
EXPERT_STEP = 0.08
EXPERT_GRASP_DIST = 0.03
EXPERT_RELEASE_DIST = 0.01
EXPERT_DETOUR_GAIN = 0.8
EXPERT_DETOUR_RANGE = 0.15

Vec2 = Tuple[float, float]


class TaskId(IntEnum):
    PUT_ON_TARGET = 0
    STACK = 1
    PUT_IN_ZONE = 2


TARGET_RADIUS = {
    TaskId.PUT_ON_TARGET: 0.06,
    TaskId.STACK: 0.03,
    TaskId.PUT_IN_ZONE: 0.12,
}

TASK_NAMES = {
    "put_on_target": TaskId.PUT_ON_TARGET,
    "stack": TaskId.STACK,
    "put_in_zone": TaskId.PUT_IN_ZONE,
}

EXPERT_MODES = ("left", "right")
N_TASKS = len(TaskId)


def parse_task(name) -> TaskId:
    if isinstance(name, TaskId):
        return name
    if isinstance(name, int):
        return TaskId(name)
    try:
        return TASK_NAMES[name]
    except KeyError:
        raise SpecError(f"未知任务: {name}，可选 {sorted(TASK_NAMES)}") from None


@dataclass(frozen=True)
class TaskSpec:
    """任务规格；variation_id 唯一确定所有初始位置"""

    task_id: TaskId = TaskId.PUT_ON_TARGET
    n_objects: int = 2
    variation_id: int = 0
    flaky_grasps: int = 0
    max_steps: int = 30
    split: str = "eval"

    def __post_init__(self):
        object.__setattr__(self, "task_id", parse_task(self.task_id))
        if self.n_objects != 2:
            raise SpecError("所有任务固定使用两个物体（被操作物体 + 参照物体）")
        if self.variation_id < 0:
            raise SpecError(f"variation_id 不能为负: {self.variation_id}")
        if self.flaky_grasps < 0 or self.max_steps < 1:
            raise SpecError("flaky_grasps 不能为负，max_steps 必须 >= 1")
        if self.split not in ("eval", "train"):
            raise SpecError(f"split 必须是 eval 或 train: {self.split}")

    @property
    def placement_label(self) -> str:
        return "env-init" if self.split == "eval" else "env-init-train"


@dataclass(frozen=True)
class WorldState:
    """
    仿真真值状态（值对象，step 返回新实例）

    holding 为被抓物体下标或 None；被抓物体坐标始终等于夹爪坐标。
    """

    gripper_xy: Vec2
    gripper_closed: bool
    holding: Optional[int]
    objects: Tuple[Vec2, ...]
    target_xy: Vec2
    target_radius: float
    task_id: TaskId
    grasp_fail_counter: int = 0
    step_count: int = 0
    max_steps: int = 30
    object_radius: float = OBJECT_RADIUS
    done: bool = False
    success: bool = False


def _clamp01(value: float) -> float:
    return min(1.0, max(0.0, float(value)))


def _dist(a: Vec2, b: Vec2) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


# ==================== 初始化 ====================

def _placement_ok(gripper: Vec2, objects: List[Vec2], target: Vec2, task: TaskId, target_radius: float) -> bool:
    if _dist(objects[0], objects[1]) < 0.15:
        return False
    if min(_dist(gripper, o) for o in objects) < 0.1:
        return False
    # 初始时任务不能已经完成
    if _dist(objects[0], target) < target_radius + 0.1:
        return False
    if task != TaskId.STACK and _dist(objects[1], target) < target_radius + 0.05:
        return False
    return True


def reset(spec: TaskSpec) -> WorldState:
    """
    按变体编号生成初始状态

    Args:
        spec: 任务规格

    Returns:
        初始 WorldState

    Raises:
        SpecError: 1000 次拒绝采样后仍无法放置
    """
    rng = rng_stream(spec.variation_id, spec.placement_label)
    radius = TARGET_RADIUS[spec.task_id]
    low, high = BORDER_MARGIN, 1.0 - BORDER_MARGIN

    for _ in range(PLACEMENT_TRIES):
        points = rng.uniform(low, high, size=(4, 2))
        gripper = (float(points[0, 0]), float(points[0, 1]))
        objects = [(float(points[1, 0]), float(points[1, 1])),
                   (float(points[2, 0]), float(points[2, 1]))]
        target = objects[1] if spec.task_id == TaskId.STACK else (float(points[3, 0]), float(points[3, 1]))
        if _placement_ok(gripper, objects, target, spec.task_id, radius):
            return WorldState(
                gripper_xy=gripper,
                gripper_closed=False,
                holding=None,
                objects=tuple(objects),
                target_xy=target,
                target_radius=radius,
                task_id=spec.task_id,
                grasp_fail_counter=spec.flaky_grasps,
                max_steps=spec.max_steps,
            )

    logger.warning(f"[reset] 任务 {spec.task_id.name} 变体 {spec.variation_id} 无法满足放置约束")
    raise SpecError(f"变体 {spec.variation_id} 放置失败（{PLACEMENT_TRIES} 次拒绝采样）")


# ==================== 动力学与奖励 ====================

def potential(state: WorldState) -> float:
    """势函数 φ(s) = -|g - obj|·1[未抓住 obj] - |obj - target|"""
    obj = state.objects[0]
    value = -_dist(obj, state.target_xy)
    if state.holding != 0:
        value -= _dist(state.gripper_xy, obj)
    return value


def task_success(state: WorldState) -> bool:
    """物体 0 中心位于目标半径内且未被抓住"""
    return state.holding != 0 and _dist(state.objects[0], state.target_xy) <= state.target_radius


def _apply_subaction(state: WorldState, dx: float, dy: float, g: float) -> WorldState:
    gripper = (_clamp01(state.gripper_xy[0] + dx), _clamp01(state.gripper_xy[1] + dy))
    objects = list(state.objects)
    holding = state.holding
    counter = state.grasp_fail_counter
    closed = state.gripper_closed

    if g < 0:
        # 只在张开 -> 闭合的沿上尝试抓取
        if not closed and holding is None:
            nearest = None
            best = GRASP_RADIUS
            for i, xy in enumerate(objects):
                d = _dist(gripper, xy)
                if d <= best:
                    nearest, best = i, d
            if nearest is not None:
                if counter > 0:
                    counter -= 1
                    objects[nearest] = _nudge(gripper, objects[nearest])
                else:
                    holding = nearest
        closed = True
    else:
        closed = False
        holding = None

    if holding is not None:
        objects[holding] = gripper

    target = objects[1] if state.task_id == TaskId.STACK else state.target_xy
    return replace(state, gripper_xy=gripper, gripper_closed=closed, holding=holding,
                   objects=tuple(objects), target_xy=target, grasp_fail_counter=counter)


def _nudge(gripper: Vec2, obj: Vec2) -> Vec2:
    """打滑：物体沿 夹爪->物体 方向被推开 0.02（重合时沿 +x）"""
    d = _dist(gripper, obj)
    if d < 1e-12:
        ux, uy = 1.0, 0.0
    else:
        ux, uy = (obj[0] - gripper[0]) / d, (obj[1] - gripper[1]) / d
    return (_clamp01(obj[0] + NUDGE_DISTANCE * ux), _clamp01(obj[1] + NUDGE_DISTANCE * uy))


def simulate_substeps(state: WorldState, action: ActionChunk) -> List[WorldState]:
    """逐个子动作推进，返回包含起点在内的 H+1 个中间状态（不处理 done/奖励）"""
    states = [state]
    for dx, dy, g in action.actions:
        states.append(_apply_subaction(states[-1], float(dx), float(dy), float(g)))
    return states


def step(state: WorldState, action: ActionChunk, gamma: float = 0.9) -> Tuple[WorldState, float, bool, bool]:
    """
    执行一个动作块

    Args:
        state: 当前状态（不能是已结束状态）
        action: 长度 H 的动作块
        gamma: 势函数塑形的折扣

    Returns:
        (next_state, reward, done, success)；reward 为各子动作塑形奖励之和，
        成功时再加终局奖励 10
    """
    if state.done:
        raise UsageError("回合已结束，不能继续 step")

    substates = simulate_substeps(state, action)
    reward = 0.0
    for before, after in zip(substates[:-1], substates[1:]):
        reward += gamma * potential(after) - potential(before)

    final = substates[-1]
    success = task_success(final)
    if success:
        reward += SUCCESS_BONUS
    step_count = state.step_count + 1
    done = success or step_count >= state.max_steps
    final = replace(final, step_count=step_count, done=done, success=success)
    return final, float(reward), done, success


def observe(state: WorldState) -> ObservationVec:
    """完全可观测：展平真值状态"""
    return ObservationVec(
        gripper_xy=state.gripper_xy,
        holding=int(state.holding is not None),
        gripper_closed=int(state.gripper_closed),
        objects_xy=tuple(state.objects),
        target_xy=state.target_xy,
        task_id=int(state.task_id),
    )


def state_from_observation(obs: ObservationVec) -> WorldState:
    """
    由观测重建可渲染的状态（世界模型解码结果没有真值状态）

    holding 标志为 1 时认为抓住的是离夹爪最近的物体。
    """
    holding = None
    if obs.holding and obs.objects_xy:
        holding = min(range(obs.n_objects), key=lambda i: _dist(obs.gripper_xy, obs.objects_xy[i]))
    task = TaskId(min(obs.task_id, N_TASKS - 1))
    return WorldState(
        gripper_xy=obs.gripper_xy,
        gripper_closed=bool(obs.gripper_closed),
        holding=holding,
        objects=tuple(obs.objects_xy),
        target_xy=obs.target_xy,
        target_radius=TARGET_RADIUS[task],
        task_id=task,
    )


def as_observation(state) -> ObservationVec:
    """规划器节点可能持有 WorldState 或 ObservationVec，统一成观测"""
    if isinstance(state, ObservationVec):
        return state
    return observe(state)


# ==================== 渲染 ====================

def _pixel_index(v: float) -> int:
    return min(FRAME_SIZE - 1, max(0, int(v * FRAME_SIZE)))


def render(state: WorldState) -> np.ndarray:
    """
    16x16 灰度栅格：背景 0，目标环 0.25，物体圆盘 0.5，夹爪 1.0

    frame[row, col]，row 对应 y，col 对应 x；像素中心 (i + 0.5) / 16。
    """
    centers = (np.arange(FRAME_SIZE) + 0.5) / FRAME_SIZE
    xs, ys = np.meshgrid(centers, centers)
    frame = np.zeros((FRAME_SIZE, FRAME_SIZE), dtype=np.float64)

    ring = np.hypot(xs - state.target_xy[0], ys - state.target_xy[1])
    frame[np.abs(ring - state.target_radius) <= 0.5 / FRAME_SIZE] = 0.25

    for ox, oy in state.objects:
        frame[np.hypot(xs - ox, ys - oy) <= state.object_radius] = 0.5
        frame[_pixel_index(oy), _pixel_index(ox)] = 0.5

    frame[_pixel_index(state.gripper_xy[1]), _pixel_index(state.gripper_xy[0])] = 1.0
    return frame


def frame_to_pgm(frame: np.ndarray) -> bytes:
    """P5 二进制 PGM，maxval 255"""
    pixels = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, frame: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(frame_to_pgm(frame))
    return path


# ==================== 脚本专家 ====================

def _expert_subaction(state: WorldState, mode: str) -> Tuple[float, float, float]:
    if task_success(state):
        return 0.0, 0.0, 1.0

    g = state.gripper_xy
    if state.holding == 0:
        dist = _dist(g, state.target_xy)
        if dist <= EXPERT_RELEASE_DIST:
            return 0.0, 0.0, 1.0
        step_len = min(EXPERT_STEP, dist)
        return ((state.target_xy[0] - g[0]) / dist * step_len,
                (state.target_xy[1] - g[1]) / dist * step_len, -1.0)

    if state.holding is not None or state.gripper_closed:
        return 0.0, 0.0, 1.0

    obj = state.objects[0]
    dist = _dist(g, obj)
    if dist <= EXPERT_GRASP_DIST:
        return 0.0, 0.0, -1.0

    ux, uy = (obj[0] - g[0]) / dist, (obj[1] - g[1]) / dist
    side = 1.0 if mode == "left" else -1.0
    detour = side * EXPERT_DETOUR_GAIN * min(1.0, dist / EXPERT_DETOUR_RANGE)
    vx, vy = ux - detour * uy, uy + detour * ux
    norm = math.hypot(vx, vy)
    step_len = min(EXPERT_STEP, dist)
    return vx / norm * step_len, vy / norm * step_len, 1.0


def scripted_expert(state: WorldState, mode: str, horizon: int = 4) -> ActionChunk:
    """
    脚本专家：比例控制器，从左/右绕行点接近物体 0，抓取、搬运、在目标处释放

    在状态的特权副本上逐子步模拟，所以块内能对打滑作出反应。

    Args:
        state: 当前真值状态
        mode: "left" 或 "right"
        horizon: 动作块长度 H
    """
    if mode not in EXPERT_MODES:
        raise UsageError(f"专家模式必须是 {EXPERT_MODES} 之一: {mode}")
    actions = []
    current = state
    for _ in range(horizon):
        dx, dy, g = _expert_subaction(current, mode)
        actions.append((dx, dy, g))
        current = _apply_subaction(current, dx, dy, g)
    return ActionChunk(np.asarray(actions, dtype=np.float64))


class TabletopEnv:
    """有状态的环境封装，供 run_episode 与数据生成使用"""

    def __init__(self, spec: TaskSpec, gamma: float = 0.9):
        self.spec = spec
        self.gamma = gamma
        self.state: Optional[WorldState] = None

    def reset(self) -> ObservationVec:
        self.state = reset(self.spec)
        return observe(self.state)

    def step(self, action: ActionChunk) -> Tuple[ObservationVec, float, bool, bool]:
        if self.state is None:
            raise UsageError("请先调用 reset()")
        self.state, reward, done, success = step(self.state, action, self.gamma)
        return observe(self.state), reward, done, success

    def observe(self) -> ObservationVec:
        return observe(self.state)

    def render(self) -> np.ndarray:
        return render(self.state)


class SimulatorModel:
    """以精确仿真器充当世界模型（oracle 对照、恢复案例）"""

    uses_world_state = True

    def __init__(self, gamma: float = 0.9):
        self.gamma = gamma

    def rollout(self, state: WorldState, action: ActionChunk, rng=None) -> Tuple[WorldState, float]:
        if state.done:
            return state, 0.0
        next_state, reward, _, _ = step(state, action, self.gamma)
        return next_state, reward

