"""
PUCT 蒙特卡洛树搜索规划器

选择 -> 扩展（提议策略给出 K 个候选与先验）-> 评估（世界模型推演得到 r̂）
-> 沿路径折扣回传；每次决策都新建一棵树，最终取根节点访问次数最多的动作。

策略与模型只需满足鸭子类型接口：
    policy.propose(state, k, rng) -> CandidateSet
    policy.act(state, rng) -> ActionChunk
    model.rollout(state, action, rng) -> (next_state, r̂)
"""
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .env import TabletopEnv, observe
from .errors import PlannerError, UsageError
from .types import ActionChunk, Trajectory, TrajectoryStep
from ..utils.logger import get_logger

logger = get_logger("planner")

ORACLE_MAX_PATHS = 100_000
EPISODE_MODES = ("storm", "reactive")


@dataclass
class EdgeStats:
    """边统计 {N, W, Q, P}；N > 0 时 Q = W / N，否则 Q = 0"""

    P: float
    N: int = 0
    W: float = 0.0
    Q: float = 0.0

    def update(self, value: float) -> None:
        self.N += 1
        self.W += value
        self.Q = self.W / self.N


@dataclass(eq=False)
class Edge:
    index: int
    action: ActionChunk
    stats: EdgeStats
    reward: Optional[float] = None
    leaf_value: Optional[float] = None
    child: Optional["TreeNode"] = None


@dataclass(eq=False)
class TreeNode:
    state: Any
    depth: int
    reward: float = 0.0
    edges: List[Edge] = field(default_factory=list)
    expanded: bool = False

    @property
    def terminal(self) -> bool:
        return bool(getattr(self.state, "done", False))

    def total_visits(self) -> int:
        return sum(e.stats.N for e in self.edges)


@dataclass
class PlanResult:
    chosen: ActionChunk
    chosen_index: int
    visits: List[int]
    q_values: List[float]
    priors: List[float]
    n_simulations: int
    candidates: List[ActionChunk] = field(default_factory=list)
    trace: List[dict] = field(default_factory=list)


def puct_score(edge: EdgeStats, parent_total_n: int, c_puct: float) -> float:
    """Q + c·P·sqrt(ΣN) / (1 + N)"""
    return edge.Q + c_puct * edge.P * math.sqrt(parent_total_n) / (1 + edge.N)


def select_child(node: TreeNode, c_puct: float) -> Edge:
    """最大 PUCT；平分时取先验大者，再取下标小者"""
    total = node.total_visits()
    return max(node.edges, key=lambda e: (puct_score(e.stats, total, c_puct), e.stats.P, -e.index))


def select_path(root: TreeNode, c_puct: float, max_depth: int) -> Tuple[List[Edge], TreeNode]:
    """
    从根沿 argmax-PUCT 下行，直到遇到未展开节点、未评估的边或深度上限

    Returns:
        (路径上的边, 停止处的节点)；若最后一条边尚未评估，节点为其父节点
    """
    path = []
    node = root
    while node.expanded and node.depth < max_depth and not node.terminal:
        edge = select_child(node, c_puct)
        path.append(edge)
        if edge.child is None:
            break
        node = edge.child
    return path, node


def expand(node: TreeNode, policy, k: int, rng: np.random.Generator = None) -> None:
    """为节点创建 k 条边，P 取提议先验，N = W = Q = 0"""
    if node.expanded:
        raise UsageError(f"节点（深度 {node.depth}）已展开")
    candidates = policy.propose(node.state, k, rng)
    node.edges = [Edge(i, chunk, EdgeStats(P=prior))
                  for i, (chunk, prior) in enumerate(zip(candidates.chunks, candidates.priors))]
    node.expanded = True


def evaluate(node: TreeNode, edge: Edge, model, rng: np.random.Generator = None, gamma: float = 0.9,
             leaf_rollout_steps: int = 1, policy=None) -> float:
    """
    用世界模型推演一条未评估的边，挂上子节点并返回叶值 V

    leaf_rollout_steps > 1 时沿策略采样继续推演，V 为折扣奖励和。
    """
    if edge.child is not None:
        raise UsageError(f"边 {edge.index} 已评估")
    next_state, r_hat = model.rollout(node.state, edge.action, rng)
    value = float(r_hat)
    state = next_state
    discount = 1.0
    for _ in range(leaf_rollout_steps - 1):
        if getattr(state, "done", False) or policy is None:
            break
        continuation = policy.propose(state, 1, rng).chunks[0]
        state, r_next = model.rollout(state, continuation, rng)
        discount *= gamma
        value += discount * float(r_next)
    edge.reward = float(r_hat)
    edge.leaf_value = value
    edge.child = TreeNode(next_state, node.depth + 1, reward=float(r_hat))
    return value


def path_returns(path: List[Edge], leaf_value: float, gamma: float, discounted: bool = True) -> List[float]:
    """
    每条边的回传值 G_j = Σ_{i=j}^{L-1} γ^(i-j)·r̂_i + γ^(L-j)·V

    非折扣变体中每条边都只加 V。
    """
    if not discounted:
        return [leaf_value] * len(path)
    returns = [0.0] * len(path)
    g = leaf_value
    returns[-1] = g
    for j in range(len(path) - 2, -1, -1):
        g = path[j].reward + gamma * g
        returns[j] = g
    return returns


def backpropagate(path: List[Edge], leaf_value: float, gamma: float, discounted: bool = True) -> List[float]:
    """更新路径上各边的 N、W、Q；返回各边收到的 G_j"""
    if not path:
        raise UsageError("回传路径为空")
    returns = path_returns(path, leaf_value, gamma, discounted)
    for edge, g in zip(path, returns):
        edge.stats.update(g)
    return returns


def _final_choice(root: TreeNode) -> Edge:
    """访问次数最多；平分取 Q 大者，再取下标小者"""
    return max(root.edges, key=lambda e: (e.stats.N, e.stats.Q, -e.index))


def run_simulation(root: TreeNode, policy, model, config, rng: np.random.Generator) -> Dict[str, Any]:
    """一次模拟：选择 -> 必要时展开 -> 评估一个未访问子节点 -> 回传"""
    path, node = select_path(root, config.c_puct, config.depth_d)
    if path and path[-1].child is None:
        leaf_value = evaluate(node, path[-1], model, rng, config.gamma, config.leaf_rollout_steps, policy)
    elif node.depth < config.depth_d and not node.terminal:
        expand(node, policy, config.k_candidates, rng)
        edge = select_child(node, config.c_puct)
        path.append(edge)
        leaf_value = evaluate(node, edge, model, rng, config.gamma, config.leaf_rollout_steps, policy)
    else:
        # 深度上限或终止状态：用最后一条边保存的叶值再回传一次
        leaf_value = path[-1].leaf_value
    returns = backpropagate(path, leaf_value, config.gamma, config.discounted_backup)
    return {
        "path": [e.index for e in path],
        "value": leaf_value,
        "returns": returns,
        "N": [e.stats.N for e in path],
        "Q": [e.stats.Q for e in path],
    }


def plan(root_state, policy, model, config, rng: np.random.Generator = None, trace: bool = False) -> PlanResult:
    """
    对当前状态运行 n_sim 次模拟并返回根节点访问最多的动作

    Args:
        root_state: 观测（学习的世界模型）或 WorldState（精确仿真器）
        policy: 提议策略
        model: 世界模型
        config: 提供 n_sim、depth_d、gamma、c_puct、k_candidates、
            discounted_backup、leaf_rollout_steps
        rng: 随机流
        trace: 是否记录每次模拟的搜索轨迹
    """
    root = TreeNode(root_state, depth=0)
    if root.terminal:
        raise UsageError("不能在已结束的状态上规划")

    records = []
    for sim in range(config.n_sim):
        record = run_simulation(root, policy, model, config, rng)
        if trace:
            record["sim"] = sim
            records.append(record)

    best = _final_choice(root)
    return PlanResult(
        chosen=best.action,
        chosen_index=best.index,
        visits=[e.stats.N for e in root.edges],
        q_values=[e.stats.Q for e in root.edges],
        priors=[e.stats.P for e in root.edges],
        n_simulations=config.n_sim,
        candidates=[e.action for e in root.edges],
        trace=records,
    )


def brute_force_oracle(root_state, policy, model, gamma: float, depth: int, k: int,
                       rng: np.random.Generator = None) -> Tuple[int, ActionChunk, float]:
    """
    穷举全部 K^depth 条动作路径，返回折扣回报最大路径的首个动作

    候选树由 policy 固定给出（同一状态必须得到相同候选）；平分取下标小者。

    Returns:
        (首动作下标, 首动作, 最优折扣回报)
    """
    if k ** depth > ORACLE_MAX_PATHS:
        raise PlannerError(f"穷举规模 {k}^{depth} 超过上限 {ORACLE_MAX_PATHS}")

    def best_value(state, remaining: int) -> float:
        if remaining == 0 or getattr(state, "done", False):
            return 0.0
        candidates = policy.propose(state, k, rng)
        best = -math.inf
        for chunk in candidates.chunks:
            next_state, r_hat = model.rollout(state, chunk, rng)
            best = max(best, r_hat + gamma * best_value(next_state, remaining - 1))
        return best

    candidates = policy.propose(root_state, k, rng)
    best_index, best_return = 0, -math.inf
    for i, chunk in enumerate(candidates.chunks):
        next_state, r_hat = model.rollout(root_state, chunk, rng)
        value = r_hat + gamma * best_value(next_state, depth - 1)
        if value > best_return:
            best_index, best_return = i, value
    return best_index, candidates.chunks[best_index], best_return


def run_episode(env: TabletopEnv, policy, model, config, mode: str = "storm",
                rng: np.random.Generator = None, trace_sink: List[dict] = None) -> Trajectory:
    """
    闭环执行一个回合：每步观测 -> 规划（或反应式单次采样）-> 在真实环境执行

    Args:
        env: 环境（本函数负责 reset）
        policy: 提议策略
        model: 世界模型；model.uses_world_state 为真时规划器节点持有真值状态
        config: 运行配置
        mode: "storm" 或 "reactive"
        rng: 随机流
        trace_sink: 非空时追加每个决策步的搜索轨迹
    """
    if mode not in EPISODE_MODES:
        raise UsageError(f"mode 必须是 {EPISODE_MODES} 之一: {mode}")
    env.reset()
    spec = env.spec
    trajectory = Trajectory(seed=config.seed, task_id=int(spec.task_id), variation_id=spec.variation_id,
                            meta={"mode": mode, "flaky_grasps": spec.flaky_grasps})
    uses_world_state = getattr(model, "uses_world_state", False) or getattr(policy, "uses_world_state", False)

    done = False
    while not done:
        state = env.state
        planning_state = state if uses_world_state else observe(state)
        if mode == "storm":
            result = plan(planning_state, policy, model, config, rng, trace=trace_sink is not None)
            action = result.chosen
            if trace_sink is not None:
                trace_sink.append({
                    "step": state.step_count,
                    "chosen": result.chosen_index,
                    "visits": result.visits,
                    "q_values": result.q_values,
                    "priors": result.priors,
                    "candidates": [chunk.to_list() for chunk in result.candidates],
                    "simulations": result.trace,
                })
        else:
            action = policy.act(planning_state, rng)
        obs = observe(state)
        _, reward, done, success = env.step(action)
        trajectory.steps.append(TrajectoryStep(obs, action, reward, done, success))

    logger.debug(f"[episode] {spec.task_id.name} 变体 {spec.variation_id} 模式 {mode}: "
                 f"{'成功' if trajectory.success else '失败'}，{len(trajectory.steps)} 步")
    return trajectory
