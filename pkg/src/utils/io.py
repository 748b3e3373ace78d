"""
文件读写工具：JSONL / CSV / JSON、检查点、数据集记录

所有 JSON 都按键排序写出，浮点数使用 Python 的最短可逆表示，
同样的输入重跑得到逐字节相同的文件。
"""
import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..core.errors import UsageError
from ..core.nn import OptimizerState, decode_array, encode_array
from ..core.types import ActionChunk, ObservationVec

CHECKPOINT_FORMAT = "storm-checkpoint"
CHECKPOINT_VERSION = 1


def _prepare(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_json(path, obj: Any) -> Path:
    path = _prepare(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path


def read_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(path, records: Iterable[Any]) -> int:
    """写出 JSONL，返回行数"""
    path = _prepare(path)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(dumps(record) + "\n")
            count += 1
    return count


def read_jsonl(path) -> List[Any]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise UsageError(f"{path} 第 {line_no} 行不是合法 JSON: {e}") from e
    return records


def _csv_cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = _prepare(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row])
    return path


def read_csv(path) -> Tuple[List[str], List[Dict[str, str]]]:
    """返回 (表头, 行字典列表)；数值保持字符串，由调用方转换"""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


# ==================== 检查点 ====================

@dataclass(eq=False)
class Checkpoint:
    kind: str
    meta: dict
    params: Dict[str, np.ndarray]
    optimizer: Optional[OptimizerState] = None


def save_checkpoint(path, kind: str, meta: dict, params: Dict[str, np.ndarray],
                    optimizer: OptimizerState = None) -> Path:
    """
    写出 JSON 检查点

    布局: {"format", "version", "kind", "meta",
           "params": {名称: {"shape", "data"}}, "optimizer": {...} | null}
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta,
        "params": {name: encode_array(arr) for name, arr in params.items()},
        "optimizer": optimizer.to_dict() if optimizer is not None else None,
    }
    path = _prepare(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(payload) + "\n")
    return path


def load_checkpoint(path, expected_kind: str = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"检查点不存在: {path}")
    data = read_json(path)
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        raise UsageError(f"不是检查点文件: {path}")
    if data.get("version") != CHECKPOINT_VERSION:
        raise UsageError(f"不支持的检查点版本 {data.get('version')}: {path}")
    if expected_kind and data.get("kind") != expected_kind:
        raise UsageError(f"检查点类型应为 {expected_kind}，实际 {data.get('kind')}: {path}")
    params = {name: decode_array(arr) for name, arr in data["params"].items()}
    optimizer = OptimizerState.from_dict(data["optimizer"]) if data.get("optimizer") else None
    return Checkpoint(data["kind"], data.get("meta", {}), params, optimizer)


def save_model(path, model, optimizer: OptimizerState = None, **extra_meta) -> Path:
    """模型需提供 kind / meta() / parameters()"""
    meta = dict(model.meta())
    meta.update(extra_meta)
    return save_checkpoint(path, model.kind, meta, model.parameters(), optimizer)


# ==================== 数据集记录 ====================

def demo_record(obs: ObservationVec, chunk: ActionChunk, mode: str) -> dict:
    return {"obs": [float(v) for v in obs.to_array()], "chunk": chunk.to_list(), "mode": mode}


def _obs_from_list(values) -> ObservationVec:
    arr = np.asarray(values, dtype=np.float64)
    return ObservationVec.from_array(arr, (arr.size - 7) // 2)


def demo_from_record(record: dict) -> Tuple[ObservationVec, ActionChunk, str]:
    return _obs_from_list(record["obs"]), ActionChunk(np.asarray(record["chunk"])), record["mode"]


def transition_record(obs: ObservationVec, chunk: ActionChunk, next_obs: ObservationVec,
                      reward: float, source: str = "expert") -> dict:
    return {
        "obs": [float(v) for v in obs.to_array()],
        "action": chunk.to_list(),
        "next_obs": [float(v) for v in next_obs.to_array()],
        "reward": float(reward),
        "source": source,
    }


def transition_from_record(record: dict) -> Tuple[ObservationVec, ActionChunk, ObservationVec, float]:
    return (_obs_from_list(record["obs"]), ActionChunk(np.asarray(record["action"])),
            _obs_from_list(record["next_obs"]), float(record["reward"]))
