"""
实验清单：记录每个产物的来源（配置快照、种子、数据集与检查点哈希）
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List

from .config import Config, config_hash, config_to_dict
from .io import file_sha256, read_json, write_json

MANIFEST_FILE = "manifest.json"


def _now() -> str:
    return datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')


@dataclass
class ExperimentManifest:
    """
    单条命令的清单

    manifest_id 只由内容（不含时间戳）决定，报告引用它，
    因此重复运行得到的报告逐字节相同。
    """

    command: str
    config: dict
    config_hash: str
    seeds: List[int] = field(default_factory=list)
    datasets: Dict[str, str] = field(default_factory=dict)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""

    @classmethod
    def create(cls, command: str, config: Config, seeds: List[int] = None) -> "ExperimentManifest":
        return cls(
            command=command,
            config=config_to_dict(config),
            config_hash=config_hash(config),
            seeds=list(seeds if seeds is not None else [config.seed]),
            started_at=_now(),
        )

    @property
    def manifest_id(self) -> str:
        content = asdict(self)
        content.pop("started_at")
        content.pop("finished_at")
        canonical = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def add_dataset(self, name: str, path) -> str:
        self.datasets[name] = file_sha256(path)
        return self.datasets[name]

    def add_checkpoint(self, name: str, path) -> str:
        self.checkpoints[name] = file_sha256(path)
        return self.checkpoints[name]

    def add_input(self, name: str, value: str) -> None:
        """上游清单 id 等其他溯源信息"""
        self.inputs[name] = value

    def save(self, directory, filename: str = MANIFEST_FILE) -> Path:
        self.finished_at = _now()
        data = asdict(self)
        data["manifest_id"] = self.manifest_id
        return write_json(Path(directory) / filename, data)

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        data = read_json(path)
        data.pop("manifest_id", None)
        return cls(**data)
