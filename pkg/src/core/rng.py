"""
确定性随机数流

全项目只使用一种随机数算法（numpy PCG64），每个子模块通过 (seed, label)
派生自己的独立流，不共享生成器。
"""
import hashlib

import numpy as np


def _label_words(stream_label: str) -> list:
    """把标签哈希成 4 个 32 位整数，作为 SeedSequence 的熵"""
    digest = hashlib.sha256(stream_label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def rng_stream(seed: int, stream_label: str) -> np.random.Generator:
    """
    派生一个确定性随机数流

    Args:
        seed: 非负整数种子
        stream_label: 子流标签，例如 "env-init"、"policy"

    Returns:
        numpy Generator；相同 (seed, label) 得到逐位相同的序列
    """
    if seed < 0:
        raise ValueError(f"seed 必须为非负整数: {seed}")
    entropy = [int(seed)] + _label_words(stream_label)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
