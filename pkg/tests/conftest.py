"""测试公共夹具"""
import sys
from pathlib import Path

import pytest

# 添加项目根目录到 Python 路径
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.utils.config import Config, LoggingConfig  # noqa: E402


@pytest.fixture
def tiny_config(tmp_path):
    """小规模配置：几十步训练、少量变体，路径都指向临时目录"""
    return Config(
        seed=3,
        n_sim=4,
        depth_d=2,
        k_candidates=3,
        diffusion_steps_t=5,
        diffusion_reference_steps=None,
        diffusion_beta_start=0.05,
        diffusion_beta_end=0.3,
        policy_hidden=(16,),
        wm_trunk_hidden=(16,),
        wm_feature_dim=8,
        wm_head_hidden=(8,),
        codebook_size=4,
        policy_train_steps=6,
        wm_train_steps=6,
        warmup_steps=2,
        batch_size=8,
        max_steps=6,
        n_variations=2,
        eval_repeats=1,
        n_train_variations=2,
        exploration_ratio=0.5,
        data_dir=str(tmp_path / "data"),
        checkpoint_dir=str(tmp_path / "checkpoints"),
        out_dir=str(tmp_path / "runs"),
        logging=LoggingConfig(level="WARNING", file=None),
    )
