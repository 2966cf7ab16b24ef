import pytest
import torch

from xsgan.config import ExperimentConfig, ModelConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_model_cfg():
    """Two blocks, two scales; small enough for finite-difference checks."""
    return ModelConfig(depth=2, hidden_dim=32, num_heads=2, head_dim=16, patch_size=2,
                       grid=4, channels_in=3, mlp_ratio=2.0, output_layers=(1, 2),
                       scale_resolutions=(8, 4), latent_dim=8, style_dim=16)


@pytest.fixture
def micro_cfg():
    """Full experiment config sized for second-scale training tests."""
    return ExperimentConfig().with_overrides({
        "g_depth": "3", "g_hidden_dim": "32", "g_num_heads": "2", "g_head_dim": "16",
        "g_grid": "4", "g_patch_size": "2", "g_output_layers": "1,2,3",
        "g_scale_resolutions": "8,4,2", "g_latent_dim": "8", "g_style_dim": "16",
        "d_depth": "2", "d_hidden_dim": "32", "d_num_heads": "2", "d_head_dim": "16",
        "d_scale_resolutions": "8,4,2", "d_patch_sizes": "2,2,1",
        "cons_weights": "0.5,1.0",
        "data_resolution": "8", "data_num_classes": "4", "data_samples_per_class": "8",
        "train_batch_size": "8", "train_iterations": "3", "train_checkpoint_every": "2",
        "train_eval_samples": "16",
    })
