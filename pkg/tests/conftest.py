import numpy as np
import pytest
import torch

from sfdiff.data import GeneratorSpec, gen_synthetic
from sfdiff.pipeline import config_from_dict


def mini_config(**overrides):
    """Small four-level config that keeps forward passes in the millisecond range."""
    base = {
        "level_sizes": [64, 32, 16, 8],
        "knn_conv": 8,
        "knn_corr": 8,
        "knn_upconv": 4,
        "ddim_steps": 2,
        "widths": {
            "features": [8, 8, 12, 16],
            "cv_state": 12,
            "correlation": 12,
            "correlation_hidden": [8, 8, 8, 8],
            "flow_embed": 8,
            "denoiser_hidden": 16,
            "time_embed": 8,
            "init_hidden": 12,
        },
        "optimizer": {"epochs": 3, "batch_size": 2, "lr": 1e-3},
    }
    from sfdiff.pipeline import deep_merge
    return config_from_dict(deep_merge(base, overrides))


def tiny_samples(n, n_points=64, seed=0, **spec_overrides):
    spec = GeneratorSpec(n_points=n_points, objects_min=1, objects_max=2,
                         translation_min=0.05, translation_max=0.2, **spec_overrides)
    return [gen_synthetic(spec, seed=seed + i) for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
