"""Shared fixtures: a desk-scale configuration that runs every stage in seconds."""

import pytest

from affectcae.config import RunConfig


def small_config(**sections) -> RunConfig:
    base = {
        "run": {"seed": 7, "conv_channels": (4, 4, 8), "input_size": 8},
        "pretrain": {"learning_rate": 1e-3, "batch_size": 8, "epochs": 2},
        "cae": {"learning_rate": 1e-3, "batch_size": 16, "epochs": 2, "encoder_size": 6},
        "svr": {"c_grid": [0.1, 1.0], "epsilon_grid": [0.01, 0.1]},
        "postprocess": {"windows": [1, 3, 5], "shifts": [0, 1, 2]},
        "synth": {"subjects": 3, "frames": 40, "dev_subjects": 1, "images_per_class": 3},
        "sweep": {"freeze": [0, 3], "encoder_sizes": [4, 6], "delays": [0, 5]},
    }
    for section, values in sections.items():
        base.setdefault(section, {}).update(values)
    return RunConfig().with_overrides(**base)


@pytest.fixture
def tiny_config() -> RunConfig:
    return small_config()
