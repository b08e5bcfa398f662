"""Shared fixtures: a desk-scale config small enough for per-test training."""

import numpy as np
import pytest

from srfseg import config as cfgmod


def make_tiny_config(out, **overrides):
    """A config that trains in a couple of seconds on one core."""
    tree = {
        "seed": 0,
        "out": str(out),
        "net": {"stage_widths": (8, 12, 16, 32), "decoder_width": 16,
                "embedding_dim": 16, "blocks_per_stage": 1},
        "data": {"size": (32, 32), "train_scenes": 6, "eval_scenes": 3},
        "train": {"steps": 4, "batch_size": 2, "checkpoint_interval": 2},
        "loss": {"anchors": 64},
        "ablate": {"seeds": 1},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(tree.get(key), dict):
            tree[key] = {**tree[key], **value}
        else:
            tree[key] = value
    return cfgmod.RunConfig.model_validate(tree)


@pytest.fixture
def tiny_config(tmp_path):
    return make_tiny_config(tmp_path / "run")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
