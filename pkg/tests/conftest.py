"""Shared fixtures for the sonar_kd test suite."""

import os
from typing import Sequence, Tuple

import numpy as np
import pytest

from sonar_kd.core.detector import FpnLogits, Model, ModelSpec
from sonar_kd.core.vit import ViTConfig


def pytest_collection_modifyitems(config, items):
    """Skip tests marked slow unless SONAR_KD_SLOW=1."""
    if os.environ.get("SONAR_KD_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set SONAR_KD_SLOW=1 to run end-to-end tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_spec(vit: bool = False, **overrides) -> ModelSpec:
    """A detector small enough for finite differences: stage widths 2/4/8/16/32 on 64x64 input."""
    values = dict(
        width_mult=1.0,
        depth_mult=1.0,
        base_channels=2,
        base_depth=1,
        input_size=(64, 64),
        vit=ViTConfig(num_heads=4) if vit else None,
    )
    values.update(overrides)
    return ModelSpec(**values)


def random_logits(
    rng: np.random.Generator,
    batch: int = 2,
    num_classes: int = 2,
    grids: Sequence[Tuple[int, int]] = ((4, 4), (2, 2), (1, 1)),
    scale: float = 1.0,
) -> FpnLogits:
    arrays = []
    for h, w in grids:
        arrays.append(
            (
                scale * rng.normal(size=(batch, num_classes, h, w)),
                scale * rng.normal(size=(batch, 4, h, w)),
                scale * rng.normal(size=(batch, 1, h, w)),
            )
        )
    return FpnLogits.from_arrays(arrays, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    return Model(tiny_spec())


@pytest.fixture(scope="session")
def tiny_vit_model():
    return Model(tiny_spec(vit=True))
