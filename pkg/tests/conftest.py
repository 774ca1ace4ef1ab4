import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from trimae.data import MODALITIES, MultimodalSample


def make_sample(
    label: int = 0,
    size: int = 32,
    sid: str = "s0",
    seed: int = 0,
    present=(True, True, True),
) -> MultimodalSample:
    rng = np.random.default_rng(seed)
    images = {}
    for k, mod in enumerate(MODALITIES):
        if present[k]:
            images[mod] = rng.normal(0, 1, size=(3, size, size)).astype(np.float32)
        else:
            images[mod] = np.zeros((3, size, size), dtype=np.float32)
    return MultimodalSample(
        id=sid,
        fundus=images["fundus"],
        oct=images["oct"],
        vf=images["vf"],
        label=label,
        present=tuple(present),
    )


def make_samples(n_per_class: int, size: int = 32, seed: int = 0):
    out = []
    for label in range(4):
        for i in range(n_per_class):
            out.append(
                make_sample(label, size, sid=f"c{label}-{i:03d}", seed=seed * 100_003 + label * 1000 + i)
            )
    return out


@pytest.fixture
def tiny_samples():
    return make_samples(2, size=32)
