"""Parameter initialization helpers."""

import numpy as np


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0):
    """Normal draws with resampling outside ±bound standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out
