from __future__ import annotations

import numpy as np

from .tensor import Parameter


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, name: str) -> Parameter:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-a, a, size=shape), name)


def zeros(shape, name: str) -> Parameter:
    return Parameter(np.zeros(shape), name)
