"""Seeded parameter initializers."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def init_param(shape, scheme: str, rng: np.random.Generator, sigma: float = 0.02) -> Tensor:
    """Create a trainable tensor.

    ``scheme`` is one of ``xavier_uniform``, ``zeros``, ``ones`` or ``normal``
    (standard deviation ``sigma``). Xavier bounds use the first two axes as
    fan-in/fan-out; for 3-d tensors the first two axes are used, so every
    slice along the last axis gets the bound of a square matrix.
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "ones":
        data = np.ones(shape)
    elif scheme == "normal":
        data = rng.normal(0.0, sigma, size=shape)
    elif scheme == "xavier_uniform":
        if len(shape) == 1:
            fan_in = fan_out = shape[0]
        else:
            fan_in = shape[0]
            fan_out = shape[1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=True)
