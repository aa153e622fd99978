"""Shared test helpers."""

from __future__ import annotations

import numpy as np

from thermid.trace import Trace


def make_trace(
    n: int,
    rate_hz: float = 1.0,
    seed: int = 0,
    temp_fn=None,
) -> Trace:
    """A well-formed trace with randomized but in-range inputs."""
    rng = np.random.default_rng(seed)
    t = np.arange(n) / rate_hz
    f_big = rng.choice(np.linspace(200.0, 2000.0, 10), size=n)
    f_little = rng.choice(np.linspace(200.0, 1500.0, 6), size=n)
    util = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=(n, 8))
    temp = temp_fn(t) if temp_fn is not None else 21.0 + 5.0 * rng.random(n)
    return Trace(
        t=t, f_big=f_big, f_little=f_little, util=util, temp=temp, rate_hz=rate_hz
    )
