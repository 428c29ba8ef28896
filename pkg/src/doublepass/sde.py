"""Ito/Stratonovich stepping and reproducible Wiener increment streams.

Noise is drawn from the counter-based Philox generator keyed directly by
(master_seed, stream_index), so every trajectory in an ensemble owns an
independent stream that can be replayed bit-for-bit without coordination
between workers.  Uniforms are mapped to Gaussians through the inverse CDF
(one raw 64-bit word per deviate), which keeps the draw order trivially
fixed; this choice is part of the reproducibility contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtri

_CHUNK = 4096

VALID_SCHEMES = ("euler_ito", "heun_stratonovich")


@dataclass(frozen=True)
class SdeStepperConfig:
    """Step size and scheme for a trajectory integration."""

    dt: float
    scheme: str = "euler_ito"

    def __post_init__(self) -> None:
        if not np.isfinite(self.dt) or self.dt <= 0.0:
            raise ValueError(f"dt must be positive and finite, got {self.dt!r}")
        if self.dt > 1e-2:
            raise ValueError(f"dt = {self.dt:g} too coarse (cap 1e-2)")
        if self.scheme not in VALID_SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")


class NoiseStream:
    """Deterministic stream of Wiener increments N(0, dt).

    Same (master_seed, stream_index, dt) always yields the identical
    sequence, independent of chunking or how many increments other
    streams have consumed.
    """

    def __init__(self, master_seed: int, stream_index: int, dt: float):
        if not (0 <= int(master_seed) < 2**64):
            raise ValueError("master_seed must fit in uint64")
        if not (0 <= int(stream_index) < 2**64):
            raise ValueError("stream_index must fit in uint64")
        if not np.isfinite(dt) or dt <= 0.0:
            raise ValueError(f"dt must be positive and finite, got {dt!r}")
        self.master_seed = int(master_seed)
        self.stream_index = int(stream_index)
        self.dt = float(dt)
        key = np.array([self.master_seed, self.stream_index], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self._buffer = np.empty(0)
        self._pos = 0

    def _draw_normals(self, n: int) -> np.ndarray:
        raw = self._bitgen.random_raw(n)
        # 53-bit uniform strictly inside (0, 1), then inverse CDF
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return ndtri(u)

    def increments(self, n: int) -> np.ndarray:
        """Next n Wiener increments as an array."""
        if n < 0:
            raise ValueError("n must be non-negative")
        out = np.empty(n)
        filled = 0
        avail = self._buffer.size - self._pos
        if avail > 0:
            take = min(avail, n)
            out[:take] = self._buffer[self._pos : self._pos + take]
            self._pos += take
            filled = take
        if filled < n:
            fresh = self._draw_normals(n - filled)
            out[filled:] = fresh
        return out * np.sqrt(self.dt)

    def next_increment(self) -> float:
        """Next single Wiener increment (buffered draw)."""
        if self._pos >= self._buffer.size:
            self._buffer = self._draw_normals(_CHUNK)
            self._pos = 0
        z = self._buffer[self._pos]
        self._pos += 1
        return float(z * np.sqrt(self.dt))


def _check_finite(label: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{label} produced NaN or Inf")


def euler_ito_step(
    state: np.ndarray, drift: np.ndarray, diffusion: np.ndarray, dt: float, dW: float
) -> np.ndarray:
    """One explicit Euler-Maruyama step x + a dt + b dW."""
    out = state + drift * dt + diffusion * dW
    _check_finite("euler_ito_step", out)
    return out


def heun_stratonovich_step(
    state: np.ndarray,
    drift_fn: Callable[[np.ndarray], np.ndarray],
    diffusion_fn: Callable[[np.ndarray], np.ndarray],
    dt: float,
    dW: float,
) -> np.ndarray:
    """One Stratonovich predictor-corrector (Heun) step.

    The drift and diffusion are passed as callables because the corrector
    re-evaluates both at the Euler predictor point:

        y    = x + a(x) dt + b(x) dW
        x'   = x + (a(x) + a(y))/2 dt + (b(x) + b(y))/2 dW
    """
    a0 = drift_fn(state)
    b0 = diffusion_fn(state)
    pred = state + a0 * dt + b0 * dW
    _check_finite("heun predictor", pred)
    out = state + 0.5 * (a0 + drift_fn(pred)) * dt + 0.5 * (b0 + diffusion_fn(pred)) * dW
    _check_finite("heun corrector", out)
    return out
