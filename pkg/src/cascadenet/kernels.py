"""Temporal kernels and the per-block delay lines they drive.

A delay line holds a block's transform history ``[z'_t, z'_{t-1}, ..., z'_1]``
and returns its kernel-weighted sum each time a new entry is pushed.  The
one-step delay keeps a single queued entry and exponential smoothing keeps a
single running state; explicit kernels keep the full history.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

IDENTITY = "identity"
OSD = "osd"
EWS = "ews"
EXPLICIT = "explicit"


@dataclass(frozen=True)
class TemporalKernel:
    kind: str = OSD
    alpha: float = 0.0
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in (IDENTITY, OSD, EWS, EXPLICIT):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == EWS and not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"EWS alpha must lie in [0, 1), got {self.alpha}")
        if self.kind == EXPLICIT:
            w = np.asarray(self.weights, dtype=float)
            if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ValueError("explicit kernel weights must be finite, non-negative and non-empty")

    @classmethod
    def identity(cls):
        return cls(IDENTITY)

    @classmethod
    def osd(cls):
        return cls(OSD)

    @classmethod
    def ews(cls, alpha: float = 0.9):
        return cls(EWS, alpha=alpha)

    @classmethod
    def explicit(cls, weights):
        return cls(EXPLICIT, weights=tuple(float(w) for w in weights))

    @classmethod
    def from_config(cls, kind: str, alpha: float = 0.9):
        kind = kind.lower()
        if kind == EWS:
            return cls.ews(alpha)
        if kind in (IDENTITY, OSD):
            return cls(kind)
        raise ValueError(f"kernel must be one of identity | osd | ews, got {kind!r}")

    @property
    def instantaneous(self) -> bool:
        """True when the current entry passes through untouched (no dynamics)."""
        return self.kind == IDENTITY or (self.kind == EWS and self.alpha == 0.0)

    def describe(self) -> str:
        return f"ews(alpha={self.alpha})" if self.kind == EWS else self.kind


def kernel_weights(kernel: TemporalKernel, length: int) -> list[float]:
    """First ``length`` kernel weights, newest entry first.

    EWS tails are truncated, not renormalized; the missing mass is
    ``alpha ** length``.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if kernel.kind == IDENTITY:
        return [1.0] + [0.0] * (length - 1)
    if kernel.kind == OSD:
        return ([0.0, 1.0] + [0.0] * length)[:length]
    if kernel.kind == EWS:
        a = kernel.alpha
        return [(1.0 - a) * a ** i for i in range(length)]
    w = list(kernel.weights[:length])
    return w + [0.0] * (length - len(w))


@dataclass
class DelayLine:
    """History state for one delay component; owned by a single rollout."""

    kernel: TemporalKernel
    t: int = 0
    shape: tuple | None = None
    _queued: ad.Tensor | None = None
    _state: ad.Tensor | None = None
    _history: list = field(default_factory=list)

    def push(self, z_prime: ad.Tensor) -> ad.Tensor:
        return delay_push(self, self.kernel, z_prime)

    @property
    def history(self):
        return list(self._history)


def delay_push(line: DelayLine, kernel: TemporalKernel, z_prime: ad.Tensor) -> ad.Tensor:
    """Append ``z_prime`` to the line and return the kernel-weighted history."""
    if line.shape is not None and tuple(z_prime.shape) != line.shape:
        raise ValueError(f"delay line expected shape {line.shape}, got {tuple(z_prime.shape)}")
    line.shape = tuple(z_prime.shape)
    line.t += 1
    kind = kernel.kind
    if kind == IDENTITY:
        return z_prime
    if kind == OSD:
        prev = line._queued
        line._queued = z_prime
        if prev is None:
            return ad.Tensor(np.zeros(z_prime.shape, dtype=z_prime.dtype))
        return prev
    if kind == EWS:
        a = kernel.alpha
        fresh = ad.mul(z_prime, 1.0 - a)
        line._state = fresh if line._state is None else ad.add(ad.mul(line._state, a), fresh)
        return line._state
    line._history.insert(0, z_prime)
    weights = kernel_weights(kernel, line.t)
    out = None
    for w, z in zip(weights, line._history):
        if w == 0.0:
            continue
        term = ad.mul(z, w)
        out = term if out is None else ad.add(out, term)
    if out is None:
        return ad.Tensor(np.zeros(z_prime.shape, dtype=z_prime.dtype))
    return out


def explicit_convolution(history: list[np.ndarray], kernel: TemporalKernel) -> np.ndarray:
    """Reference sum_k w_k * history[-1-k] over a chronological list."""
    w = kernel_weights(kernel, len(history))
    out = np.zeros_like(np.asarray(history[0], dtype=float))
    for k, wk in enumerate(w):
        out = out + wk * np.asarray(history[-1 - k], dtype=float)
    return out
