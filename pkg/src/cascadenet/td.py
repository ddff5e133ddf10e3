"""TD(lambda) targets over a rollout, the summed cross-entropy loss, and the
incremental eligibility-trace form of its gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .kernels import TemporalKernel
from .network import CascadedStepper, CascadeNet, RolloutTrace


class TraceMemoryError(MemoryError):
    """Eligibility-trace accumulators would not fit in the configured budget."""


@dataclass(frozen=True)
class TDConfig:
    lam: float = 0.0
    T: int = 1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.T < 1:
            raise ValueError("horizon T must be >= 1")


@dataclass
class TDTargets:
    targets: list  # constant Tensors, one [N, C] per step
    y_true: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.stack([y.value for y in self.targets])


def target_weights(lam: float, t: int, T: int) -> tuple[list[float], float]:
    """Weights on outputs t+1..T and on the true label for the step-t target."""
    future = [(1.0 - lam) * lam ** (i - 1) for i in range(1, T - t + 1)]
    return future, lam ** (T - t)


def td_targets(trace: RolloutTrace, y_true, lam: float) -> TDTargets:
    """Per-step targets blending future outputs with the label; gradient-free."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    y = np.asarray(y_true)
    T = trace.T
    probs = [ad.softmax(z) for z in trace.logits]
    if y.shape != probs[0].shape:
        raise ValueError(f"label shape {y.shape} does not match outputs {probs[0].shape}")
    if not np.allclose(y.sum(axis=-1), 1.0) or not np.all((y == 0) | (y == 1)):
        raise ValueError("y_true must be one-hot")
    y_t = ad.Tensor(y, dtype=probs[0].dtype)
    targets = []
    for t in range(1, T + 1):
        future, w_label = target_weights(lam, t, T)
        acc = ad.mul(y_t, w_label)
        for i, w in enumerate(future, start=1):
            if w != 0.0:
                acc = ad.add(acc, ad.mul(probs[t + i - 1], w))
        targets.append(ad.stop_gradient(acc))
    return TDTargets(targets, y)


def td_loss(trace: RolloutTrace, targets: TDTargets) -> ad.Tensor:
    """Sum over steps (and batch rows) of H(target_t, softmax(logits_t))."""
    if len(targets.targets) != trace.T:
        raise ValueError(f"{len(targets.targets)} targets for a {trace.T}-step trace")
    loss = None
    for z, y in zip(trace.logits, targets.targets):
        term = ad.softmax_cross_entropy(z, y)
        loss = term if loss is None else ad.add(loss, term)
    return loss


def final_ce_loss(trace: RolloutTrace, y_true) -> ad.Tensor:
    """Cross-entropy on the last step only (the CE baseline)."""
    z = trace.logits[-1]
    return ad.softmax_cross_entropy(z, np.asarray(y_true, dtype=z.dtype))


def td_grad_incremental(net: CascadeNet, x, y_true, cfg: TDConfig,
                        kernel: TemporalKernel | None = None, training: bool = False,
                        max_accumulator_elements: int = 50_000_000) -> list[np.ndarray]:
    """TD gradient computed online with eligibility traces.

    Keeps one accumulator per (parameter, row, class) and, after each step,
    applies the output difference between consecutive steps; the outputs past
    the horizon are clamped to the label.  Returns gradients in
    ``net.parameters()`` order, equal to ``grad(td_loss(...))``.
    """
    kernel = kernel or TemporalKernel.osd()
    params = [p for _, p in net.parameters()]
    y = np.asarray(y_true, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    n, c = y.shape
    n_param = sum(p.size for p in params)
    need = n_param * n * c
    if need > max_accumulator_elements:
        raise TraceMemoryError(
            f"eligibility traces need {need:,} accumulators ({n_param:,} params x {n} rows x {c} classes, "
            f"~{need * 8 / 2**20:.1f} MiB), budget is {max_accumulator_elements:,}")

    lam = cfg.lam
    stepper = CascadedStepper(net, kernel, training)
    elig = [np.zeros((n, c) + p.shape) for p in params]
    total = [np.zeros(p.shape) for p in params]
    prev_out = None

    def apply(delta, elig):
        for g, e in zip(total, elig):
            g -= np.tensordot(delta, e, axes=([0, 1], [0, 1]))

    for t in range(1, cfg.T + 1):
        z, _ = stepper.step(x)
        out = ad._softmax_np(z.value.astype(np.float64))
        if prev_out is not None:
            apply(out - prev_out, elig)
        # e_t = lam * e_{t-1} + d z_t / d w, one backward pass per (row, class)
        elig = [lam * e for e in elig]
        for i in range(n):
            for k in range(c):
                seed = np.zeros(z.shape, dtype=z.dtype)
                seed[i, k] = 1.0
                gz = ad.grad(ad.sum(ad.mul(z, seed)), params)
                for e, g in zip(elig, gz):
                    e[i, k] += g
        prev_out = out
    apply(y - prev_out, elig)
    return total
