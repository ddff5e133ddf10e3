"""Post-training analyses over output traces.

Traces are probability arrays shaped ``[T, C]`` for one instance or
``[T, N, C]`` for a batch.  Steps are 1-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .kernels import TemporalKernel
from .network import (SERIAL, CascadeNet, forward_standard, rollout_cascaded, rollout_sequential,
                      rollout_serial_anytime)
from .noise import NoiseSpec, apply_noise_batch

THRESHOLD = "threshold"
DEADLINE = "deadline"


@dataclass(frozen=True)
class StoppingPolicy:
    kind: str = THRESHOLD
    theta: float = 0.5
    deadline: int = 1

    def __post_init__(self):
        if self.kind not in (THRESHOLD, DEADLINE):
            raise ValueError(f"unknown stopping policy {self.kind!r}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.deadline < 1:
            raise ValueError("deadline must be >= 1")


def collect_trace(net: CascadeNet, images, T: int, kernel: TemporalKernel, mode: str = "cascaded",
                  batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode rollouts over a dataset in chunks.

    Returns float64 logits ``[T, N, C]`` and final-step embeddings ``[N, F]``.
    """
    logits, embs = [], []
    with ad.no_grad():
        for s in range(0, len(images), batch):
            x = images[s:s + batch]
            if mode == SERIAL:
                tr = rollout_serial_anytime(net, x, T)
            else:
                tr = rollout_cascaded(net, [x] * T, T, kernel)
            logits.append(tr.logit_values.astype(np.float64))
            embs.append(tr.final_embedding.astype(np.float64))
    return np.concatenate(logits, axis=1), np.concatenate(embs, axis=0)


def stop_time(probs: np.ndarray, policy: StoppingPolicy):
    """First step whose top-class confidence exceeds theta, else T."""
    probs = np.asarray(probs)
    T = probs.shape[0]
    if policy.kind == DEADLINE:
        t = min(policy.deadline, T)
        return t if probs.ndim == 2 else np.full(probs.shape[1], t)
    above = probs.max(axis=-1) > policy.theta
    first = np.where(above.any(axis=0), above.argmax(axis=0) + 1, T)
    return int(first) if probs.ndim == 2 else first


@dataclass
class SpeedAccuracyCurve:
    theta: np.ndarray
    mean_stop_cycles: np.ndarray
    mean_accuracy: np.ndarray

    def rows(self):
        return list(zip(self.theta.tolist(), self.mean_stop_cycles.tolist(), self.mean_accuracy.tolist()))


def speed_accuracy_curve(probs: np.ndarray, labels, thetas, cycles_per_step: int = 1) -> SpeedAccuracyCurve:
    probs = np.asarray(probs)
    if probs.ndim == 2:
        probs = probs[:, None]
    labels = np.atleast_1d(np.asarray(labels))
    n = probs.shape[1]
    preds = probs.argmax(axis=-1)  # [T, N]
    thetas = np.asarray(thetas, dtype=float)
    stops, accs = [], []
    for th in thetas:
        st = stop_time(probs, StoppingPolicy(THRESHOLD, float(th)))
        stops.append(st.mean() * cycles_per_step)
        accs.append(float(np.mean(preds[st - 1, np.arange(n)] == labels)))
    return SpeedAccuracyCurve(thetas, np.asarray(stops), np.asarray(accs))


def deadline_accuracy(probs: np.ndarray, labels) -> np.ndarray:
    """Accuracy if every instance is forced to answer at step t, t = 1..T."""
    return (np.asarray(probs).argmax(axis=-1) == np.asarray(labels)[None]).mean(axis=1)


def selection_latency(probs: np.ndarray, theta: float):
    """Earliest step from which one class stays above theta through T.

    Returns None (single trace) or 0 (batched) when no class ever settles.
    """
    probs = np.asarray(probs)
    single = probs.ndim == 2
    if single:
        probs = probs[:, None]
    above = probs > theta  # [T, N, C]
    # held[t] = above at every step from t to the end
    held = np.flip(np.logical_and.accumulate(np.flip(above, axis=0), axis=0), axis=0)
    settled = held.any(axis=-1)  # [T, N]
    lat = np.where(settled.any(axis=0), settled.argmax(axis=0) + 1, 0)
    if single:
        return int(lat[0]) if lat[0] else None
    return lat


def taxonomic_compliance(probs: np.ndarray, fine_labels, coarse_map, t: int):
    """P(coarse correct | fine wrong) at step t, or None without fine errors."""
    probs = np.asarray(probs)
    coarse_map = np.asarray(coarse_map)
    pred = probs[t - 1].argmax(axis=-1)
    fine_labels = np.asarray(fine_labels)
    wrong = pred != fine_labels
    if not wrong.any():
        return None
    return float(np.mean(coarse_map[pred[wrong]] == coarse_map[fine_labels[wrong]]))


def centrality(embedding, class_weights) -> float:
    """Cosine similarity between an embedding and its class's readout weights."""
    a = np.asarray(embedding, dtype=np.float64)
    b = np.asarray(class_weights, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > 0 else 0.0


def spearman_rho(x, y) -> float:
    """Pearson correlation of average ranks."""
    rx = rankdata(np.asarray(x, dtype=float))
    ry = rankdata(np.asarray(y, dtype=float))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else float("nan")


# ---------------------------------------------------------------- noise runs


def dip(confidence, onset: int) -> np.ndarray:
    """Final confidence minus mean confidence from the first noisy step on.

    ``confidence`` is ``[T]`` or ``[T, N]``; ``onset`` counts the clean steps
    that precede the noise.
    """
    c = np.asarray(confidence, dtype=np.float64)
    return c[-1] - c[onset:].mean(axis=0)


@dataclass
class EpisodeResult:
    probs: np.ndarray        # [T, N, C]
    confidence: np.ndarray   # [T, N] true-class confidence
    dip: np.ndarray          # [N]
    cycles: int


def transient_frames(images, spec: NoiseSpec, rng):
    frames = [images] * spec.onset
    frames += [apply_noise_batch(images, spec, rng) for _ in range(spec.duration)]
    frames += [images] * spec.recovery
    return frames


def transient_noise_episode(net: CascadeNet, images, labels, spec: NoiseSpec, kernel: TemporalKernel,
                            rng, mode: str = "cascaded") -> EpisodeResult:
    """Clean onset steps, ``duration`` steps with a fresh noise sample each,
    then clean recovery steps; DIP on the true-class confidence."""
    frames = transient_frames(np.asarray(images), spec, rng)
    with ad.no_grad():
        if mode == "sequential":
            trace = rollout_sequential(net, frames)
        else:
            trace = rollout_cascaded(net, frames, len(frames), kernel)
    probs = trace.probs
    labels = np.asarray(labels)
    conf = probs[:, np.arange(len(labels)), labels]
    return EpisodeResult(probs, conf, dip(conf, spec.onset), trace.cycles)


def persistent_noise_accuracy(net: CascadeNet, images, labels, spec: NoiseSpec, trials: int, T: int,
                              kernel: TemporalKernel, rng, mode: str = "cascaded") -> float:
    """Final-step accuracy with a fresh noise sample at every update step,
    averaged over ``trials`` repetitions of every image."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    correct = 0
    with ad.no_grad():
        for _ in range(trials):
            if mode == "sequential":
                logits = forward_standard(net, apply_noise_batch(images, spec, rng)).value
            else:
                frames = [apply_noise_batch(images, spec, rng) for _ in range(T)]
                logits = rollout_cascaded(net, frames, T, kernel).logits[-1].value
            correct += int((logits.argmax(axis=-1) == labels).sum())
    return correct / (trials * len(labels))
