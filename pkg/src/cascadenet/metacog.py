"""Out-of-distribution detection from temporal output traces.

A one-hidden-layer classifier reads a representation of the cascaded
model's output trace and predicts in-distribution (1) versus OOD (0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad

KINDS = ("msp", "entropy", "softmax", "logits")
SCOPES = ("final", "all")


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def build_trace_features(logits: np.ndarray, kind: str, scope: str) -> np.ndarray:
    """Features from a logit trace ``[T, N, C]`` (or ``[T, C]`` for one instance).

    Returns ``[N, steps * width]`` (or a flat vector), steps ordered in time,
    width 1 for msp/entropy and C for softmax/logits.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown feature kind {kind!r}; expected one of {', '.join(KINDS)}")
    if scope not in SCOPES:
        raise ValueError(f"scope must be 'final' or 'all', got {scope!r}")
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 2
    if single:
        z = z[:, None]
    if scope == "final":
        z = z[-1:]
    if kind == "logits":
        per_step = z
    else:
        p = _softmax(z)
        if kind == "softmax":
            per_step = p
        elif kind == "msp":
            per_step = p.max(axis=-1, keepdims=True)
        else:
            per_step = -(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=-1, keepdims=True)
    feats = np.transpose(per_step, (1, 0, 2)).reshape(per_step.shape[1], -1)
    return feats[0] if single else feats


# ------------------------------------------------------------------ metrics


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via the rank-sum statistic."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def fpr_at_tpr(scores, labels, tpr_target: float = 0.95) -> float:
    """Smallest false-positive rate among thresholds reaching ``tpr_target``.

    Predictions are ``score >= threshold``; thresholds sweep the observed scores.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("fpr_at_tpr needs both positive and negative labels")
    thr = np.unique(s)[::-1]  # descending: TPR grows as we go
    pos_sorted = np.sort(s[y])
    neg_sorted = np.sort(s[~y])
    tp = n_pos - np.searchsorted(pos_sorted, thr, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, thr, side="left")
    ok = tp / n_pos >= tpr_target - 1e-12
    return float(fp[ok].min() / n_neg)


# -------------------------------------------------------------------- model


@dataclass(frozen=True)
class MetaCogConfig:
    hidden: int = 256
    keep_prob: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 5e-4
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0


@dataclass
class MetaCogModel:
    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor
    feat_mean: np.ndarray
    feat_std: np.ndarray
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, dim: int, hidden: int, rng, feat_mean=None, feat_std=None) -> "MetaCogModel":
        def leaf(a):
            return ad.Tensor(a.astype(np.float64), requires_grad=True)

        return cls(
            leaf(rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, hidden))),
            leaf(np.zeros(hidden)),
            leaf(rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 1))),
            leaf(np.zeros(1)),
            np.zeros(dim) if feat_mean is None else feat_mean,
            np.ones(dim) if feat_std is None else feat_std,
        )

    @property
    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, x, keep_prob: float = 1.0, rng=None) -> ad.Tensor:
        x = ad.Tensor((np.asarray(x, dtype=np.float64) - self.feat_mean) / self.feat_std)
        h = ad.relu(ad.affine(x, self.w1, self.b1))
        if keep_prob < 1.0:
            mask = (rng.random(h.shape) < keep_prob) / keep_prob
            h = ad.mul(h, mask)
        return ad.reshape(ad.affine(h, self.w2, self.b2), (-1,))

    def predict_proba(self, x) -> np.ndarray:
        with ad.no_grad():
            z = self.logits(x).value
        return 1.0 / (1.0 + np.exp(-z))


def adam_step(params, grads, state, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """Adam with L2 weight decay folded into the gradient."""
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    ms = state.setdefault("m", [np.zeros_like(p.value) for p in params])
    vs = state.setdefault("v", [np.zeros_like(p.value) for p in params])
    for p, g, m, v in zip(params, grads, ms, vs):
        g = g + weight_decay * p.value
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


def train_metacog(in_features, ood_features, cfg: MetaCogConfig = MetaCogConfig()) -> MetaCogModel:
    """Binary cross-entropy training; in-distribution rows get label 1."""
    x_in = np.atleast_2d(np.asarray(in_features, dtype=np.float64))
    x_ood = np.atleast_2d(np.asarray(ood_features, dtype=np.float64))
    if x_in.shape[1] != x_ood.shape[1]:
        raise ValueError("in-distribution and OOD features differ in width")
    x = np.concatenate([x_in, x_ood])
    y = np.concatenate([np.ones(len(x_in)), np.zeros(len(x_ood))])
    rng = np.random.default_rng(cfg.seed)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    model = MetaCogModel.init(x.shape[1], cfg.hidden, rng, mean, std)
    state: dict = {}
    n = len(x)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            z = model.logits(x[idx], cfg.keep_prob, rng)
            loss = ad.mul(ad.sigmoid_binary_cross_entropy(z, y[idx]), 1.0 / len(idx))
            grads = ad.grad(loss, model.params)
            adam_step(model.params, grads, state, cfg.lr, cfg.weight_decay)
            total += float(loss.value) * len(idx)
        model.history.append(total / n)
    return model


def evaluate_metacog(model: MetaCogModel, in_features, ood_features) -> dict:
    s_in = model.predict_proba(in_features)
    s_ood = model.predict_proba(ood_features)
    scores = np.concatenate([s_in, s_ood])
    labels = np.concatenate([np.ones(len(s_in)), np.zeros(len(s_ood))])
    return {
        "auroc": auroc(scores, labels),
        "fpr_at_95tpr": fpr_at_tpr(scores, labels, 0.95),
        "accuracy": float(np.mean((scores >= 0.5) == labels)),
    }


# ---------------------------------------------------------------- file io


def write_features_csv(path, features: np.ndarray, labels, kind: str, scope: str, steps: int) -> None:
    features = np.atleast_2d(features)
    width = features.shape[1] // steps
    with open(path, "w", newline="") as f:
        f.write(f"# kind={kind} scope={scope} steps={steps} width={width}\n")
        for lab, row in zip(labels, features):
            f.write(",".join([str(int(lab))] + [repr(float(v)) for v in row]) + "\n")


def read_features_csv(path) -> tuple[np.ndarray, np.ndarray, dict]:
    with open(path) as f:
        header = f.readline()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing feature header line")
        meta = dict(tok.split("=", 1) for tok in header[1:].split())
        rows = [line.strip().split(",") for line in f if line.strip()]
    data = np.array(rows, dtype=np.float64).reshape(len(rows), -1)
    return data[:, 1:], data[:, 0].astype(int), meta
