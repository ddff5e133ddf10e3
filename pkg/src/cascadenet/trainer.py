"""Training loop: SGD with Nesterov momentum, step-decayed learning rate,
seeded data pipeline, per-timestep metrics and checkpointing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (AugmentFlags, Dataset, SyntheticSpec, augment, balanced_split, channel_stats,
                   load_idx_dataset, make_synthetic, read_cifar_binary, standardize)
from .config import snapshot
from .evaluation import collect_trace
from .kernels import TemporalKernel
from .network import (CASCADED, SERIAL, CascadeNet, NetworkSpec, rollout_serial_anytime,
                      rollout_static, save_checkpoint)
from .td import final_ce_loss, td_loss, td_targets

METRICS_HEADER = ("epoch", "t", "split", "accuracy", "loss")


class TrainingDivergedError(FloatingPointError):
    pass


# ------------------------------------------------------------------ optimizer


def sgd_nesterov_step(params, grads, state: dict, lr: float, momentum: float,
                      weight_decay: float = 0.0, decay_mask=None) -> None:
    """In-place Nesterov SGD: g += wd*p; v = mu*v + g; p -= lr*(g + mu*v).

    ``decay_mask`` selects which parameters receive weight decay (all by default).
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    vel = state.setdefault("velocity", [np.zeros_like(p.value) for p in params])
    mask = decay_mask if decay_mask is not None else [True] * len(params)
    for p, g, v, decay in zip(params, grads, vel, mask):
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.value.shape}")
        g = g + weight_decay * p.value if decay and weight_decay else g
        v *= momentum
        v += g
        step = g + momentum * v if momentum else g
        p.value -= (lr * step).astype(p.value.dtype, copy=False)


def lr_schedule(epoch: int, lr0: float, decay: float = 0.2, every: int = 30) -> float:
    return lr0 * decay ** (epoch // every)


# --------------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.005
    lr_decay: float = 0.2
    lr_decay_every: int = 30
    loss: str = "td"                 # td | ce
    lam: float = field(default=0.0, metadata={"key": "lambda"})
    kernel: str = "osd"
    alpha: float = 0.9
    T: int = 0                       # 0 -> num_blocks + 1
    mode: str = CASCADED             # cascaded | serial
    seed: int = 0
    # architecture
    num_blocks: int = 5
    width: int = 8
    block_type: str = "mlp"             # mlp | conv
    head_mode: str = "single"
    dtype: str = "float32"
    # data
    dataset: str = "synthetic"       # synthetic | idx | cifar-binary
    images_path: str = ""
    labels_path: str = ""
    test_images_path: str = ""
    test_labels_path: str = ""
    data_path: str = ""              # cifar-binary: comma-separated batch files
    test_data_path: str = ""
    num_classes: int = 0
    val_fraction: float = 0.1
    n_train: int = 3000
    n_test: int = 400
    data_seed: int = 0
    synthetic_size: int = 16
    n_coarse: int = 4
    fine_per_coarse: int = 2
    # augmentation
    crop: bool = False
    flip: bool = False
    cutout: bool = False
    pad: int = 4
    cutout_size: int = 8

    def __post_init__(self):
        positive = dict(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                        lr_decay_every=self.lr_decay_every, num_blocks=self.num_blocks, width=self.width)
        for k, v in positive.items():
            if v <= 0:
                raise ValueError(f"{k} must be positive, got {v}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("weight_decay must be >= 0 and lr_decay in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.loss not in ("td", "ce"):
            raise ValueError(f"loss must be td or ce, got {self.loss!r}")
        if self.mode not in (CASCADED, SERIAL):
            raise ValueError(f"mode must be cascaded or serial, got {self.mode!r}")
        if self.dataset not in ("synthetic", "idx", "cifar-binary"):
            raise ValueError(f"unknown dataset source {self.dataset!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        TemporalKernel.from_config(self.kernel, self.alpha)

    @property
    def horizon(self) -> int:
        return self.T if self.T > 0 else self.num_blocks + 1

    @property
    def temporal_kernel(self) -> TemporalKernel:
        return TemporalKernel.from_config(self.kernel, self.alpha)

    @property
    def augment_flags(self) -> AugmentFlags:
        return AugmentFlags(self.crop, self.flip, self.cutout, self.pad, self.cutout_size)

    @property
    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(size=self.synthetic_size, n_coarse=self.n_coarse,
                             fine_per_coarse=self.fine_per_coarse)


# ----------------------------------------------------------------------- data


def _require(path: str, what: str) -> Path:
    if not path:
        raise FileNotFoundError(f"config key {what} is required for this dataset source")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"dataset file not found: {p}")
    return p


def load_dataset(cfg: TrainConfig, split: str = "train") -> Dataset:
    """``split`` is ``train`` (the pool that is divided into train/val) or ``test``."""
    if cfg.dataset == "synthetic":
        n, seed = (cfg.n_train, cfg.data_seed) if split == "train" else (cfg.n_test, cfg.data_seed + 1)
        return make_synthetic(cfg.synthetic_spec, n, seed)
    if cfg.dataset == "idx":
        keys = ("images_path", "labels_path") if split == "train" else ("test_images_path", "test_labels_path")
        paths = [_require(getattr(cfg, k), k) for k in keys]
        try:
            return load_idx_dataset(*paths, cfg.num_classes or None)
        except (ValueError, OSError) as exc:
            raise ValueError(f"unreadable IDX dataset: {exc}") from exc
    key = "data_path" if split == "train" else "test_data_path"
    files = [_require(p.strip(), key) for p in getattr(cfg, key).split(",") if p.strip()]
    if not files:
        _require("", key)
    try:
        return read_cifar_binary(files)
    except (ValueError, OSError) as exc:
        raise ValueError(f"unreadable CIFAR binary dataset: {exc}") from exc


@dataclass
class PreparedData:
    train: Dataset
    val: Dataset
    mean: np.ndarray
    std: np.ndarray


def prepare_data(cfg: TrainConfig) -> PreparedData:
    pool = load_dataset(cfg, "train")
    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    tr_idx, va_idx = balanced_split(pool.labels, cfg.val_fraction, split_rng)
    train, val = pool.subset(tr_idx), pool.subset(va_idx)
    mean, std = channel_stats(train.images)
    return PreparedData(train, val, mean, std)


def synthetic_ood(cfg: TrainConfig, n: int | None = None) -> Dataset:
    """A shifted-parameter synthetic family used as out-of-distribution data."""
    spec = SyntheticSpec(size=cfg.synthetic_size, n_coarse=cfg.n_coarse,
                         fine_per_coarse=cfg.fine_per_coarse, variant="ood")
    return make_synthetic(spec, n or cfg.n_test, cfg.data_seed + 2)


def eval_split(cfg: TrainConfig, which: str, mean, std) -> Dataset:
    """Standardized ``val``, ``test`` or (synthetic only) ``ood`` data for analysis."""
    if which == "val":
        ds = prepare_data(cfg).val
    elif which == "test":
        ds = load_dataset(cfg, "test")
    elif which == "ood":
        if cfg.dataset != "synthetic":
            raise ValueError("the built-in OOD split exists only for the synthetic dataset")
        ds = synthetic_ood(cfg)
    else:
        raise ValueError(f"split must be val, test or ood, got {which!r}")
    return Dataset(standardize(ds.images, mean, std), ds.labels, ds.num_classes, ds.coarse_map, ds.atypicality)


# ------------------------------------------------------------------- training


def network_spec(cfg: TrainConfig, data: Dataset) -> NetworkSpec:
    return NetworkSpec(input_shape=data.images.shape[1:], num_classes=data.num_classes,
                       num_blocks=cfg.num_blocks, width=cfg.width, block_type=cfg.block_type,
                       head_mode=cfg.head_mode, dtype=cfg.dtype)


def decay_mask(net: CascadeNet) -> list[bool]:
    # weights and conv kernels only; norm affine parameters and biases are exempt
    return [name.split(".")[-1].startswith("w") for name, _ in net.parameters()]


def batch_loss(net: CascadeNet, x, y, cfg: TrainConfig) -> ad.Tensor:
    """Mean over the batch of the configured loss (summed over steps for TD,
    final step only for CE)."""
    if cfg.mode == SERIAL:
        trace = rollout_serial_anytime(net, x, cfg.horizon, training=True)
    else:
        trace = rollout_static(net, x, cfg.horizon, cfg.temporal_kernel, training=True)
    if cfg.loss == "ce":
        total = final_ce_loss(trace, y)
    else:
        total = td_loss(trace, td_targets(trace, y, cfg.lam))
    return ad.mul(total, 1.0 / len(x))


def evaluate_trace(net: CascadeNet, images, cfg: TrainConfig, T: int | None = None,
                   kernel: TemporalKernel | None = None) -> np.ndarray:
    """Eval-mode logits ``[T, N, C]`` for the model's own rollout mode."""
    logits, _ = collect_trace(net, images, T or cfg.horizon, kernel or cfg.temporal_kernel, cfg.mode)
    return logits


def step_metrics(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-step accuracy and mean cross-entropy against the true label."""
    labels = np.asarray(labels)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[1]
    ce = -logp[:, np.arange(n), labels].mean(axis=1)
    acc = (logits.argmax(axis=-1) == labels[None]).mean(axis=1)
    return acc, ce


@dataclass
class TrainResult:
    net: CascadeNet
    metrics: list = field(default_factory=list)   # (epoch, t, split, accuracy, loss)
    meta: dict = field(default_factory=dict)


def train(cfg: TrainConfig, checkpoint_path=None, metrics_path=None, log=None) -> TrainResult:
    """Train a network; optionally write the checkpoint and metrics CSV."""
    data = prepare_data(cfg)
    seeds = np.random.SeedSequence([cfg.seed, 0]).spawn(2)
    init_rng, batch_rng = (np.random.default_rng(s) for s in seeds)
    net = CascadeNet.init(network_spec(cfg, data.train), init_rng)
    params = [p for _, p in net.parameters()]
    mask = decay_mask(net)
    state: dict = {}
    flags = cfg.augment_flags
    train_eval = standardize(data.train.images, data.mean, data.std)
    val_eval = standardize(data.val.images, data.mean, data.std) if len(data.val) else None
    y_train = data.train.one_hot()
    n = len(data.train)
    rows = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay, cfg.lr_decay_every)
        order = batch_rng.permutation(n)
        for bi, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need at least two rows
            x = np.stack([augment(data.train.images[i], flags, batch_rng, data.mean, data.std) for i in idx])
            loss = batch_loss(net, x, y_train[idx], cfg)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch + 1}, batch {bi + 1} (lr={lr:g}); "
                    f"lower the learning rate or check the input scaling")
            grads = ad.grad(loss, params)
            sgd_nesterov_step(params, grads, state, lr, cfg.momentum, cfg.weight_decay, mask)
        for split, images, labels in (("train", train_eval, data.train.labels),
                                      ("val", val_eval, data.val.labels)):
            if images is None:
                continue
            acc, ce = step_metrics(evaluate_trace(net, images, cfg), labels)
            for t in range(len(acc)):
                rows.append((epoch + 1, t + 1, split, float(acc[t]), float(ce[t])))
        if log:
            final = [r for r in rows if r[0] == epoch + 1 and r[1] == cfg.horizon]
            log(f"epoch {epoch + 1}: " + ", ".join(f"{r[2]} acc {r[3]:.3f}" for r in final))
    meta = {"train_mean": data.mean.tolist(), "train_std": data.std.tolist(), "train_config": snapshot(cfg)}
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net, meta)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, rows)
    return TrainResult(net, rows, meta)


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for e, t, split, acc, loss in rows:
            w.writerow([e, t, split, f"{acc:.6f}", f"{loss:.6f}"])
