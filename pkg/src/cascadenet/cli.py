"""Command-line entry point: ``cascadenet train|eval|noise|metacog|rollout``.

Every command reads a flat config file, applies ``--set`` overrides, writes
its outputs into ``--out`` and finishes by writing ``manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import build, from_snapshot, known_keys, load_config, snapshot
from .evaluation import (collect_trace, centrality, deadline_accuracy, persistent_noise_accuracy,
                         selection_latency, spearman_rho, speed_accuracy_curve, taxonomic_compliance,
                         transient_noise_episode)
from .kernels import TemporalKernel
from .metacog import (KINDS as FEATURE_KINDS, SCOPES, MetaCogConfig, auroc, build_trace_features,
                      evaluate_metacog, fpr_at_tpr, train_metacog, write_features_csv)
from .network import SERIAL, load_checkpoint
from .noise import KINDS as NOISE_KINDS, TRANSIENT, NoiseSpec
from .trainer import TrainConfig, TrainingDivergedError, eval_split, train
from .data import balanced_split


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str = ""
    split: str = "val"
    T: int = 0                     # 0 -> training horizon
    kernel: str = ""               # empty -> training kernel
    alpha: float = 0.9
    thetas: int = 50
    latency_theta: float = 0.83
    seed: int = 0


@dataclass(frozen=True)
class NoiseRunConfig:
    checkpoint: str = ""           # comma-separated for several models
    split: str = "val"
    kinds: tuple[str, ...] = ("focus", "perlin", "occlusion", "resolution")
    protocol: str = "both"         # persistent | transient | both
    modes: tuple[str, ...] = ("sequential", "cascaded")
    kernel: str = "osd"
    alpha: float = 0.9
    trials: int = 5
    T: int = 10
    durations: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    onset: int = 10
    recovery: int = 10
    max_images: int = 0
    patch: int = 0
    sigma: float = 1.0
    coverage: float = 0.4
    perlin_cells: int = 4
    amplitude: float = 1.0
    factors: tuple[int, ...] = (2, 4)
    shift: int = -1
    angle: float = 60.0
    fill: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class RolloutConfig:
    checkpoint: str = ""
    split: str = "val"             # val | test | ood
    T: int = 0
    kernel: str = "ews"
    alpha: float = 0.9
    max_images: int = 0
    seed: int = 0


@dataclass(frozen=True)
class MetaCogRunConfig:
    in_traces: str = ""
    ood_traces: str = ""
    kinds: tuple[str, ...] = FEATURE_KINDS
    scopes: tuple[str, ...] = SCOPES
    test_fraction: float = 0.5
    hidden: int = 256
    keep_prob: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 5e-4
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0


COMMAND_CONFIGS = {
    "train": TrainConfig,
    "eval": EvalConfig,
    "noise": NoiseRunConfig,
    "rollout": RolloutConfig,
    "metacog": MetaCogRunConfig,
}


# ------------------------------------------------------------------ outputs


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    out_dir: str
    version: str = __version__
    files: dict = field(default_factory=dict)

    def add(self, path: Path) -> None:
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.files[path.name] = {"sha256": digest, "bytes": path.stat().st_size}

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        body = {"command": self.command, "config": self.config, "seed": self.seed,
                "out_dir": self.out_dir, "version": self.version, "files": self.files}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_json(path: Path, obj) -> Path:
    def clean(o):
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (float, np.floating)):
            return None if math.isnan(o) else round(float(o), 10)
        if isinstance(o, np.integer):
            return int(o)
        return o

    path.write_text(json.dumps(clean(obj), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- helpers


def _load_model(path: str):
    if not path:
        raise UsageError("no checkpoint given (use --checkpoint or the checkpoint key)")
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    net, meta = load_checkpoint(path)
    tcfg = from_snapshot(TrainConfig, meta["train_config"])
    return net, tcfg, np.asarray(meta["train_mean"]), np.asarray(meta["train_std"])


def _limit(ds, n: int):
    return ds.subset(np.arange(min(n, len(ds)))) if n > 0 else ds


def _kernel(kind: str, alpha: float, fallback: TemporalKernel) -> TemporalKernel:
    return TemporalKernel.from_config(kind, alpha) if kind else fallback


# ---------------------------------------------------------------- commands


def cmd_train(cfg: TrainConfig, out: Path, log) -> list[Path]:
    ckpt, metrics = out / "model.ckpt", out / "metrics.csv"
    train(cfg, ckpt, metrics, log=log)
    return [ckpt, metrics]


def cmd_eval(cfg: EvalConfig, out: Path, log) -> list[Path]:
    net, tcfg, mean, std = _load_model(cfg.checkpoint)
    ds = eval_split(tcfg, cfg.split, mean, std)
    T = cfg.T or tcfg.horizon
    kernel = _kernel(cfg.kernel, cfg.alpha, tcfg.temporal_kernel)
    logits, emb = collect_trace(net, ds.images, T, kernel, tcfg.mode)
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    labels = ds.labels
    files = []

    thetas = np.linspace(0.0, 1.0, cfg.thetas) if cfg.thetas > 1 else np.array([0.0])
    curve = speed_accuracy_curve(probs, labels, thetas, cycles_per_step=1)
    files.append(write_csv(out / "speed_accuracy.csv", ("theta", "mean_stop_cycles", "mean_accuracy"),
                           curve.rows()))
    files.append(write_csv(out / "deadline_accuracy.csv", ("t", "accuracy"),
                           [(t + 1, a) for t, a in enumerate(deadline_accuracy(probs, labels))]))

    lat = selection_latency(probs, cfg.latency_theta)
    correct = probs[-1].argmax(-1) == labels
    files.append(write_csv(out / "latency.csv", ("instance_id", "latency", "correct"),
                           [(i, int(l) if l else None, int(c)) for i, (l, c) in enumerate(zip(lat, correct))]))

    rows = []
    if ds.coarse_map is not None:
        for t in range(1, T + 1):
            wrong = int((probs[t - 1].argmax(-1) != labels).sum())
            rows.append((t, taxonomic_compliance(probs, labels, ds.coarse_map, t), wrong))
    files.append(write_csv(out / "compliance.csv", ("t", "compliance", "fine_errors"), rows))

    cent = np.array([centrality(emb[i], net.head_weight_row(labels[i], T)) for i in range(len(labels))])
    reached = lat > 0
    measures = {"latency": lat.astype(float), "centrality": cent}
    if ds.atypicality is not None:
        measures["atypicality"] = ds.atypicality
    names = sorted(measures)
    rho = {}
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            x, y = measures[names[a]][reached], measures[names[b]][reached]
            rho[f"{names[a]}_vs_{names[b]}"] = spearman_rho(x, y) if reached.sum() > 2 else float("nan")
    files.append(write_json(out / "prototypicality.json", {
        "latency_theta": cfg.latency_theta, "n": int(len(labels)), "reached": int(reached.sum()),
        "unreached_fraction": float(1 - reached.mean()), "spearman": rho,
        "mean_centrality": float(cent.mean()),
    }))
    log(f"eval: final-step accuracy {float(correct.mean()):.4f} on {len(labels)} {cfg.split} images")
    return files


def _noise_spec(cfg: NoiseRunConfig, kind: str, **extra) -> NoiseSpec:
    return NoiseSpec(kind=kind, patch=cfg.patch or None, sigma=cfg.sigma, coverage=cfg.coverage,
                     perlin_cells=cfg.perlin_cells, amplitude=cfg.amplitude, factors=cfg.factors,
                     shift=None if cfg.shift < 0 else cfg.shift, angle=cfg.angle, fill=cfg.fill, **extra)


def cmd_noise(cfg: NoiseRunConfig, out: Path, log) -> list[Path]:
    bad = [k for k in cfg.kinds if k not in NOISE_KINDS]
    if bad:
        raise UsageError(f"unknown noise kind(s) {', '.join(bad)}; choose from {', '.join(NOISE_KINDS)}")
    bad = [m for m in cfg.modes if m not in ("sequential", "cascaded")]
    if bad:
        raise UsageError(f"unknown noise mode(s) {', '.join(bad)}; choose sequential or cascaded")
    if cfg.protocol not in ("persistent", "transient", "both"):
        raise UsageError(f"protocol must be persistent, transient or both, got {cfg.protocol!r}")
    if any(d < 0 for d in cfg.durations):
        raise UsageError("transient durations must be >= 0")
    paths = [p.strip() for p in cfg.checkpoint.split(",") if p.strip()]
    if not paths:
        raise UsageError("no checkpoint given (use --checkpoint or the checkpoint key)")
    models = []
    for p in paths:
        net, tcfg, mean, std = _load_model(p)
        ds = _limit(eval_split(tcfg, cfg.split, mean, std), cfg.max_images)
        models.append((Path(p).stem, net, ds))
    kernel = TemporalKernel.from_config(cfg.kernel, cfg.alpha)
    columns = [(name, net, ds, mode) for name, net, ds in models for mode in cfg.modes]
    header = ["noise"] + [f"{name}_{mode}" if len(models) > 1 else mode for name, _, _, mode in columns]
    files = []

    def rng_for(*key):
        return np.random.default_rng(np.random.SeedSequence([cfg.seed, *key]))

    if cfg.protocol in ("persistent", "both"):
        rows = []
        for ki, kind in enumerate(cfg.kinds):
            spec = _noise_spec(cfg, kind)
            row = [kind]
            for ci, (_, net, ds, mode) in enumerate(columns):
                row.append(persistent_noise_accuracy(net, ds.images, ds.labels, spec, cfg.trials, cfg.T,
                                                     kernel, rng_for(0, ki, ci), mode))
            rows.append(row)
            log(f"persistent {kind}: " + ", ".join(f"{h}={_fmt(v)}" for h, v in zip(header[1:], row[1:])))
        files.append(write_csv(out / "persistent.csv", header, rows))

    if cfg.protocol in ("transient", "both"):
        rows, episodes = [], []
        for ki, kind in enumerate(cfg.kinds):
            row = [kind]
            for ci, (name, net, ds, mode) in enumerate(columns):
                dips = []
                for n in cfg.durations:
                    spec = _noise_spec(cfg, kind, protocol=TRANSIENT, onset=cfg.onset, duration=n,
                                       recovery=cfg.recovery)
                    rng = rng_for(1, ki, ci, n)
                    for trial in range(cfg.trials):
                        ep = transient_noise_episode(net, ds.images, ds.labels, spec, kernel, rng, mode)
                        dips.append(ep.dip)
                        episodes.extend((kind, header[1 + ci], n, trial, i, float(d))
                                        for i, d in enumerate(ep.dip))
                row.append(float(np.mean(dips)) if dips else float("nan"))
            rows.append(row)
            log(f"transient {kind}: " + ", ".join(f"{h}={_fmt(v)}" for h, v in zip(header[1:], row[1:])))
        files.append(write_csv(out / "transient.csv", header, rows))
        files.append(write_csv(out / "transient_episodes.csv",
                               ("noise", "model", "duration", "trial", "instance_id", "dip"), episodes))
    return files


def cmd_rollout(cfg: RolloutConfig, out: Path, log) -> list[Path]:
    net, tcfg, mean, std = _load_model(cfg.checkpoint)
    ds = _limit(eval_split(tcfg, cfg.split, mean, std), cfg.max_images)
    T = cfg.T or tcfg.horizon
    kernel = TemporalKernel.from_config(cfg.kernel, cfg.alpha)
    if tcfg.mode == SERIAL:
        T = max(T, net.spec.num_delays)
    logits, _ = collect_trace(net, ds.images, T, kernel, tcfg.mode)
    c = logits.shape[2]
    header = ["instance_id", "t", "label"] + [f"z{k}" for k in range(c)]
    path = out / "trace.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for i in range(logits.shape[1]):
            for t in range(T):
                w.writerow([i, t + 1, int(ds.labels[i])] + [f"{v:.8g}" for v in logits[t, i]])
    log(f"rollout: {logits.shape[1]} traces of {T} steps from the {cfg.split} split")
    return [path]


def read_trace_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of the rollout output: logits ``[T, N, C]`` and labels ``[N]``."""
    if not Path(path).is_file():
        raise FileNotFoundError(f"trace file not found: {path}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ids = data[:, 0].astype(int)
    ts = data[:, 1].astype(int)
    n, T = ids.max() + 1, ts.max()
    logits = np.zeros((T, n, data.shape[1] - 3))
    logits[ts - 1, ids] = data[:, 3:]
    labels = np.zeros(n, dtype=int)
    labels[ids] = data[:, 2].astype(int)
    return logits, labels


def cmd_metacog(cfg: MetaCogRunConfig, out: Path, log) -> list[Path]:
    for k in cfg.kinds:
        if k not in FEATURE_KINDS:
            raise UsageError(f"unknown feature kind {k!r}; choose from {', '.join(FEATURE_KINDS)}")
    for s in cfg.scopes:
        if s not in SCOPES:
            raise UsageError(f"unknown scope {s!r}; choose final or all")
    if not cfg.in_traces or not cfg.ood_traces:
        raise UsageError("metacog needs in_traces and ood_traces")
    z_in, _ = read_trace_csv(cfg.in_traces)
    z_ood, _ = read_trace_csv(cfg.ood_traces)
    if z_in.shape[0] != z_ood.shape[0] or z_in.shape[2] != z_ood.shape[2]:
        raise ValueError("in-distribution and OOD traces differ in steps or classes")
    T = z_in.shape[0]
    is_in = np.concatenate([np.ones(z_in.shape[1], int), np.zeros(z_ood.shape[1], int)])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    fit_idx, hold_idx = balanced_split(is_in, cfg.test_fraction, rng)
    z_all = np.concatenate([z_in, z_ood], axis=1)
    mcfg = MetaCogConfig(cfg.hidden, cfg.keep_prob, cfg.lr, cfg.weight_decay, cfg.epochs, cfg.batch_size, cfg.seed)
    files, metrics = [], {}
    for kind in cfg.kinds:
        for scope in cfg.scopes:
            feats = build_trace_features(z_all, kind, scope)
            steps = T if scope == "all" else 1
            fpath = out / f"features_{kind}_{scope}.csv"
            write_features_csv(fpath, feats, is_in, kind, scope, steps)
            files.append(fpath)
            fit, hold = feats[fit_idx], feats[hold_idx]
            model = train_metacog(fit[is_in[fit_idx] == 1], fit[is_in[fit_idx] == 0], mcfg)
            m = evaluate_metacog(model, hold[is_in[hold_idx] == 1], hold[is_in[hold_idx] == 0])
            metrics[f"{kind}_{scope}"] = {"auroc": m["auroc"], "fpr_at_95tpr": m["fpr_at_95tpr"]}
            log(f"metacog {kind}/{scope}: auroc {m['auroc']:.4f}, fpr@95tpr {m['fpr_at_95tpr']:.4f}")
    msp = build_trace_features(z_all, "msp", "final")[hold_idx, 0]
    metrics["msp_baseline"] = {"auroc": auroc(msp, is_in[hold_idx]),
                               "fpr_at_95tpr": fpr_at_tpr(msp, is_in[hold_idx], 0.95)}
    files.append(write_json(out / "metrics.json", metrics))
    return files


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "noise": cmd_noise, "rollout": cmd_rollout,
            "metacog": cmd_metacog}


# -------------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascadenet", description="Cascaded residual networks with TD(lambda) training.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--seed", type=int, help="overrides the seed key")
        s.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        if name in ("eval", "noise", "rollout"):
            s.add_argument("--checkpoint", help="overrides the checkpoint key")
        if name == "metacog":
            s.add_argument("--in-traces", dest="in_traces")
            s.add_argument("--ood-traces", dest="ood_traces")
    return p


def _cap_threads() -> None:
    n = os.environ.get("CASCADE_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _cap_threads()
    log = lambda msg: print(msg, file=sys.stderr)  # noqa: E731
    cls = COMMAND_CONFIGS[args.command]
    try:
        raw = load_config(args.config, args.set)
        if args.seed is not None:
            raw["seed"] = str(args.seed)
        for key in ("checkpoint", "in_traces", "ood_traces"):
            if getattr(args, key, None):
                raw[key] = getattr(args, key)
        unknown = sorted(set(raw) - known_keys(cls))
        if unknown:
            raise UsageError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
        cfg = build(cls, raw)
        out = Path(args.out or Path("runs") / args.command)
        out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](cfg, out, log)
        manifest = RunManifest(args.command, snapshot(cfg), cfg.seed, str(out))
        for f in files:
            manifest.add(f)
        manifest.write(out)
    except UsageError as exc:
        print(f"cascadenet {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, TrainingDivergedError) as exc:
        print(f"cascadenet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
