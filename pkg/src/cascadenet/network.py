"""Residual networks with per-block transmission delays.

The skip path is instantaneous; only each block's residual branch (and the
stem output) passes through a delay line.  Inputs are always batched:
``[N, *input_shape]``.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .kernels import DelayLine, TemporalKernel

SINGLE_HEAD = "single"
MULTI_HEAD = "multi"
CASCADED = "cascaded"
SERIAL = "serial"
SEQUENTIAL = "sequential"

CHECKPOINT_FORMAT = "cascadenet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    num_classes: int
    num_blocks: int = 4
    width: int = 64
    block_type: str = "mlp"
    head_mode: str = SINGLE_HEAD
    t_max: int = 0
    kernel_size: int = 3
    dtype: str = "float32"
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.num_blocks < 1:
            raise ValueError("need at least one residual block")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.block_type not in ("mlp", "conv"):
            raise ValueError(f"block_type must be mlp or conv, got {self.block_type!r}")
        if self.head_mode not in (SINGLE_HEAD, MULTI_HEAD):
            raise ValueError(f"head_mode must be single or multi, got {self.head_mode!r}")
        if self.block_type == "conv" and len(self.input_shape) != 3:
            raise ValueError("conv networks need (channels, height, width) inputs")
        if self.t_max <= 0:
            object.__setattr__(self, "t_max", self.num_blocks + 1)

    @property
    def num_delays(self) -> int:
        """Stem delay plus one per block."""
        return self.num_blocks + 1

    @property
    def num_heads(self) -> int:
        return self.t_max if self.head_mode == MULTI_HEAD else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


@dataclass
class NormStats:
    """Running statistics tracked separately for each timestep 1..t_max.

    Scale and offset are shared across timesteps.
    """

    mean: np.ndarray
    var: np.ndarray
    scale: ad.Tensor
    offset: ad.Tensor
    updates: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.updates is None:
            self.updates = np.zeros(self.mean.shape[0], dtype=np.int64)

    @property
    def t_max(self) -> int:
        return self.mean.shape[0]

    def index(self, t: int) -> int:
        if t < 1:
            raise ValueError("timesteps start at 1")
        return min(t, self.t_max) - 1


def normalize(x: ad.Tensor, stats: NormStats, t: int, training: bool,
              eps: float = 1e-5, momentum: float = 0.1) -> ad.Tensor:
    """Per-timestep batch normalization over every axis but the last (features)."""
    i = stats.index(t)
    axes = tuple(range(x.value.ndim - 1))
    if training:
        mu = ad.mean(x, axis=axes, keepdims=True)
        v = ad.var(x, axis=axes, keepdims=True)
        xhat = ad.mul(ad.sub(x, mu), ad.rsqrt(ad.add(v, eps)))
        n = int(np.prod([x.shape[a] for a in axes]))
        unbiased = v.value.reshape(-1) * (n / max(n - 1, 1))
        stats.mean[i] = (1 - momentum) * stats.mean[i] + momentum * mu.value.reshape(-1)
        stats.var[i] = (1 - momentum) * stats.var[i] + momentum * unbiased
        stats.updates[i] += 1
    else:
        rm = stats.mean[i].astype(x.dtype)
        inv = (1.0 / np.sqrt(stats.var[i] + eps)).astype(x.dtype)
        xhat = ad.mul(ad.sub(x, rm), inv)
    return ad.add(ad.mul(xhat, stats.scale), stats.offset)


@dataclass
class RolloutTrace:
    """Per-timestep readouts from one rollout over a batch."""

    logits: list
    embeddings: list
    mode: str
    cycles: int

    @property
    def T(self) -> int:
        return len(self.logits)

    @property
    def logit_values(self) -> np.ndarray:
        """[T, N, C]"""
        return np.stack([z.value for z in self.logits])

    @property
    def probs(self) -> np.ndarray:
        """[T, N, C] class distributions."""
        return ad._softmax_np(self.logit_values.astype(np.float64))

    @property
    def final_embedding(self) -> np.ndarray:
        return self.embeddings[-1].value


class CascadeNet:
    def __init__(self, spec: NetworkSpec, params: dict, norms: dict):
        self.spec = spec
        self.params = params
        self.norms = norms

    # ------------------------------------------------------------ creation

    @classmethod
    def init(cls, spec: NetworkSpec, seed=0) -> "CascadeNet":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        dt = np.dtype(spec.dtype)
        w, k = spec.width, spec.kernel_size
        params, norms = {}, {}

        def weight(name, shape, fan_in, gain=2.0):
            params[name] = ad.Tensor(rng.normal(0.0, np.sqrt(gain / fan_in), size=shape).astype(dt),
                                     requires_grad=True)

        def norm(name):
            scale = ad.Tensor(np.ones(w, dtype=dt), requires_grad=True)
            offset = ad.Tensor(np.zeros(w, dtype=dt), requires_grad=True)
            params[name + ".scale"] = scale
            params[name + ".offset"] = offset
            norms[name] = NormStats(np.zeros((spec.t_max, w)), np.ones((spec.t_max, w)), scale, offset)

        if spec.block_type == "mlp":
            d_in = int(np.prod(spec.input_shape))
            weight("stem.w", (d_in, w), d_in)
        else:
            c_in = spec.input_shape[0]
            weight("stem.w", (k, k, c_in, w), c_in * k * k)
        norm("stem.norm")
        for b in range(spec.num_blocks):
            for j in (1, 2):
                if spec.block_type == "mlp":
                    weight(f"block{b}.w{j}", (w, w), w)
                else:
                    weight(f"block{b}.w{j}", (k, k, w, w), w * k * k)
                norm(f"block{b}.norm{j}")
        for h in range(spec.num_heads):
            weight(f"head{h}.w", (w, spec.num_classes), w, gain=1.0)
            params[f"head{h}.b"] = ad.Tensor(np.zeros(spec.num_classes, dtype=dt), requires_grad=True)
        return cls(spec, params, norms)

    def parameters(self) -> list[tuple[str, ad.Tensor]]:
        return list(self.params.items())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "CascadeNet":
        params = {k: ad.Tensor(v.value.copy(), requires_grad=True) for k, v in self.params.items()}
        norms = {k: NormStats(s.mean.copy(), s.var.copy(), params[k + ".scale"], params[k + ".offset"],
                              s.updates.copy()) for k, s in self.norms.items()}
        return CascadeNet(self.spec, params, norms)

    # -------------------------------------------------------------- layers

    def _input(self, x) -> ad.Tensor:
        arr = x.value if isinstance(x, ad.Tensor) else np.asarray(x)
        shape = self.spec.input_shape
        if tuple(arr.shape) == shape:
            arr = arr[None]
        if tuple(arr.shape[1:]) != shape:
            raise ValueError(f"input shape {tuple(arr.shape[1:])} does not match network {shape}")
        arr = arr.astype(self.spec.dtype, copy=False)
        if self.spec.block_type == "mlp":
            arr = arr.reshape(arr.shape[0], -1)
        else:
            arr = np.ascontiguousarray(arr.transpose(0, 2, 3, 1))  # channels last internally
        return ad.Tensor(arr)

    def _linear(self, name, x):
        w = self.params[name]
        return ad.conv2d(x, w) if self.spec.block_type == "conv" else ad.matmul(x, w)

    def _norm(self, name, x, t, training):
        s = self.spec
        return normalize(x, self.norms[name], t, training, s.eps, s.momentum)

    def stem(self, x: ad.Tensor, t: int, training: bool = False) -> ad.Tensor:
        return ad.relu(self._norm("stem.norm", self._linear("stem.w", x), t, training))

    def residual(self, b: int, z: ad.Tensor, t: int, training: bool = False) -> ad.Tensor:
        h = ad.relu(self._norm(f"block{b}.norm1", self._linear(f"block{b}.w1", z), t, training))
        return self._norm(f"block{b}.norm2", self._linear(f"block{b}.w2", h), t, training)

    def embed(self, z: ad.Tensor) -> ad.Tensor:
        return ad.mean(z, axis=(1, 2)) if self.spec.block_type == "conv" else z

    def head_index(self, t: int) -> int:
        return min(t, self.spec.num_heads) - 1

    def head(self, emb: ad.Tensor, t: int) -> ad.Tensor:
        h = self.head_index(t)
        return ad.affine(emb, self.params[f"head{h}.w"], self.params[f"head{h}.b"])

    def head_weight_row(self, cls: int, t: int | None = None) -> np.ndarray:
        h = self.head_index(t if t is not None else self.spec.t_max)
        return self.params[f"head{h}.w"].value[:, cls]


# ------------------------------------------------------------------ rollouts


class CascadedStepper:
    """Steps a cascaded network one global update at a time.

    Every block reads its current input, computes its residual transform and
    pushes it through its delay line within the same sweep; the skip path is
    instantaneous.  The stem's delay line is primed with the first frame
    (the input is presented at t = 0), so the stem output reaches block 1 at
    t = 1 and the final block reaches its asymptote at t = num_blocks + 1.
    """

    def __init__(self, net: CascadeNet, kernel: TemporalKernel, training: bool = False):
        self.net = net
        self.kernel = kernel
        self.training = training
        self.lines = [DelayLine(kernel) for _ in range(net.spec.num_delays)]
        self.t = 0

    def stats_index(self) -> int:
        # under an instantaneous kernel every step already sits at the asymptote
        return self.net.spec.t_max if self.kernel.instantaneous else self.t

    def step(self, x) -> tuple[ad.Tensor, ad.Tensor]:
        net = self.net
        self.t += 1
        si = self.stats_index()
        s = net.stem(net._input(x), si, self.training)
        if self.t == 1:
            self.lines[0].push(s)
        z = self.lines[0].push(s)
        for b in range(net.spec.num_blocks):
            f = net.residual(b, z, si, self.training)
            z = ad.relu(ad.add(z, self.lines[b + 1].push(f)))
        emb = net.embed(z)
        return net.head(emb, self.t), emb


def rollout_cascaded(net: CascadeNet, input_seq, T: int, kernel: TemporalKernel,
                     training: bool = False) -> RolloutTrace:
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    if len(input_seq) != T:
        raise ValueError(f"input sequence has {len(input_seq)} frames, expected T={T}")
    stepper = CascadedStepper(net, kernel, training)
    logits, embs = [], []
    for x in input_seq:
        z, e = stepper.step(x)
        logits.append(z)
        embs.append(e)
    return RolloutTrace(logits, embs, CASCADED, cycles=T)


def rollout_static(net: CascadeNet, x, T: int, kernel: TemporalKernel, training: bool = False):
    return rollout_cascaded(net, [x] * T, T, kernel, training)


def forward_standard(net: CascadeNet, x, training: bool = False) -> ad.Tensor:
    """Ordinary single-pass ResNet logits using the asymptotic norm statistics."""
    t = net.spec.t_max
    z = net.stem(net._input(x), t, training)
    for b in range(net.spec.num_blocks):
        z = ad.relu(ad.add(z, net.residual(b, z, t, training)))
    return net.head(net.embed(z), t)


def rollout_serial_anytime(net: CascadeNet, x, T: int, training: bool = False) -> RolloutTrace:
    """One block update per cycle; the head reads the residual stream built so far.

    Step t has executed the stem and blocks 1..t-1.  Each block runs once, on
    its asymptotic input, so the asymptotic norm statistics are used throughout.
    """
    B = net.spec.num_blocks
    if T < B + 1:
        raise ValueError(f"serial rollout needs T >= {B + 1} to activate every block, got {T}")
    si = net.spec.t_max
    z = net.stem(net._input(x), si, training)
    logits, embs = [], []
    for t in range(1, T + 1):
        if 2 <= t <= B + 1:
            z = ad.relu(ad.add(z, net.residual(t - 2, z, si, training)))
        emb = net.embed(z)
        logits.append(net.head(emb, t))
        embs.append(emb)
    return RolloutTrace(logits, embs, SERIAL, cycles=T)


def rollout_sequential(net: CascadeNet, input_seq) -> RolloutTrace:
    """A complete serial pass on every frame (the serial-per-frame baseline)."""
    logits, embs = [], []
    for x in input_seq:
        z = net.stem(net._input(x), net.spec.t_max)
        for b in range(net.spec.num_blocks):
            z = ad.relu(ad.add(z, net.residual(b, z, net.spec.t_max)))
        emb = net.embed(z)
        logits.append(net.head(emb, net.spec.t_max))
        embs.append(emb)
    return RolloutTrace(logits, embs, SEQUENTIAL, cycles=len(input_seq) * net.spec.num_delays)


def rollout(net: CascadeNet, x, T: int, kernel: TemporalKernel, mode: str = CASCADED,
            training: bool = False) -> RolloutTrace:
    if mode == CASCADED:
        return rollout_static(net, x, T, kernel, training)
    if mode == SERIAL:
        return rollout_serial_anytime(net, x, T, training)
    raise ValueError(f"unknown rollout mode {mode!r}")


# ---------------------------------------------------------------- checkpoint

_FIXED_TIME = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, net: CascadeNet, meta: dict | None = None) -> None:
    """Write a zip container: ``manifest.json`` plus one ``.npy`` per array.

    Entries carry a fixed timestamp and sorted order so identical networks
    produce identical bytes.
    """
    arrays = {f"params/{k}.npy": v.value for k, v in net.params.items()}
    for k, s in net.norms.items():
        arrays[f"norm/{k}.mean.npy"] = s.mean
        arrays[f"norm/{k}.var.npy"] = s.var
        arrays[f"norm/{k}.updates.npy"] = s.updates
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": net.spec.to_dict(),
        "params": sorted(net.params),
        "norms": sorted(net.norms),
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_FIXED_TIME)
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True), zipfile.ZIP_DEFLATED)
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name, date_time=_FIXED_TIME)
            zf.writestr(info, _npy_bytes(arrays[name]), zipfile.ZIP_DEFLATED)


def load_checkpoint(path) -> tuple[CascadeNet, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a cascadenet checkpoint")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")

        def read(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        spec = NetworkSpec.from_dict(manifest["spec"])
        params = {k: ad.Tensor(read(f"params/{k}.npy"), requires_grad=True) for k in manifest["params"]}
        norms = {k: NormStats(read(f"norm/{k}.mean.npy"), read(f"norm/{k}.var.npy"),
                              params[k + ".scale"], params[k + ".offset"], read(f"norm/{k}.updates.npy"))
                 for k in manifest["norms"]}
    return CascadeNet(spec, params, norms), manifest.get("meta", {})
