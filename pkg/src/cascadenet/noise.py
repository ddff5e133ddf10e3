"""Input corruptions: four lossy ones (focus, Perlin, occlusion, resolution)
and two roughly information-preserving ones (translation, rotation).

Images are ``[C, H, W]`` arrays; every transform returns the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

KINDS = ("focus", "perlin", "occlusion", "resolution", "translation", "rotation")
PERSISTENT = "persistent"
TRANSIENT = "transient"


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    patch: int | None = None          # focus / occlusion patch side; default half the image side
    sigma: float = 1.0                # focus blur
    coverage: float = 0.4             # perlin mask fraction
    perlin_cells: int = 4             # lattice cells per side
    amplitude: float = 1.0            # perlin amplitude in units of image std
    factors: tuple[int, ...] = (2, 4)
    shift: int | None = None          # translation range; default a quarter of the image side
    angle: float = 60.0               # rotation range in degrees
    fill: float = 0.0                 # occlusion value
    protocol: str = PERSISTENT
    onset: int = 10                   # transient: clean steps before the noise
    duration: int = 1                 # transient: noisy steps
    recovery: int = 10                # transient: clean steps after the noise

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.protocol not in (PERSISTENT, TRANSIENT):
            raise ValueError(f"protocol must be persistent or transient, got {self.protocol!r}")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError("coverage must lie in [0, 1]")


def _patch_origin(rng, h, w, p):
    return rng.integers(0, h - p + 1), rng.integers(0, w - p + 1)


def focus(img, patch, sigma, rng):
    _, h, w = img.shape
    p = min(patch, h, w)
    out = ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), mode="reflect")
    y0, x0 = _patch_origin(rng, h, w, p)
    out[:, y0:y0 + p, x0:x0 + p] = img[:, y0:y0 + p, x0:x0 + p]
    return out


def occlusion(img, patch, fill, rng):
    _, h, w = img.shape
    p = min(patch, h, w)
    out = img.copy()
    y0, x0 = _patch_origin(rng, h, w, p)
    out[:, y0:y0 + p, x0:x0 + p] = fill
    return out


def perlin_field(h, w, cells, rng) -> np.ndarray:
    """Classic 2-D gradient noise: random unit gradients on a
    ``(cells+1)^2`` lattice, quintic smoothstep interpolation."""
    angles = rng.uniform(0.0, 2 * np.pi, size=(cells + 1, cells + 1))
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    ys = (np.arange(h) + 0.5) * cells / h
    xs = (np.arange(w) + 0.5) * cells / w
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    iy, ix = gy.astype(int), gx.astype(int)
    fy, fx = gy - iy, gx - ix

    def corner(dy, dx):
        g = grads[iy + dy, ix + dx]
        return g[..., 0] * (fy - dy) + g[..., 1] * (fx - dx)

    def fade(t):
        return t * t * t * (t * (t * 6 - 15) + 10)

    u, v = fade(fx), fade(fy)
    top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0))
    bottom = corner(1, 0) + u * (corner(1, 1) - corner(1, 0))
    return top + v * (bottom - top)


def perlin(img, coverage, cells, amplitude, rng):
    _, h, w = img.shape
    field_ = perlin_field(h, w, cells, rng)
    peak = np.abs(field_).max()
    if peak > 0:
        field_ = field_ / peak
    scale = amplitude * float(img.std() or 1.0)
    n_pix = int(round(coverage * h * w))
    mask = np.zeros(h * w, dtype=bool)
    mask[rng.choice(h * w, size=n_pix, replace=False)] = True
    mask = mask.reshape(h, w)
    out = img + np.where(mask, scale * field_, 0.0)[None]
    return np.clip(out, img.min(), img.max())


def resolution(img, factor):
    c, h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} is not divisible by downsample factor {factor}")
    pooled = img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return np.repeat(np.repeat(pooled, factor, axis=1), factor, axis=2)


def translation(img, max_shift, rng):
    _, h, w = img.shape
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    p = max_shift
    padded = np.pad(img, ((0, 0), (p, p), (p, p)), mode="reflect")
    return padded[:, p - dy:p - dy + h, p - dx:p - dx + w].copy()


def rotation(img, max_angle, rng):
    angle = rng.uniform(-max_angle, max_angle)
    out = ndimage.rotate(img, angle, axes=(2, 1), reshape=False, order=1, mode="reflect")
    return np.clip(out, img.min(), img.max())


def apply_noise(image: np.ndarray, spec: NoiseSpec, rng) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    _, h, w = img.shape
    k = spec.kind
    if k == "focus":
        out = focus(img, spec.patch or h // 2, spec.sigma, rng)
    elif k == "occlusion":
        out = occlusion(img, spec.patch or h // 2, spec.fill, rng)
    elif k == "perlin":
        out = perlin(img, spec.coverage, spec.perlin_cells, spec.amplitude, rng)
    elif k == "resolution":
        out = resolution(img, int(rng.choice(spec.factors)))
    elif k == "translation":
        out = translation(img, spec.shift if spec.shift is not None else h // 4, rng)
    else:
        out = rotation(img, spec.angle, rng)
    out = out.astype(np.asarray(image).dtype if np.issubdtype(np.asarray(image).dtype, np.floating)
                     else np.float32)
    return out[0] if squeeze else out


def apply_noise_batch(images: np.ndarray, spec: NoiseSpec, rng) -> np.ndarray:
    return np.stack([apply_noise(im, spec, rng) for im in images])
