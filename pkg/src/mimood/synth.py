"""Synthetic OOD batches: k-way input mixup followed by resize, colour jitter and affine warps.

All functions work on float64 numpy arrays shaped [N x C x H x W] with values in
[0, 1] and draw randomness only from the ``numpy.random.Generator`` they are
given, so a fixed seed reproduces a batch bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError

# luma weights shared by the contrast, saturation and hue stages
GRAY = np.array([0.299, 0.587, 0.114])
_YIQ = np.array(
    [
        GRAY,
        [0.596, -0.274, -0.322],
        [0.211, -0.523, 0.312],
    ]
)
_YIQ_INV = np.linalg.inv(_YIQ)


def _interval(name: str, value, lo_bound: float, hi_bound: float) -> tuple[float, float]:
    lo, hi = (float(v) for v in value)
    if not lo <= hi:
        raise ConfigError(f"{name}: interval ({lo}, {hi}) is not ordered")
    if lo < lo_bound or hi > hi_bound:
        raise ConfigError(f"{name}: interval ({lo}, {hi}) must lie within [{lo_bound}, {hi_bound}]")
    return lo, hi


@dataclass(frozen=True)
class MixupConfig:
    k: int = 5
    weight_mode: str = "equal"
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"mixup k must be >= 1, got {self.k}")
        if self.weight_mode not in ("equal", "dirichlet"):
            raise ConfigError(f"weight_mode must be 'equal' or 'dirichlet', got {self.weight_mode!r}")
        if self.weight_mode == "dirichlet" and not self.alpha > 0:
            raise ConfigError(f"dirichlet alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class AugmentConfig:
    target_hw: tuple[int, int] = (32, 32)
    brightness_range: tuple[float, float] = (0.5, 1.5)
    contrast_range: tuple[float, float] = (0.5, 1.5)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    hue_range: tuple[float, float] = (-0.1, 0.1)
    rotation_degrees: tuple[float, float] = (-90.0, 90.0)
    translate_frac: tuple[float, float] = (0.0, 0.2)

    def __post_init__(self):
        h, w = (int(v) for v in self.target_hw)
        if h < 1 or w < 1:
            raise ConfigError(f"target_hw must be positive, got {self.target_hw}")
        object.__setattr__(self, "target_hw", (h, w))
        for name in ("brightness_range", "contrast_range", "saturation_range"):
            object.__setattr__(self, name, _interval(name, getattr(self, name), 0.0, math.inf))
            if getattr(self, name)[0] <= 0:
                raise ConfigError(f"{name} must be positive")
        object.__setattr__(self, "hue_range", _interval("hue_range", self.hue_range, -0.5, 0.5))
        object.__setattr__(
            self, "rotation_degrees", _interval("rotation_degrees", self.rotation_degrees, -90.0, 90.0)
        )
        object.__setattr__(self, "translate_frac", _interval("translate_frac", self.translate_frac, 0.0, 0.2))

    @classmethod
    def identity(cls, target_hw: tuple[int, int]) -> "AugmentConfig":
        """Unit jitter factors and zero-range geometry: the augmentation becomes a resize only."""
        return cls(
            target_hw=target_hw,
            brightness_range=(1.0, 1.0),
            contrast_range=(1.0, 1.0),
            saturation_range=(1.0, 1.0),
            hue_range=(0.0, 0.0),
            rotation_degrees=(0.0, 0.0),
            translate_frac=(0.0, 0.0),
        )


@dataclass(frozen=True)
class MixedBatch:
    x_mix: np.ndarray
    x_aug: np.ndarray
    weights: np.ndarray
    source_indices: np.ndarray


def _check_images(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"{what} expects N x C x H x W images, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# mixup


def mixup_sources(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """[n x k] source indices: row ``i`` is ``perm[i], perm[i+1], ..., perm[i+k-1]`` (mod n).

    Each row is a uniformly random ordered k-subset of ``range(n)`` and every
    column is a permutation, so each input feeds exactly k mixtures.
    """
    if k > n:
        raise ConfigError(f"cannot mix k={k} distinct samples from a batch of {n}")
    perm = rng.permutation(n)
    return perm[(np.arange(n)[:, None] + np.arange(k)[None, :]) % n]


def mixup_weights(n: int, cfg: MixupConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.weight_mode == "equal":
        return np.full((n, cfg.k), 1.0 / cfg.k)
    return rng.dirichlet(np.full(cfg.k, cfg.alpha), size=n)


def multiple_input_mixup(
    x: np.ndarray, cfg: MixupConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convexly combine ``cfg.k`` distinct batch members into each of N outputs.

    Returns ``(x_mix, weights, source_indices)``.
    """
    x = _check_images(x, "mixup")
    n = x.shape[0]
    idx = mixup_sources(n, cfg.k, rng)
    w = mixup_weights(n, cfg, rng)
    src = x[idx]  # [N, k, C, H, W]
    mixed = np.einsum("nk,nkchw->nchw", w, src)
    # rounding in the weighted sum may step one ulp outside the source envelope
    mixed = np.clip(mixed, src.min(axis=1), src.max(axis=1))
    return mixed, w, idx


# ---------------------------------------------------------------------------
# resize


def _linear_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    lo = np.floor(s).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, s - lo


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres, source coordinates clamped to the image."""
    x = _check_images(x, "resize_bilinear")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"target size must be positive, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    lo, hi, f = _linear_taps(h, out_h)
    rows = x[:, :, lo, :] * (1 - f)[:, None] + x[:, :, hi, :] * f[:, None]
    lo, hi, f = _linear_taps(w, out_w)
    return rows[:, :, :, lo] * (1 - f) + rows[:, :, :, hi] * f


# ---------------------------------------------------------------------------
# colour jitter


def gray(x: np.ndarray) -> np.ndarray:
    """Luma of [N x 3 x H x W] images, shaped [N x 1 x H x W]."""
    return np.einsum("c,nchw->nhw", GRAY, x)[:, None]


def hue_matrix(turns: float) -> np.ndarray:
    """3x3 RGB map rotating chromaticity by ``2 pi turns`` in the YIQ plane, luma fixed."""
    a = 2.0 * math.pi * turns
    rot = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(a), -math.sin(a)], [0.0, math.sin(a), math.cos(a)]])
    return _YIQ_INV @ rot @ _YIQ


def apply_jitter(
    x: np.ndarray, brightness, contrast, saturation, hue
) -> np.ndarray:
    """Apply per-image factors (arrays of length N) in the order b, c, s, h; clamp after each."""
    x = _check_images(x, "color_jitter")
    if x.shape[1] != 3:
        raise DimensionError(f"colour jitter needs 3 channels, got {x.shape[1]}")
    col = lambda v: np.asarray(v, dtype=np.float64).reshape(-1, 1, 1, 1)  # noqa: E731
    b, c, s = col(brightness), col(contrast), col(saturation)
    out = np.clip(b * x, 0.0, 1.0)
    mean_gray = gray(out).mean(axis=(2, 3), keepdims=True)
    out = np.clip(c * out + (1 - c) * mean_gray, 0.0, 1.0)
    out = np.clip(s * out + (1 - s) * gray(out), 0.0, 1.0)
    mats = np.stack([hue_matrix(h) for h in np.asarray(hue, dtype=np.float64).reshape(-1)])
    out = np.einsum("nij,njhw->nihw", mats, out)
    return np.clip(out, 0.0, 1.0)


def color_jitter(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random brightness, contrast, saturation and hue; single-channel images pass through."""
    x = _check_images(x, "color_jitter")
    if x.shape[1] == 1:
        return x.copy()
    if x.shape[1] != 3:
        raise DimensionError(f"colour jitter needs 1 or 3 channels, got {x.shape[1]}")
    n = x.shape[0]
    b = rng.uniform(*cfg.brightness_range, size=n)
    c = rng.uniform(*cfg.contrast_range, size=n)
    s = rng.uniform(*cfg.saturation_range, size=n)
    h = rng.uniform(*cfg.hue_range, size=n)
    return apply_jitter(x, b, c, s, h)


# ---------------------------------------------------------------------------
# affine


def _sample_zero_fill(x: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup of x [N,C,H,W] at per-image coordinates [N,H',W']; outside reads as 0."""
    n, c, h, w = x.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx, fy = xs - x0, ys - y0
    nidx = np.arange(n)[:, None, None]
    out = np.zeros((n, xs.shape[1], xs.shape[2], c))
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = x[nidx, :, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]  # [N,H',W',C]
            out += np.where(ok, wy * wx, 0.0)[..., None] * vals
    return out.transpose(0, 3, 1, 2)


def affine_transform(x: np.ndarray, angle_deg, tx, ty) -> np.ndarray:
    """Rotate each image by ``angle_deg`` (counter-clockwise as displayed) about its centre,
    then shift by (tx, ty) pixels, sampling bilinearly through the inverse map."""
    x = _check_images(x, "affine")
    n, _, h, w = x.shape
    vec = lambda v: np.broadcast_to(np.asarray(v, dtype=np.float64), (n,))[:, None, None]  # noqa: E731
    theta = np.deg2rad(vec(angle_deg))
    cos, sin = np.cos(theta), np.sin(theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = gx[None] - cx - vec(tx)
    dy = gy[None] - cy - vec(ty)
    xs = cx + cos * dx - sin * dy
    ys = cy + sin * dx + cos * dy
    return _sample_zero_fill(x, xs, ys)


def random_affine(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = _check_images(x, "random_affine")
    n, _, h, w = x.shape
    angle = rng.uniform(*cfg.rotation_degrees, size=n)
    frac = rng.uniform(*cfg.translate_frac, size=(n, 2))
    sign = np.where(rng.random((n, 2)) < 0.5, -1.0, 1.0)
    shift = frac * sign * np.array([w, h], dtype=np.float64)
    return affine_transform(x, angle, shift[:, 0], shift[:, 1])


# ---------------------------------------------------------------------------


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = resize_bilinear(x, *cfg.target_hw)
    out = color_jitter(out, cfg, rng)
    return random_affine(out, cfg, rng)


def synthesize_ood(
    x_id: np.ndarray,
    mix_cfg: MixupConfig,
    aug_cfg: AugmentConfig,
    rng: Optional[np.random.Generator] = None,
) -> MixedBatch:
    """Mixup, then resize, colour jitter and random affine, in that order."""
    if rng is None:
        rng = np.random.default_rng(mix_cfg.seed)
    x_mix, w, idx = multiple_input_mixup(x_id, mix_cfg, rng)
    return MixedBatch(x_mix, augment(x_mix, aug_cfg, rng), w, idx)
