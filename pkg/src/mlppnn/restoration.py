"""Least-squares FIR restoration filtering.

The interpolated high-resolution image still carries the box blur of the
finite low-resolution pixel footprint plus residual interpolation artifacts.
A small k x k correlation filter fitted on (degraded, target) image pairs
compensates both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagecore import as_image

__all__ = [
    "FirFilter",
    "FilterDesignError",
    "design_filter",
    "apply_filter",
    "filter_to_text",
    "filter_from_text",
]

_RIDGE = 1e-8


class FilterDesignError(RuntimeError):
    pass


@dataclass(frozen=True)
class FirFilter:
    size: int
    coeffs: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"filter size must be odd and >= 1, got {self.size}")
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.shape != (self.size, self.size):
            raise ValueError(f"coeffs must be {self.size}x{self.size}, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        object.__setattr__(self, "coeffs", c)


def _shift_stack(img: np.ndarray, size: int) -> np.ndarray:
    """Interior pixels of every k x k shift of img, as columns of one matrix.

    Column (dy+r)*k + (dx+r) holds img[y+dy, x+dx] for interior (y, x); the
    same row-major order as the coefficient array.
    """
    h, w = img.shape
    r = size // 2
    ih, iw = h - 2 * r, w - 2 * r
    cols = np.empty((ih * iw, size * size))
    for dy in range(size):
        for dx in range(size):
            cols[:, dy * size + dx] = img[dy : dy + ih, dx : dx + iw].ravel()
    return cols


def design_filter(
    pairs: list[tuple[np.ndarray, np.ndarray]], size: int = 7, noise_sigma: float = 0.0
) -> FirFilter:
    """Fit correlation coefficients minimizing sum of squared pixel errors.

    The objective runs over the interior of each pair (a border band of
    width size//2 is excluded, so no padding assumption leaks into the fit).
    Normal equations get a 1e-8 ridge for conditioning.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError(f"filter size must be odd and >= 1, got {size}")
    if len(pairs) < 1:
        raise ValueError("need at least one (degraded, target) pair")
    k2 = size * size
    r = size // 2
    ata = np.zeros((k2, k2))
    atb = np.zeros(k2)
    for degraded, target in pairs:
        degraded = as_image(degraded)
        target = as_image(target)
        if degraded.shape != target.shape:
            raise ValueError(
                f"pair shapes differ: {degraded.shape} vs {target.shape}"
            )
        h, w = degraded.shape
        if h <= 2 * r or w <= 2 * r:
            raise ValueError(f"images must exceed {2 * r} pixels per side for size {size}")
        cols = _shift_stack(degraded, size)
        rhs = target[r : h - r, r : w - r].ravel()
        # einsum keeps the accumulation single-threaded and order-fixed
        ata += np.einsum("pi,pj->ij", cols, cols)
        atb += np.einsum("pi,p->i", cols, rhs)
    ata += _RIDGE * np.eye(k2)
    try:
        c = np.linalg.solve(ata, atb)
    except np.linalg.LinAlgError as e:
        raise FilterDesignError(f"normal equations singular even with ridge: {e}") from e
    if not np.all(np.isfinite(c)):
        raise FilterDesignError("normal equations produced non-finite coefficients")
    return FirFilter(size=size, coeffs=c.reshape(size, size), noise_sigma=noise_sigma)


def apply_filter(img: np.ndarray, f: FirFilter) -> np.ndarray:
    """Correlate with the filter under replicate border padding.

    out[y, x] = sum over (dy, dx) of coeffs[dy+r, dx+r] * img[y+dy, x+dx],
    with off-image reads clamped to the nearest edge pixel.
    """
    img = as_image(img)
    r = f.size // 2
    if r == 0:
        return img * float(f.coeffs[0, 0])
    h, w = img.shape
    pad = np.pad(img, r, mode="edge")
    out = np.zeros_like(img)
    for dy in range(f.size):
        for dx in range(f.size):
            out += f.coeffs[dy, dx] * pad[dy : dy + h, dx : dx + w]
    return out


def filter_to_text(f: FirFilter) -> str:
    lines = ["FIRF 1", f"size={f.size} noise_sigma={float(f.noise_sigma)!r}"]
    lines.extend(f"{float(v)!r}" for v in f.coeffs.ravel())
    return "\n".join(lines) + "\n"


def filter_from_text(text: str) -> FirFilter:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "FIRF 1":
        raise ValueError(f"bad filter magic: {lines[0]!r}" if lines else "empty filter file")
    if len(lines) < 2:
        raise ValueError("missing filter metadata line")
    kv = {}
    for tok in lines[1].split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise ValueError(f"bad metadata token {tok!r}")
        kv[key] = val
    try:
        size = int(kv["size"])
        sigma = float(kv["noise_sigma"])
    except KeyError as e:
        raise ValueError(f"filter metadata missing key {e}") from None
    vals = []
    for line in lines[2:]:
        vals.extend(float(tok) for tok in line.split())
    if len(vals) != size * size:
        raise ValueError(f"filter wants {size * size} coefficients, got {len(vals)}")
    return FirFilter(size=size, coeffs=np.asarray(vals).reshape(size, size), noise_sigma=sigma)
