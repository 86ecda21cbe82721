"""Learned-kernel weighted averaging of scattered samples.

A node value is estimated as o = sum(g_s * y_s) / sum(y_s), where the weight
y_s of each sample is a kernel function of its distance to the node.  The
kernel is either a small MLP (one scalar input, tanh hidden layer, linear
output), a fixed exponential, or a nearest-sample selector used as the
sequence nearest-neighbor baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .projection import NeighborArray, NeighborField

__all__ = [
    "KernelMlp",
    "MlpKernel",
    "Exponential",
    "NearestOnly",
    "DegeneratePattern",
    "DEGENERATE_EPS",
    "mlp_forward",
    "pnn_combine",
    "combine_field",
    "pnn_output_grad",
    "mlp_backprop",
    "seq_nn",
    "kernel_half_width",
    "ModelMeta",
    "model_to_text",
    "model_from_text",
]

# Below this magnitude the weight sum is treated as degenerate and the
# combiner falls back to the nearest sample's value.
DEGENERATE_EPS = 1e-9

DEFAULT_HIDDEN = 25


class DegeneratePattern(ArithmeticError):
    """Weight sum too close to zero for a gradient; the pattern is skipped."""


@dataclass(frozen=True)
class KernelMlp:
    """Two-layer perceptron mapping a distance to an interpolation weight.

    tanh hidden layer (25 units by default), linear output unit.  Parameters
    flatten to [w_0, b_0, ..., w_h-1, b_h-1, out_w..., out_b], matching the
    model file order.
    """

    hidden_w: np.ndarray
    hidden_b: np.ndarray
    out_w: np.ndarray
    out_b: float

    def __post_init__(self):
        hw = np.asarray(self.hidden_w, dtype=np.float64)
        hb = np.asarray(self.hidden_b, dtype=np.float64)
        ow = np.asarray(self.out_w, dtype=np.float64)
        if not (hw.ndim == hb.ndim == ow.ndim == 1 and hw.size == hb.size == ow.size):
            raise ValueError("hidden_w, hidden_b, out_w must be equal-length 1-D arrays")
        for name, arr in (("hidden_w", hw), ("hidden_b", hb), ("out_w", ow)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
        if not math.isfinite(self.out_b):
            raise ValueError("out_b must be finite")
        object.__setattr__(self, "hidden_w", hw)
        object.__setattr__(self, "hidden_b", hb)
        object.__setattr__(self, "out_w", ow)

    @property
    def hidden(self) -> int:
        return self.hidden_w.size

    @property
    def n_params(self) -> int:
        return 3 * self.hidden + 1

    def to_flat(self) -> np.ndarray:
        flat = np.empty(self.n_params)
        flat[0 : 2 * self.hidden : 2] = self.hidden_w
        flat[1 : 2 * self.hidden : 2] = self.hidden_b
        flat[2 * self.hidden : 3 * self.hidden] = self.out_w
        flat[-1] = self.out_b
        return flat

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "KernelMlp":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim != 1 or (flat.size - 1) % 3:
            raise ValueError(f"flat parameter vector must have 3h+1 entries, got {flat.size}")
        h = (flat.size - 1) // 3
        return cls(
            hidden_w=flat[0 : 2 * h : 2].copy(),
            hidden_b=flat[1 : 2 * h : 2].copy(),
            out_w=flat[2 * h : 3 * h].copy(),
            out_b=float(flat[-1]),
        )


def mlp_forward(net: KernelMlp, d):
    """Kernel weight at distance d: out_b + sum_j out_w[j] * tanh(w_j*d + b_j).

    d may be a scalar or an array; the result matches its shape.
    """
    d = np.asarray(d, dtype=np.float64)
    t = np.tanh(d[..., None] * net.hidden_w + net.hidden_b)
    out = (t * net.out_w).sum(axis=-1) + net.out_b
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class MlpKernel:
    net: KernelMlp

    def weights(self, distances: np.ndarray) -> np.ndarray:
        return mlp_forward(self.net, distances)


@dataclass(frozen=True)
class Exponential:
    """Fixed kernel exp(-d / width)."""

    width: float

    def __post_init__(self):
        if not (self.width > 0 and math.isfinite(self.width)):
            raise ValueError(f"width must be > 0, got {self.width}")

    def weights(self, distances: np.ndarray) -> np.ndarray:
        return np.exp(-np.asarray(distances, dtype=np.float64) / self.width)


@dataclass(frozen=True)
class NearestOnly:
    """Weight 1 for the minimal-distance sample, 0 otherwise (SEQ NN baseline)."""


Kernel = MlpKernel | Exponential | NearestOnly


def _effective_mask(flags: np.ndarray) -> np.ndarray:
    # Off-frame samples are dropped unless every sample is off-frame.
    all_flagged = flags.all(axis=-1, keepdims=True)
    return ~flags | all_flagged


def _combine_core(values, distances, flags, kernel):
    """Combine (..., N) sample arrays into (...) node values.

    Samples are reduced in distance-sorted order so the result is bitwise
    independent of frame order whenever distances are distinct (ties keep
    frame order via the stable sort).
    """
    order = np.argsort(distances, axis=-1, kind="stable")
    v = np.take_along_axis(values, order, axis=-1)
    d = np.take_along_axis(distances, order, axis=-1)
    f = np.take_along_axis(flags, order, axis=-1)
    eff = _effective_mask(f)
    first = np.argmax(eff, axis=-1)
    nearest = np.take_along_axis(v, first[..., None], axis=-1)[..., 0]
    if isinstance(kernel, NearestOnly):
        return nearest
    y = np.where(eff, kernel.weights(d), 0.0)
    den = y.sum(axis=-1)
    num = (v * y).sum(axis=-1)
    degenerate = np.abs(den) < DEGENERATE_EPS
    out = np.where(degenerate, nearest, num / np.where(degenerate, 1.0, den))
    return out


def pnn_combine(neighbors: NeighborArray, kernel) -> float:
    """Normalized kernel-weighted average of a node's samples.

    o = sum(g_s * y_s) / sum(y_s) over the effective samples (off-frame
    samples are dropped when an in-frame one exists).  If |sum(y_s)| falls
    below 1e-9 the nearest effective sample's value is returned instead.
    """
    if len(neighbors) < 1:
        raise ValueError("need at least one sample")
    return float(
        _combine_core(neighbors.values, neighbors.distances, neighbors.flags, kernel)
    )


def combine_field(
    nfield: NeighborField, kernel, threads: int = 1, block_rows: int | None = None
) -> np.ndarray:
    """pnn_combine applied at every grid node; returns the (H, W) image.

    Evaluation is blocked by rows to bound temporaries.  By default the
    block height is chosen so each block holds roughly 64k samples; a
    fixed height would let per-block scratch grow with the image width or
    the frame count, and cost per node then climbs once it outruns the
    cache.  Blocks write disjoint output slices, so any thread count
    yields bitwise-identical results.
    """
    h, w, n = nfield.values.shape
    if block_rows is None:
        block_rows = max(1, 65536 // (w * n))
    out = np.empty((h, w))
    starts = range(0, h, block_rows)

    def run(y0: int):
        y1 = min(y0 + block_rows, h)
        out[y0:y1] = _combine_core(
            nfield.values[y0:y1], nfield.distances[y0:y1], nfield.flags[y0:y1], kernel
        )

    if threads == 1:
        for y0 in starts:
            run(y0)
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads if threads > 0 else None) as pool:
            list(pool.map(run, starts))
    return out


def seq_nn(neighbors: NeighborArray) -> float:
    """Value of the nearest effective sample; ties go to the lowest frame index."""
    if len(neighbors) < 1:
        raise ValueError("need at least one sample")
    eff = _effective_mask(neighbors.flags)
    d = np.where(eff, neighbors.distances, np.inf)
    return float(neighbors.values[int(np.argmin(d))])


def pnn_output_grad(
    neighbors: NeighborArray, weights: np.ndarray, output: float, target: float
) -> np.ndarray:
    """Derivative of the half-squared pattern error w.r.t. each sample weight.

    dE/dy_s = (o - t) * (g_s * sum(y) - sum(g_i * y_i)) / sum(y)^2, summing
    over the effective samples; dropped samples get a zero component.
    Raises DegeneratePattern when |sum(y)| < 1e-9.
    """
    g = np.asarray(neighbors.values, dtype=np.float64)
    y = np.asarray(weights, dtype=np.float64)
    eff = _effective_mask(neighbors.flags)
    y_eff = np.where(eff, y, 0.0)
    den = y_eff.sum()
    if abs(den) < DEGENERATE_EPS:
        raise DegeneratePattern(f"|sum of weights| = {abs(den):.3e} < {DEGENERATE_EPS}")
    num = (g * y_eff).sum()
    grad = (output - target) * (g * den - num) / (den * den)
    return np.where(eff, grad, 0.0)


def mlp_backprop(net: KernelMlp, pattern) -> tuple[float, np.ndarray, bool]:
    """Loss and parameter gradient of one training pattern.

    Loss is 0.5*(o - t)^2.  The per-sample weight derivatives are chained
    through the shared MLP evaluated at each sample distance and summed into
    one gradient, laid out like KernelMlp.to_flat().

    Returns (loss, grad, skipped).  A degenerate weight sum yields the loss
    of the fallback output, a zero gradient, and skipped=True.
    """
    samples = pattern.samples
    if len(samples) < 1:
        raise ValueError("pattern needs at least one sample")
    d = np.asarray(samples.distances, dtype=np.float64)
    g = np.asarray(samples.values, dtype=np.float64)
    target = float(pattern.target)

    t = np.tanh(d[:, None] * net.hidden_w + net.hidden_b)  # (N, h)
    y = (t * net.out_w).sum(axis=-1) + net.out_b
    eff = _effective_mask(samples.flags)
    y_eff = np.where(eff, y, 0.0)
    den = y_eff.sum()
    if abs(den) < DEGENERATE_EPS:
        o = pnn_combine(samples, MlpKernel(net))
        loss = 0.5 * (o - target) ** 2
        return float(loss), np.zeros(net.n_params), True
    num = (g * y_eff).sum()
    o = num / den
    loss = 0.5 * (o - target) ** 2
    dy = (o - target) * (g * den - num) / (den * den)
    dy = np.where(eff, dy, 0.0)

    dt = dy[:, None] * net.out_w * (1.0 - t * t)  # (N, h)
    grad = np.empty(net.n_params)
    h = net.hidden
    grad[0 : 2 * h : 2] = (dt * d[:, None]).sum(axis=0)
    grad[1 : 2 * h : 2] = dt.sum(axis=0)
    grad[2 * h : 3 * h] = (dy[:, None] * t).sum(axis=0)
    grad[-1] = dy.sum()
    return float(loss), grad, False


def kernel_half_width(kernel, d_max: float = 9.0) -> float:
    """Distance at which the kernel first falls to half its zero-distance value.

    Scans [0, d_max] at step 1e-3, then bisects the bracketing interval to
    1e-6.  Returns d_max if the kernel never crosses half.  d_max defaults
    to 3 HR pixels per LR pixel at the contract scale of 3.
    """
    if isinstance(kernel, NearestOnly):
        raise ValueError("half-width undefined for the nearest-only kernel")
    k0 = float(kernel.weights(np.float64(0.0)))
    if abs(k0) < DEGENERATE_EPS:
        raise ValueError(f"kernel weight at zero distance is {k0:.3e}; width undefined")

    def below_half(dd) -> np.ndarray:
        return kernel.weights(np.asarray(dd, dtype=np.float64)) / k0 <= 0.5

    step = 1e-3
    n = int(math.ceil(d_max / step))
    ds = np.minimum(np.arange(n + 1) * step, d_max)
    hits = np.flatnonzero(below_half(ds))
    if hits.size == 0:
        return float(d_max)
    hi = float(ds[hits[0]])
    lo = float(ds[hits[0] - 1]) if hits[0] > 0 else 0.0
    while hi - lo > 1e-6:
        mid = 0.5 * (lo + hi)
        if below_half(mid):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# Model file: text, magic "MLPPNN 1", metadata line, then 3h+1 decimals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelMeta:
    noise_sigma: float
    scale: int
    frames: int
    distance_units: str = "hr"
    extra: dict = field(default_factory=dict)


def model_to_text(net: KernelMlp, noise_sigma: float, scale: int, frames: int) -> str:
    """Serialize a kernel MLP with the data conditions it was trained for."""
    lines = [
        "MLPPNN 1",
        f"hidden={net.hidden} distance_units=hr noise_sigma={float(noise_sigma)!r} "
        f"scale={int(scale)} frames={int(frames)}",
    ]
    lines.extend(f"{float(v)!r}" for v in net.to_flat())
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> tuple[KernelMlp, ModelMeta]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "MLPPNN 1":
        raise ValueError(f"bad model magic: {lines[0]!r}" if lines else "empty model file")
    if len(lines) < 2:
        raise ValueError("missing model metadata line")
    meta_kv = {}
    for tok in lines[1].split():
        key, _, val = tok.partition("=")
        if not _:
            raise ValueError(f"bad metadata token {tok!r}")
        meta_kv[key] = val
    try:
        hidden = int(meta_kv.pop("hidden"))
        units = meta_kv.pop("distance_units")
        meta = ModelMeta(
            noise_sigma=float(meta_kv.pop("noise_sigma")),
            scale=int(meta_kv.pop("scale")),
            frames=int(meta_kv.pop("frames")),
            distance_units=units,
            extra=meta_kv,
        )
    except KeyError as e:
        raise ValueError(f"model metadata missing key {e}") from None
    if units != "hr":
        raise ValueError(f"unsupported distance_units {units!r} (expected 'hr')")
    vals = []
    for line in lines[2:]:
        vals.extend(float(tok) for tok in line.split())
    want = 3 * hidden + 1
    if len(vals) != want:
        raise ValueError(f"model wants {want} parameters for hidden={hidden}, got {len(vals)}")
    return KernelMlp.from_flat(np.asarray(vals)), meta
