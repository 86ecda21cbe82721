"""Synthetic training patterns from still images, and kernel-MLP training.

Patterns mimic what the projection stage produces at a single grid node: a
target intensity at a sub-pixel location plus N low-resolution measurements
scattered around it, each tagged with its distance.  Training minimizes the
mean half-squared pattern error with multi-restart nonlinear conjugate
gradient descent.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .imagecore import as_image, gradient_magnitude, sample_bilinear
from .kernelnet import DEGENERATE_EPS, KernelMlp
from .projection import NeighborArray

__all__ = [
    "TrainingPattern",
    "TrainConfig",
    "TrainingError",
    "TargetSampler",
    "sample_target_location",
    "synth_lowres_pixel",
    "make_pattern",
    "make_dataset",
    "batch_loss",
    "minimize_cg",
    "train",
    "RestartRecord",
    "TrainReport",
    "dataset_to_bytes",
    "dataset_from_bytes",
]


@dataclass(frozen=True)
class TrainingPattern:
    """One supervised example: scattered samples plus the true value."""

    samples: NeighborArray
    target: float

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("pattern needs at least one sample")
        if not math.isfinite(self.target):
            raise ValueError(f"target must be finite, got {self.target}")


@dataclass(frozen=True)
class TrainConfig:
    sigma: float
    frames: int = 25
    scale: int = 3
    patterns: int = 5000
    scatter_radius: float = 1.5
    restarts: int = 10
    cg_max_iters: int = 200
    cg_tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.frames < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.patterns < 1:
            raise ValueError(f"patterns must be >= 1, got {self.patterns}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if not (self.scatter_radius > 0):
            raise ValueError(f"scatter_radius must be > 0, got {self.scatter_radius}")

    @property
    def margin(self) -> float:
        # Keeps every scattered low-res footprint inside the source image.
        return self.scale * (self.scatter_radius + 1.0)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Target-site sampling
# ---------------------------------------------------------------------------


class TargetSampler:
    """Draws target sites from an image, favoring gray-level discontinuities.

    Site probability is proportional to the 3x3 box-smoothed gradient
    magnitude plus an epsilon of 1% of its mean, so flat regions stay
    reachable.  Sites are restricted to the interior that keeps the whole
    scatter footprint inside the image.
    """

    def __init__(self, img: np.ndarray, margin: float):
        img = as_image(img)
        h, w = img.shape
        m = int(math.ceil(margin))
        if w - 2 * m < 1 or h - 2 * m < 1:
            raise ValueError(
                f"image {w}x{h} too small: need at least {2 * m + 1} pixels per side "
                f"for margin {margin}"
            )
        gm = gradient_magnitude(img)
        pad = np.pad(gm, 1, mode="edge")
        smooth = np.zeros_like(gm)
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                smooth += pad[dy : dy + h, dx : dx + w]
        smooth /= 9.0
        weights = smooth[m : h - m, m : w - m]
        eps = 0.01 * weights.mean()
        weights = (weights + eps).ravel()
        total = weights.sum()
        if total <= 0.0:
            weights = np.ones_like(weights)   # flat image: uniform over sites
            total = weights.sum()
        self._cum = np.cumsum(weights)
        self._total = float(total)
        self._m = m
        self._inner_w = w - 2 * m

    def draw(self, rng: np.random.Generator) -> tuple[float, float]:
        u = rng.random() * self._total
        idx = int(np.searchsorted(self._cum, u, side="right"))
        idx = min(idx, self._cum.size - 1)
        sy, sx = divmod(idx, self._inner_w)
        jitter = rng.random(2) - 0.5
        return (self._m + sx + float(jitter[0]), self._m + sy + float(jitter[1]))


def sample_target_location(img: np.ndarray, margin: float, rng: np.random.Generator):
    """One target site with sub-pixel jitter in [-0.5, 0.5)^2.

    Prefer a reused TargetSampler when drawing many sites from one image;
    this convenience wrapper rebuilds the weight table every call.
    """
    return TargetSampler(img, margin).draw(rng)


# ---------------------------------------------------------------------------
# Low-resolution pixel synthesis
# ---------------------------------------------------------------------------


def _lowres_values(img: np.ndarray, cx: np.ndarray, cy: np.ndarray, scale: int) -> np.ndarray:
    """Box-average of scale x scale bilinear samples centered at each (cx, cy)."""
    off = np.arange(scale, dtype=np.float64) - (scale - 1) / 2.0
    ox, oy = np.meshgrid(off, off, indexing="xy")
    xs = np.asarray(cx, dtype=np.float64)[..., None] + ox.ravel()
    ys = np.asarray(cy, dtype=np.float64)[..., None] + oy.ravel()
    return sample_bilinear(img, xs, ys).mean(axis=-1)


def synth_lowres_pixel(img: np.ndarray, center: tuple[float, float], scale: int) -> float:
    """Value of a simulated low-resolution pixel centered at `center`.

    The footprint spans scale x scale source pixels; each lattice point is
    sampled bilinearly and the results averaged.
    """
    img = as_image(img)
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    cx, cy = float(center[0]), float(center[1])
    half = (scale - 1) / 2.0
    h, w = img.shape
    if not (cx - half >= 0 and cx + half <= w - 1 and cy - half >= 0 and cy + half <= h - 1):
        raise ValueError(
            f"footprint of size {scale} at ({cx}, {cy}) falls outside the {w}x{h} image"
        )
    return float(_lowres_values(img, np.float64(cx), np.float64(cy), scale))


def make_pattern(
    img: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    sampler: TargetSampler | None = None,
) -> TrainingPattern:
    """One training pattern: noiseless target, N noisy scattered samples.

    Offsets are uniform in a disk of cfg.scatter_radius low-res pixels;
    distances are reported in high-res units (offset length times scale).
    Noise draws happen even at sigma=0 so datasets differing only in sigma
    share geometry.
    """
    if sampler is None:
        sampler = TargetSampler(img, cfg.margin)
    x0, y0 = sampler.draw(rng)
    scale = cfg.scale
    target = float(_lowres_values(img, np.float64(x0), np.float64(y0), scale))
    r = cfg.scatter_radius * np.sqrt(rng.random(cfg.frames))
    phi = 2.0 * np.pi * rng.random(cfg.frames)
    ox = r * np.cos(phi)
    oy = r * np.sin(phi)
    noise = rng.standard_normal(cfg.frames)
    values = _lowres_values(img, x0 + ox * scale, y0 + oy * scale, scale) + cfg.sigma * noise
    distances = np.hypot(ox, oy) * scale
    samples = NeighborArray(
        values=values, distances=distances, flags=np.zeros(cfg.frames, dtype=bool)
    )
    return TrainingPattern(samples=samples, target=target)


def make_dataset(images: list[np.ndarray], cfg: TrainConfig) -> list[TrainingPattern]:
    """cfg.patterns patterns drawn round-robin over the images.

    Pure function of (images, cfg): one generator seeded by cfg.seed drives
    every draw.
    """
    if len(images) < 1:
        raise ValueError("need at least one image")
    samplers = [TargetSampler(img, cfg.margin) for img in images]
    rng = np.random.default_rng(cfg.seed)
    return [
        make_pattern(images[k % len(images)], cfg, rng, samplers[k % len(images)])
        for k in range(cfg.patterns)
    ]


# ---------------------------------------------------------------------------
# Batch objective
# ---------------------------------------------------------------------------


def _stack_patterns(data: list[TrainingPattern]):
    sizes = {len(p.samples) for p in data}
    if len(sizes) != 1:
        raise ValueError("patterns must all have the same sample count for batching")
    values = np.stack([p.samples.values for p in data])
    distances = np.stack([p.samples.distances for p in data])
    flags = np.stack([p.samples.flags for p in data])
    targets = np.asarray([p.target for p in data])
    all_flagged = flags.all(axis=1, keepdims=True)
    eff = ~flags | all_flagged
    # Nearest effective sample per pattern, used when the weight sum degenerates.
    dist_eff = np.where(eff, distances, np.inf)
    fallback = values[np.arange(len(data)), np.argmin(dist_eff, axis=1)]
    return values, distances, targets, eff, fallback


class _BatchObjective:
    """Mean half-squared error and its 3h+1 parameter gradient, vectorized.

    Only numpy-core reductions are used so results are bitwise stable
    regardless of BLAS threading.
    """

    def __init__(self, data: list[TrainingPattern], hidden: int):
        self.g, self.d, self.t, self.eff, self.fallback = _stack_patterns(data)
        self.hidden = hidden
        self.n = len(data)
        self.skipped = 0

    def _forward(self, x: np.ndarray):
        h = self.hidden
        hw = x[0 : 2 * h : 2]
        hb = x[1 : 2 * h : 2]
        ow = x[2 * h : 3 * h]
        ob = x[-1]
        tanh = np.tanh(self.d[:, :, None] * hw + hb)      # (P, N, h)
        y = np.where(self.eff, (tanh * ow).sum(axis=-1) + ob, 0.0)
        den = y.sum(axis=1)
        degen = np.abs(den) < DEGENERATE_EPS
        safe = np.where(degen, 1.0, den)
        o = np.where(degen, self.fallback, (self.g * y).sum(axis=1) / safe)
        return tanh, y, den, degen, o

    def loss(self, x: np.ndarray) -> float:
        _, _, _, _, o = self._forward(x)
        return float(0.5 * np.square(o - self.t).mean())

    def loss_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        h = self.hidden
        ow = x[2 * h : 3 * h]
        tanh, y, den, degen, o = self._forward(x)
        res = o - self.t
        loss = float(0.5 * np.square(res).mean())
        self.skipped = int(degen.sum())
        num = (self.g * y).sum(axis=1)
        d2 = np.where(degen, 1.0, den * den)
        live = ~degen
        dy = np.where(
            live[:, None] & self.eff,
            res[:, None] * (self.g * den[:, None] - num[:, None]) / d2[:, None],
            0.0,
        )
        dt = dy[:, :, None] * (ow * (1.0 - tanh * tanh))  # (P, N, h)
        grad = np.empty(x.size)
        grad[0 : 2 * h : 2] = (dt * self.d[:, :, None]).sum(axis=(0, 1))
        grad[1 : 2 * h : 2] = dt.sum(axis=(0, 1))
        grad[2 * h : 3 * h] = (dy[:, :, None] * tanh).sum(axis=(0, 1))
        grad[-1] = dy.sum()
        grad /= self.n
        return loss, grad


def batch_loss(net: KernelMlp, data: list[TrainingPattern]) -> float:
    """Mean over patterns of the half-squared error at the current weights."""
    if len(data) < 1:
        raise ValueError("need at least one pattern")
    return _BatchObjective(data, net.hidden).loss(net.to_flat())


# ---------------------------------------------------------------------------
# Nonlinear conjugate gradient
# ---------------------------------------------------------------------------

_ARMIJO_C = 1e-4


def _line_search(loss_fn, x, f0, slope, p, alpha0=1.0):
    """Backtracking Armijo search with one quadratic-interpolation probe.

    The probe fits f(0), f'(0) and the trial value; on a quadratic objective
    it lands on the exact line minimum, which is what lets CG terminate in
    n steps there.  Returns (alpha, f_alpha) or None.
    """
    alpha = alpha0
    for _ in range(60):
        f1 = loss_fn(x + alpha * p)
        curv = f1 - f0 - slope * alpha
        if math.isfinite(f1) and curv > 0.0:
            aq = -slope * alpha * alpha / (2.0 * curv)
            if math.isfinite(aq) and aq > 0.0:
                fq = loss_fn(x + aq * p)
                if math.isfinite(fq) and fq <= f0 + _ARMIJO_C * aq * slope and fq <= f1:
                    return aq, fq
        if math.isfinite(f1) and f1 <= f0 + _ARMIJO_C * alpha * slope:
            return alpha, f1
        alpha *= 0.5
    return None


def minimize_cg(fun, x0, max_iters=200, tol=1e-9, window=5, loss_only=None):
    """Polak-Ribiere conjugate gradient with Armijo backtracking.

    fun(x) -> (loss, grad); loss_only(x) -> loss defaults to fun(x)[0].
    Restarts to steepest descent every len(x0) iterations and whenever the
    conjugate direction stops being a descent direction.  Stops when the
    relative loss decrease over `window` iterations is <= tol, on line-search
    failure along steepest descent, or at max_iters.

    Returns (x, loss, curve) with curve[0] the initial loss.
    """
    if loss_only is None:
        loss_only = lambda z: fun(z)[0]
    x = np.asarray(x0, dtype=np.float64).copy()
    n = x.size
    f, g = fun(x)
    curve = [float(f)]
    if not math.isfinite(f):
        return x, float(f), curve
    d = -g
    since_restart = 0
    for _ in range(max_iters):
        slope = float((g * d).sum())
        if slope >= 0.0:
            d = -g
            since_restart = 0
            slope = float((g * d).sum())
            if slope >= 0.0:
                break   # zero gradient
        hit = _line_search(loss_only, x, f, slope, d)
        if hit is None:
            if since_restart == 0:
                break   # cannot decrease even along -g
            d = -g
            since_restart = 0
            slope = float((g * d).sum())
            if slope >= 0.0:
                break
            hit = _line_search(loss_only, x, f, slope, d)
            if hit is None:
                break
        alpha, _ = hit
        x = x + alpha * d
        f_new, g_new = fun(x)
        curve.append(float(f_new))
        since_restart += 1
        if since_restart >= n:
            d = -g_new
            since_restart = 0
        else:
            gg = float((g * g).sum())
            beta = float((g_new * (g_new - g)).sum()) / gg if gg > 0.0 else 0.0
            beta = max(0.0, beta)
            d = -g_new + beta * d
        f, g = f_new, g_new
        if len(curve) > window:
            ref = curve[-1 - window]
            if ref - curve[-1] <= tol * max(abs(ref), 1e-300):
                break
    return x, f, curve


# ---------------------------------------------------------------------------
# Multi-restart training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RestartRecord:
    index: int
    final_loss: float
    iterations: int
    loss_curve: np.ndarray
    skipped_patterns: int


@dataclass(frozen=True)
class TrainReport:
    restarts: list
    winner: int
    config: TrainConfig


def _init_net(hidden: int, rng: np.random.Generator) -> np.ndarray:
    # Output bias 1 keeps the untrained kernel near a constant positive weight.
    x = np.empty(3 * hidden + 1)
    x[0 : 2 * hidden : 2] = rng.uniform(-1.0, 1.0, hidden)
    x[1 : 2 * hidden : 2] = rng.uniform(-1.0, 1.0, hidden)
    x[2 * hidden : 3 * hidden] = rng.uniform(-0.1, 0.1, hidden)
    x[-1] = 1.0
    return x


def train(
    data: list[TrainingPattern],
    cfg: TrainConfig,
    hidden: int = 25,
    threads: int = 1,
) -> tuple[KernelMlp, float, TrainReport]:
    """Multi-restart CG training; returns the lowest-loss network.

    Restart r is seeded by SeedSequence(cfg.seed).spawn, so results do not
    depend on whether restarts run sequentially or on a thread pool (ties in
    final loss go to the lowest restart index).  Skipped-pattern counts are
    taken at each restart's final weights.
    """
    if len(data) < 1:
        raise ValueError("need at least one pattern")
    obj = _BatchObjective(data, hidden)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)

    def run(r: int) -> tuple[RestartRecord, np.ndarray]:
        local = _BatchObjective(data, hidden) if threads != 1 else obj
        x0 = _init_net(hidden, np.random.default_rng(seeds[r]))
        x, f, curve = minimize_cg(
            local.loss_grad,
            x0,
            max_iters=cfg.cg_max_iters,
            tol=cfg.cg_tol,
            loss_only=local.loss,
        )
        local.loss_grad(x)   # refresh skipped count at the final point
        rec = RestartRecord(
            index=r,
            final_loss=float(f),
            iterations=len(curve) - 1,
            loss_curve=np.asarray(curve),
            skipped_patterns=local.skipped,
        )
        return rec, x

    if threads == 1:
        results = [run(r) for r in range(cfg.restarts)]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads if threads > 0 else None) as pool:
            results = list(pool.map(run, range(cfg.restarts)))

    finite = [(rec, x) for rec, x in results if math.isfinite(rec.final_loss)]
    if not finite:
        detail = ", ".join(f"restart {rec.index}: loss={rec.final_loss}" for rec, _ in results)
        raise TrainingError(f"all {cfg.restarts} restarts produced non-finite loss ({detail})")
    best_rec, best_x = min(finite, key=lambda rx: (rx[0].final_loss, rx[0].index))
    report = TrainReport(restarts=[rec for rec, _ in results], winner=best_rec.index, config=cfg)
    return KernelMlp.from_flat(best_x), best_rec.final_loss, report


# ---------------------------------------------------------------------------
# Dataset cache: "PNND" magic, version, config echo, raw little-endian f64
# ---------------------------------------------------------------------------

_PNND_MAGIC = b"PNND"
_PNND_VERSION = 1
# sigma, frames, scale, patterns, scatter_radius, restarts, cg_max_iters, cg_tol, seed
_CFG_FMT = "<dqqqdqqdq"


def dataset_to_bytes(data: list[TrainingPattern], cfg: TrainConfig) -> bytes:
    """Binary cache: per pattern the target, then sample values, then distances.

    Patterns generated by make_dataset carry no off-frame flags, so flags are
    not stored.
    """
    sizes = {len(p.samples) for p in data}
    if len(sizes) != 1:
        raise ValueError("cache requires a uniform sample count")
    n = sizes.pop()
    head = _PNND_MAGIC + struct.pack("<I", _PNND_VERSION)
    head += struct.pack(
        _CFG_FMT,
        cfg.sigma,
        cfg.frames,
        cfg.scale,
        cfg.patterns,
        cfg.scatter_radius,
        cfg.restarts,
        cfg.cg_max_iters,
        cfg.cg_tol,
        cfg.seed,
    )
    head += struct.pack("<qq", len(data), n)
    block = np.empty((len(data), 1 + 2 * n))
    for i, p in enumerate(data):
        block[i, 0] = p.target
        block[i, 1 : 1 + n] = p.samples.values
        block[i, 1 + n :] = p.samples.distances
    return head + block.astype("<f8").tobytes()


def dataset_from_bytes(raw: bytes) -> tuple[list[TrainingPattern], TrainConfig]:
    if raw[:4] != _PNND_MAGIC:
        raise ValueError(f"bad dataset magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _PNND_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    off = 8
    vals = struct.unpack_from(_CFG_FMT, raw, off)
    off += struct.calcsize(_CFG_FMT)
    cfg = TrainConfig(
        sigma=vals[0],
        frames=int(vals[1]),
        scale=int(vals[2]),
        patterns=int(vals[3]),
        scatter_radius=vals[4],
        restarts=int(vals[5]),
        cg_max_iters=int(vals[6]),
        cg_tol=vals[7],
        seed=int(vals[8]),
    )
    count, n = struct.unpack_from("<qq", raw, off)
    off += struct.calcsize("<qq")
    want = count * (1 + 2 * n) * 8
    if len(raw) - off != want:
        raise ValueError(f"dataset payload is {len(raw) - off} bytes, expected {want}")
    block = np.frombuffer(raw, dtype="<f8", offset=off).reshape(count, 1 + 2 * n)
    out = []
    for row in block:
        out.append(
            TrainingPattern(
                samples=NeighborArray(
                    values=row[1 : 1 + n].astype(np.float64),
                    distances=row[1 + n :].astype(np.float64),
                    flags=np.zeros(n, dtype=bool),
                ),
                target=float(row[0]),
            )
        )
    return out, cfg
