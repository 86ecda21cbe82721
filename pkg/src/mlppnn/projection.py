"""Projection of sequence frames onto the high-resolution grid.

For every HR grid node, the nearest pixel of each frame (under that frame's
transform to the reference system) is gathered as a (value, distance) pair.
Per-node arrays of these pairs are the interpolator's input.  Distances are
expressed in HR-pixel units, i.e. reference-frame distance times the scale
factor; trained kernels consume this unit and record it in their model file.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .registration import SimilarityTransform

__all__ = [
    "HighResGrid",
    "NeighborArray",
    "NeighborField",
    "gather_neighbors",
    "build_neighbor_field",
]

# A back-projection farther than this outside the frame (in LR pixels) marks
# the sample as off-frame; combiners may then drop it.
_OFF_FRAME_SLACK = 1.0


@dataclass(frozen=True)
class HighResGrid:
    """Output grid: `scale` HR pixels per LR pixel of the reference frame."""

    scale: int
    width: int
    height: int

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.width % self.scale or self.height % self.scale:
            raise ValueError(
                f"grid {self.width}x{self.height} is not a multiple of scale {self.scale}"
            )

    @classmethod
    def from_lowres(cls, width: int, height: int, scale: int) -> "HighResGrid":
        return cls(scale=scale, width=width * scale, height=height * scale)

    def node_to_ref(self, u, v):
        """Reference-frame continuous coordinate of HR node (u, v).

        Area-consistent center alignment: node (u, v) sits at
        ((u + 0.5)/L - 0.5, (v + 0.5)/L - 0.5).
        """
        inv = 1.0 / self.scale
        return (np.asarray(u) + 0.5) * inv - 0.5, (np.asarray(v) + 0.5) * inv - 0.5


@dataclass(frozen=True)
class NeighborArray:
    """Per-node nearest-pixel samples, one per frame, in frame order.

    values: gray levels; distances: HR-pixel units; flags: True where the
    node's back-projection fell off-frame by more than one LR pixel.
    """

    values: np.ndarray
    distances: np.ndarray
    flags: np.ndarray

    def __post_init__(self):
        if not (self.values.shape == self.distances.shape == self.flags.shape):
            raise ValueError(
                f"values/distances/flags shapes differ: {self.values.shape}, "
                f"{self.distances.shape}, {self.flags.shape}"
            )

    def __len__(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class NeighborField:
    """NeighborArray data for every grid node, as (height, width, N) arrays."""

    values: np.ndarray
    distances: np.ndarray
    flags: np.ndarray

    def at(self, u: int, v: int) -> NeighborArray:
        return NeighborArray(
            values=self.values[v, u], distances=self.distances[v, u], flags=self.flags[v, u]
        )


def _gather_frame(frame, transform: SimilarityTransform, xr, yr, scale: int):
    """Nearest-pixel samples of one frame at reference coordinates (xr, yr)."""
    h, w = frame.shape
    xf, yf = transform.apply_inverse(xr, yr)
    # Rounding the inverse-mapped point is exact nearest-neighbor search for
    # similarity transforms (they scale all distances uniformly).
    ix = np.clip(np.floor(xf + 0.5).astype(np.intp), 0, w - 1)
    iy = np.clip(np.floor(yf + 0.5).astype(np.intp), 0, h - 1)
    values = frame[iy, ix]
    xc, yc = transform.apply(ix.astype(np.float64), iy.astype(np.float64))
    distances = np.hypot(xc - xr, yc - yr) * scale
    flags = (
        (xf < -_OFF_FRAME_SLACK)
        | (xf > w - 1 + _OFF_FRAME_SLACK)
        | (yf < -_OFF_FRAME_SLACK)
        | (yf > h - 1 + _OFF_FRAME_SLACK)
    )
    return values, distances, flags


def gather_neighbors(
    frames: list[np.ndarray],
    transforms: list[SimilarityTransform],
    grid: HighResGrid,
    node: tuple[int, int],
) -> NeighborArray:
    """Gather the N (value, distance) nearest-pixel samples for one grid node."""
    if len(frames) != len(transforms) or not frames:
        raise ValueError("frames and transforms must be equal-length and non-empty")
    u, v = node
    if not (0 <= u < grid.width and 0 <= v < grid.height):
        raise ValueError(f"node {node} outside grid {grid.width}x{grid.height}")
    xr, yr = grid.node_to_ref(float(u), float(v))
    n = len(frames)
    values = np.empty(n)
    distances = np.empty(n)
    flags = np.empty(n, dtype=bool)
    for k, (frame, t) in enumerate(zip(frames, transforms)):
        val, dist, flag = _gather_frame(frame, t, np.float64(xr), np.float64(yr), grid.scale)
        values[k] = val
        distances[k] = dist
        flags[k] = flag
    return NeighborArray(values=values, distances=distances, flags=flags)


def build_neighbor_field(
    frames: list[np.ndarray],
    transforms: list[SimilarityTransform],
    grid: HighResGrid,
    threads: int = 1,
) -> NeighborField:
    """gather_neighbors at every grid node, vectorized per frame.

    Frames may be processed concurrently (`threads` > 1, 0 = one per CPU);
    each frame writes a disjoint slice, so results are bitwise independent
    of the thread count.
    """
    if len(frames) != len(transforms) or not frames:
        raise ValueError("frames and transforms must be equal-length and non-empty")
    n = len(frames)
    us, vs = np.meshgrid(np.arange(grid.width), np.arange(grid.height))
    xr, yr = grid.node_to_ref(us.astype(np.float64), vs.astype(np.float64))
    values = np.empty((grid.height, grid.width, n))
    distances = np.empty((grid.height, grid.width, n))
    flags = np.empty((grid.height, grid.width, n), dtype=bool)

    def fill(k: int):
        val, dist, flag = _gather_frame(frames[k], transforms[k], xr, yr, grid.scale)
        values[:, :, k] = val
        distances[:, :, k] = dist
        flags[:, :, k] = flag

    if threads == 1 or n == 1:
        for k in range(n):
            fill(k)
    else:
        workers = threads if threads > 0 else None
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(n)))
    return NeighborField(values=values, distances=distances, flags=flags)
