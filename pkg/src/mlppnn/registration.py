"""Sub-pixel estimation of per-frame similarity transforms.

A frame is related to the reference by translation + rotation + uniform
scale.  Estimation is Gauss-Newton on the 4 parameters, run coarse-to-fine
over a factor-2 image pyramid, in the style of gradient-based template
alignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagecore import gradients, sample_bilinear

__all__ = [
    "SimilarityTransform",
    "RegistrationError",
    "estimate",
    "register_sequence",
    "load_transforms",
    "save_transforms",
]

# Minimum number of in-frame residual pixels for a solvable system.
_MIN_VALID = 32
# Smallest pyramid level edge worth aligning.
_MIN_LEVEL_SIZE = 8


@dataclass(frozen=True)
class SimilarityTransform:
    """Maps frame coordinates to reference coordinates.

    x' = scale*(cos(theta)*x - sin(theta)*y) + dx
    y' = scale*(sin(theta)*x + cos(theta)*y) + dy
    """

    dx: float = 0.0
    dy: float = 0.0
    theta: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        vals = (self.dx, self.dy, self.theta, self.scale)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"transform fields must be finite, got {vals}")
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    def apply(self, x, y):
        """Map frame coordinates (x, y) to reference coordinates."""
        c = math.cos(self.theta) * self.scale
        s = math.sin(self.theta) * self.scale
        return c * x - s * y + self.dx, s * x + c * y + self.dy

    def invert(self) -> "SimilarityTransform":
        """The reference-to-frame inverse: apply(invert(t), apply(t, p)) == p."""
        inv_scale = 1.0 / self.scale
        c = math.cos(-self.theta) * inv_scale
        s = math.sin(-self.theta) * inv_scale
        return SimilarityTransform(
            dx=-(c * self.dx - s * self.dy),
            dy=-(s * self.dx + c * self.dy),
            theta=-self.theta,
            scale=inv_scale,
        )

    def apply_inverse(self, x, y):
        """Map reference coordinates to frame coordinates, without building invert()."""
        inv_scale = 1.0 / self.scale
        c = math.cos(self.theta)
        s = math.sin(self.theta)
        ux = x - self.dx
        uy = y - self.dy
        return (c * ux + s * uy) * inv_scale, (-s * ux + c * uy) * inv_scale


IDENTITY = SimilarityTransform()


class RegistrationError(RuntimeError):
    """Estimation failed; carries the last iterate in `last_transform`."""

    def __init__(self, message: str, last_transform: SimilarityTransform):
        super().__init__(message)
        self.last_transform = last_transform


def _downsample2(img: np.ndarray) -> np.ndarray:
    # 2x2 box average; odd trailing row/column dropped.
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def _lift_level(t: SimilarityTransform) -> SimilarityTransform:
    # Coarse-to-fine coordinate change: fine = 2*coarse + 0.5 (2x2 box centers).
    c = math.cos(t.theta) * t.scale
    s = math.sin(t.theta) * t.scale
    h = 0.5
    return SimilarityTransform(
        dx=2.0 * t.dx + h - (c * h - s * h),
        dy=2.0 * t.dy + h - (s * h + c * h),
        theta=t.theta,
        scale=t.scale,
    )


def _ssd(reference: np.ndarray, frame: np.ndarray, t: SimilarityTransform) -> float:
    h, w = reference.shape
    ys, xs = np.mgrid[0:h, 0:w]
    xf, yf = t.apply_inverse(xs.astype(np.float64), ys.astype(np.float64))
    valid = (xf >= 0) & (xf <= frame.shape[1] - 1) & (yf >= 0) & (yf <= frame.shape[0] - 1)
    if not valid.any():
        return math.inf
    r = sample_bilinear(frame, xf[valid], yf[valid]) - reference[valid]
    return float(np.mean(r * r))


def _gauss_newton_level(
    reference: np.ndarray,
    frame: np.ndarray,
    init: SimilarityTransform,
    max_iters: int,
    tol: float,
) -> SimilarityTransform:
    gx_img, gy_img = gradients(frame)
    h, w = reference.shape
    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs.astype(np.float64).ravel()
    ys = ys.astype(np.float64).ravel()
    ref_flat = reference.ravel()

    t = init
    cost = _ssd(reference, frame, t)
    for _ in range(max_iters):
        xf, yf = t.apply_inverse(xs, ys)
        valid = (xf >= 0) & (xf <= frame.shape[1] - 1) & (yf >= 0) & (yf <= frame.shape[0] - 1)
        n_valid = int(valid.sum())
        if n_valid < _MIN_VALID:
            raise RegistrationError(
                f"only {n_valid} reference pixels back-project into the frame", t
            )
        xv = xf[valid]
        yv = yf[valid]
        r = sample_bilinear(frame, xv, yv) - ref_flat[valid]
        gx = sample_bilinear(gx_img, xv, yv)
        gy = sample_bilinear(gy_img, xv, yv)

        c = math.cos(t.theta)
        s = math.sin(t.theta)
        inv_scale = 1.0 / t.scale
        # Chain rule through the inverse map (dx, dy, theta, scale).
        J = np.empty((xv.size, 4))
        J[:, 0] = (-c * gx + s * gy) * inv_scale
        J[:, 1] = (-s * gx - c * gy) * inv_scale
        J[:, 2] = gx * yv - gy * xv
        J[:, 3] = -(gx * xv + gy * yv) * inv_scale

        # numpy-core reductions keep results independent of BLAS threading.
        H = (J[:, :, None] * J[:, None, :]).sum(axis=0)
        g = (J * r[:, None]).sum(axis=0)
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            raise RegistrationError("singular normal matrix", t) from None
        if not np.all(np.isfinite(delta)):
            raise RegistrationError("non-finite Gauss-Newton update", t)

        # Damped update: halve the step while it does not decrease the SSD.
        step = 1.0
        new_t = t
        new_cost = cost
        for _ in range(12):
            d = delta * step
            if t.scale + d[3] <= 1e-6:
                step *= 0.5
                continue
            cand = SimilarityTransform(
                dx=float(t.dx + d[0]),
                dy=float(t.dy + d[1]),
                theta=float(t.theta + d[2]),
                scale=float(t.scale + d[3]),
            )
            cand_cost = _ssd(reference, frame, cand)
            if cand_cost <= cost:
                new_t, new_cost = cand, cand_cost
                break
            step *= 0.5
        if new_t is t:
            break  # no improving step at this level
        update_norm = float(np.linalg.norm(delta * step))
        t, cost = new_t, new_cost
        if update_norm < tol:
            break
    return t


def estimate(
    reference: np.ndarray,
    frame: np.ndarray,
    levels: int = 3,
    max_iters: int = 50,
    tol: float = 1e-4,
    return_per_level: bool = False,
):
    """Estimate the frame-to-reference similarity transform to sub-pixel accuracy.

    Gauss-Newton minimization of the masked sum of squared intensity
    differences, coarse-to-fine over a factor-2 pyramid `levels` deep
    (levels whose edge would fall below 8 px are skipped), initialized at
    the identity on the coarsest level.  Each level iterates until the
    parameter update norm drops below `tol` or `max_iters` is reached.
    Border pixels whose back-projection falls outside the frame are
    excluded from the residual.

    Raises RegistrationError (carrying the last iterate) on degenerate or
    non-overlapping content.  With return_per_level=True, also returns the
    list of full-resolution transforms after each pyramid level.
    """
    reference = np.asarray(reference, dtype=np.float64)
    frame = np.asarray(frame, dtype=np.float64)
    if reference.shape != frame.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {frame.shape}")
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")

    ref_pyr = [reference]
    frm_pyr = [frame]
    for _ in range(levels - 1):
        if min(ref_pyr[-1].shape) < 2 * _MIN_LEVEL_SIZE:
            break
        ref_pyr.append(_downsample2(ref_pyr[-1]))
        frm_pyr.append(_downsample2(frm_pyr[-1]))

    t = IDENTITY
    per_level = []
    for level in range(len(ref_pyr) - 1, -1, -1):
        t = _gauss_newton_level(ref_pyr[level], frm_pyr[level], t, max_iters, tol)
        lifted = t
        for _ in range(level):
            lifted = _lift_level(lifted)
        per_level.append(lifted)
        if level > 0:
            t = _lift_level(t)
        else:
            t = lifted
    if return_per_level:
        return t, per_level
    return t


def register_sequence(
    frames: list[np.ndarray], reference_index: int = 0, levels: int = 3, max_iters: int = 50
) -> list[SimilarityTransform]:
    """Estimate frame-to-reference transforms for a whole sequence.

    The entry at reference_index is the identity.  Estimation failures are
    re-raised tagged with the frame index.
    """
    if not frames:
        raise ValueError("need at least one frame")
    if not 0 <= reference_index < len(frames):
        raise ValueError(f"reference_index {reference_index} out of range")
    reference = frames[reference_index]
    transforms = []
    for k, frame in enumerate(frames):
        if k == reference_index:
            transforms.append(IDENTITY)
            continue
        try:
            transforms.append(estimate(reference, frame, levels=levels, max_iters=max_iters))
        except RegistrationError as e:
            raise RegistrationError(f"frame {k}: {e}", e.last_transform) from e
    return transforms


# ---------------------------------------------------------------------------
# Transform text files: one "dx dy theta scale" line per frame, '#' comments
# ---------------------------------------------------------------------------


def save_transforms(transforms: list[SimilarityTransform]) -> str:
    lines = ["# dx dy theta scale"]
    for t in transforms:
        lines.append(
            f"{float(t.dx)!r} {float(t.dy)!r} {float(t.theta)!r} {float(t.scale)!r}"
        )
    return "\n".join(lines) + "\n"


def load_transforms(text: str) -> list[SimilarityTransform]:
    transforms = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: want 4 fields 'dx dy theta scale', got {len(parts)}")
        try:
            dx, dy, theta, scale = (float(p) for p in parts)
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric field in {line!r}") from None
        transforms.append(SimilarityTransform(dx=dx, dy=dy, theta=theta, scale=scale))
    return transforms
