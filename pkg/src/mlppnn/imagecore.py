"""Grayscale image primitives: PGM I/O, sub-pixel sampling, gradients, noise, metrics.

Images are 2-D float64 arrays of shape (height, width), indexed ``img[y, x]``.
Intensities are in gray levels (nominal 0..255) but are stored unclamped so
noise and filtering do not saturate mid-pipeline; clamping happens only at PGM
export.  The pixel at integer column i, row j has its center at continuous
coordinate (x=i, y=j); pixel (0, 0) is centered at (0.0, 0.0).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "PgmParseError",
    "as_image",
    "load_pgm",
    "save_pgm",
    "sample_bilinear",
    "gradients",
    "gradient_magnitude",
    "add_gaussian_noise",
    "rmse",
]


class PgmParseError(ValueError):
    """Malformed PGM stream; the message names the offending token or offset."""


def as_image(data) -> np.ndarray:
    """Validate and return an image as a float64 (height, width) array."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be at least 1x1, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image intensities must be finite")
    return img


# ---------------------------------------------------------------------------
# PGM I/O (P2 ascii / P5 binary, maxval <= 255)
# ---------------------------------------------------------------------------

_WHITESPACE = b" \t\n\r\x0b\x0c"


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # Skips whitespace and '#' comment lines between header tokens.
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c in (b"#",):
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif c in _WHITESPACE:
            pos += 1
        else:
            break
    if pos >= n:
        raise PgmParseError(f"unexpected end of header at offset {pos}")
    start = pos
    while pos < n and buf[pos : pos + 1] not in _WHITESPACE and buf[pos : pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def _int_token(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    tok, pos = _next_token(buf, pos)
    try:
        val = int(tok)
    except ValueError:
        raise PgmParseError(f"invalid {what} token {tok!r}") from None
    return val, pos


def load_pgm(data: bytes) -> np.ndarray:
    """Parse a P2 (ascii) or P5 (binary) PGM byte stream into an image.

    Sample values are returned as reals, exactly as stored.  maxval must be
    <= 255; '#' comments are allowed between header tokens.
    """
    magic, pos = _next_token(data, 0)
    if magic not in (b"P2", b"P5"):
        raise PgmParseError(f"unsupported magic {magic!r} (want P2 or P5)")
    width, pos = _int_token(data, pos, "width")
    height, pos = _int_token(data, pos, "height")
    maxval, pos = _int_token(data, pos, "maxval")
    if width < 1 or height < 1:
        raise PgmParseError(f"invalid dimensions {width}x{height}")
    if maxval < 1:
        raise PgmParseError(f"invalid maxval token {maxval!r}")
    if maxval > 255:
        raise PgmParseError(f"maxval {maxval} exceeds 255 (16-bit PGM unsupported)")

    count = width * height
    if magic == b"P5":
        # Exactly one whitespace byte separates the header from the payload.
        if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
            raise PgmParseError(f"missing whitespace before binary payload at offset {pos}")
        pos += 1
        payload = data[pos : pos + count]
        if len(payload) < count:
            raise PgmParseError(
                f"truncated P5 payload: want {count} bytes, got {len(payload)}"
            )
        flat = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    else:
        samples = []
        while len(samples) < count:
            try:
                tok, pos = _next_token(data, pos)
            except PgmParseError:
                raise PgmParseError(
                    f"truncated P2 payload: want {count} samples, got {len(samples)}"
                ) from None
            try:
                samples.append(int(tok))
            except ValueError:
                raise PgmParseError(f"invalid P2 sample token {tok!r}") from None
        flat = np.asarray(samples, dtype=np.float64)
    if flat.max(initial=0.0) > maxval:
        raise PgmParseError(f"sample value {int(flat.max())} exceeds maxval {maxval}")
    return flat.reshape(height, width)


def save_pgm(img: np.ndarray, binary: bool = True) -> bytes:
    """Encode an image as PGM bytes: P5 by default, P2 when binary=False.

    Intensities are rounded half-up to the nearest integer, then clamped to
    [0, 255]; maxval is always written as 255.
    """
    img = as_image(img)
    height, width = img.shape
    quant = np.clip(np.floor(img + 0.5), 0.0, 255.0).astype(np.uint8)
    header = f"{'P5' if binary else 'P2'}\n{width} {height}\n255\n".encode("ascii")
    if binary:
        return header + quant.tobytes()
    rows = "\n".join(" ".join(str(v) for v in row) for row in quant)
    return header + rows.encode("ascii") + b"\n"


# ---------------------------------------------------------------------------
# Sampling, gradients, noise, metrics
# ---------------------------------------------------------------------------


def sample_bilinear(img: np.ndarray, x, y):
    """Bilinear sample at continuous coordinates, replicate-padded.

    Coordinates outside [0, width-1] x [0, height-1] are clamped to the
    boundary before sampling.  x and y may be scalars or arrays of equal
    shape; the result has the same shape.
    """
    height, width = img.shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, width - 1.0)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, height - 1.0)
    x0 = np.clip(np.floor(x).astype(np.intp), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.intp), 0, max(height - 2, 0))
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return out if out.ndim else float(out)


def gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (gx, gy): central differences interior, one-sided at borders."""
    img = np.asarray(img, dtype=np.float64)
    gx = np.empty_like(img)
    gy = np.empty_like(img)
    if img.shape[1] >= 2:
        gx[:, 1:-1] = (img[:, 2:] - img[:, :-2]) * 0.5
        gx[:, 0] = img[:, 1] - img[:, 0]
        gx[:, -1] = img[:, -1] - img[:, -2]
    else:
        gx[:] = 0.0
    if img.shape[0] >= 2:
        gy[1:-1, :] = (img[2:, :] - img[:-2, :]) * 0.5
        gy[0, :] = img[1, :] - img[0, :]
        gy[-1, :] = img[-1, :] - img[-2, :]
    else:
        gy[:] = 0.0
    return gx, gy


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """sqrt(gx^2 + gy^2) per pixel."""
    gx, gy = gradients(as_image(img))
    return np.hypot(gx, gy)


def add_gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. Normal(0, sigma^2) noise from a generator seeded by `seed`."""
    img = as_image(img)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    return img + rng.normal(0.0, sigma, img.shape)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root-mean-square difference in gray levels over all pixels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt(np.mean(d * d)))
