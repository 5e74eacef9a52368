"""Readers and writers for flow fields, match lists, edge maps and images.

Flow fields are numpy arrays of shape (h, w, 2) holding (u, v) in pixels.
Masks are (h, w) uint8 arrays with 1 marking a missing pixel.  Edge maps
are (h, w) float32 arrays in [0, 1].  All binary formats are little-endian.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Iterable, TextIO

import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25
EDGE_MAGIC = b"EDGF"


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


# -- .flo ------------------------------------------------------------------


def write_flo(flow: np.ndarray, path: str | os.PathLike) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be h x w x 2, got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(flow.astype("<f4").tobytes(order="C"))


def read_flo(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    magic, w, h = struct.unpack("<fii", raw[:12])
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: nonpositive dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12)
    return data.reshape(h, w, 2).astype(np.float32)


# -- match lists -----------------------------------------------------------


def parse_matches(stream: TextIO | str | Iterable[str]) -> np.ndarray:
    """Parse ``x1 y1 x2 y2 [extra...]`` lines into an (n, 4) int array.

    Blank lines are skipped, trailing columns (scores) ignored and
    sub-pixel coordinates rounded to the nearest pixel.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    rows = []
    for lineno, line in enumerate(stream, 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) < 4:
            raise FormatError(f"line {lineno}: expected at least 4 fields, got {len(fields)}")
        try:
            vals = [float(t) for t in fields[:4]]
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric token in {line.strip()!r}") from None
        if not all(np.isfinite(vals)):
            raise FormatError(f"line {lineno}: non-finite coordinate")
        rows.append(vals)
    if not rows:
        return np.zeros((0, 4), dtype=np.int64)
    # floor(x + 0.5): half-way cases round up, unlike numpy's banker's rounding
    return np.floor(np.array(rows, dtype=np.float64) + 0.5).astype(np.int64)


def read_matches(path: str | os.PathLike) -> np.ndarray:
    with open(path) as f:
        return parse_matches(f)


def write_matches(matches: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        for x1, y1, x2, y2 in np.asarray(matches, dtype=np.int64):
            f.write(f"{x1} {y1} {x2} {y2}\n")


# -- grayscale maps --------------------------------------------------------


def write_pgm(img: np.ndarray, path: str | os.PathLike) -> None:
    """Binary 8-bit PGM.  Float input is taken as [0, 1] and scaled to 255."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {img.shape}")
    if img.dtype.kind == "f":
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0)
    data = img.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_gray(path: str | os.PathLike) -> np.ndarray:
    """Single-channel PGM/PNG as float32 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode == "1":
            return np.asarray(im, dtype=np.float32)
        if im.mode == "L":
            return np.asarray(im, dtype=np.float32) / 255.0
        if im.mode in ("I;16", "I;16B", "I;16L"):
            return np.asarray(im, dtype=np.float32) / 65535.0
        raise FormatError(f"{path}: expected a single-channel image, got mode {im.mode}")


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """Binary mask image: any nonzero pixel counts as set."""
    return (read_gray(path) > 0).astype(np.uint8)


def write_edge_raw(edges: np.ndarray, path: str | os.PathLike) -> None:
    edges = np.asarray(edges, dtype=np.float32)
    if edges.ndim != 2:
        raise ValueError(f"edge map must be 2-D, got {edges.shape}")
    h, w = edges.shape
    with open(path, "wb") as f:
        f.write(EDGE_MAGIC + struct.pack("<ii", w, h))
        f.write(edges.astype("<f4").tobytes())


def _read_edge_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != EDGE_MAGIC:
        raise FormatError(f"{path}: not a raw edge map")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: nonpositive dimensions {w}x{h}")
    if len(raw) < 12 + 4 * w * h:
        raise FormatError(f"{path}: truncated edge map")
    return np.frombuffer(raw, dtype="<f4", count=w * h, offset=12).reshape(h, w).astype(np.float32)


def read_edge_map(path: str | os.PathLike) -> np.ndarray:
    """Edge strengths in [0, 1] from an 8-bit image or a raw float map."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == EDGE_MAGIC:
        edges = _read_edge_raw(path)
    else:
        edges = read_gray(path)
    if not np.all(np.isfinite(edges)):
        raise FormatError(f"{path}: non-finite edge values")
    return np.clip(edges, 0.0, 1.0)


# -- visualization ---------------------------------------------------------


def color_wheel() -> np.ndarray:
    """The 55-entry Middlebury color wheel, RGB in [0, 1].

    Ramps are quantized as ``floor(255 * i / n) / 255``, the integer
    arithmetic of the original color-coding tool.
    """
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))

    def ramp(n):
        return np.floor(255 * np.arange(n) / n) / 255

    i = 0
    wheel[i:i + ry, 0] = 1
    wheel[i:i + ry, 1] = ramp(ry)
    i += ry
    wheel[i:i + yg, 0] = 1 - ramp(yg)
    wheel[i:i + yg, 1] = 1
    i += yg
    wheel[i:i + gc, 1] = 1
    wheel[i:i + gc, 2] = ramp(gc)
    i += gc
    wheel[i:i + cb, 1] = 1 - ramp(cb)
    wheel[i:i + cb, 2] = 1
    i += cb
    wheel[i:i + bm, 2] = 1
    wheel[i:i + bm, 0] = ramp(bm)
    i += bm
    wheel[i:i + mr, 2] = 1 - ramp(mr)
    wheel[i:i + mr, 0] = 1
    return wheel


def flow_to_color(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Color-code a flow field as an (h, w, 3) uint8 image.

    Hue follows the flow direction around the wheel, saturation grows with
    magnitude / ``max_magnitude`` (``None`` = largest magnitude in the field).
    Zero flow is white; magnitudes beyond the maximum are darkened.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    u, v = flow[..., 0], flow[..., 1]
    if max_magnitude is None:
        max_magnitude = float(np.max(np.hypot(u, v), initial=0.0))
    if max_magnitude <= 0:
        max_magnitude = 1.0
    # + 0.0 folds -0.0 into 0.0 so the wheel index is sign-stable
    u = u / max_magnitude + 0.0
    v = v / max_magnitude + 0.0
    rad = np.hypot(u, v)
    wheel = color_wheel()
    ncols = len(wheel)
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    inside = (rad <= 1)[..., None]
    col = np.where(inside, 1 - rad[..., None] * (1 - col), col * 0.75)
    return np.floor(255 * col).astype(np.uint8)


def write_image(rgb: np.ndarray, path: str | os.PathLike) -> None:
    """RGB uint8 image; .ppm written directly, anything else via Pillow."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if str(path).lower().endswith(".ppm"):
        h, w = rgb.shape[:2]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(rgb.tobytes())
    else:
        Image.fromarray(rgb, mode="RGB").save(path)
