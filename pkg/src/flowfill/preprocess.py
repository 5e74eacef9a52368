"""Network input construction and resampling.

The network sees a (h/8, w/8, 4) grid with channels (u, v, missing, edges).
Displacements are divided by the factor on the way down and multiplied
on the way up, so one grid cell is one unit at either resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

FACTOR = 8


@dataclass(frozen=True)
class NetInput:
    grid: np.ndarray  # (h/f, w/f, 4) float32
    full_size: tuple[int, int]  # original (h, w) before padding

    @property
    def flow(self) -> np.ndarray:
        return self.grid[..., :2]

    @property
    def mask(self) -> np.ndarray:
        return self.grid[..., 2]

    @property
    def edges(self) -> np.ndarray:
        return self.grid[..., 3]


@dataclass(frozen=True)
class Sample:
    input: NetInput
    gt: np.ndarray | None = None  # (h/f, w/f, 2) in grid units
    name: str = ""

    def __post_init__(self):
        if self.gt is not None and self.gt.shape[:2] != self.input.grid.shape[:2]:
            raise ValueError(f"ground truth {self.gt.shape[:2]} does not match input {self.input.grid.shape[:2]}")


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def matches_to_sparse_flow(matches: np.ndarray, w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Scatter (x1, y1, x2, y2) matches into a flow map plus missing mask.

    Several matches from one source pixel are averaged.
    """
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 4)
    flow = np.zeros((h, w, 2), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    if len(matches):
        x1, y1, x2, y2 = matches.T
        bad = (x1 < 0) | (x1 >= w) | (y1 < 0) | (y1 >= h)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValueError(f"match {i} source ({x1[i]}, {y1[i]}) outside {w}x{h}")
        np.add.at(flow, (y1, x1), np.stack([x2 - x1, y2 - y1], axis=1))
        np.add.at(count, (y1, x1), 1)
    known = count > 0
    flow[known] /= count[known][:, None]
    return flow.astype(np.float32), (~known).astype(np.uint8)


def bidi_average(fwd: np.ndarray, fwd_mask: np.ndarray, bwd: np.ndarray, bwd_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average a forward map with the inverted backward map.

    Every known backward vector at q is negated and scattered to the
    nearest pixel of q + bwd(q); each pixel then averages whatever
    arrived plus its own forward value.
    """
    if fwd.shape != bwd.shape or fwd_mask.shape != bwd_mask.shape or fwd.shape[:2] != fwd_mask.shape:
        raise ValueError("forward and backward maps must share dimensions")
    h, w = fwd_mask.shape
    known_f = fwd_mask == 0
    acc = np.where(known_f[..., None], fwd.astype(np.float64), 0.0)
    count = known_f.astype(np.int64)
    qy, qx = np.nonzero(bwd_mask == 0)
    if len(qy):
        b = bwd[qy, qx].astype(np.float64)
        tx = _round_half_up(qx + b[:, 0])
        ty = _round_half_up(qy + b[:, 1])
        ok = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        np.add.at(acc, (ty[ok], tx[ok]), -b[ok])
        np.add.at(count, (ty[ok], tx[ok]), 1)
    has = count > 0
    acc[has] /= count[has][:, None]
    return acc.astype(np.float32), (~has).astype(np.uint8)


def pad_to_multiple(a: np.ndarray, factor: int = FACTOR) -> np.ndarray:
    """Edge-replicate the first two axes up to a multiple of ``factor``."""
    h, w = a.shape[:2]
    ph, pw = -h % factor, -w % factor
    if ph == 0 and pw == 0:
        return a
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (a.ndim - 2)
    return np.pad(a, pad, mode="edge")


def _blocks(a: np.ndarray, factor: int) -> np.ndarray:
    h, w = a.shape[:2]
    return a.reshape(h // factor, factor, w // factor, factor, *a.shape[2:])


def downsample_input(flow: np.ndarray, mask: np.ndarray, edges: np.ndarray, factor: int = FACTOR) -> NetInput:
    """Block-reduce a full-resolution sparse map into a NetInput.

    Flow is the mean over known pixels of each block (scaled by 1/factor);
    a block is missing only when it holds no known pixel; edges take the
    block maximum.
    """
    h, w = mask.shape
    if flow.shape != (h, w, 2) or edges.shape != (h, w):
        raise ValueError(f"flow {flow.shape}, mask {mask.shape} and edges {edges.shape} disagree")
    flow, mask, edges = (pad_to_multiple(a, factor) for a in (flow, mask, edges))
    known = (mask == 0).astype(np.float64)
    fsum = _blocks(flow.astype(np.float64) * known[..., None], factor).sum(axis=(1, 3))
    cnt = _blocks(known, factor).sum(axis=(1, 3))
    has = cnt > 0
    down = np.zeros_like(fsum)
    down[has] = fsum[has] / cnt[has][:, None] / factor
    emax = _blocks(edges.astype(np.float32), factor).max(axis=(1, 3))
    grid = np.concatenate(
        [down, (~has).astype(np.float64)[..., None], np.clip(emax, 0.0, 1.0)[..., None]], axis=2
    ).astype(np.float32)
    return NetInput(grid, (h, w))


def downsample_gt(gt: np.ndarray, factor: int = FACTOR) -> np.ndarray:
    """Block mean of a dense flow field, in grid units."""
    gt = pad_to_multiple(gt, factor)
    return (_blocks(gt.astype(np.float64), factor).mean(axis=(1, 3)) / factor).astype(np.float32)


def _axis_weights(n_out: int, n_in: int, factor: int):
    # align-corners-false sample placement, clamped at the borders
    s = (np.arange(n_out) + 0.5) / factor - 0.5
    s = np.clip(s, 0, n_in - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, s - i0


def upsample_flow(pred: np.ndarray, full_size: tuple[int, int] | None = None, factor: int = FACTOR) -> np.ndarray:
    """Bilinear upsampling by ``factor`` with displacements rescaled to pixels.

    The result is cropped to ``full_size`` (h, w) when given.
    """
    hs, ws = pred.shape[:2]
    H, W = hs * factor, ws * factor
    y0, y1, wy = _axis_weights(H, hs, factor)
    x0, x1, wx = _axis_weights(W, ws, factor)
    p = pred.astype(np.float64)
    wx = wx[None, :, None]
    wy = wy[:, None, None]
    # lerp as a + t (b - a) keeps constant fields exact
    top = p[y0][:, x0] + wx * (p[y0][:, x1] - p[y0][:, x0])
    bot = p[y1][:, x0] + wx * (p[y1][:, x1] - p[y1][:, x0])
    out = (top + wy * (bot - top)) * factor
    if full_size is not None:
        h, w = full_size
        out = out[:h, :w]
    return out.astype(np.float32)


def upsample_flow_naive(pred: np.ndarray, factor: int = FACTOR) -> np.ndarray:
    """Per-pixel bilinear reference for :func:`upsample_flow`."""
    hs, ws = pred.shape[:2]
    out = np.zeros((hs * factor, ws * factor, pred.shape[2]))
    for y in range(hs * factor):
        sy = min(max((y + 0.5) / factor - 0.5, 0.0), hs - 1.0)
        ya = int(np.floor(sy))
        yb = min(ya + 1, hs - 1)
        ty = sy - ya
        for x in range(ws * factor):
            sx = min(max((x + 0.5) / factor - 0.5, 0.0), ws - 1.0)
            xa = int(np.floor(sx))
            xb = min(xa + 1, ws - 1)
            tx = sx - xa
            out[y, x] = factor * (
                (1 - ty) * (1 - tx) * pred[ya, xa]
                + (1 - ty) * tx * pred[ya, xb]
                + ty * (1 - tx) * pred[yb, xa]
                + ty * tx * pred[yb, xb]
            )
    return out


def flip_horizontal(sample: Sample) -> Sample:
    """Mirror left-right; the u channel changes sign."""
    grid = sample.input.grid[:, ::-1].copy()
    grid[..., 0] = -grid[..., 0]
    gt = None
    if sample.gt is not None:
        gt = sample.gt[:, ::-1].copy()
        gt[..., 0] = -gt[..., 0]
    return replace(sample, input=replace(sample.input, grid=grid), gt=gt)


def without_edges(sample: Sample) -> Sample:
    """Copy of ``sample`` with the edges channel zeroed."""
    grid = sample.input.grid.copy()
    grid[..., 3] = 0.0
    return replace(sample, input=replace(sample.input, grid=grid))


def make_sample(gt: np.ndarray | None, flow: np.ndarray, mask: np.ndarray, edges: np.ndarray, name: str = "", factor: int = FACTOR) -> Sample:
    """Full-resolution arrays to a training/inference Sample."""
    net_in = downsample_input(flow, mask, edges, factor)
    return Sample(net_in, None if gt is None else downsample_gt(gt, factor), name)


def build_input(fwd_matches: np.ndarray, edges: np.ndarray, w: int, h: int, bwd_matches: np.ndarray | None = None, factor: int = FACTOR) -> NetInput:
    """Matches (and optional backward matches) plus edges to a NetInput."""
    if edges.shape != (h, w):
        raise ValueError(f"edge map is {edges.shape[1]}x{edges.shape[0]}, expected {w}x{h}")
    flow, mask = matches_to_sparse_flow(fwd_matches, w, h)
    if bwd_matches is not None:
        bflow, bmask = matches_to_sparse_flow(bwd_matches, w, h)
        flow, mask = bidi_average(flow, mask, bflow, bmask)
    return downsample_input(flow, mask, edges, factor)
