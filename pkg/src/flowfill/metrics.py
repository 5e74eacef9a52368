"""Evaluation metrics on full-resolution flow fields."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import ndimage

OUTLIER_THRESHOLD = 3.0
EDGE_THRESHOLD = 0.5


def epe_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel end-point error (no smoothing)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    d = pred.astype(np.float64) - gt.astype(np.float64)
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def _region(shape, region) -> np.ndarray:
    if region is None:
        return np.ones(shape, dtype=bool)
    region = np.asarray(region, dtype=bool)
    if region.shape != shape:
        raise ValueError(f"region {region.shape} does not match {shape}")
    if not region.any():
        raise ValueError("empty region")
    return region


def mean_epe(pred: np.ndarray, gt: np.ndarray, region: np.ndarray | None = None) -> float:
    e = epe_map(pred, gt)
    return float(e[_region(e.shape, region)].mean())


def percent_out_from_epe(e: np.ndarray, tau: float = OUTLIER_THRESHOLD, region: np.ndarray | None = None) -> float:
    e = np.asarray(e, dtype=np.float64)
    sel = e[_region(e.shape, region)]
    return 100.0 * np.count_nonzero(sel > tau) / sel.size


def percent_out(pred: np.ndarray, gt: np.ndarray, tau: float = OUTLIER_THRESHOLD, region: np.ndarray | None = None) -> float:
    """Percentage of pixels whose EPE is strictly above ``tau``."""
    return percent_out_from_epe(epe_map(pred, gt), tau, region)


def improvement_index(epe_a: np.ndarray, epe_b: np.ndarray) -> np.ndarray:
    """(a - b) / (a + b) per pixel; positive where b has the smaller error.

    Pixels where both errors are zero get 0.
    """
    a = np.asarray(epe_a, dtype=np.float64)
    b = np.asarray(epe_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    s = a + b
    out = np.zeros_like(s)
    nz = s != 0
    out[nz] = (a[nz] - b[nz]) / s[nz]
    return out


@dataclass
class PixelGroups:
    noisy: np.ndarray
    occluded: np.ndarray
    missing: np.ndarray


def pixel_groups(
    input_flow: np.ndarray,
    input_mask: np.ndarray,
    gt: np.ndarray,
    occlusion: np.ndarray | None = None,
    tau: float = OUTLIER_THRESHOLD,
) -> PixelGroups:
    """Noisy (a match exists and is off by more than tau), occluded, and
    missing-but-not-occluded pixels, at the resolution of the inputs."""
    if input_flow.shape != gt.shape or input_mask.shape != gt.shape[:2]:
        raise ValueError("input flow, mask and ground truth must be aligned")
    known = np.asarray(input_mask) == 0
    occ = np.zeros(gt.shape[:2], dtype=bool) if occlusion is None else np.asarray(occlusion, dtype=bool)
    if occ.shape != gt.shape[:2]:
        raise ValueError(f"occlusion mask {occ.shape} does not match {gt.shape[:2]}")
    noisy = known & (epe_map(input_flow, gt) > tau)
    missing = ~known & ~occ
    return PixelGroups(noisy, occ, missing)


def distance_from_edges_profile(
    ii_map: np.ndarray,
    edge_map: np.ndarray,
    groups: Mapping[str, np.ndarray],
    threshold: float = EDGE_THRESHOLD,
) -> dict[str, dict[float, float]]:
    """Mean II per unit-distance bin from the nearest edge pixel, per group.

    Distances are exact Euclidean (in pixels of ``edge_map``); bin ``b``
    holds distances in [b, b + 1).  Without any edge pixel every pixel
    lands in a single ``inf`` bin.
    """
    ii_map = np.asarray(ii_map, dtype=np.float64)
    edges = np.asarray(edge_map) >= threshold
    if edges.shape != ii_map.shape:
        raise ValueError("II map and edge map must share a shape")
    if edges.any():
        bins = np.floor(ndimage.distance_transform_edt(~edges)).astype(np.int64)
    else:
        bins = None
    profile = {}
    for name, g in groups.items():
        g = np.asarray(g, dtype=bool)
        out: dict[float, float] = {}
        if g.any():
            if bins is None:
                out[math.inf] = float(ii_map[g].mean())
            else:
                b = bins[g]
                sums = np.bincount(b, weights=ii_map[g])
                cnts = np.bincount(b)
                for k in np.nonzero(cnts)[0]:
                    out[int(k)] = float(sums[k] / cnts[k])
        profile[name] = out
    return profile


# -- reports ---------------------------------------------------------------


@dataclass
class ImageEval:
    name: str
    n: int
    epe: float
    pct_out: float
    n_noc: int = 0
    epe_noc: float = math.nan
    pct_out_noc: float = math.nan
    n_occ: int = 0
    epe_occ: float = math.nan
    mean_ii: float = math.nan


def evaluate_image(
    name: str,
    pred: np.ndarray,
    gt: np.ndarray,
    occlusion: np.ndarray | None = None,
    other_pred: np.ndarray | None = None,
) -> ImageEval:
    """Per-image metrics; ``other_pred`` enables the II column (other vs pred)."""
    e = epe_map(pred, gt)
    row = ImageEval(name, e.size, float(e.mean()), percent_out_from_epe(e))
    occ = np.zeros(e.shape, dtype=bool) if occlusion is None else np.asarray(occlusion, dtype=bool)
    noc = ~occ
    row.n_noc = int(noc.sum())
    if row.n_noc:
        row.epe_noc = float(e[noc].mean())
        row.pct_out_noc = percent_out_from_epe(e, region=noc)
    row.n_occ = int(occ.sum())
    if row.n_occ:
        row.epe_occ = float(e[occ].mean())
    if other_pred is not None:
        row.mean_ii = float(improvement_index(epe_map(other_pred, gt), e).mean())
    return row


def _wmean(vals, weights) -> float:
    pairs = [(v, w) for v, w in zip(vals, weights) if w > 0 and not math.isnan(v)]
    tot = sum(w for _, w in pairs)
    return math.nan if tot == 0 else sum(v * w for v, w in pairs) / tot


@dataclass
class EvalReport:
    rows: list[ImageEval] = field(default_factory=list)

    def aggregate(self) -> ImageEval:
        r = self.rows
        n = [x.n for x in r]
        noc = [x.n_noc for x in r]
        occ = [x.n_occ for x in r]
        return ImageEval(
            "ALL",
            sum(n),
            _wmean([x.epe for x in r], n),
            _wmean([x.pct_out for x in r], n),
            sum(noc),
            _wmean([x.epe_noc for x in r], noc),
            _wmean([x.pct_out_noc for x in r], noc),
            sum(occ),
            _wmean([x.epe_occ for x in r], occ),
            _wmean([x.mean_ii for x in r], n),
        )

    COLUMNS = ("name", "n", "epe", "pct_out", "n_noc", "epe_noc", "pct_out_noc", "n_occ", "epe_occ", "mean_ii")

    def write_csv(self, path, header_note: str | None = None) -> None:
        with open(path, "w", newline="") as f:
            if header_note:
                f.write(f"# {header_note}\n")
            wr = csv.writer(f)
            wr.writerow(self.COLUMNS)
            for row in self.rows + [self.aggregate()]:
                wr.writerow([getattr(row, c) for c in self.COLUMNS])

    def summary(self) -> str:
        agg = self.aggregate()
        lines = [f"{'image':<24}{'EPE':>10}{'EPE-noc':>10}{'EPE-occ':>10}{'%Out':>9}{'%Out-noc':>10}"]
        for row in self.rows + [agg]:
            lines.append(
                f"{row.name[:23]:<24}{row.epe:>10.4f}{row.epe_noc:>10.4f}{row.epe_occ:>10.4f}"
                f"{row.pct_out:>9.2f}{row.pct_out_noc:>10.2f}"
            )
        if not math.isnan(agg.mean_ii):
            lines.append(f"mean improvement index: {agg.mean_ii:.4f}")
        return "\n".join(lines)
