"""End-point error, lateral dependency and multi-layer losses.

All losses take a predicted flow tensor (h, w, 2) on a tape and a ground
truth numpy array of the same shape.  An optional validity mask (h, w)
drops pixels from the sums and from the pixel count ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import EPS_STAB, Tensor


def epe(p1, p2, eps: float = EPS_STAB) -> float:
    """Smoothed Euclidean distance between two flow vectors."""
    du = float(p1[0]) - float(p2[0])
    dv = float(p1[1]) - float(p2[1])
    return math.sqrt(du * du + dv * dv + eps)


def _check(pred: Tensor, gt: np.ndarray, valid: np.ndarray | None) -> None:
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ad.ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} must both be h x w x 2")
    if valid is not None and valid.shape != gt.shape[:2]:
        raise ad.ShapeError(f"validity mask {valid.shape} does not match {gt.shape[:2]}")


def _pair_dist(a: Tensor) -> Tensor:
    """Per-pixel norm over the channel axis, sqrt-smoothed."""
    return ad.sqrt(ad.sum(ad.square(a), axis=-1))


def _np_dist(d: np.ndarray) -> np.ndarray:
    d = d.astype(np.float64)
    return np.sqrt(np.sum(d * d, axis=-1) + EPS_STAB)


def _masked_sum(x: Tensor, m: np.ndarray | None) -> Tensor:
    if m is None:
        return ad.sum(x)
    return ad.sum(ad.mul(x, m.astype(x.data.dtype)))


def epe_loss(pred: Tensor, gt: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Mean end-point error over (valid) pixels."""
    _check(pred, gt, valid)
    n = gt.shape[0] * gt.shape[1] if valid is None else int(np.count_nonzero(valid))
    if n == 0:
        raise ValueError("no valid pixels")
    e = _pair_dist(ad.sub(pred, gt))
    return ad.mul(_masked_sum(e, valid), 1.0 / n)


def ld_loss(pred: Tensor, gt: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Lateral dependency loss.

    Sums |d_pred - d_gt| over vertical (i-1, j) and horizontal (i, j-1)
    neighbor pairs, where d is the distance between the two neighbors'
    flow vectors.  Pairs reaching outside the grid are omitted; ``n``
    stays the pixel count.
    """
    _check(pred, gt, valid)
    h, w = gt.shape[:2]
    n = h * w if valid is None else int(np.count_nonzero(valid))
    if n == 0:
        raise ValueError("no valid pixels")
    total = None
    for cur, prev in (
        ((slice(1, None), slice(None)), (slice(None, -1), slice(None))),
        ((slice(None), slice(1, None)), (slice(None), slice(None, -1))),
    ):
        if gt[cur].size == 0:
            continue
        dp = _pair_dist(ad.sub(ad.get_slice(pred, cur), ad.get_slice(pred, prev)))
        dg = _np_dist(gt[cur] - gt[prev])
        term = ad.absolute(ad.sub(dp, dg))
        pair_valid = None if valid is None else (valid[cur] & valid[prev])
        s = _masked_sum(term, pair_valid)
        total = s if total is None else ad.add(total, s)
    if total is None:
        # 1x1 grid: no neighbor pairs at all
        return ad.mul(ad.sum(pred), 0.0)
    return ad.mul(total, 1.0 / n)


@dataclass
class LossReport:
    epe: list[float]
    ld: list[float]
    weights: list[float]
    total: float
    n: int

    def recombined(self) -> float:
        return float(sum(w * (e + d) for w, e, d in zip(self.weights, self.epe, self.ld)))

    def csv_row(self, step: int, lr: float) -> list:
        return [step, repr(float(lr)), repr(self.total)] + [repr(x) for x in self.epe] + [repr(x) for x in self.ld]

    @staticmethod
    def csv_header(num_layers: int) -> list[str]:
        return (
            ["step", "lr", "L_net"]
            + [f"L_epe_{l}" for l in range(1, num_layers + 1)]
            + [f"L_ld_{l}" for l in range(1, num_layers + 1)]
        )


def _detached(fn, pred: Tensor, gt, valid) -> float:
    tape = ad.Tape(dtype=pred.tape.dtype)
    return fn(tape.constant(pred.data), gt, valid).item()


def net_loss(
    detours: list[Tensor],
    gt: np.ndarray,
    weights,
    valid: np.ndarray | None = None,
    use_ld: bool = True,
) -> tuple[Tensor, LossReport]:
    """Weighted sum over layers of (EPE + LD) losses.

    Layers with weight 0 are evaluated for the report only and stay off
    the gradient path.  ``use_ld=False`` drops the LD term everywhere.
    """
    weights = [float(x) for x in weights]
    if len(detours) != len(weights):
        raise ValueError(f"{len(detours)} detour outputs but {len(weights)} weights")
    total = None
    epes, lds = [], []
    for d, wl in zip(detours, weights):
        if wl == 0.0:
            epes.append(_detached(epe_loss, d, gt, valid))
            lds.append(_detached(ld_loss, d, gt, valid) if use_ld else 0.0)
            continue
        le = epe_loss(d, gt, valid)
        term = le
        if use_ld:
            ll = ld_loss(d, gt, valid)
            term = ad.add(le, ll)
            lds.append(ll.item())
        else:
            lds.append(0.0)
        epes.append(le.item())
        term = ad.mul(term, wl)
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = ad.mul(ad.sum(detours[-1]), 0.0)
    n = gt.shape[0] * gt.shape[1] if valid is None else int(np.count_nonzero(valid))
    return total, LossReport(epes, lds, weights, total.item(), n)
