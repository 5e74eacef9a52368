"""Central finite-difference checks for every differentiable op and loss.

The numeric side always runs at float64 on an untouched tape; the analytic
side runs at the requested precision.  Errors are reported per check as
``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` maximized
over all input elements.

Central differences only estimate the derivative where the function is
smooth on [x - eps, x + eps].  The |.| inside the LD loss has kinks, so a
coordinate that fails at ``eps`` is tested for one: on a smooth window the
estimates at eps and eps / 10 agree to O(eps^2); if they differ by more
than the tolerance the window holds a kink and the coordinate is
re-measured with ``FINE_EPS``.  A wrong backward rule fails at every step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import epe_loss, ld_loss, net_loss
from .model import ModelConfig, forward_tensors, init_params

FD_EPS = 1e-3
FINE_EPS = 1e-6
REL_FLOOR = 1e-2
TOLERANCE = 1e-3

Builder = Callable[[dict[str, ad.Tensor]], ad.Tensor]


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    passed: bool
    n_refined: int = 0


def _evaluate(build: Builder, inputs: dict[str, np.ndarray], dtype, corrupt=frozenset()):
    tape = ad.Tape(dtype=dtype, corrupt=corrupt)
    ts = {k: tape.param(v, k) for k, v in inputs.items()}
    loss = build(ts)
    return tape, ts, loss


def _at(build: Builder, base: dict[str, np.ndarray], k: str, i: int, delta: float) -> float:
    flat = base[k].reshape(-1)
    old = flat[i]
    flat[i] = old + delta
    try:
        return _evaluate(build, base, np.float64)[2].item()
    finally:
        flat[i] = old


def _as64(inputs):
    return {k: np.asarray(v, dtype=np.float64).copy() for k, v in inputs.items()}


def numeric_grad(
    build: Builder,
    inputs: dict[str, np.ndarray],
    eps: float = FD_EPS,
    coords: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Central differences of the scalar ``build`` at float64.

    ``coords`` restricts the work to some flat indices per input; other
    entries are left as NaN.
    """
    base = _as64(inputs)
    out = {}
    for k, v in base.items():
        g = np.full_like(v, np.nan)
        gf = g.reshape(-1)
        idx = range(v.size) if coords is None else coords[k]
        for i in idx:
            gf[i] = (_at(build, base, k, i, eps) - _at(build, base, k, i, -eps)) / (2 * eps)
        out[k] = g
    return out


def _rel(a: np.ndarray, n: np.ndarray, floor: float = None) -> np.ndarray:
    floor = REL_FLOOR if floor is None else floor
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def refine_at_kinks(
    build: Builder,
    inputs: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    eps: float = FD_EPS,
    tol: float = TOLERANCE,
) -> int:
    """Re-measure, in place, failing entries whose [x - eps, x + eps]
    window holds a kink.  Returns the number of entries re-measured."""
    base = _as64(inputs)
    refined = 0
    for k in numeric:
        nf = numeric[k].reshape(-1)
        bad = np.flatnonzero(~np.isnan(nf) & (_rel(analytic[k].reshape(-1), nf) >= tol))
        def central(i, h):
            return (_at(build, base, k, i, h) - _at(build, base, k, i, -h)) / (2 * h)

        for i in bad:
            if _rel(np.array(nf[i]), np.array(central(i, eps / 10))) > tol:
                nf[i] = central(i, FINE_EPS)
                refined += 1
    return refined


def analytic_grad(build: Builder, inputs: dict[str, np.ndarray], dtype=np.float32, corrupt=frozenset()) -> dict[str, np.ndarray]:
    tape, ts, loss = _evaluate(build, inputs, dtype, corrupt)
    tape.backward(loss)
    return {k: t.grad.astype(np.float64) for k, t in ts.items()}


def max_rel_error(a: dict[str, np.ndarray], n: dict[str, np.ndarray], floor: float = REL_FLOOR) -> float:
    """Worst elementwise relative error; NaN entries of ``n`` are skipped."""
    worst = 0.0
    for k in a:
        sel = ~np.isnan(n[k])
        worst = max(worst, float(np.max(_rel(a[k][sel], n[k][sel], floor), initial=0.0)))
    return worst


def check(
    name: str,
    build: Builder,
    inputs,
    dtype=np.float32,
    tol: float = TOLERANCE,
    corrupt=frozenset(),
    eps: float = FD_EPS,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> CheckResult:
    """Compare analytic and numeric gradients.

    ``max_coords`` checks a random subset of at most that many entries per
    input instead of every entry.
    """
    coords = None
    if max_coords is not None:
        rng = rng or np.random.default_rng(0)
        coords = {
            k: np.sort(rng.choice(v.size, size=min(v.size, max_coords), replace=False))
            for k, v in inputs.items()
        }
    a = analytic_grad(build, inputs, dtype, corrupt)
    n = numeric_grad(build, inputs, eps, coords)
    refined = refine_at_kinks(build, inputs, a, n, eps, tol)
    err = max_rel_error(a, n)
    count = sum(len(c) for c in coords.values()) if coords else sum(v.size for v in inputs.values())
    return CheckResult(name, err, int(count), err < tol, refined)


# -- the suite -----------------------------------------------------------------


def _weighted(fn, weights: np.ndarray) -> Builder:
    # random projection so every output element carries a distinct gradient
    def build(ts):
        y = fn(ts)
        return ad.sum(ad.mul(y, weights))

    return build


def suite(seed: int = 0) -> list[tuple[str, Builder, dict[str, np.ndarray]]]:
    """(name, builder, inputs) for every op, loss and the end-to-end model."""
    rng = np.random.default_rng(seed)

    def u(*shape, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, size=shape)

    cases = []
    # conv2d with odd k > 1 and the 1x1 head
    for k, (h, w, ci, co) in ((3, (5, 6, 3, 2)), (7, (6, 8, 2, 3)), (1, (4, 5, 3, 2))):
        r = u(h, w, co)
        cases.append(
            (f"conv2d_k{k}", _weighted(lambda t: ad.conv2d(t["x"], t["k"], t["b"]), r),
             {"x": u(h, w, ci), "k": u(k, k, ci, co, lo=-0.5, hi=0.5), "b": u(co)})
        )
    shape = (4, 5, 2)
    cases += [
        ("elu", _weighted(lambda t: ad.elu(t["x"]), u(*shape)), {"x": u(*shape)}),
        ("add", _weighted(lambda t: ad.add(t["a"], t["b"]), u(*shape)), {"a": u(*shape), "b": u(*shape)}),
        ("sub", _weighted(lambda t: ad.sub(t["a"], t["b"]), u(*shape)), {"a": u(*shape), "b": u(*shape)}),
        ("mul", _weighted(lambda t: ad.mul(t["a"], t["b"]), u(*shape)), {"a": u(*shape), "b": u(*shape)}),
        ("mul_scalar", _weighted(lambda t: ad.mul(t["x"], -1.7), u(*shape)), {"x": u(*shape)}),
        ("abs", _weighted(lambda t: ad.absolute(t["x"]), u(*shape)), {"x": u(*shape)}),
        ("square", _weighted(lambda t: ad.square(t["x"]), u(*shape)), {"x": u(*shape)}),
        ("sqrt", _weighted(lambda t: ad.sqrt(t["x"]), u(*shape)), {"x": u(*shape, lo=0.2, hi=2.0)}),
        ("sum_axis", _weighted(lambda t: ad.sum(t["x"], axis=-1), u(4, 5)), {"x": u(*shape)}),
        ("slice", _weighted(lambda t: ad.get_slice(t["x"], (slice(1, None), slice(None, -1))), u(3, 4, 2)), {"x": u(*shape)}),
        ("mean", lambda t: ad.mean(ad.square(t["x"])), {"x": u(*shape)}),
    ]
    gt = u(4, 5, 2)
    cases += [
        ("epe_loss", lambda t: epe_loss(t["p"], gt), {"p": u(4, 5, 2)}),
        ("ld_loss", lambda t: ld_loss(t["p"], gt), {"p": u(4, 5, 2)}),
    ]
    gt_net = u(4, 5, 2)
    cases.append(
        ("net_loss", lambda t: net_loss([t["d1"], t["d2"], t["d3"]], gt_net, (0.5, 0.5, 1.0))[0],
         {"d1": u(4, 5, 2), "d2": u(4, 5, 2), "d3": u(4, 5, 2)})
    )
    # end to end: 2 layers, C = 3, 6 x 8 x 4 input
    cfg = ModelConfig(num_layers=2, hidden_channels=3, seed=seed)
    params = {k: v.astype(np.float64) for k, v in init_params(cfg).items()}
    for k in params:
        if k.endswith(".b"):
            params[k] = u(*params[k].shape, lo=-0.2, hi=0.2)
    x = np.concatenate([u(6, 8, 2), (rng.random((6, 8, 1)) < 0.3).astype(float), rng.random((6, 8, 1))], axis=2)
    x[x[..., 2] == 1, :2] = 0.0
    gt_model = u(6, 8, 2)

    def model_loss(t):
        xt = next(iter(t.values())).tape.constant(x)
        outs = forward_tensors(t, xt, cfg.num_layers)
        return net_loss(outs, gt_model, cfg.detour_weights)[0]

    cases.append(("model_net_loss", model_loss, params))
    return cases


def run_suite(seed: int = 0, dtype=np.float32, tol: float = TOLERANCE, corrupt=frozenset()) -> list[CheckResult]:
    return [check(name, build, inputs, dtype, tol, frozenset(corrupt)) for name, build, inputs in suite(seed)]


def format_report(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'check':<18}{'max rel err':>14}{'elements':>10}{'at kinks':>10}  status"]
    for r in results:
        lines.append(
            f"{r.name:<18}{r.max_rel_err:>14.3e}{r.n_checked:>10}{r.n_refined:>10}  {'PASS' if r.passed else 'FAIL'}"
        )
    ok = all(r.passed for r in results)
    tail = f"{sum(r.passed for r in results)}/{len(results)} checks passed"
    if elapsed is not None:
        tail += f" in {elapsed:.1f}s"
    lines.append(("OK: " if ok else "FAILED: ") + tail)
    return "\n".join(lines)


def main_suite(seed: int = 0, corrupt=frozenset(), dtype=np.float32) -> tuple[bool, str]:
    t0 = time.perf_counter()
    results = run_suite(seed, dtype, corrupt=corrupt)
    return all(r.passed for r in results), format_report(results, time.perf_counter() - t0)
