import numpy as np
import pytest

from flowfill import autodiff as ad
from flowfill.autodiff import EPS_STAB
from flowfill.losses import LossReport, epe, epe_loss, ld_loss, net_loss
from flowfill.model import ModelConfig


def _t(a, dtype=np.float64):
    return ad.Tape(dtype=dtype).constant(np.asarray(a, dtype=dtype))


def test_epe_scalar_examples():
    assert epe((0, 0), (0, 0)) == pytest.approx(np.sqrt(EPS_STAB))
    assert epe((3, 4), (0, 0)) == pytest.approx(5.0)
    a, b = (1.3, -0.2), (-4.1, 7.7)
    assert epe(a, b) == epe(b, a)


def test_epe_loss_examples():
    z = np.zeros((1, 1, 2))
    assert epe_loss(_t(z), z).item() == pytest.approx(0.0, abs=1e-4)
    assert epe_loss(_t([[[3.0, 4.0]]]), z).item() == pytest.approx(5.0)
    pred = np.array([[[1.0, 0.0], [0.0, 3.0]]])
    assert epe_loss(_t(pred), np.zeros((1, 2, 2))).item() == pytest.approx(2.0)


def test_ld_loss_examples():
    rng = np.random.default_rng(0)
    c1 = np.tile(rng.standard_normal(2), (4, 5, 1))
    c2 = np.tile(rng.standard_normal(2), (4, 5, 1))
    assert ld_loss(_t(c1), c2).item() == 0.0
    g = rng.standard_normal((4, 5, 2))
    assert ld_loss(_t(g), g).item() == 0.0


def test_ld_loss_hand_value_with_border_rule():
    pred = np.array([[[0.0, 0.0], [3.0, 4.0]]])
    # one horizontal pair: |sqrt(25 + eps) - sqrt(eps)| / 2 pixels
    expect = (np.sqrt(25 + EPS_STAB) - np.sqrt(EPS_STAB)) / 2
    assert ld_loss(_t(pred), np.zeros((1, 2, 2))).item() == pytest.approx(expect, rel=1e-12)
    assert expect == pytest.approx(2.5, abs=1e-4)


def test_ld_loss_naive_loop_oracle():
    rng = np.random.default_rng(1)
    p, g = rng.standard_normal((4, 5, 2)), rng.standard_normal((4, 5, 2))

    def d(a, b):
        return np.sqrt(np.sum((a - b) ** 2) + EPS_STAB)

    total = 0.0
    for i in range(4):
        for j in range(5):
            if i > 0:
                total += abs(d(p[i, j], p[i - 1, j]) - d(g[i, j], g[i - 1, j]))
            if j > 0:
                total += abs(d(p[i, j], p[i, j - 1]) - d(g[i, j], g[i, j - 1]))
    assert ld_loss(_t(p), g).item() == pytest.approx(total / 20, rel=1e-12)


def test_one_by_one_grid_has_zero_ld():
    assert ld_loss(_t(np.ones((1, 1, 2))), np.zeros((1, 1, 2))).item() == 0.0


def test_validity_mask_drops_pixels_and_count():
    pred = np.array([[[3.0, 4.0], [0.0, 0.0]]])
    gt = np.zeros((1, 2, 2))
    assert epe_loss(_t(pred), gt, np.array([[True, False]])).item() == pytest.approx(5.0)
    # the only pair touches an invalid pixel
    assert ld_loss(_t(pred), gt, np.array([[True, False]])).item() == 0.0
    with pytest.raises(ValueError):
        epe_loss(_t(pred), gt, np.zeros((1, 2), bool))


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        epe_loss(_t(np.zeros((2, 2, 2))), np.zeros((2, 3, 2)))
    with pytest.raises(ad.ShapeError):
        ld_loss(_t(np.zeros((2, 2, 2))), np.zeros((2, 2, 2)), np.ones((3, 2), bool))


def _detours(vals, shape=(3, 4)):
    tape = ad.Tape(dtype=np.float64)
    return [tape.constant(np.asarray(v, np.float64)) for v in vals]


def test_net_loss_default_weights_sum():
    # each detour is off by (1, 0) everywhere: EPE 1, LD 0
    gt = np.zeros((3, 4, 2))
    off = np.zeros((3, 4, 2))
    off[..., 0] = 1.0
    w = ModelConfig().detour_weights
    total, rep = net_loss(_detours([off] * 10), gt, w)
    assert total.item() == pytest.approx(5.5, rel=1e-6)
    assert rep.recombined() == pytest.approx(total.item(), abs=1e-6)


def test_net_loss_all_perfect_is_near_zero():
    g = np.random.default_rng(2).standard_normal((3, 4, 2))
    total, _ = net_loss(_detours([g] * 3), g, (0.5, 0.5, 1.0))
    assert total.item() == pytest.approx(0.0, abs=1e-3)


def test_single_layer_equals_component_losses():
    rng = np.random.default_rng(3)
    p, g = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
    total, rep = net_loss(_detours([p]), g, (1.0,))
    assert total.item() == pytest.approx(epe_loss(_t(p), g).item() + ld_loss(_t(p), g).item(), rel=1e-12)


def test_use_ld_false_drops_ld():
    rng = np.random.default_rng(4)
    p, g = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
    total, rep = net_loss(_detours([p, p]), g, (0.5, 1.0), use_ld=False)
    assert total.item() == pytest.approx(1.5 * epe_loss(_t(p), g).item(), rel=1e-12)
    assert rep.ld == [0.0, 0.0]


def test_zero_weight_layers_are_reported_but_not_differentiated():
    rng = np.random.default_rng(5)
    tape = ad.Tape(dtype=np.float64)
    a = tape.param(rng.standard_normal((3, 4, 2)))
    b = tape.param(rng.standard_normal((3, 4, 2)))
    g = rng.standard_normal((3, 4, 2))
    total, rep = net_loss([a, b], g, (0.0, 1.0))
    tape.backward(total)
    assert not a.grad.any()
    assert rep.epe[0] == pytest.approx(epe_loss(_t(a.data), g).item())


def test_net_loss_weight_count_mismatch():
    with pytest.raises(ValueError):
        net_loss(_detours([np.zeros((2, 2, 2))]), np.zeros((2, 2, 2)), (0.5, 1.0))


def test_csv_row_layout():
    rep = LossReport([1.0, 2.0], [0.5, 0.25], [0.5, 1.0], 3.0, 12)
    assert LossReport.csv_header(2) == ["step", "lr", "L_net", "L_epe_1", "L_epe_2", "L_ld_1", "L_ld_2"]
    row = rep.csv_row(7, 5e-5)
    assert row[0] == 7 and float(row[1]) == 5e-5 and len(row) == 7
