import numpy as np
import pytest

from flowfill.adam import AdamState, adam_step
from flowfill.autodiff import NonFiniteError, ShapeError


def test_first_step_moves_by_lr():
    p = {"w": np.array([1.0])}
    st = AdamState(lr=5e-5)
    adam_step(p, {"w": np.array([1.0])}, st)
    # m_hat = v_hat = 1 so the step is lr / (1 + eps)
    assert p["w"][0] == pytest.approx(1.0 - 5e-5 / (1 + 1e-8), abs=1e-15)
    assert st.t == 1


def test_zero_gradient_keeps_params_and_counts_steps():
    p = {"w": np.array([0.3, -0.7])}
    st = AdamState(lr=1e-3)
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, st)
    assert np.array_equal(p["w"], [0.3, -0.7])
    assert st.t == 5


def test_constant_gradient_steps_are_about_lr():
    p = {"w": np.array([0.0])}
    st = AdamState(lr=1e-3)
    before = p["w"].copy()
    for _ in range(2):
        adam_step(p, {"w": np.array([1.0])}, st)
        delta = abs(p["w"][0] - before[0])
        assert delta == pytest.approx(1e-3, rel=0.01)
        before = p["w"].copy()


def test_zero_lr_is_identity_but_updates_moments():
    p = {"w": np.array([1.0, 2.0])}
    st = AdamState(lr=0.0)
    adam_step(p, {"w": np.array([3.0, -1.0])}, st)
    assert np.array_equal(p["w"], [1.0, 2.0])
    assert st.t == 1
    assert np.any(st.m["w"] != 0)


def test_rejects_bad_gradients():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(lr=1e-3))
    with pytest.raises(NonFiniteError):
        adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamState(lr=1e-3))


def test_copy_is_deep():
    st = AdamState(lr=1e-3)
    adam_step({"w": np.zeros(2)}, {"w": np.ones(2)}, st)
    c = st.copy()
    c.m["w"][0] = 99.0
    assert st.m["w"][0] != 99.0


def test_matches_reference_implementation():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal((3, 4))
    grads = [rng.standard_normal((3, 4)) for _ in range(20)]
    p = {"w": w0.copy()}
    st = AdamState(lr=1e-2)
    tw = torch.tensor(w0.copy(), requires_grad=True)
    opt = torch.optim.Adam([tw], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    for g in grads:
        adam_step(p, {"w": g}, st)
        tw.grad = torch.tensor(g)
        opt.step()
    assert np.allclose(p["w"], tw.detach().numpy(), rtol=0, atol=1e-12)
