import math

import numpy as np
import pytest

from flowfill.synth import KanizsaGeometry, SynthSpec, gen_kanizsa, gen_moving_shapes, kanizsa_edges, motion_boundaries


def test_clean_spec_gives_dense_exact_input():
    s = gen_moving_shapes(SynthSpec(seed=1, missing_fraction=0.0, noise_fraction=0.0))[0]
    assert np.array_equal(s.flow, s.gt)
    assert not s.mask.any()


def test_same_seed_same_samples():
    a = gen_moving_shapes(SynthSpec(seed=3, count=2))
    b = gen_moving_shapes(SynthSpec(seed=3, count=2))
    c = gen_moving_shapes(SynthSpec(seed=4, count=2))
    for x, y in zip(a, b):
        for k in ("gt", "flow", "mask", "edges"):
            assert getattr(x, k).tobytes() == getattr(y, k).tobytes()
    assert not np.array_equal(a[0].gt, c[0].gt)


@pytest.mark.parametrize("frac", [0.1, 0.3, 0.6])
def test_missing_fraction_on_64(frac):
    for s in gen_moving_shapes(SynthSpec(seed=0, count=3, missing_fraction=frac)):
        assert abs(s.mask.mean() - frac) <= 0.02


def test_missing_pixels_form_blobs():
    s = gen_moving_shapes(SynthSpec(seed=2, missing_fraction=0.3, noise_fraction=0.0))[0]
    from scipy import ndimage

    labels, n = ndimage.label(s.mask)
    sizes = np.bincount(labels.ravel())[1:]
    # most missing pixels sit in a few large components, not in salt
    assert sizes.max() > 50


def test_corruption_only_where_declared():
    s = gen_moving_shapes(SynthSpec(seed=5, noise_fraction=0.1))[0]
    ok = (s.mask == 0) & ~s.noisy
    assert np.array_equal(s.flow[ok], s.gt[ok])
    assert not s.flow[s.mask == 1].any()
    assert not (s.noisy & (s.mask == 1)).any()
    assert s.noisy.mean() == pytest.approx(0.1, abs=0.01)


def test_gt_is_piecewise_constant_with_boundary_edges():
    spec = SynthSpec(seed=7, num_shapes=4)
    s = gen_moving_shapes(spec)[0]
    assert len(np.unique(s.gt.reshape(-1, 2), axis=0)) <= spec.num_shapes + 1
    assert np.array_equal(s.edges, motion_boundaries(s.gt))


def test_motion_boundaries_hand_case():
    gt = np.zeros((1, 4, 2), np.float32)
    gt[0, 2:, 0] = 1.0
    assert motion_boundaries(gt).tolist() == [[0, 1, 1, 0]]


@pytest.mark.parametrize(
    "kw", [dict(missing_fraction=1.5), dict(missing_fraction=-0.1), dict(noise_fraction=1.0), dict(missing_fraction=0.6, noise_fraction=0.5), dict(width=4), dict(count=-1), dict(max_disp=-1.0)]
)
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)


def test_too_many_shapes_warns_and_reduces():
    with pytest.warns(UserWarning):
        s = gen_moving_shapes(SynthSpec(width=8, height=8, num_shapes=50))[0]
    assert s.gt.shape == (8, 8, 2)


def test_sample_conversion_to_grid():
    s = gen_moving_shapes(SynthSpec(seed=1, width=40, height=24))[0].to_sample()
    assert s.input.grid.shape == (3, 5, 4)
    assert s.gt.shape == (3, 5, 2)


# -- Kanizsa probe


def _ring_count(r):
    # lattice points with r - 1/2 <= |p| <= r + 1/2, counted row by row in
    # integer arithmetic (doubled coordinates avoid the halves)
    n = 0
    for dy in range(-r - 1, r + 2):
        hi = (2 * r + 1) ** 2 - 4 * dy * dy
        lo = (2 * r - 1) ** 2 - 4 * dy * dy
        if hi < 0:
            continue
        b = math.isqrt(hi) // 2  # largest |dx| with 4 dx^2 <= hi
        a = next(a for a in range(b + 2) if 4 * a * a >= lo)  # smallest |dx| with 4 dx^2 >= lo
        if b >= a:
            n += 2 * (b - a + 1) - (1 if a == 0 else 0)
    return n


def _pacman_count(r):
    ring = _ring_count(r)
    # the four axis points lie on the ring; the three open quadrants kept
    # share the rest evenly, the two mouth radii add 2r + 1 minus the 2
    # points they share with the ring
    return ring - (ring - 4) // 4 + (2 * r + 1) - 2


@pytest.mark.parametrize("r", [4, 7, 10, 16])
def test_kanizsa_edge_count_matches_analytic_raster(r):
    g = KanizsaGeometry(height=96, width=96, square=48, radius=r, band=8)
    got = int(kanizsa_edges(g).sum())
    expect = 4 * _pacman_count(r)
    assert abs(got - expect) <= 4


def test_kanizsa_gt_and_regions():
    s = gen_kanizsa(inner_flow=(3.0, 1.0), background_flow=(-2.0, 0.5))
    sq = s.regions["square"]
    assert np.all(s.gt[sq] == np.array([3.0, 1.0], np.float32))
    assert np.all(s.gt[~sq] == np.array([-2.0, 0.5], np.float32))
    assert sq.sum() == 64 * 64
    assert not (s.regions["band_inside"] & s.regions["band_outside"]).any()
    assert np.array_equal(s.regions["band_inside"] | s.regions["band_outside"], s.regions["band"])


def test_kanizsa_mask_fraction_matches_geometry():
    g = KanizsaGeometry(height=40, width=40, square=20, radius=5, band=4)
    s = gen_kanizsa(g)
    top = left = 10
    masked = 0
    for y in range(40):
        for x in range(40):
            disc = any((y - cy) ** 2 + (x - cx) ** 2 <= 25 for cy in (10, 30) for cx in (10, 30))
            near_row = any(c - 2 <= y < c + 2 for c in (top, top + 20)) and left - 2 <= x < left + 22
            near_col = any(c - 2 <= x < c + 2 for c in (left, left + 20)) and top - 2 <= y < top + 22
            masked += disc or near_row or near_col
    assert s.mask.mean() == masked / 1600
    assert not s.flow[s.mask == 1].any()
    assert np.array_equal(s.flow[s.mask == 0], s.gt[s.mask == 0])


def test_kanizsa_edges_miss_illusory_sides():
    g = KanizsaGeometry()
    e = kanizsa_edges(g)
    # the middle of each illusory side lies between two discs' reach
    assert e[32, 64] == 0 and e[96, 64] == 0 and e[64, 32] == 0 and e[64, 96] == 0


def test_kanizsa_bad_geometry():
    with pytest.raises(ValueError):
        gen_kanizsa(KanizsaGeometry(height=40, width=40, square=36, radius=8))
