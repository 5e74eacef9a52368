"""Deterministic synthetic flow data: moving shapes and a Kanizsa probe."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .preprocess import Sample, make_sample

# share of the missing pixels placed as contiguous blobs; the rest is salt
BLOB_SHARE = 0.7
MIN_FLOW_GAP = 1.0


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    count: int = 1
    width: int = 64
    height: int = 64
    num_shapes: int = 3
    max_disp: float = 16.0
    missing_fraction: float = 0.3
    noise_fraction: float = 0.05
    noise_magnitude: float = 8.0
    blob_sigma: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValueError(f"missing_fraction must be in [0, 1), got {self.missing_fraction}")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ValueError(f"noise_fraction must be in [0, 1), got {self.noise_fraction}")
        if self.missing_fraction + self.noise_fraction >= 1.0:
            raise ValueError("missing_fraction + noise_fraction must stay below 1")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")
        if self.count < 0 or self.num_shapes < 0:
            raise ValueError("count and num_shapes must be nonnegative")
        if self.max_disp < 0 or self.noise_magnitude < 0:
            raise ValueError("displacement and noise magnitudes must be nonnegative")


@dataclass
class SynthSample:
    gt: np.ndarray  # (h, w, 2) dense
    flow: np.ndarray  # (h, w, 2) corrupted sparse input, zero under the mask
    mask: np.ndarray  # (h, w) uint8, 1 = missing
    edges: np.ndarray  # (h, w) float32 in {0, 1}
    name: str = ""
    noisy: np.ndarray | None = None  # (h, w) bool, pixels whose input was perturbed
    regions: dict[str, np.ndarray] = field(default_factory=dict)

    def to_sample(self) -> Sample:
        return make_sample(self.gt, self.flow, self.mask, self.edges, self.name)


def motion_boundaries(gt: np.ndarray) -> np.ndarray:
    """1 where the flow differs from any 4-neighbor, else 0."""
    diff = np.zeros(gt.shape[:2], dtype=bool)
    dv = np.any(gt[1:] != gt[:-1], axis=-1)
    dh = np.any(gt[:, 1:] != gt[:, :-1], axis=-1)
    diff[1:] |= dv
    diff[:-1] |= dv
    diff[:, 1:] |= dh
    diff[:, :-1] |= dh
    return diff.astype(np.float32)


def _distinct_flow(rng, max_disp, taken):
    for _ in range(100):
        f = rng.uniform(-max_disp, max_disp, size=2)
        if all(np.hypot(*(f - t)) >= MIN_FLOW_GAP for t in taken):
            return f
    return f


def _missing_mask(rng, h, w, fraction, sigma) -> np.ndarray:
    n = h * w
    target = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    if target == 0:
        return mask.reshape(h, w)
    n_blob = int(round(BLOB_SHARE * target))
    # blobs: the highest values of smoothed noise form connected patches
    field_ = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap").ravel()
    order = np.argsort(-field_, kind="stable")
    mask[order[:n_blob]] = True
    rest = np.flatnonzero(~mask)
    mask[rng.choice(rest, size=target - n_blob, replace=False)] = True
    return mask.reshape(h, w)


def _one_shapes_sample(rng, spec: SynthSpec, index: int) -> SynthSample:
    h, w = spec.height, spec.width
    min_ext = max(3, min(h, w) // 8)
    max_ext = max(min_ext + 1, min(h, w) // 2)
    # rough packing bound; beyond it shapes mostly hide each other
    fit = int((h * w) // (2 * min_ext * min_ext))
    n_shapes = spec.num_shapes
    if n_shapes > fit:
        warnings.warn(f"{n_shapes} shapes do not fit in {w}x{h}; using {fit}", stacklevel=3)
        n_shapes = fit
    taken = []
    bg = _distinct_flow(rng, spec.max_disp, taken)
    taken.append(bg)
    gt = np.empty((h, w, 2), dtype=np.float32)
    gt[:] = bg
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_shapes):
        sh, sw = rng.integers(min_ext, max_ext + 1, size=2)
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        if rng.random() < 0.5:
            region = (np.abs(yy - cy) <= sh / 2) & (np.abs(xx - cx) <= sw / 2)
        else:
            region = ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
        f = _distinct_flow(rng, spec.max_disp, taken)
        taken.append(f)
        gt[region] = f
    edges = motion_boundaries(gt)
    mask = _missing_mask(rng, h, w, spec.missing_fraction, spec.blob_sigma)
    known = np.flatnonzero(~mask.ravel())
    n_noise = min(len(known), int(round(spec.noise_fraction * h * w)))
    noisy = np.zeros(h * w, dtype=bool)
    noisy[rng.choice(known, size=n_noise, replace=False)] = True
    noisy = noisy.reshape(h, w)
    flow = gt.copy()
    flow[noisy] += rng.uniform(-spec.noise_magnitude, spec.noise_magnitude, size=(n_noise, 2)).astype(np.float32)
    flow[mask] = 0.0
    return SynthSample(gt, flow, mask.astype(np.uint8), edges, f"shapes_{spec.seed}_{index:05d}", noisy)


def gen_moving_shapes(spec: SynthSpec) -> list[SynthSample]:
    """``spec.count`` piecewise-constant flow samples with corrupted inputs.

    Each sample has a constant background motion and ``num_shapes``
    rectangles/ellipses with their own distinct motion; later shapes
    cover earlier ones.  Edges are the ground-truth motion boundaries.
    """
    rng = np.random.default_rng(spec.seed)
    return [_one_shapes_sample(rng, spec, i) for i in range(spec.count)]


# -- Kanizsa probe -----------------------------------------------------------


@dataclass(frozen=True)
class KanizsaGeometry:
    height: int = 128
    width: int = 128
    square: int = 64  # side of the illusory square, centered
    radius: int = 16  # pac-man disc radius, discs centered on square corners
    band: int = 16  # width of the masked band straddling the square's sides


def _corners(g: KanizsaGeometry):
    top = (g.height - g.square) // 2
    left = (g.width - g.square) // 2
    return top, left, [(top, left), (top, left + g.square), (top + g.square, left), (top + g.square, left + g.square)]


def kanizsa_edges(g: KanizsaGeometry) -> np.ndarray:
    """Rasterized pac-man outlines: a 1-px ring with the mouth quadrant
    (facing the square center) cut out, plus the two mouth radii."""
    h, w = g.height, g.width
    top, left, corners = _corners(g)
    cy0, cx0 = top + g.square / 2, left + g.square / 2
    yy, xx = np.mgrid[0:h, 0:w]
    edges = np.zeros((h, w), dtype=bool)
    r = g.radius
    for cy, cx in corners:
        dy, dx = yy - cy, xx - cx
        sy, sx = np.sign(cy0 - cy), np.sign(cx0 - cx)
        ring = np.abs(np.hypot(dy, dx) - r) <= 0.5
        mouth = (dy * sy > 0) & (dx * sx > 0)
        rays = ((dx == 0) & (dy * sy >= 0) & (dy * sy <= r)) | ((dy == 0) & (dx * sx >= 0) & (dx * sx <= r))
        edges |= (ring & ~mouth) | rays
    return edges.astype(np.float32)


def gen_kanizsa(
    geometry: KanizsaGeometry = KanizsaGeometry(),
    inner_flow=(8.0, 0.0),
    background_flow=(-8.0, 0.0),
) -> SynthSample:
    """Kanizsa-square motion probe.

    Inside the (unmarked) square the flow is ``inner_flow``, elsewhere
    ``background_flow``.  The four discs and a band along the square's
    sides are masked.  The edge map carries only the pac-man outlines,
    never the illusory sides.  ``regions`` holds the masks ``square``,
    ``discs``, ``band`` (band minus discs) and ``band_inside`` /
    ``band_outside`` split by the illusory contour.
    """
    g = geometry
    h, w = g.height, g.width
    top, left, corners = _corners(g)
    if top - g.radius < 0 or left - g.radius < 0 or g.band > g.square:
        raise ValueError("Kanizsa geometry does not fit the image")
    yy, xx = np.mgrid[0:h, 0:w]
    square = (yy >= top) & (yy < top + g.square) & (xx >= left) & (xx < left + g.square)
    gt = np.empty((h, w, 2), dtype=np.float32)
    gt[:] = background_flow
    gt[square] = inner_flow
    discs = np.zeros((h, w), dtype=bool)
    for cy, cx in corners:
        discs |= np.hypot(yy - cy, xx - cx) <= g.radius
    hb = g.band / 2
    bottom, right = top + g.square, left + g.square
    def near(a, c):
        return (a >= c - hb) & (a < c + hb)

    near_h = near(yy, top) | near(yy, bottom)
    near_v = near(xx, left) | near(xx, right)
    span_x = (xx >= left - hb) & (xx < right + hb)
    span_y = (yy >= top - hb) & (yy < bottom + hb)
    band = ((near_h & span_x) | (near_v & span_y)) & ~discs
    mask = discs | band
    flow = gt.copy()
    flow[mask] = 0.0
    regions = {
        "square": square,
        "discs": discs,
        "band": band,
        "band_inside": band & square,
        "band_outside": band & ~square,
    }
    return SynthSample(gt, flow, mask.astype(np.uint8), kanizsa_edges(g), "kanizsa", np.zeros((h, w), dtype=bool), regions)
