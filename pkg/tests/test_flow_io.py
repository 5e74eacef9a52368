import io
import struct

import numpy as np
import pytest

from flowfill.flow_io import (
    FLO_MAGIC,
    FormatError,
    color_wheel,
    flow_to_color,
    parse_matches,
    read_edge_map,
    read_flo,
    read_gray,
    read_mask,
    read_matches,
    write_edge_raw,
    write_flo,
    write_image,
    write_matches,
    write_pgm,
)


def test_flo_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    flow = rng.standard_normal((3, 4, 2)).astype(np.float32)
    a, b = tmp_path / "a.flo", tmp_path / "b.flo"
    write_flo(flow, a)
    write_flo(read_flo(a), b)
    assert read_flo(a).tobytes() == flow.tobytes()
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_bytes()) == 12 + 3 * 4 * 2 * 4


def test_flo_layout_by_hand(tmp_path):
    # header: float magic, int width, int height; then interleaved u, v rows
    path = tmp_path / "h.flo"
    vals = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0]
    path.write_bytes(struct.pack("<fii", FLO_MAGIC, 3, 1) + struct.pack("<6f", *vals))
    flow = read_flo(path)
    assert flow.shape == (1, 3, 2)
    assert flow[0, :, 0].tolist() == [1.0, 2.0, 3.0]
    assert flow[0, :, 1].tolist() == [-1.0, -2.0, -3.0]


def test_flo_cross_checks_with_opencv(tmp_path):
    cv2 = pytest.importorskip("cv2")
    rng = np.random.default_rng(1)
    flow = rng.uniform(-20, 20, (5, 7, 2)).astype(np.float32)
    ours, theirs = tmp_path / "ours.flo", tmp_path / "theirs.flo"
    write_flo(flow, ours)
    assert cv2.writeOpticalFlow(str(theirs), flow)
    assert ours.read_bytes() == theirs.read_bytes()
    assert np.array_equal(cv2.readOpticalFlow(str(ours)), flow)


def test_flo_bad_magic(tmp_path):
    path = tmp_path / "bad.flo"
    path.write_bytes(struct.pack("<fii", 1.0, 1, 1) + b"\0" * 8)
    with pytest.raises(FormatError, match="magic"):
        read_flo(path)


@pytest.mark.parametrize("payload", [b"", struct.pack("<fii", FLO_MAGIC, 2, 2) + b"\0" * 8, struct.pack("<fii", FLO_MAGIC, 0, 2)])
def test_flo_truncated_or_empty(tmp_path, payload):
    path = tmp_path / "t.flo"
    path.write_bytes(payload)
    with pytest.raises(FormatError):
        read_flo(path)


def test_write_flo_rejects_bad_arrays(tmp_path):
    with pytest.raises(ValueError):
        write_flo(np.zeros((2, 2, 3)), tmp_path / "x.flo")
    with pytest.raises(ValueError):
        write_flo(np.full((2, 2, 2), np.nan), tmp_path / "x.flo")


def test_parse_single_match():
    m = parse_matches("10 12 14 12\n")
    assert m.tolist() == [[10, 12, 14, 12]]


def test_parse_empty():
    assert parse_matches("").shape == (0, 4)


def test_parse_ignores_score_column_and_blank_lines():
    m = parse_matches("10 12 14 12 0.93\n\n   \n1 2 3 4 0.1 7\n")
    assert m.tolist() == [[10, 12, 14, 12], [1, 2, 3, 4]]


def test_parse_rounds_half_up():
    m = parse_matches("0.5 1.49 2.5 -0.5\n")
    assert m.tolist() == [[1, 1, 3, 0]]


@pytest.mark.parametrize("text", ["1 2 3\n", "1 2 x 4\n", "1 2 nan 4\n"])
def test_parse_errors(text):
    with pytest.raises(FormatError):
        parse_matches(text)


def test_matches_file_round_trip(tmp_path):
    m = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    write_matches(m, tmp_path / "m.txt")
    assert np.array_equal(read_matches(tmp_path / "m.txt"), m)


def test_parse_accepts_stream_and_lines():
    assert parse_matches(io.StringIO("1 2 3 4\n")).tolist() == [[1, 2, 3, 4]]
    assert parse_matches(["1 2 3 4", "5 6 7 8"]).shape == (2, 4)


def test_edge_map_zero_and_full_scale(tmp_path):
    write_pgm(np.zeros((3, 4), np.uint8), tmp_path / "z.pgm")
    assert np.array_equal(read_edge_map(tmp_path / "z.pgm"), np.zeros((3, 4)))
    write_pgm(np.full((2, 2), 255, np.uint8), tmp_path / "f.pgm")
    assert np.all(read_edge_map(tmp_path / "f.pgm") == 1.0)


def test_edge_map_png_via_pillow(tmp_path):
    from PIL import Image

    img = np.array([[0, 128], [255, 64]], np.uint8)
    Image.fromarray(img, mode="L").save(tmp_path / "e.png")
    assert np.allclose(read_edge_map(tmp_path / "e.png"), img / 255.0)


def test_edge_map_raw_round_trip_exact(tmp_path):
    e = np.random.default_rng(2).random((5, 3)).astype(np.float32)
    write_edge_raw(e, tmp_path / "e.raw")
    assert read_edge_map(tmp_path / "e.raw").tobytes() == e.tobytes()


def test_edge_map_raw_clipped_and_truncation(tmp_path):
    write_edge_raw(np.array([[-1.0, 2.0]]), tmp_path / "c.raw")
    assert read_edge_map(tmp_path / "c.raw").tolist() == [[0.0, 1.0]]
    raw = (tmp_path / "c.raw").read_bytes()
    (tmp_path / "t.raw").write_bytes(raw[:-2])
    with pytest.raises(FormatError):
        read_edge_map(tmp_path / "t.raw")


def test_rgb_image_is_not_an_edge_map(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((2, 2, 3), np.uint8), mode="RGB").save(tmp_path / "rgb.png")
    with pytest.raises(FormatError):
        read_gray(tmp_path / "rgb.png")


def test_mask_any_nonzero_is_missing(tmp_path):
    write_pgm(np.array([[0, 1], [200, 0]], np.uint8), tmp_path / "m.pgm")
    assert read_mask(tmp_path / "m.pgm").tolist() == [[0, 1], [1, 0]]


def test_color_wheel_shape_and_anchor_colors():
    w = color_wheel()
    assert w.shape == (55, 3)
    assert w[0].tolist() == [1.0, 0.0, 0.0]  # red
    assert w[15].tolist() == [1.0, 1.0, 0.0]  # yellow
    assert w[21].tolist() == [0.0, 1.0, 0.0]  # green


def test_zero_field_is_white():
    assert np.all(flow_to_color(np.zeros((3, 3, 2))) == 255)


def test_pure_positive_u_is_red():
    rgb = flow_to_color(np.array([[[5.0, 0.0]]]), max_magnitude=5.0)
    assert rgb[0, 0].tolist() == [255, 0, 0]


def test_scaling_field_and_max_together_is_invariant():
    rng = np.random.default_rng(3)
    f = rng.uniform(-4, 4, (6, 7, 2))
    assert np.array_equal(flow_to_color(f, 5.0), flow_to_color(f * 4.0, 20.0))


def test_matches_public_reference_implementation():
    flow_vis = pytest.importorskip("flow_vis")
    rng = np.random.default_rng(4)
    f = rng.uniform(-3, 3, (20, 30, 2))
    m = 4.0
    ours = flow_to_color(f, m)
    theirs = flow_vis.flow_uv_to_colors(f[..., 0] / m, f[..., 1] / m)
    # identical up to the odd floor() flip from float rounding order
    assert np.max(np.abs(ours.astype(int) - theirs.astype(int))) <= 1
    assert np.mean(ours == theirs) > 0.99


def test_write_image_ppm_and_png(tmp_path):
    from PIL import Image

    rgb = np.random.default_rng(5).integers(0, 256, (4, 5, 3), dtype=np.uint8)
    write_image(rgb, tmp_path / "a.ppm")
    write_image(rgb, tmp_path / "a.png")
    with Image.open(tmp_path / "a.ppm") as a, Image.open(tmp_path / "a.png") as b:
        assert np.array_equal(np.asarray(a), rgb)
        assert np.array_equal(np.asarray(b), rgb)
