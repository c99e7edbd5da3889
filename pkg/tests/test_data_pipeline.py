import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from PIL import Image

from unet_gnn import data_pipeline as dp
from unet_gnn.errors import ConfigError, DataError, FormatError

HEADER = "@num_classes\t3\n@classes\tbg\tcat\tdog\n@ignore_index\t255\n"


def write_pair(root, name, image, mask):
    (root / "images").mkdir(exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    dp.write_image_png(image, root / "images" / f"{name}.png")
    dp.write_mask_png(mask, root / "masks" / f"{name}.png")
    return f"images/{name}.png\tmasks/{name}.png"


# -- manifests ----------------------------------------------------------------
def test_empty_manifest_is_valid():
    m = dp.parse_manifest(HEADER)
    assert len(m) == 0 and m.num_classes == 3 and m.class_names == ["bg", "cat", "dog"]


def test_two_records_in_order(tmp_path):
    img = np.zeros((3, 4, 4), np.float32)
    a = write_pair(tmp_path, "b", img, np.zeros((4, 4), int))
    b = write_pair(tmp_path, "a", img, np.zeros((4, 4), int))
    (tmp_path / "m.tsv").write_text(HEADER + "# comment\n\n" + a + "\n" + b + "\tsecond\n")
    m = dp.load_manifest(tmp_path / "m.tsv")
    assert [r.id for r in m.records] == ["b", "second"]
    assert [r.line for r in m.records] == [6, 7]
    assert m.records[0].image_path == tmp_path / "images" / "b.png"


def test_missing_mask_names_line(tmp_path):
    a = write_pair(tmp_path, "a", np.zeros((3, 4, 4), np.float32), np.zeros((4, 4), int))
    text = HEADER + a + "\n" + "images/a.png\tmasks/nope.png\tother\n"
    with pytest.raises(FormatError, match=r"line 5: mask path"):
        dp.parse_manifest(text, tmp_path)


@pytest.mark.parametrize("body,line", [
    ("x.png\ty.png\tid1\nz.png\tw.png\tid1\n", "line 5"),
    ("only-one-field\n", "line 4"),
    ("a\tb\tc\td\n", "line 4"),
])
def test_malformed_lines(body, line):
    with pytest.raises(FormatError, match=line):
        dp.parse_manifest(HEADER + body, check_paths=False)


@pytest.mark.parametrize("text", [
    "a.png\tb.png\n",
    "@num_classes\t1\n",
    "@num_classes\t3\n@classes\ta\tb\n",
    "@num_classes\tthree\n",
    "@colour\tred\n@num_classes\t2\n",
])
def test_bad_headers(text):
    with pytest.raises(FormatError):
        dp.parse_manifest(text, check_paths=False)


def test_missing_manifest_file(tmp_path):
    with pytest.raises(FormatError):
        dp.load_manifest(tmp_path / "absent.tsv")


def test_manifest_text_round_trip():
    text = HEADER + "i/a.png\tm/a.png\ta\ni/b.png\tm/b.png\tb\n"
    m = dp.parse_manifest(text, check_paths=False)
    assert m.dumps() == text
    assert dp.parse_manifest(m.dumps(), check_paths=False).dumps() == text


def test_shards_partition_records():
    body = "".join(f"i/{i}.png\tm/{i}.png\n" for i in range(7))
    m = dp.parse_manifest(HEADER + body, check_paths=False)
    ids = [r.id for k in range(3) for r in m.shard(k, 3).records]
    assert sorted(ids) == sorted(r.id for r in m.records)


# -- decoding and resizing ----------------------------------------------------
def test_identity_resize_preserves_decoded_values(tmp_path, rng):
    img = np.round(rng.uniform(size=(3, 8, 8)) * 255) / 255
    write_pair(tmp_path, "s", img, np.zeros((8, 8), int))
    got = dp.read_image(tmp_path / "images" / "s.png")
    np.testing.assert_allclose(got, img, atol=1e-6)
    np.testing.assert_array_equal(dp.resize_image(got, (8, 8)), got)


def test_constant_downscale_stays_constant():
    out = dp.resize_image(np.full((2, 16, 16), 0.4, np.float32), (8, 8))
    np.testing.assert_allclose(out, 0.4, atol=1e-6)


def test_checkerboard_mask_nearest():
    board = (np.indices((4, 4)).sum(axis=0) % 2) * 3
    out = dp.resize_mask(board, (2, 2))
    assert out.shape == (2, 2) and set(out.ravel()) <= {0, 3}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 12), w=st.integers(1, 12),
       th=st.integers(1, 20), tw=st.integers(1, 20))
def test_mask_resize_never_invents_labels(seed, h, w, th, tw):
    m = np.random.default_rng(seed).choice([0, 2, 5, 255], size=(h, w))
    out = dp.resize_mask(m, (th, tw))
    assert out.shape == (th, tw) and set(out.ravel()) <= set(m.ravel())


def test_load_sample_resizes_both(tmp_path, rng):
    write_pair(tmp_path, "s", rng.uniform(size=(3, 20, 12)).astype(np.float32), rng.integers(0, 3, (20, 12)))
    rec = dp.parse_manifest(HEADER + "images/s.png\tmasks/s.png\n", tmp_path).records[0]
    s = dp.load_sample(rec, 16, num_classes=3)
    assert s.image.shape == (3, 16, 16) and s.mask.shape == (16, 16)
    assert s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1


def test_load_sample_label_range(tmp_path):
    write_pair(tmp_path, "s", np.zeros((3, 4, 4), np.float32), np.full((4, 4), 7))
    rec = dp.parse_manifest(HEADER + "images/s.png\tmasks/s.png\n", tmp_path).records[0]
    with pytest.raises(DataError):
        dp.load_sample(rec, 4, num_classes=3)


def test_corrupt_image(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"\x89PNG not really")
    with pytest.raises(DataError):
        dp.read_image(p)


def test_rgb_mask_needs_color_table(tmp_path):
    p = tmp_path / "rgb.png"
    arr = np.zeros((2, 2, 3), np.uint8)
    arr[0, 0] = (230, 25, 75)
    Image.fromarray(arr, "RGB").save(p)
    with pytest.raises(DataError):
        dp.read_mask(p)
    out = dp.read_mask(p, {(0, 0, 0): 0, (230, 25, 75): 1})
    assert out.tolist() == [[1, 0], [0, 0]]
    with pytest.raises(DataError):
        dp.read_mask(p, {(0, 0, 0): 0})


def test_paletted_mask_round_trip(tmp_path, rng):
    m = rng.integers(0, 12, (9, 7))
    m[0, 0] = 255
    dp.write_mask_png(m, tmp_path / "m.png")
    assert Image.open(tmp_path / "m.png").mode == "P"
    np.testing.assert_array_equal(dp.read_mask(tmp_path / "m.png"), m)


def test_class_colors_stable():
    assert dp.class_color(0) == (0, 0, 0)
    assert dp.class_color(11) == dp.class_color(11)
    assert len(dp.palette_bytes()) == 768


# -- synthetic shapes ---------------------------------------------------------
def test_synth_deterministic():
    a = dp.synth_shapes(3, 4, 32, num_classes=3)
    b = dp.synth_shapes(3, 4, 32, num_classes=3)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes() and x.id == y.id


def test_synth_two_classes_binary():
    for s in dp.synth_shapes(1, 6, 32):
        assert set(np.unique(s.mask)) <= {0, 1}
        assert s.image.shape == (3, 32, 32) and s.image.dtype == np.float32


@pytest.mark.parametrize("seed", range(5))
def test_synth_masks_match_analytic_shapes(seed):
    yy, xx = np.mgrid[0:48, 0:48].astype(np.float64)
    for s in dp.synth_shapes(seed, 3, 48, num_classes=4):
        expected = np.zeros((48, 48), np.int64)
        for shape in s.shapes:
            expected[shape.contains(xx, yy)] = shape.label
        np.testing.assert_array_equal(s.mask, expected)
        fg = s.mask > 0
        inside_any = np.zeros_like(fg)
        for shape in s.shapes:
            inside_any |= shape.contains(xx, yy)
        assert np.all(inside_any[fg])


def test_synth_images_are_8bit_exact(tmp_path):
    samples = dp.synth_shapes(2, 2, 16)
    path = dp.write_dataset(samples, tmp_path, 2, ["bg", "fg"])
    back = dp.load_dataset(dp.load_manifest(path), 16)
    for s, b in zip(samples, back):
        assert s.image.tobytes() == b.image.tobytes()
        assert np.array_equal(s.mask, b.mask) and s.id == b.id


def test_synth_rejects_single_class():
    with pytest.raises(ConfigError):
        dp.synth_shapes(0, 1, 16, num_classes=1)


# -- fisheye ------------------------------------------------------------------
def test_center_fixed_point(rng):
    s = dp.Sample(rng.uniform(size=(2, 9, 9)).astype(np.float32), rng.integers(0, 3, (9, 9)), "c")
    out = dp.fisheye_warp(s, dp.FisheyeParams.centered(9, 9, 4.0))
    np.testing.assert_allclose(out.image[:, 4, 4], s.image[:, 4, 4], atol=1e-7)
    assert out.mask[4, 4] == s.mask[4, 4]


def test_huge_focal_is_identity():
    s = dp.synth_shapes(4, 1, 32, num_classes=3)[0]
    out = dp.fisheye_warp(s, dp.FisheyeParams.centered(32, 32, 1e6))
    assert np.abs(out.image - s.image).max() <= 1e-3
    np.testing.assert_array_equal(out.mask, s.mask)


@settings(max_examples=30, deadline=None)
@given(f=st.floats(0.5, 500.0), r=st.lists(st.floats(0.0, 300.0), min_size=2, max_size=8, unique=True))
def test_radius_map_monotone(f, r):
    r = np.sort(np.asarray(r))
    assume(np.diff(r).min() > 1e-3)
    warped = dp.fisheye_radius(r, f)
    assert np.all(np.diff(warped) > 0)
    assert np.all(warped <= r + 1e-12)


def test_source_radius_inverts():
    r = np.linspace(0, 40, 50)
    np.testing.assert_allclose(dp.fisheye_source_radius(dp.fisheye_radius(r, 12.0), 12.0), r, rtol=1e-9, atol=1e-9)
    assert np.isnan(dp.fisheye_source_radius(np.array([100.0]), 10.0)[0])


def test_strong_warp_marks_out_of_source_pixels():
    s = dp.synth_shapes(0, 1, 32, num_classes=3)[0]
    out = dp.fisheye_warp(s, dp.FisheyeParams.centered(32, 32, 8.0))
    invalid = out.mask == 255
    assert invalid[0, 0] and not invalid[16, 16]
    assert np.all(out.image[:, invalid] == 0)
    assert out.image.shape == s.image.shape and out.mask.shape == s.mask.shape
    assert set(np.unique(out.mask)) <= set(np.unique(s.mask)) | {255}


def test_fisheye_params_validation():
    with pytest.raises(ConfigError):
        dp.FisheyeParams(0, 0, 0.0)
    s = dp.Sample(np.zeros((1, 4, 4), np.float32), np.zeros((4, 4), int))
    with pytest.raises(ConfigError):
        dp.fisheye_warp(s, dp.FisheyeParams(10, 1, 3))


def test_sample_shape_check():
    with pytest.raises(DataError):
        dp.Sample(np.zeros((1, 4, 4)), np.zeros((4, 5), int))
