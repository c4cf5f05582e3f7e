import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from landmark_lab import data
from landmark_lab.data import (
    REFERENCE_COUNTS,
    DatasetManifest,
    ImageFormatError,
    ManifestEntry,
    PtsCountError,
    PtsHeaderError,
    PtsValueError,
    augment,
    augmented_example,
    boundary_distances,
    draw_augmentation,
    load_image,
    load_manifest_samples,
    make_example,
    mean_shape,
    parse_pts,
    read_png,
    read_ppm,
    sample_seed,
    scan_standard,
    serialize_pts,
    similarity_about,
    synth_faces,
    write_png,
    write_ppm,
    write_synth,
)
from landmark_lab.geometry import SCHEME_68, SCHEME_TOY10, LandmarkSet, OutOfFrameError, crop_box
from landmark_lab.heatmap_codec import argmax_points, onehot

PTS_68 = "version: 1\nn_points: 68\n{\n" + "\n".join(f"{i + 1}.5 {2 * i + 1}" for i in range(68)) + "\n}\n"


def test_parse_pts_is_zero_based():
    lms = parse_pts(PTS_68)
    assert lms.scheme is SCHEME_68
    assert lms.points[0].tolist() == [0.5, 0.0]
    assert lms.points[67].tolist() == [67.5, 134.0]


def test_parse_pts_other_counts():
    ten = "version: 1\nn_points: 10\n{\n" + "1 1\n" * 10 + "}"
    assert parse_pts(ten).scheme is SCHEME_TOY10
    three = "version: 1\nn_points: 3\n{\n1 2\n3 4\n5 6\n}"
    assert parse_pts(three).tolist() == [[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]


@pytest.mark.parametrize("text, error", [
    ("n_points: 1\n{\n1 1\n}", PtsHeaderError),
    ("version: 1\nn_points: x\n{\n1 1\n}", PtsHeaderError),
    ("version: 1\nn_points: 2\n{\n1 1\n}", PtsCountError),
    ("version: 1\nn_points: 1\n{\n1 a\n}", PtsValueError),
    ("version: 1\nn_points: 1\n{\n1 2 3\n}", PtsValueError),
    ("version: 1\nn_points: 1\n{\n1 2\n", PtsHeaderError),
])
def test_parse_pts_errors(text, error):
    with pytest.raises(error):
        parse_pts(text)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (68, 2), elements=st.floats(-1000, 5000, allow_nan=False)))
def test_pts_roundtrip_at_six_decimals(pts):
    text = serialize_pts(pts)
    back = parse_pts(text)
    assert np.all(np.abs(back.points - pts) <= 5e-7 + 1e-9 * np.abs(pts))
    assert serialize_pts(back) == text


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3)).astype(np.float32) / 255
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(load_image(tmp_path / "a.ppm"), img)
    gray = b"P5\n2 1\n255\n" + bytes([0, 255])
    assert read_ppm(gray).tolist() == [[[0, 0, 0], [255, 255, 255]]]
    with pytest.raises(ImageFormatError):
        read_ppm(b"P3\n1 1\n255\n0 0 0")


def test_png_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (6, 4, 3)).astype(np.uint8)
    write_png(tmp_path / "a.png", img)
    assert np.array_equal(read_png((tmp_path / "a.png").read_bytes()), img)
    (tmp_path / "x.jpg").write_bytes(b"\xff\xd8\xff\xe0junk")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "x.jpg")


@pytest.mark.parametrize("mode", ["RGB", "RGBA", "L", "LA", "P"])
def test_png_decoder_agrees_with_pillow(tmp_path, rng, mode):
    image_mod = pytest.importorskip("PIL.Image")
    base = image_mod.fromarray(rng.integers(0, 256, (13, 17, 3)).astype(np.uint8), "RGB")
    img = base.convert(mode) if mode != "P" else base.quantize(colors=40)
    img.save(tmp_path / "p.png", optimize=False)
    want = np.asarray(image_mod.open(tmp_path / "p.png").convert("RGB"))
    assert np.array_equal(read_png((tmp_path / "p.png").read_bytes()), want)


def make_layout(root, counts):
    for dataset, split, rel in data.STANDARD_LAYOUT:
        n = counts.get(rel, 0)
        folder = root / rel
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            (folder / f"img{i:04d}.png").write_bytes(b"")
            (folder / f"img{i:04d}.pts").write_text("")


def test_manifest_counts_and_discrepancies(tmp_path):
    make_layout(tmp_path, {"helen/trainset": 3, "helen/testset": 2, "300W/01_Indoor": 2, "300W/02_Outdoor": 1})
    manifest = scan_standard(tmp_path)
    assert manifest.counts() == {("Helen", "train"): 3, ("Helen", "val"): 2, ("300-W", "val"): 3}
    expected = {"Helen": (3, 1), "300-W": (0, 3)}
    report = manifest.check(expected)
    assert [str(d) for d in report.discrepancies][0] == "Helen val: expected 1, found 2"
    assert any("300-W Indoor" in str(d) for d in report.discrepancies)
    assert not report.missing_files
    (tmp_path / "helen/testset/img0000.pts").unlink()
    assert "helen/testset/img0000.pts" in manifest.check(expected).missing_files


def test_manifest_csv_roundtrip(tmp_path):
    m = DatasetManifest([ManifestEntry("a/b.png", "a/b.pts", "Helen", "val"),
                         ManifestEntry("300W/01_Indoor/c.png", "300W/01_Indoor/c.pts", "300-W", "val")], tmp_path)
    m.write(tmp_path / "m.csv")
    back = DatasetManifest.read(tmp_path / "m.csv")
    assert back.entries == m.entries
    assert back.entries[0].sample_id == "Helen/b"
    assert back.entries[1].subgroup == "Indoor"
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        DatasetManifest.read(tmp_path / "bad.csv")


def test_reference_table_counts():
    assert REFERENCE_COUNTS["Helen"] == (2000, 330)
    assert REFERENCE_COUNTS["COFW"] == (0, 507)
    assert sum(v for _, v in REFERENCE_COUNTS.values()) == 330 + 224 + 600 + 135 + 507


def test_augmentation_draws_in_range():
    for i in range(500):
        a, s = draw_augmentation(sample_seed(9, i))
        assert -30 <= a <= 30 and 0.6 <= s <= 1.0
    assert draw_augmentation(sample_seed(9, 3)) == draw_augmentation(sample_seed(9, 3))
    assert draw_augmentation(sample_seed(9, 3)) != draw_augmentation(sample_seed(9, 4))


def test_similarity_rotates_x_toward_y():
    t = similarity_about((0.0, 0.0), 90.0, 0.5)
    assert np.allclose(t.apply([[2.0, 0.0]]), [[0.0, 1.0]])


def test_augment_moves_image_and_landmarks_together(faces):
    s = faces[0]
    out = augment(s, sample_seed(0, 1), angle=25.0, scale=0.8)
    box = crop_box(s.landmarks)
    assert out.meta.crop == box
    c = np.array(box.center)
    before = s.landmarks.points - c
    after = out.landmarks.points - c
    ang = np.degrees(np.arctan2(after[:, 1], after[:, 0]) - np.arctan2(before[:, 1], before[:, 0]))
    ang = (ang + 180) % 360 - 180
    assert np.allclose(ang, 25.0, atol=1e-9)
    assert np.allclose(np.linalg.norm(after, axis=1), 0.8 * np.linalg.norm(before, axis=1))
    # a bright eye-corner neighbourhood stays aligned with its landmark
    ex0 = make_example(s, 32, "pwc", 64)
    ex1 = make_example(out, 32, "pwc", 64)
    assert abs(ex0.image.mean() - ex1.image.mean()) < 0.2


def test_augmented_example_matches_two_step(faces):
    s = faces[1]
    seed = sample_seed(5, 2)
    one = augmented_example(s, seed, 32, "distribution", 64)
    two = make_example(augment(s, seed), 32, "distribution", 64)
    assert np.allclose(one.points, two.points, atol=1e-9)
    assert np.abs(one.image - two.image).mean() < 0.05


def test_make_example_targets(faces):
    s = faces[2]
    ex = make_example(s, 32, "pwc", 64)
    assert ex.image.shape == (64, 64, 3) and ex.image.dtype == np.float32
    decoded = argmax_points(onehot(ex.target).data, 10)
    assert np.array_equal(decoded, np.floor(ex.points / 2 + 0.5))
    back = ex.to_crop.inverse().apply(ex.points)
    assert np.allclose(back, s.landmarks.points)
    reg = make_example(s, 32, "direct", 64)
    assert reg.target.shape == (10, 2)
    assert reg.flat_target.shape == (20,)
    with pytest.raises(ValueError):
        make_example(s, 32, "bogus", 64)


def test_make_example_out_of_frame(faces):
    s = faces[0]
    far = data.FaceSample(s.image, LandmarkSet(s.landmarks.points + 500, SCHEME_TOY10), s.meta)
    with pytest.raises(OutOfFrameError):
        make_example(far, 32, "pwc", 64)


def test_synth_is_deterministic_and_prefix_stable():
    a = synth_faces(5, 48, seed=3)
    b = synth_faces(8, 48, seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(x.landmarks.points, y.landmarks.points)
    assert a[0].image.shape == (48, 48, 3)
    assert not np.array_equal(a[0].image, synth_faces(1, 48, seed=4)[0].image)


def test_synth_landmarks_sit_on_shape_edges():
    samples, layouts = synth_faces(20, 64, seed=11, with_layouts=True)
    for lay in layouts:
        assert np.all(boundary_distances(lay) == 0.0)
    iod = [np.linalg.norm(s.landmarks.points[0] - s.landmarks.points[3]) for s in samples]
    assert min(iod) > 5


def test_synth_occlusion_flag():
    samples, layouts = synth_faces(30, 64, seed=2, occlusion_rate=0.5, with_layouts=True)
    flags = [s.meta.occluded for s in samples]
    assert flags == [lay.occluder is not None for lay in layouts]
    assert 0 < sum(flags) < 30


def test_write_synth_and_reload(tmp_path):
    samples = synth_faces(4, 32, seed=1)
    manifest = write_synth(tmp_path, samples)
    assert len(manifest) == 4
    back = load_manifest_samples(DatasetManifest.read(tmp_path / "manifest.csv"), scheme=None)
    for s, b in zip(samples, back):
        assert np.max(np.abs(s.landmarks.points - b.landmarks.points)) < 1e-6
        assert np.abs(s.image - b.image).max() <= 0.5 / 255 + 1e-6


def test_mean_shape_is_crop_frame_average(faces):
    m = mean_shape(faces, 64)
    assert m.shape == (10, 2)
    assert np.all((m > 0) & (m < 64))
    assert math.isclose(m[:, 0].mean(), 32, abs_tol=4)
