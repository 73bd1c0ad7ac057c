import hashlib
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcnn.data import (
    CLASS_NAMES,
    DatasetManifest,
    Item,
    ManifestError,
    PreprocessSpec,
    SplitError,
    SplitPlan,
    appendix_manifest,
    load_manifest,
    make_splits,
    preprocess,
    read_image,
    read_manifest_file,
    resize_bilinear,
    synth_textures,
    write_manifest_file,
    write_pnm,
)
from tcnn.data.preprocess import crop_offset
from tcnn.data.synthetic import grating
from tcnn.tensor import make_rng, save_tensor
from tcnn.zoo import ModelSpec, build

# sha256 of the newline-joined class lines of each bundled list, checked against the source tables once
APPENDIX_SHA = {
    "imagenet-t": "24c820f463c1fa4505ab35f286cf4582cd67b10f5acee8f68d74e165541dfc32",
    "imagenet-s1": "c87775833b0b1947664903405603c626213bf3c3eccc70862785dc4e90ae9e86",
    "imagenet-s2": "6709edf04233da2a441efa24b3b7fb4051865e83760b350d786e8d15ad60f729",
}


def make_manifest(per_class, classes=2, samples=0):
    items = []
    for c in range(classes):
        for i in range(per_class):
            sample = f"s{i % samples}" if samples else ""
            items.append(Item(f"c{c}/{i:04d}.ppm", c, "", sample))
    return DatasetManifest([(c, f"class{c}") for c in range(classes)], items)


# --- manifests -------------------------------------------------------------


def test_scan_directory(tmp_path):
    rng = make_rng(0)
    for cls in ("b_cls", "a_cls"):
        (tmp_path / cls).mkdir()
        for i in range(3):
            write_pnm(tmp_path / cls / f"{i}.ppm", rng.random((3, 5, 4)))
    (tmp_path / "a_cls" / "notes.md").write_text("not an image")
    m = load_manifest(tmp_path)
    assert len(m.items) == 6
    assert {it.class_id for it in m.items} == {0, 1}
    assert m.labels == ["a_cls", "b_cls"]


def test_scan_reports_unreadable_files(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "x.ppm").write_bytes(b"P6\n2 2\n255\n")
    (tmp_path / "a" / "y.pgm").write_bytes(b"garbage")
    with pytest.raises(ManifestError) as exc:
        load_manifest(tmp_path)
    assert "x.ppm" in str(exc.value) and "y.pgm" in str(exc.value)


def test_scan_warns_on_empty_class(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    write_pnm(tmp_path / "a" / "0.pgm", np.zeros((1, 2, 2)))
    with pytest.warns(UserWarning, match="no images"):
        m = load_manifest(tmp_path)
    assert m.class_count == 2


def test_manifest_file_round_trip(tmp_path):
    m = make_manifest(3, samples=3)
    write_manifest_file(tmp_path / "m.tsv", m)
    back = read_manifest_file(tmp_path / "m.tsv")
    assert back.classes == m.classes and back.items == m.items


def test_manifest_invariants():
    with pytest.raises(ManifestError):
        DatasetManifest([(0, "a"), (2, "b")])
    with pytest.raises(ManifestError):
        DatasetManifest([(0, "a")], [Item("x", 1)])
    with pytest.raises(ManifestError):
        DatasetManifest([(0, "a")], [Item("x", 0), Item("x", 0)])


@pytest.mark.parametrize("name", sorted(APPENDIX_SHA))
def test_appendix_lists(name):
    m = appendix_manifest(name)
    assert m.class_count == 28
    lines = "\n".join(label for _, label in m.classes)
    assert hashlib.sha256(lines.encode()).hexdigest() == APPENDIX_SHA[name]
    assert all(label.split()[0].startswith("n") and len(label.split()[0]) == 9 for _, label in m.classes)


def test_appendix_examples():
    t = appendix_manifest("imagenet-t")
    assert t.classes[0][1].startswith("n02871525 bookshop")
    s2 = appendix_manifest("imagenet-s2")
    assert any(label.startswith("n06785654 crossword puzzle") for _, label in s2.classes)
    with pytest.raises(ManifestError):
        appendix_manifest("imagenet-x")


# --- splits ----------------------------------------------------------------


def test_kfold_ten_folds_of_sixteen():
    m = make_manifest(160, classes=3)
    seen = set()
    for i in range(10):
        train, test = make_splits(m, SplitPlan("kfold", k=10, index=i, seed=4))
        for c in range(3):
            assert sum(it.class_id == c for it in test) == 16
        assert not {it.path for it in train} & {it.path for it in test}
        seen |= {it.path for it in test}
    assert len(seen) == 480


def test_sample_rotation_one_sample_trains():
    m = make_manifest(432, classes=2, samples=4)
    for i in range(4):
        train, test = make_splits(m, SplitPlan("sample_rotation", k=4, index=i))
        assert sum(it.class_id == 0 for it in train) == 108
        assert sum(it.class_id == 0 for it in test) == 324
        assert {it.sample for it in train} == {f"s{i}"}
    with pytest.raises(SplitError):
        make_splits(m, SplitPlan("sample_rotation", k=3, index=0))


def test_repeated_random_half_split():
    m = make_manifest(92, classes=3)
    a = make_splits(m, SplitPlan("repeated_random", k=20, index=0, seed=1))
    b = make_splits(m, SplitPlan("repeated_random", k=20, index=1, seed=1))
    for c in range(3):
        assert sum(it.class_id == c for it in a[0]) == 46
        assert sum(it.class_id == c for it in a[1]) == 46
    assert a[0] != b[0]


def test_fixed_split_uses_tags():
    items = [Item("a", 0, "train"), Item("b", 0, "val"), Item("c", 0, "test")]
    m = DatasetManifest([(0, "x")], items)
    assert [it.path for it in make_splits(m, SplitPlan("fixed"))[0]] == ["a"]
    assert [it.path for it in make_splits(m, SplitPlan("fixed", use_val=True))[0]] == ["a", "b"]


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["kfold", "repeated_random", "sample_rotation"]),
    st.integers(2, 6),
    st.integers(4, 30),
    st.integers(0, 2**31),
    st.data(),
)
def test_splits_disjoint_covering_reproducible(strategy, k, per_class, seed, data):
    m = make_manifest(per_class, classes=3, samples=k if strategy == "sample_rotation" else 0)
    if strategy == "kfold":
        k = min(k, per_class)
    index = data.draw(st.integers(0, k - 1))
    plan = SplitPlan(strategy, k=k, index=index, seed=seed)
    if strategy == "sample_rotation" and per_class < k:
        return
    train, test = make_splits(m, plan)
    tr, te = {it.path for it in train}, {it.path for it in test}
    assert not tr & te
    assert tr | te == {it.path for it in m.items}
    assert make_splits(m, plan) == (train, test)


# --- preprocessing ---------------------------------------------------------


def test_center_crop_offset():
    assert crop_offset(256, 256, 227, 227, "eval") == (14, 14)
    img = np.arange(3 * 256 * 256, dtype=np.float64).reshape(3, 256, 256)
    out = preprocess(img, PreprocessSpec(crop=(227, 227), crop_policy="center"), "train", make_rng(0))
    np.testing.assert_array_equal(out[0], img[:, 14:241, 14:241])


def test_constant_image_minus_mean_is_zero():
    img = np.full((3, 9, 9), 0.42)
    out = preprocess(img, PreprocessSpec(mean=(0.42, 0.42, 0.42)))
    assert not out.any()


def test_resize_200_to_227_without_crop(tmp_path):
    img = make_rng(0).random((3, 200, 200))
    write_pnm(tmp_path / "a.ppm", img)
    out = preprocess(tmp_path / "a.ppm", PreprocessSpec(resize_to=(227, 227)))
    assert out.shape == (1, 3, 227, 227)


def test_resize_bilinear_properties():
    rng = make_rng(1)
    img = rng.random((3, 7, 9))
    np.testing.assert_array_equal(resize_bilinear(img, 7, 9), img)
    const = np.full((3, 5, 5), 0.3)
    np.testing.assert_allclose(resize_bilinear(const, 11, 13), 0.3, atol=1e-15)
    # 2x upsampling of a linear ramp stays a ramp inside the clamped border
    ramp = np.tile(np.arange(8.0), (1, 4, 1))
    up = resize_bilinear(ramp, 4, 16)
    np.testing.assert_allclose(np.diff(up[0, 0, 1:-1]), 0.5, atol=1e-12)


def test_crop_larger_than_resize_rejected():
    with pytest.raises(ValueError):
        PreprocessSpec(resize_to=(200, 200), crop=(227, 227))


def test_eval_mode_consumes_no_randomness():
    rng = make_rng(5)
    state = rng.bit_generator.state
    preprocess(make_rng(0).random((3, 40, 40)), PreprocessSpec(crop=(32, 32), horizontal_flip=True), "eval", rng)
    assert rng.bit_generator.state == state


def test_image_readers(tmp_path):
    rng = make_rng(2)
    rgb = np.round(rng.random((3, 4, 5)) * 255) / 255
    write_pnm(tmp_path / "a.ppm", rgb)
    np.testing.assert_allclose(read_image(tmp_path / "a.ppm"), rgb, atol=1e-12)
    grey = np.round(rng.random((1, 4, 5)) * 255) / 255
    write_pnm(tmp_path / "g.pgm", grey)
    np.testing.assert_allclose(read_image(tmp_path / "g.pgm"), np.repeat(grey, 3, axis=0), atol=1e-12)
    (tmp_path / "p3.ppm").write_text("P3\n2 1\n255\n255 0 0  0 0 255\n")
    np.testing.assert_array_equal(read_image(tmp_path / "p3.ppm")[:, 0, :], [[1, 0], [0, 0], [0, 1]])
    save_tensor(tmp_path / "t.t4f", rgb[None])
    np.testing.assert_array_equal(read_image(tmp_path / "t.t4f"), rgb)


# --- synthetic textures ----------------------------------------------------


def test_synthetic_bitwise_reproducible():
    a = synth_textures(3, 4, 32, make_rng(9))
    b = synth_textures(3, 4, 32, make_rng(9))
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_synthetic_counts_and_range():
    ds = synth_textures(5, 100, 64, make_rng(0))
    assert len(ds.manifest.items) == 500 and ds.images.shape == (500, 3, 64, 64)
    assert ds.manifest.class_count == 5
    assert np.bincount(ds.labels).tolist() == [100] * 5
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    with pytest.raises(ValueError):
        synth_textures(len(CLASS_NAMES) + 1, 1, 8, make_rng(0))


def test_synthetic_train_test_tags():
    ds = synth_textures(2, 3, 16, make_rng(0), test_per_class=2)
    assert len(ds.subset("train")) == 6 and len(ds.subset("test")) == 4


def test_translated_texture_energy_features_match():
    """Energy features of a shifted grating are near-identical; another orientation is clearly farther."""
    g = build(ModelSpec("tcnn", 3, class_count=5, scale="desk"), make_rng(0))
    big = np.repeat((0.5 + 0.3 * grating(128, 30, 8, 0.3))[None], 3, axis=0)

    def feat(img):
        return g.forward(img[None]).values["energy"].ravel()

    ref = feat(big[:, :64, :64])
    for dy, dx in ((0, 4), (3, 5), (8, 0), (17, 29)):
        other = feat(big[:, dy : dy + 64, dx : dx + 64])
        assert ref @ other / (np.linalg.norm(ref) * np.linalg.norm(other)) > 0.99
    turned = feat(np.repeat((0.5 + 0.3 * grating(64, 120, 8, 0.3))[None], 3, axis=0))
    shifted = feat(big[:, 3:67, 5:69])
    assert np.linalg.norm(ref - turned) > 5 * np.linalg.norm(ref - shifted)


def test_synthetic_classes_distinct():
    ds = synth_textures(len(CLASS_NAMES), 2, 32, make_rng(1))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        means = [ds.images[ds.labels == c].std() for c in range(len(CLASS_NAMES))]
    assert all(m > 0 for m in means)
