import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from roicam.data import (
    AnnotatedSample,
    AnnotationType,
    DatasetSplit,
    PhantomConfig,
    annotated_count,
    degrade_annotation,
    degrade_dataset,
    find_layer_band,
    generate_phantom_dataset,
    load_dataset,
    make_mixed_annotation,
    preprocess_crop_layers,
    preprocess_sample,
    split_samples,
    write_dataset,
    write_image,
    write_mask,
)

from oracles import flood_components

SMALL = PhantomConfig(image_size=48, blob_axis_range=(2.0, 5.0))


def make_samples(n, n_diseased, size=8):
    out = []
    for i in range(n):
        label = int(i < n_diseased)
        mask = np.zeros((size, size), np.uint8)
        if label:
            mask[2:4, 2:5] = 1
        out.append(AnnotatedSample(np.full((size, size), i / n, np.float32), label, mask, "accurate", f"s{i}"))
    return out


# -- sample invariants -------------------------------------------------------


def test_sample_invariants():
    img = np.zeros((4, 4), np.float32)
    with pytest.raises(ValueError, match="shape"):
        AnnotatedSample(img, 1, np.zeros((3, 4), np.uint8), "accurate", "a")
    with pytest.raises(ValueError, match="normal"):
        AnnotatedSample(img, 0, np.ones((4, 4), np.uint8), "accurate", "b")
    with pytest.raises(ValueError):
        AnnotatedSample(img, 1, None, "accurate", "c")
    with pytest.raises(ValueError):
        AnnotatedSample(img, 1, np.zeros((4, 4), np.uint8), "none", "d")
    s = AnnotatedSample(img, 1, np.zeros((4, 4), np.uint8), "bbox", "e")
    assert s.annotation_type is AnnotationType.BBOX
    assert s.without_mask().annotation_type is AnnotationType.NONE


def test_split_disjointness_enforced():
    s = make_samples(2, 1)
    with pytest.raises(ValueError, match="disjoint"):
        DatasetSplit([s[0]], [s[0]], [s[1]])


def test_split_samples_default_ratio():
    split = split_samples(make_samples(100, 50), seed=3)
    assert (len(split.train), len(split.validation), len(split.test)) == (60, 25, 15)


# -- preprocessing -----------------------------------------------------------


def test_layer_band_bounds():
    img = np.zeros((128, 64), np.float32)
    img[40:81] = 0.8
    img[60:65] = 0.1  # a dark layer inside the band is kept
    row_sums = img.sum(axis=1)
    passing = np.flatnonzero(row_sums > 0.2 * row_sums.max())
    assert (passing[0], passing[-1]) == (40, 80)
    assert find_layer_band(img, 0.2) == (40, 81)
    out = preprocess_crop_layers(img, 0.2)
    np.testing.assert_array_equal(out, img[40:81])


def test_uniform_image_unchanged():
    img = np.full((20, 30), 0.4, np.float32)
    np.testing.assert_array_equal(preprocess_crop_layers(img, 0.2), img)


def test_empty_image_error():
    with pytest.raises(ValueError, match="empty image"):
        preprocess_crop_layers(np.zeros((10, 10)), 0.2)


def test_threshold_range():
    with pytest.raises(ValueError):
        preprocess_crop_layers(np.ones((4, 4)), 1.0)


def test_crop_mask_alongside_and_resize():
    img = np.zeros((64, 48), np.float32)
    img[10:40] = 0.7
    mask = np.zeros_like(img, dtype=np.uint8)
    mask[20:25, 5:9] = 1
    band, band_mask = preprocess_crop_layers(img, 0.2, mask=mask)
    np.testing.assert_array_equal(band_mask, mask[10:40])
    out, out_mask = preprocess_crop_layers(img, 0.2, output_size=24, mask=mask)
    assert out.shape == out_mask.shape == (24, 24)
    assert set(np.unique(out_mask)) <= {0, 1}


def test_preprocess_sample_keeps_invariants():
    s = make_samples(2, 2, size=16)[1]
    img = s.image.copy()
    img[:3] = 0
    s2 = preprocess_sample(AnnotatedSample(img, 1, s.mask, "accurate", "x"), 0.2, output_size=12)
    assert s2.image.shape == s2.mask.shape == (12, 12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (12, 10), elements=st.floats(0, 1, width=32)))
def test_crop_idempotent(img):
    if not img.sum(axis=1).max() > 0:
        return
    once = preprocess_crop_layers(img, 0.2)
    twice = preprocess_crop_layers(once, 0.2)
    np.testing.assert_array_equal(once, twice)


# -- mixing ------------------------------------------------------------------


@pytest.mark.parametrize("P,R,Q", [(100, 4, 25), (90, 1, 90), (9873, 3, 3291), (10, math.inf, 0)])
def test_annotated_count(P, R, Q):
    assert annotated_count(P, R) == Q


def test_mixed_annotation_counts_and_labels():
    train = make_samples(100, 40)
    mixed = make_mixed_annotation(train, 4, seed=7)
    assert (mixed.P, mixed.Q) == (100, 25)
    assert mixed.n_annotated == 25
    assert [s.label for s in mixed.samples] == [s.label for s in train]
    for a, b in zip(train, mixed.samples):
        assert a.image is b.image
        assert b.annotated == (b.annotation_type is not AnnotationType.NONE)
    # stratified: 40% of the annotated samples are diseased
    assert sum(s.annotated and s.label for s in mixed.samples) == 10


def test_mixed_identity_and_baseline():
    train = make_samples(90, 45)
    full = make_mixed_annotation(train, 1, seed=0)
    assert full.Q == 90 and all(s.annotated for s in full.samples)
    base = make_mixed_annotation(train, math.inf, seed=0)
    assert base.Q == 0 and not any(s.annotated for s in base.samples)


def test_mixed_determinism_and_seed_dependence():
    train = make_samples(60, 30)
    ids = lambda m: [s.sample_id for s in m.samples if s.annotated]
    assert ids(make_mixed_annotation(train, 3, 11)) == ids(make_mixed_annotation(train, 3, 11))
    assert ids(make_mixed_annotation(train, 3, 11)) != ids(make_mixed_annotation(train, 3, 12))


def test_mixed_reproduces_table1_train_counts():
    # 5598 normal + 4275 DME train images; at 1:3 the with-segmentation counts are 1866 and 1425
    tiny = np.zeros((1, 1), np.float32)
    train = [
        AnnotatedSample(tiny, int(i >= 5598), np.zeros((1, 1), np.uint8), "accurate", str(i)) for i in range(9873)
    ]
    mixed = make_mixed_annotation(train, 3, seed=0)
    assert mixed.Q == 3291
    normal = sum(s.annotated and s.label == 0 for s in mixed.samples)
    assert (normal, mixed.Q - normal) == (1866, 1425)


def test_mixed_errors():
    with pytest.raises(ValueError):
        make_mixed_annotation([], 2, 0)
    unannotated = [s.without_mask() for s in make_samples(4, 2)]
    with pytest.raises(ValueError, match="never invented"):
        make_mixed_annotation(unannotated, 2, 0)


# -- degradation -------------------------------------------------------------


def test_bbox_of_rectangle_is_identity():
    m = np.zeros((10, 10), np.uint8)
    m[2:5, 3:8] = 1
    np.testing.assert_array_equal(degrade_annotation(m, "bbox"), m)


def test_bbox_of_two_l_shapes():
    m = np.zeros((16, 16), np.uint8)
    m[1:6, 1] = 1
    m[5, 1:4] = 1
    m[9:14, 12] = 1
    m[13, 9:13] = 1
    expected = np.zeros_like(m)
    for t, l, b, r in flood_components(m):
        expected[t:b, l:r] = 1
    np.testing.assert_array_equal(degrade_annotation(m, "bbox"), expected)
    assert flood_components(m) == [(1, 1, 6, 4), (9, 9, 14, 13)]


def test_whole_image_and_empty_masks():
    m = np.zeros((7, 9), np.uint8)
    np.testing.assert_array_equal(degrade_annotation(m, "whole_image"), np.ones_like(m))
    assert not degrade_annotation(m, "bbox").any()
    assert not degrade_annotation(m, "random_patch").any()


def test_random_patch_count_area_and_seed():
    m = np.zeros((48, 48), np.uint8)
    m[5:12, 5:10] = 1
    m[30:33, 20:31] = 1
    m[40, 40] = 1
    out = degrade_annotation(m, "random_patch", seed=5)
    assert len(flood_components(out)) == 3
    assert abs(int(out.sum()) - int(m.sum())) <= 1
    np.testing.assert_array_equal(out, degrade_annotation(m, "random_patch", seed=5))
    assert not np.array_equal(out, degrade_annotation(m, "random_patch", seed=6))


masks = arrays(np.uint8, (12, 12), elements=st.integers(0, 1))


@settings(max_examples=100, deadline=None)
@given(masks, st.sampled_from(["accurate", "bbox", "random_patch", "whole_image"]), st.integers(0, 100))
def test_degrade_properties(m, mode, seed):
    out = degrade_annotation(m, mode, seed)
    assert out.shape == m.shape
    assert set(np.unique(out)) <= {0, 1}
    if mode == "bbox":
        assert np.all(out >= m)
        assert out.sum() >= m.sum()
    if mode == "whole_image":
        assert out.sum() == m.size
    if mode == "accurate":
        np.testing.assert_array_equal(out, m)


def test_degrade_dataset_leaves_normals_empty():
    mixed = make_mixed_annotation(make_samples(10, 5, size=12), 1, 0)
    whole = degrade_dataset(mixed, "whole_image")
    for s in whole.samples:
        assert s.annotation_type is AnnotationType.WHOLE_IMAGE
        assert s.mask.all() if s.label else not s.mask.any()


# -- phantoms ----------------------------------------------------------------


def test_phantom_determinism():
    a = generate_phantom_dataset(SMALL, {"train": 12, "validation": 4, "test": 4}, seed=3)
    b = generate_phantom_dataset(SMALL, {"train": 12, "validation": 4, "test": 4}, seed=3)
    for pa, pb in zip(a.parts().values(), b.parts().values()):
        for x, y in zip(pa, pb):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.mask.tobytes() == y.mask.tobytes()
            assert (x.label, x.sample_id) == (y.label, y.sample_id)
    c = generate_phantom_dataset(SMALL, {"train": 12, "validation": 4, "test": 4}, seed=4)
    assert a.train[0].image.tobytes() != c.train[0].image.tobytes()


def test_phantom_class_balance():
    split = generate_phantom_dataset(SMALL, {"train": 600, "validation": 0, "test": 0}, seed=0)
    assert abs(sum(s.label for s in split.train) - 300) <= 1


def test_phantom_masks_inside_band():
    split = generate_phantom_dataset(SMALL, {"train": 40, "validation": 10, "test": 10}, seed=1)
    for s in split.train + split.validation + split.test:
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        if s.label == 0:
            assert not s.mask.any()
            continue
        top, bottom = s.meta["band"]
        rows = np.flatnonzero(s.mask.any(axis=1))
        assert rows.size and rows[0] >= top and rows[-1] < bottom
        lo, hi = SMALL.blob_count_range
        assert lo <= len(s.meta["blobs"]) <= hi
        for cy, cx, a, b, _ in s.meta["blobs"]:
            assert top <= cy - max(a, b) and cy + max(a, b) <= bottom


def test_phantom_config_validation(tmp_path):
    with pytest.raises(ValueError, match="do not fit"):
        PhantomConfig(image_size=32, blob_axis_range=(4, 20))
    with pytest.raises(ValueError):
        PhantomConfig(class_balance=1.0)
    with pytest.raises(ValueError, match="thickening"):
        PhantomConfig(thickening=-0.1)
    with pytest.raises(ValueError, match="does not fit"):
        PhantomConfig(thickening=1.0)
    with pytest.raises(ValueError, match="lesion_contrast_range"):
        PhantomConfig(lesion_contrast_range=(0.6, 0.2))
    with pytest.raises(ValueError, match="blob_aspect_range"):
        PhantomConfig(blob_aspect_range=(0.5, 2.0))
    cfg = PhantomConfig(image_size=64, blob_axis_range=(4, 9), lesion_contrast_range=[0.2, 0.4])
    cfg.save(tmp_path / "p.json")
    assert PhantomConfig.load(tmp_path / "p.json") == cfg


def test_phantom_thickening_separates_band_heights():
    cfg = PhantomConfig(SMALL.image_size, blob_axis_range=SMALL.blob_axis_range, thickening=0.3)
    split = generate_phantom_dataset(cfg, {"train": 60, "validation": 0, "test": 0}, seed=2)
    heights = {0: [], 1: []}
    for s in split.train:
        top, bottom = s.meta["band"]
        heights[s.label].append(bottom - top)
    assert max(heights[0]) <= cfg.max_band_height
    assert min(heights[1]) >= round(cfg.min_band_height * 1.3)


def test_phantom_lesion_contrast():
    cfg = PhantomConfig(SMALL.image_size, blob_axis_range=SMALL.blob_axis_range, speckle_sigma=0.0,
                        lesion_contrast_range=(0.5, 0.5))
    split = generate_phantom_dataset(cfg, {"train": 20, "validation": 0, "test": 0}, seed=0)
    sick = [s for s in split.train if s.label == 1]
    assert sick
    for s in sick:
        inside = s.image[s.mask > 0]
        top, bottom = s.meta["band"]
        band = s.image[top:bottom][s.mask[top:bottom] == 0]
        assert inside.max() <= 0.5 * 0.9 + 1e-6
        assert band.max() >= 0.45


@pytest.mark.parametrize("aspect", [None, (3.0, 3.0)])
def test_phantom_blob_aspect(aspect):
    cfg = PhantomConfig(SMALL.image_size, blob_axis_range=(4.0, 5.0), blob_aspect_range=aspect)
    split = generate_phantom_dataset(cfg, {"train": 20, "validation": 0, "test": 0}, seed=1)
    blobs = [b for s in split.train for b in s.meta["blobs"]]
    assert blobs
    for _, _, a, b, _ in blobs:
        if aspect is None:
            assert 4.0 <= min(a, b) and max(a, b) <= 5.0
        else:
            assert 4.0 <= a <= 5.0 and b == pytest.approx(a / 3.0)


# -- on-disk datasets --------------------------------------------------------


def _write_manifest(path, rows):
    path.write_text("sample_id,split,label,image_path,mask_path\n" + "".join(",".join(r) + "\n" for r in rows))


def test_load_dataset(tmp_path):
    img = np.linspace(0, 1, 64, dtype=np.float32).reshape(8, 8)
    mask = np.zeros((8, 8), np.uint8)
    mask[2:4, 2:4] = 1
    for i in range(4):
        write_image(tmp_path / f"i{i}.png", img)
    write_mask(tmp_path / "m0.png", mask)
    write_mask(tmp_path / "m1.png", np.zeros_like(mask))
    _write_manifest(
        tmp_path / "manifest.csv",
        [
            ("a", "train", "1", "i0.png", "m0.png"),
            ("b", "train", "normal", "i1.png", "m1.png"),
            ("c", "validation", "diseased", "i2.png", ""),
            ("d", "test", "0", "i3.png", ""),
        ],
    )
    split = load_dataset(tmp_path, tmp_path / "manifest.csv")
    everything = split.train + split.validation + split.test
    assert sum(s.annotated for s in everything) == 2
    assert [s.label for s in split.train] == [1, 0]
    np.testing.assert_allclose(split.train[0].image, img, atol=1 / 255)
    np.testing.assert_array_equal(split.train[0].mask, mask)
    assert split.validation[0].annotation_type is AnnotationType.NONE


def test_load_dataset_16bit(tmp_path):
    from PIL import Image

    arr = (np.arange(16, dtype=np.uint16).reshape(4, 4) * 4000).astype(np.uint16)
    Image.fromarray(arr).save(tmp_path / "x.png")
    _write_manifest(tmp_path / "m.csv", [("x", "train", "0", "x.png", "")])
    img = load_dataset(tmp_path, tmp_path / "m.csv").train[0].image
    np.testing.assert_allclose(img, arr / 65535.0, atol=1e-6)


def test_load_dataset_errors(tmp_path):
    write_image(tmp_path / "i.png", np.zeros((8, 8)))
    write_mask(tmp_path / "bad.png", np.zeros((6, 8)))
    _write_manifest(tmp_path / "m.csv", [("s42", "train", "1", "i.png", "bad.png")])
    with pytest.raises(ValueError, match="s42"):
        load_dataset(tmp_path, tmp_path / "m.csv")
    _write_manifest(tmp_path / "m.csv", [("s1", "train", "2", "i.png", "")])
    with pytest.raises(ValueError, match="unknown label"):
        load_dataset(tmp_path, tmp_path / "m.csv")


def test_write_then_load_round_trip(tmp_path):
    split = generate_phantom_dataset(SMALL, {"train": 6, "validation": 2, "test": 2}, seed=0)
    manifest = write_dataset(split, tmp_path)
    back = load_dataset(tmp_path, manifest)
    assert [s.sample_id for s in back.train] == [s.sample_id for s in split.train]
    for a, b in zip(split.train, back.train):
        np.testing.assert_allclose(a.image, b.image, atol=0.5 / 255 + 1e-7)
        np.testing.assert_array_equal(a.mask, b.mask)
