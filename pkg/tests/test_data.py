import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mbdgan import autodiff as ad
from mbdgan.autodiff import ConfigurationError, Tensor
from mbdgan.data import (BACKGROUND, DatasetSpec, Prefetcher, SyntheticSpec, centroid_match, degrade, load_dataset,
                         make_refiner_pairs, mask_centroid, nearest_resize, read_annotations, shape_mask,
                         synth_generate, to_uint8, to_unit, write_png, write_synthetic)


def write_class_dirs(root, classes, per_class, side=8):
    rng = np.random.default_rng(0)
    for name in classes:
        (root / name).mkdir(parents=True)
        for i in range(per_class):
            write_png(root / name / f"{i}.png", rng.uniform(-1, 1, (3, side, side)).astype(np.float32))


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def test_two_by_two_split(tmp_path):
    write_class_dirs(tmp_path, ["a", "b"], 2)
    data = load_dataset(DatasetSpec(str(tmp_path), image_side=8, split=(0.5, 0.5)))
    assert len(data.train_y) == 2 and len(data.test_y) == 2
    assert data.class_names == ["a", "b"]
    assert data.train_x.min() >= -1 and data.train_x.max() <= 1


def test_pixel_endpoints():
    assert to_unit(np.array([255], np.uint8))[0] == 1.0
    assert to_unit(np.array([0], np.uint8))[0] == -1.0


def test_uint8_round_trip():
    v = np.arange(256, dtype=np.uint8)
    np.testing.assert_array_equal(to_uint8(to_unit(v)), v)


def test_split_is_deterministic(tmp_path):
    write_class_dirs(tmp_path, ["a", "b", "c"], 6)
    spec = DatasetSpec(str(tmp_path), image_side=8, seed=3)
    a, b = load_dataset(spec), load_dataset(spec)
    assert a.train_paths == b.train_paths and a.test_paths == b.test_paths


def test_resize_on_load(tmp_path):
    write_class_dirs(tmp_path, ["a", "b"], 2, side=12)
    assert load_dataset(DatasetSpec(str(tmp_path), image_side=8)).train_x.shape[-1] == 8


def test_unreadable_image_is_skipped(tmp_path):
    write_class_dirs(tmp_path, ["a", "b"], 2)
    (tmp_path / "a" / "broken.png").write_bytes(b"not a png")
    with pytest.warns(UserWarning, match="broken.png"):
        data = load_dataset(DatasetSpec(str(tmp_path), image_side=8))
    assert len(data.train_y) + len(data.test_y) == 4


def test_empty_class_is_an_error(tmp_path):
    write_class_dirs(tmp_path, ["a", "b"], 2)
    (tmp_path / "c").mkdir()
    with pytest.raises(ConfigurationError, match="'c'"):
        load_dataset(DatasetSpec(str(tmp_path), image_side=8))


def test_duplicate_class_names(tmp_path):
    write_class_dirs(tmp_path, ["a", "b"], 2)
    with pytest.raises(ConfigurationError):
        load_dataset(DatasetSpec(str(tmp_path), class_names=["a", "a"], image_side=8))


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


def test_count_equals_k_gives_one_per_class():
    ds = synth_generate(SyntheticSpec(), 3, seed=0)
    assert sorted(ds.labels.tolist()) == [0, 1, 2]


def test_balanced_classes():
    ds = synth_generate(SyntheticSpec(image_side=32, radius=(3, 4.5), margin=2), 30, seed=1)
    assert np.bincount(ds.labels).tolist() == [10, 10, 10]


def test_noise_free_generation_is_bit_identical():
    spec = SyntheticSpec(noise=0.0)
    a, b = synth_generate(spec, 6, seed=4), synth_generate(spec, 6, seed=4)
    assert a.images.tobytes() == b.images.tobytes()


def test_rendered_disc_centroid():
    mask = shape_mask("disc", (20.0, 30.0), 6.0, 0.0, 64)
    cx, cy = mask_centroid(mask)
    assert abs(cx - 20) <= 0.5 and abs(cy - 30) <= 0.5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_annotations_match_rendered_masks(seed):
    ds = synth_generate(SyntheticSpec(noise=0.0), 3, seed=seed)
    for img, ann in zip(ds.images, ds.annotations):
        assert ann["count"] == len(ann["centers"]) and 1 <= ann["count"] <= 3
        for (x, y), r in zip(ann["centers"], ann["radii"]):
            assert 4 <= x - r and x + r <= 63 - 4 and 4 <= y - r and y + r <= 63 - 4
        res = centroid_match(ann, img)
        assert res.count_match
        assert max(res.per_object) <= 0.5


@pytest.mark.parametrize("shape", ["disc", "triangle", "star"])
def test_polygon_centroids_near_centre(shape):
    cx, cy = mask_centroid(shape_mask(shape, (31.3, 30.7), 9.0, 0.4, 64))
    assert abs(cx - 31.3) <= 0.5 and abs(cy - 30.7) <= 0.5


def test_write_and_read_annotations(tmp_path):
    ds = synth_generate(SyntheticSpec(), 6, seed=2)
    write_synthetic(ds, tmp_path)
    anns = read_annotations(tmp_path)
    assert len(anns) == 6
    rec = json.loads((tmp_path / "annotations.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"path", "class", "centers", "count"}
    data = load_dataset(DatasetSpec(str(tmp_path), class_names=list(ds.spec.shapes), image_side=64))
    assert data.num_classes == 3


# ---------------------------------------------------------------------------
# nearest-neighbour resize and refiner pairs
# ---------------------------------------------------------------------------


def test_two_by_two_upscale():
    img = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2)
    up = nearest_resize(img, 4)
    want = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=np.float32)
    np.testing.assert_array_equal(up[0, 0], want)


def blocks_constant(img, f):
    side = img.shape[-1]
    blocks = img.reshape(*img.shape[:-2], side // f, f, side // f, f)
    return np.all(blocks == blocks[..., :1, :, :1])


@pytest.mark.parametrize("side,low", [(64, 8), (32, 8), (24, 6), (16, 4)])
def test_down_up_is_block_constant(side, low):
    img = np.random.default_rng(side).uniform(-1, 1, (2, 3, side, side)).astype(np.float32)
    assert blocks_constant(degrade(img, low), side // low)


def test_64_8_64_pipeline():
    img = np.random.default_rng(0).uniform(-1, 1, (3, 3, 64, 64)).astype(np.float32)
    low, high = make_refiner_pairs(img, 8)
    assert len(low) == len(high) == 3
    assert blocks_constant(low, 8)
    np.testing.assert_array_equal(high, img)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float32, (1, 2, 6, 6), elements=st.floats(-1, 1, width=32)), st.integers(1, 4))
def test_resize_idempotent_and_replicating(img, f):
    np.testing.assert_array_equal(nearest_resize(img, 6), img)
    up = nearest_resize(img, 6 * f)
    np.testing.assert_array_equal(up[..., ::f, ::f], img)
    assert blocks_constant(up, f)


def test_resize_tensor_matches_array_and_has_gradient():
    x = np.random.default_rng(0).uniform(-1, 1, (1, 2, 4, 4))
    np.testing.assert_array_equal(nearest_resize(Tensor(x), 8).data, nearest_resize(x, 8))
    assert ad.grad_check(lambda t: (nearest_resize(t, 2) * nearest_resize(t, 2)).sum(), x) < 1e-6


# ---------------------------------------------------------------------------
# centroid matching
# ---------------------------------------------------------------------------


def disc_image(centers, side=64, radius=6.0):
    img = np.broadcast_to(BACKGROUND[:, None, None], (3, side, side)).copy()
    for c in centers:
        img[:, shape_mask("disc", c, radius, 0, side)] = 0.8
    return img


def test_identity_translation_has_zero_displacement():
    ds = synth_generate(SyntheticSpec(noise=0.0), 3, seed=8)
    for img, ann in zip(ds.images, ds.annotations):
        found = centroid_match({"centers": [list(mask_centroid(shape_mask("disc", c, 6, 0, 64))) for c in ann["centers"]]},
                               img)
        assert found.count == ann["count"]


def test_identity_copy_exact():
    centers = [[20.0, 20.0], [44.0, 40.0]]
    res = centroid_match({"centers": centers, "count": 2}, disc_image(centers))
    assert res.displacement == pytest.approx(0.0, abs=1e-9)
    assert res.count_match


def test_shift_three_pixels():
    centers = [[20.0, 20.0], [40.0, 44.0]]
    shifted = np.roll(disc_image(centers), 3, axis=-1)
    res = centroid_match({"centers": centers, "count": 2}, shifted)
    assert res.displacement == pytest.approx(3.0, abs=1e-9)


def test_empty_foreground_is_failure():
    res = centroid_match({"centers": [[10, 10]], "count": 1}, disc_image([]))
    assert res.failure and not res.count_match and res.displacement == float("inf")


# ---------------------------------------------------------------------------
# prefetch queue
# ---------------------------------------------------------------------------


def test_prefetcher_preserves_order_and_bounds_queue():
    produced = []

    def source():
        for i in range(10):
            produced.append(i)
            yield i

    it = iter(Prefetcher(source(), depth=2))
    assert next(it) == 0
    time.sleep(0.05)
    assert len(produced) <= 4  # one consumed, two queued, one blocked in put
    assert [0, *it] == list(range(10))


def test_prefetcher_propagates_errors():
    def source():
        yield 1
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError, match="boom"):
        list(Prefetcher(source()))
