"""Tests for preprocessing, patch sampling, erasing, batching, and indexing."""

import numpy as np
import pytest
from PIL import Image

from tripletad.data import (build_patch_pools, build_triplet_batch,
                            choose_scale, index_dataset, load_and_preprocess,
                            minmax_scale, preprocess, random_erase,
                            random_rescale, resize_bilinear, sample_patches,
                            scales_for)
from tripletad.errors import ConfigError, LayoutError, ShapeError
from tripletad.rng import RngStream
from tripletad.synthetic import DefectSpec, generate_synthetic_dataset


class TestPreprocess:
    def test_minmax_three_values(self):
        img = np.array([[2.0, 4.0], [6.0, 6.0]])
        out = minmax_scale(img)
        assert np.allclose(np.unique(out), [0.0, 0.5, 1.0])

    def test_constant_image_to_zeros(self):
        out = preprocess(np.full((40, 40), 9.0), size=64)
        assert np.array_equal(out, np.zeros((64, 64), dtype=np.float32))

    def test_700_to_1024(self):
        rng = np.random.default_rng(0)
        out = preprocess(rng.integers(0, 256, size=(700, 700)).astype(np.uint8))
        assert out.shape == (1024, 1024)
        assert out.min() == 0.0 and out.max() == 1.0

    def test_rgb_luma_weights(self):
        rgb = np.zeros((8, 8, 3), dtype=np.float32)
        rgb[:4, :, 0] = 1.0   # pure red half
        rgb[4:, :, 1] = 1.0   # pure green half
        out = preprocess(rgb, size=8)
        # after min-max: red (0.299) -> 0, green (0.587) -> 1
        assert np.allclose(out[:4], 0.0)
        assert np.allclose(out[4:], 1.0)

    def test_idempotent_when_already_preprocessed(self):
        rng = np.random.default_rng(1)
        img = rng.random((128, 128)).astype(np.float32)
        img = minmax_scale(img)
        again = preprocess(img, size=128)
        assert np.abs(again - img).max() <= 1e-6

    def test_resize_identity(self):
        rng = np.random.default_rng(2)
        img = rng.random((50, 50)).astype(np.float32)
        assert np.array_equal(resize_bilinear(img, 50, 50), img)

    def test_resize_preserves_constant(self):
        img = np.full((30, 20), 0.7, dtype=np.float32)
        out = resize_bilinear(img, 64, 48)
        assert np.allclose(out, 0.7, atol=1e-6)

    def test_load_png_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        arr = rng.integers(0, 256, size=(90, 90)).astype(np.uint8)
        path = tmp_path / "img.png"
        Image.fromarray(arr, mode="L").save(path)
        out = load_and_preprocess(path, size=128)
        assert out.shape == (128, 128)
        assert 0.0 <= out.min() and out.max() <= 1.0

    def test_unreadable_file_is_io_error(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"not a png at all")
        with pytest.raises(OSError):
            load_and_preprocess(path)


class TestRandomRescale:
    def test_choice_frequencies_uniform(self):
        rng = np.random.default_rng(4)
        scales = (1024, 512, 256, 128)
        counts = {s: 0 for s in scales}
        n = 10_000
        for _ in range(n):
            counts[choose_scale(rng, scales)] += 1
        for s in scales:
            assert 0.23 <= counts[s] / n <= 0.27

    def test_native_side_returned_unchanged(self):
        img = np.random.default_rng(5).random((128, 128)).astype(np.float32)
        rng = np.random.default_rng(0)
        for _ in range(8):
            out = random_rescale(img, rng, scales=(128,))
            assert out is img

    def test_all_four_sides_reachable(self):
        img = np.zeros((1024, 1024), dtype=np.float32)
        rng = np.random.default_rng(6)
        seen = set()
        for _ in range(40):
            seen.add(random_rescale(img, rng).shape[0])
        assert seen == {1024, 512, 256, 128}

    def test_scales_for_paper_sides(self):
        assert scales_for(1024) == (1024, 512, 256, 128)
        assert scales_for(256) == (256, 128)

    def test_non_square_rejected(self):
        with pytest.raises(ShapeError):
            random_rescale(np.zeros((100, 120), dtype=np.float32),
                           np.random.default_rng(0))


class TestSamplePatches:
    def test_counts_by_side(self):
        rng = np.random.default_rng(7)
        assert len(sample_patches(np.zeros((512, 512), np.float32), rng)) == 16
        assert len(sample_patches(np.zeros((1024, 1024), np.float32), rng)) == 16
        assert len(sample_patches(np.zeros((256, 256), np.float32), rng)) == 8
        assert len(sample_patches(np.zeros((128, 128), np.float32), rng)) == 8

    def test_patches_in_bounds_all_scales(self):
        rng = np.random.default_rng(8)
        for side in (128, 256, 512):
            img = np.arange(side * side, dtype=np.float32).reshape(side, side)
            for _ in range(5):
                patches = sample_patches(img, rng)
                assert patches.shape[1:] == (64, 64)
                # every patch must literally appear in the image
                for patch in patches:
                    anchor = patch[0, 0]
                    idx = int(anchor)
                    y, x = divmod(idx, side)
                    assert y + 64 <= side and x + 64 <= side
                    assert np.array_equal(img[y:y + 64, x:x + 64], patch)

    def test_too_small_rejected(self):
        with pytest.raises(ShapeError):
            sample_patches(np.zeros((32, 32), np.float32), np.random.default_rng(0))


class TestRandomErase:
    def test_erased_pixel_count_bounds(self):
        rng = np.random.default_rng(9)
        patch = np.zeros((64, 64), dtype=np.float32)  # zeros: any fill shows up
        for _ in range(500):
            out = random_erase(patch, rng)
            changed = int((out != patch).sum())
            # fill values are continuous uniform; a collision with 0.0 has
            # probability 0, so changed == rectangle area
            assert 82 <= changed <= 1024

    def test_outside_rectangle_bit_identical(self):
        rng = np.random.default_rng(10)
        patch = np.random.default_rng(1).random((64, 64)).astype(np.float32)
        out = random_erase(patch, rng)
        diff = out != patch
        ys, xs = np.where(diff)
        y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
        inside = np.zeros_like(diff)
        inside[y0:y1 + 1, x0:x1 + 1] = True
        assert not diff[~inside].any()

    def test_same_rng_state_deterministic(self):
        patch = np.random.default_rng(2).random((64, 64)).astype(np.float32)
        out1 = random_erase(patch, np.random.default_rng(77))
        out2 = random_erase(patch, np.random.default_rng(77))
        assert np.array_equal(out1, out2)

    def test_values_stay_in_unit_range(self):
        rng = np.random.default_rng(11)
        patch = np.random.default_rng(3).random((64, 64)).astype(np.float32)
        for _ in range(50):
            out = random_erase(patch, rng)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_input_not_mutated(self):
        patch = np.random.default_rng(4).random((64, 64)).astype(np.float32)
        ref = patch.copy()
        random_erase(patch, np.random.default_rng(5))
        assert np.array_equal(patch, ref)


@pytest.fixture(scope="module")
def index(tiny_root):
    return index_dataset(tiny_root, known_classes=["grating00", "grain01"])


class TestTripletBatchConstruction:

    def test_requested_length(self, index):
        batch = build_triplet_batch(index, RngStream(0), size=32, image_size=128)
        assert len(batch) == 32
        assert batch.anchors.shape == (32, 64, 64, 1)

    def test_values_in_unit_range(self, index):
        batch = build_triplet_batch(index, RngStream(1), size=16, image_size=128)
        for arr in (batch.anchors, batch.positives, batch.negatives):
            assert arr.min() >= 0.0 and arr.max() <= 1.0

    def test_negative_differs_from_some_source_patch(self, index):
        # at least 82 pixels are overwritten, so a negative can never equal
        # the fresh patch it was erased from: rebuild the same pools and
        # check every negative differs from every pool patch in >= 82 pixels
        batch = build_triplet_batch(index, RngStream(2), size=8, image_size=128)
        stream = RngStream(2)
        images = {cls: [load_and_preprocess(p, size=128)
                        for p in index.classes[cls].train_images]
                  for cls in ["grating00", "grain01"]}
        pools = build_patch_pools(images, stream)
        all_patches = np.concatenate(list(pools.values()))
        for neg in batch.negatives[..., 0]:
            diffs = np.abs(all_patches - neg).reshape(len(all_patches), -1)
            assert (diffs > 0).sum(axis=1).min() >= 82

    def test_single_class_sources(self, tiny_root):
        index = index_dataset(tiny_root, known_classes=["grating00"])
        batch = build_triplet_batch(index, RngStream(3), size=8, image_size=128)
        assert len(batch) == 8

    def test_no_known_class_rejected(self, tiny_root):
        index = index_dataset(tiny_root, known_classes=[])
        with pytest.raises(ConfigError):
            build_triplet_batch(index, RngStream(0), size=4, image_size=128)


class TestIndexDataset:
    def test_known_novel_partition(self, tiny_root):
        index = index_dataset(tiny_root, known_classes=["grating00"])
        assert index.known_classes() == ["grating00"]
        assert index.novel_classes() == ["grain01"]
        novel = index.classes["grain01"]
        assert novel.train_images == []
        assert len(novel.reserved_images) == 6

    def test_half_split_partition(self, tiny_root):
        index = index_dataset(tiny_root, known_classes=["grating00", "grain01"])
        entry = index.classes["grating00"]
        assert len(entry.train_images) == 3
        assert len(entry.reserved_images) == 3
        assert set(entry.train_images).isdisjoint(entry.reserved_images)
        union = {p.name for p in entry.train_images} | \
            {p.name for p in entry.reserved_images}
        assert union == {f"{i:03d}.png" for i in range(6)}

    def test_split_deterministic_under_seed(self, tiny_root):
        i1 = index_dataset(tiny_root, seed=5)
        i2 = index_dataset(tiny_root, seed=5)
        for cls in i1.classes:
            assert i1.classes[cls].train_images == i2.classes[cls].train_images
            assert i1.classes[cls].role == i2.classes[cls].role

    def test_default_partition_ratio(self, tmp_path):
        for i in range(15):
            d = tmp_path / "ds" / f"c{i:02d}"
            (d / "train" / "good").mkdir(parents=True)
            (d / "test" / "good").mkdir(parents=True)
            Image.fromarray(np.zeros((8, 8), np.uint8), mode="L").save(
                d / "train" / "good" / "000.png")
        index = index_dataset(tmp_path / "ds", seed=0)
        assert len(index.known_classes()) == 11
        assert len(index.novel_classes()) == 4

    def test_missing_layout_named_in_error(self, tmp_path):
        d = tmp_path / "ds" / "c0"
        (d / "train" / "good").mkdir(parents=True)
        with pytest.raises(LayoutError, match="test"):
            index_dataset(tmp_path / "ds")

    def test_missing_root_rejected(self, tmp_path):
        with pytest.raises(LayoutError):
            index_dataset(tmp_path / "nope")

    def test_unknown_class_name_rejected(self, tiny_root):
        with pytest.raises(ConfigError):
            index_dataset(tiny_root, known_classes=["bogus"])

    def test_defect_types_indexed(self, tiny_root):
        index = index_dataset(tiny_root, known_classes=["grating00"])
        entry = index.classes["grating00"]
        assert set(entry.test_defective) == {"blob", "scratch", "crack"}
        assert all(len(v) == 3 for v in entry.test_defective.values())
        assert len(entry.test_good) == 3


class TestSyntheticGenerator:
    def test_same_seed_byte_identical(self, tmp_path):
        kwargs = dict(seed=11, n_classes=2, images_per_class=2, image_size=96,
                      n_test_good=1, defect_spec=DefectSpec(images_per_type=1))
        r1 = generate_synthetic_dataset(tmp_path / "a", **kwargs)
        r2 = generate_synthetic_dataset(tmp_path / "b", **kwargs)
        files1 = sorted(p.relative_to(r1) for p in r1.rglob("*.png"))
        files2 = sorted(p.relative_to(r2) for p in r2.rglob("*.png"))
        assert files1 == files2 and files1
        for rel in files1:
            assert (r1 / rel).read_bytes() == (r2 / rel).read_bytes()

    def test_refuses_nonempty_dir(self, tmp_path):
        target = tmp_path / "ds"
        target.mkdir()
        (target / "junk.txt").write_text("x")
        with pytest.raises(ConfigError):
            generate_synthetic_dataset(target, seed=0, n_classes=1,
                                       images_per_class=1, image_size=96)
        generate_synthetic_dataset(target, seed=0, n_classes=1,
                                   images_per_class=1, image_size=96, force=True)

    def test_defect_matches_mask_exactly(self, tmp_path):
        from tripletad.synthetic import _grating, _grating_params, apply_defect
        stream = RngStream(3)
        params = _grating_params(stream.substream("p"))
        rng = stream.substream("img")
        clean = _grating(128, params, rng)
        clean_q = np.clip(np.round(clean * 255), 0, 255).astype(np.uint8)
        for defect in ("blob", "scratch", "crack"):
            defective, mask = apply_defect(clean, defect, stream.substream(defect))
            assert mask.sum() >= int(np.ceil(0.012 * 128 * 128))
            assert np.array_equal(defective[~mask], clean_q[~mask])
            assert (defective[mask] != clean_q[mask]).all()

    def test_layout_matches_indexer(self, tiny_root):
        index = index_dataset(tiny_root, known_classes=["grating00", "grain01"])
        assert sorted(index.classes) == ["grain01", "grating00"]
        for entry in index.classes.values():
            assert len(entry.train_images) + len(entry.reserved_images) == 6

    def test_ground_truth_masks_exist(self, tiny_root):
        for cls in ("grating00", "grain01"):
            for defect in ("blob", "scratch", "crack"):
                masks = sorted((tiny_root / cls / "ground_truth" / defect).glob("*_mask.png"))
                images = sorted((tiny_root / cls / "test" / defect).glob("*.png"))
                assert len(masks) == len(images) == 3

    def test_pools_cover_all_classes(self, tiny_root):
        index = index_dataset(tiny_root, known_classes=["grating00", "grain01"])
        images = {cls: [load_and_preprocess(p, size=128)
                        for p in index.classes[cls].train_images]
                  for cls in index.known_classes()}
        pools = build_patch_pools(images, RngStream(0))
        assert set(pools) == {"grating00", "grain01"}
        for pool in pools.values():
            assert pool.shape[1:] == (64, 64)
            assert len(pool) == 3 * 8  # three images, eight patches each at <512
