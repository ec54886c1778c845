import numpy as np
import pytest

from anatoseg.synthdata import (
    AUG_OPS, GeneratorConfig, ImagePool, SampleRecord, assign_splits, augment, class_masks, epoch_batches,
    generate_dataset, load_manifest, pool_push, read_image, read_mask, sample_scene, view_grid,
)
from anatoseg.taxonomy import infer_matrix


def rec(class_id, k=0):
    return SampleRecord(f"i{k}.png", f"m{k}.png", class_id, 0, "train", k)


def scene_masks(seed, canvas=128):
    spec = sample_scene(canvas, np.random.default_rng(seed))
    gx, gy = np.meshgrid(np.arange(canvas) + 0.5, np.arange(canvas) + 0.5)
    return class_masks(spec, gx, gy)


class TestSceneOracle:
    @pytest.mark.parametrize("seed", range(6))
    def test_masks_satisfy_matrix(self, kidney, seed):
        m = infer_matrix(kidney)
        masks = [scene_masks(seed)[name] for name in kidney.names]
        for i in range(kidney.n):
            for j in range(kidney.n):
                if i == j:
                    continue
                if m[i, j] == 1:
                    assert not np.any(masks[i] & ~masks[j]), (kidney.names[i], kidney.names[j])
                elif m[i, j] == 2:
                    assert not np.any(masks[i] & masks[j]), (kidney.names[i], kidney.names[j])

    def test_every_class_present(self, kidney):
        masks = scene_masks(0, canvas=256)
        for name in kidney.names:
            assert masks[name].any(), name

    def test_view_extent_halves_per_scale(self):
        spans = []
        for k in range(4):
            x, _ = view_grid(256, 128, k)
            spans.append(x.max() - x.min())
        for a, b in zip(spans, spans[1:]):
            assert a / b == pytest.approx(2.0, rel=0.02)


class TestDataset:
    def test_split_arithmetic(self):
        splits = assign_splits(50, 0)
        assert [splits.count(s) for s in ("train", "val", "test")] == [30, 5, 15]

    def test_records(self, tiny_data, kidney):
        records = load_manifest(tiny_data)
        assert len(records) == 80
        per_scene = {}
        for r in records:
            per_scene.setdefault(r.scene, set()).add(r.split)
            assert r.scale_id == kidney.classes[r.class_id].scale_id
        assert all(len(s) == 1 for s in per_scene.values())

    def test_image_and_mask_format(self, tiny_data):
        r = load_manifest(tiny_data)[0]
        img, msk = read_image(tiny_data / r.image), read_mask(tiny_data / r.mask)
        assert img.shape == (3, 32, 32) and img.dtype == np.float32
        assert set(np.unique(msk)) <= {0.0, 1.0}

    def test_ground_truth_oracle(self, tiny_data, kidney):
        m = infer_matrix(kidney)
        for scene_dir in sorted((tiny_data / "gt").iterdir()):
            masks = {c: read_mask(scene_dir / f"{c}.png") > 0 for c in kidney.names}
            for i, a in enumerate(kidney.names):
                for j, b in enumerate(kidney.names):
                    if i != j and m[i, j] == 1:
                        assert not np.any(masks[a] & ~masks[b])
                    if i != j and m[i, j] == 2:
                        assert not np.any(masks[a] & masks[b])

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = GeneratorConfig(canvas=64, size=32, scenes=2, seed=11)
        generate_dataset(tmp_path / "a", cfg)
        generate_dataset(tmp_path / "b", cfg)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f

    def test_partial_counts(self, tmp_path, kidney):
        counts = {name: 2 for name in kidney.names}
        counts["tuft"] = 3
        records = generate_dataset(tmp_path, GeneratorConfig(canvas=64, size=32, seed=1), counts=counts)
        assert sum(r.class_id == kidney.names.index("tuft") for r in records) == 3
        assert len(records) == 17

    @pytest.mark.parametrize("counts", [{"tuft": 0}, {"nephron": 3}])
    def test_invalid_counts(self, tmp_path, counts):
        with pytest.raises(ValueError):
            generate_dataset(tmp_path, GeneratorConfig(canvas=64, size=32), counts=counts)

    def test_small_canvas_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(tmp_path, GeneratorConfig(canvas=32, size=16))


class TestAugment:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.img = rng.uniform(size=(3, 16, 16)).astype(np.float32)
        self.msk = (rng.uniform(size=(16, 16)) < 0.3).astype(np.float32)

    def test_zero_probability_is_identity(self):
        img, msk = augment(self.img, self.msk, 0.0, 5)
        np.testing.assert_array_equal(img, self.img)
        np.testing.assert_array_equal(msk, self.msk)

    @pytest.mark.parametrize("op", ["hflip", "vflip"])
    def test_flip_is_involution(self, op):
        once = augment(self.img, self.msk, 1.0, 3, ops=(op,))
        twice = augment(*once, 1.0, 3, ops=(op,))
        np.testing.assert_array_equal(twice[0], self.img)
        np.testing.assert_array_equal(twice[1], self.msk)

    def test_geometry_moves_mask_with_image(self):
        img, msk = augment(self.img, self.msk, 1.0, 0, ops=("rot90",))
        np.testing.assert_array_equal(msk, np.rot90(self.msk))
        np.testing.assert_array_equal(img[0], np.rot90(self.img[0]))

    @pytest.mark.parametrize("seed", range(10))
    def test_mask_stays_binary(self, seed):
        _, msk = augment(self.img, self.msk, 0.5, seed, ops=AUG_OPS)
        assert set(np.unique(msk)) <= {0.0, 1.0}

    def test_image_range(self):
        img, _ = augment(self.img, self.msk, 1.0, 1)
        assert img.min() >= 0 and img.max() <= 1

    def test_bad_probability(self):
        with pytest.raises(ValueError):
            augment(self.img, self.msk, 1.5, 0)


class TestImagePool:
    def test_fourth_push_emits(self):
        pool = ImagePool(2)
        assert [pool_push(pool, rec(2, k)) for k in range(3)] == [None] * 3
        batch = pool_push(pool, rec(2, 3))
        assert [r.scene for r in batch] == [0, 1, 2, 3] and len(pool) == 0

    def test_nine_pushes(self):
        pool = ImagePool(0)
        out = [pool_push(pool, rec(0, k)) for k in range(9)]
        assert sum(b is not None for b in out) == 2 and len(pool) == 1

    def test_class_mismatch(self):
        with pytest.raises(ValueError):
            ImagePool(1).push(rec(0))

    def test_capacity_never_exceeded(self):
        pool = ImagePool(0, capacity=8, batch_size=4)
        pool.buffer.extend(rec(0, k) for k in range(8))
        forced = pool.push(rec(0, 8))
        assert len(forced) == 4 and len(pool) <= 8

    def test_epoch_batches_cover_once(self):
        records = [rec(k % 3, k) for k in range(22)]
        batches = epoch_batches(records, 3, seed=0, epoch=0)
        seen = [r.scene for b in batches for r in b]
        assert sorted(seen) == list(range(22))
        assert all(len({r.class_id for r in b}) == 1 for b in batches)
        assert epoch_batches(records, 3, seed=0, epoch=0) == batches
        assert epoch_batches(records, 3, seed=0, epoch=1) != batches
