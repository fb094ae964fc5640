"""Evaluation toolkit tests: AUROC, ingestion, preparation, rendering."""

import json

import numpy as np
import pytest
from PIL import Image

from favae import evalkit, toy
from favae.evalkit import (
    EvalReport,
    LabeledSample,
    LayoutError,
    PrepareRecipe,
    auroc,
    export_toy_dataset,
    ingest,
    make_localization_set,
    pixel_auroc,
    prepare,
    render,
)


def brute_force_auroc(pos, neg):
    wins = ties = 0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


class TestAuroc:
    def test_known_values(self):
        assert auroc([0.8, 0.9], [0.1, 0.2]) == 1.0
        assert auroc([0.1, 0.2], [0.8, 0.9]) == 0.0
        assert auroc([1.0, 1.0], [1.0, 1.0]) == 0.5
        assert auroc([0.3, 0.5], [0.1, 0.4]) == 0.75

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            npos = int(rng.integers(1, 60))
            nneg = int(rng.integers(1, 60))
            # coarse values force plenty of ties
            pos = rng.integers(0, 8, npos) / 4.0
            neg = rng.integers(0, 8, nneg) / 4.0
            assert auroc(pos, neg) == brute_force_auroc(list(pos), list(neg))

    def test_complement_identity_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            pos = rng.integers(0, 5, 30) / 2.0
            neg = rng.integers(0, 5, 40) / 2.0
            assert auroc(pos, neg) + auroc(neg, pos) == 1.0

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError):
            auroc([], [1.0])
        with pytest.raises(ValueError):
            auroc([1.0], [])


class TestPixelAuroc:
    def test_perfect_and_inverted(self):
        rng = np.random.default_rng(0)
        masks = [rng.random((8, 8)) > 0.5 for _ in range(3)]
        maps = [m.astype(float) for m in masks]
        assert pixel_auroc(maps, masks) == 1.0
        inverted = [1.0 - m for m in maps]
        assert pixel_auroc(inverted, masks) == 0.0

    def test_random_map_near_half(self):
        rng = np.random.default_rng(2)
        maps = [rng.random((100, 100))]
        masks = [rng.random((100, 100)) > 0.5]
        assert abs(pixel_auroc(maps, masks) - 0.5) < 0.02

    def test_no_positive_pixels_rejected(self):
        with pytest.raises(ValueError, match="anomalous pixels"):
            pixel_auroc([np.ones((4, 4))], [np.zeros((4, 4), bool)])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mask shape"):
            pixel_auroc([np.ones((4, 4))], [np.ones((5, 5), bool)])


def write_png(path, value=128, size=(16, 16), mode="L"):
    arr = np.full(size, value, dtype=np.uint8)
    if mode == "RGB":
        arr = np.stack([arr] * 3, axis=2)
    Image.fromarray(arr).save(path)


class TestIngest:
    def make_mvtec(self, root):
        (root / "train" / "good").mkdir(parents=True)
        (root / "test" / "good").mkdir(parents=True)
        (root / "test" / "scratch").mkdir(parents=True)
        (root / "ground_truth" / "scratch").mkdir(parents=True)
        write_png(root / "train" / "good" / "000.png", 100)
        write_png(root / "train" / "good" / "001.png", 110)
        write_png(root / "test" / "good" / "000.png", 105)
        for i in range(2):
            write_png(root / "test" / "scratch" / f"{i:03d}.png", 90)
            write_png(root / "ground_truth" / "scratch" / f"{i:03d}_mask.png", 255)

    def test_mvtec_layout(self, tmp_path):
        self.make_mvtec(tmp_path)
        train = ingest(tmp_path, "mvtec", "train")
        assert len(train) == 2 and all(s.label == "normal" for s in train)
        test = ingest(tmp_path, "mvtec", "test")
        labels = sorted(s.label for s in test)
        assert labels == ["anomalous", "anomalous", "normal"]
        anomalous = [s for s in test if s.label == "anomalous"]
        assert all(s.mask is not None and s.mask.all() for s in anomalous)

    def test_missing_mask_names_file(self, tmp_path):
        self.make_mvtec(tmp_path)
        (tmp_path / "ground_truth" / "scratch" / "001_mask.png").unlink()
        with pytest.raises(LayoutError, match="001_mask.png"):
            ingest(tmp_path, "mvtec", "test")

    def test_layout_violation_named(self, tmp_path):
        with pytest.raises(LayoutError, match="layout violation"):
            ingest(tmp_path / "missing", "mvtec", "train")
        (tmp_path / "empty").mkdir()
        with pytest.raises(LayoutError, match="layout violation"):
            ingest(tmp_path / "empty", "mvtec", "train")

    def test_train_only_tree_has_empty_test_stream(self, tmp_path):
        (tmp_path / "train" / "good").mkdir(parents=True)
        write_png(tmp_path / "train" / "good" / "000.png")
        assert len(ingest(tmp_path, "mvtec", "train")) == 1
        assert ingest(tmp_path, "mvtec", "test") == []

    def test_flat_roundtrip_within_quantization(self, tmp_path):
        spec = toy.ToySpec(side=32)
        export_toy_dataset(spec, tmp_path, n_normal=3, n_anomaly=2, seed=0)
        samples = ingest(tmp_path, "flat")
        assert len(samples) == 5
        normals = [s for s in samples if s.label == "normal"]
        anoms = [s for s in samples if s.label == "anomalous"]
        assert len(normals) == 3 and len(anoms) == 2
        reference = toy.to_unit(toy.sample_normal(spec, 3, seed=0))
        for s, ref in zip(normals, reference):
            assert np.abs(s.image - ref).max() <= 1.0 / 255.0 + 1e-12

    def test_unknown_layout(self, tmp_path):
        with pytest.raises(ValueError, match="layout"):
            ingest(tmp_path, "zip")


class TestPrepare:
    def sample(self, side=64, channels=0):
        rng = np.random.default_rng(0)
        shape = (side, side) if channels == 0 else (side, side, channels)
        return LabeledSample(rng.random(shape), "normal")

    def test_texture_crop_deterministic(self):
        s = self.sample(256)
        recipe = PrepareRecipe("texture", resize_to=256, crop=128)
        a = prepare(s, recipe, np.random.default_rng(5))
        b = prepare(s, recipe, np.random.default_rng(5))
        assert a.shape == (128, 128)
        np.testing.assert_array_equal(a, b)

    def test_texture_default_sizes(self):
        s = self.sample(300, channels=3)
        out = prepare(s, PrepareRecipe("texture"), np.random.default_rng(0))
        assert out.shape == (128, 128, 3)

    def test_object_without_augment_is_resize_only(self):
        s = self.sample(64)
        recipe = PrepareRecipe("object", max_rotation=0.0, max_translate=0.0)
        out = prepare(s, recipe, np.random.default_rng(0))
        np.testing.assert_array_equal(out, evalkit._resize_float(s.image, 128))

    def test_object_augmented(self):
        s = self.sample(64)
        out = prepare(s, PrepareRecipe("object"), np.random.default_rng(1))
        assert out.shape == (128, 128)
        assert not np.array_equal(out, evalkit._resize_float(s.image, 128))

    def test_crop_too_large_rejected(self):
        s = self.sample(64)
        with pytest.raises(ValueError, match="crop"):
            prepare(s, PrepareRecipe("texture", resize_to=64, crop=128),
                    np.random.default_rng(0))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            PrepareRecipe("portrait")


class TestRender:
    def test_constant_map_single_color(self, tmp_path):
        out = render(np.full((8, 8), 3.0), "equalized_jet", tmp_path / "m.png")
        assert out.shape == (8, 8, 3)
        assert (out == out[0, 0]).all()

    def test_equalized_histogram_uniform(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((64, 64))
        gray = render(values, "gray16", tmp_path / "m.png")
        frac = gray / 65535.0
        counts, _ = np.histogram(frac, bins=8, range=(0, 1))
        assert counts.min() > 0.8 * values.size / 8

    def test_monotone_against_shared_population(self, tmp_path):
        rng = np.random.default_rng(1)
        a, b = rng.random((8, 8)), rng.random((8, 8))
        pop = np.concatenate([a.ravel(), b.ravel()])
        ga = render(a, "gray16", tmp_path / "a.png", population=pop).ravel()
        gb = render(b, "gray16", tmp_path / "b.png", population=pop).ravel()
        order = np.argsort(np.concatenate([a.ravel(), b.ravel()]))
        merged = np.concatenate([ga, gb])[order]
        assert (np.diff(merged.astype(np.int64)) >= 0).all()

    def test_gray16_file_depth(self, tmp_path):
        render(np.random.default_rng(0).random((8, 8)), "gray16", tmp_path / "g.png")
        img = Image.open(tmp_path / "g.png")
        assert img.mode in ("I", "I;16")

    def test_unknown_mode(self, tmp_path):
        with pytest.raises(ValueError, match="mode"):
            render(np.zeros((2, 2)), "sepia", tmp_path / "x.png")


class TestEvalReport:
    def test_histograms_and_json(self, tmp_path):
        report = EvalReport(image_auroc=0.9, pixel_auroc_value=None,
                            config={"seed": 3})
        scores = np.random.default_rng(0).standard_normal(100)
        report.add_histogram("normal", scores)
        h = report.histograms["normal"]
        assert sum(h["counts"]) == report.sample_counts["normal"] == 100
        report.to_json(tmp_path / "report.json")
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["image_auroc"] == 0.9
        assert payload["config"] == {"seed": 3}
        report.histograms_to_csv(tmp_path / "hist.csv")
        lines = (tmp_path / "hist.csv").read_text().strip().splitlines()
        assert lines[0] == "name,bin_lo,bin_hi,count"
        assert len(lines) == 1 + len(h["counts"])


class TestLocalizationSet:
    def test_patch_confined_to_mask(self):
        spec = toy.ToySpec(side=32)
        images, masks = make_localization_set(spec, 4, seed=0)
        base = toy.sample_normal(spec, 4, seed=0)
        assert images.shape == (4, 32, 32) and masks.shape == (4, 32, 32)
        for img, msk, ref in zip(images, masks, base):
            assert msk.any() and not msk.all()
            np.testing.assert_array_equal(img[~msk], ref[~msk])
            assert np.abs(img[msk] - ref[msk]).max() > 0
