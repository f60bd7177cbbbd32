import json

import numpy as np
import pytest

from styledg.synthdata import (
    DEFAULT_DOMAIN_SPECS, DatasetManifest, DomainSpec, ManifestError,
    PreprocessConfig, SampleRecord, generate_dataset, load_manifest,
    preprocess, render_sample, save_manifest, stats_report,
)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    manifest = generate_dataset(root, per_domain_count=60, num_classes=5,
                                image_size=96, seed=7)
    return root, manifest


class TestGenerate:
    def test_counts_and_files(self, small_dataset):
        root, manifest = small_dataset
        assert len(manifest) == 180
        for rec in manifest.records[:5]:
            assert (root / rec.path).exists()

    def test_label_density_matches_binomial(self, tmp_path):
        # presence probability 0.4; 2000 samples keep each class within +-0.03
        labels = []
        for idx in range(2000):
            _, lab = render_sample(123, idx, 5, 32, DEFAULT_DOMAIN_SPECS[0])
            labels.append(lab)
        density = np.array(labels).mean(axis=0)
        assert np.all(np.abs(density - 0.4) < 0.03)

    def test_zero_style_amplitudes_make_domains_identical(self):
        flat = dict(gamma_range=(1.0, 1.0), contrast_range=(1.0, 1.0),
                    brightness_offset_range=(0.0, 0.0),
                    lowfreq_field_amplitude_range=(0.0, 0.0),
                    noise_std_range=(0.0, 0.0))
        a, la = render_sample(5, 3, 5, 48, DomainSpec(0, **flat))
        b, lb = render_sample(5, 3, 5, 48, DomainSpec(1, **flat))
        assert np.array_equal(a, b) and la == lb

    def test_style_changes_pixels_not_labels(self):
        img0, lab0 = render_sample(9, 11, 5, 48, DEFAULT_DOMAIN_SPECS[0])
        img2, lab2 = render_sample(9, 11, 5, 48, DEFAULT_DOMAIN_SPECS[2])
        assert lab0 == lab2
        assert not np.array_equal(img0, img2)

    def test_deterministic_regeneration(self):
        a, _ = render_sample(4, 2, 5, 48, DEFAULT_DOMAIN_SPECS[1])
        b, _ = render_sample(4, 2, 5, 48, DEFAULT_DOMAIN_SPECS[1])
        assert np.array_equal(a, b)

    def test_meta_carries_corpus_stats(self, small_dataset):
        _, manifest = small_dataset
        assert 0 < manifest.meta["pixel_mean"] < 255
        assert manifest.meta["pixel_std"] > 0
        assert manifest.meta["num_classes"] == 5

    def test_domain_spec_validation(self):
        with pytest.raises(ValueError):
            DomainSpec(0, gamma_range=(1.2, 1.0))
        with pytest.raises(ValueError):
            DomainSpec(0, gamma_range=(0.0, 1.0))


class TestManifestIO:
    def test_roundtrip(self, small_dataset, tmp_path):
        root, manifest = small_dataset
        path = root / "copy.jsonl"
        save_manifest(manifest, path)
        loaded = load_manifest(path)
        assert len(loaded) == len(manifest)
        assert loaded.records[0] == manifest.records[0]
        assert loaded.meta["pixel_mean"] == manifest.meta["pixel_mean"]

    def test_malformed_line_reports_lineno(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"path": "a.png", "labels": [1], "domain": 0, "seed": 0}\n{oops\n')
        with pytest.raises(ManifestError, match=":2:"):
            load_manifest(p, check_images=False)

    def test_wrong_fields(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"path": "a.png", "labels": [1], "domain": 0}\n')
        with pytest.raises(ManifestError, match="fields"):
            load_manifest(p, check_images=False)

    def test_inconsistent_label_length(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"path": "a.png", "labels": [1, 0], "domain": 0, "seed": 0}\n'
                     '{"path": "b.png", "labels": [1], "domain": 0, "seed": 1}\n')
        with pytest.raises(ManifestError, match="length"):
            load_manifest(p, check_images=False)

    def test_missing_image_reports_path(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"path": "nope.png", "labels": [1], "domain": 0, "seed": 0}\n')
        with pytest.raises(ManifestError, match="nope.png"):
            load_manifest(p, check_images=True)


class TestPreprocess:
    CFG = PreprocessConfig(resize_to=72, crop_to=64, hflip_prob=0.5,
                           normalize_mean=100.0, normalize_std=40.0)

    def test_eval_deterministic(self, small_dataset):
        root, manifest = small_dataset
        path = root / manifest.records[0].path
        raw1, norm1 = preprocess(path, self.CFG, "eval")
        raw2, norm2 = preprocess(path, self.CFG, "eval")
        assert np.array_equal(raw1.data, raw2.data)
        assert np.array_equal(norm1.data, norm2.data)

    def test_center_crop_offset(self):
        arr = np.zeros((72, 72))
        arr[4, 4] = 255.0  # top-left pixel of the centered 64x64 window
        raw, _ = preprocess(arr, self.CFG, "eval")
        assert raw.data[0, 0, 0] == 255.0
        assert raw.shape == (1, 64, 64)

    def test_no_flip_when_prob_zero(self):
        cfg = PreprocessConfig(resize_to=72, crop_to=72, hflip_prob=0.0,
                               normalize_mean=0.0, normalize_std=1.0)
        arr = np.arange(72 * 72, dtype=float).reshape(72, 72)
        rng = np.random.default_rng(0)
        for _ in range(5):
            raw, _ = preprocess(arr, cfg, "train", rng)
            assert np.array_equal(raw.data[0], arr)

    def test_normalization_contract(self):
        arr = np.full((72, 72), 180.0)
        raw, norm = preprocess(arr, self.CFG, "eval")
        assert np.allclose(raw.data, 180.0)
        assert np.allclose(norm.data, (180.0 - 100.0) / 40.0)

    def test_unresolved_normalization_rejected(self):
        with pytest.raises(ValueError):
            preprocess(np.zeros((72, 72)), PreprocessConfig(), "eval")

    def test_undecodable_file(self, tmp_path):
        bad = tmp_path / "junk.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(ValueError, match="cannot decode"):
            preprocess(bad, self.CFG, "eval")

    def test_crop_larger_than_resize_rejected(self):
        with pytest.raises(ValueError):
            PreprocessConfig(resize_to=64, crop_to=72)


class TestStatsReport:
    def test_constant_image_stats(self, tmp_path):
        from PIL import Image

        img_dir = tmp_path / "images"
        img_dir.mkdir()
        Image.fromarray(np.full((32, 32), 77, dtype=np.uint8), mode="L").save(img_dir / "c.png")
        manifest = DatasetManifest(
            records=[SampleRecord(path="images/c.png", labels=[0], domain=0, seed=0)],
            root=tmp_path)
        summary = stats_report(manifest)
        info = summary["per_domain"]["0"]
        assert info["centroid_mean"] == pytest.approx(77.0)
        assert info["centroid_std"] == pytest.approx(0.0)

    def test_identical_domains_have_near_zero_distance(self, tmp_path):
        flat = dict(gamma_range=(1.0, 1.0), contrast_range=(1.0, 1.0),
                    brightness_offset_range=(0.0, 0.0),
                    lowfreq_field_amplitude_range=(0.0, 0.0),
                    noise_std_range=(0.0, 0.0))
        specs = (DomainSpec(0, **flat), DomainSpec(1, **flat))
        manifest = generate_dataset(tmp_path, per_domain_count=40, num_classes=5,
                                    image_size=48, domain_specs=specs, seed=3)
        summary = stats_report(manifest)
        dist = summary["pairwise_centroid_distance"]["0-1"]
        assert dist < 0.5 * summary["mean_within_domain_spread"]

    def test_default_corpus_separates(self, small_dataset):
        root, manifest = small_dataset
        summary = stats_report(manifest, csv_path=root / "stats.csv",
                               json_path=root / "stats.json")
        min_dist = min(summary["pairwise_centroid_distance"].values())
        assert min_dist >= 3.0 * summary["mean_within_domain_spread"]
        assert summary["nearest_centroid_accuracy"] >= 0.9
        assert (root / "stats.csv").exists()
        assert json.loads((root / "stats.json").read_text())["nearest_centroid_accuracy"] >= 0.9

    def test_csv_layout(self, small_dataset, tmp_path):
        _, manifest = small_dataset
        csv = tmp_path / "s.csv"
        stats_report(manifest, csv_path=csv)
        lines = csv.read_text().strip().splitlines()
        assert lines[0] == "path,domain,mean,std"
        assert len(lines) == len(manifest) + 1
