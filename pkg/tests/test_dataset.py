import json

import numpy as np
import pytest

from mirnet import dataset
from mirnet.dataset import (DatasetManifest, DuplicateIdError, GeneratorConfig, GeneratorError, ImageFormatError,
                            ManifestError, MissingImageError, PrevalenceMismatchError, SampleRecord,
                            check_feasible, compute_prevalence, generate, load_manifest, load_split_arrays,
                            prevalence_band, read_ppm, sample_labels, separability_auc, write_ppm)
from mirnet.losses import ConstraintKind, ConstraintRule


def test_single_label_prevalence_concentrates(rng):
    cfg = GeneratorConfig(num_labels=1, prevalence=[0.5], seed=3)
    Y = sample_labels(cfg, 1000, rng)
    assert 0.4 <= Y.mean() <= 0.6


def test_mutual_exclusion_never_violated(rng):
    rule = ConstraintRule(ConstraintKind.MUTUAL_EXCLUSION, 0, 1)
    cfg = GeneratorConfig(num_labels=3, prevalence=[0.4, 0.4, 0.3], rules=[rule])
    Y = sample_labels(cfg, 2000, rng)
    assert int(((Y[:, 0] == 1) & (Y[:, 1] == 1)).sum()) == 0


def test_co_appearance_and_implication_hold(rng):
    rules = [ConstraintRule(ConstraintKind.CO_APPEARANCE, 0, 1), ConstraintRule(ConstraintKind.IMPLICATION, 2, 3)]
    cfg = GeneratorConfig(num_labels=4, prevalence=[0.3, 0.3, 0.2, 0.4], rules=rules)
    Y = sample_labels(cfg, 2000, rng)
    for rule in rules:
        assert not rule.violations(Y).any()


def test_rare_label_prevalence_realizable(rng):
    cfg = GeneratorConfig(num_labels=2, prevalence=[0.3, 0.02])
    Y = sample_labels(cfg, 20000, rng)
    assert Y[:, 1].mean() == pytest.approx(0.02, rel=0.2)


def test_infeasible_mutual_exclusion_rejected():
    rule = ConstraintRule(ConstraintKind.MUTUAL_EXCLUSION, 0, 1)
    cfg = GeneratorConfig(num_labels=2, prevalence=[0.9, 0.9], rules=[rule])
    with pytest.raises(GeneratorError, match="exceed 1"):
        check_feasible(cfg)


def test_infeasible_implication_rejected():
    rule = ConstraintRule(ConstraintKind.IMPLICATION, 0, 1)
    cfg = GeneratorConfig(num_labels=2, prevalence=[0.5, 0.2], rules=[rule])
    with pytest.raises(GeneratorError):
        check_feasible(cfg)


def test_too_few_labeled_samples_rejected(tiny_generator, tmp_path):
    with pytest.raises(GeneratorError, match="10\\*K"):
        generate(tiny_generator, n_labeled=39, n_unlabeled=0, out_dir=tmp_path, show_progress=False)


def test_unreachable_prevalence_band_rejected(tmp_path):
    # 10 samples: 0 positives is 100% off a 0.02 target, 1 positive is 400% off
    cfg = GeneratorConfig(num_labels=1, prevalence=[0.02])
    with pytest.raises(GeneratorError, match="no count out of 10"):
        check_feasible(cfg, n_labeled=10)
    with pytest.raises(GeneratorError, match="no count out of 10"):
        generate(cfg, n_labeled=10, n_unlabeled=0, out_dir=tmp_path, show_progress=False)
    check_feasible(cfg, n_labeled=250)


def test_prevalence_band_counts():
    low, high = prevalence_band(60, [0.25, 0.02], 0.2)
    assert low.tolist() == [12, 1]
    assert high.tolist() == [18, 1]


def test_generate_raises_when_band_is_never_hit(tiny_generator, tmp_path, monkeypatch):
    monkeypatch.setattr(dataset, "MAX_DATASET_ATTEMPTS", 3)
    monkeypatch.setattr(dataset, "_within_tolerance", lambda Y, config: False)
    with pytest.raises(GeneratorError, match="after 3 draws"):
        generate(tiny_generator, n_labeled=60, n_unlabeled=0, out_dir=tmp_path, show_progress=False)
    assert not (tmp_path / "manifest.json").exists()


def test_rule_violating_draw_raises(tiny_generator, tmp_path, monkeypatch):
    monkeypatch.setattr(dataset, "calibrate_draw_probabilities", lambda config, rng: np.asarray(config.prevalence))
    monkeypatch.setattr(dataset, "_sample_with_redraws", lambda n, p, config, rng: np.ones((n, 4), dtype=np.int8))
    monkeypatch.setattr(dataset, "_within_tolerance", lambda Y, config: True)
    with pytest.raises(GeneratorError, match="violate"):
        generate(tiny_generator, n_labeled=60, n_unlabeled=0, out_dir=tmp_path, show_progress=False)


def test_generated_prevalence_stays_in_band(tiny_dataset, tiny_generator):
    labeled = [s.labels for s in tiny_dataset.samples if s.split != "pretrain-unlabeled"]
    realized = np.asarray(labeled).mean(axis=0)
    target = np.asarray(tiny_generator.prevalence)
    assert np.all(np.abs(realized - target) <= 0.2 * target + 1e-12)


def test_generate_splits_and_rules(tiny_dataset, tiny_generator):
    labeled = [s for s in tiny_dataset.samples if s.split != "pretrain-unlabeled"]
    assert len(labeled) == 60
    assert [len(tiny_dataset.split(name)) for name in ("train", "val", "test")] == [48, 6, 6]
    assert len(tiny_dataset.split("pretrain-unlabeled")) == 10
    assert all(s.labels is None for s in tiny_dataset.split("pretrain-unlabeled"))
    Y = np.array([s.labels for s in labeled])
    for rule in tiny_generator.rules:
        assert not rule.violations(Y).any()


def test_generate_is_deterministic(tiny_generator, tmp_path):
    a = generate(tiny_generator, 50, 5, tmp_path / "a", show_progress=False)
    b = generate(tiny_generator, 50, 5, tmp_path / "b", show_progress=False)
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    for sample in a.samples:
        assert (tmp_path / "a" / sample.image).read_bytes() == (tmp_path / "b" / sample.image).read_bytes()
    assert a.prevalence == b.prevalence


def test_manifest_round_trip(tiny_dataset):
    loaded = load_manifest(tiny_dataset.root / "manifest.json")
    assert loaded.to_dict() == tiny_dataset.to_dict()


def test_missing_image_names_the_sample(tiny_dataset):
    victim = tiny_dataset.samples[3]
    (tiny_dataset.root / victim.image).unlink()
    with pytest.raises(MissingImageError, match=victim.id):
        load_manifest(tiny_dataset.root / "manifest.json")


def test_prevalence_mismatch_detected(tiny_dataset):
    path = tiny_dataset.root / "manifest.json"
    raw = json.loads(path.read_text())
    raw["prevalence"][0] += 0.01
    path.write_text(json.dumps(raw))
    with pytest.raises(PrevalenceMismatchError):
        load_manifest(path)


def test_duplicate_id_detected(tiny_dataset):
    path = tiny_dataset.root / "manifest.json"
    raw = json.loads(path.read_text())
    raw["samples"][1]["id"] = raw["samples"][0]["id"]
    path.write_text(json.dumps(raw))
    with pytest.raises(DuplicateIdError):
        load_manifest(path)


def test_unsupported_schema_version(tiny_dataset):
    path = tiny_dataset.root / "manifest.json"
    raw = json.loads(path.read_text())
    raw["schema_version"] = 99
    path.write_text(json.dumps(raw))
    with pytest.raises(ManifestError, match="schema_version"):
        load_manifest(path)


def test_compute_prevalence_counts():
    labels = [[1, 0]] * 3 + [[0, 0]] * 9
    samples = [SampleRecord(f"s{i}", f"images/s{i}.ppm", row, "train") for i, row in enumerate(labels)]
    samples.append(SampleRecord("v0", "images/v0.ppm", [1, 1], "val"))
    manifest = DatasetManifest(label_names=["a", "b"], groups={"g": [0, 1]}, samples=samples, prevalence=[])
    assert compute_prevalence(manifest, "train") == [0.25, 0.0]
    assert compute_prevalence(manifest, "val") == [1.0, 1.0]
    with pytest.raises(ManifestError):
        compute_prevalence(manifest, "test")


def test_compute_prevalence_matches_counter(rng):
    Y = (rng.random((57, 5)) < 0.3).astype(int)
    samples = [SampleRecord(f"s{i}", "x.ppm", row.tolist(), "train") for i, row in enumerate(Y)]
    manifest = DatasetManifest(label_names=list("abcde"), groups={"g": list(range(5))}, samples=samples,
                               prevalence=[])
    expected = []
    for k in range(5):
        count = 0
        for row in Y:
            count += int(row[k])
        expected.append(count / len(Y))
    assert compute_prevalence(manifest) == expected


def test_ppm_round_trip_is_quantized(rng, tmp_path):
    image = rng.random((4, 6, 3))
    write_ppm(tmp_path / "x.ppm", image)
    back = read_ppm(tmp_path / "x.ppm")
    assert back.shape == (4, 6, 3)
    assert np.abs(back - image).max() <= 0.5 / 255 + 1e-12
    assert (tmp_path / "x.ppm").read_text().startswith("P3")


def test_malformed_ppm_rejected(tmp_path):
    (tmp_path / "bad.ppm").write_text("P6\n2 2\n255\n")
    with pytest.raises(ImageFormatError):
        read_ppm(tmp_path / "bad.ppm")


def test_split_arrays_shapes(tiny_dataset):
    ids, images, labels = load_split_arrays(tiny_dataset, "train")
    assert images.shape == (48, 16, 16, 3)
    assert labels.shape == (48, 4)
    assert len(ids) == 48
    _, pool, none = load_split_arrays(tiny_dataset, "pretrain-unlabeled")
    assert pool.shape[0] == 10 and none is None


def test_visual_signature_is_recoverable(tmp_path):
    cfg = GeneratorConfig(num_labels=4, height=16, width=16, patch_size=4, prevalence=[0.3, 0.3, 0.3, 0.3],
                          noise_sigma=0.05, seed=11)
    manifest = generate(cfg, n_labeled=400, n_unlabeled=0, out_dir=tmp_path, show_progress=False)
    _, images, labels = load_split_arrays(manifest, "train")
    auc = separability_auc(images, labels, cfg.patch_size)
    assert np.all(auc > 0.9)
