import json
import struct

import numpy as np
import pytest

from uncertainty_localizer.data import datakit
from uncertainty_localizer.data.datakit import dataset_hash, generate, load_dataset, read_features, write_features
from uncertainty_localizer.utils.config import BackgroundMode, SyntheticSpec
from uncertainty_localizer.utils.errors import CorruptFileError, DatasetError, FormatVersionError, GenerationError, VocabularyError


def test_generation_is_deterministic(tiny_spec):
    a = generate(tiny_spec, seed=9)
    b = generate(tiny_spec, seed=9)
    c = generate(tiny_spec, seed=10)

    assert dataset_hash(a.records) == dataset_hash(b.records)
    assert a.ground_truth == b.ground_truth
    assert dataset_hash(a.records) != dataset_hash(c.records)


def test_written_datasets_are_byte_identical(tmp_path, tiny_spec):
    first = generate(tiny_spec, seed=4).write(tmp_path / "a")
    second = generate(tiny_spec, seed=4).write(tmp_path / "b")

    for name in ("manifest.json", "gt.json", "features/video_0000.umft"):
        assert (first.parent / name).read_bytes() == (second.parent / name).read_bytes()


def test_prototypes_are_unit_and_spread():
    prototypes = datakit.class_prototypes(6, 16, seed=1234)

    np.testing.assert_allclose(np.linalg.norm(prototypes, axis=1), np.ones(6))
    cosines = prototypes @ prototypes.T
    off_diagonal = cosines[~np.eye(6, dtype=bool)]
    assert np.all(np.abs(off_diagonal) < 0.5)


def test_prototypes_impossible_in_one_dimension():
    with pytest.raises(GenerationError):
        datakit.class_prototypes(3, 1, seed=0)


def test_planted_instances(tiny_spec, tiny_dataset):
    assert len(tiny_dataset.records) == tiny_spec.num_train + tiny_spec.num_test
    assert [r.subset for r in tiny_dataset.records].count("test") == tiny_spec.num_test

    for record in tiny_dataset.records:
        annotations = tiny_dataset.ground_truth["database"][record.video_id]["annotations"]
        length = record.features.shape[0]
        assert tiny_spec.min_segments <= length <= tiny_spec.max_segments
        assert record.duration == pytest.approx(length * 16 / 25)
        assert tiny_spec.min_instances <= len(annotations) <= tiny_spec.max_instances

        spans = sorted(a["segment"] for a in annotations)
        for earlier, later in zip(spans, spans[1:]):
            assert earlier[1] < later[0]

        classes = {tiny_dataset.class_names.index(a["label"]) for a in annotations}
        np.testing.assert_array_equal(np.flatnonzero(record.label), sorted(classes))
        assert set(np.unique(record.segment_labels)) - {-1} == classes


def test_action_segments_align_with_prototypes(tiny_spec, tiny_dataset):
    prototypes = datakit.class_prototypes(tiny_spec.num_classes, tiny_spec.feature_dim, tiny_spec.prototype_seed)
    for record in tiny_dataset.records:
        for t in np.flatnonzero(record.segment_labels >= 0):
            direction = record.features[t] / np.linalg.norm(record.features[t])
            assert direction @ prototypes[record.segment_labels[t]] > 0.5


def test_static_background_is_nearly_constant(tiny_spec):
    spec = tiny_spec.model_copy(update={"background_mode": BackgroundMode.STATIC})
    record = generate(spec, seed=1).records[0]

    static_norm = datakit.expected_segment_norm(spec)
    prototypes = datakit.class_prototypes(spec.num_classes, spec.feature_dim, spec.prototype_seed)
    background = record.features[record.segment_labels < 0]
    np.testing.assert_allclose(np.linalg.norm(background, axis=1), static_norm, atol=0.5)
    assert np.abs(background @ prototypes.T).max() < 0.3
    first_stretch = []
    for t, label in enumerate(record.segment_labels):
        if label >= 0:
            break
        first_stretch.append(record.features[t])
    if len(first_stretch) > 1:
        assert np.std(np.stack(first_stretch), axis=0).max() < 0.2


def test_background_matches_action_norm_without_class_direction():
    spec = SyntheticSpec(num_train=20, num_test=0)
    dataset = generate(spec, seed=0)
    prototypes = datakit.class_prototypes(spec.num_classes, spec.feature_dim, spec.prototype_seed)
    features = np.concatenate([r.features for r in dataset.records])
    labels = np.concatenate([r.segment_labels for r in dataset.records])

    action_norm = np.linalg.norm(features[labels >= 0], axis=1).mean()
    background_norm = np.linalg.norm(features[labels < 0], axis=1).mean()
    assert abs(action_norm - background_norm) < 0.1 * action_norm
    assert action_norm == pytest.approx(datakit.expected_segment_norm(spec), rel=0.1)

    projections = features @ prototypes.T
    assert np.abs(projections[labels < 0]).mean() < 0.25
    own = projections[labels >= 0, labels[labels >= 0]]
    assert own.mean() == pytest.approx(spec.action_scale, abs=0.2)


def test_segment_labels_are_linearly_separable():
    spec = SyntheticSpec(num_train=40, num_test=20)
    records = generate(spec, seed=0).records

    def design(subset):
        chosen = [r for r in records if r.subset == subset]
        x = np.concatenate([r.features for r in chosen])
        y = np.concatenate([r.segment_labels for r in chosen])
        # background is the last column
        y = np.where(y < 0, spec.num_classes, y)
        return np.hstack([x, np.ones((len(x), 1))]), y

    x_train, y_train = design("train")
    x_test, y_test = design("test")
    targets = np.eye(spec.num_classes + 1)[y_train]
    weights = np.linalg.solve(x_train.T @ x_train + np.eye(x_train.shape[1]), x_train.T @ targets)

    accuracy = np.mean(np.argmax(x_test @ weights, axis=1) == y_test)
    assert accuracy >= 0.95


def test_training_sample_drops_segment_labels(tiny_dataset):
    sample = tiny_dataset.records[0].to_training_sample()
    assert not hasattr(sample, "segment_labels")
    np.testing.assert_array_equal(sample.label, tiny_dataset.records[0].label)


def test_load_dataset_restores_records(dataset_dir, tiny_dataset):
    loaded = load_dataset(dataset_dir)
    manifest = json.loads(dataset_dir.read_text())

    assert [r.video_id for r in loaded] == [r.video_id for r in tiny_dataset.records]
    for original, record in zip(tiny_dataset.records, loaded):
        np.testing.assert_array_equal(record.features, original.features)
        np.testing.assert_array_equal(record.label, original.label)
        np.testing.assert_array_equal(record.segment_labels, original.segment_labels)
        assert record.duration == pytest.approx(original.duration)
    assert manifest["dataset_hash"] == dataset_hash(loaded)
    assert manifest["class_names"] == ["action_00", "action_01", "action_02"]


def test_load_dataset_subset(dataset_dir, tiny_spec):
    assert len(load_dataset(dataset_dir, subset="train")) == tiny_spec.num_train
    assert len(load_dataset(dataset_dir, subset="test")) == tiny_spec.num_test


def test_load_dataset_missing_feature_file(dataset_dir):
    (dataset_dir.parent / "features" / "video_0001.umft").unlink()
    with pytest.raises(DatasetError):
        load_dataset(dataset_dir)


def test_load_dataset_duplicate_ids(dataset_dir):
    manifest = json.loads(dataset_dir.read_text())
    manifest["videos"].append(manifest["videos"][0])
    dataset_dir.write_text(json.dumps(manifest))

    with pytest.raises(DatasetError):
        load_dataset(dataset_dir)


def test_load_dataset_unknown_label(dataset_dir):
    gt_path = dataset_dir.parent / "gt.json"
    truth = json.loads(gt_path.read_text())
    truth["database"]["video_0000"]["annotations"][0]["label"] = "mystery"
    gt_path.write_text(json.dumps(truth))

    with pytest.raises(VocabularyError):
        load_dataset(dataset_dir)


def test_load_dataset_video_without_labels(dataset_dir):
    gt_path = dataset_dir.parent / "gt.json"
    truth = json.loads(gt_path.read_text())
    truth["database"]["video_0002"]["annotations"] = []
    gt_path.write_text(json.dumps(truth))

    with pytest.raises(DatasetError):
        load_dataset(dataset_dir)


def test_feature_file_round_trip(tmp_path, rng):
    matrix = rng.normal(size=(5, 3)).astype(np.float32).astype(np.float64)
    write_features(matrix, tmp_path / "x.umft")

    np.testing.assert_array_equal(read_features(tmp_path / "x.umft"), matrix)


def test_feature_file_errors(tmp_path, rng):
    path = tmp_path / "x.umft"
    write_features(rng.normal(size=(4, 2)), path)
    data = path.read_bytes()

    path.write_bytes(b"")
    with pytest.raises(CorruptFileError):
        read_features(path)

    path.write_bytes(data[:-4])
    with pytest.raises(CorruptFileError):
        read_features(path)

    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(FormatVersionError):
        read_features(path)

    path.write_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(FormatVersionError):
        read_features(path)
