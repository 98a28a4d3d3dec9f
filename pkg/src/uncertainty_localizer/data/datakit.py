"""
Dataset Toolkit
Synthetic untrimmed videos with planted actions, UMFT feature files and dataset manifests
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..inference.detector import group_candidates
from ..training.trainer import TrainingSample
from ..utils.config import BackgroundMode, SyntheticSpec
from ..utils.errors import CorruptFileError, DatasetError, FormatVersionError, GenerationError, VocabularyError


logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"UMFT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")

MANIFEST_VERSION = 1
FPS = 25.0
FRAMES_PER_SEGMENT = 16
SEGMENT_SECONDS = FRAMES_PER_SEGMENT / FPS

PROTOTYPE_MAX_COSINE = 0.5
PROTOTYPE_MAX_TRIES = 1000
PLACEMENT_MAX_TRIES = 200


class VideoRecord(BaseModel):
    """One video: features, video-level multi-hot label, duration and optional segment-level GT"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    video_id: str
    duration: float
    features: np.ndarray
    label: np.ndarray
    subset: str = "train"
    segment_labels: Optional[np.ndarray] = None

    def to_training_sample(self) -> TrainingSample:
        # segment-level GT never reaches the trainer
        return TrainingSample(video_id=self.video_id, features=self.features, label=self.label)


class ManifestEntry(BaseModel):
    video_id: str
    feature_path: str
    subset: str


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: int = MANIFEST_VERSION
    class_names: List[str]
    gt_path: str = "gt.json"
    dataset_hash: Optional[str] = None
    videos: List[ManifestEntry]


class SyntheticDataset(BaseModel):
    """Generated records plus the GT database they were planted from"""

    records: List[VideoRecord]
    class_names: List[str]
    ground_truth: Dict[str, Any]

    def write(self, out_dir: Union[str, Path]) -> Path:
        """Write features/, gt.json and manifest.json; returns the manifest path"""
        out_dir = Path(out_dir)
        (out_dir / "features").mkdir(parents=True, exist_ok=True)

        entries = []
        for record in self.records:
            relative = f"features/{record.video_id}.umft"
            write_features(record.features, out_dir / relative)
            entries.append(ManifestEntry(video_id=record.video_id, feature_path=relative, subset=record.subset))

        (out_dir / "gt.json").write_text(json.dumps(self.ground_truth, indent=2))
        manifest = DatasetManifest(
            class_names=self.class_names,
            dataset_hash=dataset_hash(self.records),
            videos=entries,
        )
        manifest_path = out_dir / "manifest.json"
        manifest_path.write_text(json.dumps(manifest.model_dump(), indent=2))
        logger.info(f"Wrote {len(self.records)} videos to {out_dir} (hash {manifest.dataset_hash[:12]})")
        return manifest_path


def class_prototypes(num_classes: int, feature_dim: int, seed: int) -> np.ndarray:
    """Random unit vectors with pairwise |cos| < 0.5, by rejection"""
    rng = np.random.default_rng(seed)
    prototypes: List[np.ndarray] = []
    for c in range(num_classes):
        for _ in range(PROTOTYPE_MAX_TRIES):
            candidate = rng.normal(size=feature_dim)
            candidate /= np.linalg.norm(candidate)
            if all(abs(float(candidate @ p)) < PROTOTYPE_MAX_COSINE for p in prototypes):
                prototypes.append(candidate)
                break
        else:
            raise GenerationError(
                f"could not draw prototype {c} of {num_classes} in {feature_dim} dims "
                f"after {PROTOTYPE_MAX_TRIES} tries; increase feature_dim"
            )
    return np.stack(prototypes)


def generate(spec: SyntheticSpec, seed: int) -> SyntheticDataset:
    """
    Build a synthetic untrimmed-video dataset

    Action segments are class prototype plus gaussian noise: isotropic noise
    and a larger nuisance component confined to the class-free subspace. Background
    stretches are either near-constant vectors (static) or a fresh direction
    plus noise per segment (dynamic); mixed mode picks one per stretch.
    Background directions are orthogonal to every prototype and background
    norms match the expected action norm, so raw magnitude carries no label.
    """
    unit_prototypes = class_prototypes(spec.num_classes, spec.feature_dim, spec.prototype_seed)
    prototypes = unit_prototypes * spec.action_scale
    class_names = [f"action_{c:02d}" for c in range(spec.num_classes)]
    rng = np.random.default_rng(seed)

    records: List[VideoRecord] = []
    database: Dict[str, Any] = {}
    for n in range(spec.num_train + spec.num_test):
        video_id = f"video_{n:04d}"
        subset = "train" if n < spec.num_train else "test"
        num_segments = int(rng.integers(spec.min_segments, spec.max_segments + 1))
        instances = _place_instances(spec, num_segments, rng)

        segment_labels = np.full(num_segments, -1, dtype=np.int64)
        for class_id, start, end in instances:
            segment_labels[start:end + 1] = class_id

        features = _background(spec, segment_labels, unit_prototypes, rng)
        for class_id, start, end in instances:
            length = end - start + 1
            features[start:end + 1] = prototypes[class_id] + _segment_noise(spec, unit_prototypes, length, rng)
        # storage precision is float32
        features = features.astype(np.float32).astype(np.float64)

        label = np.zeros(spec.num_classes)
        for class_id, _, _ in instances:
            label[class_id] = 1.0
        duration = num_segments * SEGMENT_SECONDS

        records.append(VideoRecord(
            video_id=video_id,
            duration=duration,
            features=features,
            label=label,
            subset=subset,
            segment_labels=segment_labels,
        ))
        database[video_id] = {
            "duration": duration,
            "subset": subset,
            "annotations": [
                {"label": class_names[class_id], "segment": [start * SEGMENT_SECONDS, (end + 1) * SEGMENT_SECONDS]}
                for class_id, start, end in sorted(instances, key=lambda item: item[1])
            ],
        }

    return SyntheticDataset(records=records, class_names=class_names, ground_truth={"database": database})


def _place_instances(spec: SyntheticSpec, num_segments: int, rng: np.random.Generator) -> List[Tuple[int, int, int]]:
    """Non-overlapping (class, start, end) spans separated by at least one background segment"""
    wanted = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    placed: List[Tuple[int, int, int]] = []
    occupied = np.zeros(num_segments, dtype=bool)

    for _ in range(wanted):
        class_id = int(rng.integers(spec.num_classes))
        length = int(rng.integers(spec.min_instance_len, spec.max_instance_len + 1))
        for _ in range(PLACEMENT_MAX_TRIES):
            start = int(rng.integers(0, num_segments - length + 1))
            end = start + length - 1
            if not occupied[max(0, start - 1):min(num_segments, end + 2)].any():
                occupied[start:end + 1] = True
                placed.append((class_id, start, end))
                break

    if not placed:
        raise GenerationError(f"could not place any instance in a {num_segments}-segment video")
    return placed


def expected_segment_norm(spec: SyntheticSpec) -> float:
    """Expected norm of an action or dynamic background segment; static stretches use it as their norm"""
    return float(np.sqrt(
        spec.action_scale ** 2
        + spec.feature_dim * spec.action_noise ** 2
        + (spec.feature_dim - spec.num_classes) * spec.nuisance_noise ** 2
    ))


def class_free_noise(prototypes: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Standard gaussian draws restricted to the orthogonal complement of the prototype span"""
    draws = rng.normal(size=(count, prototypes.shape[1]))
    coefficients = np.linalg.solve(prototypes @ prototypes.T, prototypes @ draws.T)
    return draws - (prototypes.T @ coefficients).T


def class_free_directions(prototypes: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Random unit vectors orthogonal to the span of the prototypes"""
    draws = class_free_noise(prototypes, count, rng)
    return draws / np.linalg.norm(draws, axis=1, keepdims=True)


def _segment_noise(spec: SyntheticSpec, prototypes: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    isotropic = spec.action_noise * rng.normal(size=(count, spec.feature_dim))
    return isotropic + spec.nuisance_noise * class_free_noise(prototypes, count, rng)


def _background(
    spec: SyntheticSpec,
    segment_labels: np.ndarray,
    prototypes: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    static_norm = expected_segment_norm(spec)
    features = np.zeros((len(segment_labels), spec.feature_dim))
    for start, end in group_candidates(segment_labels < 0):
        length = end - start + 1
        if spec.background_mode is BackgroundMode.MIXED:
            static = bool(rng.random() < 0.5)
        else:
            static = spec.background_mode is BackgroundMode.STATIC

        if static:
            direction = class_free_directions(prototypes, 1, rng)[0] * static_norm
            features[start:end + 1] = direction + spec.static_jitter * rng.normal(size=(length, spec.feature_dim))
        else:
            directions = class_free_directions(prototypes, length, rng) * spec.action_scale
            features[start:end + 1] = directions + _segment_noise(spec, prototypes, length, rng)
    return features


def write_features(matrix: np.ndarray, path: Union[str, Path]) -> None:
    """UMFT file: header then row-major little-endian float32 payload"""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"features must be 2-D, got {matrix.shape}")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, matrix.shape[0], matrix.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_features(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise CorruptFileError(f"{path}: feature header truncated ({len(data)} bytes)")

    magic, version, num_segments, feature_dim = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatVersionError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FormatVersionError(f"{path}: unsupported feature file version {version}")

    payload = data[_FEATURE_HEADER.size:]
    expected = num_segments * feature_dim * 4
    if len(payload) != expected:
        raise CorruptFileError(
            f"{path}: header declares {num_segments}x{feature_dim} but payload has {len(payload)} bytes"
        )
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(num_segments, feature_dim)


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    try:
        return DatasetManifest.model_validate_json(path.read_text())
    except ValueError as e:
        raise DatasetError(f"invalid manifest {path}: {e}") from e


def load_dataset(manifest_path: Union[str, Path], subset: Optional[str] = None) -> List[VideoRecord]:
    """
    Load the videos listed in a manifest (optionally one subset)

    Labels and durations come from the GT file the manifest points to;
    segment-level GT is derived from the annotated intervals.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent

    gt_path = root / manifest.gt_path
    if not gt_path.exists():
        raise DatasetError(f"ground truth file not found: {gt_path}")
    database = json.loads(gt_path.read_text()).get("database", {})
    index = {name: c for c, name in enumerate(manifest.class_names)}

    seen = set()
    for entry in manifest.videos:
        if entry.video_id in seen:
            raise DatasetError(f"duplicate video_id in manifest: {entry.video_id}")
        seen.add(entry.video_id)

    records: List[VideoRecord] = []
    feature_dim: Optional[int] = None
    for entry in manifest.videos:
        if subset is not None and entry.subset != subset:
            continue
        feature_path = root / entry.feature_path
        if not feature_path.exists():
            raise DatasetError(f"{entry.video_id}: feature file not found: {feature_path}")
        if entry.video_id not in database:
            raise DatasetError(f"{entry.video_id}: missing from ground truth")

        features = read_features(feature_path)
        if feature_dim is None:
            feature_dim = features.shape[1]
        elif features.shape[1] != feature_dim:
            raise DatasetError(f"{entry.video_id}: feature dim {features.shape[1]}, expected {feature_dim}")

        video = database[entry.video_id]
        annotations = video.get("annotations", [])
        if not annotations:
            raise DatasetError(f"{entry.video_id}: video has no labels")

        label = np.zeros(len(manifest.class_names))
        for annotation in annotations:
            if annotation["label"] not in index:
                raise VocabularyError(f"{entry.video_id}: unknown label '{annotation['label']}'")
            label[index[annotation["label"]]] = 1.0

        duration = float(video.get("duration", features.shape[0] * SEGMENT_SECONDS))
        records.append(VideoRecord(
            video_id=entry.video_id,
            duration=duration,
            features=features,
            label=label,
            subset=entry.subset,
            segment_labels=segment_labels_from_annotations(annotations, index, features.shape[0], duration),
        ))

    logger.info(f"Loaded {len(records)} videos from {manifest_path}" + (f" (subset {subset})" if subset else ""))
    return records


def segment_labels_from_annotations(
    annotations: Sequence[Dict[str, Any]],
    index: Dict[str, int],
    num_segments: int,
    duration: float,
) -> np.ndarray:
    """Class of each segment whose centre lies in an annotated interval, -1 elsewhere"""
    centres = (np.arange(num_segments) + 0.5) * duration / num_segments
    labels = np.full(num_segments, -1, dtype=np.int64)
    for annotation in annotations:
        start, end = annotation["segment"]
        labels[(centres >= start) & (centres < end)] = index[annotation["label"]]
    return labels


def dataset_hash(records: Sequence[VideoRecord]) -> str:
    """sha256 over a canonical little-endian serialization, ids sorted"""
    digest = hashlib.sha256()
    for record in sorted(records, key=lambda r: r.video_id):
        digest.update(record.video_id.encode("utf-8") + b"\0")
        digest.update(record.subset.encode("utf-8") + b"\0")
        digest.update(struct.pack("<II", *record.features.shape))
        digest.update(np.ascontiguousarray(record.features, dtype="<f4").tobytes())
        digest.update(np.ascontiguousarray(record.label, dtype="u1").tobytes())
    return digest.hexdigest()
