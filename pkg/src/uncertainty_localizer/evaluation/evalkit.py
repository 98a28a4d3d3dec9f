"""
Temporal Detection Evaluation
tIoU, greedy matching, all-points AP, mAP over tIoU grids and feature-magnitude histograms
"""

import csv
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..nn import model as segment_model
from ..nn.model import ModelParams
from ..utils.errors import DatasetError, VocabularyError


logger = logging.getLogger(__name__)

Interval = Tuple[float, float]
JsonSource = Union[str, Path, Dict[str, Any]]


class GroundTruthInstance(BaseModel):
    video_id: str
    class_id: int
    t_start: float
    t_end: float


class Detection(BaseModel):
    video_id: str
    class_id: int
    t_start: float
    t_end: float
    score: float


class EvalReport(BaseModel):
    """Per-class AP at each tIoU threshold plus the mAP summary"""
    thresholds: List[float]
    class_names: List[str]
    ap: List[List[float]]
    map_per_threshold: List[float]
    average_map: float
    num_ground_truth: int
    num_detections: int

    def table_rows(self) -> Tuple[List[str], List[str]]:
        """Header and a single percentage row: mAP@t ... AVG"""
        header = [f"mAP@{t:g}" for t in self.thresholds] + ["AVG"]
        row = [f"{100 * v:.1f}" for v in self.map_per_threshold] + [f"{100 * self.average_map:.1f}"]
        return header, row

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.model_dump(), indent=2))


class MagnitudeHistogram(BaseModel):
    """Normalized feature-magnitude histograms of GT action and GT background segments"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    edges: np.ndarray
    action: np.ndarray
    background: np.ndarray

    @property
    def overlap(self) -> float:
        return overlap_coefficient(self.action, self.background)


def tiou(a: Interval, b: Interval) -> float:
    """|a ∩ b| / |a ∪ b|, 0 for disjoint or zero-length intervals"""
    len_a = a[1] - a[0]
    len_b = b[1] - b[0]
    if len_a <= 0 or len_b <= 0:
        return 0.0
    intersection = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = len_a + len_b - intersection
    return intersection / union if union > 0 else 0.0


def _ap_from_pr(precision: np.ndarray, recall: np.ndarray) -> float:
    # all-points interpolation
    mprec = np.hstack([[0.0], precision, [0.0]])
    mrec = np.hstack([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 1)[::-1]:
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def rank_detections(detections: Sequence[Detection]) -> List[Detection]:
    """Score desc, then earlier t_start, then input order"""
    return sorted(detections, key=lambda d: (-d.score, d.t_start))


def average_precision(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruthInstance],
    iou_threshold: float,
) -> float:
    """
    AP of one class's detections against that class's GT instances

    A detection is a true positive when its best-tIoU unmatched GT in the
    same video reaches iou_threshold; each GT is matched at most once.
    """
    if not ground_truth:
        logger.warning("average_precision called without ground truth; AP defined as 0")
        return 0.0
    if not detections:
        return 0.0

    by_video: Dict[str, List[Interval]] = defaultdict(list)
    for gt in ground_truth:
        by_video[gt.video_id].append((gt.t_start, gt.t_end))
    matched = {video_id: [False] * len(items) for video_id, items in by_video.items()}

    ranked = rank_detections(detections)
    tp = np.zeros(len(ranked))
    fp = np.zeros(len(ranked))
    for k, det in enumerate(ranked):
        best_iou, best_index = 0.0, -1
        for g, interval in enumerate(by_video.get(det.video_id, [])):
            if matched[det.video_id][g]:
                continue
            overlap = tiou((det.t_start, det.t_end), interval)
            if overlap > best_iou:
                best_iou, best_index = overlap, g
        if best_index >= 0 and best_iou >= iou_threshold:
            matched[det.video_id][best_index] = True
            tp[k] = 1.0
        else:
            fp[k] = 1.0

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / len(ground_truth)
    precision = tp_cum / (tp_cum + fp_cum)
    return _ap_from_pr(precision, recall)


def load_ground_truth(
    source: JsonSource,
    subset: Optional[str] = None,
    class_names: Optional[Sequence[str]] = None,
) -> Tuple[List[GroundTruthInstance], List[str], List[str]]:
    """
    Parse an ActivityNet-style GT file

    Returns:
        (instances of the selected subset, class vocabulary, evaluated video ids)
    """
    database = _read_json(source).get("database")
    if not isinstance(database, dict):
        raise DatasetError("ground truth file has no 'database' mapping")

    labels = sorted({a["label"] for video in database.values() for a in video.get("annotations", [])})
    vocabulary = list(class_names) if class_names is not None else labels
    index = {name: i for i, name in enumerate(vocabulary)}
    unknown = [label for label in labels if label not in index]
    if unknown:
        raise VocabularyError(f"ground truth labels outside the vocabulary: {unknown}")

    instances: List[GroundTruthInstance] = []
    video_ids: List[str] = []
    for video_id, video in database.items():
        if subset is not None and video.get("subset") != subset:
            continue
        video_ids.append(video_id)
        for annotation in video.get("annotations", []):
            start, end = annotation["segment"]
            instances.append(GroundTruthInstance(
                video_id=video_id, class_id=index[annotation["label"]], t_start=float(start), t_end=float(end)
            ))
    return instances, vocabulary, video_ids


def load_detections(source: JsonSource, vocabulary: Sequence[str]) -> List[Detection]:
    results = _read_json(source).get("results")
    if not isinstance(results, dict):
        raise DatasetError("detections file has no 'results' mapping")

    index = {name: i for i, name in enumerate(vocabulary)}
    detections: List[Detection] = []
    for video_id, items in results.items():
        for item in items:
            if item["label"] not in index:
                raise VocabularyError(f"{video_id}: detection label '{item['label']}' is not in the vocabulary")
            start, end = item["segment"]
            detections.append(Detection(
                video_id=video_id,
                class_id=index[item["label"]],
                t_start=float(start),
                t_end=float(end),
                score=float(item["score"]),
            ))
    return detections


def evaluate(
    detections: JsonSource,
    ground_truth: JsonSource,
    thresholds: Sequence[float],
    subset: Optional[str] = None,
    class_names: Optional[Sequence[str]] = None,
) -> EvalReport:
    """
    mAP of a detections file against a GT file at each tIoU threshold

    Classes without GT in the evaluated subset are excluded from the mean;
    GT classes without detections contribute AP 0.
    """
    gt_instances, vocabulary, video_ids = load_ground_truth(ground_truth, subset, class_names)
    all_detections = load_detections(detections, vocabulary)

    evaluated_videos = set(video_ids)
    kept = [d for d in all_detections if d.video_id in evaluated_videos]
    skipped = {d.video_id for d in all_detections} - evaluated_videos
    if skipped:
        logger.warning(f"Ignoring detections for {len(skipped)} videos outside the evaluated ground truth")

    gt_by_class: Dict[int, List[GroundTruthInstance]] = defaultdict(list)
    for gt in gt_instances:
        gt_by_class[gt.class_id].append(gt)
    det_by_class: Dict[int, List[Detection]] = defaultdict(list)
    for det in kept:
        det_by_class[det.class_id].append(det)

    classes = sorted(gt_by_class)
    if not classes:
        raise DatasetError("no ground-truth instances to evaluate")

    ap = [
        [average_precision(det_by_class.get(c, []), gt_by_class[c], t) for t in thresholds]
        for c in classes
    ]
    map_per_threshold = [float(np.mean([row[i] for row in ap])) for i in range(len(thresholds))]
    return EvalReport(
        thresholds=[float(t) for t in thresholds],
        class_names=[vocabulary[c] for c in classes],
        ap=ap,
        map_per_threshold=map_per_threshold,
        average_map=float(np.mean(map_per_threshold)),
        num_ground_truth=len(gt_instances),
        num_detections=len(kept),
    )


def magnitude_histogram(params: ModelParams, videos: Sequence, bins: int = 30) -> MagnitudeHistogram:
    """
    Histograms of ||f_t|| split by segment-level GT (action vs background)

    Args:
        params: model parameters
        videos: objects with `features` and `segment_labels` (-1 = background)
        bins: number of equal-width bins over [0, max magnitude]
    """
    action: List[np.ndarray] = []
    background: List[np.ndarray] = []
    for video in videos:
        if video.segment_labels is None:
            raise DatasetError(f"{video.video_id}: segment-level ground truth required for histograms")
        magnitudes = segment_model.forward(params, video.features).magnitudes
        labels = np.asarray(video.segment_labels)
        action.append(magnitudes[labels >= 0])
        background.append(magnitudes[labels < 0])

    action_values = np.concatenate(action) if action else np.empty(0)
    background_values = np.concatenate(background) if background else np.empty(0)
    top = max(float(action_values.max(initial=0.0)), float(background_values.max(initial=0.0)))
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)

    return MagnitudeHistogram(
        edges=edges,
        action=_normalized_counts(action_values, edges),
        background=_normalized_counts(background_values, edges),
    )


def overlap_coefficient(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.minimum(p, q).sum())


def write_histogram_csv(histogram: MagnitudeHistogram, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_start", "bin_end", "action", "background"])
        for k in range(len(histogram.action)):
            writer.writerow([
                f"{histogram.edges[k]:.6g}",
                f"{histogram.edges[k + 1]:.6g}",
                f"{histogram.action[k]:.6g}",
                f"{histogram.background[k]:.6g}",
            ])


def _normalized_counts(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    counts, _ = np.histogram(values, bins=edges)
    if counts.sum() == 0:
        logger.warning("Empty magnitude group; histogram left at zero")
        return counts.astype(np.float64)
    return counts / counts.sum()


def _read_json(source: JsonSource) -> Dict[str, Any]:
    if isinstance(source, dict):
        return source
    return json.loads(Path(source).read_text())
