"""
Temporal Action Detector
Fused posterior scoring, multi-threshold proposal generation and per-class temporal NMS
"""

import asyncio
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from ..evaluation.evalkit import tiou
from ..nn import model as segment_model
from ..nn.model import ModelParams
from ..nn.numerics import Matrix, softmax
from ..training.mil import aggregate_video_score, uncertainty, video_probabilities
from ..training.trainer import SamplingMode, sample_segments
from ..utils.config import DetectConfig, MilConfig, ScoreMode


logger = logging.getLogger(__name__)

Run = Tuple[int, int]


class Proposal(BaseModel):
    """One detection candidate: class, [t_start, t_end) in seconds, score"""
    class_id: int
    t_start: float
    t_end: float
    score: float


def fused_posterior(
    scores: Matrix,
    magnitudes: np.ndarray,
    m: float,
    mode: Union[ScoreMode, str] = ScoreMode.FUSED,
) -> Matrix:
    """
    Per-segment posterior of each class

    fused: class softmax x min(m, ||f||) / m
    softmax_only: class softmax
    minmax_fused: class softmax x per-video min-max normalized magnitude
    """
    mode = ScoreMode(mode)
    probs = softmax(np.asarray(scores, dtype=np.float64), axis=1)
    magnitudes = np.asarray(magnitudes, dtype=np.float64)

    if mode is ScoreMode.SOFTMAX_ONLY:
        return probs
    if mode is ScoreMode.FUSED:
        return probs * uncertainty(magnitudes, m)[:, None]

    low, high = float(magnitudes.min()), float(magnitudes.max())
    if high - low < 1e-12:
        normalized = np.ones_like(magnitudes)
    else:
        normalized = (magnitudes - low) / (high - low)
    return probs * normalized[:, None]


def select_classes(video_probs: np.ndarray, theta_vid: float) -> List[int]:
    """Classes with p_c > theta_vid; the argmax class when none pass"""
    video_probs = np.asarray(video_probs, dtype=np.float64)
    selected = [int(c) for c in np.flatnonzero(video_probs > theta_vid)]
    if not selected:
        fallback = int(np.argmax(video_probs))
        logger.debug(f"No class above theta_vid={theta_vid}, falling back to class {fallback}")
        selected = [fallback]
    return selected


def group_candidates(mask: Sequence[bool]) -> List[Run]:
    """Maximal runs of True as inclusive [i, j] pairs"""
    runs: List[Run] = []
    start: Optional[int] = None
    for t, flag in enumerate(mask):
        if flag and start is None:
            start = t
        elif not flag and start is not None:
            runs.append((start, t - 1))
            start = None
    if start is not None:
        runs.append((start, len(mask) - 1))
    return runs


def score_proposal(posteriors: np.ndarray, run: Run, outer_inflation: float = 0.25) -> float:
    """Inner mean minus the mean of the inflated outer region (0 if that region is empty)"""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    i, j = run
    length = j - i + 1
    pad = math.ceil(outer_inflation * length)

    inner = float(posteriors[i:j + 1].mean())
    outer = np.concatenate([
        posteriors[max(0, i - pad):i],
        posteriors[j + 1:min(len(posteriors) - 1, j + pad) + 1],
    ])
    if outer.size == 0:
        return inner
    return inner - float(outer.mean())


def segment_to_time(run: Run, num_segments: int, duration: float) -> Tuple[float, float]:
    if duration <= 0:
        raise ValueError(f"duration must be > 0, got {duration}")
    i, j = run
    return i * duration / num_segments, (j + 1) * duration / num_segments


def nms(proposals: Sequence[Proposal], iou_threshold: float) -> List[Proposal]:
    """Greedy suppression; ties on score go to the earlier t_start"""
    remaining = sorted(proposals, key=lambda p: (-p.score, p.t_start, p.t_end))
    kept: List[Proposal] = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [
            p for p in remaining
            if tiou((best.t_start, best.t_end), (p.t_start, p.t_end)) < iou_threshold
        ]
    return kept


def detect(
    params: ModelParams,
    features: Matrix,
    duration: float,
    detect_config: DetectConfig,
    mil_config: MilConfig,
) -> List[Proposal]:
    """
    Localize actions in one video

    Args:
        params: trained model parameters
        features: (L, F) segment features of the video
        duration: video length in seconds
        detect_config: thresholds, NMS and scoring mode
        mil_config: supplies m and the top-k ratio of video aggregation

    Returns:
        Proposals ordered by (class, t_start, score desc)
    """
    features = np.asarray(features, dtype=np.float64)
    if detect_config.num_segments is not None:
        features = features[sample_segments(features.shape[0], detect_config.num_segments, SamplingMode.TEST)]
    num_segments = features.shape[0]

    out = segment_model.forward(params, features)
    video_probs = video_probabilities(aggregate_video_score(out.scores, mil_config.k_act(num_segments)))
    posteriors = fused_posterior(out.scores, out.magnitudes, mil_config.m, detect_config.score_mode)
    thresholds = sorted(set(detect_config.theta_seg_list))

    detections: List[Proposal] = []
    for class_id in select_classes(video_probs, detect_config.theta_vid):
        column = posteriors[:, class_id]
        pool: List[Proposal] = []
        for theta in thresholds:
            for run in group_candidates(column > theta):
                t_start, t_end = segment_to_time(run, num_segments, duration)
                pool.append(Proposal(
                    class_id=class_id,
                    t_start=t_start,
                    t_end=t_end,
                    score=score_proposal(column, run, detect_config.outer_inflation),
                ))
        detections.extend(nms(pool, detect_config.nms_iou))

    return sorted(detections, key=lambda p: (p.class_id, p.t_start, -p.score))


async def detect_videos(
    params: ModelParams,
    videos: Sequence,
    detect_config: DetectConfig,
    mil_config: MilConfig,
    threads: int = 1,
) -> Dict[str, List[Proposal]]:
    """Run detect() over videos (objects with video_id, features, duration) on worker threads"""
    semaphore = asyncio.Semaphore(max(1, threads))

    async def run_one(video) -> List[Proposal]:
        async with semaphore:
            return await asyncio.to_thread(
                detect, params, video.features, video.duration, detect_config, mil_config
            )

    results = await asyncio.gather(*(run_one(video) for video in videos))
    logger.info(f"Detected {sum(len(r) for r in results)} proposals in {len(videos)} videos")
    return {video.video_id: proposals for video, proposals in zip(videos, results)}


def detect_all(
    params: ModelParams,
    videos: Sequence,
    detect_config: DetectConfig,
    mil_config: MilConfig,
    threads: int = 1,
) -> Dict[str, List[Proposal]]:
    return asyncio.run(detect_videos(params, videos, detect_config, mil_config, threads))


def detections_to_json(results: Dict[str, List[Proposal]], class_names: Sequence[str]) -> Dict:
    return {
        "results": {
            video_id: [
                {"label": class_names[p.class_id], "segment": [p.t_start, p.t_end], "score": p.score}
                for p in proposals
            ]
            for video_id, proposals in results.items()
        }
    }


def write_detections(
    results: Dict[str, List[Proposal]], class_names: Sequence[str], path: Union[str, Path]
) -> None:
    """Write the ActivityNet-style submission file"""
    Path(path).write_text(json.dumps(detections_to_json(results, class_names), indent=2))
