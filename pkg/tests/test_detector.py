import json

import numpy as np
import pytest

from uncertainty_localizer.inference import detector
from uncertainty_localizer.inference.detector import Proposal
from uncertainty_localizer.nn.model import init_params
from uncertainty_localizer.utils.config import DetectConfig, MilConfig, ScoreMode


def brute_force_nms(proposals, threshold):
    def overlap(a, b):
        inter = max(0.0, min(a.t_end, b.t_end) - max(a.t_start, b.t_start))
        union = (a.t_end - a.t_start) + (b.t_end - b.t_start) - inter
        return inter / union if union > 0 else 0.0

    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].score, proposals[i].t_start, proposals[i].t_end))
    suppressed = [False] * len(proposals)
    kept = []
    for rank, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(proposals[i])
        for j in order[rank + 1:]:
            if overlap(proposals[i], proposals[j]) >= threshold:
                suppressed[j] = True
    return kept


def random_proposals(rng, count):
    proposals = []
    for _ in range(count):
        start = float(rng.uniform(0, 50))
        proposals.append(Proposal(
            class_id=0, t_start=start, t_end=start + float(rng.uniform(0.5, 15)), score=float(rng.uniform())
        ))
    return proposals


def test_fused_posterior_modes():
    scores = np.zeros((2, 2))
    magnitudes = np.array([50.0, 200.0])

    np.testing.assert_allclose(
        detector.fused_posterior(scores, magnitudes, 100.0, ScoreMode.FUSED), [[0.25, 0.25], [0.5, 0.5]]
    )
    np.testing.assert_allclose(detector.fused_posterior(scores, magnitudes, 100.0, "softmax_only"), np.full((2, 2), 0.5))
    np.testing.assert_allclose(
        detector.fused_posterior(scores, magnitudes, 100.0, ScoreMode.MINMAX_FUSED), [[0.0, 0.0], [0.5, 0.5]]
    )
    np.testing.assert_allclose(
        detector.fused_posterior(scores, np.array([3.0, 3.0]), 100.0, ScoreMode.MINMAX_FUSED), np.full((2, 2), 0.5)
    )


def test_select_classes_threshold_and_fallback():
    assert detector.select_classes(np.array([0.1, 0.5, 0.3]), 0.2) == [1, 2]
    assert detector.select_classes(np.array([0.1, 0.15, 0.12]), 0.2) == [1]


def test_group_candidates():
    assert detector.group_candidates([False, True, True, False, True]) == [(1, 2), (4, 4)]
    assert detector.group_candidates([False, False]) == []
    assert detector.group_candidates([True, True, True]) == [(0, 2)]


def test_score_proposal_inner_minus_outer():
    posteriors = np.array([0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0])

    assert detector.score_proposal(posteriors, (2, 5)) == pytest.approx(1.0)
    assert detector.score_proposal(np.array([0.2, 0.8, 0.8, 0.4]), (1, 2)) == pytest.approx(0.8 - 0.3)
    assert detector.score_proposal(np.array([0.3, 0.6]), (0, 1)) == pytest.approx(0.45)


def test_segment_to_time():
    assert detector.segment_to_time((2, 5), 10, 20.0) == (4.0, 12.0)
    assert detector.segment_to_time((0, 9), 10, 20.0) == (0.0, 20.0)
    with pytest.raises(ValueError):
        detector.segment_to_time((0, 1), 10, 0.0)


def test_nms_matches_brute_force(rng):
    for _ in range(500):
        proposals = random_proposals(rng, int(rng.integers(0, 51)))
        threshold = float(rng.choice([0.3, 0.5, 0.6, 0.7]))

        expected = brute_force_nms(proposals, threshold)

        assert detector.nms(proposals, threshold) == expected


def test_nms_tie_keeps_earlier_start():
    late = Proposal(class_id=0, t_start=1.0, t_end=5.0, score=0.9)
    early = Proposal(class_id=0, t_start=0.5, t_end=5.0, score=0.9)

    assert detector.nms([late, early], 0.5) == [early]


def test_detect_output_is_ordered_and_within_duration(rng):
    params = init_params(4, 3, seed=2)
    features = rng.normal(size=(40, 4))

    proposals = detector.detect(params, features, 25.6, DetectConfig(), MilConfig())

    assert proposals == sorted(proposals, key=lambda p: (p.class_id, p.t_start, -p.score))
    for p in proposals:
        assert 0.0 <= p.t_start < p.t_end <= 25.6 + 1e-9
    assert proposals == detector.detect(params, features, 25.6, DetectConfig(), MilConfig())


def test_detect_resampled_resolution(rng):
    params = init_params(4, 3, seed=2)
    features = rng.normal(size=(40, 4))

    proposals = detector.detect(params, features, 25.6, DetectConfig(num_segments=10), MilConfig())

    for p in proposals:
        assert p.t_start == pytest.approx(round(p.t_start / 2.56) * 2.56)
        assert p.t_end == pytest.approx(round(p.t_end / 2.56) * 2.56)


class _Video:
    def __init__(self, video_id, features, duration):
        self.video_id = video_id
        self.features = features
        self.duration = duration


def test_detect_all_matches_sequential_detection(rng):
    params = init_params(4, 3, seed=5)
    videos = [_Video(f"v{i}", rng.normal(size=(int(rng.integers(20, 40)), 4)), 20.0) for i in range(6)]
    config = DetectConfig(score_mode=ScoreMode.SOFTMAX_ONLY)

    results = detector.detect_all(params, videos, config, MilConfig(), threads=3)

    assert list(results) == [v.video_id for v in videos]
    for video in videos:
        assert results[video.video_id] == detector.detect(params, video.features, 20.0, config, MilConfig())


def test_write_detections_schema(tmp_path):
    results = {"v0": [Proposal(class_id=1, t_start=0.0, t_end=1.28, score=0.7)], "v1": []}

    detector.write_detections(results, ["a", "b"], tmp_path / "dets.json")

    data = json.loads((tmp_path / "dets.json").read_text())
    assert data == {"results": {"v0": [{"label": "b", "segment": [0.0, 1.28], "score": 0.7}], "v1": []}}
