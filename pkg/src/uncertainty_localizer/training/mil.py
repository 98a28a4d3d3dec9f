"""
Multiple Instance Learning Heads
Pseudo action/background selection, video-level aggregation and the three training losses
"""

import logging
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..nn import model as segment_model
from ..nn.model import ForwardOut, ModelParams
from ..nn.numerics import Matrix, bottomk_indices, l2_norm, l2_norm_grad, softmax, softmax_backward, topk_indices
from ..utils.config import MilConfig
from ..utils.errors import ShapeError


logger = logging.getLogger(__name__)

LABEL_TOLERANCE = 1e-9


class PseudoSelection(BaseModel):
    """Pseudo action (top-k magnitude) and pseudo background (bottom-k magnitude) segments"""
    act_indices: Tuple[int, ...]
    bkg_indices: Tuple[int, ...]


class LossBreakdown(BaseModel):
    """total = cls + alpha * um + beta * be, with gradients for every parameter block"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    total: float
    cls: float
    um: float
    be: float
    grads: Dict[str, np.ndarray] = Field(default_factory=dict)
    act_magnitude: float = 0.0  # batch mean of ||mean pseudo action feature||
    bkg_magnitude: float = 0.0


def _column_topk(scores: Matrix, k: int) -> np.ndarray:
    """(k, C) row indices of the k largest entries per column, ties to the lower index"""
    if not 1 <= k <= scores.shape[0]:
        raise ValueError(f"k={k} out of range for {scores.shape[0]} segments")
    return np.argsort(-scores, axis=0, kind="stable")[:k]


def aggregate_video_score(scores: Matrix, k_act: int) -> np.ndarray:
    """Per-class mean of the k_act largest segment scores"""
    scores = np.asarray(scores, dtype=np.float64)
    top = _column_topk(scores, k_act)
    return np.take_along_axis(scores, top, axis=0).mean(axis=0)


def video_probabilities(aggregated: np.ndarray) -> np.ndarray:
    return softmax(aggregated)


def select_pseudo(magnitudes: np.ndarray, k_act: int, k_bkg: int) -> PseudoSelection:
    return PseudoSelection(
        act_indices=tuple(int(i) for i in topk_indices(magnitudes, k_act)),
        bkg_indices=tuple(int(i) for i in bottomk_indices(magnitudes, k_bkg)),
    )


def uncertainty(magnitude: Union[float, np.ndarray], m: float) -> Union[float, np.ndarray]:
    """P(d=1 | segment) = min(m, ||f||) / m"""
    if m <= 0:
        raise ValueError(f"m must be > 0, got {m}")
    value = np.minimum(m, np.asarray(magnitude, dtype=np.float64)) / m
    return float(value) if np.ndim(value) == 0 else value


def normalize_labels(labels: np.ndarray) -> np.ndarray:
    """Divide each multi-hot row by its number of positives"""
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    sums = labels.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("every video needs at least one positive label")
    return labels / sums


def loss_cls(video_probs: np.ndarray, labels: np.ndarray, eps: float = 1e-12) -> float:
    """Cross entropy against normalized video-level labels, averaged over videos"""
    probs = np.atleast_2d(np.asarray(video_probs, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if probs.shape != labels.shape:
        raise ShapeError(f"probs {probs.shape} and labels {labels.shape} disagree")
    if np.any(np.abs(labels.sum(axis=1) - 1.0) > LABEL_TOLERANCE):
        raise ValueError("label rows must be normalized to sum to 1")
    return float(np.sum(-labels * np.log(np.maximum(probs, eps))) / probs.shape[0])


def loss_um(
    embedded: Union[Matrix, Sequence[Matrix]],
    selection: Union[PseudoSelection, Sequence[PseudoSelection]],
    m: float,
) -> float:
    """(max(0, m - ||mean act feature||) + ||mean bkg feature||)^2, averaged over videos"""
    pairs = _batch(embedded, selection)
    return float(np.mean([_um_term(e, s, m)[0] for e, s in pairs]))


def loss_be(
    scores: Union[Matrix, Sequence[Matrix]],
    selection: Union[PseudoSelection, Sequence[PseudoSelection]],
    eps: float = 1e-12,
) -> float:
    """Negative mean log of the averaged background class distribution"""
    pairs = _batch(scores, selection)
    return float(np.mean([_be_term(s, sel, eps)[0] for s, sel in pairs]))


def loss_total(
    params: ModelParams,
    outs: Sequence[ForwardOut],
    labels: np.ndarray,
    config: MilConfig,
) -> LossBreakdown:
    """
    Full objective with analytic gradients

    Selection indices are constants of the backward pass. Videos are
    processed and reduced in index order.

    Args:
        params: current model parameters
        outs: forward outputs recorded with a GradTape, one per video
        labels: (N, C) multi-hot or already normalized labels
        config: loss hyper-parameters
    """
    if not outs:
        raise ValueError("empty batch")
    targets = normalize_labels(labels)
    if targets.shape != (len(outs), params.num_classes):
        raise ShapeError(f"labels {targets.shape} do not match batch of {len(outs)} x {params.num_classes}")

    n = len(outs)
    grads = {name: np.zeros_like(block) for name, block in params.blocks()}
    cls_terms: List[float] = []
    um_terms: List[float] = []
    be_terms: List[float] = []
    act_norms: List[float] = []
    bkg_norms: List[float] = []

    for out, target in zip(outs, targets):
        if out.tape is None:
            raise ValueError("forward outputs must be recorded with record=True")
        num_segments = out.scores.shape[0]
        selection = select_pseudo(out.magnitudes, config.k_act(num_segments), config.k_bkg(num_segments))

        cls_value, grad_scores = _cls_term(out.scores, target, config.k_act(num_segments), config.eps)
        um_value, grad_embedded, act_norm, bkg_norm = _um_term(out.embedded, selection, config.m)
        be_value, grad_be = _be_term(out.scores, selection, config.eps)

        cls_terms.append(cls_value)
        um_terms.append(um_value)
        be_terms.append(be_value)
        act_norms.append(act_norm)
        bkg_norms.append(bkg_norm)

        upstream_scores = (grad_scores + config.beta * grad_be) / n
        upstream_embedded = config.alpha * grad_embedded / n
        video_grads = segment_model.backward(params, out.tape, upstream_scores, upstream_embedded)
        for name in grads:
            grads[name] += video_grads[name]

    cls = float(np.mean(cls_terms))
    um = float(np.mean(um_terms))
    be = float(np.mean(be_terms))
    return LossBreakdown(
        total=cls + config.alpha * um + config.beta * be,
        cls=cls,
        um=um,
        be=be,
        grads=grads,
        act_magnitude=float(np.mean(act_norms)),
        bkg_magnitude=float(np.mean(bkg_norms)),
    )


def _cls_term(scores: Matrix, target: np.ndarray, k_act: int, eps: float) -> Tuple[float, Matrix]:
    top = _column_topk(scores, k_act)
    aggregated = np.take_along_axis(scores, top, axis=0).mean(axis=0)
    probs = softmax(aggregated)
    clamped = np.maximum(probs, eps)
    value = float(np.sum(-target * np.log(clamped)))

    grad_probs = np.where(probs >= eps, -target / clamped, 0.0)
    grad_aggregated = softmax_backward(probs, grad_probs)
    grad_scores = np.zeros_like(scores)
    grad_scores[top, np.arange(scores.shape[1])] = grad_aggregated / k_act
    return value, grad_scores


def _um_term(embedded: Matrix, selection: PseudoSelection, m: float) -> Tuple[float, Matrix, float, float]:
    act = _indices(selection.act_indices)
    bkg = _indices(selection.bkg_indices)
    act_mean = embedded[act].mean(axis=0)
    bkg_mean = embedded[bkg].mean(axis=0)
    act_norm = float(l2_norm(act_mean))
    bkg_norm = float(l2_norm(bkg_mean))

    hinge = max(0.0, m - act_norm) + bkg_norm
    value = hinge ** 2

    grad_embedded = np.zeros_like(embedded)
    if act_norm < m:
        grad_embedded[act] += -2.0 * hinge * l2_norm_grad(act_mean) / len(act)
    grad_embedded[bkg] += 2.0 * hinge * l2_norm_grad(bkg_mean) / len(bkg)
    return value, grad_embedded, act_norm, bkg_norm


def _be_term(scores: Matrix, selection: PseudoSelection, eps: float) -> Tuple[float, Matrix]:
    bkg = _indices(selection.bkg_indices)
    num_classes = scores.shape[1]
    probs = softmax(scores[bkg], axis=1)
    mean_probs = probs.mean(axis=0)
    clamped = np.maximum(mean_probs, eps)
    value = float(np.sum(-np.log(clamped)) / num_classes)

    grad_mean = np.where(mean_probs >= eps, -1.0 / (num_classes * clamped), 0.0)
    grad_probs = np.broadcast_to(grad_mean / len(bkg), probs.shape)
    grad_scores = np.zeros_like(scores)
    grad_scores[bkg] += softmax_backward(probs, grad_probs, axis=1)
    return value, grad_scores


def _indices(values: Sequence[int]) -> np.ndarray:
    if len(values) == 0:
        raise ValueError("empty pseudo selection")
    return np.asarray(values, dtype=np.intp)


def _batch(arrays, selections) -> List[Tuple[Matrix, PseudoSelection]]:
    if isinstance(selections, PseudoSelection):
        selections = [selections]
        arrays = [arrays]
    if len(arrays) != len(selections):
        raise ShapeError(f"{len(arrays)} videos but {len(selections)} selections")
    if not selections:
        raise ValueError("empty batch")
    return [(np.asarray(a, dtype=np.float64), s) for a, s in zip(arrays, selections)]
