"""
Weakly-Supervised Trainer
Mini-batch Adam optimization of the MIL objective with resumable state and gradient checking
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .mil import loss_total
from ..nn import model as segment_model
from ..nn.model import ModelParams, PARAM_BLOCKS, init_params, save_params
from ..utils.config import MilConfig, TrainConfig
from ..utils.errors import DatasetError, NumericalError


class SamplingMode(str, Enum):
    TRAIN = "train"
    TEST = "test"


class TrainingSample(BaseModel):
    """A weakly-labelled video: features and a video-level multi-hot label, nothing else"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    video_id: str
    features: np.ndarray
    label: np.ndarray


class StepRecord(BaseModel):
    step: int
    cls: float
    um: float
    be: float
    total: float
    act_magnitude: float
    bkg_magnitude: float


class TrainState(BaseModel):
    """Parameters, Adam moments, step counter and RNG state; enough to resume bit-exactly"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: ModelParams
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]
    step: int = 0
    rng_state: Dict[str, Any] = Field(default_factory=dict)
    epoch_order: List[int] = Field(default_factory=list)
    epoch_position: int = 0
    running: Dict[str, float] = Field(default_factory=dict)

    @classmethod
    def fresh(cls, params: ModelParams, seed: int) -> "TrainState":
        return cls(
            params=params,
            adam_m={name: np.zeros_like(block) for name, block in params.blocks()},
            adam_v={name: np.zeros_like(block) for name, block in params.blocks()},
            rng_state=np.random.default_rng(seed).bit_generator.state,
        )

    def save(self, path: Union[str, Path]) -> None:
        arrays: Dict[str, np.ndarray] = {}
        for name, block in self.params.blocks():
            arrays[f"param__{name}"] = block
            arrays[f"adam_m__{name}"] = self.adam_m[name]
            arrays[f"adam_v__{name}"] = self.adam_v[name]
        meta = {
            "step": self.step,
            "rng_state": self.rng_state,
            "epoch_order": self.epoch_order,
            "epoch_position": self.epoch_position,
            "running": self.running,
        }
        with open(path, "wb") as f:
            np.savez(f, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainState":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            params = ModelParams(**{name: np.array(data[f"param__{name}"]) for name in PARAM_BLOCKS})
            adam_m = {name: np.array(data[f"adam_m__{name}"]) for name in PARAM_BLOCKS}
            adam_v = {name: np.array(data[f"adam_v__{name}"]) for name in PARAM_BLOCKS}
        return cls(params=params, adam_m=adam_m, adam_v=adam_v, **meta)


class TrainResult(BaseModel):
    state: TrainState
    history: List[StepRecord]


class GradCheckReport(BaseModel):
    max_rel_err: float
    per_block: Dict[str, float]
    entries_checked: int
    floored: Dict[str, int] = Field(default_factory=dict)  # entries with |a| + |n| below the floor


def sample_segments(
    num_original: int,
    num_segments: int,
    mode: Union[SamplingMode, str],
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Map T sampled positions onto an original sequence of L_n segments

    test: index_t = floor(t * L_n / T)
    train: one uniform draw inside each of T equal bins (stratified)
    """
    if num_original < 1 or num_segments < 1:
        raise ValueError(f"invalid lengths L={num_original}, T={num_segments}")
    mode = SamplingMode(mode)
    starts = np.arange(num_segments) * num_original / num_segments

    if mode is SamplingMode.TEST:
        indices = np.floor(starts)
    else:
        if rng is None:
            raise ValueError("train-mode sampling needs an rng")
        width = num_original / num_segments
        indices = np.floor(starts + rng.random(num_segments) * width)
    return np.minimum(indices.astype(np.int64), num_original - 1)


def adam_step(
    state: TrainState,
    gradients: Dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    """Bias-corrected Adam update of every parameter block"""
    step = state.step + 1
    for name in PARAM_BLOCKS:
        if not np.all(np.isfinite(gradients[name])):
            raise NumericalError(f"non-finite gradient in {name} at step {step}", block=name, step=step)

    blocks: Dict[str, np.ndarray] = {}
    adam_m: Dict[str, np.ndarray] = {}
    adam_v: Dict[str, np.ndarray] = {}
    for name, value in state.params.blocks():
        grad = gradients[name]
        adam_m[name] = beta1 * state.adam_m[name] + (1 - beta1) * grad
        adam_v[name] = beta2 * state.adam_v[name] + (1 - beta2) * grad ** 2
        m_hat = adam_m[name] / (1 - beta1 ** step)
        v_hat = adam_v[name] / (1 - beta2 ** step)
        blocks[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)

    return state.model_copy(update={
        "params": ModelParams(**blocks),
        "adam_m": adam_m,
        "adam_v": adam_v,
        "step": step,
    })


class Trainer:
    """
    Optimizes cls + alpha * um + beta * be over a list of weakly-labelled videos

    Every step draws a batch in epoch order (reshuffled with the run RNG at
    each epoch boundary), samples T segments per video, and reduces the
    per-video gradients in batch order so runs are bit-reproducible.
    """

    LOG_FILE = "train_log.tsv"
    STATE_FILE = "train_state.npz"
    MODEL_FILE = "model.umck"
    MANIFEST_FILE = "run_manifest.json"

    def __init__(self, config: TrainConfig, kernel_size: int = 3, out_dir: Optional[Union[str, Path]] = None):
        self.config = config
        self.kernel_size = kernel_size
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.logger = logging.getLogger(self.__class__.__name__)

    def train(
        self,
        samples: Sequence[TrainingSample],
        resume_from: Optional[Union[str, Path]] = None,
        dataset_hash: Optional[str] = None,
        config_hash: Optional[str] = None,
        on_step: Optional[Callable[[StepRecord], None]] = None,
    ) -> TrainResult:
        feature_dim, num_classes = self._check_samples(samples)

        if resume_from is not None:
            state = TrainState.load(resume_from)
            self.logger.info(f"Resuming from {resume_from} at step {state.step}")
        else:
            params = init_params(feature_dim, num_classes, self.kernel_size, self.config.seed)
            state = TrainState.fresh(params, self.config.seed)

        if state.params.feature_dim != feature_dim or state.params.num_classes != num_classes:
            raise DatasetError(
                f"state expects F={state.params.feature_dim}, C={state.params.num_classes}; "
                f"dataset has F={feature_dim}, C={num_classes}"
            )

        log_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir / self.LOG_FILE
            log_file = open(log_path, "a" if resume_from is not None and log_path.exists() else "w")
            if log_file.tell() == 0:
                log_file.write("step\tcls\tum\tbe\ttotal\n")

        history: List[StepRecord] = []
        try:
            while state.step < self.config.steps:
                state, record = self._step(state, samples)
                history.append(record)
                if log_file is not None:
                    log_file.write(
                        f"{record.step}\t{record.cls:.10g}\t{record.um:.10g}\t{record.be:.10g}\t{record.total:.10g}\n"
                    )
                if on_step is not None:
                    on_step(record)
                if self.config.log_interval and record.step % self.config.log_interval == 0:
                    self.logger.info(
                        f"step {record.step}: total={record.total:.4f} cls={record.cls:.4f} "
                        f"um={record.um:.2f} be={record.be:.4f} "
                        f"|act|={record.act_magnitude:.2f} |bkg|={record.bkg_magnitude:.2f}"
                    )
                if self._should_checkpoint(record.step):
                    self._checkpoint(state)
        finally:
            if log_file is not None:
                log_file.close()

        if self.out_dir is not None:
            save_params(state.params, self.out_dir / self.MODEL_FILE)
            state.save(self.out_dir / self.STATE_FILE)
            self._write_manifest(state, history, dataset_hash, config_hash)

        return TrainResult(state=state, history=history)

    def _step(self, state: TrainState, samples: Sequence[TrainingSample]) -> Tuple[TrainState, StepRecord]:
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        order = list(state.epoch_order)
        position = state.epoch_position

        batch: List[int] = []
        for _ in range(self.config.batch_size):
            if position >= len(order):
                order = [int(i) for i in rng.permutation(len(samples))]
                position = 0
            batch.append(order[position])
            position += 1

        outs = []
        for index in batch:
            sample = samples[index]
            picked = sample_segments(sample.features.shape[0], self.config.num_segments, SamplingMode.TRAIN, rng)
            outs.append(segment_model.forward(state.params, sample.features[picked], record=True))
        labels = np.stack([samples[index].label for index in batch])

        step = state.step + 1
        breakdown = loss_total(state.params, outs, labels, self.config.mil)
        if not np.isfinite(breakdown.total):
            raise NumericalError(
                f"non-finite loss at step {step}: cls={breakdown.cls} um={breakdown.um} be={breakdown.be}",
                step=step,
            )

        state = adam_step(
            state,
            breakdown.grads,
            self.config.learning_rate,
            self.config.adam_beta1,
            self.config.adam_beta2,
            self.config.adam_eps,
        )
        record = StepRecord(
            step=step,
            cls=breakdown.cls,
            um=breakdown.um,
            be=breakdown.be,
            total=breakdown.total,
            act_magnitude=breakdown.act_magnitude,
            bkg_magnitude=breakdown.bkg_magnitude,
        )
        running = {
            key: 0.98 * state.running.get(key, value) + 0.02 * value
            for key, value in (("cls", record.cls), ("um", record.um), ("be", record.be), ("total", record.total))
        }
        state = state.model_copy(update={
            "rng_state": rng.bit_generator.state,
            "epoch_order": order,
            "epoch_position": position,
            "running": running,
        })
        return state, record

    def _check_samples(self, samples: Sequence[TrainingSample]) -> Tuple[int, int]:
        if not samples:
            raise DatasetError("no training videos")
        feature_dim = samples[0].features.shape[1]
        num_classes = samples[0].label.shape[0]
        for sample in samples:
            if sample.features.ndim != 2 or sample.features.shape[1] != feature_dim:
                raise DatasetError(f"{sample.video_id}: features {sample.features.shape}, expected (L, {feature_dim})")
            if sample.label.shape != (num_classes,):
                raise DatasetError(f"{sample.video_id}: label length {sample.label.shape}, expected {num_classes}")
            if sample.label.sum() <= 0:
                raise DatasetError(f"{sample.video_id}: video has no positive label")
        return feature_dim, num_classes

    def _should_checkpoint(self, step: int) -> bool:
        interval = self.config.checkpoint_interval
        return self.out_dir is not None and interval > 0 and step % interval == 0

    def _checkpoint(self, state: TrainState) -> None:
        ckpt_dir = self.out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_params(state.params, ckpt_dir / f"step_{state.step:06d}.umck")
        state.save(ckpt_dir / f"step_{state.step:06d}.npz")
        self.logger.info(f"Checkpoint written at step {state.step}")

    def _write_manifest(
        self,
        state: TrainState,
        history: List[StepRecord],
        dataset_hash: Optional[str],
        config_hash: Optional[str],
    ) -> None:
        manifest = {
            "seed": self.config.seed,
            "config_hash": config_hash,
            "dataset_hash": dataset_hash,
            "steps": state.step,
            "final": history[-1].model_dump() if history else None,
        }
        (self.out_dir / self.MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def gradient_check(
    params: ModelParams,
    batch: Sequence[TrainingSample],
    config: MilConfig,
    h: float = 1e-5,
    floor: float = 1e-4,
) -> GradCheckReport:
    """
    Compare analytic gradients of the total loss with central differences

    Every entry of every parameter block is perturbed. Relative error is
    |a - n| / max(|a| + |n|, floor); entries under the floor are counted
    per block in `floored`.
    """
    features = [np.asarray(sample.features, dtype=np.float64) for sample in batch]
    labels = np.stack([sample.label for sample in batch])

    def objective(candidate: ModelParams) -> float:
        outs = [segment_model.forward(candidate, x, record=True) for x in features]
        return loss_total(candidate, outs, labels, config).total

    outs = [segment_model.forward(params, x, record=True) for x in features]
    analytic = loss_total(params, outs, labels, config).grads

    per_block: Dict[str, float] = {}
    floored: Dict[str, int] = {}
    checked = 0
    for name, block in params.blocks():
        worst = 0.0
        floored[name] = 0
        for index in np.ndindex(block.shape):
            plus = block.copy()
            minus = block.copy()
            plus[index] += h
            minus[index] -= h
            numeric = (objective(params.replace(**{name: plus})) - objective(params.replace(**{name: minus}))) / (2 * h)
            a = float(analytic[name][index])
            if abs(a) + abs(numeric) < floor:
                floored[name] += 1
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), floor))
            checked += 1
        per_block[name] = worst

    return GradCheckReport(
        max_rel_err=max(per_block.values()), per_block=per_block, entries_checked=checked, floored=floored
    )


def gradcheck_instance(
    seed: int,
    num_segments: int = 8,
    feature_dim: int = 4,
    num_classes: int = 3,
    num_videos: int = 2,
    kernel_size: int = 3,
) -> Tuple[ModelParams, List[TrainingSample]]:
    """Random tiny params (non-zero biases) and a random weakly-labelled batch"""
    rng = np.random.default_rng(seed)
    params = init_params(feature_dim, num_classes, kernel_size, seed).replace(
        embed_bias=rng.normal(0.0, 0.1, feature_dim),
        cls_bias=rng.normal(0.0, 0.1, num_classes),
    )
    samples = []
    for n in range(num_videos):
        label = (rng.random(num_classes) < 0.5).astype(np.float64)
        label[rng.integers(num_classes)] = 1.0
        samples.append(TrainingSample(
            video_id=f"gradcheck_{n}",
            features=rng.normal(0.0, 1.0, (num_segments, feature_dim)),
            label=label,
        ))
    return params, samples


def train(
    samples: Sequence[TrainingSample],
    config: TrainConfig,
    kernel_size: int = 3,
    out_dir: Optional[Union[str, Path]] = None,
    **kwargs: Any,
) -> TrainResult:
    """Functional entry point around Trainer"""
    return Trainer(config, kernel_size=kernel_size, out_dir=out_dir).train(samples, **kwargs)
