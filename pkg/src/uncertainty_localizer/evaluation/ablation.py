"""
Ablation Runner
Scoring-mode ablation over three loss configurations and the max-magnitude sweep
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from pydantic import BaseModel

from .evalkit import EvalReport, evaluate
from ..data.datakit import VideoRecord
from ..inference.detector import detect_all, detections_to_json
from ..nn.model import ModelParams, load_params
from ..training.trainer import Trainer
from ..utils.config import M_SWEEP, MilConfig, RunConfig, ScoreMode


class AblationRow(BaseModel):
    name: str
    checkpoint: str
    score_mode: ScoreMode
    m: float
    map_per_threshold: List[float]
    average_map: float


class AblationReport(BaseModel):
    thresholds: List[float]
    modes: List[AblationRow]
    m_sweep: List[AblationRow]

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.model_dump(mode="json"), indent=2))


# (row name, loss configuration, scoring mode), in reporting order
MODE_ROWS = (
    ("softmax_only", "cls", ScoreMode.SOFTMAX_ONLY),
    ("minmax_fused", "cls", ScoreMode.MINMAX_FUSED),
    ("fused+L_um", "cls+um", ScoreMode.FUSED),
    ("fused+L_um+L_be", "full", ScoreMode.FUSED),
)


class AblationRunner:
    """
    Trains (or reuses) one checkpoint per loss configuration and scores each
    ablation row on the held-out subset.

    Checkpoints live under out_dir/<configuration>/model.umck; an existing
    file is loaded instead of retrained.
    """

    def __init__(self, config: RunConfig, out_dir: Union[str, Path], threads: int = 1):
        self.config = config
        self.out_dir = Path(out_dir)
        self.threads = threads
        self.logger = logging.getLogger(self.__class__.__name__)
        self._params: Dict[str, ModelParams] = {}

    def loss_configuration(self, name: str, m: Optional[float] = None) -> MilConfig:
        mil = self.config.mil
        update: Dict[str, float] = {}
        if name == "cls":
            update = {"alpha": 0.0, "beta": 0.0}
        elif name == "cls+um":
            update = {"beta": 0.0}
        elif name != "full":
            raise ValueError(f"unknown loss configuration: {name}")
        if m is not None:
            update["m"] = m
        return mil.model_copy(update=update)

    def checkpoint(self, name: str, train_records: Sequence[VideoRecord], m: Optional[float] = None) -> ModelParams:
        if m is not None and m == self.config.mil.m:
            m = None
        key = name if m is None else f"{name}_m{m:g}"
        if key in self._params:
            return self._params[key]

        run_dir = self.out_dir / key
        model_path = run_dir / Trainer.MODEL_FILE
        if model_path.exists():
            self.logger.info(f"Reusing checkpoint {model_path}")
            params = load_params(model_path)
        else:
            self.logger.info(f"Training '{key}' checkpoint")
            train_config = self.config.train_config().model_copy(update={"mil": self.loss_configuration(name, m)})
            trainer = Trainer(train_config, kernel_size=self.config.kernel_size, out_dir=run_dir)
            params = trainer.train(
                [record.to_training_sample() for record in train_records],
                config_hash=self.config.config_hash(),
            ).state.params

        self._params[key] = params
        return params

    def score(
        self,
        params: ModelParams,
        test_records: Sequence[VideoRecord],
        ground_truth: Union[str, Path, Dict],
        class_names: Sequence[str],
        mode: ScoreMode,
        mil: MilConfig,
    ) -> EvalReport:
        detect_config = self.config.detect.model_copy(update={"score_mode": mode})
        results = detect_all(params, test_records, detect_config, mil, self.threads)
        return evaluate(
            detections_to_json(results, class_names),
            ground_truth,
            self.config.thresholds(),
            subset=self.config.test_subset,
            class_names=class_names,
        )

    def run(
        self,
        train_records: Sequence[VideoRecord],
        test_records: Sequence[VideoRecord],
        ground_truth: Union[str, Path, Dict],
        class_names: Sequence[str],
        m_values: Sequence[float] = M_SWEEP,
    ) -> AblationReport:
        self.out_dir.mkdir(parents=True, exist_ok=True)

        modes: List[AblationRow] = []
        for row_name, loss_name, mode in MODE_ROWS:
            params = self.checkpoint(loss_name, train_records)
            mil = self.loss_configuration(loss_name)
            report = self.score(params, test_records, ground_truth, class_names, mode, mil)
            modes.append(_row(row_name, loss_name, mode, mil.m, report))
            self.logger.info(f"{row_name}: average mAP {report.average_map:.4f}")

        sweep: List[AblationRow] = []
        for m in m_values:
            params = self.checkpoint("full", train_records, m=m)
            mil = self.loss_configuration("full", m)
            report = self.score(params, test_records, ground_truth, class_names, ScoreMode.FUSED, mil)
            checkpoint = "full" if m == self.config.mil.m else f"full_m{m:g}"
            sweep.append(_row(f"m={m:g}", checkpoint, ScoreMode.FUSED, m, report))
            self.logger.info(f"m={m:g}: average mAP {report.average_map:.4f}")

        result = AblationReport(thresholds=self.config.thresholds(), modes=modes, m_sweep=sweep)
        result.write(self.out_dir / "ablation.json")
        return result


def _row(name: str, checkpoint: str, mode: ScoreMode, m: float, report: EvalReport) -> AblationRow:
    return AblationRow(
        name=name,
        checkpoint=checkpoint,
        score_mode=mode,
        m=m,
        map_per_threshold=report.map_per_threshold,
        average_map=report.average_map,
    )
