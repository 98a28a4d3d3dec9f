"""
uncertainty-localizer 配置管理模組
負責訓練、推論、評估與合成資料配置的載入、驗證與管理
"""

import hashlib
import json
import os
from enum import Enum
from pathlib import Path
from typing import List, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


THUMOS_THRESHOLDS: List[float] = [round(0.1 * i, 2) for i in range(1, 8)]
ACTIVITYNET_THRESHOLDS: List[float] = [round(0.5 + 0.05 * i, 2) for i in range(10)]
THETA_SEG_GRID: List[float] = [round(0.025 * i, 3) for i in range(11)]
M_SWEEP: List[float] = [10.0, 25.0, 50.0, 100.0, 150.0, 200.0, 250.0]


class ScoreMode(str, Enum):
    """Segment scoring used at inference"""
    FUSED = "fused"
    SOFTMAX_ONLY = "softmax_only"
    MINMAX_FUSED = "minmax_fused"


class BackgroundMode(str, Enum):
    """Background generation mode for synthetic videos"""
    STATIC = "static"
    DYNAMIC = "dynamic"
    MIXED = "mixed"


class MilConfig(BaseModel):
    """多示例學習與損失函數的超參數"""

    model_config = ConfigDict(extra="forbid")

    m: float = Field(default=100.0, description="最大特徵幅值")
    r_act: float = Field(default=9.0, description="k^act 的比例參數")
    r_bkg: float = Field(default=4.0, description="k^bkg 的比例參數")
    alpha: float = Field(default=5e-4, description="L_um 權重")
    beta: float = Field(default=1.0, description="L_be 權重")
    eps: float = Field(default=1e-12, description="log 下限")

    @field_validator("m", "eps")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be > 0")
        return value

    @field_validator("r_act", "r_bkg")
    @classmethod
    def _ratio(cls, value: float) -> float:
        if value < 1:
            raise ValueError("ratio must be >= 1")
        return value

    @field_validator("alpha", "beta")
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("loss weight must be >= 0")
        return value

    def k_act(self, num_segments: int) -> int:
        """Number of pseudo action segments (also the top-k of video aggregation)"""
        return max(1, int(num_segments // self.r_act))

    def k_bkg(self, num_segments: int) -> int:
        """Number of pseudo background segments"""
        return max(1, int(num_segments // self.r_bkg))


class TrainConfig(BaseModel):
    """訓練配置"""

    model_config = ConfigDict(extra="forbid")

    num_segments: int = Field(default=750, description="每支影片取樣的片段數 T")
    batch_size: int = Field(default=16, description="批次大小 N")
    steps: int = Field(default=2000, description="最佳化步數")
    learning_rate: float = Field(default=1e-4, description="Adam 學習率")
    adam_beta1: float = Field(default=0.9)
    adam_beta2: float = Field(default=0.999)
    adam_eps: float = Field(default=1e-8)
    seed: int = Field(default=0, description="隨機種子")
    checkpoint_interval: int = Field(default=0, description="檢查點間隔（0 = 只存最終結果）")
    log_interval: int = Field(default=50, description="日誌輸出間隔")
    mil: MilConfig = Field(default_factory=MilConfig)

    @field_validator("num_segments", "batch_size", "steps")
    @classmethod
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @model_validator(mode="after")
    def _pseudo_sets_fit(self) -> "TrainConfig":
        k_act = self.mil.k_act(self.num_segments)
        k_bkg = self.mil.k_bkg(self.num_segments)
        if k_act + k_bkg > self.num_segments:
            raise ValueError(
                f"pseudo action and background sets overlap: k_act={k_act} + k_bkg={k_bkg} > T={self.num_segments}"
            )
        return self


class DetectConfig(BaseModel):
    """推論配置"""

    model_config = ConfigDict(extra="forbid")

    theta_vid: float = Field(default=0.2, description="影片層級類別閾值")
    theta_seg_list: List[float] = Field(default_factory=lambda: list(THETA_SEG_GRID), description="片段候選閾值")
    nms_iou: float = Field(default=0.6, description="NMS tIoU 閾值")
    score_mode: ScoreMode = Field(default=ScoreMode.FUSED, description="片段分數計算方式")
    outer_inflation: float = Field(default=0.25, description="外圍區域擴張比例")
    num_segments: Optional[int] = Field(default=None, description="推論取樣片段數（None = 原始解析度）")

    @field_validator("theta_seg_list")
    @classmethod
    def _non_empty(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("theta_seg_list must not be empty")
        return value

    @field_validator("nms_iou")
    @classmethod
    def _unit_interval(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError("must lie in [0, 1]")
        return value


class SyntheticSpec(BaseModel):
    """合成資料集規格"""

    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(default=5)
    feature_dim: int = Field(default=32)
    num_train: int = Field(default=200)
    num_test: int = Field(default=50)
    min_segments: int = Field(default=60)
    max_segments: int = Field(default=120)
    min_instances: int = Field(default=1)
    max_instances: int = Field(default=3)
    min_instance_len: int = Field(default=6)
    max_instance_len: int = Field(default=20)
    action_scale: float = Field(default=3.0, description="類別原型的範數")
    action_noise: float = Field(default=0.3, description="每維等向雜訊標準差")
    nuisance_noise: float = Field(default=0.5, description="與類別無關子空間中的每維雜訊標準差")
    static_jitter: float = Field(default=0.05, description="靜態背景的每維抖動")
    background_mode: BackgroundMode = Field(default=BackgroundMode.MIXED)
    prototype_seed: int = Field(default=1234, description="類別原型的隨機種子")

    @model_validator(mode="after")
    def _ranges(self) -> "SyntheticSpec":
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.feature_dim < 1 or self.num_train + self.num_test < 1:
            raise ValueError("feature_dim and video counts must be positive")
        if self.feature_dim <= self.num_classes:
            raise ValueError("feature_dim must exceed num_classes to leave class-free background directions")
        if min(self.action_scale, self.action_noise, self.nuisance_noise, self.static_jitter) < 0:
            raise ValueError("scales and noise levels must be >= 0")
        if not 1 <= self.min_segments <= self.max_segments:
            raise ValueError("segment range is empty")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("instance range is empty")
        if not 1 <= self.min_instance_len <= self.max_instance_len:
            raise ValueError("instance length range is empty")
        if self.max_instances * self.max_instance_len > self.min_segments:
            raise ValueError("instances cannot fit into the shortest video")
        return self

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SyntheticSpec":
        return _load_model(cls, path)


class RunConfig(BaseModel):
    """單次實驗的完整配置（訓練 + 推論 + 評估）"""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, description="實驗隨機種子")
    kernel_size: int = Field(default=3, description="嵌入卷積核大小 K")
    train: TrainConfig = Field(default_factory=TrainConfig)
    detect: DetectConfig = Field(default_factory=DetectConfig)
    eval_thresholds: Union[str, List[float]] = Field(default="thumos", description="tIoU 閾值或 thumos/activitynet")
    train_subset: str = Field(default="train")
    test_subset: str = Field(default="test")

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value < 1 or value % 2 == 0:
            raise ValueError("kernel_size must be a positive odd number")
        return value

    @field_validator("eval_thresholds")
    @classmethod
    def _known_grid(cls, value: Union[str, List[float]]) -> Union[str, List[float]]:
        resolve_thresholds(value)
        return value

    @property
    def mil(self) -> MilConfig:
        return self.train.mil

    def train_config(self) -> TrainConfig:
        """TrainConfig with the run seed applied"""
        return self.train.model_copy(update={"seed": self.seed})

    def thresholds(self) -> List[float]:
        return resolve_thresholds(self.eval_thresholds)

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        return _load_model(cls, path)


class Settings(BaseModel):
    """行程層級設定（不影響實驗結果）"""

    log_level: str = Field(default="INFO", description="日誌級別")
    log_file: Optional[str] = Field(default=None, description="日誌檔案路徑")
    threads: int = Field(default=1, description="推論工作執行緒數")

    @classmethod
    def from_env(cls) -> "Settings":
        """從環境變數載入設定"""
        load_dotenv()

        try:
            threads = int(os.getenv("UMLOC_THREADS", "1"))
        except ValueError as e:
            raise ConfigError(f"UMLOC_THREADS must be an integer: {e}") from e

        return cls(
            log_level=os.getenv("UMLOC_LOG_LEVEL", "INFO"),
            log_file=os.getenv("UMLOC_LOG_FILE"),
            threads=max(1, threads),
        )


def resolve_thresholds(value: Union[str, List[float]]) -> List[float]:
    """Turn a grid name or an explicit list into tIoU thresholds"""
    if isinstance(value, str):
        grids = {"thumos": THUMOS_THRESHOLDS, "activitynet": ACTIVITYNET_THRESHOLDS}
        if value.lower() not in grids:
            raise ConfigError(f"Unknown threshold grid: {value}")
        return list(grids[value.lower()])
    if not value or any(not 0.0 < t <= 1.0 for t in value):
        raise ConfigError(f"tIoU thresholds must be a non-empty list in (0, 1]: {value}")
    return [float(t) for t in value]


def _load_model(model_cls, path: Union[str, Path]):
    # 讀取 JSON 並驗證；未知欄位一律拒絕
    try:
        return model_cls.model_validate_json(Path(path).read_text())
    except ValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__} in {path}: {e}") from e
