"""
片段模型：特徵嵌入與片段層級分類器
提供參數初始化、前向/反向傳播與檢查點序列化
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import numerics
from .numerics import GradTape, Matrix
from ..utils.errors import CorruptFileError, FormatVersionError, ShapeError


logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UMCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

PARAM_BLOCKS: Tuple[str, ...] = ("embed_weights", "embed_bias", "cls_weights", "cls_bias")


class ModelParams(BaseModel):
    """
    模型參數：嵌入卷積層與片段分類器

    embed_weights: (K, F, F) 卷積核；embed_bias: (F,)
    cls_weights: (F, C) 線性分類器；cls_bias: (C,)
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    embed_weights: np.ndarray
    embed_bias: np.ndarray
    cls_weights: np.ndarray
    cls_bias: np.ndarray

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelParams":
        kernel_size, f_in, f_out = np.shape(self.embed_weights) if np.ndim(self.embed_weights) == 3 else (0, -1, -2)
        if kernel_size % 2 == 0 or f_in != f_out:
            raise ShapeError(f"embed_weights must be (odd K, F, F), got {np.shape(self.embed_weights)}")
        if np.shape(self.embed_bias) != (f_out,):
            raise ShapeError(f"embed_bias must be ({f_out},), got {np.shape(self.embed_bias)}")
        if np.ndim(self.cls_weights) != 2 or np.shape(self.cls_weights)[0] != f_out:
            raise ShapeError(f"cls_weights must be ({f_out}, C), got {np.shape(self.cls_weights)}")
        if np.shape(self.cls_bias) != (np.shape(self.cls_weights)[1],):
            raise ShapeError(f"cls_bias must be (C,), got {np.shape(self.cls_bias)}")
        for name, block in self.blocks():
            if not np.all(np.isfinite(block)):
                raise ValueError(f"{name} contains non-finite values")
        return self

    @property
    def feature_dim(self) -> int:
        return int(self.embed_weights.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.cls_weights.shape[1])

    @property
    def kernel_size(self) -> int:
        return int(self.embed_weights.shape[0])

    def blocks(self) -> Iterator[Tuple[str, np.ndarray]]:
        """(name, array) pairs in checkpoint order"""
        for name in PARAM_BLOCKS:
            yield name, getattr(self, name)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.blocks())

    def replace(self, **blocks: np.ndarray) -> "ModelParams":
        """New params with some blocks swapped (validated)"""
        values = self.as_dict()
        values.update(blocks)
        return ModelParams(**values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(np.array_equal(a, b) for (_, a), (_, b) in zip(self.blocks(), other.blocks()))


class ForwardOut(BaseModel):
    """前向輸出：嵌入特徵、片段類別分數與每個片段的特徵幅值"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    embedded: np.ndarray
    scores: np.ndarray
    magnitudes: np.ndarray
    tape: Optional[GradTape] = None


def init_params(feature_dim: int, num_classes: int, kernel_size: int = 3, seed: int = 0) -> ModelParams:
    """
    Glorot-uniform weights, zero biases

    Args:
        feature_dim: F, preserved by the embedding
        num_classes: C
        kernel_size: odd K
        seed: RNG seed, same seed gives bit-identical params
    """
    if feature_dim < 1 or num_classes < 1:
        raise ValueError(f"invalid dims F={feature_dim}, C={num_classes}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kernel_size}")

    rng = np.random.default_rng(seed)
    conv_limit = np.sqrt(6.0 / (kernel_size * feature_dim * 2))
    cls_limit = np.sqrt(6.0 / (feature_dim + num_classes))

    return ModelParams(
        embed_weights=rng.uniform(-conv_limit, conv_limit, (kernel_size, feature_dim, feature_dim)),
        embed_bias=np.zeros(feature_dim),
        cls_weights=rng.uniform(-cls_limit, cls_limit, (feature_dim, num_classes)),
        cls_bias=np.zeros(num_classes),
    )


def forward(params: ModelParams, features: Matrix, record: bool = False) -> ForwardOut:
    """
    embedded = relu(conv1d(features)), scores = linear(embedded), magnitudes = row norms of embedded

    Args:
        params: model parameters
        features: (T, F) segment features
        record: keep a GradTape for backward()
    """
    features = numerics.as_matrix(features, cols=params.feature_dim, name="features")

    pre_activation = numerics.conv1d_forward(features, params.embed_weights, params.embed_bias)
    embedded = numerics.relu_forward(pre_activation)
    scores = numerics.linear_forward(embedded, params.cls_weights, params.cls_bias)

    tape = None
    if record:
        tape = GradTape()
        tape.record("conv1d", "features", "pre_activation", ("embed_weights", "embed_bias"),
                    x=features, weights=params.embed_weights)
        tape.record("relu", "pre_activation", "embedded", x=pre_activation)
        tape.record("linear", "embedded", "scores", ("cls_weights", "cls_bias"),
                    x=embedded, weights=params.cls_weights)

    return ForwardOut(
        embedded=embedded,
        scores=scores,
        magnitudes=numerics.l2_norm(embedded, axis=1),
        tape=tape,
    )


def backward(
    params: ModelParams,
    tape: GradTape,
    grad_scores: np.ndarray,
    grad_embedded: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on the scores and the embedded features"""
    seeds = {"scores": grad_scores}
    if grad_embedded is not None:
        seeds["embedded"] = grad_embedded
    _, param_grads = tape.backward(seeds)
    return {name: param_grads.get(name, np.zeros_like(block)) for name, block in params.blocks()}


def save_params(params: ModelParams, path: Union[str, Path]) -> None:
    """Write the UMCK checkpoint: header then little-endian float64 blocks"""
    header = _HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.feature_dim, params.num_classes, params.kernel_size
    )
    payload = b"".join(np.ascontiguousarray(block, dtype="<f8").tobytes() for _, block in params.blocks())
    Path(path).write_bytes(header + payload)
    logger.debug(f"Saved checkpoint to {path} ({len(payload)} payload bytes)")


def load_params(path: Union[str, Path]) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptFileError(f"{path}: checkpoint header truncated ({len(data)} bytes)")

    magic, version, feature_dim, num_classes, kernel_size = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatVersionError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatVersionError(f"{path}: unsupported checkpoint version {version}")

    shapes = {
        "embed_weights": (kernel_size, feature_dim, feature_dim),
        "embed_bias": (feature_dim,),
        "cls_weights": (feature_dim, num_classes),
        "cls_bias": (num_classes,),
    }
    expected = sum(int(np.prod(shape)) for shape in shapes.values()) * 8
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise CorruptFileError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")

    blocks: Dict[str, np.ndarray] = {}
    offset = 0
    for name in PARAM_BLOCKS:
        count = int(np.prod(shapes[name]))
        values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        blocks[name] = values.astype(np.float64).reshape(shapes[name])
        offset += count * 8

    try:
        return ModelParams(**blocks)
    except (ValueError, ShapeError) as e:
        raise CorruptFileError(f"{path}: {e}") from e
