"""
Dense Matrix Kernels
Paired forward/backward operations for the conv1d -> relu -> linear pipeline
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..utils.errors import ShapeError


Matrix = np.ndarray

NORM_FLOOR = 1e-12


def as_matrix(values, cols: Optional[int] = None, name: str = "input") -> Matrix:
    """Coerce to a 2-D float64 array, optionally checking the column count"""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {array.shape}")
    if cols is not None and array.shape[1] != cols:
        raise ShapeError(f"{name} has {array.shape[1]} columns, expected {cols}")
    return array


def conv1d_forward(x: Matrix, weights: np.ndarray, bias: np.ndarray, padding: Optional[int] = None) -> Matrix:
    """
    Temporal convolution over a T x F_in sequence

    Args:
        x: input sequence, shape (T, F_in)
        weights: kernel, shape (K, F_in, F_out) with odd K
        bias: shape (F_out,)
        padding: zero padding on each side, must be (K - 1) / 2

    Returns:
        Output sequence of shape (T, F_out)
    """
    x = as_matrix(x, name="conv1d input")
    kernel_size, f_in, f_out = _check_kernel(weights, bias)
    if x.shape[1] != f_in:
        raise ShapeError(f"conv1d input has {x.shape[1]} features, kernel expects {f_in}")
    pad = _check_padding(kernel_size, padding)

    length = x.shape[0]
    padded = np.pad(x, ((pad, pad), (0, 0)))
    out = np.broadcast_to(bias, (length, f_out)).copy()
    for k in range(kernel_size):
        out += padded[k:k + length] @ weights[k]
    return out


def conv1d_backward(
    grad_out: Matrix, x: Matrix, weights: np.ndarray, padding: Optional[int] = None
) -> Tuple[Matrix, np.ndarray, np.ndarray]:
    """Gradients of conv1d w.r.t. (input, weights, bias)"""
    x = as_matrix(x, name="conv1d input")
    kernel_size, f_in, f_out = _check_kernel(weights, None)
    grad_out = as_matrix(grad_out, cols=f_out, name="conv1d grad_out")
    if x.shape[1] != f_in or grad_out.shape[0] != x.shape[0]:
        raise ShapeError(f"conv1d backward shapes disagree: x {x.shape}, grad_out {grad_out.shape}")
    pad = _check_padding(kernel_size, padding)

    length = x.shape[0]
    padded = np.pad(x, ((pad, pad), (0, 0)))
    grad_padded = np.zeros_like(padded)
    grad_w = np.empty_like(weights, dtype=np.float64)
    for k in range(kernel_size):
        grad_w[k] = padded[k:k + length].T @ grad_out
        grad_padded[k:k + length] += grad_out @ weights[k].T
    grad_b = grad_out.sum(axis=0)
    return grad_padded[pad:pad + length], grad_w, grad_b


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    if grad_out.shape != x.shape:
        raise ShapeError(f"relu backward shapes disagree: {grad_out.shape} vs {x.shape}")
    return np.where(x > 0, grad_out, 0.0)


def linear_forward(x: Matrix, weights: Matrix, bias: np.ndarray) -> Matrix:
    """Per-segment affine map x @ W + b"""
    weights = as_matrix(weights, name="linear weights")
    x = as_matrix(x, cols=weights.shape[0], name="linear input")
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match {weights.shape[1]} outputs")
    return x @ weights + bias


def linear_backward(grad_out: Matrix, x: Matrix, weights: Matrix) -> Tuple[Matrix, Matrix, np.ndarray]:
    weights = as_matrix(weights, name="linear weights")
    x = as_matrix(x, cols=weights.shape[0], name="linear input")
    grad_out = as_matrix(grad_out, cols=weights.shape[1], name="linear grad_out")
    if grad_out.shape[0] != x.shape[0]:
        raise ShapeError(f"linear backward rows disagree: {x.shape[0]} vs {grad_out.shape[0]}")
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtracted before exponentiation)"""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output"""
    inner = np.sum(grad_probs * probs, axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


def l2_norm(v: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.sqrt(np.sum(np.square(v, dtype=np.float64), axis=axis))


def l2_norm_grad(v: np.ndarray) -> np.ndarray:
    """v / ||v||, defined as 0 when ||v|| < 1e-12"""
    v = np.asarray(v, dtype=np.float64)
    norm = float(l2_norm(v))
    if norm < NORM_FLOOR:
        return np.zeros_like(v)
    return v / norm


def topk_indices(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values, ties to the lower index, returned sorted"""
    v = _check_k(v, k)
    order = np.argsort(-v, kind="stable")
    return np.sort(order[:k])


def bottomk_indices(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest values, ties to the lower index, returned sorted"""
    v = _check_k(v, k)
    order = np.argsort(v, kind="stable")
    return np.sort(order[:k])


@dataclass
class TapeEntry:
    """One recorded op: reads slot `source`, writes slot `target`"""
    op: str
    source: str
    target: str
    saved: Dict[str, np.ndarray]
    params: Tuple[str, ...] = ()


class GradTape:
    """
    Reverse-mode record of the fixed conv1d -> relu -> linear pipeline

    Slots name intermediate values ("features", "pre_activation",
    "embedded", "scores"); backward() seeds gradients on any slots and
    accumulates down to the input features and every parameter block.
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []

    def record(self, op: str, source: str, target: str, params: Tuple[str, ...] = (), **saved: np.ndarray) -> None:
        if op not in _BACKWARD_RULES:
            raise ValueError(f"Unsupported tape op: {op}")
        self.entries.append(TapeEntry(op=op, source=source, target=target, saved=saved, params=params))

    def backward(self, seed_grads: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        """
        Replay the tape in reverse

        Returns:
            (slot gradients, parameter gradients keyed by block name)
        """
        slot_grads = {name: np.asarray(g, dtype=np.float64) for name, g in seed_grads.items()}
        param_grads: Dict[str, np.ndarray] = {}

        for entry in reversed(self.entries):
            grad = slot_grads.get(entry.target)
            if grad is None:
                continue
            grad_in, grads = _BACKWARD_RULES[entry.op](grad, entry.saved)
            for name, g in zip(entry.params, grads):
                param_grads[name] = param_grads[name] + g if name in param_grads else g
            if entry.source in slot_grads:
                slot_grads[entry.source] = slot_grads[entry.source] + grad_in
            else:
                slot_grads[entry.source] = grad_in

        return slot_grads, param_grads


def _conv_rule(grad: np.ndarray, saved: Dict[str, np.ndarray]):
    grad_x, grad_w, grad_b = conv1d_backward(grad, saved["x"], saved["weights"])
    return grad_x, (grad_w, grad_b)


def _relu_rule(grad: np.ndarray, saved: Dict[str, np.ndarray]):
    return relu_backward(grad, saved["x"]), ()


def _linear_rule(grad: np.ndarray, saved: Dict[str, np.ndarray]):
    grad_x, grad_w, grad_b = linear_backward(grad, saved["x"], saved["weights"])
    return grad_x, (grad_w, grad_b)


_BACKWARD_RULES: Dict[str, Callable] = {
    "conv1d": _conv_rule,
    "relu": _relu_rule,
    "linear": _linear_rule,
}


def _check_kernel(weights: np.ndarray, bias: Optional[np.ndarray]) -> Tuple[int, int, int]:
    if weights.ndim != 3:
        raise ShapeError(f"conv1d kernel must be (K, F_in, F_out), got {weights.shape}")
    kernel_size, f_in, f_out = weights.shape
    if kernel_size % 2 == 0:
        raise ShapeError(f"conv1d kernel size must be odd, got {kernel_size}")
    if bias is not None and np.shape(bias) != (f_out,):
        raise ShapeError(f"conv1d bias shape {np.shape(bias)} does not match {f_out} outputs")
    return kernel_size, f_in, f_out


def _check_padding(kernel_size: int, padding: Optional[int]) -> int:
    pad = (kernel_size - 1) // 2
    if padding is not None and padding != pad:
        raise ShapeError(f"padding must be {pad} for kernel size {kernel_size}, got {padding}")
    return pad


def _check_k(v: np.ndarray, k: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    if not 1 <= k <= v.shape[0]:
        raise ValueError(f"k={k} out of range for length {v.shape[0]}")
    return v
