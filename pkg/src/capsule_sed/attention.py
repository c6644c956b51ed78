"""Temporal attention and attention-weighted merging of per-slice outputs."""

from __future__ import annotations

from . import tensor as T
from .layers import dense
from .tensor import ShapeError, Tensor

MERGE_EPS = 1e-7


def temporal_attention(slices: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Per-slice sigmoid saliency: ([B,] T, D) features -> ([B,] T, L), weights shared over time."""
    return dense(slices, W, b, activation="sigmoid")


def merge(o: Tensor, z: Tensor, eps: float = MERGE_EPS) -> Tensor:
    """Clip-level prediction: sum_t o(t) z(t) / (sum_t z(t) + eps), per class.

    ``o`` and ``z`` are ([B,] T, L); the result is ([B,] L).
    """
    o, z = T.as_tensor(o), T.as_tensor(z)
    if o.shape != z.shape:
        raise ShapeError(f"merge: o {o.shape} and z {z.shape} differ")
    return T.tsum(o * z, axis=-2) / (T.tsum(z, axis=-2) + eps)


def attention_distribution(z) -> Tensor:
    """q(t) = z(t) / sum_t z(t), i.e. softmax(log z) over time."""
    z = T.as_tensor(z)
    return z / T.tsum(z, axis=-2, keepdims=True)
