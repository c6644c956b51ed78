"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_gradient(f: Callable[[Sequence[np.ndarray]], float], inputs: Sequence[np.ndarray],
                     index: int, step: float) -> np.ndarray:
    x = inputs[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = f(inputs)
        flat[k] = orig - step
        down = f(inputs)
        flat[k] = orig
        gflat[k] = (up - down) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(num / den) if den > 0 else float(num)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-5,
                    seed: int = 0, wrt: Sequence[int] | None = None) -> list[float]:
    """Compare analytic and finite-difference gradients of ``fn``.

    ``fn`` maps Tensors to a Tensor of any shape; it is reduced to a scalar by
    a fixed random projection. Returns one relative error per checked input.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    probe_shape = fn(*[Tensor(x) for x in inputs]).shape
    weights = np.random.default_rng(seed).standard_normal(probe_shape)

    def scalar(arrays) -> float:
        return float((fn(*[Tensor(x) for x in arrays]).data * weights).sum())

    tensors = [Tensor(x.copy(), requires_grad=(i in wrt)) for i, x in enumerate(inputs)]
    out = fn(*tensors)
    (out * Tensor(weights)).sum().backward()

    errors = []
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(inputs[i])
        numeric = numeric_gradient(scalar, inputs, i, step)
        errors.append(relative_error(analytic, numeric))
    return errors
