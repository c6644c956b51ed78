"""Squashing, primary capsules and routing-by-agreement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

SQUASH_FORMS = ("cited", "paper-literal")


@dataclass(frozen=True)
class RoutingConfig:
    iterations: int = 3
    squash_form: str = "cited"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"routing needs at least one iteration, got {self.iterations}")
        if self.squash_form not in SQUASH_FORMS:
            raise ValueError(f"squash_form must be one of {SQUASH_FORMS}")


@dataclass
class RoutingState:
    """Snapshot of one routing call. ``couplings_history[k]`` holds the couplings used in iteration k."""

    logits: np.ndarray
    couplings: np.ndarray
    predictions: np.ndarray
    outputs: np.ndarray
    agreements: np.ndarray
    couplings_history: list[np.ndarray] = field(default_factory=list)
    outputs_history: list[np.ndarray] = field(default_factory=list)


def squash(s: Tensor, form: str = "cited") -> Tensor:
    """Shrink each capsule (last axis) into the unit ball, keeping its direction.

    ``cited``: v = |s|^2/(1+|s|^2) * s/|s|.
    ``paper-literal``: v = |s|/(1+|s|^2) * s/|s|, i.e. s/(1+|s|^2).
    The norm is epsilon-guarded so the zero vector maps to zero with finite gradients.
    """
    s = T.as_tensor(s)
    norm = T.l2norm(s, axis=-1, keepdims=True)
    if form == "cited":
        scale = norm / (norm * norm + 1.0)
    elif form == "paper-literal":
        scale = 1.0 / (norm * norm + 1.0)
    else:
        raise ValueError(f"unknown squash form {form!r}")
    return s * scale


def capsule_lengths(v: Tensor) -> Tensor:
    """Euclidean length of each capsule along the last axis."""
    return T.l2norm(v, axis=-1)


def feature_map_to_capsules(h: Tensor, capsule_size: int) -> Tensor:
    """Reshape a (B, C, T, F) map into (B, T, F*C/U, U) capsules.

    Contiguous groups of ``capsule_size`` channels at one (t, f) position form a capsule;
    capsules within a slice are ordered frequency-major.
    """
    B, C, T_, F = h.shape
    if C % capsule_size:
        raise ShapeError(f"{C} channels are not divisible by capsule size {capsule_size}")
    h = T.transpose(h, (0, 2, 3, 1))
    return T.reshape(h, (B, T_, F * (C // capsule_size), capsule_size))


def primary_capsules(x: Tensor, kernel: Tensor, bias: Tensor, capsule_size: int = 4,
                     stride=(1, 2), form: str = "cited") -> Tensor:
    """ReLU convolution, reshaped into capsules per time slice, then squashed.

    ``x`` is (C, T, F) or (B, C, T, F); the result is (T, K, U) or (B, T, K, U).
    """
    x = T.as_tensor(x)
    batched = x.ndim == 4
    if not batched:
        x = T.reshape(x, (1,) + x.shape)
    h = T.relu(T.conv2d(x, kernel, bias, stride=stride))
    caps = squash(feature_map_to_capsules(h, capsule_size), form)
    return caps if batched else T.reshape(caps, caps.shape[1:])


def prediction_vectors(u: Tensor, W: Tensor) -> Tensor:
    """u_hat[b, i, j] = W[j, i] @ u[b, i] for u (B, M, U_in), W (N, M, U_out, U_in)."""
    u, W = T.as_tensor(u), T.as_tensor(W)
    if W.ndim != 4 or u.ndim != 3 or u.shape[1:] != (W.shape[1], W.shape[3]):
        raise ShapeError(f"capsule layer: input {u.shape} does not conform to weights {W.shape}")
    return T.einsum("nmoi,bmi->bmno", W, u)


def dynamic_routing(u_hat: Tensor, config: RoutingConfig = RoutingConfig(),
                    state: RoutingState | None = None) -> Tensor:
    """Routing-by-agreement over prediction vectors ``u_hat`` of shape ([B,] M, N, U).

    Logits start at zero on every call. Each iteration takes a softmax of the
    logits over output capsules, forms the coupled sums, squashes them, and adds
    the agreement v_j . u_hat_{j|i} to the logits. Gradients flow through all
    iterations. Pass a :class:`RoutingState` to have it filled in.
    """
    if config.iterations < 1:
        raise ValueError("routing needs at least one iteration")
    u_hat = T.as_tensor(u_hat)
    batched = u_hat.ndim == 4
    if not batched:
        u_hat = T.reshape(u_hat, (1,) + u_hat.shape)
    B, M, N, _ = u_hat.shape
    logits = Tensor(np.zeros((B, M, N), dtype=u_hat.dtype))
    history: list[np.ndarray] = []
    out_history: list[np.ndarray] = []
    for _ in range(config.iterations):
        couplings = T.softmax(logits, axis=2)
        s = T.einsum("bmn,bmnu->bnu", couplings, u_hat)
        v = squash(s, config.squash_form)
        agreement = T.einsum("bnu,bmnu->bmn", v, u_hat)
        logits = logits + agreement
        if state is not None:
            history.append(couplings.data)
            out_history.append(v.data)
    if state is not None:
        unbatch = (lambda a: a) if batched else (lambda a: a[0])
        state.logits = unbatch(logits.data)
        state.couplings = unbatch(couplings.data)
        state.predictions = unbatch(u_hat.data)
        state.outputs = unbatch(v.data)
        state.agreements = unbatch(agreement.data)
        state.couplings_history = [unbatch(c) for c in history]
        state.outputs_history = [unbatch(o) for o in out_history]
    return v if batched else T.reshape(v, v.shape[1:])


def empty_state() -> RoutingState:
    z = np.zeros(0)
    return RoutingState(z, z, z, z, z)


def capsule_dense_layer(u: Tensor, W: Tensor, config: RoutingConfig = RoutingConfig(),
                        state: RoutingState | None = None) -> Tensor:
    """Fully connected capsule layer: u ([B,] M, U_in) -> v ([B,] N, U_out). No bias."""
    u = T.as_tensor(u)
    batched = u.ndim == 3
    if not batched:
        u = T.reshape(u, (1,) + u.shape)
    v = dynamic_routing(prediction_vectors(u, W), config, state)
    if state is not None and not batched:
        for name in ("logits", "couplings", "predictions", "outputs", "agreements"):
            setattr(state, name, getattr(state, name)[0])
        state.couplings_history = [c[0] for c in state.couplings_history]
        state.outputs_history = [o[0] for o in state.outputs_history]
    return v if batched else T.reshape(v, v.shape[1:])
