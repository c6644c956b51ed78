"""Gated-convolution capsule network with temporal attention.

Forward pass for a batch of (T, F) feature matrices:

1. gated convolution blocks, each ending in 2x2 max-pooling;
2. primary capsules: ReLU convolution (stride 1 in time, 2 in frequency),
   batch norm, dropout, reshaped to (T', K, U) and squashed;
3. each time slice goes through a routed capsule layer with one capsule per
   class, whose lengths give o(t), and through a sigmoid dense layer over the
   same flattened slice, giving z(t);
4. o and z are merged over time into clip-level probabilities y.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import merge, temporal_attention
from .capsules import RoutingConfig, capsule_dense_layer, capsule_lengths, feature_map_to_capsules, squash
from .layers import BatchNormState, GatedConvSpec, batch_norm, dropout, gated_block_stack, glorot_uniform, init_conv, init_gated_conv
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 17
    input_frames: int = 240
    mel_bins: int = 64
    gated: GatedConvSpec = field(default_factory=GatedConvSpec)
    gated_dropout: float = 0.2
    primary_filters: int = 64
    primary_kernel: int = 3
    primary_stride: tuple[int, int] = (1, 2)
    primary_capsule_size: int = 4
    primary_dropout: float = 0.5
    class_capsule_size: int = 8
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    bn_momentum: float = 0.9
    bn_eps: float = 1e-3

    def __post_init__(self):
        if self.primary_filters % self.primary_capsule_size:
            raise ValueError("primary_filters must be divisible by primary_capsule_size")
        if min(self.input_frames, self.mel_bins) < 2 ** self.gated.blocks:
            raise ValueError("input too small to pool once per block")
        object.__setattr__(self, "primary_stride", tuple(self.primary_stride))

    @property
    def slices(self) -> int:
        t = self.input_frames
        for _ in range(self.gated.blocks):
            t = -(-t // 2)
        return -(-t // self.primary_stride[0])

    @property
    def pooled_bins(self) -> int:
        f = self.mel_bins
        for _ in range(self.gated.blocks):
            f = -(-f // 2)
        return f

    @property
    def capsules_per_slice(self) -> int:
        f = -(-self.pooled_bins // self.primary_stride[1])
        return f * self.primary_filters // self.primary_capsule_size


def paper_model_config(n_classes: int = 17) -> ModelConfig:
    return ModelConfig(n_classes=n_classes)


def desk_model_config(n_classes: int = 3) -> ModelConfig:
    """Reduced preset: 2 gated blocks of 32 filters (16 linear, 16 gate), 60-frame input."""
    return ModelConfig(
        n_classes=n_classes,
        input_frames=60,
        gated=GatedConvSpec(filters_linear=16, filters_gate=16, blocks=2),
        primary_filters=32,
    )


@dataclass
class ClipPrediction:
    """Clip probabilities ``y`` ([B,] L) with the per-slice curves ``o`` and ``z`` ([B,] T, L)."""

    y: np.ndarray
    o: np.ndarray
    z: np.ndarray


class CapsuleSED:
    """Parameters, batch-norm state and forward pass of the network.

    ``params`` maps names to trainable :class:`Tensor` leaves; ``bn`` maps layer
    prefixes to running statistics.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], bn: dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.bn = bn

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "CapsuleSED":
        rng = np.random.default_rng(seed)
        arrays: dict[str, np.ndarray] = {}
        bn: dict[str, BatchNormState] = {}
        spec = config.gated

        def add_bn(prefix: str, channels: int):
            arrays[prefix + "bn.gamma"] = np.ones(channels, dtype)
            arrays[prefix + "bn.beta"] = np.zeros(channels, dtype)
            bn[prefix] = BatchNormState.fresh(channels, config.bn_momentum, config.bn_eps, dtype)

        c_in = 1
        for b in range(spec.blocks):
            for l in range(spec.layers_per_block):
                prefix = f"block{b}.layer{l}."
                for k, v in init_gated_conv(rng, c_in, spec, dtype).items():
                    arrays[prefix + k] = v
                add_bn(prefix, spec.filters_linear)
                c_in = spec.filters_linear

        k = config.primary_kernel
        arrays["primary.kernel"], arrays["primary.bias"] = init_conv(rng, c_in, config.primary_filters, k, k, dtype)
        add_bn("primary.", config.primary_filters)

        K, U = config.capsules_per_slice, config.primary_capsule_size
        L, V = config.n_classes, config.class_capsule_size
        arrays["capsule.W"] = glorot_uniform(rng, (L, K, V, U), U, V, dtype)
        arrays["attention.W"] = glorot_uniform(rng, (K * U, L), K * U, L, dtype)
        arrays["attention.b"] = np.zeros(L, dtype)
        params = {name: Tensor(a, requires_grad=True) for name, a in arrays.items()}
        return cls(config, params, bn)

    def forward(self, features, training: bool = False, rng: np.random.Generator | None = None,
                trace: dict | None = None):
        """Run the network on (B, T, F) or (T, F) features; returns (y, o, z) as Tensors.

        If ``trace`` is a dict, the primary capsules (B, T', K, U) and class
        capsules (B, T', L, U') are stored in it as arrays.
        """
        cfg, p = self.config, self.params
        x = T.as_tensor(features, like=p["primary.kernel"])
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1:] != (cfg.input_frames, cfg.mel_bins):
            raise ShapeError(f"expected features of shape (B, {cfg.input_frames}, {cfg.mel_bins}), got {x.shape}")
        B = x.shape[0]
        h = T.reshape(x, (B, 1) + x.shape[1:])
        h = gated_block_stack(h, p, self.bn, cfg.gated, training, cfg.gated_dropout, rng)

        h = T.relu(T.conv2d(h, p["primary.kernel"], p["primary.bias"], stride=cfg.primary_stride))
        h = batch_norm(h, p["primary.bn.gamma"], p["primary.bn.beta"], self.bn["primary."], training)
        h = dropout(h, cfg.primary_dropout, training, rng)
        caps = squash(feature_map_to_capsules(h, cfg.primary_capsule_size), cfg.routing.squash_form)
        _, n_slices, K, U = caps.shape

        v = capsule_dense_layer(T.reshape(caps, (B * n_slices, K, U)), p["capsule.W"], cfg.routing)
        o = T.reshape(capsule_lengths(v), (B, n_slices, cfg.n_classes))
        z = temporal_attention(T.reshape(caps, (B, n_slices, K * U)), p["attention.W"], p["attention.b"])
        y = merge(o, z)
        if trace is not None:
            trace["primary_capsules"] = caps.data
            trace["class_capsules"] = v.data.reshape(B, n_slices, cfg.n_classes, -1)
        if single:
            y, o, z = (T.reshape(t, t.shape[1:]) for t in (y, o, z))
        return y, o, z

    def predict(self, features, batch_size: int = 64) -> ClipPrediction:
        """Inference-mode prediction as numpy arrays, evaluated in batches."""
        features = np.asarray(features)
        if features.ndim == 2:
            y, o, z = self.forward(features)
            return ClipPrediction(y.data, o.data, z.data)
        parts = [self.forward(features[i:i + batch_size]) for i in range(0, len(features), batch_size)]
        return ClipPrediction(*(np.concatenate([part[k].data for part in parts]) for k in range(3)))

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter and batch-norm statistic as a flat name -> array mapping."""
        out = {name: t.data for name, t in self.params.items()}
        for prefix, st in self.bn.items():
            out[prefix + "bn.running_mean"] = st.running_mean
            out[prefix + "bn.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: stored shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=t.dtype)
        for prefix, st in self.bn.items():
            st.running_mean = np.array(arrays[prefix + "bn.running_mean"], dtype=st.running_mean.dtype)
            st.running_var = np.array(arrays[prefix + "bn.running_var"], dtype=st.running_var.dtype)
