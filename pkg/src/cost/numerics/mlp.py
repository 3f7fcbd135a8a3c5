"""Small fully-connected networks on the gradient tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor, add, matmul, relu

RELU = "relu"
IDENTITY = "identity"


@dataclass
class MlpLayer:
    weight: Tensor  # (fan_in, fan_out)
    bias: Tensor  # (fan_out,)
    activation: str

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpParams:
    layers: list[MlpLayer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].fan_out

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        return params

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.fan_out for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_mlp(
    dims: Sequence[int],
    seed: int,
    hidden_activation: str = RELU,
    output_activation: str = IDENTITY,
    dtype=np.float32,
) -> MlpParams:
    """Seeded Glorot-uniform weights, zero biases.

    ``dims`` lists every layer width including input and output, e.g.
    [768, 512, 256, 128, 96].
    """
    if len(dims) < 2:
        raise ConfigError("an MLP needs at least an input and an output dimension")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        act = output_activation if i == len(dims) - 2 else hidden_activation
        layers.append(
            MlpLayer(
                weight=Tensor(glorot_uniform(rng, fan_in, fan_out, dtype), requires_grad=True),
                bias=Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True),
                activation=act,
            )
        )
    return MlpParams(layers)


def mlp_forward(params: MlpParams, x) -> Tensor:
    """Affine-then-activation through every layer.

    Accepts a single vector (d,) or a batch (B, d); the output keeps the
    input's rank.
    """
    h = x if isinstance(x, Tensor) else Tensor(x)
    single = h.ndim == 1
    if single:
        h = h.reshape(1, -1)
    if h.ndim != 2:
        raise ConfigError(f"expected a vector or batch of vectors, got shape {h.shape}")
    for i, layer in enumerate(params.layers):
        if h.shape[-1] != layer.fan_in:
            raise ConfigError(
                f"layer {i} expects input dimension {layer.fan_in}, got {h.shape[-1]}"
            )
        h = add(matmul(h, layer.weight), layer.bias)
        if layer.activation == RELU:
            h = relu(h)
        elif layer.activation != IDENTITY:
            raise ConfigError(f"layer {i} has unknown activation {layer.activation!r}")
    return h.reshape(-1) if single else h
