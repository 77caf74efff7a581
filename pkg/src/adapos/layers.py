"""Composable layers over a :class:`~adapos.tensor.ParamSet`.

Layers hold only topology and their parameter path prefix.  Parameter values
live in a ParamSet that is passed to every forward call, which keeps the
forward pass a pure function of (params, input) and lets the same layer object
run on tracked or untracked parameters.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import AntennaIdError, ConfigurationError, ShapeError, ValidationError
from .tensor import ParamSet, Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# He-uniform gain for ReLU convolutions: keeps activation scale roughly constant with depth
RELU_GAIN = math.sqrt(6.0)


class Dense:
    def __init__(self, name: str, d_in: int, d_out: int, gain: float = 1.0):
        self.name, self.d_in, self.d_out, self.gain = name, d_in, d_out, gain

    def init_params(self, rng: np.random.Generator) -> dict:
        return {f"{self.name}.weight": _uniform(rng, (self.d_in, self.d_out), self.d_in, self.gain),
                f"{self.name}.bias": np.zeros(self.d_out)}

    def __call__(self, params: ParamSet, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"{self.name}: expected trailing dim {self.d_in}, got {x.shape}")
        flat = x if x.ndim >= 2 else T.reshape(x, (1, self.d_in))
        y = T.matmul(flat, params[f"{self.name}.weight"]) + params[f"{self.name}.bias"]
        return y if x.ndim >= 2 else T.reshape(y, (self.d_out,))


class Conv1d:
    def __init__(self, name: str, c_in: int, c_out: int, width: int = 3):
        if width % 2 == 0:
            raise ConfigurationError(f"{name}: conv width must be odd, got {width}")
        self.name, self.c_in, self.c_out, self.width = name, c_in, c_out, width

    def init_params(self, rng: np.random.Generator) -> dict:
        fan_in = self.c_in * self.width
        return {f"{self.name}.kernel": _uniform(rng, (self.c_out, self.c_in, self.width), fan_in, RELU_GAIN),
                f"{self.name}.bias": np.zeros(self.c_out)}

    def __call__(self, params: ParamSet, x: Tensor, channels_last: bool = False) -> Tensor:
        conv = T.conv1d_same_cl if channels_last else T.conv1d_same
        return conv(x, params[f"{self.name}.kernel"], params[f"{self.name}.bias"])


class ResNet1DBlock:
    """Two width-3 convolutions with a residual path.

    The skip path is the identity when channel counts match and a 1x1
    convolution otherwise.
    """

    def __init__(self, name: str, c_in: int, c_out: int, n_taps: int, width: int = 3):
        self.name, self.c_in, self.c_out, self.n_taps = name, c_in, c_out, n_taps
        self.conv1 = Conv1d(f"{name}.conv1", c_in, c_out, width)
        self.conv2 = Conv1d(f"{name}.conv2", c_out, c_out, width)
        self.proj = Conv1d(f"{name}.proj", c_in, c_out, 1) if c_in != c_out else None

    def init_params(self, rng: np.random.Generator) -> dict:
        out = {**self.conv1.init_params(rng), **self.conv2.init_params(rng)}
        if self.proj is not None:
            out.update(self.proj.init_params(rng))
        return out

    def __call__(self, params: ParamSet, x: Tensor, channels_last: bool = False) -> Tensor:
        taps = x.shape[-2] if channels_last else x.shape[-1]
        if taps != self.n_taps:
            raise ShapeError(f"{self.name}: expected {self.n_taps} taps, got {taps}")
        h = T.relu(self.conv1(params, x, channels_last))
        h = self.conv2(params, h, channels_last)
        skip = x if self.proj is None else self.proj(params, x, channels_last)
        return T.relu(h + skip)


class LayerNorm:
    def __init__(self, name: str, d: int):
        if d < 2:
            raise ConfigurationError(f"{name}: layer norm needs d >= 2")
        self.name, self.d = name, d

    def init_params(self, rng: np.random.Generator) -> dict:
        return {f"{self.name}.gain": np.ones(self.d), f"{self.name}.offset": np.zeros(self.d)}

    def __call__(self, params: ParamSet, x: Tensor) -> Tensor:
        return T.layer_norm(x, params[f"{self.name}.gain"], params[f"{self.name}.offset"])


class MultiHeadAttention:
    """Bias-free scaled dot-product self-attention over ``[..., N, d]`` sets."""

    def __init__(self, name: str, d: int, heads: int):
        if d % heads:
            raise ConfigurationError(f"{name}: model dim {d} not divisible by {heads} heads")
        self.name, self.d, self.heads = name, d, heads

    def init_params(self, rng: np.random.Generator) -> dict:
        return {f"{self.name}.{w}": _uniform(rng, (self.d, self.d), self.d) for w in ("q", "k", "v", "o")}

    def __call__(self, params: ParamSet, x: Tensor, return_weights: bool = False):
        if x.ndim < 2 or x.shape[-1] != self.d:
            raise ShapeError(f"{self.name}: expected [..., N, {self.d}], got {x.shape}")
        lead, n = x.shape[:-2], x.shape[-2]
        h, dk = self.heads, self.d // self.heads
        xb = T.reshape(x, (-1, n, self.d))
        b = xb.shape[0]

        def split(w: str) -> Tensor:
            y = T.matmul(xb, params[f"{self.name}.{w}"])
            return T.permute(T.reshape(y, (b, n, h, dk)), (0, 2, 1, 3))

        q, k, v = split("q"), split("k"), split("v")
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
        weights = T.softmax_lastdim(scores)
        ctx = T.permute(T.matmul(weights, v), (0, 2, 1, 3))
        out = T.matmul(T.reshape(ctx, (b, n, self.d)), params[f"{self.name}.o"])
        out = T.reshape(out, lead + (n, self.d))
        if return_weights:
            return out, weights.data.reshape(lead + (h, n, n))
        return out


class EncoderLayer:
    """Post-norm transformer encoder layer: LN(x + MHA(x)) then LN(y + FF(y))."""

    def __init__(self, name: str, d: int, heads: int, d_ff: int):
        self.name, self.d = name, d
        self.attn = MultiHeadAttention(f"{name}.attn", d, heads)
        self.ff1 = Dense(f"{name}.ff1", d, d_ff)
        self.ff2 = Dense(f"{name}.ff2", d_ff, d)
        self.norm1 = LayerNorm(f"{name}.norm1", d)
        self.norm2 = LayerNorm(f"{name}.norm2", d)

    def init_params(self, rng: np.random.Generator) -> dict:
        out = {}
        for part in (self.attn, self.ff1, self.ff2, self.norm1, self.norm2):
            out.update(part.init_params(rng))
        return out

    def __call__(self, params: ParamSet, x: Tensor) -> Tensor:
        y = self.norm1(params, x + self.attn(params, x))
        ff = self.ff2(params, T.relu(self.ff1(params, y)))
        return self.norm2(params, y + ff)


class EmbeddingTable:
    """One learnable row per physical antenna id."""

    def __init__(self, name: str, a_max: int, d: int):
        self.name, self.a_max, self.d = name, a_max, d

    def init_params(self, rng: np.random.Generator) -> dict:
        return {f"{self.name}.rows": rng.normal(0.0, 0.02, size=(self.a_max, self.d))}

    def __call__(self, params: ParamSet, antenna_ids: Sequence[int]) -> Tensor:
        ids = [int(i) for i in antenna_ids]
        if not ids:
            raise ValidationError("empty antenna id list")
        for i in ids:
            if not 0 <= i < self.a_max:
                raise AntennaIdError(f"antenna id {i} outside [0, {self.a_max})")
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate antenna ids in {ids}")
        return T.gather_rows(params[f"{self.name}.rows"], ids)


class SignalEncoder:
    """Shared 1-D ResNet mapping one ``[c_in, L]`` CIR to a ``d``-vector.

    Stem conv, a stack of residual blocks, global average pooling over taps,
    and a dense projection.
    """

    def __init__(self, name: str, in_channels: int, n_taps: int, stem: int,
                 blocks: Sequence[int], d_out: int):
        self.name, self.in_channels, self.n_taps = name, in_channels, n_taps
        self.stem = Conv1d(f"{name}.stem", in_channels, stem, 3)
        self.blocks = []
        c = stem
        for i, c_out in enumerate(blocks):
            self.blocks.append(ResNet1DBlock(f"{name}.block{i}", c, c_out, n_taps))
            c = c_out
        self.proj = Dense(f"{name}.proj", c, d_out)

    def init_params(self, rng: np.random.Generator) -> dict:
        out = self.stem.init_params(rng)
        for block in self.blocks:
            out.update(block.init_params(rng))
        out.update(self.proj.init_params(rng))
        return out

    def __call__(self, params: ParamSet, x: Tensor) -> Tensor:
        if x.shape[-2:] != (self.in_channels, self.n_taps):
            raise ShapeError(f"{self.name}: expected [..., {self.in_channels}, {self.n_taps}], got {x.shape}")
        # convolutions run channels-last, which keeps each conv a single GEMM
        h = T.relu(self.stem(params, T.transpose(x), channels_last=True))
        for block in self.blocks:
            h = block(params, h, channels_last=True)
        return self.proj(params, T.mean(h, axis=-2))


def dense_forward(layer: Dense, params: ParamSet, x: Tensor) -> Tensor:
    return layer(params, x)


def resnet_block_forward(block: ResNet1DBlock, params: ParamSet, x: Tensor) -> Tensor:
    return block(params, x)


def multi_head_attention(mha: MultiHeadAttention, params: ParamSet, x: Tensor) -> Tensor:
    return mha(params, x)


def encoder_layer_forward(layer: EncoderLayer, params: ParamSet, x: Tensor) -> Tensor:
    return layer(params, x)


def embedding_lookup(table: EmbeddingTable, params: ParamSet, antenna_ids: Sequence[int]) -> Tensor:
    return table(params, antenna_ids)
