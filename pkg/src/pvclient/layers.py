"""Parameterized building blocks: RevIN, cross-variable attention, encoder blocks, heads.

Layout conventions: a station instance ``H`` is time-major (``L x C``); encoder
tokens are channel-major (``C x D``), one token per variable. Every function
also accepts a leading batch axis.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LAYERNORM_EPS = 1e-5
REVIN_EPS = 1e-5


def _uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def named_tensors(record, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every Tensor field reachable from a params record."""
    if isinstance(record, Tensor):
        yield prefix, record
    elif dataclasses.is_dataclass(record):
        for f in dataclasses.fields(record):
            value = getattr(record, f.name)
            yield from named_tensors(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(record, (list, tuple)):
        for i, item in enumerate(record):
            yield from named_tensors(item, f"{prefix}.{i}")


# ---------------------------------------------------------------------------
# RevIN


@dataclass
class RevInParams:
    alpha: Tensor  # (C,)
    beta: Tensor  # (C,)
    eps: float = REVIN_EPS

    @classmethod
    def init(cls, channels: int) -> RevInParams:
        return cls(_ones((channels,), "alpha"), _zeros((channels,), "beta"))


@dataclass
class RevInStats:
    """Per-instance statistics captured by one normalize call; shapes ``(C,)`` or ``(B, C)``."""

    mu: Tensor
    sigma: Tensor


def revin_normalize(H: Tensor, params: RevInParams) -> tuple[Tensor, RevInStats]:
    if H.shape[-2] < 2:
        raise ShapeError(f"RevIN needs at least 2 time steps, got shape {H.shape}")
    if H.shape[-1] != params.alpha.shape[0]:
        raise ShapeError(f"RevIN built for {params.alpha.shape[0]} channels, input has shape {H.shape}")
    mu, sigma = ad.rowwise_mean_std(ad.permute10(H), params.eps)
    stat_shape = mu.shape[:-1] + (1, mu.shape[-1])
    centered = ad.sub(H, ad.reshape(mu, stat_shape))
    O = ad.add(ad.mul(params.alpha, ad.div(centered, ad.reshape(sigma, stat_shape))), params.beta)
    return O, RevInStats(mu, sigma)


def revin_denormalize(
    F: Tensor,
    params: RevInParams,
    stats: RevInStats | None,
    channel_map: Sequence[int],
) -> Tensor:
    """Invert the instance normalization.

    ``F`` is ``T x k`` (``k == len(channel_map)``) or, for a single mapped channel,
    a length-``T`` series; column ``j`` is restored with the statistics of channel
    ``channel_map[j]``.
    """
    if stats is None:
        raise ValueError("revin_denormalize called before revin_normalize produced statistics")
    channel_map = list(channel_map)
    if np.any(np.abs(params.alpha.data[channel_map]) < 1e-12):
        raise ValueError(f"RevIN alpha is (near) zero on channels {channel_map}")
    if F.ndim == stats.mu.ndim:
        if len(channel_map) != 1:
            raise ShapeError(f"a single series needs exactly one mapped channel, got {channel_map}")
        c = channel_map[0]
        mu = ad.take(stats.mu, c, axis=-1)
        sigma = ad.take(stats.sigma, c, axis=-1)
        if stats.mu.ndim == 2:
            mu = ad.reshape(mu, (-1, 1))
            sigma = ad.reshape(sigma, (-1, 1))
        alpha = ad.take(params.alpha, c, axis=0)
        beta = ad.take(params.beta, c, axis=0)
        return ad.add(ad.mul(ad.div(ad.sub(F, beta), alpha), sigma), mu)
    if F.shape[-1] != len(channel_map):
        raise ShapeError(f"F has {F.shape[-1]} columns but channel_map has {len(channel_map)} entries")
    cols = []
    for j, c in enumerate(channel_map):
        col = ad.take(F, j, axis=-1)
        restored = revin_denormalize(col, params, stats, [c])
        cols.append(ad.reshape(restored, restored.shape + (1,)))
    return cols[0] if len(cols) == 1 else ad.concat_last(cols)


# ---------------------------------------------------------------------------
# attention, FFN, encoder block


@dataclass
class MhaParams:
    """Query/key/value projections for all heads, stored side by side.

    Head ``h`` uses columns ``h*d_head:(h+1)*d_head`` of ``wq``, ``wk`` and ``wv``
    and the matching rows of ``wo``.
    """

    wq: Tensor  # (D, heads*d_head)
    wk: Tensor
    wv: Tensor
    wo: Tensor  # (heads*d_head, D)
    heads: int
    d_head: int

    @classmethod
    def init(cls, rng: np.random.Generator, token_dim: int, d_model: int, heads: int) -> MhaParams:
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        shape = (token_dim, d_model)
        return cls(
            _uniform(rng, token_dim, shape, "wq"),
            _uniform(rng, token_dim, shape, "wk"),
            _uniform(rng, token_dim, shape, "wv"),
            _uniform(rng, d_model, (d_model, token_dim), "wo"),
            heads,
            d_model // heads,
        )

    @property
    def token_dim(self) -> int:
        return self.wq.shape[0]


def cross_variable_attention(
    tokens: Tensor,
    params: MhaParams,
    attention_out: list | None = None,
) -> Tensor:
    """Multi-head attention where each token is a whole variable series.

    When ``attention_out`` is given, the per-head attention matrices are appended
    to it as numpy arrays.
    """
    if tokens.shape[-1] != params.token_dim:
        raise ShapeError(f"token width {tokens.shape[-1]} != attention token_dim {params.token_dim}")
    q = ad.matmul(tokens, params.wq)
    k = ad.matmul(tokens, params.wk)
    v = ad.matmul(tokens, params.wv)
    inv_temp = 1.0 / math.sqrt(params.d_head)
    outputs = []
    for h in range(params.heads):
        lo, hi = h * params.d_head, (h + 1) * params.d_head
        qh, kh, vh = ad.slice_last(q, lo, hi), ad.slice_last(k, lo, hi), ad.slice_last(v, lo, hi)
        scores = ad.scale(ad.matmul(qh, ad.permute10(kh)), inv_temp)
        weights = ad.softmax_rows(scores)
        if attention_out is not None:
            attention_out.append(weights.data)
        outputs.append(ad.matmul(weights, vh))
    merged = outputs[0] if len(outputs) == 1 else ad.concat_last(outputs)
    return ad.matmul(merged, params.wo)


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, token_dim: int, hidden: int) -> FfnParams:
        return cls(
            _uniform(rng, token_dim, (token_dim, hidden), "w1"),
            _zeros((hidden,), "b1"),
            _uniform(rng, hidden, (hidden, token_dim), "w2"),
            _zeros((token_dim,), "b2"),
        )


def feed_forward(x: Tensor, params: FfnParams) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, params.w1), params.b1))
    return ad.add(ad.matmul(hidden, params.w2), params.b2)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, width: int) -> LayerNormParams:
        return cls(_ones((width,), "gain"), _zeros((width,), "bias"))


def layer_norm(x: Tensor, params: LayerNormParams, eps: float = LAYERNORM_EPS) -> Tensor:
    mean, std = ad.rowwise_mean_std(x, eps)
    col = mean.shape + (1,)
    normed = ad.div(ad.sub(x, ad.reshape(mean, col)), ad.reshape(std, col))
    return ad.add(ad.mul(normed, params.gain), params.bias)


@dataclass
class LinearMixerParams:
    """Affine map across the channel axis, replacing attention."""

    weight: Tensor  # (C, C)
    bias: Tensor  # (C,)

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> LinearMixerParams:
        return cls(_uniform(rng, channels, (channels, channels), "weight"), _zeros((channels,), "bias"))


@dataclass
class MlpMixerParams:
    """Affine, rectifier, affine across the channel axis, replacing attention."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, hidden: int) -> MlpMixerParams:
        return cls(
            _uniform(rng, channels, (channels, hidden), "w1"),
            _zeros((hidden,), "b1"),
            _uniform(rng, hidden, (hidden, channels), "w2"),
            _zeros((channels,), "b2"),
        )


def channel_mix(tokens: Tensor, params: LinearMixerParams | MlpMixerParams) -> Tensor:
    flipped = ad.permute10(tokens)  # D x C
    if isinstance(params, LinearMixerParams):
        mixed = ad.add(ad.matmul(flipped, params.weight), params.bias)
    else:
        hidden = ad.relu(ad.add(ad.matmul(flipped, params.w1), params.b1))
        mixed = ad.add(ad.matmul(hidden, params.w2), params.b2)
    return ad.permute10(mixed)


@dataclass
class EncoderBlockParams:
    """One post-norm encoder block. ``mixer`` is None for the attention-free variant."""

    mixer: MhaParams | LinearMixerParams | MlpMixerParams | None
    ffn: FfnParams
    norm1: LayerNormParams
    norm2: LayerNormParams


def encoder_block(tokens: Tensor, params: EncoderBlockParams, attention_out: list | None = None) -> Tensor:
    mixer = params.mixer
    if mixer is None:
        x1 = layer_norm(tokens, params.norm1)
    else:
        if isinstance(mixer, MhaParams):
            mixed = cross_variable_attention(tokens, mixer, attention_out)
        else:
            mixed = channel_mix(tokens, mixer)
        x1 = layer_norm(ad.add(tokens, mixed), params.norm1)
    return layer_norm(ad.add(x1, feed_forward(x1, params.ffn)), params.norm2)


# ---------------------------------------------------------------------------
# heads


@dataclass
class AffineParams:
    """A single affine map over the last axis, shared by every token or channel."""

    weight: Tensor  # (in, out)
    bias: Tensor  # (out,)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> AffineParams:
        return cls(_uniform(rng, n_in, (n_in, n_out), "weight"), _zeros((n_out,), "bias"))


ProjectionParams = AffineParams
LinearTrendParams = AffineParams
EmbeddingParams = AffineParams


def _affine(x: Tensor, params: AffineParams) -> Tensor:
    if x.shape[-1] != params.weight.shape[0]:
        raise ShapeError(f"affine map expects width {params.weight.shape[0]}, got shape {x.shape}")
    return ad.add(ad.matmul(x, params.weight), params.bias)


def projection_head(x_enc: Tensor, params: ProjectionParams) -> Tensor:
    """Map each ``C x D`` encoder token to a length-``T`` forecast and flip to ``T x C``."""
    return ad.permute10(_affine(x_enc, params))


def linear_trend(O: Tensor, params: LinearTrendParams) -> Tensor:
    """Channel-independent forecast: one shared ``L -> T`` map applied to every channel of ``O``."""
    return ad.permute10(_affine(ad.permute10(O), params))


def optional_embedding(tokens: Tensor, params: EmbeddingParams | None) -> Tensor:
    if params is None:
        raise ValueError("embedding requested but the model was built without add_embedding")
    return _affine(tokens, params)
