"""The PV-Client forward pass and its ablation / output-wiring variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import (
    AffineParams,
    EncoderBlockParams,
    FfnParams,
    LayerNormParams,
    LinearMixerParams,
    MhaParams,
    MlpMixerParams,
    RevInParams,
    RevInStats,
    encoder_block,
    linear_trend,
    named_tensors,
    optional_embedding,
    projection_head,
    revin_denormalize,
    revin_normalize,
)


class AttentionKind(str, Enum):
    ATTENTION = "attention"
    LINEAR = "linear"
    MLP = "mlp"
    NONE = "none"


class OutputMode(str, Enum):
    PV_DIM = "pv"
    RADIATION_DIM = "radiation"
    SUM_FIXED = "sum-fixed"
    SUM_LEARNABLE = "sum-learnable"


@dataclass(frozen=True)
class ModelConfig:
    input_len: int = 192
    horizon: int = 96
    channels: int = 6
    num_blocks: int = 2
    d_model: int = 128
    heads: int = 8
    target_channel: int = 0
    radiation_channel: int = 1
    embed_dim: int = 64

    def __post_init__(self):
        for name in ("input_len", "horizon", "channels", "num_blocks", "d_model", "heads", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        for name in ("target_channel", "radiation_channel"):
            if not 0 <= getattr(self, name) < self.channels:
                raise ValueError(f"ModelConfig.{name}={getattr(self, name)} outside [0, {self.channels})")
        if self.target_channel == self.radiation_channel:
            raise ValueError("target_channel and radiation_channel must differ")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class VariantFlags:
    use_linear: bool = True
    use_revin: bool = True
    add_embedding: bool = False
    attention_kind: AttentionKind = AttentionKind.ATTENTION
    output_mode: OutputMode = OutputMode.PV_DIM
    sum_weights: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "attention_kind", AttentionKind(self.attention_kind))
        object.__setattr__(self, "output_mode", OutputMode(self.output_mode))
        object.__setattr__(self, "sum_weights", tuple(float(w) for w in self.sum_weights))
        if len(self.sum_weights) != 2:
            raise ValueError(f"sum_weights must hold two values, got {self.sum_weights}")

    def to_dict(self) -> dict:
        return {
            "use_linear": self.use_linear,
            "use_revin": self.use_revin,
            "add_embedding": self.add_embedding,
            "attention_kind": self.attention_kind.value,
            "output_mode": self.output_mode.value,
            "sum_weights": list(self.sum_weights),
        }

    @classmethod
    def from_dict(cls, d: dict) -> VariantFlags:
        d = dict(d)
        if "sum_weights" in d:
            d["sum_weights"] = tuple(d["sum_weights"])
        return cls(**d)


@dataclass
class ModelParams:
    revin: RevInParams | None
    embedding: AffineParams | None
    blocks: list[EncoderBlockParams]
    projection: AffineParams
    linear: AffineParams | None
    w_trans: Tensor
    w_lin: Tensor | None
    sum_weights: Tensor | None


@dataclass
class Prediction:
    f_trans: Tensor  # (..., T, C)
    f_lin: Tensor  # (..., T, C); zeros when the linear module is ablated
    combined: Tensor  # (..., T, C)
    final: Tensor  # (..., T)
    stats: RevInStats | None
    attention: list = field(default_factory=list)


def _scalar(value: float, name: str) -> Tensor:
    return Tensor(np.array([value]), requires_grad=True, name=name)


def init_params(cfg: ModelConfig, flags: VariantFlags, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    token_dim = cfg.embed_dim if flags.add_embedding else cfg.input_len
    revin = RevInParams.init(cfg.channels) if flags.use_revin else None
    embedding = AffineParams.init(rng, cfg.input_len, cfg.embed_dim) if flags.add_embedding else None
    blocks = []
    for _ in range(cfg.num_blocks):
        kind = flags.attention_kind
        if kind is AttentionKind.ATTENTION:
            mixer = MhaParams.init(rng, token_dim, cfg.d_model, cfg.heads)
        elif kind is AttentionKind.LINEAR:
            mixer = LinearMixerParams.init(rng, cfg.channels)
        elif kind is AttentionKind.MLP:
            mixer = MlpMixerParams.init(rng, cfg.channels, cfg.d_model)
        else:
            mixer = None
        blocks.append(
            EncoderBlockParams(
                mixer,
                FfnParams.init(rng, token_dim, cfg.d_model),
                LayerNormParams.init(token_dim),
                LayerNormParams.init(token_dim),
            )
        )
    projection = AffineParams.init(rng, token_dim, cfg.horizon)
    linear = AffineParams.init(rng, cfg.input_len, cfg.horizon) if flags.use_linear else None
    sum_weights = None
    if flags.output_mode is OutputMode.SUM_LEARNABLE:
        sum_weights = Tensor(np.array(flags.sum_weights), requires_grad=True, name="sum_weights")
    return ModelParams(
        revin=revin,
        embedding=embedding,
        blocks=blocks,
        projection=projection,
        linear=linear,
        w_trans=_scalar(1.0, "w_trans"),
        w_lin=_scalar(1.0, "w_lin") if flags.use_linear else None,
        sum_weights=sum_weights,
    )


class PVClient:
    """Cross-variable encoder plus channel-independent linear trend under RevIN.

    ``forward`` takes ``H`` of shape ``(L, C)`` or ``(B, L, C)`` and returns the
    denormalized target-series forecast in ``Prediction.final``.
    """

    def __init__(self, cfg: ModelConfig | None = None, flags: VariantFlags | None = None, seed: int = 42):
        self.cfg = cfg or ModelConfig()
        self.flags = flags or VariantFlags()
        self.seed = seed
        self.params = init_params(self.cfg, self.flags, seed)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_tensors(self.params))

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def output_channels(self) -> list[tuple[int, float | Tensor]]:
        """Channels read by the output head, each with its mixing weight."""
        cfg, mode = self.cfg, self.flags.output_mode
        if mode is OutputMode.PV_DIM:
            return [(cfg.target_channel, 1.0)]
        if mode is OutputMode.RADIATION_DIM:
            return [(cfg.radiation_channel, 1.0)]
        if mode is OutputMode.SUM_FIXED:
            w_pv, w_rad = self.flags.sum_weights
            return [(cfg.target_channel, w_pv), (cfg.radiation_channel, w_rad)]
        sw = self.params.sum_weights
        return [(cfg.target_channel, ad.take(sw, 0, axis=0)), (cfg.radiation_channel, ad.take(sw, 1, axis=0))]

    def forward(self, H: Tensor | np.ndarray, record_attention: bool = False) -> Prediction:
        H = ad.as_tensor(H)
        cfg, flags, p = self.cfg, self.flags, self.params
        if H.shape[-2:] != (cfg.input_len, cfg.channels):
            raise ShapeError(f"input shape {H.shape} does not end in ({cfg.input_len}, {cfg.channels})")
        if flags.use_revin:
            O, stats = revin_normalize(H, p.revin)
        else:
            O, stats = H, None
        tokens = ad.permute10(O)
        if flags.add_embedding:
            tokens = optional_embedding(tokens, p.embedding)
        attention: list = [] if record_attention else None
        for block in p.blocks:
            tokens = encoder_block(tokens, block, attention)
        f_trans = projection_head(tokens, p.projection)
        combined = ad.mul(p.w_trans, f_trans)
        if flags.use_linear:
            f_lin = linear_trend(O, p.linear)
            combined = ad.add(combined, ad.mul(p.w_lin, f_lin))
        else:
            f_lin = Tensor(np.zeros(f_trans.shape))
        final = None
        for channel, weight in self.output_channels():
            series = self._restore(ad.take(combined, channel, axis=-1), channel, stats)
            term = series if isinstance(weight, float) and weight == 1.0 else ad.mul(weight, series)
            final = term if final is None else ad.add(final, term)
        return Prediction(f_trans, f_lin, combined, final, stats, attention or [])

    __call__ = forward

    def _restore(self, series: Tensor, channel: int, stats: RevInStats | None) -> Tensor:
        if stats is None:
            return series
        return revin_denormalize(series, self.params.revin, stats, [channel])

    def decompose(self, H, prediction: Prediction | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Split the final forecast into a trend part (linear module) and a detail part (encoder).

        The trend part carries the restored level (mean and RevIN shift); the detail
        part is the encoder output rescaled by ``sigma / alpha`` only, so
        ``trend + detail`` reproduces ``final``.
        """
        if prediction is None:
            with ad.no_grad():
                prediction = self.forward(H)
        p = self.params
        w_trans = p.w_trans.data[0]
        w_lin = p.w_lin.data[0] if p.w_lin is not None else 0.0
        trend = 0.0
        detail = 0.0
        for channel, weight in self.output_channels():
            weight = float(weight.data) if isinstance(weight, Tensor) else weight
            lin = w_lin * prediction.f_lin.data[..., channel]
            tr = w_trans * prediction.f_trans.data[..., channel]
            if prediction.stats is not None:
                alpha = p.revin.alpha.data[channel]
                beta = p.revin.beta.data[channel]
                mu = prediction.stats.mu.data[..., channel][..., None]
                sigma = prediction.stats.sigma.data[..., channel][..., None]
                lin = (lin - beta) / alpha * sigma + mu
                tr = tr / alpha * sigma
            trend = trend + weight * lin
            detail = detail + weight * tr
        return np.asarray(trend), np.asarray(detail)


def count_parameters(cfg: ModelConfig, flags: VariantFlags) -> dict[str, int]:
    """Closed-form count of learnable scalars per submodule, plus ``total``."""
    C, L, T, dm = cfg.channels, cfg.input_len, cfg.horizon, cfg.d_model
    D = cfg.embed_dim if flags.add_embedding else L
    counts = {}
    if flags.use_revin:
        counts["revin"] = 2 * C
    if flags.add_embedding:
        counts["embedding"] = L * D + D
    mixer = {
        AttentionKind.ATTENTION: 4 * D * dm,
        AttentionKind.LINEAR: C * C + C,
        AttentionKind.MLP: C * dm + dm + dm * C + C,
        AttentionKind.NONE: 0,
    }[flags.attention_kind]
    block = mixer + (D * dm + dm + dm * D + D) + 4 * D
    counts["encoder"] = cfg.num_blocks * block
    counts["projection"] = D * T + T
    if flags.use_linear:
        counts["linear"] = L * T + T
    counts["combine"] = 2 if flags.use_linear else 1
    if flags.output_mode is OutputMode.SUM_LEARNABLE:
        counts["sum_weights"] = 2
    counts["total"] = sum(counts.values())
    return counts
