"""Loss, ADAM, the mini-batch training loop and binary checkpoints."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .data import Standardizer
from .model import ModelConfig, PVClient, VariantFlags

logger = logging.getLogger(__name__)

MAGIC = b"PVCL"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def mse_loss(pred: Tensor, target) -> Tensor:
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction shape {pred.shape} != target shape {target.shape}")
    diff = ad.sub(pred, target)
    return ad.tensor_mean(ad.mul(diff, diff))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    seed: int = 42
    clip_norm: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError(f"invalid TrainConfig {self}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            if g is None:
                g = np.zeros(p.shape)
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {p.name}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainingLog:
    epoch_loss: list[float] = field(default_factory=list)
    initial_loss: float | None = None
    steps: int = 0


def _clip(grads: list[np.ndarray | None], max_norm: float) -> list[np.ndarray | None]:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
    if total <= max_norm:
        return grads
    factor = max_norm / (total + 1e-12)
    return [None if g is None else g * factor for g in grads]


def evaluate_loss(model: PVClient, H: np.ndarray, G: np.ndarray, batch_size: int = 512) -> float:
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(H), batch_size):
            pred = model.forward(H[lo:lo + batch_size]).final.data
            total += float(((pred - G[lo:lo + batch_size]) ** 2).sum())
    return total / G.size


def train(model: PVClient, H: np.ndarray, G: np.ndarray, cfg: TrainConfig | None = None) -> TrainingLog:
    """Train on standardized windows ``H`` (N, L, C) and targets ``G`` (N, T).

    Window order is reshuffled every epoch by a generator seeded from ``cfg.seed``;
    the last partial batch is kept.
    """
    cfg = cfg or TrainConfig()
    H = np.asarray(H, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if len(H) == 0:
        raise ValueError("train called with no windows")
    if len(H) != len(G):
        raise ShapeError(f"{len(H)} inputs but {len(G)} targets")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.learning_rate)
    log = TrainingLog(initial_loss=evaluate_loss(model, H, G))
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(H))
        weighted = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            model.zero_grad()
            loss = mse_loss(model.forward(H[idx]).final, G[idx])
            ad.backward(loss)
            grads = [p.grad for p in params]
            if cfg.clip_norm is not None:
                grads = _clip(grads, cfg.clip_norm)
            opt.step(grads)
            log.steps += 1
            weighted += loss.item() * len(idx)
        log.epoch_loss.append(weighted / len(order))
        logger.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, log.epoch_loss[-1])
    model.zero_grad()
    return log


# ---------------------------------------------------------------------------
# checkpoints


def _header_bytes(model: PVClient, standardizer: Standardizer | None, extra: dict | None) -> bytes:
    header = {
        "model_config": model.cfg.to_dict(),
        "variant_flags": model.flags.to_dict(),
        "seed": model.seed,
        "standardizer": standardizer.to_dict() if standardizer is not None else None,
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in model.named_parameters()],
        "extra": extra or {},
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(model: PVClient, standardizer: Standardizer | None = None, extra: dict | None = None) -> bytes:
    header = _header_bytes(model, standardizer, extra)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    for _, t in model.named_parameters():
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path: str | Path, model: PVClient, standardizer: Standardizer | None = None,
                    extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, standardizer, extra))


@dataclass
class Checkpoint:
    model: PVClient
    standardizer: Standardizer | None
    extra: dict


def parse_checkpoint(blob: bytes, expected_config: ModelConfig | None = None) -> Checkpoint:
    if len(blob) < 16:
        raise CheckpointError("checkpoint truncated: shorter than the fixed preamble")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}: not a PVCL checkpoint (unsupported version)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise CheckpointError("checkpoint truncated inside the header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    cfg = ModelConfig(**header["model_config"])
    if expected_config is not None and cfg != expected_config:
        expected = PVClient(expected_config, VariantFlags.from_dict(header["variant_flags"]), 0).named_parameters()
        _check_table(header["tensors"], [(n, t.shape) for n, t in expected])
    model = PVClient(cfg, VariantFlags.from_dict(header["variant_flags"]), int(header["seed"]))
    named = model.named_parameters()
    _check_table(header["tensors"], [(n, t.shape) for n, t in named])
    offset = 16 + hlen
    for _, t in named:
        nbytes = 8 * t.size
        if offset + nbytes > len(blob):
            raise CheckpointError(f"checkpoint truncated inside tensor data ({t.name})")
        t.data = np.frombuffer(blob, dtype="<f8", count=t.size, offset=offset).astype(np.float64).reshape(t.shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after tensor data")
    std = header.get("standardizer")
    return Checkpoint(model, Standardizer.from_dict(std) if std else None, header.get("extra", {}))


def _check_table(stored: list[dict], built: list[tuple[str, tuple]]) -> None:
    for i, entry in enumerate(stored):
        if i >= len(built):
            raise CheckpointError(f"shape table mismatch: unexpected tensor {entry['name']}")
        name, shape = built[i]
        if entry["name"] != name or tuple(entry["shape"]) != tuple(shape):
            raise CheckpointError(
                f"shape table mismatch at tensor {entry['name']} {tuple(entry['shape'])}: model expects {name} {tuple(shape)}"
            )
    if len(stored) != len(built):
        raise CheckpointError(f"shape table mismatch: missing tensor {built[len(stored)][0]}")


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), expected_config)
