"""Numerical self-checks run by ``pvclient selfcheck``."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gradcheck import gradcheck
from .layers import RevInParams, revin_denormalize, revin_normalize
from .model import ModelConfig, PVClient, VariantFlags
from .training import checkpoint_bytes, mse_loss, parse_checkpoint

TOY_CONFIG = ModelConfig(input_len=16, horizon=4, channels=3, num_blocks=1, d_model=8, heads=2,
                         target_channel=0, radiation_channel=1, embed_dim=8)
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def model_gradient_errors(model: PVClient, seed: int = 0, batch: int = 2) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    H = Tensor(rng.uniform(-1.0, 1.0, size=(batch, cfg.input_len, cfg.channels)))
    G = Tensor(rng.uniform(-1.0, 1.0, size=(batch, cfg.horizon)))
    named = model.named_parameters()
    for name, t in named:
        t.name = name
    return gradcheck(lambda: mse_loss(model.forward(H).final, G), [t for _, t in named])


def variant_flag_set() -> dict[str, VariantFlags]:
    base = VariantFlags()
    return {
        "full": base,
        "no-linear": replace(base, use_linear=False),
        "no-revin": replace(base, use_revin=False),
        "embed": replace(base, add_embedding=True),
        "linear-mixer": replace(base, attention_kind="linear"),
        "mlp-mixer": replace(base, attention_kind="mlp"),
        "no-attention": replace(base, attention_kind="none"),
        "radiation-dim": replace(base, output_mode="radiation"),
        "sum-fixed": replace(base, output_mode="sum-fixed"),
        "sum-learnable": replace(base, output_mode="sum-learnable"),
    }


def check_gradients() -> CheckResult:
    worst, where = 0.0, ""
    for label, flags in variant_flag_set().items():
        errs = model_gradient_errors(PVClient(TOY_CONFIG, flags, seed=11))
        name, err = max(errs.items(), key=lambda kv: kv[1])
        if err > worst:
            worst, where = err, f"{label}:{name}"
    return CheckResult("gradients", worst < GRAD_TOL, f"max relative error {worst:.2e} ({where})")


def check_revin_round_trip(instances: int = 200, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    params = RevInParams.init(6)
    for _ in range(instances):
        params.alpha.data[:] = rng.uniform(0.5, 2.0, 6)
        params.beta.data[:] = rng.uniform(-1.0, 1.0, 6)
        H = Tensor(rng.normal(rng.uniform(-10, 10, 6), rng.uniform(0.1, 10, 6), size=(192, 6)))
        O, stats = revin_normalize(H, params)
        worst = max(worst, float(np.abs(revin_denormalize(O, params, stats, range(6)).data - H.data).max()))
    return CheckResult("revin-round-trip", worst < 1e-6, f"max abs error {worst:.2e}")


def check_attention_rows(passes: int = 20, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = PVClient(replace(TOY_CONFIG, num_blocks=2), seed=5)
    worst = 0.0
    with ad.no_grad():
        for _ in range(passes):
            H = rng.normal(0.0, 3.0, size=(4, TOY_CONFIG.input_len, TOY_CONFIG.channels))
            for a in model.forward(H, record_attention=True).attention:
                if np.any(a < 0):
                    return CheckResult("attention-rows", False, "negative attention weight")
                worst = max(worst, float(np.abs(a.sum(axis=-1) - 1.0).max()))
    return CheckResult("attention-rows", worst <= 1e-12, f"max |row sum - 1| {worst:.2e}")


def check_permutation(seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = replace(TOY_CONFIG, channels=6, radiation_channel=1)
    model = PVClient(cfg, seed=9)
    H = rng.normal(size=(3, cfg.input_len, cfg.channels))
    with ad.no_grad():
        ref = model.forward(H).final.data
        worst = 0.0
        for _ in range(5):
            perm = np.concatenate([[0], 1 + rng.permutation(5)])
            out = model.forward(H[..., perm]).final.data
            worst = max(worst, float(np.abs(out - ref).max()))
    return CheckResult("permutation", worst < 1e-9, f"max target forecast change {worst:.2e}")


def check_checkpoint(seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = PVClient(TOY_CONFIG, seed=21)
    for p in model.parameters():
        p.data += rng.normal(0.0, 0.1, size=p.shape)
    H = rng.normal(size=(2, TOY_CONFIG.input_len, TOY_CONFIG.channels))
    blob = checkpoint_bytes(model)
    loaded = parse_checkpoint(blob).model
    with ad.no_grad():
        same = np.array_equal(model.forward(H).final.data, loaded.forward(H).final.data)
    stable = checkpoint_bytes(loaded) == blob
    return CheckResult("checkpoint", same and stable, f"forward bitwise equal={same}, re-save identical={stable}")


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "gradients": check_gradients,
    "revin-round-trip": check_revin_round_trip,
    "attention-rows": check_attention_rows,
    "permutation": check_permutation,
    "checkpoint": check_checkpoint,
}


def run_selfcheck(emit: Callable[[str], None] = print) -> bool:
    start = time.perf_counter()
    failed = None
    for name, fn in CHECKS.items():
        try:
            result = fn()
        except Exception as exc:  # a crashing check is a failing check
            result = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
        emit(f"[{'ok' if result.passed else 'FAILED'}] {result.name}: {result.detail}")
        if not result.passed and failed is None:
            failed = result.name
    elapsed = time.perf_counter() - start
    emit(f"FAIL ({failed}) in {elapsed:.1f}s" if failed else f"PASS in {elapsed:.1f}s")
    return failed is None
