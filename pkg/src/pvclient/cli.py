"""Command-line entry point: ``pvclient {synth-data,train,evaluate,ablate,selfcheck}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path


from .data import DataError, SeriesFrame, load_csv, synth_station, write_csv
from .evaluation import (
    GRID_KINDS,
    evaluate_linear_regression,
    evaluate_model,
    evaluate_persistence,
    export_plot_data,
    prepare_data,
    run_grid,
)
from .model import AttentionKind, ModelConfig, OutputMode, PVClient, VariantFlags
from .training import CheckpointError, TrainConfig, checkpoint_bytes, load_checkpoint, train

OUTPUT_DIR_ENV = "PVCLIENT_OUTPUT_DIR"
DEFAULT_SEED = 42

VARIANTS = {
    "full": {},
    "no-linear": {"use_linear": False},
    "no-revin": {"use_revin": False},
    "embed": {"add_embedding": True},
}


class UsageError(Exception):
    pass


def _default_out() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "pvclient-out"))


def _echo_config(command: str, **settings) -> None:
    print(json.dumps({"command": command, **settings}, sort_keys=True, default=str))


def _add_data_source(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="station CSV file")
    src.add_argument("--synth-days", type=int, help="generate a synthetic station of this many days instead")
    p.add_argument("--capacity", type=float, default=None, help="installed capacity in kW (required with --data)")
    p.add_argument("--synth-seed", type=int, default=None, help="synthetic generator seed (defaults to --seed)")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input-len", type=int, default=192)
    p.add_argument("--horizon", type=int, default=96)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--variant", choices=sorted(VARIANTS), default="full")
    p.add_argument("--attention", choices=[k.value for k in AttentionKind], default=AttentionKind.ATTENTION.value)
    p.add_argument("--output-mode", choices=[m.value for m in OutputMode], default=OutputMode.PV_DIM.value)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--clip-norm", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvclient", description="Day-ahead PV power forecasting experiments.")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic station CSV")
    p.add_argument("--days", type=int, default=60)
    p.add_argument("--capacity", type=float, default=100.0)
    p.add_argument("--shift", type=float, default=0.4, help="relative irradiance ramp over the series")
    p.add_argument("--weather-source", choices=["forecast", "measured"], default="forecast")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_data_source(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out-checkpoint", type=Path, default=None)

    p = sub.add_parser("evaluate", help="score a checkpoint against persistence and linear regression")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_data_source(p)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--out-dir", type=Path, default=None)

    p = sub.add_parser("ablate", help="train and score one experiment grid")
    p.add_argument("--grid", choices=list(GRID_KINDS), required=True)
    _add_data_source(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out-dir", type=Path, default=None)

    sub.add_parser("selfcheck", help="run the numerical self-checks")
    return parser


def _load_frame(args) -> tuple[SeriesFrame, dict]:
    if args.data is not None:
        if args.capacity is None:
            raise UsageError("--capacity is required with --data")
        return load_csv(args.data, args.capacity), {"data": str(args.data), "capacity": args.capacity}
    seed = args.seed if args.synth_seed is None else args.synth_seed
    capacity = 100.0 if args.capacity is None else args.capacity
    frame, _ = synth_station(seed, args.synth_days, capacity)
    return frame, {"synth_days": args.synth_days, "synth_seed": seed, "capacity": capacity}


def _model_setup(args) -> tuple[ModelConfig, VariantFlags, TrainConfig]:
    cfg = ModelConfig(input_len=args.input_len, horizon=args.horizon, num_blocks=args.blocks,
                      d_model=args.d_model, heads=args.heads)
    flags = VariantFlags(attention_kind=args.attention, output_mode=args.output_mode, **VARIANTS[args.variant])
    tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       clip_norm=args.clip_norm)
    return cfg, flags, tcfg


def cmd_synth_data(args) -> int:
    out = args.out or _default_out() / f"synth_seed{args.seed}_{args.days}d.csv"
    _echo_config("synth-data", seed=args.seed, days=args.days, capacity=args.capacity, shift=args.shift,
                 weather_source=args.weather_source, out=out)
    frame, meta = synth_station(args.seed, args.days, args.capacity, args.shift, args.weather_source)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(frame, out)
    print(f"rows: {len(frame)}")
    print("coefficients: " + json.dumps(meta, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    frame, source = _load_frame(args)
    cfg, flags, tcfg = _model_setup(args)
    out = args.out_checkpoint or _default_out() / "model.pvcl"
    _echo_config("train", seed=args.seed, model=cfg.to_dict(), flags=flags.to_dict(), train=vars(tcfg),
                 out_checkpoint=out, **source)
    data = prepare_data(frame, cfg.input_len, cfg.horizon)
    if not data.train_windows:
        raise DataError("training split is too short for a single window")
    model = PVClient(cfg, flags, seed=tcfg.seed)
    H, G = data.train_arrays()
    log = train(model, H, G, tcfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(checkpoint_bytes(model, data.standardizer, {"variant": args.variant}))
    log_path = out.with_suffix(out.suffix + ".log.csv")
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        writer.writerow([0, repr(log.initial_loss)])
        for i, loss in enumerate(log.epoch_loss, start=1):
            writer.writerow([i, repr(loss)])
    for i, loss in enumerate(log.epoch_loss, start=1):
        print(f"epoch {i}: loss {loss:.3f}")
    print(f"checkpoint: {out}")
    print(f"log: {log_path}")
    return 0


def cmd_evaluate(args) -> int:
    frame, source = _load_frame(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    out_dir = args.out_dir or _default_out()
    _echo_config("evaluate", seed=args.seed, checkpoint=args.checkpoint, split=args.split, out_dir=out_dir, **source)
    if ckpt.standardizer is None:
        raise CheckpointError("checkpoint carries no standardizer statistics")
    if len(ckpt.standardizer.mean) != model.cfg.channels or model.cfg.channels != frame.values.shape[1]:
        raise CheckpointError(f"checkpoint expects {model.cfg.channels} channels, data has {frame.values.shape[1]}")
    data = prepare_data(frame, model.cfg.input_len, model.cfg.horizon, ckpt.standardizer, eval_split=args.split)
    reports = {
        "PV-Client": evaluate_model(model, data),
        "Persistence": evaluate_persistence(data),
        "LR": evaluate_linear_regression(data),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "evaluation.csv"
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "mse", "acc", "n"])
        for label, rep in reports.items():
            m = rep.metrics
            writer.writerow([label, repr(m.mse), repr(m.acc), m.n])
    export_plot_data(reports["PV-Client"], out_dir / "plot_data.csv")
    print(f"{'model':<12} {'MSE':>12} {'Acc':>8}")
    for label, rep in reports.items():
        print(f"{label:<12} {rep.metrics.mse:>12.3f} {rep.metrics.acc:>8.3f}")
    print(f"report: {report_path}")
    return 0


def cmd_ablate(args) -> int:
    frame, source = _load_frame(args)
    cfg, flags, tcfg = _model_setup(args)
    out_dir = args.out_dir or _default_out()
    _echo_config("ablate", grid=args.grid, seed=args.seed, model=cfg.to_dict(), flags=flags.to_dict(),
                 train=vars(tcfg), out_dir=out_dir, **source)
    grid = run_grid(args.grid, frame, cfg, flags, tcfg,
                    progress=lambda label, m: print(f"{label:<24} mse {m.mse:.3f}  acc {m.acc:.3f}", flush=True))
    csv_path, json_path = grid.write(out_dir)
    print(f"grid csv: {csv_path}")
    print(f"summary: {json_path}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    _echo_config("selfcheck", seed=args.seed)
    return 0 if run_selfcheck() else 1


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "selfcheck": cmd_selfcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
