"""Command-line interface: dataset generation, training, evaluation, ablation.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage/format error.
Every command is deterministic given (config, seed, data). Training outputs
land in a per-run directory named by timestamp plus config hash unless
--run-dir pins it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import blocks, data as dt, train as tr
from .config import (
    ABLATIONS,
    RunConfig,
    config_hash,
    load_config,
    model_config,
    serialize_config,
)
from .data import SynthSpec
from .errors import (
    CompatibilityError,
    ConfigurationError,
    DataError,
    DelaycastError,
    FormatError,
    NumericError,
    UsageError,
)
from .graphs import load_geometry

ENV_DATA_DIR = "DELAYCAST_DATA_DIR"

ABLATION_LABELS = {
    "none": "full",
    "sa": "w/o SA",
    "mg-g": "w/o MG-G",
    "mg-l": "w/o MG-L",
}
HIGHLIGHT_HORIZONS = (3, 6, 12)


def _resolve_input(path: str) -> Path:
    """Resolve a data path, falling back to the data-directory env var."""
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    base = os.environ.get(ENV_DATA_DIR)
    if base and (Path(base) / p).exists():
        return Path(base) / p
    return p


def _load_dataset(path: str, split: str) -> dt.Dataset:
    resolved = _resolve_input(path)
    if not resolved.exists():
        raise UsageError(f"data file not found: {resolved}")
    return dt.load_stgf(resolved, split=split)


def _run_dir(out: str, cfg: RunConfig, explicit: str | None) -> Path:
    if explicit:
        run_dir = Path(explicit)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(out) / f"{stamp}-{config_hash(cfg)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    spec = SynthSpec(
        n_nodes=args.nodes,
        n_steps=args.steps,
        max_delay=args.max_delay,
        noise_sigma=args.noise,
        n_harmonics=args.harmonics,
    )
    ds, delays = dt.synth_delayed_diffusion(spec, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dt.save_stgf(out, ds)
    sidecar = out.with_suffix(out.suffix + ".delays.txt")
    sidecar.write_text("".join(f"{d}\n" for d in delays), encoding="utf-8")
    print(f"wrote {out} ({ds.n_steps} steps, {ds.n_nodes} nodes) and {sidecar}")
    return 0


# ---------------------------------------------------------------------------
# train


def _print_epoch(record) -> None:
    print(
        f"epoch {record.epoch:3d}  lr {record.lr:.2e}  "
        f"train {record.train_loss:.5f}  val MAE {record.val_mae:.5f}  val RMSE {record.val_rmse:.5f}"
    )


def _train_once(cfg: RunConfig, ds: dt.Dataset, run_dir: Path, quiet: bool = False):
    """Run one training job and persist checkpoint/config/report into run_dir."""
    log_path = run_dir / "report.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:

        def log_fn(record):
            log.write(json.dumps(vars(record)) + "\n")
            if not quiet:
                _print_epoch(record)

        params, report, model_cfg, norm = tr.train_loop(cfg, ds, log_fn=log_fn)
    (run_dir / "config.cfg").write_text(serialize_config(cfg), encoding="utf-8")
    if report.epochs:
        blocks.save_checkpoint(run_dir / "model.ckpt", params)
    summary = report.to_dict()
    summary["config_hash"] = config_hash(cfg)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return params, report, model_cfg, norm


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.ablate:
        cfg = dataclasses.replace(cfg, ablation=args.ablate)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    ds = _load_dataset(args.data, cfg.split)
    run_dir = _run_dir(args.out, cfg, args.run_dir)
    params, report, model_cfg, _ = _train_once(cfg, ds, run_dir)
    if report.diverged:
        print(f"training diverged; last good checkpoint retained in {run_dir}", file=sys.stderr)
        return 1
    if report.test_mae is not None:
        print(f"test MAE {report.test_mae:.5f}  RMSE {report.test_rmse:.5f}  (outputs in {run_dir})")
    else:
        print(f"no epochs requested; config snapshot written to {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _horizon_table(horizon_mae: list[float]) -> str:
    lines = ["horizon  MAE"]
    for h, value in enumerate(horizon_mae, start=1):
        mark = "  <-" if h in HIGHLIGHT_HORIZONS else ""
        lines.append(f"{h:7d}  {value:.5f}{mark}")
    return "\n".join(lines)


def _dump_predictions(cfg, params, ds, split, path, batch_size=128) -> int:
    count = dt.window_count(ds, cfg.history_len, cfg.horizon, split)
    channels = range(cfg.out_channels)
    header = ["window", "node", "horizon"]
    header += [f"pred_c{c}" for c in channels] + [f"true_c{c}" for c in channels]
    rows = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for start in range(0, count, batch_size):
            origins = np.arange(start, min(start + batch_size, count))
            x, y = dt.window_batch(ds, cfg.history_len, cfg.horizon, split, origins)
            pred = dt.denormalize(ds, blocks.forward(x, cfg, params, ds.geometry, mode="eval").data)
            true = dt.denormalize(ds, y)
            for b, origin in enumerate(origins):
                for node in range(cfg.n_nodes):
                    for h in range(cfg.horizon):
                        cells = [str(origin), str(node), str(h + 1)]
                        cells += [repr(float(v)) for v in pred[b, node, h]]
                        cells += [repr(float(v)) for v in true[b, node, h]]
                        fh.write(",".join(cells) + "\n")
                        rows += 1
    return rows


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    config_path = Path(args.config) if args.config else checkpoint.parent / "config.cfg"
    if not config_path.exists():
        raise UsageError(f"config not found next to checkpoint: {config_path} (pass --config)")
    cfg = load_config(config_path)
    ds = _load_dataset(args.data, cfg.split)
    norm = dt.normalize(ds)
    model_cfg = model_config(cfg, ds.n_nodes, ds.n_channels, ds.geometry)
    params = blocks.restore_params(model_cfg, blocks.load_checkpoint(checkpoint))
    overall_mae, overall_rmse, horizon_mae = tr.evaluate(model_cfg, params, norm, args.split)
    print(f"split {args.split}: MAE {overall_mae:.5f}  RMSE {overall_rmse:.5f}")
    print(_horizon_table(horizon_mae))
    if args.dump:
        rows = _dump_predictions(model_cfg, params, norm, args.split, args.dump)
        print(f"dumped {rows} prediction rows to {args.dump}")
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    base = load_config(args.config) if args.config else RunConfig()
    if base.ablation != "none":
        raise UsageError("the ablation harness needs a base config with ablation = none")
    ds = _load_dataset(args.data, base.split)
    out = Path(args.out)
    base_hash = config_hash(base)
    results = {}
    for variant in ABLATIONS:
        cfg = dataclasses.replace(base, ablation=variant)
        run_dir = out / f"ablate-{variant}"
        run_dir.mkdir(parents=True, exist_ok=True)
        print(f"== training variant: {ABLATION_LABELS[variant]}")
        _, report, _, _ = _train_once(cfg, ds, run_dir, quiet=True)
        if report.diverged:
            raise NumericError(f"variant {variant!r} diverged")
        results[variant] = {
            "label": ABLATION_LABELS[variant],
            "test_mae": report.test_mae,
            "test_rmse": report.test_rmse,
            "config_hash": base_hash,
        }
    width = max(len(v["label"]) for v in results.values())
    print(f"{'variant'.ljust(width)}  MAE      RMSE     config")
    for variant in ABLATIONS:
        row = results[variant]
        print(f"{row['label'].ljust(width)}  {row['test_mae']:.5f}  {row['test_rmse']:.5f}  {base_hash}")
    (out / "ablation.json").write_text(json.dumps(results, indent=2), encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# convert


def cmd_convert(args) -> int:
    ds = dt.import_text(_resolve_input(args.input))
    if args.geometry:
        geom = load_geometry(_resolve_input(args.geometry))
        ds = dt.Dataset(values=ds.values, geometry=geom, split=ds.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dt.save_stgf(out, ds)
    print(f"wrote {out} ({ds.n_steps} steps, {ds.n_nodes} nodes, {ds.n_channels} channels)")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="delaycast",
        description="Delay-aware spatio-temporal graph forecasting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic delayed-diffusion dataset")
    p_gen.add_argument("--nodes", type=int, required=True)
    p_gen.add_argument("--steps", type=int, required=True)
    p_gen.add_argument("--max-delay", type=int, default=5)
    p_gen.add_argument("--noise", type=float, default=0.0, help="noise std relative to signal std")
    p_gen.add_argument("--harmonics", type=int, default=3)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train a model on an STGF dataset")
    p_train.add_argument("--config", help="key = value config file (defaults apply otherwise)")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", default="runs")
    p_train.add_argument("--run-dir", help="exact output directory (default: out/<stamp>-<hash>)")
    p_train.add_argument("--ablate", choices=[a for a in ABLATIONS if a != "none"])
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", help="config file (default: config.cfg beside the checkpoint)")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_eval.add_argument("--dump", help="write predicted-vs-true series to this delimited file")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="train the full model and every ablation with one seed")
    p_abl.add_argument("--config")
    p_abl.add_argument("--data", required=True)
    p_abl.add_argument("--out", default="ablation")
    p_abl.set_defaults(func=cmd_ablate)

    p_conv = sub.add_parser("convert", help="convert a time,node,channel,value table to STGF")
    p_conv.add_argument("--input", required=True)
    p_conv.add_argument("--out", required=True)
    p_conv.add_argument("--geometry", help="node,x,y / node,lon,lat table or distance matrix")
    p_conv.set_defaults(func=cmd_convert)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, FormatError, ConfigurationError, DataError, CompatibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    except DelaycastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
