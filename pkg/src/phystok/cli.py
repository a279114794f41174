"""Command-line entry points.

    phystok pretrain CONFIG [--seed N] [--out DIR] [--steps N]
    phystok rollout-train CONFIG [--freeze full|mostly-frozen] [--tokeniser-init fresh|CKPT]
    phystok eval CONFIG --checkpoint CKPT      (or: phystok eval --pred A --target B)
    phystok rollout-eval CONFIG --checkpoint CKPT
    phystok gen-data CONFIG
    phystok report RUN_DIR

Failures print one JSON record on stderr and exit with a code from
``EXIT_CODES``. Set ``PHYSTOK_DETERMINISTIC=1`` for deterministic kernels.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, config_from_dict, load_config, resolved
from .data import (
    ADVECTION_SCHEMA,
    ArchiveError,
    CorruptHeaderError,
    DatasetMeta,
    FieldSchema,
    SchemaMismatchError,
    TruncatedChunkError,
    advection_dataset,
    dataset_adapter_read,
    gen_gaussian_field_trajectory,
    read_archive_header,
    window_sequences,
    write_archive,
)
from .metrics import BandPartition, evaluate_fields, merge_reports, rollout_evaluate
from .ops import ShapeError
from .tokeniser import Tokeniser, rms_normalise, sample_compression
from .training import (
    METRIC_COLUMNS,
    LoopConfig,
    NonFiniteLossError,
    RunDirLocked,
    Source,
    build_rollout_model,
    model_predictor,
    pretrain_tokeniser,
    run_lock,
    train_rollout,
    write_snapshot,
)

log = logging.getLogger("phystok")

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "config": 2,
    "missing_input": 3,
    "incompatible_shapes": 4,
    "non_finite_loss": 5,
    "run_dir_locked": 6,
    "corrupt_archive": 7,
    "checkpoint_version": 8,
}


def _classify(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, ckpt.CheckpointVersionError):
        return "checkpoint_version"
    if isinstance(exc, (ShapeError, ckpt.IncompatibleCheckpointError, SchemaMismatchError)):
        return "incompatible_shapes"
    if isinstance(exc, (CorruptHeaderError, TruncatedChunkError)):
        return "corrupt_archive"
    if isinstance(exc, FileNotFoundError):
        return "missing_input"
    if isinstance(exc, NonFiniteLossError):
        return "non_finite_loss"
    if isinstance(exc, RunDirLocked):
        return "run_dir_locked"
    return "internal"


# ---------------------------------------------------------------------------
# config and data plumbing


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, out=args.out)
    tr = cfg.training
    if getattr(args, "steps", None) is not None:
        tr = dataclasses.replace(tr, pretrain_steps=args.steps, rollout_steps=args.steps)
    if getattr(args, "freeze", None) is not None:
        tr = dataclasses.replace(tr, freeze={"full": "fully_trainable", "mostly-frozen": "mostly_frozen"}[args.freeze])
    if getattr(args, "tokeniser_init", None) is not None:
        tr = dataclasses.replace(tr, tokeniser_init=args.tokeniser_init)
    return dataclasses.replace(cfg, training=tr)


def _read_config(path) -> RunConfig:
    if not Path(path).exists():
        raise FileNotFoundError(f"config file {path} not found")
    return load_config(path)


def dataset_trajectories(ds, grid, frames: int | None = None):
    """Trajectories ``(C, T, H, W)`` and schema for one dataset section."""
    frames = frames or ds.frames
    if ds.kind == "advection":
        trajs = advection_dataset(ds.n_trajectories, tuple(grid), frames, seed=ds.seed, speeds=ds.speeds)
        return trajs, ADVECTION_SCHEMA
    if ds.kind == "gaussian":
        trajs = [
            gen_gaussian_field_trajectory(tuple(grid), ds.beta, frames, seed=ds.seed * 100_003 + i).astype(np.float32)
            for i in range(ds.n_trajectories)
        ]
        return trajs, FieldSchema.of(("field", "scalar"))
    if ds.kind == "archive":
        if not ds.path:
            raise ConfigError(f"dataset {ds.name!r}: kind 'archive' needs a path")
        schema, _ = read_archive_header(ds.path)
        return list(dataset_adapter_read(ds.path, schema)), schema
    raise ConfigError(f"dataset {ds.name!r}: unknown kind {ds.kind!r}")


def build_sources(cfg: RunConfig) -> list[Source]:
    sources = []
    for ds in cfg.data.datasets:
        trajs, schema = dataset_trajectories(ds, cfg.data.grid)
        n_val = int(round(len(trajs) * cfg.data.val_fraction))
        split = len(trajs) - n_val
        windows = lambda ts: [w for t in ts for w in window_sequences(t, cfg.data.window, cfg.data.stride)]
        train, val = windows(trajs[:split]), windows(trajs[split:])
        if not train:
            raise ConfigError(f"dataset {ds.name!r} yields no training sequences")
        if schema.n_channels != cfg.tokeniser.c_total:
            active = list(range(schema.n_channels))
            if schema.n_channels > cfg.tokeniser.c_total:
                raise ConfigError(
                    f"dataset {ds.name!r} has {schema.n_channels} channels > tokeniser.c_total {cfg.tokeniser.c_total}"
                )
        else:
            active = None
        sources.append(Source(ds.name, train, val, schema, active))
    return sources


def _loop(cfg: RunConfig, stage: str) -> LoopConfig:
    tr = cfg.training
    return LoopConfig(
        steps=tr.pretrain_steps if stage == "pretrain" else tr.rollout_steps,
        batch_size=tr.batch_size,
        accumulation=tr.accumulation,
        unique_batches=tr.pretrain_unique_batches if stage == "pretrain" else tr.rollout_unique_batches,
        shard_id=tr.shard_id,
        num_shards=tr.num_shards,
        val_every=tr.val_every,
        val_sequences=tr.val_sequences,
        ckpt_every=tr.ckpt_every,
        log_every=tr.log_every,
        seed=cfg.seed,
        compression="train" if stage == "pretrain" else tr.rollout_compression,
        thresholds=tuple(cfg.metrics.thresholds) if cfg.metrics.thresholds else None,
    )


def _model_from_checkpoint(path):
    """Rebuild the model recorded in a checkpoint."""
    tensors, meta = ckpt.load_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    state = ckpt.model_state(tensors)
    if meta.get("extra", {}).get("kind") == "tokeniser":
        model = Tokeniser(cfg.tokeniser)
    else:
        model = build_rollout_model(cfg.tokeniser, cfg.processor)
    ckpt.load_into(model, state)
    model.eval()
    return model, cfg, meta


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _apply_overrides(_read_config(args.config), args)
    out = Path(cfg.out)
    with run_lock(out):
        record = resolved(cfg)
        write_snapshot(out, record)
        res = pretrain_tokeniser(
            cfg.tokeniser, build_sources(cfg), _loop(cfg, "pretrain"), cfg.tokeniser_optimiser,
            run_dir=out, config_record=record, resume_from=args.resume,
        )
    print(json.dumps({"checkpoint": str(res.checkpoint), "final_loss": res.losses[-1] if res.losses else None}))
    return 0


def cmd_rollout_train(args) -> int:
    cfg = _apply_overrides(_read_config(args.config), args)
    out = Path(cfg.out)
    init = cfg.training.tokeniser_init
    if init != "fresh" and not Path(init).exists():
        raise FileNotFoundError(f"tokeniser checkpoint {init} not found")
    with run_lock(out):
        record = resolved(cfg)
        write_snapshot(out, record)
        opt = dataclasses.replace(cfg.rollout_optimiser)
        res = train_rollout(
            cfg.tokeniser, cfg.processor, build_sources(cfg), _loop(cfg, "rollout"), opt,
            tokeniser_init=init, freeze=cfg.training.freeze,
            warmup_epochs=cfg.schedule.warmup_epochs, cooldown_epochs=cfg.schedule.cooldown_epochs,
            run_dir=out, config_record=record, resume_from=args.resume,
        )
    print(json.dumps({"checkpoint": str(res.checkpoint), "final_loss": res.losses[-1] if res.losses else None}))
    return 0


def write_report(out: Path, report, step: int = 0, split: str = "eval", stem: str = "report"):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{stem}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for key, val in report.aggregates().items():
            w.writerow((step, split, "all", "all", key, repr(float(val))))
        for field_name, frame, metric, val in report.rows:
            w.writerow((step, split, field_name, frame, metric, repr(float(val))))
    (out / f"{stem}.json").write_text(json.dumps({"step": step, "split": split, **report.to_json()}, indent=1))


def cmd_eval(args) -> int:
    if args.pred or args.target:
        if not (args.pred and args.target):
            raise ConfigError("--pred and --target must be given together")
        schema, _ = read_archive_header(args.target)
        targets = list(dataset_adapter_read(args.target, schema))
        preds = list(dataset_adapter_read(args.pred, schema))
        if len(targets) != len(preds):
            raise ShapeError(f"{len(preds)} predicted vs {len(targets)} target trajectories")
        reports = []
        for x, y in zip(targets, preds):
            if x.shape != y.shape:
                raise ShapeError(f"trajectory shapes differ: {y.shape} vs {x.shape}")
            part = BandPartition.for_shape(x.shape[-2:])
            reports.append(evaluate_fields(x, y, schema.channel_names(), part))
        report, step = merge_reports(reports), 0
        out = Path(args.out or ".")
    else:
        if not args.config or not args.checkpoint:
            raise ConfigError("eval needs CONFIG and --checkpoint, or --pred/--target")
        cfg = _apply_overrides(_read_config(args.config), args)
        model, _, meta = _model_from_checkpoint(args.checkpoint)
        step = meta["step"]
        choice = sample_compression(cfg.tokeniser, "validate")
        reports = []
        thresholds = tuple(cfg.metrics.thresholds) if cfg.metrics.thresholds else None
        with torch.no_grad():
            for src in build_sources(cfg):
                if not src.val:
                    continue
                x = torch.from_numpy(np.stack(src.val[: cfg.training.val_sequences]).astype(np.float32))
                if isinstance(model, Tokeniser):
                    xn, state = rms_normalise(x[:, :, :9], src.schema)
                    pred = model(xn, choice, src.active) * state.channel_scales()
                    target = x[:, :, :9]
                else:
                    pred = model.predict_next_frame(x[:, :, :9], choice, src.active, src.schema)
                    target = x[:, :, 9:10]
                part = BandPartition.for_shape(x.shape[-2:], thresholds)
                for b in range(x.shape[0]):
                    reports.append(
                        evaluate_fields(target[b].double().numpy(), pred[b].double().numpy(), src.schema.channel_names(), part)
                    )
        if not reports:
            raise ConfigError("no validation sequences to evaluate")
        report = merge_reports(reports)
        out = Path(args.out or cfg.out)
    write_report(out, report, step)
    print(json.dumps(report.aggregates()))
    return 0


def _persistence(window):
    return window[:, -1]


def cmd_rollout_eval(args) -> int:
    cfg = _apply_overrides(_read_config(args.config), args)
    steps = cfg.metrics.rollout_steps
    if args.model == "checkpoint":
        if not args.checkpoint:
            raise ConfigError("rollout-eval needs --checkpoint (or --model persistence)")
        model, _, _ = _model_from_checkpoint(args.checkpoint)
        if isinstance(model, Tokeniser):
            raise ConfigError("rollout-eval needs a rollout checkpoint, got a tokeniser checkpoint")
    results = {}
    for ds in cfg.data.datasets:
        trajs, schema = dataset_trajectories(ds, cfg.data.grid, frames=9 + steps if ds.kind != "archive" else None)
        n_val = max(1, int(round(len(trajs) * cfg.data.val_fraction)))
        trajs = trajs[-n_val:]
        if args.model == "checkpoint":
            active = list(range(schema.n_channels)) if schema.n_channels != cfg.tokeniser.c_total else None
            predict = model_predictor(model, sample_compression(cfg.tokeniser, "validate"), active, schema)
        else:
            predict = _persistence
        rep = rollout_evaluate(predict, trajs, steps=steps)
        results[ds.name] = rep
        print(f"[{ds.name}] trajectories={rep.n_trajectories} rejected={rep.rejected}")
        for line in rep.lines():
            print(f"  {line}")
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rollout.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("dataset", "bucket", "vrmse"))
        for name, rep in results.items():
            for bucket, val in rep.buckets.items():
                w.writerow((name, bucket, repr(float(val))))
    (out / "rollout.json").write_text(json.dumps(
        {name: {"buckets": rep.buckets, "per_step": rep.per_step, "n": rep.n_trajectories, "rejected": rep.rejected}
         for name, rep in results.items()}, indent=1))
    return 0


def cmd_gen_data(args) -> int:
    cfg = _apply_overrides(_read_config(args.config), args)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for ds in cfg.data.datasets:
        if ds.kind == "archive":
            continue
        trajs, schema = dataset_trajectories(ds, cfg.data.grid)
        path = out / f"{ds.name}.ptrj"
        meta = DatasetMeta(ds.name, tuple(cfg.data.grid), ds.frames, {"kind": ds.kind, "seed": ds.seed})
        write_archive(path, trajs, schema, meta)
        written.append(str(path))
    print(json.dumps({"archives": written}))
    return 0


REPORT_PANELS = ("vrmse", "neps_low", "neps_mid", "neps_high")


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"{metrics} not found")
    curves: dict[int, dict[str, float]] = {}
    with open(metrics, newline="") as f:
        for row in csv.DictReader(f):
            if row["split"] == "val" and row["field"] == "all" and row["metric"] in REPORT_PANELS:
                curves.setdefault(int(row["step"]), {})[row["metric"]] = float(row["value"])
    steps = sorted(curves)
    with open(run_dir / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("step",) + REPORT_PANELS)
        for s in steps:
            w.writerow((s,) + tuple(repr(curves[s].get(k, float("nan"))) for k in REPORT_PANELS))

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 4, figsize=(16, 3.5))
    titles = ("VRMSE", "Spectral - low", "Spectral - mid", "Spectral - high")
    for ax, key, title in zip(axes, REPORT_PANELS, titles):
        ax.plot(steps, [curves[s].get(key, np.nan) for s in steps], marker=".")
        ax.set_yscale("log")
        ax.set_title(title)
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(run_dir / "curves.png", dpi=100)
    plt.close(fig)
    print(json.dumps({"rows": len(steps), "panels": len(REPORT_PANELS), "png": str(run_dir / "curves.png")}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phystok", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, optional_config=False):
        sp.add_argument("config", nargs="?" if optional_config else None)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--steps", type=int)
        return sp

    sp = common(sub.add_parser("pretrain", help="tokeniser pretraining"))
    sp.add_argument("--resume", type=Path)
    sp.set_defaults(func=cmd_pretrain)

    sp = common(sub.add_parser("rollout-train", help="next-frame rollout training"))
    sp.add_argument("--freeze", choices=("full", "mostly-frozen"))
    sp.add_argument("--tokeniser-init", dest="tokeniser_init")
    sp.add_argument("--resume", type=Path)
    sp.set_defaults(func=cmd_rollout_train)

    sp = common(sub.add_parser("eval", help="metric report for a checkpoint or prediction archive"), True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--pred")
    sp.add_argument("--target")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("rollout-eval", help="18-step autoregressive rollout VRMSE"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--model", choices=("checkpoint", "persistence"), default="checkpoint")
    sp.set_defaults(func=cmd_rollout_eval)

    sp = common(sub.add_parser("gen-data", help="write synthetic datasets as archives"))
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("report", help="learning-curve CSV and plot for a run directory")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # mapped to an exit code below
        kind = _classify(exc)
        code = EXIT_CODES[kind]
        record = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(json.dumps(record), file=sys.stderr)
        if kind == "internal":
            log.exception("unexpected failure")
        return code


if __name__ == "__main__":
    sys.exit(main())
