"""Tokeniser pretraining and rollout training loops.

Runs are single-process; the effective batch is realised with gradient
accumulation. A run directory holds ``config.snapshot``, ``metrics.csv``
(long format), ``events.log`` and ``checkpoints/step_<n>``.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import FieldSchema
from .metrics import BandPartition, evaluate_fields, merge_reports
from .processor import ProcessorConfig, RolloutModel, rollout_loss
from .schedule import OptimiserConfig, ScheduleConfig, build_optimiser, lr_at_epoch, set_lr
from .tokeniser import Tokeniser, TokeniserConfig, rms_normalise, sample_compression, tokeniser_loss

log = logging.getLogger(__name__)

DETERMINISTIC_ENV = "PHYSTOK_DETERMINISTIC"
METRIC_COLUMNS = ("step", "split", "field", "frame", "metric", "value")

PRETRAIN_STEPS = 168_000
ROLLOUT_STEPS = 29_400
PRETRAIN_UNIQUE_BATCHES = 21_000
ROLLOUT_UNIQUE_BATCHES = 2_100
EFFECTIVE_BATCH = 16


class NonFiniteLossError(RuntimeError):
    pass


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0", "false")


def seed_everything(seed: int):
    torch.manual_seed(seed)
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# data feeding


class ShardLoader:
    """Batches from one disjoint shard, recycled after a unique-batch budget.

    Sample ``i`` belongs to shard ``i % num_shards``. Each pass draws a fresh
    permutation of the shard from an RNG seeded by ``(seed, shard, pass)``
    and serves at most ``unique_batches`` non-overlapping batches, then
    reseeds for the next pass.
    """

    def __init__(
        self,
        samples: Sequence[np.ndarray],
        batch_size: int,
        unique_batches: int,
        seed: int = 0,
        shard_id: int = 0,
        num_shards: int = 1,
    ):
        self.indices = np.arange(shard_id, len(samples), num_shards)
        if len(self.indices) == 0:
            raise ValueError(f"shard {shard_id}/{num_shards} of {len(samples)} samples is empty")
        if batch_size < 1 or batch_size > len(self.indices):
            raise ValueError(f"batch size {batch_size} invalid for shard of {len(self.indices)} samples")
        self.samples = samples
        self.batch_size = batch_size
        self.budget = min(unique_batches, len(self.indices) // batch_size)
        self.seed = seed
        self.shard_id = shard_id
        self.pass_index = 0
        self.position = 0
        self._order = self._permutation()

    def _permutation(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self.shard_id, self.pass_index])
        return rng.permutation(self.indices)

    def next_indices(self) -> np.ndarray:
        if self.position >= self.budget:
            self.pass_index += 1
            self.position = 0
            self._order = self._permutation()
        lo = self.position * self.batch_size
        self.position += 1
        return self._order[lo : lo + self.batch_size]

    def next_batch(self) -> torch.Tensor:
        idx = self.next_indices()
        return torch.from_numpy(np.stack([np.asarray(self.samples[i], dtype=np.float32) for i in idx]))

    def state(self) -> dict:
        return {"pass_index": self.pass_index, "position": self.position}

    def load_state(self, state: dict):
        self.pass_index = state["pass_index"]
        self.position = state["position"]
        self._order = self._permutation()


def next_batch(loader: ShardLoader) -> torch.Tensor:
    return loader.next_batch()


def mixture_sample(datasets: Sequence, rng: np.random.Generator):
    """Pick one dataset uniformly."""
    if not datasets:
        raise ValueError("no datasets to sample from")
    return datasets[int(rng.integers(len(datasets)))]


@dataclass
class Source:
    """One training dataset: sequences ``(C, 10, H, W)`` plus field layout."""

    name: str
    train: list
    val: list
    schema: FieldSchema
    active: list[int] | None = None


# ---------------------------------------------------------------------------
# freezing


FREEZE_MODES = ("fully_trainable", "mostly_frozen")


def is_interface_param(name: str) -> bool:
    return any(name == m or name.startswith(m + ".") for m in Tokeniser.INTERFACE_MODULES)


def freeze_mask(model: RolloutModel, mode: str) -> dict[str, bool]:
    """``name -> trainable`` for every parameter of the rollout model."""
    if mode not in FREEZE_MODES:
        raise ValueError(f"freeze mode must be one of {FREEZE_MODES}, got {mode!r}")
    mask = {}
    for name, _ in model.named_parameters():
        if name.startswith("tokeniser."):
            mask[name] = mode == "fully_trainable" or is_interface_param(name[len("tokeniser.") :])
        else:
            mask[name] = True
    return mask


def apply_freeze(model: RolloutModel, mode: str) -> dict[str, bool]:
    mask = freeze_mask(model, mode)
    for name, p in model.named_parameters():
        p.requires_grad_(mask[name])
    return mask


@dataclass
class ParamCounts:
    tokeniser_trainable: int
    tokeniser_total: int
    trainable: int
    total: int

    @property
    def fraction(self) -> float:
        """Trainable share of the tokeniser's parameters."""
        return self.tokeniser_trainable / self.tokeniser_total


def trainable_fraction(model: RolloutModel, mode: str) -> ParamCounts:
    mask = freeze_mask(model, mode)
    tok_t = tok_n = tr = n = 0
    for name, p in model.named_parameters():
        n += p.numel()
        tr += p.numel() * mask[name]
        if name.startswith("tokeniser."):
            tok_n += p.numel()
            tok_t += p.numel() * mask[name]
    return ParamCounts(tok_t, tok_n, tr, n)


# ---------------------------------------------------------------------------
# run directory


class RunDirLocked(RuntimeError):
    pass


@contextlib.contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunDirLocked(f"{run_dir} is in use by another process (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class RunLogger:
    """Append-only metrics.csv and events.log for one run."""

    def __init__(self, run_dir: Path | None, resume: bool = False):
        self.run_dir = run_dir
        self.rows: list[tuple] = []
        self._t0 = time.perf_counter()
        if run_dir is None:
            return
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics = run_dir / "metrics.csv"
        if not resume or not metrics.exists():
            with open(metrics, "w", newline="") as f:
                csv.writer(f).writerow(METRIC_COLUMNS)

    def metric(self, step: int, split: str, metric: str, value: float, field: str = "all", frame="all"):
        row = (step, split, field, frame, metric, repr(float(value)))
        self.rows.append(row)
        if self.run_dir is not None:
            with open(self.run_dir / "metrics.csv", "a", newline="") as f:
                csv.writer(f).writerow(row)

    def event(self, msg: str):
        log.info(msg)
        if self.run_dir is not None:
            elapsed = time.perf_counter() - self._t0
            with open(self.run_dir / "events.log", "a") as f:
                f.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} +{elapsed:.2f}s {msg}\n")

    def values(self, metric: str, split: str = "val") -> list[tuple[int, float]]:
        return [(r[0], float(r[5])) for r in self.rows if r[4] == metric and r[1] == split and r[2] == "all"]


# ---------------------------------------------------------------------------
# shared training machinery


@dataclass
class LoopConfig:
    steps: int
    batch_size: int = 2
    accumulation: int = 1
    unique_batches: int = 21_000
    shard_id: int = 0
    num_shards: int = 1
    val_every: int = 50
    val_sequences: int = 8
    ckpt_every: int = 0
    log_every: int = 1
    seed: int = 0
    compression: str = "train"  # "train" samples per step, "validate" fixes scales
    thresholds: tuple[int, int] | None = None


@dataclass
class TrainResult:
    model: torch.nn.Module
    step: int
    losses: list[float]
    logger: RunLogger
    checkpoint: Path | None = None
    timings: dict = field(default_factory=dict)


def _build_loaders(sources: Sequence[Source], loop: LoopConfig) -> list[ShardLoader]:
    return [
        ShardLoader(s.train, loop.batch_size, loop.unique_batches, seed=loop.seed + 7919 * i,
                    shard_id=loop.shard_id, num_shards=loop.num_shards)
        for i, s in enumerate(sources)
    ]


def _check_finite(loss: torch.Tensor, step: int, batch: torch.Tensor, run_dir: Path | None):
    if torch.isfinite(loss):
        return
    if run_dir is not None:
        snap = run_dir / f"nonfinite_step_{step}.pt"
        torch.save({"batch": batch, "loss": loss.detach()}, snap)
    raise NonFiniteLossError(f"non-finite loss {loss.item()} at step {step}")


def _resume(model, optimiser, loaders, path):
    tensors, meta = ckpt.load_checkpoint(path)
    ckpt.load_into(model, ckpt.model_state(tensors))
    opt_state = ckpt.optimiser_state(tensors, meta)
    if opt_state is not None:
        optimiser.load_state_dict(opt_state)
    torch.set_rng_state(tensors["rng/torch"])
    for loader, st in zip(loaders, meta["extra"]["loaders"]):
        loader.load_state(st)
    return meta["step"], ckpt.restore_rng(meta["rng"]["train"])


def _save(run_dir, model, optimiser, step, config, rng, loaders, trainable=None, kind="") -> Path:
    path = Path(run_dir) / "checkpoints" / f"step_{step}"
    ckpt.save_checkpoint(
        path, model, step=step, config=config, optimiser=optimiser,
        rng_states={"train": ckpt.rng_state(rng)}, trainable=trainable,
        extra={"loaders": [l.state() for l in loaders], "kind": kind},
    )
    return path


def _validate_sequences(source: Source, n: int) -> torch.Tensor | None:
    if not source.val:
        return None
    return torch.from_numpy(np.stack([np.asarray(s, dtype=np.float32) for s in source.val[:n]]))


def _log_report(logger: RunLogger, step: int, reports) -> dict:
    agg = merge_reports(reports).aggregates()
    for key, val in agg.items():
        logger.metric(step, "val", key, val)
    return agg


# ---------------------------------------------------------------------------
# stage 1: tokeniser pretraining


def pretrain_tokeniser(
    tok_cfg: TokeniserConfig,
    sources: Sequence[Source],
    loop: LoopConfig,
    opt_cfg: OptimiserConfig,
    *,
    run_dir: Path | None = None,
    config_record: dict | None = None,
    resume_from: Path | None = None,
) -> TrainResult:
    """Autoencoder pretraining on the first 9 frames of each sequence.

    Every optimiser step draws a dataset (uniform mixture), a compression
    choice, normalises per sample and field, and minimises the MSE.
    Constant learning rate.
    """
    seed_everything(loop.seed)
    model = Tokeniser(tok_cfg)
    loaders = _build_loaders(sources, loop)
    optimiser = build_optimiser(model.parameters(), opt_cfg)
    rng = np.random.default_rng(loop.seed)
    start = 0
    if resume_from is not None:
        start, rng = _resume(model, optimiser, loaders, resume_from)
    logger = RunLogger(run_dir, resume=resume_from is not None)
    logger.event(f"pretrain start step={start} params={sum(p.numel() for p in model.parameters())}")
    losses, last_ckpt = [], None
    t_train = 0.0
    for step in range(start + 1, loop.steps + 1):
        t0 = time.perf_counter()
        model.train()
        optimiser.zero_grad(set_to_none=True)
        total = 0.0
        for _ in range(loop.accumulation):
            i = int(rng.integers(len(sources)))
            src = sources[i]
            x = loaders[i].next_batch()[:, :, :9]
            choice = sample_compression(tok_cfg, loop.compression, rng)
            xn, _ = rms_normalise(x, src.schema)
            loss = tokeniser_loss(xn, model(xn, choice, src.active))
            _check_finite(loss, step, x, run_dir)
            (loss / loop.accumulation).backward()
            total += loss.item() / loop.accumulation
        torch.nn.utils.clip_grad_norm_(model.parameters(), opt_cfg.clip_norm)
        optimiser.step()
        t_train += time.perf_counter() - t0
        losses.append(total)
        if step % loop.log_every == 0:
            logger.metric(step, "train", "loss", total)
            logger.metric(step, "train", "lr", optimiser.param_groups[0]["lr"])
        if loop.val_every and step % loop.val_every == 0:
            validate_tokeniser(model, sources, loop, logger, step)
        if run_dir is not None and loop.ckpt_every and step % loop.ckpt_every == 0:
            last_ckpt = _save(run_dir, model, optimiser, step, config_record or {}, rng, loaders, kind="tokeniser")
    if run_dir is not None:
        last_ckpt = _save(run_dir, model, optimiser, loop.steps, config_record or {}, rng, loaders, kind="tokeniser")
    logger.event(f"pretrain done steps={loop.steps} train_seconds={t_train:.2f}")
    return TrainResult(model, loop.steps, losses, logger, last_ckpt, {"train_seconds": t_train})


@torch.no_grad()
def validate_tokeniser(model: Tokeniser, sources, loop: LoopConfig, logger: RunLogger, step: int):
    model.eval()
    choice = sample_compression(model.cfg, "validate")
    reports = []
    for src in sources:
        x = _validate_sequences(src, loop.val_sequences)
        if x is None:
            continue
        x = x[:, :, :9]
        xn, state = rms_normalise(x, src.schema)
        rec = model(xn, choice, src.active) * state.channel_scales()
        part = BandPartition.for_shape(x.shape[-2:], loop.thresholds)
        names = src.schema.channel_names()
        for b in range(x.shape[0]):
            reports.append(evaluate_fields(x[b].double().numpy(), rec[b].double().numpy(), names, part))
    return _log_report(logger, step, reports) if reports else {}


# ---------------------------------------------------------------------------
# stage 2: rollout training


def build_rollout_model(tok_cfg: TokeniserConfig, proc_cfg: ProcessorConfig, tokeniser_init=None) -> RolloutModel:
    """Fresh rollout model, optionally loading tokeniser weights from a checkpoint."""
    model = RolloutModel(tok_cfg, proc_cfg)
    if tokeniser_init not in (None, "fresh"):
        tensors, meta = ckpt.load_checkpoint(tokeniser_init)
        state = ckpt.model_state(tensors)
        if any(k.startswith("tokeniser.") for k in state):
            state = {k[len("tokeniser."):]: v for k, v in state.items() if k.startswith("tokeniser.")}
        ckpt.load_into(model.tokeniser, state)
    return model


def rollout_schedule(loop: LoopConfig, warmup: int, cooldown: int, lr_peak: float) -> tuple[ScheduleConfig, int]:
    """Per-epoch schedule where one epoch is one pass of the loader budget."""
    per_epoch = max(1, (loop.unique_batches if loop.unique_batches else 1) // loop.accumulation)
    epochs = max(1, -(-loop.steps // per_epoch))
    return ScheduleConfig(epochs, min(warmup, epochs), min(cooldown, max(0, epochs - min(warmup, epochs))), lr_peak), per_epoch


def train_rollout(
    tok_cfg: TokeniserConfig,
    proc_cfg: ProcessorConfig,
    sources: Sequence[Source],
    loop: LoopConfig,
    opt_cfg: OptimiserConfig,
    *,
    tokeniser_init=None,
    freeze: str = "fully_trainable",
    warmup_epochs: int = 1,
    cooldown_epochs: int = 1,
    run_dir: Path | None = None,
    config_record: dict | None = None,
    resume_from: Path | None = None,
) -> TrainResult:
    """Next-frame training: 9 context frames predict frame 10 under MAE.

    The loss is taken in the per-sample normalised units of the context.
    Frozen parameters never reach the optimiser.
    """
    seed_everything(loop.seed)
    model = build_rollout_model(tok_cfg, proc_cfg, tokeniser_init)
    mask = apply_freeze(model, freeze)
    params = [p for n, p in model.named_parameters() if mask[n]]
    optimiser = build_optimiser(params, opt_cfg)
    loaders = _build_loaders(sources, loop)
    sched, per_epoch = rollout_schedule(loop, warmup_epochs, cooldown_epochs, opt_cfg.lr)
    rng = np.random.default_rng(loop.seed)
    start = 0
    if resume_from is not None:
        start, rng = _resume(model, optimiser, loaders, resume_from)
    logger = RunLogger(run_dir, resume=resume_from is not None)
    counts = trainable_fraction(model, freeze)
    logger.event(
        f"rollout start step={start} freeze={freeze} tokeniser_trainable={counts.tokeniser_trainable}/"
        f"{counts.tokeniser_total} ({counts.fraction:.4f}) total_params={counts.total}"
    )
    losses, last_ckpt, t_train = [], None, 0.0
    for step in range(start + 1, loop.steps + 1):
        t0 = time.perf_counter()
        epoch = min((step - 1) // per_epoch, sched.epochs)
        set_lr(optimiser, lr_at_epoch(epoch, sched))
        model.train()
        optimiser.zero_grad(set_to_none=True)
        total = 0.0
        for _ in range(loop.accumulation):
            i = int(rng.integers(len(sources)))
            src = sources[i]
            batch = loaders[i].next_batch()
            choice = sample_compression(tok_cfg, loop.compression, rng)
            loss = _rollout_step_loss(model, batch, choice, src)
            _check_finite(loss, step, batch, run_dir)
            (loss / loop.accumulation).backward()
            total += loss.item() / loop.accumulation
        torch.nn.utils.clip_grad_norm_(params, opt_cfg.clip_norm)
        optimiser.step()
        t_train += time.perf_counter() - t0
        losses.append(total)
        if step % loop.log_every == 0:
            logger.metric(step, "train", "loss", total)
            logger.metric(step, "train", "lr", optimiser.param_groups[0]["lr"])
        if loop.val_every and step % loop.val_every == 0:
            validate_rollout(model, sources, loop, logger, step)
        if run_dir is not None and loop.ckpt_every and step % loop.ckpt_every == 0:
            last_ckpt = _save(run_dir, model, optimiser, step, config_record or {}, rng, loaders, mask, "rollout")
    if run_dir is not None:
        last_ckpt = _save(run_dir, model, optimiser, loop.steps, config_record or {}, rng, loaders, mask, "rollout")
    logger.event(f"rollout done steps={loop.steps} train_seconds={t_train:.2f}")
    return TrainResult(model, loop.steps, losses, logger, last_ckpt, {"train_seconds": t_train})


def _rollout_step_loss(model: RolloutModel, batch: torch.Tensor, choice, src: Source) -> torch.Tensor:
    context, target = batch[:, :, :9], batch[:, :, 9:10]
    xn, state = rms_normalise(context, src.schema)
    pred = model(xn, choice, src.active)[:, :, -1:]
    return rollout_loss(target / state.channel_scales(), pred)


@torch.no_grad()
def validate_rollout(model: RolloutModel, sources, loop: LoopConfig, logger: RunLogger, step: int):
    model.eval()
    choice = sample_compression(model.tokeniser.cfg, "validate")
    reports = []
    for src in sources:
        x = _validate_sequences(src, loop.val_sequences)
        if x is None:
            continue
        pred = model.predict_next_frame(x[:, :, :9], choice, src.active, src.schema)
        part = BandPartition.for_shape(x.shape[-2:], loop.thresholds)
        names = src.schema.channel_names()
        for b in range(x.shape[0]):
            reports.append(evaluate_fields(x[b, :, 9:10].double().numpy(), pred[b].double().numpy(), names, part))
    return _log_report(logger, step, reports) if reports else {}


def model_predictor(model: RolloutModel, choice, active=None, schema=None):
    """Adapter for :func:`phystok.metrics.rollout_evaluate` (numpy in, numpy out)."""

    @torch.no_grad()
    def predict(window: np.ndarray) -> np.ndarray:
        model.eval()
        x = torch.from_numpy(np.asarray(window, dtype=np.float32))[None]
        return model.predict_next_frame(x, choice, active, schema)[0, :, 0].numpy()

    return predict


def write_snapshot(run_dir: Path, record: dict):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(json.dumps(record, indent=2, sort_keys=True))
