"""Next-frame training on bouncing blobs, checkpointing, and rollout evaluation.

A run is fully described by a :class:`TrainConfig`, which round-trips
through a flat ``key = value`` text format. Each step draws its minibatch
from an RNG seeded by ``(seed, step)``, so a run resumed from a checkpoint
continues exactly as an uninterrupted one would.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import json
import math
import os
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import container
from .data import BouncingBlobConfig, generate, metrics
from .gradients import AdamConfig, AdamState, learning_rate, loss_and_grads, sgd_adam_step
from .layer import ModelSpec, autoregress, init_params
from .ssm_init import DT_MAX, DT_MIN

FREEZE_GROUPS = {
    "lambda": ("lam_log_re", "lam_im"),
    "b": ("b_re", "b_im"),
    "dt": ("log_dt",),
    "c": ("c_re", "c_im"),
}


class ConfigError(ValueError):
    """Malformed or unknown configuration entries."""


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries the last good checkpoint."""

    def __init__(self, step: int, checkpoint: str | None):
        self.step = step
        self.checkpoint = checkpoint
        where = checkpoint or "no checkpoint written yet"
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {where}")


# ------------------------------------------------------------------ config


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _coerce(name: str, value, default):
    if isinstance(value, str):
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{name}: expected a boolean, got {value!r}")
            return low in ("true", "1", "yes")
        try:
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
        except ValueError as err:
            raise ConfigError(f"{name}: {err}") from None
        return value
    return type(default)(value)


@dataclass
class TrainConfig:
    # model
    layers: int = 2
    P: int = 32
    U: int = 16
    kb: int = 3
    kc: int = 3
    activation: str = "resnet"
    cell: str = "convs5"
    precision: str = "f32"
    dt_min: float = DT_MIN
    dt_max: float = DT_MAX
    # data
    size: int = 16
    blob: int = 3
    sigma: float = 0.8
    blobs: int = 2
    speed_min: int = 1
    speed_max: int = 2
    length: int = 40
    samples: int = 256
    test_samples: int = 32
    data_seed: int = 0
    # optimisation
    steps: int = 2000
    batch: int = 1
    lr: float = 3e-3
    warmup: int = 100
    min_lr_ratio: float = 0.1
    grad_clip: float = 1.0
    loss: str = "mse"
    seed: int = 0
    freeze: str = ""          # comma-separated groups: lambda, b, dt, c
    time_budget: float = 0.0  # seconds of optimisation; > 0 trains until it is used up
    threads: int = 1
    # evaluation and bookkeeping
    context: int = 20
    horizon: int = 20
    eval_every: int = 500
    eval_samples: int = 32
    log_every: int = 50
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if self.context < 1 or self.horizon < 0 or self.context + self.horizon > self.length:
            raise ConfigError(
                f"context {self.context} + horizon {self.horizon} must fit in length {self.length}")
        for group in self.frozen_groups():
            if group not in FREEZE_GROUPS:
                raise ConfigError(f"unknown freeze group {group!r}; choose from {sorted(FREEZE_GROUPS)}")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        defaults = {f.name: f.default for f in fields(cls)}
        unknown = sorted(set(mapping) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: _coerce(k, v, defaults[k]) for k, v in mapping.items()})

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(parse_kv(text))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    def to_dict(self) -> dict:
        return asdict(self)

    def frozen_groups(self) -> list[str]:
        return [g.strip() for g in self.freeze.split(",") if g.strip()]

    def model_spec(self) -> ModelSpec:
        return ModelSpec(layers=self.layers, P=self.P, U=self.U, kb=self.kb, kc=self.kc,
                         activation=self.activation, cell=self.cell, precision=self.precision,
                         dt_min=self.dt_min, dt_max=self.dt_max)

    def data_config(self) -> BouncingBlobConfig:
        return BouncingBlobConfig(size=self.size, blob=self.blob, sigma=self.sigma,
                                  blobs=self.blobs, speed_min=self.speed_min,
                                  speed_max=self.speed_max, length=self.length,
                                  samples=self.samples, test_samples=self.test_samples,
                                  seed=self.data_seed)

    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, warmup_steps=self.warmup, total_steps=max(1, self.steps),
                          min_lr_ratio=self.min_lr_ratio, grad_clip=self.grad_clip)


def frozen_names(params, cfg: TrainConfig) -> frozenset[str]:
    suffixes = {s for g in cfg.frozen_groups() for s in FREEZE_GROUPS[g]}
    return frozenset(n for n in params if n.rsplit(".", 1)[-1] in suffixes)


# ------------------------------------------------------------- checkpoints


def _text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _entry_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict
    opt: AdamState

    @property
    def step(self) -> int:
        return self.opt.step

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"manifest.config": _text_entry(self.config.to_text()),
                  "manifest.model": _text_entry(json.dumps(self.config.model_spec().to_dict()))}
        arrays.update({f"param.{k}": v for k, v in self.params.items()})
        arrays.update(self.opt.to_arrays("opt."))
        return arrays

    @classmethod
    def from_arrays(cls, arrays) -> "Checkpoint":
        if "manifest.config" not in arrays:
            raise container.ContainerError("checkpoint has no manifest.config entry")
        cfg = TrainConfig.from_text(_entry_text(arrays["manifest.config"]))
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        return cls(cfg, params, AdamState.from_arrays(arrays, "opt."))


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write atomically (temp file + rename) so a crash never leaves a torn checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    container.save(tmp, ckpt.to_arrays())
    os.replace(tmp, path)
    return str(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_arrays(container.load(path))


# -------------------------------------------------------------- evaluation


def rollout_metrics(params, spec: ModelSpec, sequences, context: int, horizon: int,
                    workers: int = 1) -> dict:
    """Condition on ``context`` frames, generate ``horizon`` more; compare with truth.

    ``sequences`` is ``[L, N, H, W, C]``. Also reports the copy-last-frame
    baseline and the per-step MSE/PSNR curve.
    """
    ctx = sequences[:context]
    truth = sequences[context:context + horizon]
    gen, _ = autoregress(params, spec, ctx, horizon, workers, clip=(0.0, 1.0))
    copy_last = np.broadcast_to(ctx[-1:], truth.shape)
    model = metrics(gen, truth)
    base = metrics(copy_last, truth)
    curve = [metrics(gen[t], truth[t]) for t in range(horizon)]
    return {
        "rollout_mse": model["mse"],
        "rollout_psnr": model["psnr"],
        "copy_last_mse": base["mse"],
        "copy_last_psnr": base["psnr"],
        "mse_ratio": model["mse"] / base["mse"] if base["mse"] > 0 else math.inf,
        "mse_curve": [c["mse"] for c in curve],
        "psnr_curve": [c["psnr"] for c in curve],
    }


# ----------------------------------------------------------------- training


def tune_allocator() -> bool:
    """Keep large freed blocks mapped (glibc only) to avoid page-fault churn.

    Every conv allocates multi-megabyte temporaries; returning them to the
    OS after each use costs more than the arithmetic at this scale.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
    ok = mallopt(m_mmap_threshold, 32 << 20)
    ok &= mallopt(m_trim_threshold, 1 << 30)
    ok &= mallopt(m_top_pad, 64 << 20)
    return bool(ok)


def batch_indices(cfg: TrainConfig, step: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, step])
    return rng.integers(0, cfg.samples, size=cfg.batch)


@dataclass
class TrainResult:
    config: TrainConfig
    params: dict
    opt: AdamState
    log: list
    final: dict
    train_seconds: float
    checkpoint: str | None

    def summary(self) -> dict:
        return {"cell": self.config.cell, "steps": self.opt.step,
                "train_seconds": self.train_seconds, "checkpoint": self.checkpoint,
                **{k: v for k, v in self.final.items() if not k.endswith("_curve")}}


def _eval_record(params, spec, test, cfg, step, workers):
    rec = rollout_metrics(params, spec, test[:, :cfg.eval_samples], cfg.context,
                          cfg.horizon, workers)
    return {"kind": "eval", "step": step, **rec}


def train(cfg: TrainConfig, out_dir=None, resume: Checkpoint | None = None,
          data=None, stop_at: int | None = None, log_fn=None) -> TrainResult:
    """Run (or continue) training; returns the final state and metrics log.

    ``stop_at`` ends the run early at that step (the schedule still spans
    ``cfg.steps``), which is how interrupted runs are simulated. With
    ``cfg.time_budget > 0`` steps continue until that many seconds of
    optimisation have elapsed and the learning-rate schedule follows the
    elapsed fraction of the budget.
    """
    tune_allocator()
    spec = cfg.model_spec()
    train_set, test_set = data if data is not None else generate(cfg.data_config())
    rt = spec.real_dtype
    train_set = np.asarray(train_set, rt)
    test_set = np.asarray(test_set, rt)
    if resume is not None:
        params = {k: np.asarray(v, rt) for k, v in resume.params.items()}
        opt = resume.opt
    else:
        params = init_params(spec, cfg.seed)
        opt = AdamState()
    adam = cfg.adam()
    frozen = frozen_names(params, cfg)
    ckpt_path = None if out_dir is None else str(Path(out_dir) / "checkpoint.cssm")
    last_good = None
    log: list[dict] = []

    def emit(rec):
        log.append(rec)
        if log_fn is not None:
            log_fn(rec)

    budget = cfg.time_budget
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    elapsed = 0.0
    while True:
        step = opt.step
        if budget > 0:
            if elapsed >= budget:
                break
        elif step >= end:
            break
        t0 = time.perf_counter()
        idx = batch_indices(cfg, step)
        inputs = train_set[:-1, idx]
        targets = train_set[1:, idx]
        try:
            loss, grads = loss_and_grads(params, spec, inputs, targets, cfg.loss,
                                         workers=cfg.threads)
        except FloatingPointError:
            loss = math.nan
        if not math.isfinite(loss):
            raise TrainingDiverged(step, last_good)
        if budget > 0:
            frac = min(1.0, elapsed / budget)
            lr = learning_rate(adam, int(frac * adam.total_steps))
        else:
            lr = learning_rate(adam, step)
        params, opt = sgd_adam_step(params, grads, opt, adam, frozen, lr=lr)
        elapsed += time.perf_counter() - t0
        done = opt.step
        if cfg.log_every and (done % cfg.log_every == 0 or done == 1):
            emit({"kind": "train", "step": done, "loss": float(loss), "lr": lr,
                  "elapsed": elapsed})
        if cfg.eval_every and done % cfg.eval_every == 0 and done < cfg.steps:
            emit(_eval_record(params, spec, test_set, cfg, done, cfg.threads))
        if ckpt_path and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            last_good = save_checkpoint(ckpt_path, Checkpoint(cfg, params, opt))
    final = _eval_record(params, spec, test_set, cfg, opt.step, cfg.threads)
    emit(final)
    if ckpt_path:
        last_good = save_checkpoint(ckpt_path, Checkpoint(cfg, params, opt))
        write_log(Path(out_dir) / "metrics.ldjson", log)
    return TrainResult(cfg, params, opt, log, final, elapsed, last_good)


def write_log(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def compare_with_convrnn(cfg: TrainConfig, out_dir=None, log_fn=None) -> dict:
    """Train ConvS5 for ``cfg.steps``, then a parameter-matched ConvRNN for the same
    optimisation wall-clock, and evaluate both on the held-out rollout task."""
    data = generate(cfg.data_config())
    sub = (lambda name: None) if out_dir is None else (lambda name: Path(out_dir) / name)
    s5 = train(replace(cfg, cell="convs5"), sub("convs5"), data=data, log_fn=log_fn)
    rnn_cfg = replace(cfg, cell="convrnn", time_budget=s5.train_seconds)
    rnn = train(rnn_cfg, sub("convrnn"), data=data, log_fn=log_fn)
    return {
        "convs5": s5.summary(),
        "convrnn": rnn.summary(),
        "convs5_beats_convrnn": s5.final["rollout_mse"] < rnn.final["rollout_mse"],
        "results": (s5, rnn),
    }
