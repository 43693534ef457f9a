"""Scaling benchmarks: ConvS5 with parallel or sequential scans vs the ConvRNN cell.

Each grid point times one full layer (core recurrence, norm, activation)
on a random sequence, repeated and summarized by the median. Reports are
written as line-delimited JSON records plus a CSV twin of the timing rows.

LDJSON records (one object per line, ``record`` says which kind):

- ``config``: ``command``, the full :class:`BenchConfig` and ``environment``.
- ``row``: ``method, L, P, U, H, W, batch, threads, backward, repeats, wall_ms``
  (median), ``wall_ms_min``, ``wall_ms_max``, ``operator_invocations``, ``span``.
- ``fit``: ``method, threads, slope, intercept`` of ``log(wall_ms)`` vs ``log(L)``.
- ``speedup``: ``method, L, threads_from, threads_to, speedup``
  (median time at ``threads_from`` over median time at ``threads_to``).

The CSV has one line per ``row`` record with the same field names.
"""
from __future__ import annotations

import csv
import io
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .gradients import layer_backward
from .layer import ModelSpec, init_params, layer_forward, layer_from_params

METHODS = ("convs5-par", "convs5-seq", "convrnn")
ROW_FIELDS = ("method", "L", "P", "U", "H", "W", "batch", "threads", "backward", "repeats",
              "wall_ms", "wall_ms_min", "wall_ms_max", "operator_invocations", "span")


@dataclass
class BenchConfig:
    methods: tuple = METHODS
    lengths: tuple = (64, 128, 256, 512, 1024)
    threads: tuple = (1,)
    P: int = 32
    U: int = 16
    size: int = 16
    batch: int = 1
    repeats: int = 3
    backward: bool = False
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if not self.methods or not self.lengths or not self.threads:
            raise ValueError("benchmark grid must be nonempty")
        if self.repeats < 3:
            raise ValueError("need at least 3 repeats for a median")
        if min(self.lengths) < 1 or min(self.threads) < 1:
            raise ValueError("lengths and thread counts must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("methods", "lengths", "threads"):
            d[k] = list(d[k])
        return d


def environment(threads=None, precision: str = "f32") -> dict:
    return {
        "cpu_count": os.cpu_count(),
        "threads": threads,
        "precision": precision,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "system": platform.system(),
    }


@dataclass
class BenchReport:
    command: str
    config: dict
    rows: list = field(default_factory=list)
    fits: list = field(default_factory=list)
    speedups: list = field(default_factory=list)
    environment: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        out = [{"record": "config", "command": self.command, "config": self.config,
                "environment": self.environment}]
        out += [{"record": "row", **r} for r in self.rows]
        out += [{"record": "fit", **f} for f in self.fits]
        out += [{"record": "speedup", **s} for s in self.speedups]
        return out

    def to_ldjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: r[k] for k in ROW_FIELDS})
        return buf.getvalue()

    def slope(self, method: str, threads: int = 1) -> float:
        for f in self.fits:
            if f["method"] == method and f["threads"] == threads:
                return f["slope"]
        raise KeyError(f"no fit for {method} at {threads} threads")

    def speedup(self, method: str, length: int) -> float:
        for s in self.speedups:
            if s["method"] == method and s["L"] == length:
                return s["speedup"]
        raise KeyError(f"no speedup for {method} at L={length}")


def _layer_for(method: str, cfg: BenchConfig):
    # like-for-like: the ConvRNN baseline gets P state channels and 3x3 kernels
    cell = "convrnn" if method == "convrnn" else "convs5"
    spec = ModelSpec(layers=1, P=cfg.P, U=cfg.U, cell=cell, precision=cfg.precision,
                     rnn_state=cfg.P if cell == "convrnn" else 0)
    params = init_params(spec, cfg.seed)
    return layer_from_params(params, spec, 0), spec


def time_layer(method: str, layer, u, threads: int, backward: bool):
    """One timed run; returns ``(seconds, scan_stats)``."""
    t0 = time.perf_counter()
    out, _, cache = layer_forward(layer, u, workers=threads, sequential=method == "convs5-seq")
    if backward:
        layer_backward(layer, cache, np.ones_like(out), workers=threads)
    return time.perf_counter() - t0, cache["core"]["scan_stats"]


def fit_loglog(lengths, times) -> tuple[float, float]:
    slope, intercept = np.polyfit(np.log(np.asarray(lengths, float)),
                                  np.log(np.asarray(times, float)), 1)
    return float(slope), float(intercept)


def run_bench(cfg: BenchConfig, command: str = "bench", progress=None) -> BenchReport:
    """Run the grid serially (one point at a time, so timings are uncontended)."""
    rng = np.random.default_rng(cfg.seed)
    report = BenchReport(command, cfg.to_dict(),
                         environment=environment(list(cfg.threads), cfg.precision))
    for method in cfg.methods:
        layer, spec = _layer_for(method, cfg)
        for threads in cfg.threads:
            for length in cfg.lengths:
                u = rng.normal(size=(length, cfg.batch, cfg.size, cfg.size, cfg.U))
                u = u.astype(spec.real_dtype)
                time_layer(method, layer, u[:min(length, 4)], threads, cfg.backward)  # warm-up
                times, stats = [], None
                for _ in range(cfg.repeats):
                    sec, stats = time_layer(method, layer, u, threads, cfg.backward)
                    times.append(sec * 1e3)
                row = {"method": method, "L": length, "P": cfg.P, "U": cfg.U, "H": cfg.size,
                       "W": cfg.size, "batch": cfg.batch, "threads": threads,
                       "backward": cfg.backward, "repeats": cfg.repeats,
                       "wall_ms": float(np.median(times)), "wall_ms_min": float(min(times)),
                       "wall_ms_max": float(max(times)),
                       "operator_invocations": stats.operator_invocations, "span": stats.span}
                report.rows.append(row)
                if progress is not None:
                    progress(row)
    for method in cfg.methods:
        for threads in cfg.threads:
            pts = [(r["L"], r["wall_ms"]) for r in report.rows
                   if r["method"] == method and r["threads"] == threads]
            if len(pts) >= 2:
                slope, icpt = fit_loglog(*zip(*pts))
                report.fits.append({"method": method, "threads": threads,
                                    "slope": slope, "intercept": icpt})
    lo, hi = min(cfg.threads), max(cfg.threads)
    if hi > lo:
        for method in cfg.methods:
            for length in cfg.lengths:
                t = {r["threads"]: r["wall_ms"] for r in report.rows
                     if r["method"] == method and r["L"] == length}
                report.speedups.append({"method": method, "L": length, "threads_from": lo,
                                        "threads_to": hi, "speedup": t[lo] / t[hi]})
    return report
