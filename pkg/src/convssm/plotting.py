"""PNG figures for the CLI reports (matplotlib, headless Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return str(path)


def plot_scaling(rows, fits, path) -> str:
    """Median wall time vs sequence length on log-log axes, one line per method/threads."""
    fig, ax = plt.subplots(figsize=(6, 4))
    slopes = {(f["method"], f["threads"]): f["slope"] for f in fits}
    series: dict[tuple, list] = {}
    for r in rows:
        series.setdefault((r["method"], r["threads"]), []).append((r["L"], r["wall_ms"]))
    for (method, threads), pts in sorted(series.items()):
        pts.sort()
        label = f"{method} ({threads} thr)"
        if (method, threads) in slopes:
            label += f", slope {slopes[method, threads]:.2f}"
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length L")
    ax.set_ylabel("median wall time (ms)")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def plot_training(log, path, title: str = "training") -> str:
    """Training loss per logged step plus held-out rollout PSNR per evaluation."""
    train = [r for r in log if r.get("kind") == "train"]
    evals = [r for r in log if r.get("kind") == "eval"]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot([r["step"] for r in train], [r["loss"] for r in train], marker=".")
    ax1.set_yscale("log")
    ax1.set_xlabel("step")
    ax1.set_ylabel("training loss")
    ax1.set_title(title)
    ax2.plot([r["step"] for r in evals], [r["rollout_psnr"] for r in evals],
             marker="o", label="model rollout")
    ax2.plot([r["step"] for r in evals], [r["copy_last_psnr"] for r in evals],
             linestyle="--", label="copy last frame")
    ax2.set_xlabel("step")
    ax2.set_ylabel("rollout PSNR (dB)")
    ax2.legend(fontsize=8)
    for ax in (ax1, ax2):
        ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_rollout(psnr_curve, step_times, path) -> str:
    """PSNR against ground truth and wall time for each generated step."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(range(1, len(psnr_curve) + 1), psnr_curve, marker=".")
    ax1.set_xlabel("generated step")
    ax1.set_ylabel("PSNR vs truth (dB)")
    ax2.plot(range(2, len(step_times) + 2), [1e3 * t for t in step_times], marker=".")
    ax2.set_xlabel("generated step")
    ax2.set_ylabel("step time (ms)")
    ax2.set_ylim(bottom=0)
    for ax in (ax1, ax2):
        ax.grid(True, alpha=0.3)
    return _save(fig, path)
