"""Bouncing-blob videos: a small, deterministic stand-in for moving-digit data."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

PSNR_CAP = 99.0


@dataclass
class BouncingBlobConfig:
    size: int = 16
    blob: int = 3
    sigma: float = 0.8
    blobs: int = 2
    speed_min: int = 1
    speed_max: int = 2
    length: int = 40
    samples: int = 256
    test_samples: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.blob > self.size:
            raise ValueError(f"blob size {self.blob} larger than grid {self.size}")
        if self.blob < 1 or self.blobs < 1 or self.length < 1:
            raise ValueError("blob, blobs and length must be >= 1")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("need 0 <= speed_min <= speed_max")

    def to_dict(self) -> dict:
        return asdict(self)


def blob_stamp(blob: int, sigma: float) -> np.ndarray:
    c = (blob - 1) / 2
    y, x = np.mgrid[:blob, :blob]
    return np.exp(-((y - c) ** 2 + (x - c) ** 2) / (2 * sigma ** 2))


def reflect(pos: np.ndarray, span: int) -> np.ndarray:
    """Fold unbounded integer positions into ``[0, span]`` (triangle wave of period ``2 span``)."""
    if span == 0:
        return np.zeros_like(pos)
    m = np.mod(pos, 2 * span)
    return np.where(m <= span, m, 2 * span - m)


def trajectory(start, velocity, length: int, span: int) -> np.ndarray:
    t = np.arange(length)[:, None]
    return reflect(np.asarray(start)[None, :] + np.asarray(velocity)[None, :] * t, span)


def render(positions: np.ndarray, cfg: BouncingBlobConfig) -> np.ndarray:
    """Stamp blobs at integer top-left ``positions [blobs, L, 2]``; overlaps take the max."""
    stamp = blob_stamp(cfg.blob, cfg.sigma)
    length = positions.shape[1]
    frames = np.zeros((length, cfg.size, cfg.size))
    for traj in positions:
        for t, (py, px) in enumerate(traj):
            win = frames[t, py:py + cfg.blob, px:px + cfg.blob]
            np.maximum(win, stamp, out=win)
    return frames


def sample_sequence(cfg: BouncingBlobConfig, rng: np.random.Generator):
    span = cfg.size - cfg.blob
    trajs = []
    for _ in range(cfg.blobs):
        start = rng.integers(0, span + 1, size=2)
        speed = rng.integers(cfg.speed_min, cfg.speed_max + 1, size=2)
        sign = rng.choice([-1, 1], size=2)
        trajs.append(trajectory(start, speed * sign, cfg.length, span))
    positions = np.stack(trajs)
    return render(positions, cfg), positions


def _split(cfg: BouncingBlobConfig, stream: int, count: int) -> np.ndarray:
    # one independent generator per (seed, split, index)
    out = np.empty((cfg.length, count, cfg.size, cfg.size, 1))
    for i in range(count):
        rng = np.random.default_rng([cfg.seed, stream, i])
        out[:, i, :, :, 0] = sample_sequence(cfg, rng)[0]
    return out


def generate(cfg: BouncingBlobConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(train, test)`` sequences shaped ``[L, N, H, W, 1]`` with values in ``[0, 1]``."""
    return _split(cfg, 0, cfg.samples), _split(cfg, 1, cfg.test_samples)


def metrics(pred, truth) -> dict[str, float]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    mse = float(np.mean((pred - truth) ** 2))
    psnr = PSNR_CAP if mse == 0 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
    return {"mse": mse, "psnr": float(psnr)}
