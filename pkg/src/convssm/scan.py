"""Associative scans over convolutional linear recurrences.

The recurrence ``x_k = A * x_{k-1} + bu_k`` is scanned with the pair operator

    (a_i, b_i) (*) (a_j, b_j) = (a_j o a_i, a_j * b_i + b_j)

where ``a`` is either a diagonal vector of length P (a 1x1 "diagonalized"
kernel, so composition and application are channel-wise products) or a
general ``[P, P, k, k]`` kernel (composition grows the width to
``k_i + k_j - 1``).

Sequences are passed stacked: ``a`` is ``[L, P]`` / ``[P]`` for the diagonal
variant or ``[L, P, P, k, k]`` / ``[P, P, k, k]`` for the general one, and
``bu`` is ``[L, batch, H, W, P]``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, conv2d, kernel_compose


class KernelGrowthError(ValueError):
    """Raised when a parallel scan would need to compose wide state kernels."""


@dataclass
class ScanElement:
    a: np.ndarray   # [P] diagonal, or [P, P, k, k] general kernel
    bu: np.ndarray  # [batch, H, W, P]

    @property
    def is_diag(self) -> bool:
        return self.a.ndim == 1


@dataclass
class ScanStats:
    operator_invocations: int = 0
    span: int = 0
    widths: list[int] = field(default_factory=list)

    def __iadd__(self, other: "ScanStats") -> "ScanStats":
        self.operator_invocations += other.operator_invocations
        self.span += other.span
        self.widths.extend(other.widths)
        return self

    def to_dict(self) -> dict:
        return {"operator_invocations": self.operator_invocations, "span": self.span}


def identity_element(like: ScanElement) -> ScanElement:
    if like.is_diag:
        return ScanElement(np.ones_like(like.a), np.zeros_like(like.bu))
    p, k = like.a.shape[0], like.a.shape[-1]
    a = np.zeros((p, p, 1, 1), dtype=like.a.dtype)
    a[np.arange(p), np.arange(p), 0, 0] = 1
    return ScanElement(a, np.zeros_like(like.bu))


def combine(qi: ScanElement, qj: ScanElement) -> ScanElement:
    """``qi (*) qj`` with ``qi`` the earlier element."""
    if qi.is_diag != qj.is_diag:
        raise ShapeError("cannot combine a diagonal element with a general-kernel element")
    if qi.bu.shape != qj.bu.shape:
        raise ShapeError(f"effective-input shape mismatch: {qi.bu.shape} vs {qj.bu.shape}")
    if qi.is_diag:
        if qi.a.shape != qj.a.shape or qi.a.shape[0] != qi.bu.shape[-1]:
            raise ShapeError(f"diagonal shape mismatch: {qi.a.shape}, {qj.a.shape}, {qi.bu.shape}")
        return ScanElement(qj.a * qi.a, qj.a * qi.bu + qj.bu)
    a = kernel_compose(qi.a, qj.a).weight
    return ScanElement(a, conv2d(qj.a, qi.bu) + qj.bu)


def _apply_state(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    return a * x if a.ndim == 1 else conv2d(a, x)


def _steps(a: np.ndarray, length: int, general: bool) -> np.ndarray:
    base_ndim = 4 if general else 1
    if a.ndim == base_ndim:
        return np.broadcast_to(a, (length,) + a.shape)
    if a.shape[0] != length:
        raise ShapeError(f"state-part length {a.shape[0]} != sequence length {length}")
    return a


def _is_general(a: np.ndarray) -> bool:
    return a.ndim in (4, 5)


def scan_sequential(a, bu, x0=None) -> np.ndarray:
    """Literal recurrence ``x_k = a_k * x_{k-1} + bu_k``; returns ``[L, batch, H, W, P]``."""
    bu = np.asarray(bu)
    length = bu.shape[0]
    if length < 1:
        raise ShapeError("sequence length must be >= 1")
    a = _steps(np.asarray(a), length, _is_general(np.asarray(a)))
    out = np.empty(bu.shape, dtype=np.result_type(a, bu))
    x = bu[0].copy() if x0 is None else _apply_state(a[0], x0) + bu[0]
    out[0] = x
    for k in range(1, length):
        x = _apply_state(a[k], x) + bu[k]
        out[k] = x
    return out


def scan_schedule(n: int) -> list[tuple[int, int]]:
    """Work-efficient (up-sweep / down-sweep) inclusive scan schedule.

    Each level is ``(d, first_dst)``: every ``dst = first_dst + 2*d*i < n``
    absorbs the element at ``dst - d``. Destinations within a level are
    disjoint from sources, so a level can be updated in place in any order.
    """
    levels = []
    d = 1
    while 2 * d - 1 < n:
        levels.append((d, 2 * d - 1))
        d *= 2
    d //= 2
    while d >= 1:
        if 3 * d - 1 < n:
            levels.append((d, 3 * d - 1))
        d //= 2
    return levels


def _level_size(n: int, d: int, first: int) -> int:
    return max(0, (n - first + 2 * d - 1) // (2 * d))


def _split(count: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, count))
    bounds = np.linspace(0, count, parts + 1).astype(int)
    return [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _diag_scan_inplace(a: np.ndarray, bu: np.ndarray, workers: int,
                       pool: ThreadPoolExecutor | None) -> ScanStats:
    n = a.shape[0]
    stats = ScanStats()
    for d, first in scan_schedule(n):
        count = _level_size(n, d, first)
        if count == 0:
            continue

        def run(lo, hi, d=d, first=first):
            dst = slice(first + 2 * d * lo, first + 2 * d * hi, 2 * d)
            src = slice(first - d + 2 * d * lo, first - d + 2 * d * hi, 2 * d)
            bu[dst] += a[dst][:, None, None, None, :] * bu[src]
            a[dst] *= a[src]

        chunks = _split(count, workers)
        if pool is None or len(chunks) == 1:
            for lo, hi in chunks:
                run(lo, hi)
        else:
            list(pool.map(lambda c: run(*c), chunks))
        stats.operator_invocations += count
        stats.span += 1
    return stats


def scan_parallel(a, bu, x0=None, workers: int = 1, chunk_length: int | None = None):
    """Parallel scan of the diagonal recurrence; returns ``(states, ScanStats)``.

    The reduction tree depends only on the sequence length, so the result is
    bitwise independent of ``workers``. With ``chunk_length`` the sequence is
    scanned chunk by chunk with the carried state folded into each chunk,
    bounding peak memory (the work/span counts then add up over chunks).
    """
    a = np.asarray(a)
    bu = np.asarray(bu)
    if _is_general(a):
        if a.shape[-1] > 1:
            raise KernelGrowthError(
                f"state kernel width {a.shape[-1]} > 1: composing kernels in a parallel "
                "scan grows them to 2k-1 per combine, which is infeasible for long "
                "sequences; use scan_sequential or scan_parallel_general"
            )
        states, stats = scan_parallel_general(a, bu, x0, max_kernel_width=1)
        return states, stats
    length = bu.shape[0]
    if length < 1:
        raise ShapeError("sequence length must be >= 1")
    dtype = np.result_type(a, bu)
    a_full = np.array(_steps(a, length, False), dtype=dtype)
    out = np.array(bu, dtype=dtype)
    if a_full.shape[1] != out.shape[-1]:
        raise ShapeError(f"state size mismatch: a {a_full.shape} vs bu {out.shape}")
    if x0 is not None:
        out[0] += a_full[0] * x0
    chunk = length if not chunk_length else chunk_length
    stats = ScanStats()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for start in range(0, length, chunk):
            stop = min(start + chunk, length)
            if start > 0:
                out[start] += a_full[start] * out[start - 1]
            stats += _diag_scan_inplace(a_full[start:stop], out[start:stop], workers, pool)
    finally:
        if pool is not None:
            pool.shutdown()
    return out, stats


def pad_fields(x: np.ndarray, margin: int) -> np.ndarray:
    """Zero-embed the spatial axes (second and third from last) in a larger canvas."""
    if margin == 0:
        return x
    pad = [(0, 0)] * x.ndim
    pad[-3] = pad[-2] = (margin, margin)
    return np.pad(x, pad)


def crop_fields(x: np.ndarray, margin: int) -> np.ndarray:
    if margin == 0:
        return x
    return x[..., margin:-margin, margin:-margin, :]


def composed_width(count: int, k: int) -> int:
    return count * (k - 1) + 1


def scan_parallel_general(a, bu, x0=None, max_kernel_width: int = 9, margin: int | None = None):
    """Parallel scan with general (growing) state kernels, for demonstration.

    Kernel composition is exact only without boundary truncation, so fields
    are embedded in a zero canvas of ``margin`` pixels per side (default
    ``L * (k - 1) // 2``, enough that no truncation reaches the original
    field) and cropped afterwards. The result equals the unbounded-plane
    recurrence; ``ScanStats.widths`` traces every composed kernel width.
    """
    a = np.asarray(a)
    bu = np.asarray(bu)
    length = bu.shape[0]
    if length < 1:
        raise ShapeError("sequence length must be >= 1")
    a_steps = _steps(a, length, True)
    k = a_steps.shape[-1]
    # widest composite the schedule builds: the up-sweep root spans the largest power of two
    span_max = 1 << (length.bit_length() - 1)
    worst = composed_width(span_max, k)
    if worst > max_kernel_width:
        raise KernelGrowthError(
            f"parallel scan over L={length} with width-{k} kernels would compose a "
            f"width-{worst} kernel, exceeding max_kernel_width={max_kernel_width}"
        )
    if margin is None:
        margin = length * (k // 2)
    canvas = pad_fields(bu, margin)
    elems = [ScanElement(np.array(a_steps[i]), canvas[i].copy()) for i in range(length)]
    if x0 is not None:
        elems[0].bu = elems[0].bu + conv2d(elems[0].a, pad_fields(x0, margin))
    stats = ScanStats()
    for d, first in scan_schedule(length):
        count = 0
        for dst in range(first, length, 2 * d):
            elems[dst] = combine(elems[dst - d], elems[dst])
            stats.widths.append(elems[dst].a.shape[-1])
            count += 1
        stats.operator_invocations += count
        stats.span += 1 if count else 0
    states = np.stack([crop_fields(e.bu, margin) for e in elems])
    return states, stats


def log2_ceil(n: int) -> int:
    return 0 if n <= 1 else math.ceil(math.log2(n))
