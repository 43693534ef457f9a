"""Executable equivalence checks and the vanilla ConvRNN reference cell.

Each check runs two independent computations of the same quantity and
reports their worst disagreement as an :class:`EquivalenceReport`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .scan import (
    ScanElement,
    combine,
    crop_fields,
    pad_fields,
    scan_parallel,
    scan_parallel_general,
    scan_sequential,
)
from .tensor import conv2d, conv2d_direct, im2col, kernel_to_matrix

TOL_F32 = 1e-5
TOL_F64 = 1e-10


def tolerance_for(dtype) -> float:
    return TOL_F32 if np.dtype(dtype) in (np.dtype(np.float32), np.dtype(np.complex64)) else TOL_F64


@dataclass
class EquivalenceReport:
    name: str
    max_abs_err: float
    mean_abs_err: float
    tolerance: float
    shapes: list = field(default_factory=list)
    cases: int = 1

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_err < self.tolerance)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = [list(map(int, s)) for s in self.shapes]
        d["pass"] = self.passed
        return d

    @classmethod
    def merge(cls, name: str, reports: list["EquivalenceReport"], tolerance: float):
        worst = max((r.max_abs_err for r in reports), default=0.0)
        total = sum(r.cases for r in reports) or 1
        mean = sum(r.mean_abs_err * r.cases for r in reports) / total
        shapes = [s for r in reports for s in r.shapes]
        return cls(name, float(worst), float(mean), tolerance, shapes, total)


def _report(name, a, b, tolerance, shapes=()):
    diff = np.abs(np.asarray(a) - np.asarray(b))
    return EquivalenceReport(name, float(diff.max(initial=0.0)), float(diff.mean()) if diff.size else 0.0,
                             tolerance, list(shapes))


def convrnn_step(a_kernel, b_kernel, x_prev, u_k, bu=None):
    """Vanilla ConvRNN update ``tanh(A * x_prev + B * u_k)``.

    ``bu`` may carry a precomputed ``B * u_k``.
    """
    if bu is None:
        bu = conv2d(b_kernel, u_k)
    return np.tanh(conv2d(a_kernel, x_prev) + bu)


def ssm_matrices(a_kernel, b_kernel):
    """``(A_SSM, B_SSM)`` by flattening each output feature of the kernels."""
    a = np.asarray(a_kernel)
    if a.shape[-1] != 1:
        raise ValueError(f"state kernel must be pointwise (1x1), got width {a.shape[-1]}")
    return a[:, :, 0, 0], kernel_to_matrix(b_kernel)


def per_pixel_ssm(a_ssm, b_ssm, u, kb, x0=None):
    """Run one vector recurrence per pixel on im2col columns of the input."""
    length, batch, h, w, _ = u.shape
    p = a_ssm.shape[0]
    cols = np.stack([im2col(u[k], kb) for k in range(length)])
    dtype = np.result_type(a_ssm, b_ssm, u)
    states = np.empty((length, batch, h, w, p), dtype=dtype)
    for i in range(h):
        for j in range(w):
            x = np.zeros((batch, p), dtype) if x0 is None else x0[:, i, j, :]
            for k in range(length):
                x = x @ a_ssm.T + cols[k, :, i, j, :] @ b_ssm.T
                states[k, :, i, j, :] = x
    return states


def check_prop3(a_kernel, b_kernel, u, x0=None, tolerance=None) -> EquivalenceReport:
    """Convolutional recurrence vs per-pixel SSM recurrences on im2col inputs."""
    a_ssm, b_ssm = ssm_matrices(a_kernel, b_kernel)
    kb = np.asarray(b_kernel).shape[-1]
    bu = np.stack([conv2d_direct(b_kernel, u[k]) for k in range(u.shape[0])])
    conv_states = scan_sequential(a_kernel, bu, x0)
    pixel_states = per_pixel_ssm(a_ssm, b_ssm, u, kb, x0)
    tol = tolerance if tolerance is not None else tolerance_for(conv_states.dtype)
    return _report("prop3", conv_states, pixel_states, tol, [u.shape, np.shape(b_kernel)])


def check_associativity(q1: ScanElement, q2: ScanElement, q3: ScanElement, margin: int = 0):
    """Max deviation between ``(q1*q2)*q3`` and ``q1*(q2*q3)``.

    ``margin`` excludes border pixels, where same-padded application of a
    composed kernel and repeated application of its factors differ.
    """
    left = combine(combine(q1, q2), q3)
    right = combine(q1, combine(q2, q3))
    err_a = np.abs(left.a - right.a).max()
    if margin:
        lb, rb = left.bu[:, margin:-margin, margin:-margin], right.bu[:, margin:-margin, margin:-margin]
    else:
        lb, rb = left.bu, right.bu
    return float(max(err_a, np.abs(lb - rb).max(initial=0.0)))


def check_prop1(a, bu, x0=None, triples: int = 100, seed: int = 0, tolerance=None,
                workers: int = 1) -> EquivalenceReport:
    """Associativity on random element triples, plus parallel vs sequential scan."""
    a = np.asarray(a)
    bu = np.asarray(bu)
    length = bu.shape[0]
    general = a.ndim in (4, 5)
    rng = np.random.default_rng(seed)
    a_steps = np.broadcast_to(a, (length,) + a.shape) if a.ndim in (1, 4) else a
    margin = a_steps.shape[-1] // 2 if general else 0
    errs = []
    for _ in range(triples):
        idx = rng.integers(0, length, size=3)
        q = [ScanElement(np.array(a_steps[i]), bu[i]) for i in idx]
        errs.append(check_associativity(*q, margin=margin))
    if general:
        par, _ = scan_parallel_general(a, bu, x0, max_kernel_width=10 ** 6)
        m = length * margin
        seq = crop_fields(scan_sequential(a, pad_fields(bu, m),
                                          None if x0 is None else pad_fields(x0, m)), m)
    else:
        par, _ = scan_parallel(a, bu, x0, workers=workers)
        seq = scan_sequential(a, bu, x0)
    diff = np.abs(par - seq)
    tol = tolerance if tolerance is not None else tolerance_for(np.result_type(a, bu))
    worst = max(max(errs, default=0.0), float(diff.max()))
    return EquivalenceReport("prop1", worst, float(diff.mean()), tol, [bu.shape, a.shape],
                             cases=triples + 1)
