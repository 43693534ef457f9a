"""Correctness suites: each runs a family of randomized checks and returns reports.

Every suite returns a list of :class:`~convssm.oracle.EquivalenceReport`;
a suite passes when all of its reports pass. Suites are deterministic for a
given seed. ``fault="lambda_bar"`` perturbs the discretized state multiplier
on the implementation side of the scan and discretization checks only, so a
working harness must report failures.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .gradients import check_gradients
from .layer import ModelSpec, init_params, model_apply
from .oracle import (
    TOL_F32,
    TOL_F64,
    EquivalenceReport,
    check_associativity,
    check_prop1,
    check_prop3,
)
from .scan import (
    ScanElement,
    crop_fields,
    log2_ceil,
    pad_fields,
    scan_parallel,
    scan_parallel_general,
    scan_schedule,
    scan_sequential,
)
from .ssm_init import hippo_eig, zoh_scale
from .tensor import kernel_compose

FAULTS = ("lambda_bar",)
FAULT_SCALE = 1.0 + 1e-3


def _dtypes(precision: str):
    if precision == "f32":
        return np.float32, np.complex64, TOL_F32
    if precision == "f64":
        return np.float64, np.complex128, TOL_F64
    raise ValueError(f"precision must be f32 or f64, got {precision!r}")


def _check_fault(fault):
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")


def _stable_diag(rng, p, dtype):
    # |a| < 1 keeps long scans bounded, so absolute tolerances stay meaningful
    mag = rng.uniform(0.5, 0.999, size=p)
    phase = rng.uniform(-np.pi, np.pi, size=p)
    return (mag * np.exp(1j * phase)).astype(dtype)


def _discretized_diag(rng, p, steps=None):
    # multipliers and input scales as the layer produces them: Re(lambda) from the
    # HiPPO init range, log-uniform timescales, inputs scaled by (exp(lambda dt)-1)/lambda
    lam = -rng.uniform(0.05, 1.0, size=p) + 1j * rng.uniform(-10.0, 10.0, size=p)
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=(p,) if steps is None else (steps, p)))
    return zoh_scale(lam, dt)


def _cplx(rng, shape, dtype):
    return (rng.normal(size=shape) + 1j * rng.normal(size=shape)).astype(dtype)


def suite_prop1(seed: int = 0, precision: str = "f64", configs: int = 200,
                fault=None) -> list[EquivalenceReport]:
    """Parallel vs sequential diagonal scans over a randomized config grid."""
    _check_fault(fault)
    _, ct, tol = _dtypes(precision)
    rng = np.random.default_rng([seed, 1])
    reports = []
    for _ in range(configs):
        length = int(rng.integers(1, 258))
        p = int(rng.choice([2, 4, 8]))
        h, w = (int(v) for v in rng.integers(1, 6, size=2))
        batch = int(rng.integers(1, 3))
        varying = rng.random() < 0.5  # time-varying multipliers
        a, scale = _discretized_diag(rng, p, length if varying else None)
        if varying:
            scale = scale[:, None, None, None, :]
        a = a.astype(ct)
        bu = (scale * _cplx(rng, (length, batch, h, w, p), np.complex128)).astype(ct)
        x0 = None
        if rng.random() < 0.5:  # initial state at the recurrence's stationary scale
            a0, s0 = (a[0], scale[0, 0, 0, 0]) if varying else (a, scale)
            std = np.abs(s0) / np.sqrt(1.0 - np.abs(a0) ** 2)
            x0 = (std * _cplx(rng, (batch, h, w, p), np.complex128)).astype(ct)
        a_impl = a * FAULT_SCALE if fault == "lambda_bar" else a
        par, _ = scan_parallel(a_impl, bu, x0)
        seq = scan_sequential(a, bu, x0)
        diff = np.abs(par - seq)
        reports.append(EquivalenceReport("prop1.scan", float(diff.max()), float(diff.mean()),
                                         tol, [bu.shape, a.shape]))
    return [EquivalenceReport.merge("prop1.scan", reports, tol)]


def suite_associativity(seed: int = 0, precision: str = "f64", diag_triples: int = 1000,
                        general_triples: int = 100) -> list[EquivalenceReport]:
    """Both bracketings of the scan operator on random element triples."""
    rt, ct, _ = _dtypes(precision)
    tol_diag, tol_general = (1e-10, 1e-8) if precision == "f64" else (TOL_F32, 1e-4)
    rng = np.random.default_rng([seed, 2])
    errs = []
    for _ in range(diag_triples):
        p = int(rng.choice([2, 4, 8]))
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 6)), int(rng.integers(1, 6)), p)
        q = [ScanElement(_stable_diag(rng, p, ct), _cplx(rng, shape, ct)) for _ in range(3)]
        errs.append(check_associativity(*q))
    diag = EquivalenceReport("associativity.diag", float(max(errs)), float(np.mean(errs)),
                             tol_diag, cases=diag_triples)
    errs = []
    for _ in range(general_triples):
        p = int(rng.choice([2, 3]))
        q = [ScanElement((rng.normal(size=(p, p, 3, 3)) / (3 * p)).astype(rt),
                         rng.normal(size=(1, 9, 9, p)).astype(rt)) for _ in range(3)]
        # interior pixels: borders differ under same-padding truncation
        errs.append(check_associativity(*q, margin=3))
    general = EquivalenceReport("associativity.general3x3", float(max(errs)),
                                float(np.mean(errs)), tol_general, cases=general_triples)
    return [diag, general]


def suite_prop3(seed: int = 0, configs: int = 60) -> list[EquivalenceReport]:
    """Convolutional recurrence vs per-pixel SSMs on im2col columns (64-bit)."""
    rng = np.random.default_rng([seed, 3])
    reports = []
    widths = [1, 3, 5]
    for i in range(configs):
        kb = widths[i % 3]
        p = int(rng.integers(1, 6))
        u = int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(1, 7, size=2))
        length = int(rng.integers(1, 7))
        batch = int(rng.integers(1, 3))
        a = rng.normal(size=(p, p, 1, 1)) / (2 * p)
        b = rng.normal(size=(p, u, kb, kb))
        uu = rng.normal(size=(length, batch, h, w, u))
        x0 = rng.normal(size=(batch, h, w, p)) if rng.random() < 0.5 else None
        reports.append(check_prop3(a, b, uu, x0, tolerance=TOL_F64))
    return [EquivalenceReport.merge("prop3", reports, TOL_F64)]


def suite_kernel_growth(seed: int = 0) -> list[EquivalenceReport]:
    """Two 3x3 state kernels compose to 5x5; the growing-kernel scan matches sequential."""
    rng = np.random.default_rng([seed, 4])
    k1 = rng.normal(size=(3, 3, 3, 3)) / 9
    k2 = rng.normal(size=(3, 3, 3, 3)) / 9
    width = kernel_compose(k1, k2).width
    growth = EquivalenceReport("kernel_growth.width", float(abs(width - 5)), 0.0, 0.5,
                               [(3, 3, 3, 3), (3, 3, width, width)])
    reports = []
    for length in range(1, 9):
        p = int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(3, 8, size=2))
        a = rng.normal(size=(p, p, 3, 3)) / (3 * p)
        bu = rng.normal(size=(length, 1, h, w, p))
        x0 = rng.normal(size=(1, h, w, p))
        par, stats = scan_parallel_general(a, bu, x0, max_kernel_width=64)
        m = length
        seq = crop_fields(scan_sequential(a, pad_fields(bu, m), pad_fields(x0, m)), m)
        diff = np.abs(par - seq)
        reports.append(EquivalenceReport("kernel_growth.scan", float(diff.max()),
                                         float(diff.mean()), 1e-8, [bu.shape, a.shape]))
    return [growth, EquivalenceReport.merge("kernel_growth.scan", reports, 1e-8)]


def suite_work_span(max_length: int = 1024) -> list[EquivalenceReport]:
    """Operator count <= 2(L-1) and span <= 2 ceil(log2 L) for every L up to ``max_length``.

    The reported error is the largest excess over either bound (0 when both hold).
    """
    worst_work = worst_span = 0
    for n in range(1, max_length + 1):
        ops = span = 0
        for d, first in scan_schedule(n):
            count = len(range(first, n, 2 * d))
            ops += count
            span += 1 if count else 0
        worst_work = max(worst_work, ops - 2 * (n - 1))
        worst_span = max(worst_span, span - 2 * log2_ceil(n))
    # cross-check the executed scan's own counters on a few lengths
    rng = np.random.default_rng(5)
    for n in (1, 2, 3, 7, 64, 257, 1024):
        _, stats = scan_parallel(rng.uniform(0.1, 0.9, size=1), rng.normal(size=(n, 1, 1, 1, 1)))
        worst_work = max(worst_work, stats.operator_invocations - 2 * (n - 1))
        worst_span = max(worst_span, stats.span - 2 * log2_ceil(n))
    return [
        EquivalenceReport("work_bound", float(max(0, worst_work)), 0.0, 0.5, cases=max_length),
        EquivalenceReport("span_bound", float(max(0, worst_span)), 0.0, 0.5, cases=max_length),
    ]


def suite_init(sizes=(2, 8, 32, 64)) -> list[EquivalenceReport]:
    """HiPPO-normal spectrum: real parts -1/2, conjugate pairs, stable discretization."""
    re_err = pair_err = 0.0
    worst_mag = 0.0
    dts = np.geomspace(1e-3, 1e-1, 25)
    for p in sizes:
        lam, _ = hippo_eig(p)
        re_err = max(re_err, float(np.abs(lam.real + 0.5).max()))
        ims = np.sort(lam.imag)
        pair_err = max(pair_err, float(np.abs(ims + ims[::-1]).max()))
        for dt in dts:
            lam_bar, _ = zoh_scale(lam, np.full(p, dt))
            worst_mag = max(worst_mag, float(np.abs(lam_bar).max()))
    return [
        EquivalenceReport("init.real_part", re_err, 0.0, 1e-8, cases=len(sizes)),
        EquivalenceReport("init.conjugate_pairs", pair_err, 0.0, 1e-8, cases=len(sizes)),
        # stability: the report error is max|lam_bar|, which must stay below 1
        EquivalenceReport("init.stable", worst_mag, 0.0, 1.0, cases=len(sizes) * len(dts)),
    ]


def zoh_quadrature(lam, dt, nodes: int = 64):
    """``(exp(lam dt), integral_0^dt exp(lam s) ds)`` by Gauss-Legendre quadrature.

    The multiplier is rebuilt from polar form and the integral from its
    integrand alone, sharing nothing with the closed-form discretization.
    """
    lam = np.asarray(lam, dtype=np.complex128)
    dt = np.asarray(dt, dtype=np.float64)
    x, wts = np.polynomial.legendre.leggauss(nodes)
    s = 0.5 * dt[..., None] * (x + 1.0)
    vals = np.exp(lam.real[..., None] * s) * (np.cos(lam.imag[..., None] * s)
                                              + 1j * np.sin(lam.imag[..., None] * s))
    integral = 0.5 * dt * (vals * wts).sum(axis=-1)
    bar = np.exp(lam.real * dt) * (np.cos(lam.imag * dt) + 1j * np.sin(lam.imag * dt))
    return bar, integral


def suite_discretization(seed: int = 0, cases: int = 1000, fault=None) -> list[EquivalenceReport]:
    """Closed-form ZOH against quadrature of the ZOH integral, including ``lam -> 0``."""
    _check_fault(fault)
    rng = np.random.default_rng([seed, 6])
    n_small = cases // 10
    re = -np.exp(rng.uniform(np.log(1e-3), np.log(20.0), size=cases))
    im = rng.uniform(-40.0, 40.0, size=cases)
    lam = re + 1j * im
    # limit branch and its neighbourhood: |lam| from 1e-16 up to 1e-6
    tiny = np.exp(rng.uniform(np.log(1e-16), np.log(1e-6), size=n_small))
    angle = rng.uniform(np.pi / 2, 3 * np.pi / 2, size=n_small)
    lam[:n_small] = tiny * np.exp(1j * angle)
    lam[0] = 0.0
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=cases))
    b = rng.normal(size=(cases, 3)) + 1j * rng.normal(size=(cases, 3))
    lam_bar, scale = zoh_scale(lam, dt)
    if fault == "lambda_bar":
        lam_bar = lam_bar * FAULT_SCALE
    b_bar = scale[:, None] * b
    ref_bar, ref_int = zoh_quadrature(lam, dt)
    ref_b = ref_int[:, None] * b
    e_lam = np.abs(lam_bar - ref_bar)
    e_b = np.abs(b_bar - ref_b)
    return [
        EquivalenceReport("zoh.lambda_bar", float(e_lam.max()), float(e_lam.mean()), TOL_F64,
                          cases=cases),
        EquivalenceReport("zoh.b_bar", float(e_b.max()), float(e_b.mean()), TOL_F64, cases=cases),
    ]


@dataclass
class GradientCase:
    """The certified configuration: one layer, P=4, U=2, L=3, 3x3 fields."""

    layers: int = 1
    P: int = 4
    U: int = 2
    length: int = 3
    size: int = 3
    samples: int = 60
    activations: tuple = field(default=("resnet", "glu"))


def suite_gradients(seed: int = 0, case: GradientCase | None = None) -> list[EquivalenceReport]:
    """Analytic gradients vs central differences (epsilon 1e-5) for each activation."""
    case = case or GradientCase()
    reports = []
    for act in case.activations:
        spec = ModelSpec(layers=case.layers, P=case.P, U=case.U, activation=act, precision="f64")
        params = init_params(spec, seed)
        rng = np.random.default_rng([seed, 7])
        shape = (case.length, 1, case.size, case.size, 1)
        x, y = rng.uniform(size=shape), rng.uniform(size=shape)
        rep = check_gradients(params, spec, x, y, epsilon=1e-5, samples=case.samples, seed=seed)
        reports.append(EquivalenceReport(f"gradients.{act}", rep.max_rel_err, 0.0, 1e-5,
                                         [shape], cases=rep.samples))
    return reports


def suite_statefulness(seed: int = 0, precision: str = "f64", splits: int = 6) -> list[EquivalenceReport]:
    """Split-and-carry forward passes equal the monolithic pass through a 2-layer model."""
    _, _, tol = _dtypes(precision)
    rng = np.random.default_rng([seed, 8])
    reports = []
    for cell in ("convs5", "convrnn"):
        spec = ModelSpec(layers=2, P=8, U=4, precision=precision, cell=cell)
        params = init_params(spec, seed)
        frames = rng.uniform(size=(24, 2, 5, 5, 1)).astype(spec.real_dtype)
        whole, _ = model_apply(params, spec, frames)
        for _ in range(splits):
            cuts = np.sort(rng.choice(np.arange(1, 24), size=int(rng.integers(1, 4)), replace=False))
            states, parts = None, []
            for lo, hi in zip([0, *cuts], [*cuts, 24]):
                out, states = model_apply(params, spec, frames[lo:hi], states)
                parts.append(out)
            diff = np.abs(np.concatenate(parts) - whole)
            reports.append(EquivalenceReport(f"statefulness.{cell}", float(diff.max()),
                                             float(diff.mean()), tol, [frames.shape]))
    return [EquivalenceReport.merge("statefulness", reports, tol)]


SUITES = ("prop1", "associativity", "prop3", "kernel_growth", "work_span", "init",
          "discretization", "gradients", "statefulness")


def run_suite(name: str, seed: int = 0, precision: str = "f64", fault=None) -> list[EquivalenceReport]:
    _check_fault(fault)
    if name == "prop1":
        return suite_prop1(seed, precision, fault=fault)
    if name == "associativity":
        return suite_associativity(seed, precision)
    if name == "prop3":
        return suite_prop3(seed)
    if name == "kernel_growth":
        return suite_kernel_growth(seed)
    if name == "work_span":
        return suite_work_span()
    if name == "init":
        return suite_init()
    if name == "discretization":
        return suite_discretization(seed, fault=fault)
    if name == "gradients":
        return suite_gradients(seed)
    if name == "statefulness":
        return suite_statefulness(seed, precision)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES} or 'all'")


def run_suites(names, seed: int = 0, precision: str = "f64", fault=None):
    """Run suites in order; returns ``[(suite, reports, seconds)]``."""
    out = []
    for name in names:
        t0 = time.perf_counter()
        reports = run_suite(name, seed, precision, fault)
        out.append((name, reports, time.perf_counter() - t0))
    return out
