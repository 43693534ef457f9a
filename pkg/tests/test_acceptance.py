"""Acceptance criteria 1-12, each at its stated tolerance and budget.

Every test records one ``criterion N: PASS|FAIL ...`` line, collected into
the "acceptance criteria" section of the terminal summary. Criterion 11
trains the default model and its ConvRNN baseline, which takes a while.
"""
import time

import numpy as np
import pytest

from convssm.bench import BenchConfig, run_bench
from convssm.gradients import check_gradients
from convssm.layer import ModelSpec, autoregress, init_params
from convssm.train import TrainConfig, compare_with_convrnn
from convssm.verify import (
    suite_associativity,
    suite_discretization,
    suite_init,
    suite_kernel_growth,
    suite_prop1,
    suite_prop3,
    suite_statefulness,
    suite_work_span,
)


@pytest.fixture
def criterion(record_property):
    """Call with ``(number, checks)``: records one summary line, then asserts every check."""

    def finish(number: int, checks: dict[str, tuple[bool, str]]):
        ok = all(passed for passed, _ in checks.values())
        detail = "; ".join(f"{name} {'ok' if passed else 'FAILED'} ({info})"
                           for name, (passed, info) in checks.items())
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        record_property("acceptance", line)
        print(line)
        failed = [name for name, (passed, _) in checks.items() if not passed]
        assert not failed, line

    return finish


def _report_check(rep):
    return rep.passed, f"max_abs_err {rep.max_abs_err:.2e} < {rep.tolerance:.0e}, {rep.cases} cases"


def test_criterion_01_parallel_scan_equals_sequential(criterion):
    t0 = time.process_time()
    f64 = suite_prop1(seed=0, precision="f64", configs=200)[0]
    f32 = suite_prop1(seed=0, precision="f32", configs=200)[0]
    cpu = time.process_time() - t0
    criterion(1, {
        "f64": (f64.passed and f64.tolerance == 1e-10, _report_check(f64)[1]),
        "f32": (f32.passed and f32.tolerance == 1e-5, _report_check(f32)[1]),
        "configs": (f64.cases >= 200 and f32.cases >= 200, f"{f64.cases}+{f32.cases}"),
        "runtime": (cpu < 120, f"{cpu:.1f} CPU-s < 120"),
    })


def test_criterion_02_associativity(criterion):
    diag, general = suite_associativity(seed=0, precision="f64", diag_triples=1000,
                                        general_triples=100)
    criterion(2, {
        "diag": (diag.passed and diag.tolerance == 1e-10 and diag.cases == 1000, _report_check(diag)[1]),
        "general3x3": (general.passed and general.tolerance == 1e-8 and general.cases == 100,
                       _report_check(general)[1]),
    })


def test_criterion_03_conv_recurrence_equals_per_pixel_ssm(criterion):
    rep = suite_prop3(seed=0, configs=60)[0]
    widths = sorted({s[-1] for s in rep.shapes if len(s) == 4 and s[-1] == s[-2]})
    criterion(3, {
        "prop3": (rep.passed and rep.tolerance == 1e-10, _report_check(rep)[1]),
        "configs": (rep.cases >= 50, f"{rep.cases} configs"),
        "kB": (widths == [1, 3, 5], f"widths {widths}"),
    })


def test_criterion_04_kernel_growth(criterion):
    width, scan = suite_kernel_growth(seed=0)
    criterion(4, {
        "5x5": (width.passed, f"composed width {width.shapes[-1][-1]}"),
        "scan": (scan.passed and scan.tolerance == 1e-8 and scan.cases == 8,
                 _report_check(scan)[1] + " for L=1..8"),
    })


def test_criterion_05_work_and_span_bounds(criterion):
    work, span = suite_work_span(1024)
    criterion(5, {
        "work": (work.passed, f"max excess over 2(L-1): {work.max_abs_err:.0f}, L=1..1024"),
        "span": (span.passed, f"max excess over 2ceil(log2 L): {span.max_abs_err:.0f}, L=1..1024"),
    })


def test_criterion_06_initialization(criterion):
    real, pairs, stable = suite_init((2, 8, 32, 64))
    criterion(6, {
        "real_part": (real.passed, f"max |Re+0.5| {real.max_abs_err:.1e} < 1e-8"),
        "conjugate_pairs": (pairs.passed, f"pairing error {pairs.max_abs_err:.1e}"),
        "stable": (stable.passed, f"max |lambda_bar| {stable.max_abs_err:.6f} < 1 over dt in [1e-3, 1e-1]"),
    })


def test_criterion_07_discretization_oracle(criterion):
    lam, b = suite_discretization(seed=0, cases=1000)
    criterion(7, {
        "lambda_bar": (lam.passed and lam.tolerance == 1e-10, _report_check(lam)[1]),
        "b_bar": (b.passed and b.tolerance == 1e-10, _report_check(b)[1]),
    })


def test_criterion_08_gradient_certification(criterion):
    spec = ModelSpec(layers=1, P=4, U=2, precision="f64")
    params = init_params(spec, 0)
    rng = np.random.default_rng(8)
    x, y = rng.uniform(size=(2, 3, 1, 3, 3, 1))
    t0 = time.perf_counter()
    rep = check_gradients(params, spec, x, y, epsilon=1e-5, samples=60, seed=0)
    wall = time.perf_counter() - t0
    criterion(8, {
        "rel_err": (rep.max_rel_err < 1e-5, f"max {rep.max_rel_err:.1e} < 1e-5 ({rep.worst_param})"),
        "samples": (rep.samples >= 50, f"{rep.samples} scalars"),
        "coverage": (set(rep.per_param) == set(params), f"{len(rep.per_param)}/{len(params)} tensors"),
        "log_dt": (rep.per_param.get("layers.0.log_dt", 1.0) < 1e-5,
                   f"{rep.per_param.get('layers.0.log_dt', float('nan')):.1e}"),
        "runtime": (wall < 60, f"{wall:.1f} s < 60"),
    })


def test_criterion_09_scaling(criterion):
    cfg = BenchConfig(methods=("convs5-par", "convrnn"), lengths=(64, 128, 256, 512, 1024),
                      threads=(1, 8), repeats=3, precision="f32")
    report = run_bench(cfg, command="acceptance criterion 9")
    slope = report.slope("convs5-par", 1)
    par_speedup = report.speedup("convs5-par", 1024)
    rnn_speedup = report.speedup("convrnn", 1024)
    rnn_spans = all(r["span"] == r["L"] for r in report.rows if r["method"] == "convrnn")
    criterion(9, {
        "slope": (0.8 <= slope <= 1.2, f"convs5-par log-log slope {slope:.3f} in [0.8, 1.2]"),
        "speedup": (par_speedup >= 1.5,
                    f"convs5-par L=1024 8 vs 1 workers {par_speedup:.2f}x >= 1.5x "
                    f"on {report.environment['cpu_count']} CPU(s)"),
        "convrnn": (rnn_spans and rnn_speedup < 1.5,
                    f"span == L, 8 vs 1 workers {rnn_speedup:.2f}x"),
    })


def test_criterion_10_constant_cost_generation(criterion):
    spec = ModelSpec(precision="f32")
    params = init_params(spec, 0)
    ctx = np.random.default_rng(10).uniform(size=(20, 1, 16, 16, 1)).astype(np.float32)
    runs = []
    for _ in range(5):
        times = []
        autoregress(params, spec, ctx, 201, step_times=times)
        runs.append(times)
    # step_times[n - 2] is generated step n
    at10 = float(np.median([t[10 - 2] for t in runs]))
    at200 = float(np.median([t[200 - 2] for t in runs]))
    criterion(10, {
        "ratio": (at200 < 2 * at10,
                  f"median step 200 {1e3 * at200:.2f} ms vs step 10 {1e3 * at10:.2f} ms, "
                  f"ratio {at200 / at10:.2f} < 2"),
    })


def test_criterion_11_desk_scale_learning(criterion, tmp_path):
    cfg = TrainConfig()
    t_cpu = time.process_time()
    t_wall = time.perf_counter()
    stamps = {}

    def log_fn(rec):
        if rec["kind"] == "eval" and rec["step"] == cfg.steps and "s5_done" not in stamps:
            stamps["s5_done"] = (time.process_time() - t_cpu, time.perf_counter() - t_wall)

    out = compare_with_convrnn(cfg, tmp_path, log_fn=log_fn)
    s5, rnn = out["convs5"], out["convrnn"]
    cpu, wall = stamps["s5_done"]
    criterion(11, {
        "vs_copy_last": (s5["rollout_mse"] <= 0.7 * s5["copy_last_mse"],
                         f"rollout MSE {s5['rollout_mse']:.5f} vs copy-last {s5['copy_last_mse']:.5f}, "
                         f"ratio {s5['mse_ratio']:.3f} <= 0.7"),
        "vs_convrnn": (out["convs5_beats_convrnn"],
                       f"ConvRNN MSE {rnn['rollout_mse']:.5f} after {rnn['steps']} steps in "
                       f"{rnn['train_seconds']:.0f} s (ConvS5 {s5['steps']} steps in "
                       f"{s5['train_seconds']:.0f} s)"),
        "runtime": (cpu < 600, f"ConvS5 run {cpu / 60:.2f} CPU-min ({wall / 60:.2f} min wall) < 10"),
    })


def test_criterion_12_statefulness(criterion):
    rep = suite_statefulness(seed=0, precision="f64", splits=6)[0]
    criterion(12, {"split_and_carry": (rep.passed and rep.tolerance == 1e-10, _report_check(rep)[1])})
