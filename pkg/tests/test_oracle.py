import numpy as np

from convssm.oracle import (
    EquivalenceReport,
    check_associativity,
    check_prop1,
    check_prop3,
    convrnn_step,
    per_pixel_ssm,
    ssm_matrices,
)
from convssm.scan import ScanElement, scan_sequential
from convssm.tensor import conv2d


def test_prop3_pointwise_input_kernel(rng):
    a = rng.normal(size=(3, 3, 1, 1)) / 3
    b = rng.normal(size=(3, 2, 1, 1))
    _, b_ssm = ssm_matrices(a, b)
    assert np.array_equal(b_ssm, b[:, :, 0, 0])
    rep = check_prop3(a, b, rng.normal(size=(4, 1, 3, 3, 2)), tolerance=1e-12)
    assert rep.passed


def test_prop3_random_3x3(rng):
    a = rng.normal(size=(4, 4, 1, 1)) / 4
    b = rng.normal(size=(4, 2, 3, 3))
    rep = check_prop3(a, b, rng.normal(size=(6, 1, 4, 4, 2)), rng.normal(size=(1, 4, 4, 4)))
    assert rep.max_abs_err < 1e-10 and rep.passed


def test_single_pixel_perturbation_is_local(rng):
    a = rng.normal(size=(2, 2, 1, 1)) / 2
    b = rng.normal(size=(2, 1, 3, 3))
    a_ssm, b_ssm = ssm_matrices(a, b)
    u = rng.normal(size=(2, 1, 7, 7, 1))
    base = per_pixel_ssm(a_ssm, b_ssm, u, 3)
    u2 = u.copy()
    u2[1, 0, 3, 4, 0] += 1.0
    changed = np.abs(per_pixel_ssm(a_ssm, b_ssm, u2, 3) - base)[1, 0].max(axis=-1) > 0
    expect = np.zeros((7, 7), bool)
    expect[2:5, 3:6] = True
    assert np.array_equal(changed, expect)


def test_prop1_report(rng):
    a = rng.uniform(0.5, 0.99, size=4) * np.exp(1j * rng.uniform(-3, 3, size=4))
    bu = rng.normal(size=(257, 1, 2, 2, 4)) + 1j * rng.normal(size=(257, 1, 2, 2, 4))
    rep = check_prop1(a, bu)
    assert rep.passed and rep.max_abs_err < 1e-10 and rep.cases == 101


def test_prop1_general_variant(rng):
    a = rng.normal(size=(2, 2, 3, 3)) / 6
    bu = rng.normal(size=(4, 1, 9, 9, 2))
    rep = check_prop1(a, bu, triples=20, tolerance=1e-8)
    assert rep.passed


def test_general_associativity_interior(rng):
    q = [ScanElement(rng.normal(size=(2, 2, 3, 3)) / 6, rng.normal(size=(1, 9, 9, 2)))
         for _ in range(3)]
    assert check_associativity(*q, margin=3) < 1e-8


def test_convrnn_zero_kernels():
    x = np.ones((1, 3, 3, 2))
    u = np.ones((1, 3, 3, 1))
    out = convrnn_step(np.zeros((2, 2, 3, 3)), np.zeros((2, 1, 3, 3)), x, u)
    assert np.array_equal(out, np.zeros_like(x))


def test_convrnn_small_signal_is_linear(rng):
    a = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=(2, 1, 3, 3))
    x = rng.normal(size=(1, 4, 4, 2)) * 1e-5
    u = rng.normal(size=(1, 4, 4, 1)) * 1e-5
    linear = scan_sequential(a, (conv2d(b, u))[None], x)[0]
    assert np.abs(linear).max() < 1e-3
    assert np.abs(convrnn_step(a, b, x, u) - linear).max() < 1e-8


def test_convrnn_step_matches_nested_loops(rng):
    a = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=(2, 1, 3, 3))
    x = rng.normal(size=(1, 4, 3, 2))
    u = rng.normal(size=(1, 4, 3, 1))
    ref = np.zeros_like(x)
    for i in range(4):
        for j in range(3):
            for o in range(2):
                z = 0.0
                for m in range(3):
                    for n in range(3):
                        ii, jj = i + m - 1, j + n - 1
                        if 0 <= ii < 4 and 0 <= jj < 3:
                            z += a[o, :, m, n] @ x[0, ii, jj] + b[o, :, m, n] @ u[0, ii, jj]
                ref[0, i, j, o] = np.tanh(z)
    out = convrnn_step(a, b, x, u)
    assert np.abs(out - ref).max() < 1e-12
    assert np.all(np.abs(out) < 1)


def test_report_merge_and_dict():
    r1 = EquivalenceReport("x", 1e-12, 1e-13, 1e-10, [(2, 3)], cases=2)
    r2 = EquivalenceReport("x", 3e-11, 1e-12, 1e-10, [(4,)], cases=1)
    m = EquivalenceReport.merge("x", [r1, r2], 1e-10)
    assert m.max_abs_err == 3e-11 and m.cases == 3 and m.passed
    d = m.to_dict()
    assert d["pass"] is True and d["shapes"] == [[2, 3], [4]]
    assert not EquivalenceReport("y", 2e-10, 0, 1e-10).passed
