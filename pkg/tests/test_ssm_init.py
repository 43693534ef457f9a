import numpy as np
import pytest

from convssm.ssm_init import (
    DiagDynamics,
    discretize,
    hippo_eig,
    hippo_normal,
    init_dynamics,
    zoh_scale,
    zoh_scale_dlam,
)


def test_hippo_p1():
    assert np.array_equal(hippo_normal(1), [[-0.5]])


def test_hippo_p2_skew_convention():
    c = np.sqrt(0.75)
    assert np.allclose(hippo_normal(2), [[-0.5, c], [-c, -0.5]], atol=1e-15)


def test_hippo_is_minus_half_plus_skew():
    a = hippo_normal(6)
    s = a + 0.5 * np.eye(6)
    assert np.array_equal(s, -s.T)


@pytest.mark.parametrize("p", [2, 8, 32, 64])
def test_hippo_eigenvalues(p):
    lam, v = hippo_eig(p)
    assert np.abs(lam.real + 0.5).max() < 1e-9
    ims = np.sort(lam.imag)
    assert np.abs(ims + ims[::-1]).max() < 1e-8
    a = hippo_normal(p)
    assert np.abs(v @ np.diag(lam) @ v.conj().T - a).max() < 1e-9 * np.abs(a).max()


def test_init_p2_eigenvalue():
    dyn = init_dynamics(2, 1, 1)
    assert np.allclose(dyn.lam, [-0.5 + 1j * np.sqrt(0.75)], atol=1e-12)


def test_init_invariants():
    dyn = init_dynamics(16, 3, 3, dt_min=1e-3, dt_max=1e-1, seed=5)
    assert dyn.lam.shape == (8,) and dyn.b_tilde.shape == (8, 27)
    assert np.all(dyn.lam.real < 0)
    dt = np.exp(dyn.log_dt)
    assert np.all((dt >= 1e-3 * (1 - 1e-12)) & (dt <= 1e-1 * (1 + 1e-12)))


def test_degenerate_dt_range():
    dyn = init_dynamics(8, 2, 3, dt_min=0.01, dt_max=0.01)
    assert np.allclose(np.exp(dyn.log_dt), 0.01, rtol=1e-14)


def test_init_is_deterministic():
    a, b = init_dynamics(8, 2, 3, seed=3), init_dynamics(8, 2, 3, seed=3)
    for x, y in zip(a.to_arrays().values(), b.to_arrays().values()):
        assert np.array_equal(x, y)


@pytest.mark.parametrize("args", [(3, 1, 1), (4, 0, 1), (4, 1, 2), (4, 1, 1, 0.1, 0.01)])
def test_init_rejects_bad_args(args):
    with pytest.raises(ValueError):
        init_dynamics(*args)


def test_discretize_scalar_example():
    dyn = DiagDynamics(np.array([-1.0 + 0j]), np.array([[1.0 + 0j]]), np.array([np.log(np.log(2.0))]))
    lam_bar, b_bar = discretize(dyn)
    assert np.isclose(lam_bar[0], 0.5, atol=1e-15)
    assert np.isclose(b_bar[0, 0], 0.5, atol=1e-15)


def test_discretize_zero_lambda_limit():
    dyn = DiagDynamics(np.array([0j]), np.array([[2.0 + 0j]]), np.array([np.log(0.1)]))
    lam_bar, b_bar = discretize(dyn)
    assert lam_bar[0] == 1.0
    assert np.isclose(b_bar[0, 0], 0.2, atol=1e-15)


def test_zoh_scale_small_lambda_has_no_cancellation():
    lam = np.array([-1e-9 + 0j, -1e-9 + 2e-9j])
    dt = np.array([0.1, 0.05])
    _, scale = zoh_scale(lam, dt)
    # series: dt + lam dt^2 / 2 is exact to machine precision here
    assert np.allclose(scale, dt + lam * dt ** 2 / 2, rtol=1e-15, atol=0)


def test_zoh_scale_derivative_matches_differences(rng):
    lam = -np.exp(rng.uniform(-6, 3, size=40)) + 1j * rng.uniform(-30, 30, size=40)
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=40))
    h = 1e-6
    num = (zoh_scale(lam + h, dt)[1] - zoh_scale(lam - h, dt)[1]) / (2 * h)
    ana = zoh_scale_dlam(lam, dt)
    assert np.abs(ana - num).max() < 1e-8 * np.abs(ana).max()


def test_zoh_scale_derivative_limit():
    dt = np.array([0.1])
    assert np.isclose(zoh_scale_dlam(np.array([0j]), dt)[0], 0.1 ** 2 / 2, rtol=1e-15)
