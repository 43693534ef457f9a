"""Continuous-time diagonal dynamics: HiPPO-normal initialization and ZOH discretization.

Eigenvalues of the (real) HiPPO-normal matrix come in conjugate pairs, so only
the half with positive imaginary part is stored. ``P`` always names the full
state size; stored arrays have ``P // 2`` rows and the mirrored half is implicit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numlin import eig_hermitian

DT_MIN = 1e-3
DT_MAX = 1e-1
ZERO_LAMBDA = 1e-12


@dataclass
class DiagDynamics:
    lam: np.ndarray      # complex [P/2]
    b_tilde: np.ndarray  # complex [P/2, U * kB**2]
    log_dt: np.ndarray   # real [P/2]
    dt_min: float = DT_MIN
    dt_max: float = DT_MAX

    @property
    def state_size(self) -> int:
        return 2 * self.lam.shape[0]

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {
            f"{prefix}lambda": self.lam,
            f"{prefix}b_tilde": self.b_tilde,
            f"{prefix}log_dt": self.log_dt,
        }

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "") -> "DiagDynamics":
        return cls(arrays[f"{prefix}lambda"], arrays[f"{prefix}b_tilde"],
                   arrays[f"{prefix}log_dt"])


def hippo_normal(p: int) -> np.ndarray:
    """Normal part of HiPPO-LegS: ``-1/2 I`` plus a skew-symmetric matrix.

    Off-diagonal magnitudes are ``sqrt(n + 1/2) * sqrt(k + 1/2)``; the entry is
    negative below the diagonal and positive above it.
    """
    if p < 1:
        raise ValueError("state size must be >= 1")
    q = np.sqrt(np.arange(p) + 0.5)
    mag = np.outer(q, q)
    a = np.where(np.tri(p, k=-1, dtype=bool), -mag, mag)
    np.fill_diagonal(a, -0.5)
    return a


def hippo_eig(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs ``(lam, V)`` of :func:`hippo_normal`, with ``A = V diag(lam) V^H``.

    The skew part ``S`` is diagonalized through the Hermitian matrix ``-iS``:
    if ``-iS v = w v`` then ``A v = (-1/2 + i w) v``. Eigenvalues are ordered
    by ascending imaginary part.
    """
    a = hippo_normal(p)
    s = a + 0.5 * np.eye(p)
    eig = eig_hermitian(-1j * s)
    lam = -0.5 + 1j * eig.eigenvalues
    return lam, eig.eigenvectors


def init_dynamics(p: int, u: int, kb: int, dt_min: float = DT_MIN, dt_max: float = DT_MAX,
                  seed: int = 0, dtype=np.complex128) -> DiagDynamics:
    """Sample a :class:`DiagDynamics` (conjugate-half storage) from a seed."""
    if p < 2 or p % 2:
        raise ValueError(f"state size P must be even and >= 2, got {p}")
    if u < 1:
        raise ValueError(f"input size U must be >= 1, got {u}")
    if kb < 1 or kb % 2 == 0:
        raise ValueError(f"input kernel width must be odd, got {kb}")
    if not 0 < dt_min <= dt_max:
        raise ValueError(f"need 0 < dt_min <= dt_max, got {dt_min}, {dt_max}")
    rng = np.random.default_rng(seed)
    lam, v = hippo_eig(p)
    keep = lam.imag > 0
    lam, v = lam[keep], v[:, keep]
    fan_in = u * kb * kb
    bound = 1.0 / np.sqrt(fan_in)
    b_raw = rng.uniform(-bound, bound, size=(p, fan_in))
    b_tilde = v.conj().T @ b_raw
    log_dt = rng.uniform(np.log(dt_min), np.log(dt_max), size=p // 2)
    return DiagDynamics(lam.astype(dtype), b_tilde.astype(dtype),
                        log_dt.astype(np.zeros(0, dtype).real.dtype), dt_min, dt_max)


def zoh_scale(lam: np.ndarray, dt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(lam_bar, (lam_bar - 1) / lam)`` with the ``lam -> 0`` limit ``dt``.

    ``expm1`` keeps the scale accurate when ``|lam dt|`` is small but nonzero,
    where ``exp(z) - 1`` would cancel.
    """
    lam = np.asarray(lam)
    dt = np.asarray(dt)
    z = lam * dt
    lam_bar = np.exp(z)
    small = np.abs(lam) < ZERO_LAMBDA
    safe = np.where(small, 1.0, lam)
    scale = np.where(small, dt, np.expm1(z) / safe)
    return lam_bar, scale.astype(lam_bar.dtype)


def zoh_scale_dlam(lam: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """Derivative of the ZOH scale ``(exp(lam dt) - 1) / lam`` with respect to ``lam``.

    Closed form ``(dt lam exp(lam dt) - expm1(lam dt)) / lam**2`` away from
    zero; the Taylor series ``sum_n n lam^(n-1) dt^(n+1) / (n+1)!`` where
    ``|lam dt|`` is small and the closed form would cancel.
    """
    lam = np.asarray(lam)
    dt = np.asarray(dt)
    z = lam * dt
    near = np.abs(z) < 1e-2
    safe = np.where(near, 1.0, lam)
    closed = (dt * safe * np.exp(np.where(near, 0.0, z)) - np.expm1(np.where(near, 0.0, z))) / (safe * safe)
    series = np.zeros_like(z)
    zn = np.ones_like(z)
    fact = 2.0  # (n + 1)!
    for n in range(1, 8):
        series = series + n * zn * dt ** (n + 1) / fact
        zn = zn * lam
        fact *= n + 2
    return np.where(near, series, closed)


def discretize(dyn: DiagDynamics) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold: ``lam_bar = exp(lam dt)``, ``b_bar = lam^-1 (lam_bar - 1) b_tilde``."""
    dt = np.exp(dyn.log_dt)
    lam_bar, scale = zoh_scale(dyn.lam, dt)
    return lam_bar, scale[:, None] * dyn.b_tilde
