"""Small dense complex linear algebra: Hermitian Jacobi eigensolver, diagonal exp."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NotHermitianError(ValueError):
    pass


@dataclass
class HermitianEig:
    eigenvalues: np.ndarray   # real, ascending
    eigenvectors: np.ndarray  # complex, orthonormal columns


def eig_hermitian(h, tol: float = 1e-12, max_sweeps: int = 100) -> HermitianEig:
    """Eigendecompose a Hermitian matrix with cyclic complex Jacobi rotations.

    Sweeps over all off-diagonal pairs until the largest off-diagonal
    magnitude drops below ``tol * max(1, ||H||_max)``.
    """
    a = np.array(h, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    asym = float(np.abs(a - a.conj().T).max(initial=0.0))
    if asym > 1e-12 * scale:
        raise NotHermitianError(f"matrix is not Hermitian: max |H - H^H| = {asym:.3e}")
    n = a.shape[0]
    a = 0.5 * (a + a.conj().T)
    v = np.eye(n, dtype=np.complex128)
    thresh = tol * scale

    for _ in range(max_sweeps):
        off = np.abs(a - np.diag(np.diag(a)))
        if off.max(initial=0.0) < thresh:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                mag = abs(apq)
                if mag < thresh * 1e-3:
                    continue
                phase = apq / mag
                theta = (a[q, q].real - a[p, p].real) / (2.0 * mag)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # J = diag-phase then real rotation on the (p, q) plane
                jpp, jpq = c, s
                jqp, jqq = -s * np.conj(phase), c * np.conj(phase)
                # columns: A <- A J
                colp, colq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = colp * jpp + colq * jqp
                a[:, q] = colp * jpq + colq * jqq
                # rows: A <- J^H A
                rowp, rowq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = np.conj(jpp) * rowp + np.conj(jqp) * rowq
                a[q, :] = np.conj(jpq) * rowp + np.conj(jqq) * rowq
                a[p, q] = a[q, p] = 0.0
                a[p, p] = a[p, p].real
                a[q, q] = a[q, q].real
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = vp * jpp + vq * jqp
                v[:, q] = vp * jpq + vq * jqq

    w = np.diag(a).real
    order = np.argsort(w, kind="stable")
    return HermitianEig(eigenvalues=w[order], eigenvectors=v[:, order])


def matexp_diag(lam, dt) -> np.ndarray:
    """Elementwise ``exp(lambda_p * dt_p)``: the exponential of a diagonal system."""
    dt = np.asarray(dt)
    if np.any(dt <= 0):
        raise ValueError("timescales must be positive")
    return np.exp(np.asarray(lam) * dt)
