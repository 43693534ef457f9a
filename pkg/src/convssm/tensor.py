"""Dense convolution primitives over channels-last spatial tensors.

Spatial tensors are numpy arrays shaped ``[batch, H, W, F]`` (real or complex).
Kernels are shaped ``[F_out, F_in, k, k]`` with ``k`` odd, and every
convolution uses zero "same" padding so spatial size is preserved.

The convolution is a cross-correlation (the deep-learning convention):

    out[b, i, j, o] = sum_{q, m, n} K[o, q, m, n] * xpad[b, i + m, j + n, q]

which makes the im2col column index ``v = q * k**2 + m * k + n`` line up with a
plain row-major reshape of the kernel to ``[F_out, F_in * k**2]``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


@dataclass(frozen=True)
class ConvKernel:
    """A square, odd-width convolution kernel ``[F_out, F_in, k, k]``."""

    weight: np.ndarray

    def __post_init__(self):
        check_kernel(self.weight)

    @property
    def width(self) -> int:
        return self.weight.shape[-1]

    @property
    def f_out(self) -> int:
        return self.weight.shape[0]

    @property
    def f_in(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def identity(cls, channels: int, width: int = 1, dtype=np.float64) -> "ConvKernel":
        """Centered delta kernel: the identity under conv2d and kernel_compose."""
        w = np.zeros((channels, channels, width, width), dtype=dtype)
        c = width // 2
        w[np.arange(channels), np.arange(channels), c, c] = 1
        return cls(w)


def _weight(kernel) -> np.ndarray:
    return kernel.weight if isinstance(kernel, ConvKernel) else np.asarray(kernel)


def check_kernel(w: np.ndarray) -> None:
    if w.ndim != 4:
        raise ShapeError(f"kernel must be 4-D [F_out, F_in, k, k], got shape {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"kernel must be square, got shape {w.shape}")
    if w.shape[2] % 2 != 1:
        raise ShapeError(f"kernel width must be odd, got shape {w.shape}")


def _check_spatial(x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"spatial tensor must be 4-D [batch, H, W, F], got shape {x.shape}")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"spatial dims must be >= 1, got shape {x.shape}")


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Gather every ``k x k`` zero-padded neighbourhood into a column.

    Returns ``[batch, H, W, F * k * k]`` with column index ``q * k**2 + m * k + n``.
    """
    if k % 2 != 1:
        raise ShapeError(f"im2col width must be odd, got {k}")
    _check_spatial(x)
    if k == 1:
        return x
    r = k // 2
    b, h, w, f = x.shape
    xpad = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    # window axes land last: [b, h, w, f, k, k]
    win = sliding_window_view(xpad, (k, k), axis=(1, 2))
    return win.reshape(b, h, w, f * k * k)


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    # internal layout [batch, H, W, k, k, F] flattened: channel-innermost copies are
    # several times faster than the window-innermost order of im2col
    if k == 1:
        return x
    r = k // 2
    b, h, w, f = x.shape
    xpad = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    win = sliding_window_view(xpad, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(b, h, w, k * k * f)


def _patch_matrix(w: np.ndarray) -> np.ndarray:
    # [F_out, F_in, k, k] -> [F_out, k * k * F_in] matching _patches
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def col2im(cols: np.ndarray, k: int, f: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the image."""
    if k == 1:
        return cols
    r = k // 2
    b, h, w, _ = cols.shape
    c = cols.reshape(b, h, w, f, k, k)
    out = np.zeros((b, h + 2 * r, w + 2 * r, f), dtype=cols.dtype)
    for m in range(k):
        for n in range(k):
            out[:, m:m + h, n:n + w, :] += c[..., m, n]
    return out[:, r:r + h, r:r + w, :]


def _matmul_cols(cols: np.ndarray, wmat: np.ndarray) -> np.ndarray:
    # real columns against a complex matrix: two real GEMMs beat upcasting the columns
    if np.iscomplexobj(wmat) and not np.iscomplexobj(cols):
        # one GEMM against the interleaved (re, im) view of the matrix
        wr = np.ascontiguousarray(wmat.T).view(wmat.real.dtype)
        out = cols @ wr.astype(np.result_type(cols, wr), copy=False)
        return out.view(np.result_type(out, 1j))
    return cols @ wmat.T


def conv2d(kernel, x: np.ndarray, workers: int = 1) -> np.ndarray:
    """Same-padded 2-D convolution of a ``[batch, H, W, F_in]`` tensor.

    With ``workers > 1`` the batch axis is split across threads (numpy
    releases the GIL inside the matrix products).
    """
    w = _weight(kernel)
    check_kernel(w)
    _check_spatial(x)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(
            f"channel mismatch: input shape {x.shape} vs kernel shape {w.shape}"
        )
    k = w.shape[-1]
    wmat = _patch_matrix(w)
    if workers <= 1 or x.shape[0] < 2:
        return _matmul_cols(_patches(x, k), wmat)
    bounds = np.linspace(0, x.shape[0], min(workers, x.shape[0]) + 1).astype(int)
    parts = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    with ThreadPoolExecutor(len(parts)) as pool:
        outs = list(pool.map(lambda c: _matmul_cols(_patches(x[c[0]:c[1]], k), wmat), parts))
    return np.concatenate(outs, axis=0)


def adjoint_kernel(kernel) -> np.ndarray:
    """Kernel whose same-padded conv2d is the adjoint of conv2d with ``kernel``."""
    w = _weight(kernel)
    return np.conj(w[:, :, ::-1, ::-1]).transpose(1, 0, 2, 3)


def _cols_t_grad(cols: np.ndarray, g: np.ndarray) -> np.ndarray:
    # conj(cols)^T @ g, keeping real operands in real GEMMs
    if not np.iscomplexobj(cols) and np.iscomplexobj(g):
        # interleaved (re, im) view of g turns this into a single real GEMM
        gr = np.ascontiguousarray(g).view(g.real.dtype)
        out = cols.T @ gr.astype(np.result_type(cols, gr), copy=False)
        return out.view(np.result_type(out, 1j))
    if np.iscomplexobj(cols) and not np.iscomplexobj(g):
        cr = np.ascontiguousarray(cols).view(cols.real.dtype)
        out = (cr.T @ g.astype(np.result_type(cr, g), copy=False)).reshape(-1, 2, g.shape[1])
        return out[:, 0] - 1j * out[:, 1]
    return np.conj(cols).T @ g


def conv2d_backward(kernel, x: np.ndarray, grad_out: np.ndarray, need_input=True,
                    need_weight=True):
    """Gradients of a real loss through :func:`conv2d`.

    Complex gradients follow the ``dL/dRe + i dL/dIm`` convention, so the
    input gradient pairs with the conjugate kernel and vice versa. Returns
    ``(grad_x, grad_kernel)``; either is None when not requested. The input
    gradient is real whenever ``x`` is real.
    """
    w = _weight(kernel)
    f_out, f_in, k, _ = w.shape
    grad_x = grad_w = None
    if need_weight:
        cols = _patches(x, k).reshape(-1, f_in * k * k)
        grad_w = _cols_t_grad(cols, grad_out.reshape(-1, f_out)).T
        grad_w = grad_w.reshape(f_out, k, k, f_in).transpose(0, 3, 1, 2)
        if not np.iscomplexobj(w):
            grad_w = grad_w.real
    if need_input:
        grad_x = conv2d(adjoint_kernel(w), grad_out)
        if not np.iscomplexobj(x):
            grad_x = grad_x.real
    return grad_x, grad_w


def kernel_compose(k1, k2) -> ConvKernel:
    """Kernel ``k2 o k1``: applying it equals applying ``k1`` then ``k2``.

    The result is the full (untruncated) composition, width ``k1 + k2 - 1``.
    """
    w1, w2 = _weight(k1), _weight(k2)
    check_kernel(w1)
    check_kernel(w2)
    if w1.shape[0] != w2.shape[1]:
        raise ShapeError(
            f"feature mismatch: first kernel {w1.shape} outputs {w1.shape[0]} features, "
            f"second kernel {w2.shape} expects {w2.shape[1]}"
        )
    a, b = w2.shape[-1], w1.shape[-1]
    out = np.zeros(
        (w2.shape[0], w1.shape[1], a + b - 1, a + b - 1),
        dtype=np.result_type(w1, w2),
    )
    for m in range(a):
        for n in range(a):
            out[:, :, m:m + b, n:n + b] += np.einsum("om,mixy->oixy", w2[:, :, m, n], w1)
    return ConvKernel(out)


def kernel_to_matrix(kernel) -> np.ndarray:
    """Row-major flatten ``[F_out, F_in, k, k] -> [F_out, F_in * k * k]``."""
    w = _weight(kernel)
    return w.reshape(w.shape[0], -1)


def matrix_to_kernel(mat: np.ndarray, f_in: int, k: int) -> np.ndarray:
    """Inverse of :func:`kernel_to_matrix`."""
    return mat.reshape(mat.shape[0], f_in, k, k)


def conv2d_direct(kernel, x: np.ndarray) -> np.ndarray:
    """Same-padded convolution as a sum of shifted channel contractions.

    Shares no code with :func:`im2col`; used where an independent route
    to the same result is wanted.
    """
    w = _weight(kernel)
    check_kernel(w)
    _check_spatial(x)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(
            f"channel mismatch: input shape {x.shape} vs kernel shape {w.shape}"
        )
    k = w.shape[-1]
    r = k // 2
    b, h, wd, _ = x.shape
    xpad = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    out = np.zeros((b, h, wd, w.shape[0]), dtype=np.result_type(w, x))
    for m in range(k):
        for n in range(k):
            out += xpad[:, m:m + h, n:n + wd, :] @ w[:, :, m, n].T
    return out
