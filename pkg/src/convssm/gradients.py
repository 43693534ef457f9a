"""Reverse-mode gradients for the ConvS5 stack, finite-difference checks, and Adam.

Complex intermediates carry gradients as ``dL/dRe z + i dL/dIm z``. Under that
convention a holomorphic map ``w = f(z)`` back-propagates as
``g_z = conj(f'(z)) g_w`` and a real input ``t`` of ``w = f(t)`` receives
``Re(conj(g_w) f'(t))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .layer import (
    ModelSpec,
    _flat,
    _seq,
    gelu_grad,
    join_complex,
    layer_from_params,
    model_forward,
    split_complex,
)
from .scan import scan_parallel
from .ssm_init import zoh_scale_dlam
from .tensor import conv2d_backward


# ------------------------------------------------------------------- losses


def l1_l2_loss(pred, target):
    """Mean per-pixel ``|e| + e**2`` and its gradient."""
    e = pred - target
    n = e.size
    return float(np.abs(e).mean() + (e * e).mean()), (np.sign(e) + 2.0 * e) / n


def mse_loss(pred, target):
    e = pred - target
    return float((e * e).mean()), 2.0 * e / e.size


LOSSES = {"l1_l2": l1_l2_loss, "mse": mse_loss}


# --------------------------------------------------------------- recurrence


def recurrence_adjoint(lambda_bar, states, grad_states, x0=None, workers: int = 1):
    """Adjoint of ``x_k = lambda_bar * x_{k-1} + bu_k`` (diagonal, channel-broadcast).

    ``grad_bu_k = g_k + conj(lambda_bar) * grad_bu_{k+1}`` is itself a diagonal
    scan, run in reverse time. ``grad_lambda_bar`` sums ``grad_bu_k * conj(x_{k-1})``
    over every axis but the channel, with ``x_0`` (zero if omitted) as the
    state before the first step. Returns ``(grad_bu, grad_lambda_bar)``.
    """
    rev, _ = scan_parallel(np.conj(lambda_bar), grad_states[::-1], workers=workers)
    grad_bu = rev[::-1]
    axes = tuple(range(grad_bu.ndim - 1))
    grad_lam = (grad_bu[1:] * np.conj(states[:-1])).sum(axis=axes)
    if x0 is not None:
        grad_lam = grad_lam + (grad_bu[0] * np.conj(x0)).sum(axis=axes[:-1])
    return np.ascontiguousarray(grad_bu), grad_lam


# ------------------------------------------------------------------ backward


def _bias_conv_backward(w, x, g, need_input=True):
    gx, gw = conv2d_backward(w, x, g, need_input)
    return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)


def activation_backward(act, cache, g):
    """Returns ``(g_input, {"act_w1": ..., ...})``."""
    x, first, second = cache
    grads = {}
    if act.variant == "resnet":
        h1, gl = first, second
        g_g, grads["act_w2"], grads["act_b2"] = _bias_conv_backward(act.w2, gl, g)
        g_h1 = g_g * gelu_grad(h1)
        g_x, grads["act_w1"], grads["act_b1"] = _bias_conv_backward(act.w1, x, g_h1)
        return g + g_x, grads
    a, s = first, second
    g_a = g * s
    g_z2 = g * a * s * (1.0 - s)
    gx1, grads["act_w1"], grads["act_b1"] = _bias_conv_backward(act.w1, x, g_a)
    gx2, grads["act_w2"], grads["act_b2"] = _bias_conv_backward(act.w2, x, g_z2)
    return gx1 + gx2, grads


def layer_norm_backward(cache, scale, g):
    xhat, inv = cache
    g_scale = (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0)
    g_shift = g.reshape(-1, g.shape[-1]).sum(axis=0)
    gx = g * scale
    g_y = inv * (gx - gx.mean(axis=-1, keepdims=True)
                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return g_y, g_scale, g_shift


def convs5_backward(layer, core, u, g_ys, g_xl=None, workers: int = 1):
    """Back-propagate through discretization, input conv, scan and output conv."""
    length = u.shape[0]
    uf = _flat(u)
    states = core["states"]
    grads = {}
    g_uf = np.zeros_like(uf)
    g_yf = _flat(g_ys)
    if layer.d_kernel is not None:
        gu_d, grads["d"] = conv2d_backward(layer.d_kernel, uf, g_yf)
        g_uf += gu_d
    g_split, g_cs = conv2d_backward(core["c_stack"], split_complex(_flat(states)), 2.0 * g_yf)
    half = g_cs.shape[1] // 2
    grads["c_re"], grads["c_im"] = g_cs[:, :half], -g_cs[:, half:]
    g_states = _seq(join_complex(g_split), length)
    if g_xl is not None:
        g_states[-1] += g_xl
    lam_bar, x0 = core["lam_bar"], core["x0"]
    g_bu, g_lam_bar = recurrence_adjoint(lam_bar, states, g_states, x0, workers)
    g_x0 = np.conj(lam_bar) * g_bu[0]
    gu_b, g_bs = conv2d_backward(core["b_stack"], uf, split_complex(_flat(g_bu)))
    g_uf += gu_b
    half = g_bs.shape[0] // 2
    g_b_bar = (g_bs[:half] + 1j * g_bs[half:]).reshape(half, -1)

    dyn = layer.dyn
    lam, dt, scale = dyn.lam, core["dt"], core["scale"]
    g_bt = np.conj(scale)[:, None] * g_b_bar
    g_scale = (np.conj(dyn.b_tilde) * g_b_bar).sum(axis=1)
    dscale_dlam = zoh_scale_dlam(lam, dt)
    g_lam = np.conj(dt * lam_bar) * g_lam_bar + np.conj(dscale_dlam) * g_scale
    g_dt = (np.conj(g_lam_bar) * lam * lam_bar).real + (np.conj(g_scale) * lam_bar).real
    grads["log_dt"] = dt * g_dt
    grads["lam_log_re"] = lam.real * g_lam.real  # d(-exp(r))/dr = Re(lam)
    grads["lam_im"] = g_lam.imag
    grads["b_re"], grads["b_im"] = g_bt.real, g_bt.imag
    return _seq(g_uf, length), grads, g_x0


def convrnn_backward(layer, core, u, g_ys, g_xl=None):
    length = u.shape[0]
    states, x0 = core["states"], core["x0"]
    g_states_f, g_c = conv2d_backward(layer.c_kernel, _flat(states), _flat(g_ys))
    g_states = _seq(g_states_f, length)
    g_pre = np.empty_like(states)
    carry = np.zeros_like(states[0]) if g_xl is None else g_xl.copy()
    for k in range(length - 1, -1, -1):
        gx = g_states[k] + carry
        g_pre[k] = gx * (1.0 - states[k] ** 2)
        carry, _ = conv2d_backward(layer.a_kernel, states[k], g_pre[k], need_weight=False)
    prev = np.concatenate([(np.zeros_like(states[:1]) if x0 is None else x0[None]), states[:-1]])
    _, g_a = conv2d_backward(layer.a_kernel, _flat(prev), _flat(g_pre), need_input=False)
    g_uf, g_b = conv2d_backward(layer.b_kernel, _flat(u), _flat(g_pre))
    return _seq(g_uf, length), {"rnn_a": g_a, "rnn_b": g_b, "rnn_c": g_c}, carry


def layer_backward(layer, cache, g_out, g_xl=None, workers: int = 1):
    """Returns ``(g_input, grads, g_x0)`` for one full layer."""
    length = g_out.shape[0]
    g_n, grads = activation_backward(layer.activation, cache["act"], _flat(g_out))
    g_y, grads["norm_scale"], grads["norm_shift"] = layer_norm_backward(
        cache["norm"], layer.norm_scale, g_n)
    g_ys = _seq(g_y, length)
    if hasattr(layer, "dyn"):
        g_u, core_grads, g_x0 = convs5_backward(layer, cache["core"], cache["u"], g_ys, g_xl, workers)
    else:
        g_u, core_grads, g_x0 = convrnn_backward(layer, cache["core"], cache["u"], g_ys, g_xl)
    grads.update(core_grads)
    return g_u, grads, g_x0


def _codec_backward(w1, w2, cache, g, prefix):
    x, h1, gl = cache
    g_gl, gw2, gb2 = _bias_conv_backward(w2, gl, g)
    g_h1 = g_gl * gelu_grad(h1)
    g_x, gw1, gb1 = _bias_conv_backward(w1, x, g_h1, need_input=prefix == "dec")
    return g_x, {f"{prefix}.w1": gw1, f"{prefix}.b1": gb1, f"{prefix}.w2": gw2, f"{prefix}.b2": gb2}


def model_backward(params, spec: ModelSpec, cache, grad_preds, grad_final_states=None,
                   workers: int = 1):
    """Gradient of a real loss w.r.t. every parameter, given ``dL/dpredictions``.

    Returns ``(grads, grad_initial_states)``.
    """
    length = grad_preds.shape[0]
    g_h, grads = _codec_backward(params["dec.w1"], params["dec.w2"], cache["dec"],
                                 _flat(grad_preds), "dec")
    g_h = _seq(g_h, length)
    g_states0 = [None] * spec.layers
    for i in reversed(range(spec.layers)):
        layer = layer_from_params(params, spec, i)
        g_xl = None if grad_final_states is None else grad_final_states[i]
        g_u, lg, g_x0 = layer_backward(layer, cache["layers"][i], g_h, g_xl, workers)
        g_h = g_h + g_u
        g_states0[i] = g_x0
        for name, g in lg.items():
            grads[f"layers.{i}.{name}"] = g
    _, enc_grads = _codec_backward(params["enc.w1"], params["enc.w2"], cache["enc"],
                                   _flat(g_h), "enc")
    grads.update(enc_grads)
    out = {name: np.asarray(grads[name], dtype=params[name].dtype).reshape(params[name].shape)
           for name in params}
    return out, g_states0


def loss_and_grads(params, spec: ModelSpec, inputs, targets, loss: str = "l1_l2",
                   states=None, workers: int = 1):
    preds, _, cache = model_forward(params, spec, inputs, states, workers)
    value, g = LOSSES[loss](preds, targets)
    grads, _ = model_backward(params, spec, cache, g.astype(preds.dtype), workers=workers)
    return value, grads


# ------------------------------------------------------- finite differences


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    samples: int
    per_param: dict = field(default_factory=dict)


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(params, spec: ModelSpec, inputs, targets, epsilon: float = 1e-5,
                    samples: int = 60, seed: int = 0, loss: str = "mse") -> GradCheckReport:
    """Analytic (f64) gradients vs central differences on sampled scalar parameters.

    Every parameter tensor contributes at least one sample. The difference
    quotients are evaluated in extended precision so that forward-pass
    roundoff, amplified by ``1 / epsilon``, stays far below the tolerance even
    for parameters with very small gradients.
    """
    if spec.precision != "f64":
        raise ValueError("gradient checks need f64 precision")
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grads(params, spec, inputs, targets, loss)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    names = sorted(params)
    picks = [(n, int(rng.integers(params[n].size))) for n in names]
    while len(picks) < samples:
        n = names[int(rng.integers(len(names)))]
        picks.append((n, int(rng.integers(params[n].size))))
    ext = replace(spec, precision="ext")
    ext_in = np.asarray(inputs, dtype=np.longdouble)
    ext_tg = np.asarray(targets, dtype=np.longdouble)

    def ext_loss(p):
        preds = model_forward(p, ext, ext_in)[0]
        e = preds - ext_tg
        return np.mean(e * e) if loss == "mse" else np.mean(np.abs(e) + e * e)

    worst, worst_name, per = 0.0, "", {}
    for name, idx in picks:
        p = {k: v.astype(np.longdouble) for k, v in params.items()}
        flat = p[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + epsilon
        up = ext_loss(p)
        flat[idx] = orig - epsilon
        down = ext_loss(p)
        numeric = float((up - down) / (2 * epsilon))
        err = relative_error(float(grads[name].reshape(-1)[idx]), numeric)
        per[name] = max(per.get(name, 0.0), err)
        if err > worst:
            worst, worst_name = err, name
    return GradCheckReport(worst, worst_name, len(picks), per)


# -------------------------------------------------------------------- Adam


@dataclass
class AdamConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 100
    total_steps: int = 2000
    min_lr_ratio: float = 0.1
    grad_clip: float = 1.0


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self, prefix="opt.") -> dict[str, np.ndarray]:
        out = {f"{prefix}step": np.array(float(self.step))}
        for k in self.m:
            out[f"{prefix}m.{k}"] = self.m[k]
            out[f"{prefix}v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_arrays(cls, arrays, prefix="opt.") -> "AdamState":
        st = cls(step=int(arrays[f"{prefix}step"]))
        for key, val in arrays.items():
            if key.startswith(f"{prefix}m."):
                st.m[key[len(prefix) + 2:]] = val.copy()
            elif key.startswith(f"{prefix}v."):
                st.v[key[len(prefix) + 2:]] = val.copy()
        return st


def learning_rate(cfg: AdamConfig, step: int) -> float:
    """Linear warmup then cosine decay to ``min_lr_ratio * lr``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    cos = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cos)


def sgd_adam_step(params, grads, state: AdamState, cfg: AdamConfig, frozen=(),
                  lr: float | None = None):
    """One Adam update; returns new ``(params, state)`` without mutating the inputs.

    ``lr`` overrides the step-indexed schedule (used when training to a
    wall-clock budget, where progress is measured in time instead of steps).
    """
    if cfg.grad_clip:
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                             for n, g in grads.items() if n not in frozen))
        factor = min(1.0, cfg.grad_clip / (norm + 1e-12))
    else:
        factor = 1.0
    t = state.step + 1
    if lr is None:
        lr = learning_rate(cfg, state.step)
    new_params, new_state = {}, AdamState(step=t)
    for name, p in params.items():
        if name in frozen or name not in grads:
            new_params[name] = p
            continue
        g = grads[name] * factor
        m = cfg.beta1 * state.m.get(name, np.zeros_like(p)) + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, np.zeros_like(p)) + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)
        new_state.m[name], new_state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, new_state
