"""ConvS5 layers, the stacked spatiotemporal model, and autoregressive rollout.

Parameters live in a flat ``dict[str, ndarray]`` of real arrays (complex
parameters are split into ``_re`` / ``_im`` parts) so that optimizers,
checkpoints and finite-difference checks treat every tensor uniformly.
Sequences are ``[L, batch, H, W, channels]``.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .scan import ScanStats, scan_parallel, scan_sequential
from .ssm_init import DiagDynamics, init_dynamics, zoh_scale
from .tensor import conv2d

LN_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))

ACTIVATIONS = ("resnet", "glu")
# "ext" (x87 extended) only serves as a high-accuracy reference for derivative checks
_DTYPES = {
    "f32": (np.float32, np.complex64),
    "f64": (np.float64, np.complex128),
    "ext": (np.longdouble, np.clongdouble),
}
CELLS = ("convs5", "convrnn")


@dataclass
class ModelSpec:
    layers: int = 2
    P: int = 32
    U: int = 16
    kb: int = 3
    kc: int = 3
    kd: int = 1
    use_d: bool = False
    activation: str = "resnet"
    data_channels: int = 1
    cell: str = "convs5"
    rnn_state: int = 0  # ConvRNN baseline state channels (0: match ConvS5 parameter count)
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    precision: str = "f64"

    def __post_init__(self):
        for name in ("kb", "kc", "kd"):
            if getattr(self, name) % 2 != 1:
                raise ValueError(f"{name} must be odd, got {getattr(self, name)}")
        if self.cell == "convs5" and (self.P < 2 or self.P % 2):
            raise ValueError(f"P must be even, got {self.P}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.cell not in CELLS:
            raise ValueError(f"cell must be one of {CELLS}")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")

    @property
    def real_dtype(self):
        return _DTYPES[self.precision][0]

    @property
    def complex_dtype(self):
        return _DTYPES[self.precision][1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, value in d.items():
            if key not in names:
                continue
            default = getattr(cls, key)
            if isinstance(default, bool):
                kw[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[key] = int(value)
            elif isinstance(default, float):
                kw[key] = float(value)
            else:
                kw[key] = str(value)
        return cls(**kw)


# ---------------------------------------------------------------- activations


def gelu(x):
    # x * x * x rather than x ** 3: the power ufunc is slow for negative inputs
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu_grad(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ------------------------------------------------------------------ structure


@dataclass
class ActivationBlock:
    """ResNet block ``x + conv(gelu(conv(x) + b1)) + b2`` or GLU ``(W1 x + b1) * sigmoid(W2 x + b2)``."""

    variant: str
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ConvS5Layer:
    dyn: DiagDynamics
    c_kernel: np.ndarray         # complex [U, P/2, kc, kc]; output is 2 Re(C * x)
    d_kernel: np.ndarray | None  # real [U, U, kd, kd]
    activation: ActivationBlock
    norm_scale: np.ndarray
    norm_shift: np.ndarray
    kb: int
    index: int = 0


@dataclass
class ConvRNNLayer:
    a_kernel: np.ndarray  # real [Pr, Pr, 3, 3]
    b_kernel: np.ndarray  # real [Pr, U, kb, kb]
    c_kernel: np.ndarray  # real [U, Pr, kc, kc]
    activation: ActivationBlock
    norm_scale: np.ndarray
    norm_shift: np.ndarray
    index: int = 0


def _uniform(rng, shape, fan_in, dtype, gain=1.0):
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def rnn_state_size(spec: ModelSpec) -> int:
    """ConvRNN state channels giving the closest parameter count to a ConvS5 layer."""
    if spec.rnn_state:
        return spec.rnn_state
    u, p2 = spec.U, spec.P // 2
    target = 2 * p2 * u * spec.kb ** 2 + 2 * u * p2 * spec.kc ** 2 + 3 * p2
    best, best_gap = 1, None
    for pr in range(1, 4 * spec.P + 1):
        count = 9 * pr * pr + pr * u * spec.kb ** 2 + u * pr * spec.kc ** 2
        gap = abs(count - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = pr, gap
    return best


def codec_width(spec: ModelSpec) -> int:
    """Hidden width of the encoder/decoder ramp between data channels and U."""
    return max(spec.data_channels, spec.U // 2)


def init_params(spec: ModelSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """Random parameters for a full model (encoder, layers, decoder)."""
    rng = np.random.default_rng(seed)
    rt = spec.real_dtype
    u, c = spec.U, spec.data_channels
    m = codec_width(spec)
    p: dict[str, np.ndarray] = {}
    p["enc.w1"] = _uniform(rng, (m, c, 3, 3), 9 * c, rt)
    p["enc.b1"] = np.zeros(m, rt)
    p["enc.w2"] = _uniform(rng, (u, m, 3, 3), 9 * m, rt)
    p["enc.b2"] = np.zeros(u, rt)
    for i in range(spec.layers):
        pre = f"layers.{i}."
        if spec.cell == "convs5":
            dyn = init_dynamics(spec.P, u, spec.kb, spec.dt_min, spec.dt_max,
                                seed=int(rng.integers(2 ** 31)))
            p[pre + "lam_log_re"] = np.log(-dyn.lam.real).astype(rt)
            p[pre + "lam_im"] = dyn.lam.imag.astype(rt)
            p[pre + "b_re"] = dyn.b_tilde.real.astype(rt)
            p[pre + "b_im"] = dyn.b_tilde.imag.astype(rt)
            p[pre + "log_dt"] = dyn.log_dt.astype(rt)
            p2 = spec.P // 2
            scale = 1.0 / np.sqrt(2 * p2 * spec.kc ** 2)
            p[pre + "c_re"] = (rng.normal(size=(u, p2, spec.kc, spec.kc)) * scale).astype(rt)
            p[pre + "c_im"] = (rng.normal(size=(u, p2, spec.kc, spec.kc)) * scale).astype(rt)
            if spec.use_d:
                p[pre + "d"] = _uniform(rng, (u, u, spec.kd, spec.kd), u * spec.kd ** 2, rt)
        else:
            pr = rnn_state_size(spec)
            p[pre + "rnn_a"] = _uniform(rng, (pr, pr, 3, 3), 9 * pr, rt)
            p[pre + "rnn_b"] = _uniform(rng, (pr, u, spec.kb, spec.kb), u * spec.kb ** 2, rt)
            p[pre + "rnn_c"] = _uniform(rng, (u, pr, spec.kc, spec.kc), pr * spec.kc ** 2, rt)
        p[pre + "norm_scale"] = np.ones(u, rt)
        p[pre + "norm_shift"] = np.zeros(u, rt)
        k = 3 if spec.activation == "resnet" else 1
        # second ResNet conv starts small so each block begins near the identity
        p[pre + "act_w1"] = _uniform(rng, (u, u, k, k), u * k * k, rt)
        p[pre + "act_b1"] = np.zeros(u, rt)
        gain = 0.1 if spec.activation == "resnet" else 1.0
        p[pre + "act_w2"] = _uniform(rng, (u, u, k, k), u * k * k, rt, gain)
        p[pre + "act_b2"] = np.zeros(u, rt)
    p["dec.w1"] = _uniform(rng, (m, u, 3, 3), 9 * u, rt)
    p["dec.b1"] = np.zeros(m, rt)
    p["dec.w2"] = _uniform(rng, (c, m, 3, 3), 9 * m, rt)
    p["dec.b2"] = np.zeros(c, rt)
    return p


def _activation(params, pre, spec) -> ActivationBlock:
    return ActivationBlock(spec.activation, params[pre + "act_w1"], params[pre + "act_b1"],
                           params[pre + "act_w2"], params[pre + "act_b2"])


def lambda_from_params(log_neg_re, im):
    return -np.exp(log_neg_re) + 1j * im


def layer_from_params(params, spec: ModelSpec, i: int):
    pre = f"layers.{i}."
    act = _activation(params, pre, spec)
    if spec.cell == "convrnn":
        return ConvRNNLayer(params[pre + "rnn_a"], params[pre + "rnn_b"], params[pre + "rnn_c"],
                            act, params[pre + "norm_scale"], params[pre + "norm_shift"], i)
    ct = spec.complex_dtype
    lam = lambda_from_params(params[pre + "lam_log_re"], params[pre + "lam_im"]).astype(ct)
    b_tilde = (params[pre + "b_re"] + 1j * params[pre + "b_im"]).astype(ct)
    dyn = DiagDynamics(lam, b_tilde, params[pre + "log_dt"], spec.dt_min, spec.dt_max)
    c_kernel = (params[pre + "c_re"] + 1j * params[pre + "c_im"]).astype(ct)
    return ConvS5Layer(dyn, c_kernel, params.get(pre + "d"), act,
                       params[pre + "norm_scale"], params[pre + "norm_shift"], spec.kb, i)


def initial_states(params, spec: ModelSpec, batch: int, h: int, w: int) -> list[np.ndarray]:
    if spec.cell == "convs5":
        return [np.zeros((batch, h, w, spec.P // 2), spec.complex_dtype) for _ in range(spec.layers)]
    pr = params["layers.0.rnn_a"].shape[0] if spec.layers else 0
    return [np.zeros((batch, h, w, pr), spec.real_dtype) for _ in range(spec.layers)]


# -------------------------------------------------------------------- forward


def _flat(x):
    return x.reshape((-1,) + x.shape[2:])


def _seq(x, length):
    return x.reshape((length, -1) + x.shape[1:])


def _bias_conv(w, b, x, workers: int = 1):
    return conv2d(w, x, workers) + b


def layer_norm(y, scale, shift):
    mu = y.mean(axis=-1, keepdims=True)
    yc = y - mu
    inv = 1.0 / np.sqrt((yc * yc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = yc * inv
    return xhat * scale + shift, (xhat, inv)


def activation_forward(act: ActivationBlock, x, workers: int = 1):
    if act.variant == "resnet":
        h1 = _bias_conv(act.w1, act.b1, x, workers)
        g = gelu(h1)
        return x + _bias_conv(act.w2, act.b2, g, workers), (x, h1, g)
    a = _bias_conv(act.w1, act.b1, x, workers)
    s = sigmoid(_bias_conv(act.w2, act.b2, x, workers))
    return a * s, (x, a, s)


def _check_finite(out, index, what="layer"):
    bad = ~np.isfinite(out)
    if bad.any():
        t = int(np.argwhere(bad.reshape(out.shape[0], -1).any(axis=1))[0, 0])
        raise FloatingPointError(f"non-finite values in {what} {index} at timestep {t}")


def discretized_kernels(layer: ConvS5Layer):
    """``(lam_bar, B_bar kernel [P/2, U, kb, kb])`` from the continuous-time parameters."""
    dyn = layer.dyn
    dt = np.exp(dyn.log_dt)
    lam_bar, scale = zoh_scale(dyn.lam, dt)
    b_bar = scale[:, None] * dyn.b_tilde
    u = b_bar.shape[1] // (layer.kb * layer.kb)
    return lam_bar, b_bar.reshape(b_bar.shape[0], u, layer.kb, layer.kb), (dt, scale)


def stack_input_kernel(b_kernel):
    """Complex ``[P2, U, k, k]`` as a real ``[2 P2, U, k, k]`` (real parts, then imaginary)."""
    return np.concatenate([b_kernel.real, b_kernel.imag], axis=0)


def stack_output_kernel(c_kernel):
    """Real kernel ``[U, 2 P2, k, k]`` with ``conv(it, [Re x, Im x]) == Re(conv(C, x))``."""
    return np.concatenate([c_kernel.real, -c_kernel.imag], axis=1)


def split_complex(x):
    return np.concatenate([x.real, x.imag], axis=-1)


def join_complex(x):
    half = x.shape[-1] // 2
    return x[..., :half] + 1j * x[..., half:]


def convs5_forward(layer: ConvS5Layer, u, x0=None, workers: int = 1, sequential: bool = False):
    """Core linear ConvS5 map: returns ``(ys, states, cache)`` before norm/activation.

    Both convolutions run as real GEMMs on stacked real/imaginary channels.
    ``sequential`` swaps the parallel scan for the step-by-step recurrence
    (same result, span L); ``cache["scan_stats"]`` records the scan's cost.
    """
    length = u.shape[0]
    lam_bar, b_kernel, (dt, scale) = discretized_kernels(layer)
    uf = _flat(u)
    b_stack = stack_input_kernel(b_kernel)
    bu = _seq(join_complex(conv2d(b_stack, uf, workers)), length)
    if sequential:
        states = scan_sequential(lam_bar, bu, x0)
        stats = ScanStats(operator_invocations=length, span=length)
    else:
        states, stats = scan_parallel(lam_bar, bu, x0, workers=workers)
    c_stack = stack_output_kernel(layer.c_kernel)
    ys = 2.0 * conv2d(c_stack, split_complex(_flat(states)), workers)
    if layer.d_kernel is not None:
        ys = ys + conv2d(layer.d_kernel, uf)
    ys = _seq(ys.astype(u.dtype, copy=False), length)
    cache = dict(lam_bar=lam_bar, b_stack=b_stack, c_stack=c_stack, dt=dt, scale=scale,
                 states=states, x0=x0, scan_stats=stats)
    return ys, states, cache


def convrnn_forward(layer: ConvRNNLayer, u, x0=None):
    from .oracle import convrnn_step

    length = u.shape[0]
    bu = _seq(conv2d(layer.b_kernel, _flat(u)), length)
    pr = layer.a_kernel.shape[0]
    x = np.zeros(bu.shape[1:-1] + (pr,), u.dtype) if x0 is None else x0
    states = np.empty(bu.shape, u.dtype)
    for k in range(length):
        x = convrnn_step(layer.a_kernel, None, x, None, bu=bu[k])
        states[k] = x
    ys = _seq(conv2d(layer.c_kernel, _flat(states)), length)
    stats = ScanStats(operator_invocations=length, span=length)
    return ys, states, dict(states=states, x0=x0, scan_stats=stats)


def layer_forward(layer, u, x0=None, workers: int = 1, sequential: bool = False):
    """Full layer: linear core, per-timestep channel norm, activation. Returns ``(y, xL, cache)``.

    ``sequential`` selects the step-by-step scan for ConvS5 layers (ConvRNN
    layers are always sequential).
    """
    if isinstance(layer, ConvS5Layer):
        ys, states, core = convs5_forward(layer, u, x0, workers, sequential)
    else:
        ys, states, core = convrnn_forward(layer, u, x0)
    length = u.shape[0]
    yf = _flat(ys)
    n, norm_cache = layer_norm(yf, layer.norm_scale, layer.norm_shift)
    out, act_cache = activation_forward(layer.activation, n, workers)
    out = _seq(out, length)
    _check_finite(out, layer.index)
    cache = dict(core=core, norm=norm_cache, act=act_cache, u=u)
    return out, states[-1], cache


def layer_apply(layer, u, x0=None, workers: int = 1):
    """Apply one layer to ``u [L, batch, H, W, U]``; returns ``(y, final_state)``."""
    out, xl, _ = layer_forward(layer, u, x0, workers)
    return out, xl


def encoder_forward(params, frames):
    ff = _flat(frames)
    h1 = _bias_conv(params["enc.w1"], params["enc.b1"], ff)
    g = gelu(h1)
    h = _bias_conv(params["enc.w2"], params["enc.b2"], g)
    return _seq(h, frames.shape[0]), (ff, h1, g)


def decoder_forward(params, h):
    hf = _flat(h)
    h1 = _bias_conv(params["dec.w1"], params["dec.b1"], hf)
    g = gelu(h1)
    out = _bias_conv(params["dec.w2"], params["dec.b2"], g)
    return _seq(out, h.shape[0]), (hf, h1, g)


def model_forward(params, spec: ModelSpec, frames, states=None, workers: int = 1):
    """Encoder, residual stack of layers, decoder. Returns ``(preds, new_states, cache)``."""
    frames = np.asarray(frames, dtype=spec.real_dtype)
    if frames.shape[-1] != spec.data_channels:
        raise ValueError(f"frames have {frames.shape[-1]} channels, model expects {spec.data_channels}")
    if states is None:
        states = [None] * spec.layers
    h, enc_cache = encoder_forward(params, frames)
    layer_caches, new_states = [], []
    for i in range(spec.layers):
        layer = layer_from_params(params, spec, i)
        try:
            z, xl, cache = layer_forward(layer, h, states[i], workers)
        except FloatingPointError as err:
            raise FloatingPointError(f"model layer {i}: {err}") from err
        layer_caches.append(cache)
        new_states.append(xl)
        h = h + z
    preds, dec_cache = decoder_forward(params, h)
    cache = dict(enc=enc_cache, layers=layer_caches, dec=dec_cache, frames=frames)
    return preds, new_states, cache


def model_apply(params, spec: ModelSpec, frames, states=None, workers: int = 1):
    """Predict the next frame for every input frame; returns ``(predictions, new_states)``."""
    preds, new_states, _ = model_forward(params, spec, frames, states, workers)
    return preds, new_states


def autoregress(params, spec: ModelSpec, context, horizon: int, workers: int = 1,
                clip: tuple[float, float] | None = None, step_times: list | None = None):
    """Consume ``context`` once, then generate ``horizon`` frames one at a time.

    Each generated step runs the model on a single frame with carried state,
    so per-step cost does not depend on how many frames came before. When
    ``step_times`` is a list, per-step wall times (seconds) are appended to it.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    context = np.asarray(context, dtype=spec.real_dtype)
    out_shape = (horizon,) + context.shape[1:]
    if horizon == 0:
        return np.zeros(out_shape, spec.real_dtype), None
    preds, states = model_apply(params, spec, context, None, workers)
    frame = preds[-1]
    generated = np.empty(out_shape, spec.real_dtype)
    for t in range(horizon):
        if clip is not None:
            frame = np.clip(frame, *clip)
        generated[t] = frame
        if t == horizon - 1:
            break
        t0 = time.perf_counter()
        preds, states = model_apply(params, spec, frame[None], states, workers)
        if step_times is not None:
            step_times.append(time.perf_counter() - t0)
        frame = preds[0]
    return generated, states
