"""Differentiable tensor operations used by the embedding network and its loss.

Tensors are plain ``numpy.ndarray`` objects.  Every forward operation is a pure
function of its inputs and has a matching ``*_backward`` function that takes
the upstream gradient plus the forward inputs and returns gradients with the
shapes of those inputs.  There is no graph; the model wires the calls.

Training runs in float32, gradient checks in float64.  Operations keep the
dtype of their inputs.
"""

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import NonFiniteError, ShapeError

NORM_EPS = 1e-12


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 values per axis, got {v}")
    return v


def _conv_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _window(offset, stride, count):
    return slice(offset, offset + stride * (count - 1) + 1, stride)


# --------------------------------------------------------------------------
# 3D convolution


def _conv3d_geometry(x, w, stride, pad):
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(
            f"conv3d expects 5-d input and kernel, got {x.shape} and {w.shape}"
        )
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv3d input has {x.shape[1]} channels, kernel expects {w.shape[1]}"
        )
    stride, pad = _triple(stride), _triple(pad)
    if min(stride) < 1 or min(pad) < 0:
        raise ShapeError(f"bad stride {stride} or padding {pad}")
    out = tuple(
        _conv_extent(n, k, s, p)
        for n, k, s, p in zip(x.shape[2:], w.shape[2:], stride, pad)
    )
    if min(out) < 1:
        raise ShapeError(
            f"kernel {w.shape[2:]} does not fit padded input {x.shape[2:]} (pad {pad})"
        )
    return stride, pad, out


def _im2col(xp, ksize, stride, out):
    """Gather padded input into columns of shape (C*kT*kH*kW, B*T'*H'*W')."""
    B, C = xp.shape[:2]
    kT, kH, kW = ksize
    xc = np.ascontiguousarray(xp.transpose(1, 0, 2, 3, 4))
    cols = np.empty((C, kT, kH, kW, B) + out, dtype=xp.dtype)
    for a, b, c in product(range(kT), range(kH), range(kW)):
        cols[:, a, b, c] = xc[
            :,
            :,
            _window(a, stride[0], out[0]),
            _window(b, stride[1], out[1]),
            _window(c, stride[2], out[2]),
        ]
    return cols.reshape(C * kT * kH * kW, -1)


def _pad(x, pad):
    pT, pH, pW = pad
    return np.pad(x, ((0, 0), (0, 0), (pT, pT), (pH, pH), (pW, pW)))


def conv3d(x, w, b, stride=1, pad=0):
    """Cross-correlate ``x`` (B,C,T,H,W) with ``w`` (O,C,kT,kH,kW) plus bias ``b``."""
    return conv3d_cols(x, w, b, stride, pad)[0]


def conv3d_cols(x, w, b, stride=1, pad=0):
    """:func:`conv3d` that also returns its column matrix for reuse in backward."""
    stride, pad, out = _conv3d_geometry(x, w, stride, pad)
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d bias shape {b.shape} != ({w.shape[0]},)")
    cols = _im2col(_pad(x, pad), w.shape[2:], stride, out)
    y = w.reshape(w.shape[0], -1) @ cols
    y += b[:, None]
    y = y.reshape((w.shape[0], x.shape[0]) + out)
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3, 4)), cols


def conv3d_backward(dout, x, w, stride=1, pad=0, need_dx=True, cols=None):
    """Return (dx, dw, db) for :func:`conv3d`; ``dx`` is None unless ``need_dx``."""
    stride, pad, out = _conv3d_geometry(x, w, stride, pad)
    O, C, kT, kH, kW = w.shape
    B = x.shape[0]
    xp = _pad(x, pad)
    if cols is None:
        cols = _im2col(xp, w.shape[2:], stride, out)
    d = dout.transpose(1, 0, 2, 3, 4).reshape(O, -1)
    dw = (d @ cols.T).reshape(w.shape)
    db = d.sum(axis=1)
    if not need_dx:
        return None, dw, db
    del cols
    dcols = (w.reshape(O, -1).T @ d).reshape((C, kT, kH, kW, B) + out)
    dxp = np.zeros((C, B) + xp.shape[2:], dtype=xp.dtype)
    for a, bb, c in product(range(kT), range(kH), range(kW)):
        dxp[
            :,
            :,
            _window(a, stride[0], out[0]),
            _window(bb, stride[1], out[1]),
            _window(c, stride[2], out[2]),
        ] += dcols[:, a, bb, c]
    T, H, W = x.shape[2:]
    pT, pH, pW = pad
    dx = dxp[:, :, pT : pT + T, pH : pH + H, pW : pW + W].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(dx), dw, db


# --------------------------------------------------------------------------
# elementwise


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


# --------------------------------------------------------------------------
# max pooling


def _pool_geometry(x, window, stride):
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects a 5-d input, got {x.shape}")
    window = _triple(window)
    stride = _triple(window if stride is None else stride)
    for n, k in zip(x.shape[2:], window):
        if k > n:
            raise ShapeError(f"pool window {window} larger than input {x.shape[2:]}")
    out = tuple((n - k) // s + 1 for n, k, s in zip(x.shape[2:], window, stride))
    return window, stride, out


def _pool_candidates(x, window, stride, out):
    for a, b, c in product(*(range(k) for k in window)):
        yield (a, b, c), x[
            :,
            :,
            _window(a, stride[0], out[0]),
            _window(b, stride[1], out[1]),
            _window(c, stride[2], out[2]),
        ]


def maxpool3d(x, window, stride=None):
    """Per-window maximum; trailing remainders that do not fill a window are dropped."""
    window, stride, out = _pool_geometry(x, window, stride)
    y = None
    for _, patch in _pool_candidates(x, window, stride, out):
        y = patch.copy() if y is None else np.maximum(y, patch)
    return y


def maxpool3d_backward(dout, x, window, stride=None):
    """Route each window's gradient to its first maximal element."""
    window, stride, out = _pool_geometry(x, window, stride)
    y = maxpool3d(x, window, stride)
    dx = np.zeros_like(x)
    taken = np.zeros(y.shape, dtype=bool)
    for (a, b, c), patch in _pool_candidates(x, window, stride, out):
        hit = (patch == y) & ~taken
        taken |= hit
        dx[
            :,
            :,
            _window(a, stride[0], out[0]),
            _window(b, stride[1], out[1]),
            _window(c, stride[2], out[2]),
        ] += np.where(hit, dout, 0)
    return dx


# --------------------------------------------------------------------------
# gated recurrent unit
#
# Gate layout along the last axis of every weight is (reset, update, candidate):
#   r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
#   z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
#   n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
#   h' = (1 - z) * n + z * h

GRU_KEYS = ("w_ih", "w_hh", "b_ih", "b_hh")


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1)


def _gru_check(x, p):
    if x.ndim != 3:
        raise ShapeError(f"recurrent layer expects (T, B, F), got {x.shape}")
    F = x.shape[2]
    h = p["w_hh"].shape[0]
    expected = {
        "w_ih": (F, 3 * h),
        "w_hh": (h, 3 * h),
        "b_ih": (3 * h,),
        "b_hh": (3 * h,),
    }
    for k, shape in expected.items():
        if p[k].shape != shape:
            raise ShapeError(f"recurrent {k} has shape {p[k].shape}, expected {shape}")
    return h


def _gru_scan(x, p):
    h_size = _gru_check(x, p)
    T, B, _ = x.shape
    gi = (x.reshape(T * B, -1) @ p["w_ih"] + p["b_ih"]).reshape(T, B, 3 * h_size)
    hs = np.zeros((T + 1, B, h_size), dtype=x.dtype)
    r = np.empty((T, B, h_size), dtype=x.dtype)
    z = np.empty_like(r)
    n = np.empty_like(r)
    ghn = np.empty_like(r)
    for t in range(T):
        gh = hs[t] @ p["w_hh"] + p["b_hh"]
        r[t] = _sigmoid(gi[t, :, :h_size] + gh[:, :h_size])
        z[t] = _sigmoid(gi[t, :, h_size : 2 * h_size] + gh[:, h_size : 2 * h_size])
        ghn[t] = gh[:, 2 * h_size :]
        n[t] = np.tanh(gi[t, :, 2 * h_size :] + r[t] * ghn[t])
        hs[t + 1] = (1 - z[t]) * n[t] + z[t] * hs[t]
    return hs, (r, z, n, ghn)


def gru(x, p):
    """Unidirectional pass from t=0 with zero initial state; returns (T, B, h)."""
    hs, _ = _gru_scan(x, p)
    return hs[1:]


def gru_backward(dout, x, p):
    """Backpropagation through time; returns (dx, dparams)."""
    hs, (r, z, n, ghn) = _gru_scan(x, p)
    T, B, F = x.shape
    h_size = hs.shape[2]
    dgi = np.empty((T, B, 3 * h_size), dtype=x.dtype)
    dw_hh = np.zeros_like(p["w_hh"])
    db_hh = np.zeros_like(p["b_hh"])
    dh = np.zeros((B, h_size), dtype=x.dtype)
    for t in reversed(range(T)):
        dh = dh + dout[t]
        h_prev = hs[t]
        dn = dh * (1 - z[t])
        dz = dh * (h_prev - n[t])
        dan = dn * (1 - n[t] ** 2)
        dar = dan * ghn[t] * r[t] * (1 - r[t])
        daz = dz * z[t] * (1 - z[t])
        dgi[t] = np.concatenate([dar, daz, dan], axis=1)
        dgh = np.concatenate([dar, daz, dan * r[t]], axis=1)
        dw_hh += h_prev.T @ dgh
        db_hh += dgh.sum(axis=0)
        dh = dh * z[t] + dgh @ p["w_hh"].T
    flat = dgi.reshape(T * B, -1)
    grads = {
        "w_ih": x.reshape(T * B, F).T @ flat,
        "w_hh": dw_hh,
        "b_ih": flat.sum(axis=0),
        "b_hh": db_hh,
    }
    dx = (flat @ p["w_ih"].T).reshape(T, B, F)
    return dx, grads


def bigru_layer(x, fwd, bwd):
    """Bidirectional recurrent layer: (T, B, F) -> (T, B, 2h).

    ``fwd`` and ``bwd`` are independent parameter dicts with keys
    ``w_ih, w_hh, b_ih, b_hh``; the backward direction reads time reversed and
    its outputs are re-aligned before concatenation.
    """
    forward = gru(x, fwd)
    backward = gru(x[::-1], bwd)[::-1]
    return np.concatenate([forward, backward], axis=2)


def bigru_layer_backward(dout, x, fwd, bwd):
    """Return (dx, dfwd, dbwd) for :func:`bigru_layer`."""
    h = fwd["w_hh"].shape[0]
    dx_f, g_f = gru_backward(dout[:, :, :h], x, fwd)
    dx_b, g_b = gru_backward(dout[::-1, :, h:], x[::-1], bwd)
    return dx_f + dx_b[::-1], g_f, g_b


# --------------------------------------------------------------------------
# head


def temporal_avgmax(x):
    """(T, B, G) -> (B, 2G): mean over time followed by max over time."""
    if x.ndim != 3:
        raise ShapeError(f"temporal_avgmax expects (T, B, G), got {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("temporal_avgmax on an empty sequence")
    return np.concatenate([x.mean(axis=0), x.max(axis=0)], axis=1)


def temporal_avgmax_backward(dout, x):
    T, B, G = x.shape
    dx = np.broadcast_to(dout[:, :G] / T, x.shape).copy()
    first = x.argmax(axis=0)
    rows, cols = np.indices((B, G))
    dx[first, rows, cols] += dout[:, G:]
    return dx


def affine(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            f"affine shapes do not chain: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    return x @ w + b


def affine_backward(dout, x, w):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def l2_normalize(x, eps=NORM_EPS):
    """Divide every row by max(norm, eps); all-zero rows stay zero."""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, eps)


def l2_normalize_backward(dout, x, eps=NORM_EPS):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    clipped = norms > eps
    denom = np.maximum(norms, eps)
    y = x / denom
    proj = np.where(clipped, (y * dout).sum(axis=1, keepdims=True), 0)
    return (dout - y * proj) / denom


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(dout, a, b):
    return dout @ b.T, a.T @ dout


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    Returns ``(new_params, new_state)``; the inputs are left untouched.  Any
    non-finite gradient aborts the step before anything is modified.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(
                f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; step aborted")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = dict(params), {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = (b1 * m + (1 - b1) * g).astype(p.dtype)
        v = (b2 * v + (1 - b2) * g * g).astype(p.dtype)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.dtype
        )
        new_m[name], new_v[name] = m, v
    new_state = AdamState(
        lr=state.lr, beta1=b1, beta2=b2, eps=state.eps, step=t, m=new_m, v=new_v
    )
    return new_params, new_state


# --------------------------------------------------------------------------
# verification


def avoid_kinks(x, margin=1e-3):
    """Push values out of (-margin, margin) so relu kinks are not straddled."""
    x = np.array(x, dtype=np.float64)
    near = np.abs(x) < margin
    x[near] = np.where(x[near] < 0, -margin, margin) * 2
    return x


def grad_check(forward, backward, inputs, seed=0, step=1e-5, floor=1e-6):
    """Largest relative error between analytic and central-difference gradients.

    ``forward(*inputs)`` returns one array; ``backward(dout, *inputs)`` returns
    one gradient per input, in order.  The scalar probed is
    ``sum(forward(*inputs) * R)`` for a fixed random ``R``.  Relative error per
    element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    inputs = [np.array(i, dtype=np.float64) for i in inputs]
    rng = np.random.default_rng(seed)
    out = np.asarray(forward(*inputs))
    probe = rng.standard_normal(out.shape)
    analytic = backward(probe, *inputs)
    if not isinstance(analytic, (tuple, list)):
        analytic = (analytic,)
    worst = 0.0
    for k, x in enumerate(inputs):
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(np.sum(forward(*inputs) * probe))
            flat[i] = orig - step
            down = float(np.sum(forward(*inputs) * probe))
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        a = np.asarray(analytic[k], dtype=np.float64)
        if a.shape != x.shape:
            raise ShapeError(f"gradient {k} has shape {a.shape}, input {x.shape}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst


def check_finite(name, x):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {name}")
    return x
