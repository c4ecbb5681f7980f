"""Differentiable compute core: forward ops with hand-written backward passes.

Tensors are plain numpy arrays in channel-last layout ``(..., H, W, C)``.
Every op preserves the dtype of its inputs, so the codec runs in float32
while gradient checks can run the very same code in float64.

Reductions that feed entropy-coded probabilities use a fixed order
(row-major over kernel offsets) so encoder and decoder agree bit for bit
on the same build.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericFault

__all__ = [
    "AdamState",
    "activation",
    "activation_backward",
    "adam_step",
    "affine",
    "affine_backward",
    "check_finite",
    "layer_norm",
    "layer_norm_backward",
    "mask_offsets",
    "masked_conv",
    "masked_conv_backward",
    "masked_dwconv",
    "masked_dwconv_backward",
]

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def check_finite(y: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise NumericFault(f"non-finite values produced by {where}")
    return y


# ---------------------------------------------------------------------------
# affine (linear projection / 1x1 convolution)
# ---------------------------------------------------------------------------

def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``y = x @ w + b`` applied over the trailing axis."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"affine: x{x.shape} @ w{w.shape} + b{b.shape} do not agree"
        )
    return check_finite(x @ w + b, "affine")


def affine_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Return ``(dx, dw, db)``."""
    n_in, n_out = w.shape
    dx = dy @ w.T
    x2 = x.reshape(-1, n_in)
    dy2 = dy.reshape(-1, n_out)
    return dx, x2.T @ dy2, dy2.sum(axis=0)


# ---------------------------------------------------------------------------
# masked convolutions
# ---------------------------------------------------------------------------

def mask_offsets(mask: np.ndarray) -> list[tuple[int, int]]:
    """Allowed ``(di, dj)`` offsets of a k x k mask, row-major."""
    k = mask.shape[0]
    if mask.shape != (k, k) or k % 2 == 0:
        raise ConfigError(f"mask must be square with odd size, got {mask.shape}")
    r = k // 2
    return [(di - r, dj - r) for di in range(k) for dj in range(k) if mask[di, dj]]


def _pad_hw(x: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 3) + [(r, r), (r, r), (0, 0)]
    return np.pad(x, pad)


def _check_kernel(kernel: np.ndarray, mask: np.ndarray, c_in: int, depthwise: bool):
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if kernel.shape[-2] != k or mask.shape != (k, k):
        raise DimensionError(f"kernel {kernel.shape} / mask {mask.shape} mismatch")
    expected = 1 if depthwise else c_in
    if kernel.shape[1] != expected or (depthwise and kernel.shape[0] != c_in):
        raise DimensionError(f"kernel {kernel.shape} does not fit {c_in} input channels")


def masked_dwconv(x: np.ndarray, kernel: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Depth-wise masked convolution with zero padding and no bias.

    ``x`` is ``(..., H, W, C)``, ``kernel`` is ``(C, 1, k, k)``.
    """
    _check_kernel(kernel, mask, x.shape[-1], depthwise=True)
    k = kernel.shape[-1]
    r = k // 2
    H, W = x.shape[-3], x.shape[-2]
    xp = _pad_hw(x, r)
    y = np.zeros_like(x)
    for di, dj in mask_offsets(mask):
        y += xp[..., r + di:r + di + H, r + dj:r + dj + W, :] * kernel[:, 0, di + r, dj + r]
    return check_finite(y, "masked_dwconv")


def masked_dwconv_backward(dy, x, kernel, mask):
    """Return ``(dx, dkernel)``; masked kernel offsets get exactly zero gradient."""
    k = kernel.shape[-1]
    r = k // 2
    H, W, C = x.shape[-3:]
    xp = _pad_hw(x, r)
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel)
    for di, dj in mask_offsets(mask):
        sl = (Ellipsis, slice(r + di, r + di + H), slice(r + dj, r + dj + W), slice(None))
        dk[:, 0, di + r, dj + r] = (dy * xp[sl]).reshape(-1, C).sum(axis=0)
        dxp[sl] += dy * kernel[:, 0, di + r, dj + r]
    return dxp[..., r:r + H, r:r + W, :], dk


def _gather(x: np.ndarray, offsets, r: int) -> np.ndarray:
    H, W = x.shape[-3], x.shape[-2]
    xp = _pad_hw(x, r)
    cols = [xp[..., r + di:r + di + H, r + dj:r + dj + W, :] for di, dj in offsets]
    return np.concatenate(cols, axis=-1)


def conv_matrix(kernel: np.ndarray, offsets) -> np.ndarray:
    """Flatten the allowed taps of ``(C_out, C_in, k, k)`` into ``(n_off*C_in, C_out)``."""
    r = kernel.shape[-1] // 2
    return np.concatenate([kernel[:, :, di + r, dj + r].T for di, dj in offsets], axis=0)


def masked_conv(x, kernel, bias, mask):
    """Full (cross-channel) masked convolution, ``kernel`` is ``(C_out, C_in, k, k)``.

    Implemented as gather-of-allowed-taps followed by one affine map.
    """
    _check_kernel(kernel, mask, x.shape[-1], depthwise=False)
    offsets = mask_offsets(mask)
    if not offsets:
        return np.broadcast_to(bias, x.shape[:-1] + bias.shape).copy()
    cols = _gather(x, offsets, kernel.shape[-1] // 2)
    return affine(cols, conv_matrix(kernel, offsets), bias)


def masked_conv_backward(dy, x, kernel, mask):
    """Return ``(dx, dkernel, dbias)``."""
    offsets = mask_offsets(mask)
    k = kernel.shape[-1]
    r = k // 2
    H, W, C = x.shape[-3:]
    dk = np.zeros_like(kernel)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    if not offsets:
        return np.zeros_like(x), dk, db
    cols = _gather(x, offsets, r)
    dcols, dwm, _ = affine_backward(dy, cols, conv_matrix(kernel, offsets))
    dxp = np.zeros_like(_pad_hw(x, r))
    for n, (di, dj) in enumerate(offsets):
        dk[:, :, di + r, dj + r] = dwm[n * C:(n + 1) * C].T
        dxp[..., r + di:r + di + H, r + dj:r + dj + W, :] += dcols[..., n * C:(n + 1) * C]
    return dxp[..., r:r + H, r:r + W, :], dk, db


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------

def _sigmoid(x):
    # tanh form: overflow-free and much faster than exp-based variants
    half = x.dtype.type(0.5) if isinstance(x, np.ndarray) else 0.5
    return half + half * np.tanh(half * x)


def _gelu_parts(x):
    dt = x.dtype.type
    inner = dt(_GELU_C) * (x + dt(_GELU_K) * x * x * x)
    return inner, np.tanh(inner)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    dt = x.dtype.type
    if kind == "swish":
        y = x * _sigmoid(x)
    elif kind == "gelu":
        # tanh approximation of x * Phi(x)
        y = dt(0.5) * x * (dt(1.0) + _gelu_parts(x)[1])
    elif kind == "sigmoid":
        y = _sigmoid(x)
    elif kind == "tanh":
        y = np.tanh(x)
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return check_finite(y.astype(x.dtype, copy=False), kind)


def activation_backward(dy: np.ndarray, x: np.ndarray, kind: str) -> np.ndarray:
    dt = x.dtype.type
    if kind == "swish":
        s = _sigmoid(x)
        d = s * (dt(1.0) + x * (dt(1.0) - s))
    elif kind == "gelu":
        _, t = _gelu_parts(x)
        dinner = dt(_GELU_C) * (dt(1.0) + dt(3 * _GELU_K) * x * x)
        d = dt(0.5) * (dt(1.0) + t) + dt(0.5) * x * (dt(1.0) - t * t) * dinner
    elif kind == "sigmoid":
        s = _sigmoid(x)
        d = s * (1.0 - s)
    elif kind == "tanh":
        t = np.tanh(x)
        d = 1.0 - t * t
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return (dy * d).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# layer normalization over channels
# ---------------------------------------------------------------------------

LN_EPS = 1e-5


def layer_norm(x, scale, offset, eps=LN_EPS):
    """Normalize over the trailing axis; returns ``(y, cache)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    y = xhat * scale + offset
    return check_finite(y, "layer_norm"), (xhat, rstd)


def layer_norm_backward(dy, cache, scale):
    """Return ``(dx, dscale, doffset)``."""
    xhat, rstd = cache
    n = xhat.shape[-1]
    dscale = (dy * xhat).reshape(-1, n).sum(axis=0)
    doffset = dy.reshape(-1, n).sum(axis=0)
    g = dy * scale
    dx = rstd * (g - g.mean(axis=-1, keepdims=True)
                 - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, dscale, doffset


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, **kw) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kw,
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Inputs are not modified.
    """
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise DimensionError(f"adam: shape mismatch for {name}")
        dt = p.dtype.type
        m = dt(state.beta1) * state.m[name] + dt(1 - state.beta1) * g
        v = dt(state.beta2) * state.v[name] + dt(1 - state.beta2) * g * g
        mhat = m / dt(1 - state.beta1 ** t)
        vhat = v / dt(1 - state.beta2 ** t)
        new_p[name] = p - dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
        new_m[name], new_v[name] = m, v
    new_state = AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps)
    return new_p, new_state
