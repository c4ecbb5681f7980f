"""Masked Gated ConvFormer: causal masks, blocks, forward and backward.

Positions of a patch are coded in wavefront groups ``group(i, j) = 2i + j``;
a P x P patch therefore takes ``3P - 2`` steps. Masks are derived from the
same rule so that the prediction at ``(i, j)`` only sees earlier groups.

Parameters live in an insertion-ordered ``dict`` (name -> float32 array);
the order is the checkpoint serialization order.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .mixture import MixtureParams, mixture_nll, mixture_params, n_outputs

MASK_A = "A"
MASK_B = "B"


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3
    dim: int = 128
    kernel: int = 7
    mixtures: int = 5
    mlp_ratio: int = 4
    channels: int = 3
    out_proj: bool = True

    def __post_init__(self):
        for f in ("depth", "dim", "kernel", "mixtures", "mlp_ratio"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def n_out(self) -> int:
        return n_outputs(self.channels, self.mixtures)

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.dim

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def group_index(i, j):
    return 2 * i + j


def build_mask(k: int, kind: str) -> np.ndarray:
    """Boolean k x k mask; offset ``(di, dj)`` allowed iff ``2di + dj < 0`` (B) or ``<= 0`` (A)."""
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"mask size must be odd and positive, got {k}")
    if kind not in (MASK_A, MASK_B):
        raise ConfigError(f"mask type must be 'A' or 'B', got {kind!r}")
    if kind == MASK_B and k < 3:
        raise ConfigError("type-B mask of size 1 is empty")
    r = k // 2
    d = np.arange(-r, r + 1)
    g = 2 * d[:, None] + d[None, :]
    return g < 0 if kind == MASK_B else g <= 0


EMBED_KERNEL = 3


def embed_mask() -> np.ndarray:
    return build_mask(EMBED_KERNEL, MASK_B)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    m, h, k = cfg.dim, cfg.hidden, cfg.kernel
    shapes = {
        "embed.weight": (m, cfg.channels, EMBED_KERNEL, EMBED_KERNEL),
        "embed.bias": (m,),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1.scale": (m,),
            p + "norm1.offset": (m,),
            p + "wa.weight": (m, m),
            p + "wa.bias": (m,),
            p + "wv.weight": (m, m),
            p + "wv.bias": (m,),
            p + "dw.weight": (m, 1, k, k),
        })
        if cfg.out_proj:
            shapes[p + "proj.weight"] = (m, m)
            shapes[p + "proj.bias"] = (m,)
        shapes.update({
            p + "norm2.scale": (m,),
            p + "norm2.offset": (m,),
            p + "up.weight": (m, h),
            p + "up.bias": (h,),
            p + "down.weight": (h, m),
            p + "down.bias": (m,),
        })
    shapes["head.weight"] = (m, cfg.n_out)
    shapes["head.bias"] = (cfg.n_out,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count (checked against :func:`param_shapes` in tests)."""
    m, h, k, C = cfg.dim, cfg.hidden, cfg.kernel, cfg.channels
    block = 2 * (m * m + m) + m * k * k + 4 * m + (m * h + h) + (h * m + m)
    if cfg.out_proj:
        block += m * m + m
    return m * C * 9 + m + cfg.depth * block + m * cfg.n_out + cfg.n_out


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    mask_a = build_mask(cfg.kernel, MASK_A)
    mask_b = embed_mask()
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".scale"):
            arr = np.ones(shape)
        elif name.endswith((".bias", ".offset")):
            arr = np.zeros(shape)
        elif name == "embed.weight":
            n_taps = int(mask_b.sum()) * cfg.channels
            arr = rng.normal(0.0, 1.0 / np.sqrt(n_taps), shape) * mask_b
        elif name.endswith("dw.weight"):
            arr = rng.normal(0.0, 1.0 / np.sqrt(mask_a.sum()), shape) * mask_a
        elif name.endswith(("proj.weight", "down.weight")):
            # residual branches start small
            arr = rng.normal(0.0, 0.5 / np.sqrt(shape[0] * cfg.depth), shape)
        elif name == "head.weight":
            arr = rng.normal(0.0, 0.1 / np.sqrt(shape[0]), shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        params[name] = arr.astype(np.float32)
    return params


def zero_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {n: np.zeros(s, np.float32) for n, s in param_shapes(cfg).items()}


def normalize_pixels(x, dtype=np.float32) -> np.ndarray:
    """Integer pixels to ``[-1, 1]`` in the compute dtype."""
    dt = np.dtype(dtype).type
    return np.asarray(x).astype(dtype) * dt(2.0 / 255.0) - dt(1.0)


# ---------------------------------------------------------------------------
# forward / backward over full feature maps
# ---------------------------------------------------------------------------

def _block_forward(h, params, p, cfg, mask_a):
    t = {"h0": h}
    a, t["ln1"] = nx.layer_norm(h, params[p + "norm1.scale"], params[p + "norm1.offset"])
    t["a"] = a
    A = nx.affine(a, params[p + "wa.weight"], params[p + "wa.bias"])
    V = nx.affine(a, params[p + "wv.weight"], params[p + "wv.bias"])
    y, t["mcg"] = mcg_forward_cached(A, V, params[p + "dw.weight"], mask_a)
    t["A"], t["V"] = A, V
    if cfg.out_proj:
        t["y"] = y
        y = nx.affine(y, params[p + "proj.weight"], params[p + "proj.bias"])
    h1 = h + y
    b, t["ln2"] = nx.layer_norm(h1, params[p + "norm2.scale"], params[p + "norm2.offset"])
    t["b"] = b
    U = nx.affine(b, params[p + "up.weight"], params[p + "up.bias"])
    G = nx.activation(U, "gelu")
    t["U"], t["G"] = U, G
    h2 = h1 + nx.affine(G, params[p + "down.weight"], params[p + "down.bias"])
    return h2, t


def mcg_forward_cached(A, V, dw_kernel, mask):
    AM = nx.masked_dwconv(A, dw_kernel, mask)
    gate = nx.activation(AM, "swish")
    return gate * V, (AM, gate)


def mcg_forward(x, params: dict, prefix: str, mask: np.ndarray) -> np.ndarray:
    """``swish(dwconv(x W_A + b_A, mask)) * (x W_V + b_V)`` for one block."""
    if not mask[mask.shape[0] // 2, mask.shape[1] // 2]:
        raise ConfigError("MCG requires a type-A mask")
    A = nx.affine(x, params[prefix + "wa.weight"], params[prefix + "wa.bias"])
    V = nx.affine(x, params[prefix + "wv.weight"], params[prefix + "wv.bias"])
    return mcg_forward_cached(A, V, params[prefix + "dw.weight"], mask)[0]


def _block_backward(dh2, t, params, grads, p, cfg, mask_a):
    dG, grads[p + "down.weight"], grads[p + "down.bias"] = nx.affine_backward(
        dh2, t["G"], params[p + "down.weight"])
    dU = nx.activation_backward(dG, t["U"], "gelu")
    db, grads[p + "up.weight"], grads[p + "up.bias"] = nx.affine_backward(
        dU, t["b"], params[p + "up.weight"])
    dln2, grads[p + "norm2.scale"], grads[p + "norm2.offset"] = nx.layer_norm_backward(
        db, t["ln2"], params[p + "norm2.scale"])
    dh1 = dh2 + dln2
    dy = dh1
    if cfg.out_proj:
        dy, grads[p + "proj.weight"], grads[p + "proj.bias"] = nx.affine_backward(
            dh1, t["y"], params[p + "proj.weight"])
    AM, gate = t["mcg"]
    dV = dy * gate
    dAM = nx.activation_backward(dy * t["V"], AM, "swish")
    dA, grads[p + "dw.weight"] = nx.masked_dwconv_backward(
        dAM, t["A"], params[p + "dw.weight"], mask_a)
    da1, grads[p + "wa.weight"], grads[p + "wa.bias"] = nx.affine_backward(
        dA, t["a"], params[p + "wa.weight"])
    da2, grads[p + "wv.weight"], grads[p + "wv.bias"] = nx.affine_backward(
        dV, t["a"], params[p + "wv.weight"])
    dln1, grads[p + "norm1.scale"], grads[p + "norm1.offset"] = nx.layer_norm_backward(
        da1 + da2, t["ln1"], params[p + "norm1.scale"])
    return dh1 + dln1


def forward(x_norm: np.ndarray, params: dict, cfg: ModelConfig):
    """Raw head output for normalized pixels ``(..., H, W, C)``; returns ``(raw, tape)``."""
    if x_norm.shape[-1] != cfg.channels:
        raise DimensionError(
            f"input has {x_norm.shape[-1]} channels, model expects {cfg.channels}")
    mask_a = build_mask(cfg.kernel, MASK_A)
    tape = {"x": x_norm, "blocks": []}
    h = nx.masked_conv(x_norm, params["embed.weight"], params["embed.bias"], embed_mask())
    for i in range(cfg.depth):
        h, t = _block_forward(h, params, f"blocks.{i}.", cfg, mask_a)
        tape["blocks"].append(t)
    tape["h"] = h
    raw = nx.affine(h, params["head.weight"], params["head.bias"])
    return raw, tape


def backward(draw: np.ndarray, tape: dict, params: dict, cfg: ModelConfig) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter, given d(loss)/d(raw)."""
    mask_a = build_mask(cfg.kernel, MASK_A)
    grads = {}
    dh, grads["head.weight"], grads["head.bias"] = nx.affine_backward(
        draw, tape["h"], params["head.weight"])
    for i in reversed(range(cfg.depth)):
        dh = _block_backward(dh, tape["blocks"][i], params, grads, f"blocks.{i}.", cfg, mask_a)
    _, grads["embed.weight"], grads["embed.bias"] = nx.masked_conv_backward(
        dh, tape["x"], params["embed.weight"], embed_mask())
    return {name: grads[name] for name in params}


def mgcf_forward(patch: np.ndarray, params: dict, cfg: ModelConfig) -> MixtureParams:
    """Mixture parameters at every position of an integer patch ``(H, W, C)``."""
    raw, _ = forward(normalize_pixels(patch, params["head.weight"].dtype), params, cfg)
    return mixture_params(raw, cfg.channels, cfg.mixtures)


def patch_nll(patch: np.ndarray, params: dict, cfg: ModelConfig,
              need_grad: bool = False):
    """Total code length in bits of integer pixels ``(..., H, W, C)``.

    Returns ``bits`` or ``(bits, grads)`` when ``need_grad``.
    """
    dtype = params["head.weight"].dtype
    raw, tape = forward(normalize_pixels(patch, dtype), params, cfg)
    bits, draw = mixture_nll(raw, patch, cfg.channels, cfg.mixtures, need_grad)
    total = float(bits.sum())
    if not need_grad:
        return total
    return total, backward(draw, tape, params, cfg)


def position_bits(patch: np.ndarray, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Per-position, per-channel code length in bits, shape ``(..., H, W, C)``."""
    raw, _ = forward(normalize_pixels(patch, params["head.weight"].dtype), params, cfg)
    return mixture_nll(raw, patch, cfg.channels, cfg.mixtures, need_grad=False)[0]
