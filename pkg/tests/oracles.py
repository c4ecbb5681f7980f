"""Independent reference implementations used as test oracles.

Written with scalar loops and the ``math`` module only, so they share no
code path with the vectorized library.
"""

import math

import numpy as np


def logistic(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def pixel_pmf(logits, means, log_scales, symbol_context=None, coeffs=None, channel=0):
    """pmf over 256 symbols of one channel at one position.

    ``logits`` (K,), ``means``/``log_scales`` (C, K), ``coeffs`` (3, K)
    before tanh, ``symbol_context`` integer values of earlier channels.
    """
    K = len(logits)
    mx = max(logits)
    w = [math.exp(v - mx) for v in logits]
    tot = sum(w)
    pi = [v / tot for v in w]
    ctx = [2.0 * v / 255.0 - 1.0 for v in (symbol_context or [])]
    out = []
    for x in range(256):
        xn = 2.0 * x / 255.0 - 1.0
        p = 0.0
        for k in range(K):
            mu = means[channel][k]
            if channel == 1:
                mu += math.tanh(coeffs[0][k]) * ctx[0]
            elif channel == 2:
                mu += math.tanh(coeffs[1][k]) * ctx[0] + math.tanh(coeffs[2][k]) * ctx[1]
            s = math.exp(max(log_scales[channel][k], -7.0))
            hi = 1.0 if x == 255 else logistic((xn + 1 / 255 - mu) / s)
            lo = 0.0 if x == 0 else logistic((xn - 1 / 255 - mu) / s)
            p += pi[k] * (hi - lo)
        out.append(p)
    return out


def masked_dwconv(x, kernel, mask):
    H, W, C = x.shape
    k = kernel.shape[-1]
    r = k // 2
    y = np.zeros_like(x)
    for i in range(H):
        for j in range(W):
            for c in range(C):
                acc = 0.0
                for a in range(k):
                    for b in range(k):
                        ii, jj = i + a - r, j + b - r
                        if mask[a, b] and 0 <= ii < H and 0 <= jj < W:
                            acc += kernel[c, 0, a, b] * x[ii, jj, c]
                y[i, j, c] = acc
    return y


def masked_conv(x, kernel, bias, mask):
    H, W, _ = x.shape
    C_out, C_in, k, _ = kernel.shape
    r = k // 2
    y = np.zeros((H, W, C_out))
    for i in range(H):
        for j in range(W):
            for o in range(C_out):
                acc = bias[o]
                for c in range(C_in):
                    for a in range(k):
                        for b in range(k):
                            ii, jj = i + a - r, j + b - r
                            if mask[a, b] and 0 <= ii < H and 0 <= jj < W:
                                acc += kernel[o, c, a, b] * x[ii, jj, c]
                y[i, j, o] = acc
    return y


def scan_groups(H, W):
    """Brute-force group lists indexed by 2i + j; a single column leaves odd groups empty."""
    cells = sorted(((2 * i + j, i, j) for i in range(H) for j in range(W)))
    groups = {}
    for g, i, j in cells:
        groups.setdefault(g, []).append((i, j))
    return [groups.get(g, []) for g in range(max(groups) + 1)]


def weight_pmf(k, w=0.05, s=0.05, k_max=255):
    hi = 1.0 if k == k_max else logistic((k * w + w / 2) / s)
    lo = 0.0 if k == -k_max else logistic((k * w - w / 2) / s)
    return hi - lo


def entropy_bits(pmf, counts):
    return -sum(c * math.log2(pmf[i]) for i, c in enumerate(counts) if c)


def smoothstep_schedule(t, T, b, d, e):
    x = t / (T * (1 - d))
    x = min(max(x, 0.0), 1.0)
    return b + (1 - b) * (x * x * (3 - 2 * x)) ** e


def _layer_norm(x, scale, offset, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + offset


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def composed_forward(x, params, increments, cfg, embed_mask, mask_a):
    """Raw head output with adapters applied beside the frozen weights, never merged.

    Linear layers compute ``x W + (x A) B``; the depth-wise conv adds a second
    convolution with the masked Tucker kernel ``sum_t A[o,t] C[p,t] D[q,t]``.
    """
    p, inc = params, increments
    h = masked_conv(x, p["embed.weight"], p["embed.bias"], embed_mask)
    for i in range(cfg.depth):
        q = f"blocks.{i}."

        def lin(v, layer):
            out = v @ p[q + layer + ".weight"] + p[q + layer + ".bias"]
            if layer in ("wa", "wv", "up"):
                out = out + (v @ inc[q + layer + ".A"]) @ inc[q + layer + ".B"]
            return out

        a = _layer_norm(h, p[q + "norm1.scale"], p[q + "norm1.offset"])
        A, V = lin(a, "wa"), lin(a, "wv")
        delta = np.einsum("ot,pt,qt->opq", inc[q + "dw.A"], inc[q + "dw.C"],
                          inc[q + "dw.D"])[:, None]
        AM = masked_dwconv(A, p[q + "dw.weight"], mask_a) + masked_dwconv(A, delta, mask_a)
        y = AM / (1 + np.exp(-AM)) * V
        if cfg.out_proj:
            y = lin(y, "proj")
        h = h + y
        b = _layer_norm(h, p[q + "norm2.scale"], p[q + "norm2.offset"])
        h = h + lin(_gelu(lin(b, "up")), "down")
    return h @ p["head.weight"] + p["head.bias"]
