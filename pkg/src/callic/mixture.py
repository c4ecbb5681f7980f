"""Discretized logistic mixture likelihood over 8-bit sub-pixels.

The network head emits, per position, ``K`` mixture logits and for every
colour channel ``K`` means and ``K`` log-scales; RGB heads additionally
emit three coupling coefficients per component so that the green mean can
depend on red and the blue mean on red and green.

Each channel is coded with its own mixture (shared logits):
``p(x) = prod_c sum_k pi_k * P_ck(x_c | x_<c)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError
from .numerics import _sigmoid

LOG_SCALE_MIN = -7.0
HALF_BIN = 1.0 / 255.0
N_SYMBOLS = 256
_LN2 = np.log(2.0)

# upper bin edges in normalized units, symbols 0..254
_EDGES = (2.0 * np.arange(N_SYMBOLS - 1) + 1.0) / 255.0 - 1.0


def n_outputs(channels: int, mixtures: int) -> int:
    if channels == 3:
        return 10 * mixtures
    if channels == 1:
        return 3 * mixtures
    raise ConfigError(f"channels must be 1 or 3, got {channels}")


def normalize(x) -> np.ndarray:
    """Map integer pixels 0..255 to float64 values in [-1, 1]."""
    return np.asarray(x, dtype=np.float64) * (2.0 / 255.0) - 1.0


@dataclass
class MixtureParams:
    logits: np.ndarray  # (..., K)
    means: np.ndarray  # (..., C, K), before channel coupling
    log_scales: np.ndarray  # (..., C, K), clamped
    coeffs: np.ndarray | None  # (..., 3, K), tanh-squashed; RGB only

    @property
    def channels(self) -> int:
        return self.means.shape[-2]

    def __getitem__(self, idx) -> "MixtureParams":
        return MixtureParams(
            self.logits[idx], self.means[idx], self.log_scales[idx],
            None if self.coeffs is None else self.coeffs[idx],
        )


def _split(raw: np.ndarray, channels: int, mixtures: int):
    K, C = mixtures, channels
    if raw.shape[-1] != n_outputs(C, K):
        raise DimensionError(f"head output has {raw.shape[-1]} channels, expected {n_outputs(C, K)}")
    lead = raw.shape[:-1]
    logits = raw[..., :K]
    means = raw[..., K:K + C * K].reshape(lead + (C, K))
    log_scales = raw[..., K + C * K:K + 2 * C * K].reshape(lead + (C, K))
    coeffs = raw[..., K + 2 * C * K:].reshape(lead + (3, K)) if C == 3 else None
    return logits, means, log_scales, coeffs


def mixture_params(raw: np.ndarray, channels: int, mixtures: int) -> MixtureParams:
    logits, means, log_scales, coeffs = _split(raw, channels, mixtures)
    return MixtureParams(
        logits=logits,
        means=means,
        log_scales=np.maximum(log_scales, LOG_SCALE_MIN),
        coeffs=None if coeffs is None else np.tanh(coeffs),
    )


def coupled_means(mp: MixtureParams, context: np.ndarray) -> np.ndarray:
    """Means after channel coupling; ``context`` holds normalized pixels ``(..., C)``.

    Entries of ``context`` for channels not yet decoded are never read for
    the channels that precede them.
    """
    mu = np.array(mp.means, dtype=np.float64)
    if mp.coeffs is not None:
        c = np.asarray(mp.coeffs, dtype=np.float64)
        xr = context[..., 0:1]
        xg = context[..., 1:2]
        mu[..., 1, :] += c[..., 0, :] * xr
        mu[..., 2, :] += c[..., 1, :] * xr + c[..., 2, :] * xg
    return mu


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def channel_pmf(mp: MixtureParams, channel: int, context: np.ndarray | None = None) -> np.ndarray:
    """Probability of every symbol 0..255 for one channel, shape ``(..., 256)``.

    ``context`` (normalized, ``(..., C)``) supplies already-decoded channels
    at the same positions; it is ignored for channel 0.
    """
    lead = mp.logits.shape[:-1]
    if context is None:
        context = np.zeros(lead + (mp.channels,))
    mu = coupled_means(mp, np.asarray(context, dtype=np.float64))[..., channel, :]
    inv_s = np.exp(-np.asarray(mp.log_scales[..., channel, :], dtype=np.float64))
    pi = np.exp(_log_softmax(np.asarray(mp.logits, dtype=np.float64)))
    z = (_EDGES - mu[..., None]) * inv_s[..., None]  # (..., K, 255)
    cdf = np.einsum("...k,...ke->...e", pi, _sigmoid(z))
    full = np.concatenate([np.zeros(lead + (1,)), cdf, np.ones(lead + (1,))], axis=-1)
    pmf = np.maximum(np.diff(full, axis=-1), 0.0)
    # open tails straight from the logistic, so tiny masses do not cancel to zero
    pmf[..., 0] = np.einsum("...k,...k->...", pi, expit(z[..., 0]))
    pmf[..., -1] = np.einsum("...k,...k->...", pi, expit(-z[..., -1]))
    return pmf


def mixture_pmf(mp: MixtureParams, channel: int, context=None) -> np.ndarray:
    """pmf at a single position; ``mp`` holds one position's parameters."""
    return channel_pmf(mp, channel, context)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def mixture_nll(raw: np.ndarray, x: np.ndarray, channels: int, mixtures: int,
                need_grad: bool = True):
    """Code length in bits of integer pixels ``x`` (..., C) under head output ``raw``.

    Returns ``(bits, draw)`` where ``bits`` has shape ``(..., C)`` and
    ``draw`` is d(sum bits)/d(raw) in raw's dtype (``None`` if not requested).
    """
    C, K = channels, mixtures
    logits, means, ls_raw, craw = _split(raw, C, K)
    logits = np.asarray(logits, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    ls_raw = np.asarray(ls_raw, dtype=np.float64)
    x = np.asarray(x)
    xn = normalize(x)
    ls = np.maximum(ls_raw, LOG_SCALE_MIN)
    mu = means.copy()
    if C == 3:
        c = np.tanh(np.asarray(craw, dtype=np.float64))
        xr, xg = xn[..., 0:1], xn[..., 1:2]
        mu[..., 1, :] += c[..., 0, :] * xr
        mu[..., 2, :] += c[..., 1, :] * xr + c[..., 2, :] * xg

    inv_s = np.exp(-ls)
    centered = xn[..., None] - mu
    a = (centered + HALF_BIN) * inv_s
    b = (centered - HALF_BIN) * inv_s
    u = 2.0 * HALF_BIN * inv_s
    lo = (x == 0)[..., None]
    hi = (x == 255)[..., None]
    mid = ~(lo | hi)

    log_sa = _log_sigmoid(a)
    log_snb = _log_sigmoid(-b)
    log_gap = np.log(-np.expm1(-u))
    log_p = np.where(lo, log_sa, np.where(hi, log_snb, log_sa + log_snb + log_gap))

    log_pi = _log_softmax(logits)[..., None, :]
    joint = log_pi + log_p  # (..., C, K)
    jmax = joint.max(axis=-1, keepdims=True)
    lse = jmax[..., 0] + np.log(np.exp(joint - jmax).sum(axis=-1))
    bits = -lse / _LN2
    if not need_grad:
        return bits, None

    resp = np.exp(joint - lse[..., None])  # posterior over components
    pi = np.exp(log_pi)
    dlogits = (pi - resp).sum(axis=-2) / _LN2

    s_na = _sigmoid(-a)
    s_b = _sigmoid(b)
    dlogp_dmu = np.where(lo, -s_na, np.where(hi, s_b, s_b - s_na)) * inv_s
    gap_term = u / np.expm1(u)
    dlogp_dls = np.where(lo, -a * s_na, np.where(hi, b * s_b,
                                                   -a * s_na + b * s_b - gap_term))
    dmu = -resp * dlogp_dmu / _LN2
    dls = -resp * dlogp_dls / _LN2 * (ls_raw > LOG_SCALE_MIN)

    lead = raw.shape[:-1]
    parts = [dlogits, dmu.reshape(lead + (C * K,)), dls.reshape(lead + (C * K,))]
    if C == 3:
        dc = np.empty(lead + (3, K))
        dc[..., 0, :] = dmu[..., 1, :] * xr
        dc[..., 1, :] = dmu[..., 2, :] * xr
        dc[..., 2, :] = dmu[..., 2, :] * xg
        dc *= 1.0 - c * c
        parts.append(dc.reshape(lead + (3 * K,)))
    draw = np.concatenate(parts, axis=-1).astype(raw.dtype)
    return bits, draw
