import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import gradcases
import oracles
from callic.coding import quantize_cdf
from callic.errors import DimensionError
from callic.mixture import (HALF_BIN, channel_pmf, mixture_nll, mixture_params, n_outputs,
                            normalize)


def _raw_single(mean_pixel, log_scale):
    # grayscale, one component: [logit, mean, log_scale]
    return np.array([0.0, normalize(mean_pixel), log_scale])


def test_single_component_peak_mass():
    mp = mixture_params(_raw_single(100, math.log(0.1)), 1, 1)
    p = channel_pmf(mp, 0)
    expected = 2 * oracles.logistic(HALF_BIN / 0.1) - 1
    assert p[100] == pytest.approx(expected, abs=1e-12)
    assert p[100] == pytest.approx(0.019607, abs=1e-5)


def test_one_hot_logits_select_component(rng):
    K = 3
    raw = rng.normal(size=n_outputs(3, K))
    raw[:K] = [-1e4, 0.0, -1e4]
    mixed = mixture_params(raw, 3, K)
    single = mixture_params(raw.copy(), 3, K)
    ctx = normalize([30, 200, 0])
    for c in range(3):
        only = oracles.pixel_pmf([0.0], single.means[:, 1:2].tolist(),
                                 np.log(np.exp(single.log_scales[:, 1:2])).tolist(),
                                 [30, 200], np.arctanh(single.coeffs[:, 1:2]).tolist(), c)
        assert np.allclose(channel_pmf(mixed, c, ctx), only, atol=1e-12)


def test_upper_tail_is_open():
    mp = mixture_params(_raw_single(0, -5.0), 1, 1)
    p = channel_pmf(mp, 0)
    assert p[255] > 0
    assert p[255] == pytest.approx(1 - oracles.logistic((1 - 1 / 255 - normalize(0))
                                                       / math.exp(-5.0)), abs=1e-15)


def test_matches_scalar_oracle_with_coupling(rng):
    K = 4
    for _ in range(5):
        raw = rng.normal(size=n_outputs(3, K))
        mp = mixture_params(raw, 3, K)
        x = rng.integers(0, 256, 3)
        logits = raw[:K].tolist()
        means = raw[K:4 * K].reshape(3, K).tolist()
        scales = raw[4 * K:7 * K].reshape(3, K).tolist()
        coeffs = raw[7 * K:].reshape(3, K).tolist()
        for c in range(3):
            want = oracles.pixel_pmf(logits, means, scales, x[:c].tolist(), coeffs, c)
            got = channel_pmf(mp, c, normalize(x))
            assert np.allclose(got, want, atol=1e-12)


def _raw(elements):
    return arrays(np.float64, n_outputs(3, 5), elements=elements)


_CTX = st.lists(st.integers(0, 255), min_size=3, max_size=3)


@settings(max_examples=60, deadline=None)
@given(_raw(st.floats(-1e3, 1e3)), _CTX)
def test_coded_distribution_is_positive_for_any_parameters(raw, ctx):
    mp = mixture_params(raw, 3, 5)
    for c in range(3):
        p = channel_pmf(mp, c, normalize(ctx))
        assert abs(p.sum() - 1) <= 1e-5
        assert np.all(np.diff(quantize_cdf(p)) >= 1)


@settings(max_examples=60, deadline=None)
@given(_raw(st.floats(-1, 1)), _CTX)
def test_float_pmf_positive_where_representable(raw, ctx):
    # coupled means stay within +-3 and scales above e^-1, so no bin mass
    # falls below double precision of the CDF it is differenced from
    mp = mixture_params(raw, 3, 5)
    for c in range(3):
        p = channel_pmf(mp, c, normalize(ctx))
        assert np.all(p > 0)


def test_nll_equals_minus_log_pmf(rng):
    K = 3
    raw = rng.normal(size=(7, n_outputs(3, K)))
    x = rng.integers(0, 256, (7, 3))
    x[0] = [0, 255, 0]
    bits, _ = mixture_nll(raw, x, 3, K, need_grad=False)
    mp = mixture_params(raw, 3, K)
    for c in range(3):
        p = channel_pmf(mp, c, normalize(x))
        assert np.allclose(bits[:, c], -np.log2(p[np.arange(7), x[:, c]]), rtol=1e-9)


def test_grayscale_layout():
    assert n_outputs(1, 5) == 15
    assert n_outputs(3, 5) == 50
    with pytest.raises(DimensionError):
        mixture_params(np.zeros(14), 1, 5)


def test_log_scale_floor():
    mp = mixture_params(np.array([0.0, 0.0, -50.0]), 1, 1)
    assert mp.log_scales[0, 0] == -7.0


def test_nll_gradient():
    assert gradcases.worst_error("mixture_nll", 25, seed=2) <= 1e-3
