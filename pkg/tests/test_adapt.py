import numpy as np
import pytest

import gradcases
import oracles
from callic import adapt as ad
from callic.coding import decode_weights, encode_weights, weight_bits
from callic.errors import ConfigError, NumericFault
from callic.model import (MASK_A, ModelConfig, build_mask, embed_mask, forward, init_params,
                          normalize_pixels, param_count, patch_nll)

from conftest import TINY, TOY

SMALL = ad.AdapterConfig(rank=2, conv_rank=2, steps=4, lr=1e-2)


# --- configuration ------------------------------------------------------------------

def test_config_validation():
    for bad in (dict(rank=0), dict(conv_rank=0), dict(b=0.0), dict(b=1.5), dict(d=1.0),
                dict(d=-0.1), dict(e=0.0), dict(step=0.0), dict(scale=-1.0), dict(steps=-1)):
        with pytest.raises(ConfigError):
            ad.AdapterConfig(**bad)
    with pytest.raises(ConfigError):
        ad.adapter_shapes(TINY, ad.AdapterConfig(conv_rank=4))


def test_default_budget_near_25k():
    n = ad.adapter_count(ModelConfig(), ad.AdapterConfig())
    assert n == 22440
    assert abs(n - 25_000) <= 0.3 * 25_000
    # per block: two m x r + r x m pairs, m x r + r x 4m, then m x rc + 2 k x rc
    per_block = 2 * (32 * 6 * 2) + (32 * 6 + 6 * 128) + (32 * 4 + 2 * 5 * 4)
    assert ad.adapter_count(TOY, ad.AdapterConfig()) == 2 * per_block == 3792


def test_digest_tracks_structure_only():
    base = ad.AdapterConfig()
    assert ad.AdapterConfig(steps=3, lr=0.5, seed=9).digest() == base.digest()
    assert ad.AdapterConfig(rank=5).digest() != base.digest()
    assert ad.AdapterConfig(trainable_core=True).digest() != base.digest()


def test_flatten_roundtrip():
    phi = ad.init_increments(TOY, SMALL)
    back = ad.unflatten(ad.flatten(phi), TOY, SMALL)
    assert all(np.array_equal(back[k], phi[k]) for k in phi)
    with pytest.raises(ConfigError):
        ad.unflatten(np.zeros(3), TOY, SMALL)


# --- low-rank and Tucker increments -------------------------------------------------------

def test_lora_examples():
    A, B = np.array([[1.0], [2.0]]), np.array([[3.0, 4.0]])
    assert ad.lora_delta(A, B).tolist() == [[3, 4], [6, 8]]
    W = np.arange(4.0).reshape(2, 2)
    assert np.array_equal(ad.merge_linear(W, A, np.zeros((1, 2))), W)
    with pytest.raises(ConfigError):
        ad.lora_delta(np.ones((2, 2)), np.ones((3, 2)))


def test_tucker_rank_one_hand_check():
    A = np.array([[2.0], [-1.0]])
    C = np.array([[1.0], [0.0], [3.0]])
    D = np.array([[0.5], [1.0], [-2.0]])
    delta = ad.tucker_delta(None, A, C, D)
    assert delta.shape == (2, 1, 3, 3)
    for o in range(2):
        for p in range(3):
            for q in range(3):
                assert delta[o, 0, p, q] == A[o, 0] * C[p, 0] * D[q, 0]
    assert np.array_equal(ad.tucker_delta(np.ones((1, 1, 1, 1)), A, C, D), delta)


def test_tucker_identity_core_matches_cp(rng):
    A, C, D = rng.normal(size=(4, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert np.allclose(ad.tucker_delta(ad.identity_core(3, np.float64), A, C, D),
                       ad.tucker_delta(None, A, C, D), atol=1e-12)
    assert not np.any(ad.tucker_delta(np.zeros((3, 1, 3, 3)), A, C, D))


def test_tucker_rank_above_kernel():
    with pytest.raises(ConfigError):
        ad.tucker_delta(None, np.ones((2, 4)), np.ones((3, 4)), np.ones((3, 4)))


def test_merged_kernel_is_remasked(rng):
    mask = build_mask(5, MASK_A)
    W = rng.normal(size=(3, 1, 5, 5)) * mask
    delta = rng.normal(size=(3, 1, 5, 5))
    merged = ad.merge_dwconv(W, delta, mask)
    assert not np.any(merged[:, :, ~mask])
    assert np.array_equal(ad.merge_dwconv(W, np.zeros_like(W), mask), W)


def test_tucker_gradient():
    assert gradcases.worst_error("tucker", 20, seed=4) <= 1e-3


# --- quantization --------------------------------------------------------------------------

def test_ste_examples():
    assert ad.ste_quantize(np.array([0.12]), 0.05)[0] == pytest.approx(0.10, abs=1e-15)
    assert ad.ste_quantize(np.array([0.0]), 0.05)[0] == 0.0
    halves = np.array([0.5, -0.5, 1.5, -2.5])
    assert ad.round_half_away(halves).tolist() == [1.0, -1.0, 2.0, -3.0]
    assert ad.quantize_bins(np.array([0.12, -0.13, 0.0]), 0.05).tolist() == [2, -3, 0]


def test_quantize_and_dequantize_agree_with_ste(rng):
    phi = rng.normal(0, 0.2, 500).astype(np.float32)
    assert np.array_equal(ad.dequantize(ad.quantize_bins(phi, 0.05), 0.05),
                          ad.ste_quantize(phi, 0.05))


def test_noise_moments_and_seed():
    phi = np.zeros(100_000)
    w = 0.05
    u = ad.noisy_quantize(phi, w, np.random.default_rng(3)) - phi
    assert abs(u.mean()) <= 3 * w / np.sqrt(12 * 100_000)
    assert u.min() >= -w / 2 and u.max() < w / 2
    again = ad.noisy_quantize(phi, w, np.random.default_rng(3)) - phi
    assert np.array_equal(u, again)
    tiny = ad.noisy_quantize(np.ones(10), 1e-300, np.random.default_rng(0))
    assert np.array_equal(tiny, np.ones(10))


def test_logistic_bits_at_zero():
    bits, grad = ad.logistic_bits(np.zeros(3), 0.05, 0.05)
    assert np.allclose(bits, 2.0, atol=1e-12)
    assert not np.any(grad)


def test_logistic_bits_gradient():
    assert gradcases.worst_error("logistic_bits", 50, seed=5) <= 1e-3


def test_continuous_surrogate_tracks_discrete_pmf():
    k = np.arange(-10, 11)
    surrogate, _ = ad.logistic_bits(k * 0.05, 0.05, 0.05)
    exact = np.array([weight_bits([int(i)]) for i in k])
    # bin averaging adds (w/s)^2 / 24 nats at most, reached in the tails
    bound = (0.05 / 0.05) ** 2 / (24 * np.log(2))
    assert np.abs(surrogate - exact).max() <= bound


# --- schedule and ordering -----------------------------------------------------------------

def test_schedule_examples():
    assert ad.schedule_ratio(0, 50, 0.2, 0.1, 1.0) == pytest.approx(0.2)
    assert ad.schedule_ratio(22.5, 50, 0.2, 0.1, 1.0) == pytest.approx(0.6, abs=1e-12)
    for t in (45, 46, 50):
        assert ad.schedule_ratio(t, 50, 0.2, 0.1, 1.0) == 1.0
    with pytest.raises(ConfigError):
        ad.schedule_ratio(1, 50, 0.2, 1.0, 1.0)


@pytest.mark.parametrize("e", [0.1, 0.3, 1.0])
def test_schedule_matches_oracle_and_is_monotone(e):
    values = [ad.schedule_ratio(t, 50, 0.2, 0.1, e) for t in np.linspace(0, 50, 201)]
    want = [oracles.smoothstep_schedule(t, 50, 0.2, 0.1, e) for t in np.linspace(0, 50, 201)]
    assert np.allclose(values, want, atol=1e-12)
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[0] == pytest.approx(0.2) and values[-1] == 1.0


def test_selected_counts_non_decreasing():
    for n in (1, 5, 7, 16):
        counts = [ad.selected_count(ad.schedule_ratio(t, 50, 0.2, 0.1, 1.0), n)
                  for t in range(51)]
        assert all(b >= a for a, b in zip(counts, counts[1:]))
        assert counts[-1] == n and counts[0] == max(1, -(-n // 5))


def test_rank_patches_examples():
    assert ad.rank_patches([1.0, 3.0, 2.0]) == [1, 2, 0]
    assert ad.rank_patches([2.0] * 4) == [0, 1, 2, 3]


def test_noise_patch_ranks_first(toy_model, rng):
    noise = rng.integers(0, 256, (16, 16, 3))
    flat = np.full((16, 16, 3), 90)
    _, rates = ad.patch_rates([flat, noise], toy_model.params, toy_model.cfg)
    assert ad.rank_patches(rates) == [1, 0]


# --- MDL objective ---------------------------------------------------------------------------

def _zero_phi(cfg, acfg):
    return {k: np.zeros(s, np.float32) for k, s in ad.adapter_shapes(cfg, acfg).items()}


def test_mdl_loss_at_zero(rng):
    params = init_params(TOY, 2)
    patches = [rng.integers(0, 256, (6, 6, 3)) for _ in range(3)]
    terms = ad.mdl_loss(_zero_phi(TOY, SMALL), params, TOY, SMALL, patches, need_grad=False)
    count = ad.adapter_count(TOY, SMALL)
    assert terms.weight_bits == pytest.approx(2.0 * count, rel=1e-9)
    assert terms.pixel_bits == pytest.approx(sum(patch_nll(p, params, TOY) for p in patches),
                                             rel=1e-6)
    assert terms.total == terms.weight_bits + terms.pixel_bits


def test_mdl_loss_selected_subset(rng):
    params = init_params(TOY, 2)
    patches = [rng.integers(0, 256, (6, 6, 3)) for _ in range(3)]
    phi = _zero_phi(TOY, SMALL)
    part = ad.mdl_loss(phi, params, TOY, SMALL, patches, [2, 0], need_grad=False)
    want = patch_nll(patches[0], params, TOY) + patch_nll(patches[2], params, TOY)
    assert part.pixel_bits == pytest.approx(want, rel=1e-6)


def test_mdl_loss_gradient():
    assert gradcases.worst_error("mdl_loss", 10, seed=6) <= 1e-2


def test_adapters_receive_gradient(rng):
    params = init_params(TOY, 2)
    patches = [rng.integers(0, 256, (8, 8, 3))]
    phi = ad.init_increments(TOY, ad.AdapterConfig())
    terms = ad.mdl_loss(phi, params, TOY, ad.AdapterConfig(), patches)
    # the zero factors are where the pixel term first pushes
    assert any(np.any(g) for k, g in terms.grads.items() if k.endswith(".B"))
    assert any(np.any(g) for k, g in terms.grads.items() if k.endswith("dw.C"))


# --- merging ------------------------------------------------------------------------------

def _random_increments(rng, cfg, acfg, scale=0.05):
    return {k: rng.normal(0, scale, s) for k, s in ad.adapter_shapes(cfg, acfg).items()}


def test_merge_equivalence(rng):
    acfg = ad.AdapterConfig(rank=3, conv_rank=2)
    for seed in range(3):
        params = {k: v.astype(np.float64) for k, v in init_params(TOY, seed).items()}
        inc = _random_increments(rng, TOY, acfg)
        x = normalize_pixels(rng.integers(0, 256, (6, 6, 3)), np.float64)
        merged = ad.merge_weights(params, inc, TOY, acfg)
        got, _ = forward(x, merged, TOY)
        want = oracles.composed_forward(x, params, inc, TOY, embed_mask(),
                                        build_mask(TOY.kernel, MASK_A))
        assert np.abs(got - want).max() <= 1e-5


def test_zero_merge_is_bitwise_identity():
    params = init_params(TOY, 1)
    acfg = ad.AdapterConfig()
    zero = ad.merge_all(params, np.zeros(ad.adapter_count(TOY, acfg), np.int64), TOY, acfg)
    assert all(zero[k].tobytes() == params[k].tobytes() for k in params)
    phi = ad.init_increments(TOY, acfg)  # B and C are zero, A and D are not
    via_phi = ad.merge_weights(params, phi, TOY, acfg)
    assert all(via_phi[k].tobytes() == params[k].tobytes() for k in params)


def test_merge_keeps_shapes_and_count(rng):
    params = init_params(TOY, 1)
    acfg = ad.AdapterConfig()
    bins = rng.integers(-3, 4, ad.adapter_count(TOY, acfg))
    merged = ad.merge_all(params, bins, TOY, acfg)
    assert {k: v.shape for k, v in merged.items()} == {k: v.shape for k, v in params.items()}
    assert sum(v.size for v in merged.values()) == param_count(TOY)
    assert not np.any(merged["blocks.0.dw.weight"][:, :, ~build_mask(TOY.kernel, MASK_A)])
    with pytest.raises(ConfigError):
        ad.merge_all(params, bins[:-1], TOY, acfg)


def test_encoder_and_decoder_merges_are_bitwise_equal(rng):
    params = init_params(TOY, 1)
    acfg = ad.AdapterConfig()
    bins = rng.integers(-6, 7, ad.adapter_count(TOY, acfg))
    decoded = decode_weights(encode_weights(bins, acfg.prior), bins.size, acfg.prior)
    enc = ad.merge_all(params, bins, TOY, acfg)
    dec = ad.merge_all(params, decoded, TOY, acfg)
    assert all(enc[k].tobytes() == dec[k].tobytes() for k in params)


# --- fine-tuning loop --------------------------------------------------------------------------

def _image(rng, size=12):
    return rng.integers(0, 256, (size, size, 3)).astype(np.uint8)


def test_zero_steps_gives_zero_increments(rng):
    params = init_params(TINY, 0)
    image = _image(rng)
    res = ad.rpft_finetune(image, params, TINY, ad.AdapterConfig(rank=2, conv_rank=2, steps=0), P=6)
    assert not np.any(res.bins)
    assert res.pixel_bits == res.baseline_bits
    assert res.weight_bits == pytest.approx(weight_bits(res.bins))
    assert res.evaluations == 0 and res.records == []


def test_schedule_trace_and_final_consistency(rng):
    params = init_params(TINY, 0)
    image = _image(rng)
    acfg = ad.AdapterConfig(rank=2, conv_rank=2, steps=6, lr=5e-2)
    seen = []
    res = ad.rpft_finetune(image, params, TINY, acfg, P=4, on_step=seen.append)
    n = 9
    want = [ad.selected_count(ad.schedule_ratio(t, 6, 0.2, 0.1, 1.0), n) for t in range(7)]
    assert [r["selected"] for r in res.records] == want
    assert seen == res.records
    assert res.evaluations == sum(want[:-1])
    assert res.records[-1]["selected"] == n
    # the exported bins reproduce the final evaluation exactly
    merged = ad.merge_all(params, res.bins, TINY, acfg)
    patches = ad.split_patches(image, 4)
    assert res.pixel_bits == pytest.approx(sum(patch_nll(p, merged, TINY) for p in patches),
                                           rel=1e-9)
    assert res.total_bits == res.weight_bits + res.pixel_bits


def test_seeded_determinism(rng):
    params = init_params(TINY, 0)
    image = _image(rng)
    a = ad.rpft_finetune(image, params, TINY, SMALL, P=6)
    b = ad.rpft_finetune(image, params, TINY, SMALL, P=6)
    assert np.array_equal(a.bins, b.bins) and a.records == b.records


def test_numeric_fault_falls_back(rng, monkeypatch):
    params = init_params(TINY, 0)
    real = ad.mdl_loss
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 3:
            raise NumericFault("synthetic")
        return real(*args, **kwargs)

    monkeypatch.setattr(ad, "mdl_loss", flaky)
    res = ad.rpft_finetune(_image(rng), params, TINY, SMALL, P=6)
    assert res.fallback and "step 2" in res.fallback
    assert not np.any(res.bins) and res.pixel_bits == res.baseline_bits


def test_grayscale_adaptation(rng):
    cfg = ModelConfig(depth=1, dim=8, kernel=3, mixtures=2, channels=1)
    params = init_params(cfg, 0)
    image = rng.integers(0, 256, (8, 8)).astype(np.uint8)
    res = ad.rpft_finetune(image, params, cfg, SMALL, P=4)
    assert res.bins.size == ad.adapter_count(cfg, SMALL)
