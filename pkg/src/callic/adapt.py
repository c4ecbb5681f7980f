"""Per-image adaptation of a frozen model with quantized low-rank increments.

Adapted layers per block: the gate and value projections, the first MLP
layer (``W + A B``) and the masked depth-wise kernel
(``M * (W + I x1 A x3 C x4 D)`` with a superdiagonal identity core).

The increments are trained under a two-part code length: the bits of the
quantized increments under a static logistic prior plus the bits of the
pixels under the adapted model.  Patches join the training set in order of
decreasing rate, following a smoothstep schedule.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .cci import tile_grid
from .coding import WeightPrior, clamp_bins, weight_bits
from .errors import ConfigError, NumericFault
from .model import MASK_A, ModelConfig, build_mask, patch_nll

log = logging.getLogger(__name__)
_LN2 = math.log(2.0)


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 6
    conv_rank: int = 4
    step: float = 0.05  # quantization width w
    scale: float = 0.05  # prior scale s
    steps: int = 50  # T
    lr: float = 1e-2
    b: float = 0.2
    d: float = 0.1
    e: float = 1.0
    seed: int = 0
    trainable_core: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank < 1 or self.conv_rank < 1:
            raise ConfigError("ranks must be >= 1")
        if not 0 < self.b <= 1:
            raise ConfigError(f"b must be in (0, 1], got {self.b}")
        if not 0 <= self.d < 1:
            raise ConfigError(f"d must be in [0, 1), got {self.d}")
        if self.e <= 0 or self.step <= 0 or self.scale <= 0:
            raise ConfigError("e, step and scale must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")

    @property
    def prior(self) -> WeightPrior:
        return WeightPrior(scale=self.scale, step=self.step)

    def check(self, cfg: ModelConfig):
        if self.conv_rank > cfg.kernel:
            raise ConfigError(f"conv rank {self.conv_rank} exceeds kernel size {cfg.kernel}")

    def digest(self) -> bytes:
        """Identity of everything the decoder needs to rebuild the increments."""
        fields = {k: getattr(self, k) for k in ("rank", "conv_rank", "step", "scale",
                                                "trainable_core")}
        blob = json.dumps(fields, sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:8]


# ---------------------------------------------------------------------------
# increment structure
# ---------------------------------------------------------------------------

def adapter_shapes(cfg: ModelConfig, acfg: AdapterConfig) -> dict[str, tuple[int, ...]]:
    acfg.check(cfg)
    m, h, k, r, rc = cfg.dim, cfg.hidden, cfg.kernel, acfg.rank, acfg.conv_rank
    shapes = {}
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "wa.A": (m, r), p + "wa.B": (r, m),
            p + "wv.A": (m, r), p + "wv.B": (r, m),
            p + "up.A": (m, r), p + "up.B": (r, h),
            p + "dw.A": (m, rc), p + "dw.C": (k, rc), p + "dw.D": (k, rc),
        })
        if acfg.trainable_core:
            shapes[p + "dw.core"] = (rc, 1, rc, rc)
    return shapes


def adapter_count(cfg: ModelConfig, acfg: AdapterConfig) -> int:
    return sum(int(np.prod(s)) for s in adapter_shapes(cfg, acfg).values())


def identity_core(rc: int, dtype=np.float32) -> np.ndarray:
    core = np.zeros((rc, 1, rc, rc), dtype)
    core[np.arange(rc), 0, np.arange(rc), np.arange(rc)] = 1
    return core


def init_increments(cfg: ModelConfig, acfg: AdapterConfig, rng=None) -> dict[str, np.ndarray]:
    """Zero-delta start: ``B`` and ``C`` are zero, ``A`` and ``D`` small normals."""
    rng = np.random.default_rng(acfg.seed) if rng is None else rng
    phi = {}
    for name, shape in adapter_shapes(cfg, acfg).items():
        if name.endswith(("wa.A", "wv.A", "up.A", "dw.A", "dw.D")):
            phi[name] = rng.normal(0.0, acfg.init_std, shape).astype(np.float32)
        elif name.endswith("dw.core"):
            phi[name] = identity_core(shape[0])
        else:
            phi[name] = np.zeros(shape, np.float32)
    return phi


def flatten(phi: dict) -> np.ndarray:
    return np.concatenate([v.ravel() for v in phi.values()]) if phi else np.zeros(0)


def unflatten(flat: np.ndarray, cfg: ModelConfig, acfg: AdapterConfig) -> dict:
    shapes = adapter_shapes(cfg, acfg)
    total = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != total:
        raise ConfigError(f"expected {total} incremental weights, got {flat.size}")
    out, pos = {}, 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        out[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    return out


# ---------------------------------------------------------------------------
# low-rank and Tucker increments
# ---------------------------------------------------------------------------

def lora_delta(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if A.shape[1] != B.shape[0]:
        raise ConfigError(f"rank mismatch: A{A.shape} B{B.shape}")
    return A @ B


def merge_linear(W: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return W + lora_delta(A, B)


def tucker_delta(core, A, C, D) -> np.ndarray:
    """``core x1 A x3 C x4 D`` -> ``(m, 1, k, k)``; ``core=None`` means identity."""
    if C.shape[0] < C.shape[1] or D.shape[0] < D.shape[1]:
        raise ConfigError(f"conv rank {C.shape[1]} exceeds kernel size {C.shape[0]}")
    if core is None:
        delta = np.einsum("ot,pt,qt->opq", A, C, D)
    else:
        delta = np.einsum("atbc,oa,pb,qc->opq", core, A, C, D)
    return delta[:, None].astype(A.dtype, copy=False)


def tucker_backward(G, core, A, C, D):
    """Gradients of ``sum(G * tucker_delta(...))`` -> ``(dcore, dA, dC, dD)``."""
    g = G[:, 0]
    if core is None:
        dA = np.einsum("opq,pt,qt->ot", g, C, D)
        dC = np.einsum("opq,ot,qt->pt", g, A, D)
        dD = np.einsum("opq,ot,pt->qt", g, A, C)
        return None, dA, dC, dD
    c = core[:, 0]
    dcore = np.einsum("opq,oa,pb,qc->abc", g, A, C, D)[:, None]
    dA = np.einsum("opq,abc,pb,qc->oa", g, c, C, D)
    dC = np.einsum("opq,abc,oa,qc->pb", g, c, A, D)
    dD = np.einsum("opq,abc,oa,pb->qc", g, c, A, C)
    return dcore, dA, dC, dD


def merge_dwconv(W: np.ndarray, delta: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return (W + delta) * mask


def merge_weights(params: dict, phi_hat: dict, cfg: ModelConfig, acfg: AdapterConfig) -> dict:
    """Pretrained weights with (already quantized) increments folded in.

    Layers whose increment is exactly zero are returned untouched, so a
    zero increment reproduces the pretrained weights bit for bit.
    """
    merged = dict(params)
    mask = build_mask(cfg.kernel, MASK_A)
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        for layer in ("wa", "wv", "up"):
            delta = lora_delta(phi_hat[p + layer + ".A"], phi_hat[p + layer + ".B"])
            if np.any(delta):
                merged[p + layer + ".weight"] = params[p + layer + ".weight"] + delta
        delta = tucker_delta(phi_hat.get(p + "dw.core"), phi_hat[p + "dw.A"],
                             phi_hat[p + "dw.C"], phi_hat[p + "dw.D"])
        if np.any(delta * mask):
            merged[p + "dw.weight"] = merge_dwconv(params[p + "dw.weight"], delta, mask)
    return merged


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + x.dtype.type(0.5))


def ste_quantize(phi: np.ndarray, w: float) -> np.ndarray:
    """Forward value ``round(phi / w) * w``; the backward pass treats it as identity."""
    w = phi.dtype.type(w)
    return round_half_away(phi / w) * w


def quantize_bins(phi: np.ndarray, w: float) -> np.ndarray:
    return round_half_away(phi / phi.dtype.type(w)).astype(np.int64)


def dequantize(bins, w: float, dtype=np.float32) -> np.ndarray:
    return np.asarray(bins).astype(dtype) * np.dtype(dtype).type(w)


def noisy_quantize(phi: np.ndarray, w: float, rng: np.random.Generator) -> np.ndarray:
    """``phi + u`` with ``u`` iid uniform on ``[-w/2, w/2)``."""
    u = rng.uniform(-w / 2, w / 2, size=phi.shape)
    return (phi + u).astype(phi.dtype, copy=False)


def logistic_bits(x: np.ndarray, w: float, s: float):
    """``-log2(w * logistic_pdf(x; 0, s))`` per entry and its derivative."""
    z = np.asarray(x, dtype=np.float64) / s
    nats = -math.log(w / s) + np.logaddexp(0.0, -z) + np.logaddexp(0.0, z)
    return nats / _LN2, np.tanh(z / 2) / (s * _LN2)


# ---------------------------------------------------------------------------
# schedule and patch ranking
# ---------------------------------------------------------------------------

def smoothstep(x: float) -> float:
    if x < 0:
        return 0.0
    if x > 1:
        return 1.0
    return x * x * (3.0 - 2.0 * x)


def schedule_ratio(t: float, T: int, b: float, d: float, e: float) -> float:
    """Fraction of patches used at step ``t``: ``b + (1 - b) * s(t')**e``."""
    if not 0 <= d < 1:
        raise ConfigError(f"d must be in [0, 1), got {d}")
    if T <= 0:
        return 1.0
    tp = t / (T * (1.0 - d))
    return b + (1.0 - b) * smoothstep(tp) ** e


def selected_count(ratio: float, n: int) -> int:
    # tolerance keeps e.g. 0.2 * 5 from rounding up to 2
    return min(n, max(1, math.ceil(ratio * n - 1e-9)))


def rank_patches(rates) -> list[int]:
    """Patch indices by descending rate, ties by ascending index."""
    return sorted(range(len(rates)), key=lambda i: (-rates[i], i))


def split_patches(image: np.ndarray, P: int):
    return [image[y:y + h, x:x + w] for y, x, h, w in tile_grid(image.shape[0], image.shape[1], P)]


def patch_rates(patches, params, cfg) -> tuple[list[float], list[float]]:
    """``(bits, bpsp)`` of every patch under the given weights."""
    bits = [patch_nll(p, params, cfg) for p in patches]
    return bits, [b / p.size for b, p in zip(bits, patches)]


# ---------------------------------------------------------------------------
# MDL objective
# ---------------------------------------------------------------------------

@dataclass
class MDLTerms:
    total: float
    weight_bits: float
    pixel_bits: float
    grads: dict | None = None


def _batches(patches, indices):
    """Group same-shape patches into stacked batches, ascending index order."""
    by_shape: dict = {}
    for i in sorted(indices):
        by_shape.setdefault(patches[i].shape, []).append(i)
    return [np.stack([patches[i] for i in idx]) for idx in by_shape.values()]


def mdl_loss(phi: dict, params: dict, cfg: ModelConfig, acfg: AdapterConfig,
             patches, indices=None, rng=None, need_grad=True) -> MDLTerms:
    """Two-part code length of the selected patches and the increments.

    The network term uses STE-quantized increments; the prior term uses the
    increments plus uniform noise (no noise when ``rng`` is None).
    """
    indices = range(len(patches)) if indices is None else indices
    w, s = acfg.step, acfg.scale
    phi_hat = {k: ste_quantize(v, w) for k, v in phi.items()}
    merged = merge_weights(params, phi_hat, cfg, acfg)

    pixel_bits = 0.0
    pgrads = None
    for batch in _batches(patches, indices):
        if need_grad:
            bits, g = patch_nll(batch, merged, cfg, need_grad=True)
            pgrads = g if pgrads is None else {k: pgrads[k] + g[k] for k in g}
        else:
            bits = patch_nll(batch, merged, cfg)
        pixel_bits += bits

    flat = flatten(phi)
    noisy = noisy_quantize(flat, w, rng) if rng is not None else flat
    wbits, wgrad = logistic_bits(noisy, w, s)
    weight_total = float(wbits.sum())
    total = weight_total + pixel_bits
    if not math.isfinite(total):
        raise NumericFault("MDL loss is not finite")
    if not need_grad:
        return MDLTerms(total, weight_total, pixel_bits)

    grads = {}
    full = phi_hat
    mask = build_mask(cfg.kernel, MASK_A)
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        for layer in ("wa", "wv", "up"):
            gW = pgrads[p + layer + ".weight"]
            grads[p + layer + ".A"] = gW @ full[p + layer + ".B"].T
            grads[p + layer + ".B"] = full[p + layer + ".A"].T @ gW
        gK = pgrads[p + "dw.weight"] * mask
        core = full.get(p + "dw.core")
        dcore, dA, dC, dD = tucker_backward(gK, core, full[p + "dw.A"], full[p + "dw.C"],
                                            full[p + "dw.D"])
        grads[p + "dw.A"], grads[p + "dw.C"], grads[p + "dw.D"] = dA, dC, dD
        if acfg.trainable_core:
            grads[p + "dw.core"] = dcore
    wg = unflatten(wgrad, cfg, acfg)
    grads = {k: (grads[k] + wg[k]).astype(phi[k].dtype) for k in phi}
    return MDLTerms(total, weight_total, pixel_bits, grads)


# ---------------------------------------------------------------------------
# fine-tuning loop
# ---------------------------------------------------------------------------

@dataclass
class AdaptResult:
    bins: np.ndarray  # flat integer bins in declaration order
    baseline_bits: float  # pixel bits of the pretrained model
    weight_bits: float  # exact discrete prior code length of ``bins``
    pixel_bits: float  # model NLL with the merged, quantized increments
    records: list = field(default_factory=list)
    evaluations: int = 0  # patch forward/backward passes used for gradients
    fallback: str | None = None

    @property
    def total_bits(self) -> float:
        return self.weight_bits + self.pixel_bits


def rpft_finetune(image: np.ndarray, params: dict, cfg: ModelConfig, acfg: AdapterConfig,
                  P: int = 64, on_step=None) -> AdaptResult:
    """Fine-tune increments for one image with the rate-guided progressive schedule.

    Runs ``T`` Adam steps and one final evaluation at step ``T``; the
    increments of that final evaluation are the ones exported.
    """
    if image.ndim == 2:
        image = image[..., None]
    patches = split_patches(image, P)
    n = len(patches)
    base_bits, rates = patch_rates(patches, params, cfg)
    order = rank_patches(rates)
    baseline = float(sum(base_bits))
    count = adapter_count(cfg, acfg)

    def zero_result(reason):
        bins = np.zeros(count, np.int64)
        return AdaptResult(bins, baseline, weight_bits(bins, acfg.prior), baseline,
                           records, evaluations, reason)

    rng = np.random.default_rng(acfg.seed)
    phi = init_increments(cfg, acfg, rng)
    state = nx.AdamState.for_params(phi)
    records: list[dict] = []
    evaluations = 0
    if acfg.steps == 0:
        return zero_result(None)

    T = acfg.steps
    for t in range(T + 1):
        k = selected_count(schedule_ratio(t, T, acfg.b, acfg.d, acfg.e), n)
        chosen = order[:k]
        final = t == T
        try:
            terms = mdl_loss(phi, params, cfg, acfg, patches, chosen,
                             rng=rng, need_grad=not final)
            if not final:
                evaluations += k
                phi, state = nx.adam_step(phi, terms.grads, state, acfg.lr)
                if not all(np.all(np.isfinite(v)) for v in phi.values()):
                    raise NumericFault("increments became non-finite")
        except NumericFault as exc:
            log.warning("adaptation aborted at step %d: %s", t, exc)
            return zero_result(f"numeric fault at step {t}")
        rec = {"step": t, "selected": k, "weight_bits": terms.weight_bits,
               "pixel_bits": terms.pixel_bits, "total": terms.total}
        records.append(rec)
        if on_step is not None:
            on_step(rec)

    bins = quantize_bins(flatten(phi), acfg.step)
    bins = clamp_bins(bins, acfg.prior)
    return AdaptResult(bins, baseline, weight_bits(bins, acfg.prior),
                       records[-1]["pixel_bits"], records, evaluations)


def merge_all(params: dict, bins, cfg: ModelConfig, acfg: AdapterConfig) -> dict:
    """Fold decoded (or locally produced) integer increments into the weights."""
    bins = np.asarray(bins)
    expected = adapter_count(cfg, acfg)
    if bins.size != expected:
        raise ConfigError(f"expected {expected} incremental weights, got {bins.size}")
    if not np.any(bins):
        return dict(params)
    phi_hat = unflatten(dequantize(bins.ravel(), acfg.step), cfg, acfg)
    return merge_weights(params, phi_hat, cfg, acfg)


def config_dict(acfg: AdapterConfig) -> dict:
    return asdict(acfg)
