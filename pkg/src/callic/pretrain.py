"""Desk-scale pretraining: synthetic corpus, patch extraction, Adam loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import numerics as nx
from .errors import CallicError, ConfigError, NumericFault
from .imageio import list_images, read_image
from .model import ModelConfig, init_params, patch_nll

log = logging.getLogger(__name__)

# texture families of the default training corpus
CORPUS_A = ("gradient", "blurred_noise", "checker")


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 64
    batch_size: int = 32
    lr: float = 5e-4
    max_steps: int = 1000
    seed: int = 0
    data_dir: str | None = None
    val_fraction: float = 0.1
    val_every: int = 100
    synthetic_images: int = 48
    synthetic_size: int = 128

    def __post_init__(self):
        if self.patch_size < 8:
            raise ConfigError(f"patch size must be >= 8, got {self.patch_size}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.max_steps < 0 or self.val_every < 1:
            raise ConfigError("max_steps must be >= 0 and val_every >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("validation fraction must be in [0, 1)")


# ---------------------------------------------------------------------------
# synthetic images
# ---------------------------------------------------------------------------

def _gradient(size, channels, rng):
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    out = np.empty((size, size, channels))
    for c in range(channels):
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        lo, hi = np.sort(rng.uniform(0, 255, 2))
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        out[..., c] = lo + (hi - lo) * ramp
    return out + rng.normal(0, rng.uniform(0, 2), out.shape)


def _blurred_noise(size, channels, rng):
    sigma = rng.uniform(1.0, 6.0)
    base = gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    out = np.empty((size, size, channels))
    for c in range(channels):
        own = gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
        field_ = 0.7 * base + 0.3 * own
        field_ = field_ / max(field_.std(), 1e-9)
        out[..., c] = rng.uniform(60, 190) + rng.uniform(15, 50) * field_
    return out


def _checker(size, channels, rng):
    cell = int(rng.integers(2, 17))
    yy, xx = np.mgrid[0:size, 0:size]
    mask = ((yy // cell + xx // cell) % 2).astype(bool)
    a, b = rng.uniform(0, 255, channels), rng.uniform(0, 255, channels)
    out = np.where(mask[..., None], a, b)
    return out + rng.normal(0, rng.uniform(0, 3), out.shape)


def _stripes(size, channels, rng):
    # oriented sinusoid with fine grain; not part of the training families
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3, 12)
    wave = np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period)
    out = np.empty((size, size, channels))
    for c in range(channels):
        out[..., c] = rng.uniform(90, 160) + rng.uniform(30, 80) * wave
    return out + rng.normal(0, 6, out.shape)


_FAMILIES = {"gradient": _gradient, "blurred_noise": _blurred_noise, "checker": _checker,
             "stripes": _stripes}


def synthetic_image(kind: str, size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    if kind not in _FAMILIES:
        raise ConfigError(f"unknown synthetic family {kind!r}")
    return np.clip(np.rint(_FAMILIES[kind](size, channels, rng)), 0, 255).astype(np.uint8)


def synthetic_corpus(n: int, size: int = 128, channels: int = 3, seed: int = 0,
                     kinds=CORPUS_A) -> list[np.ndarray]:
    """``n`` images cycling through ``kinds``; deterministic for a seed."""
    rng = np.random.default_rng(seed)
    return [synthetic_image(kinds[i % len(kinds)], size, channels, rng) for i in range(n)]


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def extract_patches(image: np.ndarray, P: int) -> list[np.ndarray]:
    """Non-overlapping P x P crops; right and bottom remainders are dropped."""
    if image.ndim == 2:
        image = image[..., None]
    H, W = image.shape[:2]
    if H < P or W < P:
        log.warning("image of %dx%d is smaller than the %d patch size; skipped", W, H, P)
        return []
    return [image[y:y + P, x:x + P] for y in range(0, H - P + 1, P)
            for x in range(0, W - P + 1, P)]


def load_folder(folder, channels: int) -> list[np.ndarray]:
    images = []
    for path in list_images(folder):
        try:
            img = read_image(path)
        except (OSError, CallicError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        if img.shape[-1] != channels:
            log.warning("skipping %s: %d channels, model expects %d",
                        path, img.shape[-1], channels)
            continue
        images.append(img)
    return images


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    best_val_bpsp: float | None = None
    aborted: bool = False


def dataset_bpsp(patches, params, cfg, batch: int = 32) -> float:
    bits = 0.0
    for i in range(0, len(patches), batch):
        bits += patch_nll(np.stack(patches[i:i + batch]), params, cfg)
    return bits / sum(p.size for p in patches)


def _split(patches, fraction, rng):
    order = rng.permutation(len(patches))
    n_val = math.ceil(fraction * len(patches)) if fraction > 0 and len(patches) > 1 else 0
    val = [patches[i] for i in order[:n_val]]
    train = [patches[i] for i in order[n_val:]]
    return train, val


def pretrain(tcfg: TrainConfig, cfg: ModelConfig, images=None, on_record=None,
             params=None) -> TrainResult:
    """Minimize mean bits per sub-pixel over randomly sampled patches.

    ``images`` defaults to the synthetic corpus plus ``tcfg.data_dir``.
    The returned weights are those with the best validation rate (the
    final weights if no validation split is used).
    """
    if images is None:
        images = synthetic_corpus(tcfg.synthetic_images, tcfg.synthetic_size,
                                  cfg.channels, tcfg.seed)
        if tcfg.data_dir:
            images = images + load_folder(Path(tcfg.data_dir), cfg.channels)
    patches = [p for img in images for p in extract_patches(img, tcfg.patch_size)]
    rng = np.random.default_rng(tcfg.seed)
    train, val = _split(patches, tcfg.val_fraction, rng)
    if not train:
        raise ConfigError("no training patches (images smaller than the patch size?)")

    params = init_params(cfg, tcfg.seed) if params is None else dict(params)
    state = nx.AdamState.for_params(params)
    history: list[dict] = []
    best, best_val = params, None

    def record(rec):
        history.append(rec)
        if on_record is not None:
            on_record(rec)

    def validate(step, p):
        nonlocal best, best_val
        v = dataset_bpsp(val, p, cfg)
        if best_val is None or v < best_val:
            best, best_val = p, v
        record({"step": step, "val_bpsp": v})

    if val:
        validate(0, params)
    n_sub = tcfg.batch_size * tcfg.patch_size ** 2 * cfg.channels
    for step in range(1, tcfg.max_steps + 1):
        idx = rng.integers(0, len(train), tcfg.batch_size)
        batch = np.stack([train[i] for i in idx])
        try:
            bits, grads = patch_nll(batch, params, cfg, need_grad=True)
            loss = bits / n_sub
            if not math.isfinite(loss):
                raise NumericFault("training loss is not finite")
            grads = {k: g / g.dtype.type(n_sub) for k, g in grads.items()}
            params, state = nx.adam_step(params, grads, state, tcfg.lr)
        except NumericFault as exc:
            log.error("training diverged at step %d: %s", step, exc)
            return TrainResult(copy.copy(best), history, best_val, aborted=True)
        record({"step": step, "loss": loss})
        if val and (step % tcfg.val_every == 0 or step == tcfg.max_steps):
            validate(step, params)

    final = best if val else params
    return TrainResult(final, history, best_val)
