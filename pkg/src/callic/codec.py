"""Whole-image compression on top of the patch codec and the container."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapt import AdapterConfig, adapter_count, merge_all, rpft_finetune
from .cci import decode_image, encode_image
from .checkpoint import load_checkpoint
from .coding import decode_weights, encode_weights
from .container import ContainerHeader, read_container, write_container
from .errors import DimensionError, FormatError
from .model import ModelConfig

log = logging.getLogger(__name__)


@dataclass
class Model:
    params: dict
    cfg: ModelConfig
    digest: bytes

    @classmethod
    def load(cls, path) -> "Model":
        params, cfg, digest = load_checkpoint(Path(path))
        return cls(params, cfg, digest)


@dataclass
class EncodeReport:
    width: int
    height: int
    channels: int
    adapted: bool
    sections: dict
    weight_count: int = 0
    estimated_weight_bits: float = 0.0
    estimated_pixel_bits: float | None = None
    baseline_pixel_bits: float | None = None
    fallback: str | None = None
    records: list = field(default_factory=list)

    @property
    def file_bytes(self) -> int:
        return self.sections["total"]

    @property
    def bpsp(self) -> float:
        return 8.0 * self.file_bytes / (self.width * self.height * self.channels)

    @property
    def weight_bits(self) -> int:
        return 8 * self.sections["weights"]

    @property
    def pixel_bits(self) -> int:
        return 8 * (self.sections["table"] + self.sections["payloads"])

    def summary(self) -> dict:
        return {"width": self.width, "height": self.height, "channels": self.channels,
                "adapted": self.adapted, "file_bytes": self.file_bytes,
                "bpsp": self.bpsp, "weight_bits": self.weight_bits,
                "pixel_bits": self.pixel_bits, "header_bits": 8 * self.sections["header"],
                "weight_count": self.weight_count,
                "estimated_weight_bits": self.estimated_weight_bits,
                "estimated_pixel_bits": self.estimated_pixel_bits,
                "baseline_pixel_bits": self.baseline_pixel_bits,
                "fallback": self.fallback}


def _as_hwc(image, cfg: ModelConfig) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    if image.dtype != np.uint8:
        raise DimensionError(f"expected 8-bit pixels, got {image.dtype}")
    if image.ndim != 3 or image.shape[-1] != cfg.channels:
        raise DimensionError(f"image {image.shape} does not match a {cfg.channels}-channel model")
    return image


def compress(image, model: Model, patch_size: int = 64, adapter: AdapterConfig | None = None,
             threads: int = 1, on_step=None, rate_guard: bool = True
             ) -> tuple[bytes, EncodeReport]:
    """Encode ``image``; with ``adapter`` the weights are fine-tuned first.

    Adaptation that faults, or (with ``rate_guard``) does not lower the
    estimated rate, falls back to the pretrained weights; the report says why.
    """
    image = _as_hwc(image, model.cfg)
    H, W, C = image.shape
    params, fallback, result = model.params, None, None
    if adapter is not None:
        adapter.check(model.cfg)
        result = rpft_finetune(image, model.params, model.cfg, adapter, patch_size, on_step)
        if result.fallback:
            fallback = result.fallback
        elif rate_guard and result.total_bits >= result.baseline_bits:
            fallback = "adaptation did not lower the estimated rate"
        if fallback:
            log.warning("adaptation skipped: %s", fallback)
    adapted = adapter is not None and fallback is None

    weight_bytes, count = b"", 0
    if adapted:
        count = int(result.bins.size)
        weight_bytes = encode_weights(result.bins, adapter.prior)
        params = merge_all(model.params, result.bins, model.cfg, adapter)
    payloads = encode_image(image, params, model.cfg, patch_size, threads)
    header = ContainerHeader(W, H, C, patch_size, model.digest,
                             adapter.digest() if adapted else bytes(8), adapted)
    data = write_container(header, payloads, count, weight_bytes)
    report = EncodeReport(
        W, H, C, adapted, read_container(data).section_sizes(), count,
        result.weight_bits if adapted else 0.0,
        result.pixel_bits if adapted else None,
        result.baseline_bits if result else None,
        fallback, result.records if result else [])
    return data, report


def decompress(data: bytes, model: Model, adapter: AdapterConfig | None = None,
               threads: int = 1) -> np.ndarray:
    """Decode to ``(H, W, C)`` uint8; ``adapter`` must match the encoder's ranks."""
    adapter = AdapterConfig() if adapter is None else adapter
    box = read_container(data, model.digest, adapter.digest())
    h = box.header
    if h.channels != model.cfg.channels:
        raise FormatError(f"file has {h.channels} channels, model has {model.cfg.channels}")
    params = model.params
    if h.adapted:
        expected = adapter_count(model.cfg, adapter)
        if box.weight_count != expected:
            raise FormatError(f"weight section holds {box.weight_count} values, "
                              f"adapter config implies {expected}")
        bins = decode_weights(box.weight_bytes, box.weight_count, adapter.prior)
        params = merge_all(model.params, bins, model.cfg, adapter)
    return decode_image(box.payloads, (h.height, h.width), params, model.cfg,
                        h.patch_size, threads)
