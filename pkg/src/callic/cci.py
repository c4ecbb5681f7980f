"""Cache-then-crop inference and the group-sequential patch codec.

A patch is processed one wavefront group at a time. Every masked
convolution keeps a zero-initialized cache of its input activations;
at each step only the current group's positions are written into the cache
and only k x k windows around those positions are convolved.  The 1 x 1
layers act per position and need no cache.

Encoder and decoder run the identical step sequence, which keeps their
probability tables bit-identical.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .coding import RangeDecoder, RangeEncoder, quantize_cdf
from .errors import ConfigError, DimensionError, ProtocolError
from .mixture import channel_pmf, mixture_params, normalize
from .model import (EMBED_KERNEL, MASK_A, ModelConfig, build_mask, embed_mask,
                    forward, normalize_pixels)


@dataclass
class ScanOrder:
    height: int
    width: int
    group: np.ndarray  # (H, W) group index of every position
    rows: list  # per group: row indices, ascending
    cols: list  # per group: column indices

    @property
    def n_groups(self) -> int:
        return len(self.rows)


def scan_order(height: int, width: int | None = None) -> ScanOrder:
    """Wavefront order ``group(i, j) = 2i + j``; ``2(H-1) + (W-1) + 1`` groups."""
    width = height if width is None else width
    if height < 1 or width < 1:
        raise ConfigError(f"patch dims must be positive, got {height}x{width}")
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    group = 2 * ii + jj
    rows, cols = [], []
    for g in range(int(group.max()) + 1):
        r, c = np.nonzero(group == g)  # row-major, hence ascending rows
        rows.append(r)
        cols.append(c)
    return ScanOrder(height, width, group, rows, cols)


def crop_windows(buffer: np.ndarray, rows, cols, k: int) -> np.ndarray:
    """k x k windows of an ``(H, W, C)`` buffer centered at each position.

    Cells outside the buffer read as zero. Returns ``(n, k, k, C)``.
    """
    r = k // 2
    padded = np.pad(buffer, ((r, r), (r, r), (0, 0)))
    d = np.arange(k)
    return padded[np.asarray(rows)[:, None, None] + d[None, :, None],
                  np.asarray(cols)[:, None, None] + d[None, None, :]]


def _taps(padded, rows, cols, offsets, r):
    di = np.array([o[0] for o in offsets])
    dj = np.array([o[1] for o in offsets])
    return padded[rows[:, None] + r + di, cols[:, None] + r + dj]  # (n, n_off, C)


def forward_macs(cfg: ModelConfig, n_positions: int) -> int:
    """Multiply-accumulates of one forward evaluation at ``n_positions`` outputs."""
    m, h = cfg.dim, cfg.hidden
    n_b = int(embed_mask().sum())
    n_a = int(build_mask(cfg.kernel, MASK_A).sum())
    block = 2 * m * m + n_a * m + m * h + h * m + (m * m if cfg.out_proj else 0)
    per_pos = n_b * cfg.channels * m + cfg.depth * block + m * cfg.n_out
    return n_positions * per_pos


class CCIState:
    """Activation caches for one patch and the step counter that guards them."""

    def __init__(self, params: dict, cfg: ModelConfig, height: int, width: int):
        self.params = params
        self.cfg = cfg
        self.order = scan_order(height, width)
        self.dtype = params["head.weight"].dtype
        self._rb = EMBED_KERNEL // 2
        self._ra = cfg.kernel // 2
        self._off_b = nx.mask_offsets(embed_mask())
        self._off_a = nx.mask_offsets(build_mask(cfg.kernel, MASK_A))
        self._embed_w = nx.conv_matrix(params["embed.weight"], self._off_b)
        ra = self._ra
        self._dw_taps = [
            np.stack([params[f"blocks.{i}.dw.weight"][:, 0, di + ra, dj + ra]
                      for di, dj in self._off_a])
            for i in range(cfg.depth)
        ]
        rb = self._rb
        self.pixels = np.zeros((height + 2 * rb, width + 2 * rb, cfg.channels), self.dtype)
        self.caches = [np.zeros((height + 2 * ra, width + 2 * ra, cfg.dim), self.dtype)
                       for _ in range(cfg.depth)]
        self.next_group = 0
        self.macs = 0

    def snapshot(self) -> "CCIState":
        new = object.__new__(CCIState)
        new.__dict__.update(self.__dict__)
        new.pixels = self.pixels.copy()
        new.caches = [c.copy() for c in self.caches]
        return new

    def step(self, g: int, prev_pixels=None) -> np.ndarray:
        """Raw head output at the positions of group ``g``, shape ``(n_g, n_out)``.

        ``prev_pixels`` are the integer pixels ``(n_{g-1}, C)`` of group ``g-1``.
        """
        if g != self.next_group:
            raise ProtocolError(f"expected step {self.next_group}, got {g}")
        p, cfg = self.params, self.cfg
        if g > 0:
            if prev_pixels is None:
                raise ProtocolError("pixels of the previous group are required")
            rb = self._rb
            self.pixels[self.order.rows[g - 1] + rb, self.order.cols[g - 1] + rb] = \
                normalize_pixels(prev_pixels, self.dtype)
        rows, cols = self.order.rows[g], self.order.cols[g]
        n = len(rows)
        if n == 0:  # odd groups of a single-column patch
            self.next_group += 1
            return np.zeros((0, cfg.n_out), self.dtype)

        win = _taps(self.pixels, rows, cols, self._off_b, self._rb).reshape(n, -1)
        h = nx.affine(win, self._embed_w, p["embed.bias"])
        ra = self._ra
        for i in range(cfg.depth):
            q = f"blocks.{i}."
            a, _ = nx.layer_norm(h, p[q + "norm1.scale"], p[q + "norm1.offset"])
            A = nx.affine(a, p[q + "wa.weight"], p[q + "wa.bias"])
            V = nx.affine(a, p[q + "wv.weight"], p[q + "wv.bias"])
            cache = self.caches[i]
            cache[rows + ra, cols + ra] = A  # same-group taps must see this step
            taps = _taps(cache, rows, cols, self._off_a, ra)
            AM = np.zeros_like(A)
            for o, w in enumerate(self._dw_taps[i]):
                AM += taps[:, o, :] * w
            y = nx.activation(nx.check_finite(AM, "masked_dwconv"), "swish") * V
            if cfg.out_proj:
                y = nx.affine(y, p[q + "proj.weight"], p[q + "proj.bias"])
            h = h + y
            b, _ = nx.layer_norm(h, p[q + "norm2.scale"], p[q + "norm2.offset"])
            u = nx.activation(nx.affine(b, p[q + "up.weight"], p[q + "up.bias"]), "gelu")
            h = h + nx.affine(u, p[q + "down.weight"], p[q + "down.bias"])
        raw = nx.affine(h, p["head.weight"], p["head.bias"])
        self.next_group += 1
        self.macs += forward_macs(cfg, n)
        return raw


def cci_step(state: CCIState, g: int, prev_pixels=None):
    """Mixture parameters for the positions of group ``g``."""
    raw = state.step(g, prev_pixels)
    return mixture_params(raw, state.cfg.channels, state.cfg.mixtures)


class NaivePredictor:
    """Reference: full-map forward at every step, sliced to the current group."""

    def __init__(self, params, cfg, height, width):
        self.params, self.cfg = params, cfg
        self.order = scan_order(height, width)
        self.known = np.zeros((height, width, cfg.channels), np.int64)
        self.next_group = 0
        self.macs = 0

    def step(self, g, prev_pixels=None):
        if g != self.next_group:
            raise ProtocolError(f"expected step {self.next_group}, got {g}")
        if g > 0:
            self.known[self.order.rows[g - 1], self.order.cols[g - 1]] = prev_pixels
        x = normalize_pixels(self.known, self.params["head.weight"].dtype)
        raw, _ = forward(x, self.params, self.cfg)
        self.next_group += 1
        self.macs += forward_macs(self.cfg, self.known.shape[0] * self.known.shape[1])
        return raw[self.order.rows[g], self.order.cols[g]]


# ---------------------------------------------------------------------------
# patch codec
# ---------------------------------------------------------------------------

def _run_patch(params, cfg, height, width, patch=None, data=None, naive=False):
    predictor = (NaivePredictor if naive else CCIState)(params, cfg, height, width)
    order = predictor.order
    C = cfg.channels
    if patch is not None:
        coder = RangeEncoder()
    else:
        coder = RangeDecoder(data)
        patch = np.zeros((height, width, C), np.int64)
    encoding = isinstance(coder, RangeEncoder)
    prev = None
    for g in range(order.n_groups):
        rows, cols = order.rows[g], order.cols[g]
        mp = mixture_params(predictor.step(g, prev), C, cfg.mixtures)
        values = patch[rows, cols].astype(np.int64)
        ctx = normalize(values)
        for c in range(C):
            cdfs = quantize_cdf(channel_pmf(mp, c, ctx)).tolist()
            if encoding:
                for t, s in enumerate(values[:, c].tolist()):
                    coder.encode(s, cdfs[t])
            else:
                decoded = [coder.decode(cdf) for cdf in cdfs]
                values[:, c] = decoded
                ctx[:, c] = normalize(values[:, c])
        if not encoding:
            patch[rows, cols] = values
        prev = values
    if encoding:
        return coder.finish()
    return patch.astype(np.uint8)


def _check_patch(patch, cfg):
    patch = np.asarray(patch)
    if patch.ndim == 2:
        patch = patch[..., None]
    if patch.ndim != 3 or patch.shape[-1] != cfg.channels:
        raise DimensionError(f"patch shape {patch.shape} does not match {cfg.channels} channels")
    return patch


def encode_patch(patch, params, cfg: ModelConfig, naive: bool = False) -> bytes:
    patch = _check_patch(patch, cfg)
    return _run_patch(params, cfg, patch.shape[0], patch.shape[1], patch=patch, naive=naive)


def decode_patch(data: bytes, dims, params, cfg: ModelConfig, naive: bool = False) -> np.ndarray:
    height, width = dims
    return _run_patch(params, cfg, height, width, data=data, naive=naive)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def tile_grid(height: int, width: int, P: int) -> list[tuple[int, int, int, int]]:
    """Row-major ``(y0, x0, h, w)`` tiles; edge tiles keep their smaller dims."""
    if P < 1:
        raise ConfigError(f"patch size must be positive, got {P}")
    return [(y, x, min(P, height - y), min(P, width - x))
            for y in range(0, height, P) for x in range(0, width, P)]


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def encode_image(image, params, cfg: ModelConfig, P: int = 64, threads: int = 1,
                 naive: bool = False) -> list[bytes]:
    image = _check_patch(image, cfg)
    H, W = image.shape[:2]
    tiles = tile_grid(H, W, P)
    return _map(lambda t: encode_patch(image[t[0]:t[0] + t[2], t[1]:t[1] + t[3]],
                                       params, cfg, naive), tiles, threads)


def decode_image(payloads, dims, params, cfg: ModelConfig, P: int = 64,
                 threads: int = 1) -> np.ndarray:
    H, W = dims
    tiles = tile_grid(H, W, P)
    if len(payloads) != len(tiles):
        raise DimensionError(f"{len(payloads)} payloads for a {len(tiles)}-patch grid")
    patches = _map(lambda a: decode_patch(a[1], (a[0][2], a[0][3]), params, cfg),
                   list(zip(tiles, payloads)), threads)
    out = np.zeros((H, W, cfg.channels), np.uint8)
    for (y, x, h, w), patch in zip(tiles, patches):
        out[y:y + h, x:x + w] = patch
    return out
