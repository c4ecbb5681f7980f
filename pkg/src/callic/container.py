"""Compressed file layout.

All integers are little-endian::

    header (33 bytes)
        magic b"CLLC" | version u8 | flags u8 (bit 0: adapted) |
        width u32 | height u32 | channels u8 | patch size u16 |
        checkpoint digest 8B | adapter digest 8B (zero unless adapted)
    weight section (adapted files only)
        count u32 | byte length u32 | range-coded bins
    patch table
        one u32 byte length per patch, row-major
    payloads
        concatenated range-coded patches
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

from .errors import FormatError, TruncatedError, WrongModelError

MAGIC = b"CLLC"
VERSION = 1
FLAG_ADAPTED = 0x01
NO_DIGEST = bytes(8)

_HEADER = struct.Struct("<4sBBIIBH8s8s")
_U32 = struct.Struct("<I")
_WEIGHTS = struct.Struct("<II")
HEADER_BYTES = _HEADER.size


@dataclass(frozen=True)
class ContainerHeader:
    width: int
    height: int
    channels: int
    patch_size: int
    checkpoint_digest: bytes
    adapter_digest: bytes = NO_DIGEST
    adapted: bool = False
    version: int = VERSION

    @property
    def n_patches(self) -> int:
        return math.ceil(self.width / self.patch_size) * math.ceil(self.height / self.patch_size)

    def pack(self) -> bytes:
        flags = FLAG_ADAPTED if self.adapted else 0
        return _HEADER.pack(MAGIC, self.version, flags, self.width, self.height,
                            self.channels, self.patch_size, self.checkpoint_digest,
                            self.adapter_digest)


@dataclass
class Container:
    header: ContainerHeader
    weight_count: int = 0
    weight_bytes: bytes = b""
    payloads: list = field(default_factory=list)

    def section_sizes(self) -> dict:
        weights = _WEIGHTS.size + len(self.weight_bytes) if self.header.adapted else 0
        table = _U32.size * len(self.payloads)
        payload = sum(len(p) for p in self.payloads)
        return {"header": HEADER_BYTES, "weights": weights, "table": table,
                "payloads": payload, "total": HEADER_BYTES + weights + table + payload}


def write_container(header: ContainerHeader, payloads, weight_count: int = 0,
                    weight_bytes: bytes = b"") -> bytes:
    if len(payloads) != header.n_patches:
        raise FormatError(f"{len(payloads)} payloads for a {header.n_patches}-patch grid")
    if header.adapted and (weight_count == 0 or not weight_bytes):
        raise FormatError("an adapted file needs a non-empty weight section")
    if not header.adapted and (weight_count or weight_bytes):
        raise FormatError("weight section given for a non-adapted file")
    out = bytearray(header.pack())
    if header.adapted:
        out += _WEIGHTS.pack(weight_count, len(weight_bytes)) + weight_bytes
    for p in payloads:
        out += _U32.pack(len(p))
    for p in payloads:
        out += p
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file truncated in {what} "
                                 f"(need {self.pos + n} bytes, have {len(self.data)})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def parse_header(data: bytes) -> ContainerHeader:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("not a compressed image file (bad magic)")
    raw = _Reader(data).take(HEADER_BYTES, "header")
    _, version, flags, width, height, channels, P, ck, ad = _HEADER.unpack(raw)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if flags & ~FLAG_ADAPTED:
        raise FormatError(f"unknown flag bits 0x{flags:02x}")
    if width < 1 or height < 1 or channels not in (1, 3) or P < 1:
        raise FormatError(f"invalid image geometry {width}x{height}x{channels}, P={P}")
    adapted = bool(flags & FLAG_ADAPTED)
    if not adapted and ad != NO_DIGEST:
        raise FormatError("adapter digest present on a non-adapted file")
    return ContainerHeader(width, height, channels, P, ck, ad, adapted, version)


def read_container(data: bytes, checkpoint_digest: bytes | None = None,
                   adapter_digest: bytes | None = None) -> Container:
    """Parse and validate a file; digests are checked when given."""
    header = parse_header(data)
    if checkpoint_digest is not None and header.checkpoint_digest != checkpoint_digest:
        raise WrongModelError(
            f"file was coded with checkpoint {header.checkpoint_digest.hex()}, "
            f"local checkpoint is {checkpoint_digest.hex()}")
    if header.adapted and adapter_digest is not None and header.adapter_digest != adapter_digest:
        raise WrongModelError(
            f"file was coded with adapter config {header.adapter_digest.hex()}, "
            f"decoder is configured for {adapter_digest.hex()}")
    r = _Reader(data)
    r.pos = HEADER_BYTES
    count, wbytes = 0, b""
    if header.adapted:
        count, length = _WEIGHTS.unpack(r.take(_WEIGHTS.size, "weight section"))
        if count == 0 or length == 0:
            raise FormatError("adapted flag set but the weight section is empty")
        wbytes = r.take(length, "weight section")
    n = header.n_patches
    table = r.take(_U32.size * n, "patch table")
    lengths = [_U32.unpack_from(table, 4 * i)[0] for i in range(n)]
    payloads = [r.take(length, f"patch {i}") for i, length in enumerate(lengths)]
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after the last patch")
    return Container(header, count, wbytes, payloads)
