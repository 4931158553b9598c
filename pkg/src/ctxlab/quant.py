"""4-bit NormalFloat block quantization with optional double quantization.

Storage layout of one quantized section (little-endian)::

    u64 element count | u32 block size | u8 flags (bit0 = double quantized)
    packed codes, ceil(n/2) bytes, low nibble holds the earlier element
    absmax: n_blocks x f32
        or  n_blocks x u8, then n_superblocks x (f32 min, f32 scale)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, FormatError, NumericError
from .tensor import Tensor

DEFAULT_BLOCK = 64
DEFAULT_SUPERBLOCK = 256
HEADER = struct.Struct("<QIB")
FLAG_DOUBLE = 0x01

# Upper quantile of the standard NF4 construction; keeps the outermost levels finite.
NF4_OFFSET = 1.0 - 0.5 * (1.0 / 32.0 + 1.0 / 30.0)


@dataclass(frozen=True)
class Nf4Codebook:
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.shape != (16,):
            raise ConfigError("NF4 codebook needs exactly 16 levels")
        if not np.all(np.diff(v) > 0):
            raise ConfigError("NF4 levels must be strictly increasing")
        if v[0] != -1.0 or v[-1] != 1.0 or 0.0 not in v:
            raise ConfigError("NF4 levels must contain -1, 0 and 1")

    @property
    def float32(self) -> np.ndarray:
        return self.values.astype(np.float32)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.values[:-1] + self.values[1:])

    @property
    def max_half_gap(self) -> float:
        return float(np.max(np.diff(self.values)) / 2.0)

    def __len__(self) -> int:
        return 16


def build_nf4_codebook() -> Nf4Codebook:
    """Sixteen standard-normal quantiles normalised to [-1, 1] with an exact zero.

    Eight levels come from the positive half and seven from the negative half,
    the same asymmetric split as the standard NF4 data type.
    """
    positive = norm.ppf(np.linspace(NF4_OFFSET, 0.5, 9)[:-1])
    negative = -norm.ppf(np.linspace(NF4_OFFSET, 0.5, 8)[:-1])
    levels = np.sort(np.concatenate([positive, [0.0], negative]))
    levels = levels / levels.max()
    values = levels.astype(np.float64)
    values.flags.writeable = False
    return Nf4Codebook(values)


NF4 = build_nf4_codebook()


# -- nibble packing ------------------------------------------------------------


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size and codes.max() > 15:
        raise FormatError("codes must fit in 4 bits")
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, count: int | None = None) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    codes = np.empty(packed.size * 2, dtype=np.uint8)
    codes[0::2] = packed & 0x0F
    codes[1::2] = packed >> 4
    if count is not None:
        if count > codes.size or count < codes.size - 1:
            raise FormatError(f"{packed.size} bytes cannot hold {count} codes")
        codes = codes[:count]
    return codes


# -- quantized tensor ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    shape: tuple[int, ...]
    packed: np.ndarray
    block_size: int
    double_quantized: bool
    absmax: np.ndarray | None = None
    absmax_codes: np.ndarray | None = None
    superblock_min: np.ndarray | None = None
    superblock_scale: np.ndarray | None = None
    superblock_size: int = DEFAULT_SUPERBLOCK

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def n_blocks(self) -> int:
        return -(-self.numel // self.block_size)

    @property
    def n_superblocks(self) -> int:
        return -(-self.n_blocks // self.superblock_size) if self.double_quantized else 0

    def codes(self) -> np.ndarray:
        return unpack_nibbles(self.packed, self.numel)

    def absmax_values(self) -> np.ndarray:
        """Per-block scale as used by dequantization (float32)."""
        if not self.double_quantized:
            return self.absmax
        return _dequantize_absmax(
            self.absmax_codes, self.superblock_min, self.superblock_scale, self.superblock_size
        )

    def to_bytes(self) -> bytes:
        flags = FLAG_DOUBLE if self.double_quantized else 0
        parts = [HEADER.pack(self.numel, self.block_size, flags), self.packed.tobytes()]
        if self.double_quantized:
            parts.append(self.absmax_codes.astype(np.uint8).tobytes())
            pairs = np.stack([self.superblock_min, self.superblock_scale], axis=1).astype("<f4")
            parts.append(pairs.tobytes())
        else:
            parts.append(self.absmax.astype("<f4").tobytes())
        return b"".join(parts)

    def same_bytes(self, other: "QuantizedTensor") -> bool:
        return self.shape == other.shape and self.to_bytes() == other.to_bytes()


def _quantize_absmax(absmax: np.ndarray, superblock: int):
    n_sb = -(-absmax.size // superblock)
    codes = np.zeros(absmax.size, dtype=np.uint8)
    mins = np.zeros(n_sb, dtype=np.float32)
    scales = np.zeros(n_sb, dtype=np.float32)
    for s in range(n_sb):
        chunk = absmax[s * superblock:(s + 1) * superblock].astype(np.float32)
        lo = np.float32(chunk.min())
        scale = np.float32((np.float32(chunk.max()) - lo) / np.float32(255.0))
        mins[s] = lo
        scales[s] = scale
        if scale > 0:
            q = np.rint((chunk - lo) / scale)
            codes[s * superblock:s * superblock + chunk.size] = np.clip(q, 0, 255).astype(np.uint8)
    return codes, mins, scales


def _dequantize_absmax(codes, mins, scales, superblock: int) -> np.ndarray:
    sb = np.arange(codes.size) // superblock
    return (mins[sb] + codes.astype(np.float32) * scales[sb]).astype(np.float32)


def nearest_codes(normalized: np.ndarray, codebook: Nf4Codebook = NF4) -> np.ndarray:
    """Index of the nearest level; exact midpoints go to the lower index."""
    return np.searchsorted(codebook.midpoints, normalized, side="left").astype(np.uint8)


def quantize_tensor(
    x,
    block_size: int = DEFAULT_BLOCK,
    double_quantize: bool = False,
    superblock_size: int = DEFAULT_SUPERBLOCK,
) -> QuantizedTensor:
    if block_size < 1 or superblock_size < 1:
        raise ConfigError("block and superblock sizes must be positive")
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NumericError("cannot quantize non-finite values")
    flat = arr.reshape(-1)
    n = flat.size
    n_blocks = -(-n // block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float32)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size)
    absmax = np.abs(blocks).max(axis=1) if n else np.zeros(0, dtype=np.float32)
    safe = np.where(absmax > 0, absmax, 1.0).astype(np.float64)
    normalized = blocks.astype(np.float64) / safe[:, None]
    codes = nearest_codes(normalized).reshape(-1)[:n]
    packed = pack_nibbles(codes)
    if double_quantize:
        a_codes, mins, scales = _quantize_absmax(absmax, superblock_size)
        return QuantizedTensor(tuple(arr.shape), packed, block_size, True, None, a_codes, mins, scales, superblock_size)
    return QuantizedTensor(tuple(arr.shape), packed, block_size, False, absmax.astype(np.float32), superblock_size=superblock_size)


def dequantize_array(q: QuantizedTensor) -> np.ndarray:
    codes = q.codes()
    if codes.size != q.numel:
        raise FormatError("code count does not match element count")
    absmax = q.absmax_values()
    if absmax.size != q.n_blocks:
        raise FormatError("absmax count does not match block count")
    scale = np.repeat(absmax, q.block_size)[: q.numel]
    return (NF4.float32[codes] * scale).reshape(q.shape)


def dequantize_tensor(q: QuantizedTensor) -> Tensor:
    return Tensor(dequantize_array(q))


def quantized_from_bytes(
    buf: bytes, shape: tuple[int, ...] | None = None, superblock_size: int = DEFAULT_SUPERBLOCK
) -> QuantizedTensor:
    """Parse exactly one quantized section; trailing or missing bytes are a format error."""
    if len(buf) < HEADER.size:
        raise FormatError("truncated quantized-tensor header")
    n, block_size, flags = HEADER.unpack_from(buf, 0)
    if block_size < 1:
        raise FormatError("block size must be positive")
    if flags & ~FLAG_DOUBLE:
        raise FormatError(f"unknown flag bits {flags:#x}")
    if shape is None:
        shape = (n,)
    if int(np.prod(shape, dtype=np.int64)) != n:
        raise FormatError(f"shape {shape} does not hold {n} elements")
    n_blocks = -(-n // block_size)
    off = HEADER.size
    code_bytes = (n + 1) // 2
    double = bool(flags & FLAG_DOUBLE)
    n_sb = -(-n_blocks // superblock_size) if double else 0
    need = off + code_bytes + (n_blocks + 8 * n_sb if double else 4 * n_blocks)
    if len(buf) != need:
        raise FormatError(f"section is {len(buf)} bytes, expected {need}")
    packed = np.frombuffer(buf, dtype=np.uint8, count=code_bytes, offset=off).copy()
    off += code_bytes
    if double:
        a_codes = np.frombuffer(buf, dtype=np.uint8, count=n_blocks, offset=off).copy()
        off += n_blocks
        pairs = np.frombuffer(buf, dtype="<f4", count=2 * n_sb, offset=off).reshape(n_sb, 2)
        return QuantizedTensor(
            tuple(shape), packed, block_size, True, None, a_codes,
            pairs[:, 0].astype(np.float32), pairs[:, 1].astype(np.float32), superblock_size,
        )
    absmax = np.frombuffer(buf, dtype="<f4", count=n_blocks, offset=off).astype(np.float32)
    return QuantizedTensor(tuple(shape), packed, block_size, False, absmax, superblock_size=superblock_size)


# -- storage accounting ---------------------------------------------------------


@dataclass(frozen=True)
class StorageReport:
    parameter_count: int
    code_bits: int
    absmax_bits: int
    superblock_bits: int

    @property
    def total_bits(self) -> int:
        return self.code_bits + self.absmax_bits + self.superblock_bits

    @property
    def bits_per_parameter(self) -> float:
        return self.total_bits / self.parameter_count if self.parameter_count else math.nan

    def __add__(self, other: "StorageReport") -> "StorageReport":
        return StorageReport(
            self.parameter_count + other.parameter_count,
            self.code_bits + other.code_bits,
            self.absmax_bits + other.absmax_bits,
            self.superblock_bits + other.superblock_bits,
        )

    def as_dict(self) -> dict:
        return {
            "parameter_count": self.parameter_count,
            "total_bits": self.total_bits,
            "bits_per_parameter": self.bits_per_parameter,
            "code_bits": self.code_bits,
            "absmax_bits": self.absmax_bits,
            "superblock_bits": self.superblock_bits,
        }


def storage_report(q: QuantizedTensor) -> StorageReport:
    if q.double_quantized:
        return StorageReport(q.numel, 4 * q.numel, 8 * q.n_blocks, 64 * q.n_superblocks)
    return StorageReport(q.numel, 4 * q.numel, 32 * q.n_blocks, 0)


def planned_storage(numel: int, block_size: int = DEFAULT_BLOCK, double_quantize: bool = False,
                    superblock_size: int = DEFAULT_SUPERBLOCK) -> StorageReport:
    """Storage a tensor of ``numel`` elements would need, without quantizing it."""
    n_blocks = -(-numel // block_size)
    if double_quantize:
        return StorageReport(numel, 4 * numel, 8 * n_blocks, 64 * -(-n_blocks // superblock_size))
    return StorageReport(numel, 4 * numel, 32 * n_blocks, 0)
