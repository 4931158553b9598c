"""Binary checkpoint format.

Layout (little-endian)::

    b"LQLR" | u32 version
    u32 config byte length | UTF-8 ``key=value`` lines
    u32 section count
    per section: u32 name length | name | u8 kind | u32 ndim | ndim x u64 dims
                 u64 payload length | payload

Kind 0 is raw f32; kind 1 is a quantized section as laid out in
:mod:`ctxlab.quant`.  Quantized base weights keep their plain names
(``layer0.q_proj``); the full-precision copies carry a ``.fp32`` suffix;
adapters are ``layer{i}.{proj}.A`` / ``.B``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .lora import LoraAdapter
from .model import Model, ModelConfig, fresh_adapters, norm_names, weight_shapes
from .quant import QuantizedTensor, dequantize_array, quantized_from_bytes
from .tensor import Tensor

MAGIC = b"LQLR"
VERSION = 1
KIND_F32 = 0
KIND_NF4 = 1
FP32_SUFFIX = ".fp32"


@dataclass
class Section:
    name: str
    kind: int
    shape: tuple[int, ...]
    payload: bytes


def _encode_section(sec: Section) -> bytes:
    name = sec.name.encode("utf-8")
    head = struct.pack("<I", len(name)) + name + struct.pack("<BI", sec.kind, len(sec.shape))
    dims = struct.pack(f"<{len(sec.shape)}Q", *sec.shape)
    return head + dims + struct.pack("<Q", len(sec.payload)) + sec.payload


def encode(config_lines: list[str], sections: list[Section]) -> bytes:
    cfg = "\n".join(config_lines).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(sections))]
    parts += [_encode_section(s) for s in sections]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError("checkpoint is truncated")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def decode(buf: bytes) -> tuple[dict[str, str], list[Section]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    try:
        text = r.take(cfg_len).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config block is not UTF-8") from None
    config: dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"bad config line {line!r}")
        key, value = line.split("=", 1)
        config[key] = value
    (count,) = r.unpack("<I")
    sections = []
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        kind, ndim = r.unpack("<BI")
        if kind not in (KIND_F32, KIND_NF4):
            raise FormatError(f"unknown section kind {kind} for {name}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (length,) = r.unpack("<Q")
        sections.append(Section(name, kind, tuple(shape), r.take(length)))
    if r.off != len(buf):
        raise FormatError("trailing bytes after last section")
    return config, sections


def _f32(name: str, arr: np.ndarray) -> Section:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return Section(name, KIND_F32, tuple(arr.shape), arr.tobytes())


def _array(sec: Section) -> np.ndarray:
    expect = 4 * int(np.prod(sec.shape, dtype=np.int64))
    if len(sec.payload) != expect:
        raise FormatError(f"section {sec.name} holds {len(sec.payload)} bytes, expected {expect}")
    return np.frombuffer(sec.payload, dtype="<f4").reshape(sec.shape).astype(np.float32)


def model_sections(model: Model, include_full_precision: bool = True) -> list[Section]:
    sections = []
    for name in sorted(model.base):
        if name in model.quantized:
            q = model.quantized[name]
            sections.append(Section(name, KIND_NF4, q.shape, q.to_bytes()))
        if include_full_precision or name not in model.quantized:
            sections.append(_f32(name + FP32_SUFFIX, model.base[name]))
    for name in norm_names(model.config):
        sections.append(_f32(name, model.norms[name].data))
    for name in sorted(model.adapters):
        ad = model.adapters[name]
        sections.append(_f32(f"{name}.A", ad.A.data))
        sections.append(_f32(f"{name}.B", ad.B.data))
    return sections


def save_checkpoint(model: Model, path, extra: dict[str, str] | None = None,
                    include_full_precision: bool = True) -> Path:
    """Write atomically; the file appears only once complete."""
    lines = model.config.to_lines() + [f"{k}={v}" for k, v in sorted((extra or {}).items())]
    lines.append(f"full_precision={include_full_precision}")
    data = encode(lines, model_sections(model, include_full_precision))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict[str, str], list[Section]]:
    return decode(Path(path).read_bytes())


def model_from_sections(config_map: dict[str, str], sections: list[Section]) -> Model:
    config = ModelConfig.from_mapping(config_map)
    by_name = {s.name: s for s in sections}
    quantized: dict[str, QuantizedTensor] = {}
    base: dict[str, np.ndarray] = {}
    for name, shape in weight_shapes(config).items():
        q_sec = by_name.get(name)
        if q_sec is not None:
            if q_sec.kind != KIND_NF4 or q_sec.shape != shape:
                raise FormatError(f"section {name} has the wrong kind or shape")
            quantized[name] = quantized_from_bytes(q_sec.payload, shape, config.superblock_size)
        fp = by_name.get(name + FP32_SUFFIX)
        if fp is not None:
            base[name] = _array(fp)
        elif name in quantized:
            base[name] = dequantize_array(quantized[name])
        else:
            raise FormatError(f"checkpoint has no weights for {name}")
    norms = {}
    for name in norm_names(config):
        if name not in by_name:
            raise FormatError(f"checkpoint has no norm {name}")
        norms[name] = _array(by_name[name])
    adapters = fresh_adapters(config)
    for name, ad in adapters.items():
        try:
            a, b = _array(by_name[f"{name}.A"]), _array(by_name[f"{name}.B"])
        except KeyError:
            raise FormatError(f"checkpoint has no adapter {name}") from None
        if a.shape != ad.A.shape or b.shape != ad.B.shape:
            raise FormatError(f"adapter {name} has the wrong shape")
        adapters[name] = LoraAdapter(name, Tensor(a, requires_grad=True), Tensor(b, requires_grad=True), ad.rank, ad.alpha)
    model = Model(config, base, norms, adapters)
    if quantized:
        # keep the stored codes: re-quantizing a dequantized copy is not guaranteed to be bit-identical
        for q in quantized.values():
            q.packed.flags.writeable = False
        model.quantized = quantized
        model._cache.clear()
    return model


def load_checkpoint(path) -> Model:
    config_map, sections = read_checkpoint(path)
    return model_from_sections(config_map, sections)
