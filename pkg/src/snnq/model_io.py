"""Checkpoints and packed low-bit model files.

Both formats are little-endian and versioned. Quantized files store one
level index per weight, ``bits`` bits each, packed LSB-first and padded to a
byte boundary per layer. Writes go to a temporary file and are renamed into
place.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import quantizer as qz
from .network import Network, NetworkSpec, SynapticLayer, build_network

QUANT_MAGIC = b"SNNQ"
CKPT_MAGIC = b"SNNC"
VERSION = 1
KIND_CODES = {"conv2d": 0, "dense": 1}
DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}

_FILE_HEAD = struct.Struct("<4sH")
_QLAYER = struct.Struct("<BQBffff")
_CKPT_META = struct.Struct("<IdQ")
_CLAYER = struct.Struct("<BQBBddd")


class ModelFileError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class TruncatedError(ModelFileError):
    pass


class HashMismatchError(ModelFileError):
    pass


class InvalidIndexError(ModelFileError):
    pass


class UnsupportedBitsError(ModelFileError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read_head(r: _Reader, magic: bytes):
    got, version = r.unpack(_FILE_HEAD, "header")
    if got != magic:
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}", 0)
    if version != VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {VERSION}", 4)


def _spec_blob(spec: NetworkSpec) -> bytes:
    return spec.to_json().encode()


# ---------------------------------------------------------------------------
# bit packing


def pack_indices(indices, bits: int) -> bytes:
    idx = np.asarray(indices, dtype=np.uint64).reshape(-1)
    if idx.size and int(idx.max()) >= 1 << bits:
        raise ValueError(f"index {int(idx.max())} does not fit in {bits} bits")
    planes = ((idx[:, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(planes.reshape(-1), bitorder="little").tobytes()


def unpack_indices(buf: bytes, bits: int, count: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    planes = np.unpackbits(raw, count=count * bits, bitorder="little").reshape(count, bits)
    return planes.astype(np.int64) @ (1 << np.arange(bits, dtype=np.int64))


def packed_nbytes(count: int, bits: int) -> int:
    return math.ceil(count * bits / 8)


# ---------------------------------------------------------------------------
# size accounting


def model_size_bytes(net: Network, bits: int) -> int:
    """Bytes of a packed model file at ``bits`` per weight (32 = full precision).

    Headers, the spec blob and per-layer scale factors count toward the size.
    """
    if bits not in qz.SUPPORTED_BITS + (32,):
        raise ValueError(f"bits must be one of {qz.SUPPORTED_BITS + (32,)}")
    blob = _spec_blob(replace(net.spec, bits=bits))
    size = _FILE_HEAD.size + 4 + len(blob) + 2
    for syn in net.synaptic_layers:
        size += _QLAYER.size + packed_nbytes(syn.weight.size, bits)
    return size


def compression_ratio(net: Network, bits: int) -> float:
    return model_size_bytes(net, 32) / model_size_bytes(net, bits)


def megabytes(n_bytes: int) -> float:
    """Binary megabytes (2**20 bytes)."""
    return n_bytes / 2**20


# ---------------------------------------------------------------------------
# quantized export / import


def encode_quantized(net: Network) -> bytes:
    if net.spec.bits == 32 or any(s.quant is None for s in net.synaptic_layers):
        raise ValueError("network has 32-bit layers: nothing to pack")
    blob = _spec_blob(net.spec)
    parts = [_FILE_HEAD.pack(QUANT_MAGIC, VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<H", len(net.synaptic_layers))]
    for syn in net.synaptic_layers:
        q = syn.quant
        bits = q.bits
        if bits is None or bits not in qz.SUPPORTED_BITS:
            raise ValueError(f"layer {syn.index}: unsupported bit width {bits}")
        alpha32 = np.float32(q.state.alpha)
        beta32 = np.float32(q.state.beta)
        idx = qz.level_indices(syn.weight, q.spec, q.state.beta)
        levels = q.spec.levels.values
        parts.append(_QLAYER.pack(KIND_CODES[syn.spec.kind], syn.weight.size, bits,
                                  levels[0], levels[-1], alpha32, beta32))
        parts.append(pack_indices(idx, bits))
    return b"".join(parts)


def export_quantized(net: Network, path) -> dict:
    data = encode_quantized(net)
    _atomic_write(path, data)
    return {"bytes": len(data), "compression_ratio": compression_ratio(net, net.spec.bits)}


def decode_quantized(buf: bytes) -> Network:
    """Rebuild an inference network whose hard quantizer reproduces the stored levels."""
    r = _Reader(buf)
    _read_head(r, QUANT_MAGIC)
    blob = r.take(r.u32("spec length"), "spec blob")
    spec = NetworkSpec.from_json(blob.decode())
    n_layers = r.u16("layer count")
    template = build_network(spec, seed=0, dtype=np.float32)
    if n_layers != len(template.synaptic_layers):
        raise ModelFileError(f"file has {n_layers} layers, spec implies {len(template.synaptic_layers)}")
    layers = []
    for syn in template.synaptic_layers:
        at = r.pos
        kind, count, bits, lo, hi, alpha, beta = r.unpack(_QLAYER, f"layer {syn.index} header")
        if kind != KIND_CODES[syn.spec.kind] or count != syn.weight.size:
            raise ModelFileError(f"layer {syn.index} header disagrees with spec", at)
        if bits not in qz.SUPPORTED_BITS:
            raise UnsupportedBitsError(f"layer {syn.index}: unsupported bit width {bits}", at + 9)
        levels = qz.uniform_levels(bits)
        if (lo, hi) != (levels.values[0], levels.values[-1]):
            raise ModelFileError(f"layer {syn.index}: level range ({lo}, {hi}) != {bits}-bit levels", at + 10)
        if not (alpha > 0 and beta > 0):
            raise ModelFileError(f"layer {syn.index}: non-positive scale factor", at + 18)
        idx = unpack_indices(r.take(packed_nbytes(count, bits), f"layer {syn.index} indices"), bits, count)
        if idx.size and idx.max() >= len(levels):
            raise InvalidIndexError(
                f"layer {syn.index}: index {int(idx.max())} >= {len(levels)} levels", at + _QLAYER.size
            )
        beta32 = np.float32(beta)
        # level / beta lands mid-bucket, so the step quantizer returns the same index
        w = (levels.as_array(np.float32)[idx] / beta32).reshape(syn.weight.shape)
        quant = qz.Quantizer(qz.derive_spec(levels), qz.LayerQuantState(float(alpha), float(beta)), bits)
        layers.append(SynapticLayer(syn.index, syn.spec, w, quant))
    if r.pos != len(buf):
        raise ModelFileError("trailing bytes after last layer", r.pos)
    return Network(spec, layers, np.float32)


def import_quantized(path) -> Network:
    return decode_quantized(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(net: Network, epoch: int = 0, temperature: float = 1.0, seed: int = 0) -> bytes:
    blob = _spec_blob(net.spec)
    parts = [
        _FILE_HEAD.pack(CKPT_MAGIC, VERSION),
        struct.pack("<B", DTYPE_CODES[net.dtype]),
        struct.pack("<I", len(blob)),
        blob,
        hashlib.sha256(blob).digest(),
        _CKPT_META.pack(epoch, temperature, seed),
        struct.pack("<H", len(net.synaptic_layers)),
    ]
    for syn in net.synaptic_layers:
        q = syn.quant
        st = q.state if q is not None else qz.LayerQuantState()
        parts.append(_CLAYER.pack(KIND_CODES[syn.spec.kind], syn.weight.size, q is not None,
                                  q.bits if q is not None else 32, st.alpha, st.beta, st.temperature))
        parts.append(np.ascontiguousarray(syn.weight, dtype=net.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def save_checkpoint(net: Network, path, epoch: int = 0, temperature: float = 1.0, seed: int = 0) -> None:
    _atomic_write(path, encode_checkpoint(net, epoch, temperature, seed))


def decode_checkpoint(buf: bytes):
    """Return ``(network, metadata)``; metadata holds epoch, temperature, seed."""
    r = _Reader(buf)
    _read_head(r, CKPT_MAGIC)
    code = r.take(1, "dtype code")[0]
    dtype = next((d for d, c in DTYPE_CODES.items() if c == code), None)
    if dtype is None:
        raise ModelFileError(f"unknown dtype code {code}", r.pos - 1)
    blob = r.take(r.u32("spec length"), "spec blob")
    digest = r.take(32, "spec hash")
    if hashlib.sha256(blob).digest() != digest:
        raise HashMismatchError("spec hash mismatch: checkpoint spec was modified", r.pos - 32)
    spec = NetworkSpec.from_json(blob.decode())
    epoch, temperature, seed = r.unpack(_CKPT_META, "metadata")
    n_layers = r.u16("layer count")
    template = build_network(spec, seed=0, dtype=dtype)
    if n_layers != len(template.synaptic_layers):
        raise ModelFileError(f"file has {n_layers} layers, spec implies {len(template.synaptic_layers)}")
    layers = []
    for syn in template.synaptic_layers:
        at = r.pos
        kind, count, has_q, bits, alpha, beta, temp = r.unpack(_CLAYER, f"layer {syn.index} header")
        if kind != KIND_CODES[syn.spec.kind] or count != syn.weight.size:
            raise ModelFileError(f"layer {syn.index} header disagrees with spec", at)
        raw = r.take(count * dtype.itemsize, f"layer {syn.index} weights")
        w = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(syn.weight.shape)
        quant = None
        if has_q:
            levels = qz.uniform_levels(bits)
            quant = qz.Quantizer(qz.derive_spec(levels), qz.LayerQuantState(alpha, beta, temp), bits)
        layers.append(SynapticLayer(syn.index, syn.spec, w, quant))
    if r.pos != len(buf):
        raise ModelFileError("trailing bytes after last layer", r.pos)
    meta = {"epoch": epoch, "temperature": temperature, "seed": seed}
    return Network(spec, layers, dtype), meta


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path) -> Network:
    return read_checkpoint(path)[0]


def read_magic(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)


def load_any(path) -> Network:
    """Load a checkpoint or a quantized file, dispatching on the magic bytes."""
    magic = read_magic(path)
    if magic == CKPT_MAGIC:
        return load_checkpoint(path)
    if magic == QUANT_MAGIC:
        return import_quantized(path)
    raise BadMagicError(f"unrecognised model file magic {magic!r}", 0)
