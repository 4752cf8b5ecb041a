"""Binary checkpoint format (little-endian, checksummed).

Layout:

    magic   4s   = b"TTQ1"
    version u32  = 1
    cfg_len u32, config JSON (canonical: sorted keys, compact separators)
    digest  32s  = sha256 of the config JSON
    n_rec   u32
    records      (see below)
    crc32   u32  over everything from magic through the last record
    total   u64  file length including this field

Record:

    name_len u16, name utf8
    kind     u8   0 = float32 array, 1 = bit-packed quantized array, 2 = JSON
    kind 0: ndim u8, dims u32*, float32 data
    kind 1: bits u8, scale f32, ndim u8, dims u32*, packed codes
            (two's complement within each field, little-endian within bytes)
    kind 2: len u32, utf8 JSON

Quantized layers store integer codes, not master floats: reloading yields the
dequantized surrogate, which forwards identically to the saved model by
quantizer idempotence.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import quant as q
from .model import (
    DenseEmbedding,
    DenseLinear,
    ModelConfig,
    TransformerModel,
    TTLinearLayer,
    TTMEmbedding,
)
from .tt import TensorShapePlan

MAGIC = b"TTQ1"
VERSION = 1


class CheckpointError(IOError):
    """Corrupt, truncated, or incompatible checkpoint."""


def _canonical_config(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def config_digest(config: ModelConfig) -> str:
    return hashlib.sha256(_canonical_config(config)).hexdigest()


# ---------------------------------------------------------------------------
# Bit packing


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack signed codes at 2/4/8 bits per value, little-endian within bytes."""
    flat = codes.reshape(-1).astype(np.int64)
    masked = (flat & ((1 << bits) - 1)).astype(np.uint8)
    per_byte = 8 // bits
    if per_byte == 1:
        return masked.tobytes()
    pad = (-len(masked)) % per_byte
    if pad:
        masked = np.concatenate([masked, np.zeros(pad, dtype=np.uint8)])
    grouped = masked.reshape(-1, per_byte)
    shifts = np.arange(per_byte, dtype=np.uint8) * bits
    return (grouped << shifts).astype(np.uint8).sum(axis=1, dtype=np.uint8).tobytes()


def unpack_codes(raw: bytes, bits: int, count: int) -> np.ndarray:
    data = np.frombuffer(raw, dtype=np.uint8)
    per_byte = 8 // bits
    if per_byte == 1:
        vals = data.astype(np.int64)
    else:
        shifts = np.arange(per_byte, dtype=np.uint8) * bits
        vals = ((data[:, None] >> shifts) & ((1 << bits) - 1)).reshape(-1).astype(np.int64)
    vals = vals[:count]
    sign_bit = 1 << (bits - 1)
    vals = np.where(vals >= sign_bit, vals - (1 << bits), vals)
    return vals.astype(np.int32)


# ---------------------------------------------------------------------------
# Record walk


def _records_for_model(model: TransformerModel):
    """Deterministic (name, kind, value) record stream covering every
    parameter and the per-layer metadata needed to rebuild it."""

    def tt_linear_records(layer: TTLinearLayer):
        meta = {
            "plan": layer.plan.to_dict(),
            "bits": layer.bits,
            "act_bits": layer.act_bits,
            "act_ready": layer.act_scale_ready,
            "stage_scales": layer.stage_scales,
        }
        yield f"{layer.name}.meta", 2, meta
        for i, core in enumerate(layer.cores):
            if layer.bits != q.FULL_PRECISION:
                yield f"{layer.name}.core{i}", 1, (core.data, float(layer.weight_scale.data), layer.bits)
            else:
                yield f"{layer.name}.core{i}", 0, core.data
        yield f"{layer.name}.bias", 0, layer.bias.data
        if layer.weight_scale is not None:
            yield f"{layer.name}.wscale", 0, np.asarray(layer.weight_scale.data)
        if layer.act_scale is not None:
            yield f"{layer.name}.ascale", 0, np.asarray(layer.act_scale.data)

    emb = model.embedding
    if isinstance(emb, TTMEmbedding):
        yield "embedding.meta", 2, {"plan": emb.plan.to_dict(), "bits": emb.bits}
        for i, core in enumerate(emb.cores):
            if emb.bits != q.FULL_PRECISION:
                yield f"embedding.core{i}", 1, (core.data, float(emb.weight_scale.data), emb.bits)
            else:
                yield f"embedding.core{i}", 0, core.data
        if emb.weight_scale is not None:
            yield "embedding.wscale", 0, np.asarray(emb.weight_scale.data)
    else:
        yield "embedding.table", 0, emb.table.data
    yield "pos_emb", 0, model.pos_emb.data
    yield "ln_emb.gamma", 0, model.ln_emb.gamma.data
    yield "ln_emb.beta", 0, model.ln_emb.beta.data
    for enc in model.encoders:
        for sub in enc.sublayers():
            if isinstance(sub, TTLinearLayer):
                yield from tt_linear_records(sub)
            else:
                yield f"{sub.name}.weight", 0, sub.weight.data
                yield f"{sub.name}.bias", 0, sub.bias.data
        for ln in (enc.ln_attn, enc.ln_ffn):
            yield f"{ln.name}.gamma", 0, ln.gamma.data
            yield f"{ln.name}.beta", 0, ln.beta.data
    for head in (model.intent_head, model.slot_head):
        if isinstance(head.first, TTLinearLayer):
            yield from tt_linear_records(head.first)
        else:
            yield f"{head.first.name}.weight", 0, head.first.weight.data
            yield f"{head.first.name}.bias", 0, head.first.bias.data
        yield f"{head.top.name}.weight", 0, head.top.weight.data
        yield f"{head.top.name}.bias", 0, head.top.bias.data


def checkpoint_save(model: TransformerModel, path: str | Path) -> int:
    """Serialize the model; returns bytes written."""
    records = list(_records_for_model(model))
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    cfg = _canonical_config(model.config)
    out += struct.pack("<I", len(cfg))
    out += cfg
    out += hashlib.sha256(cfg).digest()
    out += struct.pack("<I", len(records))
    for name, kind, value in records:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", kind)
        if kind == 0:
            arr = np.ascontiguousarray(np.asarray(value, dtype=np.float32))
            out += struct.pack("<B", arr.ndim)
            out += struct.pack(f"<{max(arr.ndim, 0)}I", *arr.shape)
            out += arr.tobytes()
        elif kind == 1:
            data, scale, bits = value
            codes = q.quantize(np.asarray(data, dtype=np.float64), scale, bits).codes
            out += struct.pack("<B", bits)
            out += struct.pack("<f", scale)
            out += struct.pack("<B", codes.ndim)
            out += struct.pack(f"<{codes.ndim}I", *codes.shape)
            out += pack_codes(codes, bits)
        else:
            blob = json.dumps(value, sort_keys=True, separators=(",", ":")).encode()
            out += struct.pack("<I", len(blob)) + blob
    crc = zlib.crc32(bytes(out)) & 0xFFFFFFFF
    out += struct.pack("<I", crc)
    out += struct.pack("<Q", len(out) + 8)
    Path(path).write_bytes(bytes(out))
    return len(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_records(reader: _Reader, n: int):
    records = {}
    order = []
    for _ in range(n):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode()
        (kind,) = reader.unpack("<B")
        if kind == 0:
            (ndim,) = reader.unpack("<B")
            shape = reader.unpack(f"<{ndim}I") if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
            records[name] = ("array", arr)
        elif kind == 1:
            (bits,) = reader.unpack("<B")
            (scale,) = reader.unpack("<f")
            (ndim,) = reader.unpack("<B")
            shape = reader.unpack(f"<{ndim}I")
            count = int(np.prod(shape))
            per_byte = 8 // bits
            nbytes = (count + per_byte - 1) // per_byte
            codes = unpack_codes(reader.take(nbytes), bits, count).reshape(shape)
            records[name] = ("packed", (codes, scale, bits))
        elif kind == 2:
            (blen,) = reader.unpack("<I")
            records[name] = ("json", json.loads(reader.take(blen).decode()))
        else:
            raise CheckpointError(f"unknown record kind {kind}")
        order.append(name)
    return records, order


def checkpoint_load(path: str | Path, rng_seed: int = 0) -> TransformerModel:
    """Rebuild a model from a checkpoint, verifying length and checksum."""
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise CheckpointError("file too short")
    (total,) = struct.unpack("<Q", raw[-8:])
    if total != len(raw):
        raise CheckpointError(f"length mismatch: header says {total}, file is {len(raw)}")
    (crc_stored,) = struct.unpack("<I", raw[-12:-8])
    body = raw[:-12]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("checksum failure")
    reader = _Reader(body)
    if reader.take(4) != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = reader.unpack("<I")
    cfg_bytes = reader.take(cfg_len)
    digest = reader.take(32)
    if hashlib.sha256(cfg_bytes).digest() != digest:
        raise CheckpointError("config digest mismatch")
    config = ModelConfig.from_dict(json.loads(cfg_bytes.decode()))
    (n_rec,) = reader.unpack("<I")
    records, _ = _read_records(reader, n_rec)
    model = TransformerModel(config, rng_seed)
    _restore_model(model, records, config)
    return model


def _restore_model(model: TransformerModel, records: dict, config: ModelConfig):
    dtype = config.np_dtype

    def get_array(name):
        kind, value = records[name]
        if kind != "array":
            raise CheckpointError(f"record {name} has unexpected kind {kind}")
        return value.astype(dtype)

    def restore_core(name, param):
        kind, value = records[name]
        if kind == "array":
            param.data = value.astype(dtype)
        else:
            codes, scale, bits = value
            param.data = (scale * codes.astype(np.float64)).astype(dtype)

    def restore_tt_linear(layer: TTLinearLayer):
        meta = records[f"{layer.name}.meta"][1]
        plan = TensorShapePlan.from_dict(meta["plan"])
        if plan != layer.plan:
            from . import autodiff as ad
            layer.plan = plan
            layer.cores = [ad.Parameter(np.zeros(s, dtype=dtype), name=f"{layer.name}.core{i}")
                           for i, s in enumerate(plan.core_shapes())]
        for i, core in enumerate(layer.cores):
            restore_core(f"{layer.name}.core{i}", core)
        layer.bias.data = get_array(f"{layer.name}.bias")
        if layer.weight_scale is not None:
            layer.weight_scale.data = get_array(f"{layer.name}.wscale").reshape(())
        if layer.act_scale is not None:
            layer.act_scale.data = get_array(f"{layer.name}.ascale").reshape(())
            layer.act_scale_ready = bool(meta.get("act_ready", True))
        stage_scales = meta.get("stage_scales")
        layer.stage_scales = list(stage_scales) if stage_scales else None

    emb = model.embedding
    if isinstance(emb, TTMEmbedding):
        meta = records["embedding.meta"][1]
        plan = TensorShapePlan.from_dict(meta["plan"])
        if plan != emb.plan:
            from . import autodiff as ad
            emb.plan = plan
            emb.cores = [ad.Parameter(np.zeros(s, dtype=dtype), name=f"embedding.core{i}")
                         for i, s in enumerate(plan.core_shapes())]
        for i, core in enumerate(emb.cores):
            restore_core(f"embedding.core{i}", core)
        if emb.weight_scale is not None:
            emb.weight_scale.data = get_array("embedding.wscale").reshape(())
    else:
        emb.table.data = get_array("embedding.table")
    model.pos_emb.data = get_array("pos_emb")
    model.ln_emb.gamma.data = get_array("ln_emb.gamma")
    model.ln_emb.beta.data = get_array("ln_emb.beta")
    for enc in model.encoders:
        for sub in enc.sublayers():
            if isinstance(sub, TTLinearLayer):
                restore_tt_linear(sub)
            else:
                sub.weight.data = get_array(f"{sub.name}.weight")
                sub.bias.data = get_array(f"{sub.name}.bias")
        for ln in (enc.ln_attn, enc.ln_ffn):
            ln.gamma.data = get_array(f"{ln.name}.gamma")
            ln.beta.data = get_array(f"{ln.name}.beta")
    for head in (model.intent_head, model.slot_head):
        if isinstance(head.first, TTLinearLayer):
            restore_tt_linear(head.first)
        else:
            head.first.weight.data = get_array(f"{head.first.name}.weight")
            head.first.bias.data = get_array(f"{head.first.name}.bias")
        head.top.weight.data = get_array(f"{head.top.name}.weight")
        head.top.bias.data = get_array(f"{head.top.name}.bias")


def payload_bytes(model: TransformerModel) -> int:
    """Array payload bytes the checkpoint will contain (no framing): must
    agree with the size-accounting report."""
    total = 0
    for name, kind, value in _records_for_model(model):
        if kind == 0:
            total += 4 * int(np.asarray(value).size)
        elif kind == 1:
            data, _, bits = value
            from .accounting import packed_code_bytes
            total += packed_code_bytes(int(np.asarray(data).size), bits)
    return total
