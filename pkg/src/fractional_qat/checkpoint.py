"""Binary checkpoint container.

Layout (little-endian)::

    b"FQAT" | u32 version | u32 manifest length | manifest (UTF-8 JSON)
    | float32 blobs, row-major, in manifest order (weight then bias per layer)

The manifest records model dimensions and, per layer, its id, tag, shapes
and quantizer specs. Saving the same model twice gives identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .layers import Block, ModelDims, QuantLinear, Tag, ToyModel
from .quant import Mode, QuantSpec

MAGIC = b"FQAT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _spec(s):
    return None if s is None else s.to_dict()


def manifest(model: ToyModel) -> dict:
    layers = []
    for lin in model.linears():
        layers.append({
            "id": lin.name,
            "tag": lin.tag.value,
            "weight_shape": list(lin.weight.shape),
            "bias_shape": list(lin.bias.shape) if lin.bias is not None else None,
            "weight_spec": _spec(lin.weight_spec),
            "act_spec": _spec(lin.act_spec),
            "act_mode": lin.act_mode.value,
            "trainable": lin.trainable,
        })
    d = model.dims
    return {"dims": {"d_model": d.d_model, "n_blocks": d.n_blocks, "ff_mult": d.ff_mult, "d_out": d.d_out},
            "layers": layers}


def to_bytes(model: ToyModel) -> bytes:
    head = json.dumps(manifest(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for lin in model.linears():
        for p in lin.parameters():
            f32 = p.data.astype("<f4")
            if not np.array_equal(f32.astype(np.float64), p.data):
                raise CheckpointError(f"{lin.name}: parameter not representable in float32")
            parts.append(np.ascontiguousarray(f32).tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> ToyModel:
    if buf[:4] != MAGIC:
        raise CheckpointError("not an FQAT checkpoint (bad magic)")
    if len(buf) < 12:
        raise CheckpointError("truncated header")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    man = json.loads(buf[12:12 + n].decode("utf-8"))
    pos = 12 + n

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape)) if shape else 1
        end = pos + 4 * count
        if end > len(buf):
            raise CheckpointError("truncated parameter data")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float64)
        pos = end
        return arr.reshape(shape)

    built = {}
    for entry in man["layers"]:
        w = take(entry["weight_shape"])
        b = take(entry["bias_shape"]) if entry["bias_shape"] is not None else None
        ws = QuantSpec.from_dict(entry["weight_spec"]) if entry["weight_spec"] else None
        as_ = QuantSpec.from_dict(entry["act_spec"]) if entry["act_spec"] else None
        lin = QuantLinear(w, b, Tag(entry["tag"]), entry["id"], ws, as_)
        lin.act_mode = Mode(entry["act_mode"])
        lin.set_trainable(entry["trainable"])
        built[entry["id"]] = lin
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after parameters")
    dims = ModelDims(**man["dims"])
    blocks = []
    for i in range(dims.n_blocks):
        names = {"q": "attn.q", "k": "attn.k", "v": "attn.v", "o": "attn.o", "up": "ff.up", "down": "ff.down"}
        blocks.append(Block({k: built[f"blocks.{i}.{v}"] for k, v in names.items()}, dims.d_model))
    return ToyModel(blocks, built["head"], dims)


_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write_bytes(path: str, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: ToyModel, path: str):
    atomic_write_bytes(path, to_bytes(model))


def load_checkpoint(path: str) -> ToyModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
