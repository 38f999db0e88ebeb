"""Binary checkpoints for bare and adapted encoders.

Layout (all integers little-endian)::

    magic  b"PEFTCKPT"
    u32    format version
    sections, each: 4-byte tag, u64 payload length, payload
        CONF  ModelConfig as key-value text
        HEAD  head kind and label count as key-value text
        COMP  CompositionSpec as key-value text (adapted models only)
        META  free-form key-value text (optional)
        TENS  u32 count, then per tensor: u32 name length, UTF-8 name,
              u32 ndim, ndim x u64 dims, float64 LE values in row-major order
        END_  empty payload

Values are always written as float64, so a 64-bit model round-trips
bit-exactly.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from . import kvtext
from .autograd import Tensor
from .composition import AdaptedModel, CompositionSpec, attach
from .encoder import EncoderModel, ModelConfig, init_model
from .errors import InputError

MAGIC = b"PEFTCKPT"
VERSION = 1
_LE_F64 = np.dtype("<f8")


def _section(out: io.BytesIO, tag: bytes, payload: bytes) -> None:
    out.write(tag)
    out.write(struct.pack("<Q", len(payload)))
    out.write(payload)


def _tensor_blob(params: dict[str, Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype=_LE_F64).tobytes())
    return buf.getvalue()


def dumps_checkpoint(model, meta: dict[str, str] | None = None) -> bytes:
    if isinstance(model, AdaptedModel):
        base, spec = model.base, model.spec
    elif isinstance(model, EncoderModel):
        base, spec = model, None
    else:
        raise InputError(f"cannot checkpoint a {type(model).__name__}")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    _section(out, b"CONF", kvtext.dumps(base.config.to_dict()).encode())
    head = {"head": base.head or "none", "num_labels": base.num_labels}
    _section(out, b"HEAD", kvtext.dumps(head).encode())
    if spec is not None:
        _section(out, b"COMP", spec.dumps().encode())
    if meta:
        _section(out, b"META", kvtext.dumps(meta).encode())
    _section(out, b"TENS", _tensor_blob(dict(model.named_parameters())))
    _section(out, b"END_", b"")
    return out.getvalue()


def save_checkpoint(model, path, meta: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(model, meta))


class _Reader:
    def __init__(self, data: bytes, where: str):
        self.data, self.pos, self.where = data, 0, where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise InputError(f"{self.where}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensors(payload: bytes, where: str) -> dict[str, np.ndarray]:
    r = _Reader(payload, where)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(r.take(8 * size), dtype=_LE_F64).reshape(shape)
        out[name] = arr.astype(np.float64)
    if r.pos != len(payload):
        raise InputError(f"{where}: trailing bytes in tensor section")
    return out


def read_sections(data: bytes, where: str = "<bytes>") -> dict[str, bytes]:
    r = _Reader(data, where)
    if r.take(len(MAGIC)) != MAGIC:
        raise InputError(f"{where}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise InputError(f"{where}: unsupported checkpoint version {version}")
    sections: dict[str, bytes] = {}
    while True:
        tag = r.take(4).decode("ascii")
        (length,) = r.unpack("<Q")
        payload = r.take(length)
        if tag == "END_":
            return sections
        sections[tag] = payload


def loads_checkpoint(data: bytes, where: str = "<bytes>"):
    """Rebuild the model; returns ``(model, meta)``."""
    sec = read_sections(data, where)
    for tag in ("CONF", "HEAD", "TENS"):
        if tag not in sec:
            raise InputError(f"{where}: missing {tag} section")
    cfg = ModelConfig.from_dict(kvtext.loads(sec["CONF"].decode()))
    head = kvtext.loads(sec["HEAD"].decode())
    kind = None if head["head"] == "none" else head["head"]
    model = init_model(cfg, 0, head=kind, num_labels=int(head["num_labels"]))
    if "COMP" in sec:
        spec = CompositionSpec.from_dict(kvtext.loads(sec["COMP"].decode()))
        model = attach(model, spec)
    stored = _read_tensors(sec["TENS"], where)
    params = dict(model.named_parameters())
    if set(stored) != set(params):
        missing = sorted(set(params) - set(stored))[:3]
        extra = sorted(set(stored) - set(params))[:3]
        raise InputError(f"{where}: tensor names do not match the model "
                         f"(missing {missing}, unexpected {extra})")
    for name, arr in stored.items():
        t = params[name]
        if arr.shape != t.data.shape:
            raise InputError(f"{where}: tensor {name} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.astype(cfg.dtype, copy=True)
    meta = kvtext.loads(sec["META"].decode()) if "META" in sec else {}
    return model, meta


def load_checkpoint(path):
    path = Path(path)
    return loads_checkpoint(path.read_bytes(), str(path))
