"""Chunked little-endian checkpoint format.

Layout::

    b"IFG1"  u32 format_version
    chunk*   (4-byte tag, u64 payload length, payload)
    u32      CRC32 of every preceding byte

Chunks, in order: CONF (config JSON), ARCH (descriptor JSON), one PARM per
tensor, one OPTS per optimizer, PROG (progress JSON).  A tensor record is
u32 name length, UTF-8 name, u32 rank, rank x u64 extents, raw float64
values.  An OPTS payload is a u32-length-prefixed name, a u32-length-prefixed
JSON header and a u32 count of tensor records (first/second moments).
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .models import ModelBundle, desc_from_dict, desc_to_dict, init_buffers
from .nn import Adam, ParamStore
from .tensor import Tensor

MAGIC = b"IFG1"
FORMAT_VERSION = 1
BUFFER_SUFFIXES = (".running_mean", ".running_var")

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    parts = [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
    parts += [_U64.pack(n) for n in arr.shape]
    parts.append(arr.tobytes())
    return b"".join(parts)


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return tag + _U64.pack(len(payload)) + payload


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        shape = tuple(self.u64() for _ in range(self.u32()))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return name, arr.astype(np.float64)

    def done(self) -> bool:
        return self.pos == len(self.buf)


@dataclass
class Checkpoint:
    config: dict
    arch: dict
    tensors: dict[str, np.ndarray]
    optimizers: dict[str, tuple[dict, dict[str, np.ndarray]]]
    progress: dict = field(default_factory=dict)


def encode(ck: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + _U32.pack(FORMAT_VERSION))
    out.write(_chunk(b"CONF", _json_bytes(ck.config)))
    out.write(_chunk(b"ARCH", _json_bytes(ck.arch)))
    for name, arr in ck.tensors.items():
        out.write(_chunk(b"PARM", _tensor_record(name, arr)))
    for opt_name, (header, moments) in ck.optimizers.items():
        raw = opt_name.encode("utf-8")
        hdr = _json_bytes(header)
        payload = [_U32.pack(len(raw)), raw, _U32.pack(len(hdr)), hdr, _U32.pack(len(moments))]
        payload += [_tensor_record(n, a) for n, a in moments.items()]
        out.write(_chunk(b"OPTS", b"".join(payload)))
    out.write(_chunk(b"PROG", _json_bytes(ck.progress)))
    body = out.getvalue()
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("not an IF-GAN checkpoint (bad magic)")
    body, crc = buf[:-4], _U32.unpack(buf[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch (file corrupt)")
    version = _U32.unpack(body[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    r = _Reader(body[8:])
    ck = Checkpoint({}, {}, {}, {})
    seen = set()
    while not r.done():
        tag = r.take(4)
        payload = _Reader(r.take(r.u64()))
        if tag == b"CONF":
            ck.config = json.loads(payload.buf)
        elif tag == b"ARCH":
            ck.arch = json.loads(payload.buf)
        elif tag == b"PARM":
            name, arr = payload.tensor()
            if name in ck.tensors:
                raise CheckpointError(f"duplicate tensor {name!r}")
            ck.tensors[name] = arr
        elif tag == b"OPTS":
            opt_name = payload.take(payload.u32()).decode("utf-8")
            header = json.loads(payload.take(payload.u32()))
            moments = dict(payload.tensor() for _ in range(payload.u32()))
            ck.optimizers[opt_name] = (header, moments)
        elif tag == b"PROG":
            ck.progress = json.loads(payload.buf)
        else:
            raise CheckpointError(f"unknown chunk tag {tag!r}")
        seen.add(tag)
    missing = {b"CONF", b"ARCH", b"PROG"} - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks chunks {sorted(t.decode() for t in missing)}")
    return ck


def from_training(config: TrainConfig, models: ModelBundle, opts, step: int) -> Checkpoint:
    tensors = {}
    for store in (models.g, models.d, models.e):
        for name, t in store.items():
            tensors[name] = t.data
    for name, rs in models.e_buffers.items():
        tensors[name + ".running_mean"] = rs.mean
        tensors[name + ".running_var"] = rs.var
    optimizers = {}
    for key, opt in (("G", opts.g), ("D", opts.d), ("E", opts.e)):
        s = opt.state
        header = {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "step": s.step}
        moments = {}
        for name in opt.params:
            if name in s.m:
                moments["m/" + name] = s.m[name]
                moments["v/" + name] = s.v[name]
        optimizers[key] = (header, moments)
    arch = {"G": desc_to_dict(models.g_desc), "D": desc_to_dict(models.d_desc), "E": desc_to_dict(models.e_desc)}
    return Checkpoint(config.to_dict(), arch, tensors, optimizers, {"step": step})


def to_training(ck: Checkpoint, dtype=None):
    """Rebuild (config, models, optimizers, step) from a decoded checkpoint."""
    from .training import Optimizers

    config = TrainConfig.from_dict(ck.config)
    dtype = dtype or config.dtype
    g_desc, d_desc, e_desc = (desc_from_dict(ck.arch[k]) for k in ("G", "D", "E"))

    def store(desc, prefix):
        st = ParamStore()
        for spec in desc.param_specs(prefix):
            if spec.name not in ck.tensors:
                raise CheckpointError(f"checkpoint lacks parameter {spec.name!r}")
            arr = ck.tensors[spec.name]
            if arr.shape != spec.shape:
                raise CheckpointError(f"parameter {spec.name!r} has shape {arr.shape}, expected {spec.shape}")
            st.add(spec.name, Tensor(arr.astype(dtype)))
        return st

    buffers = init_buffers(e_desc, "E", dtype)
    for name, rs in buffers.items():
        rs.mean[:] = ck.tensors[name + ".running_mean"]
        rs.var[:] = ck.tensors[name + ".running_var"]
    models = ModelBundle(g_desc, d_desc, e_desc, store(g_desc, "G"), store(d_desc, "D"),
                         store(e_desc, "E"), buffers)

    def optimizer(key, params):
        header, moments = ck.optimizers[key]
        opt = Adam(params, header["lr"], header["beta1"], header["beta2"], header["eps"])
        opt.state.step = header["step"]
        for name in params:
            if "m/" + name in moments:
                opt.state.m[name] = moments["m/" + name].astype(dtype)
                opt.state.v[name] = moments["v/" + name].astype(dtype)
        return opt

    opts = Optimizers(optimizer("G", models.g), optimizer("D", models.d), optimizer("E", models.e))
    return config, models, opts, int(ck.progress.get("step", 0))


def save(path, config: TrainConfig, models: ModelBundle, opts, step: int) -> bytes:
    data = encode(from_training(config, models, opts, step))
    Path(path).write_bytes(data)
    return data


def load(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    return decode(buf)
