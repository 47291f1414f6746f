"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      4 bytes   b"NTF1"
    version    u16       currently 1
    reserved   u16       0
    body_len   u64       number of body bytes that follow
    body:
      config   u32 length + UTF-8 "key=value" lines
      flags    u16 count, then per component: u8 name length, name, u8 frozen
      arrays   u32 count, then per array:
                 u16 name length, name, u8 ndim, u32 * ndim extents,
                 float32 values in C order
    crc32      u32       CRC-32 of every preceding byte

Parameters are always stored as float32, so only float32 bundles
round-trip bitwise.

Validation order on load: length, magic, version, declared length, CRC,
then structure. Each failure raises its own ``CheckpointError`` subclass.
"""

from __future__ import annotations

import io
import os
import struct
import zlib

import numpy as np

from .errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import COMPONENTS, EncoderConfig, ModelBundle
from .tensor import Tensor

MAGIC = b"NTF1"
VERSION = 1
_HEADER = struct.Struct("<4sHHQ")


def _encode_config(config, meta):
    lines = [
        f"input_size={config.input_size}",
        "channels=" + ",".join(str(c) for c in config.channels),
        f"embed_dim={config.embed_dim}",
        f"proj_dim={config.proj_dim}",
        f"kernel={config.kernel}",
    ]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta.{key}={value}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_config(text):
    values, meta = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"bad config line {line!r}")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            values[key] = value
    try:
        config = EncoderConfig(
            input_size=int(values["input_size"]),
            channels=tuple(int(c) for c in values["channels"].split(",")),
            embed_dim=int(values["embed_dim"]),
            proj_dim=int(values["proj_dim"]),
            kernel=int(values["kernel"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"bad encoder config: {exc}") from exc
    return config, meta


def to_bytes(bundle, meta=None):
    body = io.BytesIO()
    cfg = _encode_config(bundle.config, meta)
    body.write(struct.pack("<I", len(cfg)))
    body.write(cfg)
    body.write(struct.pack("<H", len(bundle.frozen)))
    for comp in COMPONENTS:
        name = comp.encode()
        body.write(struct.pack("<B", len(name)) + name + struct.pack("<B", int(bundle.frozen[comp])))
    body.write(struct.pack("<I", len(bundle.params)))
    for pname, t in bundle.params.items():
        name = pname.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        body.write(struct.pack("<H", len(name)) + name)
        body.write(struct.pack("<B", arr.ndim))
        body.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.write(arr.tobytes())
    payload = _HEADER.pack(MAGIC, VERSION, 0, body.tell()) + body.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(bundle, path, meta=None):
    data = to_bytes(bundle, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("checkpoint body ends inside a record")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def from_bytes(data):
    """Parse checkpoint bytes into ``(bundle, meta)``."""
    if len(data) < 4:
        raise CheckpointTruncatedError("file shorter than the magic number")
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError("file shorter than the header")
    _, version, _, body_len = _HEADER.unpack_from(data)
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    end = _HEADER.size + body_len
    if len(data) < end + 4:
        raise CheckpointTruncatedError(f"expected {end + 4} bytes, file has {len(data)}")
    (stored_crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != stored_crc:
        raise CheckpointChecksumError("CRC-32 mismatch")

    r = _Reader(data[_HEADER.size : end])
    (cfg_len,) = r.unpack("<I")
    try:
        config, meta = _decode_config(r.take(cfg_len).decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError("config section is not UTF-8") from exc
    frozen = {}
    (n_comp,) = r.unpack("<H")
    for _ in range(n_comp):
        (nlen,) = r.unpack("<B")
        name = r.take(nlen).decode("utf-8", "replace")
        (flag,) = r.unpack("<B")
        frozen[name] = bool(flag)
    params = {}
    (n_arr,) = r.unpack("<I")
    for _ in range(n_arr):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", "replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)

    if set(frozen) != set(COMPONENTS):
        raise CheckpointFormatError(f"component flags {sorted(frozen)} do not match {list(COMPONENTS)}")
    expected = ModelBundle.initialize(config)
    missing = [n for n in expected.params if n not in params]
    if missing:
        raise CheckpointFormatError(f"checkpoint missing arrays: {', '.join(missing)}")
    for n, t in expected.params.items():
        if params[n].shape != t.shape:
            raise CheckpointFormatError(f"array {n} has shape {params[n].shape}, expected {t.shape}")
    ordered = {n: params[n] for n in expected.params}
    return ModelBundle(config, ordered, {c: frozen[c] for c in COMPONENTS}), meta


def load_checkpoint(path, with_meta=False):
    with open(path, "rb") as fh:
        data = fh.read()
    bundle, meta = from_bytes(data)
    return (bundle, meta) if with_meta else bundle
