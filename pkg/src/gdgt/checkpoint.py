"""Binary checkpoint container.

Layout (little-endian)::

    b"GDGT" | u32 version | u32 count
    count x ( u16 name_len | name (UTF-8) | u8 dtype | u8 rank | u32 dims[rank] | data )
    u32 CRC32 of everything above

dtype codes: 0 float32, 1 uint8 (opaque blobs such as the JSON config),
2 float64. The model config is stored as a JSON blob named ``__config__``;
other ``__``-prefixed entries carry optimizer and sampler state.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError
from .model import GDGT, ModelConfig

MAGIC = b"GDGT"
VERSION = 1
CONFIG_KEY = "__config__"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[dt]]).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC[: len(blob)]:
        raise FormatError("not a GDGT checkpoint (bad magic)")
    if len(blob) < 16:
        raise IntegrityError(f"checkpoint truncated to {len(blob)} bytes")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("checkpoint CRC mismatch: file is truncated or corrupted")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    pos = 12
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            if code not in _DTYPES:
                raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise IntegrityError(f"tensor {name!r} runs past the end of the file")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as e:
        raise IntegrityError(f"malformed tensor table: {e}") from e
    if pos != len(body):
        raise IntegrityError(f"{len(body) - pos} trailing bytes after the tensor table")
    if len(out) != count:
        raise IntegrityError("duplicate tensor names in checkpoint")
    return out


def json_blob(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def read_json_blob(arr: np.ndarray):
    return json.loads(arr.tobytes().decode("utf-8"))


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def model_tensors(model: GDGT) -> dict[str, np.ndarray]:
    tensors = {CONFIG_KEY: json_blob(model.cfg.to_dict())}
    for name, p in model.named_parameters():
        tensors[name] = p.data
    return tensors


def save_checkpoint(model: GDGT, path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write the model's parameters and config; ``extra`` entries must be ``__``-prefixed."""
    tensors = model_tensors(model)
    for k, v in (extra or {}).items():
        if not k.startswith("__"):
            raise ValueError(f"extra entry {k!r} must start with '__'")
        tensors[k] = v
    write_atomic(path, encode(tensors))


def _config_mismatch(saved: ModelConfig, expected: ModelConfig) -> list[str]:
    a, b = saved.to_dict(), expected.to_dict()
    return [f"{k}: checkpoint has {a[k]!r}, requested {b[k]!r}" for k in a if a[k] != b[k]]


def load_checkpoint(path, expected: ModelConfig | None = None, with_extra: bool = False):
    """Rebuild a model from ``path``.

    Raises ``FormatError`` for a foreign file, ``IntegrityError`` for
    corruption or missing/unexpected tensors, and ``ConfigError`` when the
    stored config differs from ``expected``. No model is returned on failure.
    """
    tensors = decode(Path(path).read_bytes())
    if CONFIG_KEY not in tensors:
        raise IntegrityError(f"checkpoint has no {CONFIG_KEY} entry")
    try:
        cfg = ModelConfig.from_dict(read_json_blob(tensors[CONFIG_KEY]))
    except (ValueError, TypeError) as e:
        raise IntegrityError(f"unreadable config blob: {e}") from e
    if expected is not None:
        diffs = _config_mismatch(cfg, expected)
        if diffs:
            raise ConfigError("config mismatch; " + "; ".join(diffs))
    model = GDGT(cfg)
    names = {n for n, _ in model.named_parameters()}
    stored = {n for n in tensors if not n.startswith("__")}
    missing, unexpected = sorted(names - stored), sorted(stored - names)
    if missing or unexpected:
        raise IntegrityError(f"tensor set mismatch; missing: {missing}; unexpected: {unexpected}")
    for name, p in model.named_parameters():
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise IntegrityError(f"tensor {name!r} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr.astype(np.float32)
    if with_extra:
        return model, {k: v for k, v in tensors.items() if k.startswith("__") and k != CONFIG_KEY}
    return model
