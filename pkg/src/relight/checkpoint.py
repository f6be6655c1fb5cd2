"""Binary checkpoint container for named tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"DWUN"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16, name UTF-8
        dtype    u8   (0 = float32, 1 = float16)
        rank     u8
        dims     rank * u32
        data     raw little-endian values
    metadata u32 length + UTF-8 JSON (model config, preprocessor specs, ...)

float16 storage halves the file; loading always yields float32 tensors
whose values have round-tripped through IEEE half precision.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .autograd import Tensor
from .errors import ConfigError, DataError
from .unet import DwUNet, ModelConfig, build

MAGIC = b"DWUN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_DTYPE_CODES = {"f32": 0, "f16": 1}


def checkpoint_bytes(model: DwUNet, dtype: str = "f32",
                     metadata: Optional[dict] = None) -> bytes:
    if dtype not in _DTYPE_CODES:
        raise ConfigError(f"checkpoint dtype must be 'f32' or 'f16', got {dtype!r}")
    code = _DTYPE_CODES[dtype]
    np_dtype = _DTYPES[code]
    meta = dict(metadata or {})
    meta.setdefault("config", model.config.to_dict())

    chunks = [MAGIC, struct.pack("<II", VERSION, len(model.params))]
    for name, p in model.named_params():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data).astype(np_dtype).tobytes())
    meta_bytes = json.dumps(meta).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    return b"".join(chunks)


def save_checkpoint(model: DwUNet, path: str | Path, dtype: str = "f32",
                    metadata: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, dtype, metadata))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"truncated checkpoint {self.source}: "
                            f"needed {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a checkpoint into float32 arrays plus its metadata dict."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw, str(path))
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise DataError(f"{path}: unknown dtype code {code} for tensor {name!r}")
        dims = r.unpack(f"<{rank}I")
        np_dtype = _DTYPES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * np_dtype.itemsize
        arr = np.frombuffer(r.take(n_bytes), dtype=np_dtype).reshape(dims)
        tensors[name] = arr.astype(np.float32)
    (meta_len,) = r.unpack("<I")
    try:
        metadata = json.loads(r.take(meta_len).decode("utf-8")) if meta_len else {}
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt metadata block: {exc}") from exc
    return tensors, metadata


def load_into(model: DwUNet, path: str | Path) -> dict:
    """Load tensors into an existing model; names and shapes must match exactly."""
    tensors, metadata = read_checkpoint(path)
    # diagnose shape disagreements on shared names first: they point at the
    # actual problem (wrong config size) better than extra/missing names do
    for name, p in model.named_params():
        if name in tensors and tensors[name].shape != p.data.shape:
            raise DataError(
                f"{path}: shape mismatch for {name!r}: checkpoint has "
                f"{tensors[name].shape}, model config needs {p.data.shape}"
            )
    for name in tensors:
        if name not in model.params:
            raise DataError(f"{path}: unknown tensor name {name!r} for this model config")
    for name, p in model.named_params():
        if name not in tensors:
            raise DataError(f"{path}: missing tensor {name!r}")
        p.data = tensors[name]
        p.grad = None
    return metadata


def load_checkpoint(path: str | Path) -> tuple[DwUNet, dict]:
    """Rebuild a model from the config embedded in the checkpoint metadata."""
    tensors, metadata = read_checkpoint(path)
    if "config" not in metadata:
        raise DataError(f"{path}: checkpoint has no embedded model config; "
                        f"build a model and use load_into()")
    config = ModelConfig.from_dict(metadata["config"])
    model = build(config, seed=0)
    extra = set(tensors) - set(model.params)
    missing = set(model.params) - set(tensors)
    if extra or missing:
        raise DataError(
            f"{path}: tensor names do not match config "
            f"(extra: {sorted(extra)[:3]}, missing: {sorted(missing)[:3]})"
        )
    for name, p in model.named_params():
        if tensors[name].shape != p.data.shape:
            raise DataError(
                f"{path}: shape mismatch for {name!r}: checkpoint has "
                f"{tensors[name].shape}, config needs {p.data.shape}"
            )
        p.data = tensors[name]
    return model, metadata


def fp16_size(model: DwUNet, metadata: Optional[dict] = None) -> int:
    """Exact byte size of this model saved with float16 storage."""
    return len(checkpoint_bytes(model, "f16", metadata))


def load_tensor_map(path: str | Path) -> dict[str, Tensor]:
    tensors, _ = read_checkpoint(path)
    return {k: Tensor(v) for k, v in tensors.items()}
