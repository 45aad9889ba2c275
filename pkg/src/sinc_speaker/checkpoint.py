"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic       4 bytes  b"CSNC"
    version     u32
    n_scalars   u32
    scalar      u16 name length, UTF-8 name, u8 tag, value
                  tag b"i": i64   b"f": f64   b"?": u8
                  tag b"s": u32 length + UTF-8
                  tag b"I": u32 count + count * i64
                  tag b"S": u32 count + count * (u32 length + UTF-8)
    n_arrays    u32
    array       u16 name length, UTF-8 name, u8 dtype (1 = f32, 2 = f64),
                u8 ndim, ndim * u64 dims, raw little-endian data
    crc32       u32 over every preceding byte
"""

import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointPayloadError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ClassCountMismatchError,
    ConfigError,
)
from .losses import CurriculumState, LossConfig
from .model import ModelConfig, ModelWeights

MAGIC = b"CSNC"
FORMAT_VERSION = 1

DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_CODES = {"float32": 1, "float64": 2}


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_scalar(name: str, value: Any) -> bytes:
    out = _pack_name(name)
    if isinstance(value, bool):
        return out + b"?" + struct.pack("<B", int(value))
    if isinstance(value, (int, np.integer)):
        return out + b"i" + struct.pack("<q", int(value))
    if isinstance(value, (float, np.floating)):
        return out + b"f" + struct.pack("<d", float(value))
    if isinstance(value, str):
        return out + b"s" + _pack_str(value)
    if isinstance(value, (list, tuple)):
        if all(isinstance(v, str) for v in value) and value:
            return out + b"S" + struct.pack("<I", len(value)) + b"".join(_pack_str(v) for v in value)
        return out + b"I" + struct.pack("<I", len(value)) + struct.pack(f"<{len(value)}q", *value)
    raise ConfigError(f"cannot store scalar '{name}' of type {type(value).__name__}")


def _collect_scalars(weights: ModelWeights) -> List[Tuple[str, Any]]:
    scalars = [(f"model.{k}", v) for k, v in weights.config.to_scalars().items()]
    scalars += [(f"loss.{k}", v) for k, v in weights.loss_config.to_scalars().items()]
    scalars += [
        ("class_count", weights.class_count),
        ("curriculum.t", float(weights.curriculum.t)),
        ("curriculum.batch_index", weights.curriculum.batch_index),
        ("speakers", list(weights.speakers)),
    ]
    return scalars


def encode_checkpoint(weights: ModelWeights, dtype: str = "float64") -> bytes:
    """Serialize weights to checkpoint bytes.

    Args:
        weights: Weights to store.
        dtype: ``float64`` (exact) or ``float32`` (half the size).
    """
    if dtype not in DTYPE_CODES:
        raise ConfigError(f"checkpoint dtype must be one of {list(DTYPE_CODES)}, got '{dtype}'")
    code = DTYPE_CODES[dtype]
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]

    scalars = _collect_scalars(weights)
    parts.append(struct.pack("<I", len(scalars)))
    parts.extend(_pack_scalar(name, value) for name, value in scalars)

    parts.append(struct.pack("<I", len(weights.arrays)))
    for name, array in weights.arrays.items():
        data = np.ascontiguousarray(array, dtype=DTYPE_TAGS[code])
        parts.append(_pack_name(name))
        parts.append(struct.pack("<BB", code, data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes())

    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(weights: ModelWeights, path: Union[str, Path], dtype: str = "float64") -> Path:
    """Write a checkpoint atomically (temporary file, then rename).

    Returns:
        The checkpoint path.
    """
    path = Path(path)
    payload = encode_checkpoint(weights, dtype)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointTruncatedError(
                f"checkpoint ends early: needed {n} bytes at offset {self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (length,) = self.unpack("<H")
        return self._decode(self.take(length))

    def string(self) -> str:
        (length,) = self.unpack("<I")
        return self._decode(self.take(length))

    @staticmethod
    def _decode(raw: bytes) -> str:
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"corrupted name in checkpoint: {e}") from e


def _read_scalar(reader: _Reader) -> Tuple[str, Any]:
    name = reader.name()
    tag = reader.take(1)
    if tag == b"i":
        return name, reader.unpack("<q")[0]
    if tag == b"f":
        return name, reader.unpack("<d")[0]
    if tag == b"?":
        return name, bool(reader.unpack("<B")[0])
    if tag == b"s":
        return name, reader.string()
    if tag == b"I":
        (count,) = reader.unpack("<I")
        return name, list(reader.unpack(f"<{count}q"))
    if tag == b"S":
        (count,) = reader.unpack("<I")
        return name, [reader.string() for _ in range(count)]
    raise CheckpointFormatError(f"unknown scalar tag {tag!r} for '{name}'")


def decode_checkpoint(data: bytes) -> ModelWeights:
    """Parse checkpoint bytes.

    Raises:
        CheckpointFormatError: Bad magic, unknown tags or CRC mismatch.
        CheckpointVersionError: Unsupported format version.
        CheckpointTruncatedError: Content ends before it is complete.
        CheckpointPayloadError: Arrays or curriculum state are not finite.
    """
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a sinc-speaker checkpoint (bad magic bytes)")
    if len(data) < len(MAGIC) + 4:
        raise CheckpointTruncatedError("checkpoint ends inside its header")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )

    reader = _Reader(data, max(len(data) - 4, 0))
    reader.pos = 8
    (n_scalars,) = reader.unpack("<I")
    scalars = dict(_read_scalar(reader) for _ in range(n_scalars))

    (n_arrays,) = reader.unpack("<I")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        name = reader.name()
        code, ndim = reader.unpack("<BB")
        if code not in DTYPE_TAGS:
            raise CheckpointFormatError(f"unknown dtype code {code} for array '{name}'")
        shape = reader.unpack(f"<{ndim}Q")
        dtype = DTYPE_TAGS[code]
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = reader.take(count * dtype.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)

    if reader.pos != reader.end:
        raise CheckpointFormatError(f"{reader.end - reader.pos} unexpected bytes before the checksum")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointFormatError("checkpoint checksum mismatch (file is corrupted)")

    for name, array in arrays.items():
        if not np.all(np.isfinite(array)):
            raise CheckpointPayloadError(f"array '{name}' holds non-finite values")

    return _build_weights(scalars, arrays)


def _build_weights(scalars: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> ModelWeights:
    try:
        model_scalars = {k[6:]: v for k, v in scalars.items() if k.startswith("model.")}
        loss_scalars = {k[5:]: v for k, v in scalars.items() if k.startswith("loss.")}
        config = ModelConfig.from_scalars(model_scalars)
        loss_config = LossConfig(**loss_scalars)
        t = scalars["curriculum.t"]
        if not np.isfinite(t):
            raise CheckpointPayloadError("curriculum t is not finite")
        curriculum = CurriculumState(t=t, batch_index=scalars["curriculum.batch_index"])
        class_count = scalars["class_count"]
        speakers = scalars["speakers"]
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointFormatError(f"checkpoint header is incomplete or invalid: {e}") from e
    return ModelWeights(config, class_count, arrays, curriculum, loss_config, speakers)


def load_checkpoint(path: Union[str, Path], expected_classes: Optional[int] = None) -> ModelWeights:
    """Read a checkpoint file.

    Args:
        path: Checkpoint location.
        expected_classes: When given, the head must have exactly this many rows.

    Raises:
        FileNotFoundError: If the file does not exist.
        ClassCountMismatchError: If ``expected_classes`` differs from the stored count.
        CheckpointError: For any other unreadable checkpoint (see ``decode_checkpoint``).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    weights = decode_checkpoint(path.read_bytes())
    if expected_classes is not None and weights.class_count != expected_classes:
        raise ClassCountMismatchError(
            f"checkpoint has {weights.class_count} classes but {expected_classes} are required"
        )
    return weights
