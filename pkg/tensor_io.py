#!/usr/bin/env python3
"""
Raw tensor files ("ETSR")

LAYOUT (little-endian):
- magic b"ETSR", one version byte
- rank as u32, then one u32 per extent
- row-major data: version 1 stores float32 (images, voxel grids),
  version 2 stores float64 (checkpoint parameters, lossless)

Computation always upcasts to float64 on read.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np

from tensor_engine import Tensor
from validation_utils import ErrorHandler, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"ETSR"
STORAGE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_U32 = np.dtype("<u4")


def _malformed(reason: str, source: str = "buffer") -> ValidationError:
    return ValidationError(
        f"Malformed tensor file ({source}): {reason}",
        error_code="MALFORMED_TENSOR_FILE",
        category=ValidationError.FILE_ERROR,
        suggestions=["Regenerate the file with write_tensor()"]
    )


def encode_tensor(values: Union[Tensor, np.ndarray], version: int = 1) -> bytes:
    array = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    if version not in STORAGE_DTYPES:
        raise _malformed(f"unknown version {version}")
    header = MAGIC + bytes([version]) + np.array([array.ndim, *array.shape], dtype=_U32).tobytes()
    return header + np.ascontiguousarray(array, dtype=STORAGE_DTYPES[version]).tobytes()


def decode_tensor(payload: bytes, source: str = "buffer") -> np.ndarray:
    if len(payload) < 9 or payload[:4] != MAGIC:
        raise _malformed("missing ETSR magic", source)
    version = payload[4]
    if version not in STORAGE_DTYPES:
        raise _malformed(f"unsupported version {version}", source)
    rank = int(np.frombuffer(payload, dtype=_U32, count=1, offset=5)[0])
    offset = 9 + 4 * rank
    if len(payload) < offset:
        raise _malformed("truncated header", source)
    shape = tuple(int(e) for e in np.frombuffer(payload, dtype=_U32, count=rank, offset=9))
    dtype = STORAGE_DTYPES[version]
    count = int(np.prod(shape)) if rank else 1
    if len(payload) != offset + count * dtype.itemsize:
        raise _malformed(f"expected {count} values for shape {shape}", source)
    data = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    return data.astype(np.float64).reshape(shape)


def write_tensor(path: Union[str, Path], values: Union[Tensor, np.ndarray], version: int = 1) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_tensor(values, version))
    except OSError as e:
        raise ValidationError(ErrorHandler.handle_file_error(e, path, "writing tensor"),
                              error_code="TENSOR_WRITE_FAILED", category=ValidationError.FILE_ERROR)
    logger.debug(f"Wrote tensor {path}")
    return path


def read_tensor(path: Union[str, Path]) -> Tensor:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise ValidationError(ErrorHandler.handle_file_error(e, path, "reading tensor"),
                              error_code="TENSOR_READ_FAILED", category=ValidationError.FILE_ERROR)
    return Tensor(decode_tensor(payload, source=str(path)))
