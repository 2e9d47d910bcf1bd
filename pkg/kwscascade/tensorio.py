"""Little-endian binary containers for posteriorgrams (KWSP), frame embeddings (KWSE)
and named weight tensors (KWSW), plus the CSV fallback used for hand-written fixtures.

All payloads are float32 row-major; headers are packed with ``struct``.
"""
import io
import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from kwscascade.exceptions import FormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

POSTERIOR_MAGIC = b"KWSP"
EMBEDDING_MAGIC = b"KWSE"
WEIGHTS_MAGIC = b"KWSW"
FORMAT_VERSION = 1

_MATRIX_HEADER = struct.Struct("<4sIII")
_WEIGHTS_HEADER = struct.Struct("<4sII")
_FLOAT = np.dtype("<f4")


def _read_exact(fh: io.BufferedIOBase, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise FormatError(f"Truncated file while reading {what}: wanted {size} bytes, got {len(data)}")
    return data


def _check_magic(magic: bytes, expected: bytes, version: int) -> None:
    if magic != expected:
        raise FormatError(f"Bad magic {magic!r}, expected {expected!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported format version {version}, expected {FORMAT_VERSION}")


def write_matrix(path: PathLike, magic: bytes, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise FormatError(f"Expected a 2-D matrix, got shape {values.shape}")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(_MATRIX_HEADER.pack(magic, FORMAT_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(values, dtype=_FLOAT).tobytes())
    logger.debug("Wrote %s matrix %dx%d to %s", magic.decode(), rows, cols, path)


def read_matrix(path: PathLike, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        got, version, rows, cols = _MATRIX_HEADER.unpack(_read_exact(fh, _MATRIX_HEADER.size, "header"))
        _check_magic(got, magic, version)
        payload = _read_exact(fh, rows * cols * _FLOAT.itemsize, "payload")
        if fh.read(1):
            raise FormatError(f"Trailing bytes after {rows}x{cols} payload in {path}")
    logger.debug("Read %s matrix %dx%d from %s", magic.decode(), rows, cols, path)
    return np.frombuffer(payload, dtype=_FLOAT).astype(np.float64).reshape(rows, cols)


def write_matrix_csv(path: PathLike, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{values.shape[0]},{values.shape[1]}\n")
        if values.size:
            np.savetxt(fh, values, delimiter=",", fmt="%.17g")


def read_matrix_csv(path: PathLike) -> np.ndarray:
    """The first row holds the dimensions (``T,V`` or ``T,d``); each further row is one frame."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        try:
            rows, cols = (int(x) for x in header.split(","))
        except ValueError:
            raise FormatError(f"{path}: line 1: expected a 'rows,cols' header, got {header!r}") from None
        body = [line for line in fh if line.strip()]
    if len(body) != rows:
        raise FormatError(f"{path}: header declares {rows} rows but {len(body)} were found")
    values = np.zeros((rows, cols), dtype=np.float64)
    for i, line in enumerate(body):
        cells = line.strip().split(",")
        if len(cells) != cols:
            raise FormatError(f"{path}: line {i + 2}: expected {cols} values, got {len(cells)}")
        try:
            values[i] = [float(c) for c in cells]
        except ValueError:
            raise FormatError(f"{path}: line {i + 2}: non-numeric value") from None
    return values


def is_csv(path: PathLike) -> bool:
    return Path(path).suffix.lower() == ".csv"


def write_named(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, FORMAT_VERSION, len(tensors)))
        for name, value in tensors.items():
            value = np.asarray(value)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype=_FLOAT).tobytes())
    logger.debug("Wrote %d weight tensors to %s", len(tensors), path)


def read_named(path: PathLike) -> Dict[str, np.ndarray]:
    tensors: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic, version, count = _WEIGHTS_HEADER.unpack(_read_exact(fh, _WEIGHTS_HEADER.size, "header"))
        _check_magic(magic, WEIGHTS_MAGIC, version)
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, f"entry {i} name length"))
            try:
                name = _read_exact(fh, name_len, f"entry {i} name").decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError(f"Entry {i}: name is not valid UTF-8") from None
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"{name} dims"))
            size = int(np.prod(shape, dtype=np.int64))
            payload = _read_exact(fh, size * _FLOAT.itemsize, f"{name} data")
            if name in tensors:
                raise FormatError(f"Duplicate weight entry {name!r}")
            tensors[name] = np.frombuffer(payload, dtype=_FLOAT).astype(np.float64).reshape(shape)
        if fh.read(1):
            raise FormatError(f"Trailing bytes after {count} entries in {path}")
    logger.debug("Read %d weight tensors from %s", len(tensors), path)
    return tensors
