"""Shared on-disk formats: the tensor container and JSONL records.

A tensor file is one JSON header line terminated by ``\\n`` followed by the
raw little-endian row-major payload. The header always carries ``dtype``
(``"f32"``, ``"f64"`` or ``"u8"``) plus ``height`` and ``width``; when it
also carries ``classes`` the payload is ``K x H x W``, otherwise ``H x W``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, TypeVar

import numpy as np

from .errors import ConfigError, DataError

T = TypeVar("T")

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}


def dumps(obj: Any) -> str:
    """Compact, deterministic JSON used by every writer in the package."""
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _shape_from_header(header: dict) -> tuple[int, ...]:
    if "shape" in header:
        return tuple(int(s) for s in header["shape"])
    try:
        h, w = int(header["height"]), int(header["width"])
    except KeyError as exc:
        raise DataError(f"tensor header lacks {exc.args[0]!r}") from None
    if "classes" in header:
        return (len(header["classes"]), h, w)
    return (h, w)


def write_tensor(path: str | Path, array: np.ndarray, header: dict) -> None:
    dtype_name = header.get("dtype")
    if dtype_name is None:
        dtype_name = {"float32": "f32", "float64": "f64", "uint8": "u8"}.get(
            array.dtype.name, "f32")
    header = dict(header, dtype=dtype_name)
    expected = _shape_from_header(header)
    if tuple(array.shape) != expected:
        raise DataError(f"array shape {array.shape} does not match header {expected}")
    payload = np.ascontiguousarray(array, dtype=DTYPES[dtype_name]).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(dumps(header).encode() + b"\n")
        fh.write(payload)


def read_tensor(path: str | Path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: bad tensor header: {exc}") from None
    dtype_name = header.get("dtype")
    if dtype_name not in DTYPES:
        raise DataError(f"{path}: unsupported dtype {dtype_name!r}")
    shape = _shape_from_header(header)
    dtype = DTYPES[dtype_name]
    n = int(np.prod(shape))
    if len(payload) != n * dtype.itemsize:
        raise DataError(
            f"{path}: payload has {len(payload)} bytes, header implies {n * dtype.itemsize}")
    array = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return header, array


def rle_encode(plane: np.ndarray) -> list[list[int]]:
    """Runs of ones in a flattened binary plane as ``[start, length]`` pairs."""
    flat = np.asarray(plane, dtype=np.int8).ravel()
    padded = np.concatenate([[0], flat, [0]])
    edges = np.flatnonzero(np.diff(padded))
    starts, ends = edges[0::2], edges[1::2]
    return [[int(s), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode(runs: Iterable[Iterable[int]], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=np.uint8)
    for start, length in runs:
        flat[start:start + length] = 1
    return flat.reshape(shape)


def read_jsonl(path: str | Path, required: Iterable[str] = ()) -> Iterator[dict]:
    """Yield records; a malformed line raises DataError naming file and line."""
    for _, rec in _numbered(path, tuple(required)):
        yield rec


def _numbered(path: str | Path, required: tuple[str, ...]) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in required if k not in rec]
            if missing:
                raise DataError(f"{path}:{lineno}: record lacks {', '.join(missing)}")
            yield lineno, rec


def parse_jsonl(path: str | Path, parse: Callable[[dict], T], required: Iterable[str] = ()) -> list[T]:
    """Apply ``parse`` to every record; conversion failures name file and line."""
    out = []
    for lineno, rec in _numbered(path, tuple(required)):
        try:
            out.append(parse(rec))
        except (ValueError, TypeError, KeyError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def read_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: {exc.msg}") from None


def write_json(path: str | Path, obj: Any, indent: int | None = 2) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=indent, allow_nan=False) + "\n")
