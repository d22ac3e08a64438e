"""Binary formats: sketch tables, and row streams for the command line.

Tables are written sparsely: a fixed little-endian header followed by the
sorted nonzero store keys (int64) and their value rows (float64, row-major).
"""
from __future__ import annotations

import io as _io
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

TABLE_MAGIC = b"GSKS"
TABLE_VERSION = 1
_TABLE_HEADER = struct.Struct("<4sHQIIIQBBIIQIBQI")
_KINDS = {"cs1": 0, "cs2": 1}

STREAM_MAGIC = b"GSKT"
STREAM_VERSION = 1
_STREAM_HEADER = struct.Struct("<4sIQI")


def pack_table(table) -> bytes:
    from .sketch import BucketTable

    keys, vals = table.entries()
    is_cs1 = isinstance(table, BucketTable)
    header = _TABLE_HEADER.pack(
        TABLE_MAGIC,
        TABLE_VERSION,
        table.rows_seen,
        table.d,
        table.n_buckets,
        table.reps,
        table.seed & ((1 << 64) - 1),
        table.order,
        _KINDS[table.tag],
        table.n_cells,
        table.cells_per_instance,
        table.instance_offset,
        table.id_bits if is_cs1 else 0,
        int(is_cs1 and table.keep_candidates),
        len(keys),
        table.width,
    )
    parts = [header, keys.astype("<i8").tobytes(), vals.astype("<f8").tobytes()]
    if is_cs1 and table.keep_candidates:
        cells, ids = table.candidates()
        parts += [struct.pack("<Q", len(ids)), cells.astype("<i8").tobytes(), ids.astype("<i8").tobytes()]
    return b"".join(parts)


def unpack_table(blob: bytes):
    """Rebuild a table (unfrozen, so it can still be merged into)."""
    from .sketch import BucketTable, CoordinateMedianSketch

    if len(blob) < _TABLE_HEADER.size:
        raise InputError("truncated sketch header")
    (magic, version, rows, d, B, reps, seed, order, kind, n_cells, cpi, offset,
     id_bits, keep, nnz, width) = _TABLE_HEADER.unpack_from(blob)
    if magic != TABLE_MAGIC:
        raise InputError("not a sketch blob")
    if version != TABLE_VERSION:
        raise InputError(f"unsupported sketch version {version}")
    kw = dict(n_cells=n_cells, cells_per_instance=cpi, instance_offset=offset, check_ids=False)
    if kind == _KINDS["cs1"]:
        table = BucketTable(d, B, reps, seed, order, id_bits=id_bits, keep_candidates=bool(keep), **kw)
    elif kind == _KINDS["cs2"]:
        table = CoordinateMedianSketch(d, B, reps, seed, order, **kw)
    else:
        raise InputError(f"unknown table kind {kind}")
    if width != table.width:
        raise InputError("payload width disagrees with the header shape")
    pos = _TABLE_HEADER.size
    need = pos + nnz * 8 * (1 + width)
    if len(blob) < need:
        raise InputError("truncated sketch payload")
    keys = np.frombuffer(blob, "<i8", nnz, pos).astype(np.int64)
    pos += nnz * 8
    vals = np.frombuffer(blob, "<f8", nnz * width, pos).reshape(nnz, width).astype(np.float64)
    pos += nnz * width * 8
    table.store.add(np.ascontiguousarray(keys), np.ascontiguousarray(vals))
    if keep:
        (m,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        cells = np.frombuffer(blob, "<i8", m, pos).astype(np.int64)
        ids = np.frombuffer(blob, "<i8", m, pos + 8 * m).astype(np.int64)
        table._cand.append((cells, ids))
    table.rows_seen = rows
    return table


def write_stream(path, A, b) -> None:
    A = np.asarray(A, dtype="<f8")
    b = np.asarray(b, dtype="<f8")
    n, d = A.shape
    with open(path, "wb") as fh:
        fh.write(_STREAM_HEADER.pack(STREAM_MAGIC, STREAM_VERSION, n, d))
        fh.write(np.concatenate([A, b[:, None]], axis=1).astype("<f8").tobytes())


def read_stream(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _STREAM_HEADER.size:
        raise InputError(f"{path}: truncated header")
    magic, version, n, d = _STREAM_HEADER.unpack_from(raw)
    if magic != STREAM_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if version != STREAM_VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    if d < 1 or len(raw) != _STREAM_HEADER.size + n * (d + 1) * 8:
        raise InputError(f"{path}: payload size does not match n={n}, d={d}")
    data = np.frombuffer(raw, "<f8", offset=_STREAM_HEADER.size).reshape(n, d + 1).astype(np.float64)
    if n == 0:
        raise InputError(f"{path}: empty stream")
    return data[:, :d].copy(), data[:, d].copy()


def read_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """One row per line: d feature values then the label."""
    text = Path(path).read_text()
    if not text.strip():
        raise InputError(f"{path}: empty input")
    try:
        data = np.loadtxt(_io.StringIO(text), delimiter=",", ndmin=2, comments="#")
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    if data.shape[1] < 2:
        raise InputError(f"{path}: need at least one feature and a label per row")
    if not np.isfinite(data).all():
        raise InputError(f"{path}: non-finite value")
    return data[:, :-1].copy(), data[:, -1].copy()


def read_rows(path, fmt: str | None = None):
    fmt = fmt or ("bin" if str(path).endswith((".bin", ".gskt")) else "csv")
    if fmt == "bin":
        return read_stream(path)
    if fmt == "csv":
        return read_csv(path)
    raise InputError(f"unknown input format {fmt!r}")
