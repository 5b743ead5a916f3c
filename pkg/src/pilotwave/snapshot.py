"""PWF1 binary field snapshots.

Layout, all little-endian::

    b"PWF1"  uint32 version (=1)  uint32 ndim
    per axis: uint64 npoints, float64 lo, float64 hi, uint8 boundary (0 periodic, 1 box)
    float64 time
    per axis: float64 mass
    row-major amplitudes as float64 (re, im) pairs
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import MagicMismatch, SnapshotError, TruncatedFile, VersionUnsupported
from .qstate import Grid, WaveField

MAGIC = b"PWF1"
VERSION = 1
BOUNDARY_CODES = {"periodic": 0, "box": 1}
_AXIS = struct.Struct("<QddB")


def header_size(ndim: int) -> int:
    return 4 + 4 + 4 + ndim * (8 + 8 + 8 + 1) + 8 + ndim * 8


def encode(field: WaveField) -> bytes:
    g = field.grid
    parts = [MAGIC, struct.pack("<II", VERSION, g.ndim)]
    for k in range(g.ndim):
        parts.append(_AXIS.pack(g.npoints[k], g.lo[k], g.hi[k], BOUNDARY_CODES[g.boundary[k]]))
    parts.append(struct.pack("<d", field.time))
    parts.append(struct.pack(f"<{g.ndim}d", *field.masses))
    data = np.ascontiguousarray(field.amplitudes, dtype="<c16")
    parts.append(data.tobytes(order="C"))
    return b"".join(parts)


def decode(buf: bytes) -> WaveField:
    if len(buf) < 12:
        raise TruncatedFile("snapshot shorter than its fixed header")
    if buf[:4] != MAGIC:
        raise MagicMismatch(f"bad magic {buf[:4]!r}")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VersionUnsupported(f"snapshot version {version} (supported: {VERSION})")
    if len(buf) < header_size(ndim):
        raise TruncatedFile("snapshot header is incomplete")
    off = 12
    npoints, lo, hi, bnd = [], [], [], []
    codes = {v: k for k, v in BOUNDARY_CODES.items()}
    for _ in range(ndim):
        n, a, b, c = _AXIS.unpack_from(buf, off)
        off += _AXIS.size
        if c not in codes:
            raise SnapshotError(f"unknown boundary code {c}")
        npoints.append(n)
        lo.append(a)
        hi.append(b)
        bnd.append(codes[c])
    (time,) = struct.unpack_from("<d", buf, off)
    off += 8
    masses = struct.unpack_from(f"<{ndim}d", buf, off)
    off += 8 * ndim
    grid = Grid(tuple(npoints), tuple(lo), tuple(hi), tuple(bnd))
    count = int(np.prod(npoints))
    need = off + 16 * count
    if len(buf) < need:
        raise TruncatedFile(f"expected {need} bytes, found {len(buf)}")
    amps = np.frombuffer(buf, dtype="<c16", count=count, offset=off).astype(complex).reshape(grid.shape)
    return WaveField(grid, amps, tuple(masses), time)


def write_snapshot(field: WaveField, path) -> Path:
    path = Path(path)
    path.write_bytes(encode(field))
    return path


def read_snapshot(path) -> WaveField:
    return decode(Path(path).read_bytes())
