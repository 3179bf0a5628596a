"""On-disk formats: policy checkpoints, CSV curves and occupancy grids."""

from __future__ import annotations

import csv
import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ContractError
from .policy import MultiHeadPolicy

MAGIC = b"KMYR"
VERSION = 1
_HEAD_TENSORS = 6  # adapter, mean map, log-std map; weight and bias each

CURVE_SCHEMAS = {
    "pretrain": ("epoch", "entropy_nats", "lr", "seed"),
    "jumpstart": ("update", "success_rate", "seed", "init"),
    "diversity": ("head", "kl_nats", "k", "n"),
}


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def checkpoint_bytes(policy: MultiHeadPolicy) -> bytes:
    """Serialize every parameter, in ``policy.parameters()`` order.

    Layout (little-endian): ``b"KMYR"``, u8 version, u32 head count, u32
    tensor count, per tensor u32 ndim and u32 extents, the parameters as
    f64, and a trailing 8-byte blake2b digest of everything before it.
    """
    params = policy.parameters()
    out = bytearray(MAGIC)
    out += struct.pack("<BII", VERSION, policy.n_heads, len(params))
    for p in params:
        out += struct.pack("<I", p.data.ndim)
        out += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
    for p in params:
        out += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    out += _checksum(bytes(out))
    return bytes(out)


def save_checkpoint(policy: MultiHeadPolicy, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(policy))
    return path


def policy_from_bytes(blob: bytes) -> MultiHeadPolicy:
    """Inverse of :func:`checkpoint_bytes`; raises :class:`ChecksumError` on corruption."""
    if len(blob) < 21 or blob[:4] != MAGIC:
        raise ChecksumError("not a policy checkpoint (bad magic)")
    body, digest = blob[:-8], blob[-8:]
    if _checksum(body) != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    version, n_heads, count = struct.unpack_from("<BII", body, 4)
    if version != VERSION:
        raise ChecksumError(f"unsupported checkpoint version {version}")
    offset = 13
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", body, offset)
        offset += 4
        shapes.append(struct.unpack_from(f"<{ndim}I", body, offset))
        offset += 4 * ndim
    trunk = count - _HEAD_TENSORS * n_heads
    if n_heads < 1 or trunk < 2 or trunk % 2:
        raise ChecksumError("inconsistent tensor table")
    trunk_widths = tuple(shapes[i][1] for i in range(0, trunk, 2))
    state_dim = shapes[0][0]
    adapter = shapes[trunk][1]
    action_dim = shapes[trunk + 2][1]
    policy = MultiHeadPolicy(n_heads, state_dim, action_dim, trunk_widths, adapter, seed=None)
    params = policy.parameters()
    if [tuple(p.shape) for p in params] != [tuple(s) for s in shapes]:
        raise ChecksumError("tensor table does not describe a multi-head policy")
    for p, shape in zip(params, shapes):
        n = int(np.prod(shape))
        p.data = np.frombuffer(body, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(body):
        raise ChecksumError("trailing bytes after parameters")
    return policy


def load_checkpoint(path) -> MultiHeadPolicy:
    return policy_from_bytes(Path(path).read_bytes())


class CurveWriter:
    """Append-only CSV with a fixed header, written once when the file is new."""

    def __init__(self, path, kind: str):
        if kind not in CURVE_SCHEMAS:
            raise ContractError(f"unknown curve kind {kind!r}")
        self.path = Path(path)
        self.header = CURVE_SCHEMAS[kind]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists() and self.path.stat().st_size:
            with self.path.open(newline="") as fh:
                found = tuple(next(csv.reader(fh)))
            if found != self.header:
                raise OSError(f"{self.path}: header {found} does not match {self.header}")
        else:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def append(self, *row) -> None:
        if len(row) != len(self.header):
            raise ContractError(f"row needs {len(self.header)} fields")
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([repr(v) if isinstance(v, float) else v for v in row])
            fh.flush()
            os.fsync(fh.fileno())


def read_curve(path) -> tuple[tuple[str, ...], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return tuple(rows[0]), rows[1:]


def write_grid(grid: np.ndarray, half_width: float, path) -> Path:
    """Counts indexed [y, x] with y ascending, written top row first (y descending)."""
    grid = np.asarray(grid)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# bins={grid.shape[0]} arena={half_width!r}"]
    lines += [",".join(str(int(c)) for c in row) for row in np.flipud(grid)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_grid(path) -> tuple[np.ndarray, int, float]:
    """Returns the grid back in [y, x] y-ascending order, with bins and arena half-width."""
    lines = Path(path).read_text().splitlines()
    fields = dict(part.split("=") for part in lines[0].lstrip("# ").split())
    rows = [[int(c) for c in line.split(",")] for line in lines[1:] if line]
    return np.flipud(np.array(rows, dtype=np.int64)), int(fields["bins"]), float(fields["arena"])
