"""Binary checkpoint format for adapter weights.

Layout (all integers little-endian)::

    b"MOR1" | version u16 | method u8 | d_in, d_out, r, N (u32 each) | alpha f64
    then per tensor: rows u32 | cols u32 | rows*cols f64 (row-major)

Tensor order: LoRA ``A, B``; MoE-LoRA ``A_0, B_0, ..., A_{N-1}, B_{N-1}, Wr``;
MoR ``A, B, omega_a, omega_b, Wr``. The frozen base weight is not stored.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .adapters import LoRALayer, MoELoRALayer, MoRLayer, RouterKind

MAGIC = b"MOR1"
VERSION = 1
METHOD_TAGS = {LoRALayer: 1, MoELoRALayer: 2, MoRLayer: 3}
_HEADER = struct.Struct("<4sHB4Id")
_DIMS = struct.Struct("<2I")
_U32_MAX = 2**32 - 1


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class DimensionError(CheckpointError):
    pass


def _tensors(layer) -> list[np.ndarray]:
    if isinstance(layer, MoRLayer):
        return [layer.A, layer.B, layer.omega_a, layer.omega_b, layer.Wr]
    if isinstance(layer, MoELoRALayer):
        out = []
        for i in range(layer.n_experts):
            out += [layer.A[i], layer.B[i]]
        return out + [layer.Wr]
    return [layer.A, layer.B]


def write_checkpoint(layer, path) -> Path:
    tag = METHOD_TAGS.get(type(layer))
    if tag is None:
        raise TypeError(f"cannot checkpoint {type(layer).__name__}")
    d_out, d_in = layer.W.shape
    n = getattr(layer, "n_experts", 1)
    dims = (d_in, d_out, layer.rank, n)
    if max(dims) > _U32_MAX:
        raise DimensionError(f"dimension overflow: {dims} do not fit in u32")
    parts = [_HEADER.pack(MAGIC, VERSION, tag, *dims, float(layer.alpha))]
    for t in _tensors(layer):
        parts.append(_DIMS.pack(*t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpoint(f"checkpoint truncated while reading {what} "
                                      f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def tensor(self, shape: tuple[int, int], what: str) -> np.ndarray:
        rows, cols = _DIMS.unpack(self.take(_DIMS.size, f"{what} shape"))
        if (rows, cols) != shape:
            raise DimensionError(f"{what} stored as {rows}x{cols}, header implies {shape[0]}x{shape[1]}")
        nbytes = rows * cols * 8
        return np.frombuffer(self.take(nbytes, what), dtype="<f8").astype(np.float64).reshape(rows, cols)


def read_checkpoint(path, W=None, router: RouterKind | None = None):
    """Load a layer. ``W`` supplies the frozen base weight (zeros if omitted)."""
    buf = Path(path).read_bytes()
    rd = _Reader(buf)
    if buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r} in {path}; expected {MAGIC!r}")
    magic, version, tag, d_in, d_out, r, n, alpha = _HEADER.unpack(rd.take(_HEADER.size, "header"))
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version} is not supported (reader knows {VERSION})")
    if 8 * (r * (d_in + d_out) + n) > len(buf):
        raise DimensionError(f"dimension overflow: header dims d_in={d_in} d_out={d_out} r={r} N={n} "
                             f"exceed a {len(buf)}-byte file")
    if W is None:
        W = np.zeros((d_out, d_in))
    elif np.shape(W) != (d_out, d_in):
        raise DimensionError(f"base weight shape {np.shape(W)} does not match checkpoint ({d_out}, {d_in})")

    if tag == METHOD_TAGS[MoRLayer]:
        A = rd.tensor((r, d_in), "A")
        B = rd.tensor((d_out, r), "B")
        oa = rd.tensor((n, r), "omega_a")
        ob = rd.tensor((n, d_out), "omega_b")
        Wr = rd.tensor((n, d_in), "Wr")
        layer = MoRLayer(W, A, B, oa, ob, Wr, alpha, router or RouterKind())
    elif tag == METHOD_TAGS[MoELoRALayer]:
        As, Bs = [], []
        for i in range(n):
            As.append(rd.tensor((r, d_in), f"A_{i}"))
            Bs.append(rd.tensor((d_out, r), f"B_{i}"))
        Wr = rd.tensor((n, d_in), "Wr")
        layer = MoELoRALayer(W, np.stack(As), np.stack(Bs), Wr, alpha)
    elif tag == METHOD_TAGS[LoRALayer]:
        layer = LoRALayer(W, rd.tensor((r, d_in), "A"), rd.tensor((d_out, r), "B"), alpha)
    else:
        raise CheckpointError(f"unknown method tag {tag}")
    if rd.pos != len(buf):
        raise CheckpointError(f"{len(buf) - rd.pos} trailing bytes after last tensor")
    return layer
