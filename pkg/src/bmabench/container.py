"""Little-endian binary container for weight snapshots and related tensors.

Layout, in file order:

    magic            4 bytes ("BMA1" checkpoints, "VIP1" posteriors, "MCS1" samples)
    tensor count     u32
    per tensor       rank u32, then ``rank`` dims as u32
    payload          all tensors as float32, row-major, concatenated
    span             two u64 (start, end) — the last-layer slice of the flat
                     weight vector for checkpoints, (0, 0) otherwise

Checkpoints store one rank-1 tensor per layer (that layer's parameter block;
zero-length for layers without parameters), so the tensor count equals the
layer count. The architecture itself lives in the experiment manifest.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Sequence

import numpy as np

from .exceptions import FormatError
from .nn_core import Network, _param_count

CHECKPOINT_MAGIC = b"BMA1"
POSTERIOR_MAGIC = b"VIP1"
SAMPLES_MAGIC = b"MCS1"

__all__ = [
    "CHECKPOINT_MAGIC",
    "POSTERIOR_MAGIC",
    "SAMPLES_MAGIC",
    "write_container",
    "read_container",
    "save_checkpoint",
    "load_checkpoint",
    "atomic_write_bytes",
]


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file and rename so readers never see partial files."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, magic: bytes, tensors: Sequence[np.ndarray], span=(0, 0)) -> None:
    if len(magic) != 4:
        raise FormatError("magic must be exactly 4 bytes")
    parts = [magic, struct.pack("<I", len(tensors))]
    for t in tensors:
        t = np.asarray(t)
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
    for t in tensors:
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    parts.append(struct.pack("<QQ", int(span[0]), int(span[1])))
    atomic_write_bytes(path, b"".join(parts))


def read_container(path, expected_magic: bytes | None = None):
    """Returns (magic, list of float32 tensors, span)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated container")
    magic = data[:4]
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: magic {magic!r} != expected {expected_magic!r}")
    (count,) = struct.unpack_from("<I", data, 4)
    offset = 8
    shapes = []
    for _ in range(count):
        if offset + 4 > len(data):
            raise FormatError(f"{path}: truncated shape header")
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + 4 * rank > len(data):
            raise FormatError(f"{path}: truncated shape header")
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        shapes.append(tuple(int(d) for d in dims))
    tensors = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: payload shorter than header promises")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        tensors.append(arr.copy())
        offset += nbytes
    if offset + 16 != len(data):
        raise FormatError(f"{path}: trailing bytes do not match span footer")
    span = struct.unpack_from("<QQ", data, offset)
    return magic, tensors, (int(span[0]), int(span[1]))


def save_checkpoint(path, net: Network) -> None:
    tensors = []
    offset = 0
    for spec in net.layers:
        n = _param_count(spec)
        tensors.append(net.weights[offset : offset + n].astype(np.float32))
        offset += n
    write_container(path, CHECKPOINT_MAGIC, tensors, span=net.last_layer_span)


def load_checkpoint(path, layers, input_shape) -> Network:
    """Rebuild a Network; the architecture must be supplied by the caller."""
    _, tensors, span = read_container(path, CHECKPOINT_MAGIC)
    if len(tensors) != len(layers):
        raise FormatError(f"{path}: {len(tensors)} layer blocks, architecture has {len(layers)}")
    for i, (t, spec) in enumerate(zip(tensors, layers)):
        if t.size != _param_count(spec):
            raise FormatError(f"{path}: layer {i} holds {t.size} values, expected {_param_count(spec)}")
    flat = np.concatenate([t.ravel() for t in tensors]) if tensors else np.zeros(0, np.float32)
    net = Network(tuple(layers), tuple(input_shape), flat.astype(np.float32))
    if span != net.last_layer_span:
        raise FormatError(f"{path}: stored span {span} != architecture span {net.last_layer_span}")
    return net
