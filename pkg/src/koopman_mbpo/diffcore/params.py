"""Named parameter blocks, initializers and checkpoint serialization.

Binary checkpoint layout (all integers little-endian)::

    magic   b"KMPV"
    u32     format version (currently 1)
    u32     number of blocks
    per block:
        u16     name length in bytes, then the UTF-8 name
        u8      ndim, then ndim x u64 shape entries
        f64[]   values in C order, little-endian

The JSON form carries the same information::

    {"format": "koopman_mbpo.params", "version": 1,
     "blocks": [{"name": ..., "shape": [...], "data": [...]}, ...]}
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_MAGIC = b"KMPV"


class CheckpointError(ValueError):
    pass


class Params(dict):
    """Ordered ``name -> float64 array`` mapping with flat-vector views."""

    def __init__(self, *args, **kwargs):
        super().__init__()
        for k, v in dict(*args, **kwargs).items():
            self[k] = v

    def __setitem__(self, key, value):
        super().__setitem__(key, np.array(value, dtype=np.float64))

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values()))

    def shapes(self) -> dict:
        return {k: v.shape for k, v in self.items()}

    def flat(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.values()])

    def with_flat(self, vec) -> "Params":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {self.size}")
        out, pos = Params(), 0
        for k, v in self.items():
            out[k] = vec[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        return out

    def copy(self) -> "Params":
        return Params({k: v.copy() for k, v in self.items()})

    def prefixed(self, prefix: str) -> "Params":
        return Params({f"{prefix}{k}": v for k, v in self.items()})

    def strip(self, prefix: str) -> "Params":
        n = len(prefix)
        return Params({k[n:]: v for k, v in self.items() if k.startswith(prefix)})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


# --------------------------------------------------------------- initializers

def xavier_normal(shapes: dict, seed) -> Params:
    """Weights ~ N(0, 2/(fan_in+fan_out)); 1-D blocks (biases) are zero.

    ``shapes`` maps block names to shapes.  ``seed`` may be an int or a
    ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(seed)
    out = Params()
    for name, shape in shapes.items():
        shape = tuple(shape)
        if len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape[0], shape[1]
            out[name] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    return out


def uniform_fan_in(shapes: dict, seed) -> Params:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike.

    Biases take the fan-in of the weight block registered just before them,
    which is the usual default for fully connected layers.
    """
    rng = np.random.default_rng(seed)
    out = Params()
    fan_in = 1
    for name, shape in shapes.items():
        shape = tuple(shape)
        if len(shape) >= 2:
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        out[name] = rng.uniform(-bound, bound, size=shape)
    return out


def layer_shapes(prefix: str, sizes) -> dict:
    """Shapes for an MLP with layer widths ``sizes`` (W as (fan_in, fan_out))."""
    shapes = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes[f"{prefix}W{i}"] = (a, b)
        shapes[f"{prefix}b{i}"] = (b,)
    return shapes


def layer_nodes(nodes: dict, prefix: str, n_layers: int) -> list:
    return [(nodes[f"{prefix}W{i}"], nodes[f"{prefix}b{i}"]) for i in range(n_layers)]


# ------------------------------------------------------------------------ I/O

def params_to_json(params: Params) -> dict:
    return {
        "format": "koopman_mbpo.params",
        "version": FORMAT_VERSION,
        "blocks": [{"name": k, "shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in params.items()],
    }


def params_from_json(doc: dict) -> Params:
    if doc.get("format") != "koopman_mbpo.params":
        raise CheckpointError("not a parameter document")
    if doc.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported parameter format version {doc.get('version')}")
    out = Params()
    for blk in doc["blocks"]:
        out[blk["name"]] = np.asarray(blk["data"], dtype=np.float64).reshape(blk["shape"])
    return out


def params_to_bytes(params: Params) -> bytes:
    parts = [_MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for k, v in params.items():
        name = k.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<B", v.ndim))
        parts.append(struct.pack(f"<{v.ndim}Q", *v.shape))
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(buf: bytes) -> Params:
    if buf[:4] != _MAGIC:
        raise CheckpointError("bad magic; not a binary parameter checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported parameter format version {version}")
    pos, out = 12, Params()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return out


def save_params(path, params: Params) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(params_to_json(params)))
    else:
        path.write_bytes(params_to_bytes(params))


def load_params(path) -> Params:
    path = Path(path)
    if path.suffix == ".json":
        return params_from_json(json.loads(path.read_text()))
    return params_from_bytes(path.read_bytes())
