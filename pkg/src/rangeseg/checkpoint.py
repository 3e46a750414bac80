"""``FPSC`` checkpoints: architecture header, named tensors, optimizer state.

Layout (little-endian)::

    b"FPSC" | version u16 | header_len u32 | header (UTF-8 JSON)
    tensor_count u32
    per tensor: name_len u16 | name | dtype u8 | ndim u8 | dims u32 * ndim | raw data

The JSON header carries the network config, seed and init scheme, projection
settings and any caller metadata (train state, stats). Tensor names are
``param/<path>``, ``buffer/<path>.mean|var`` and ``adam/<path>.m|v``; Adam step
counters live in the header.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .network import Network, NetworkConfig

MAGIC = b"FPSC"
VERSION = 1
INIT_SCHEME = "kaiming-normal(fan_in, leaky_slope), numpy PCG64 seeded"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_FLAGS = {np.dtype(v).str: k for k, v in _DTYPES.items()}


def encode(tensors: dict[str, np.ndarray], header: dict) -> bytes:
    buf = io.BytesIO()
    h = json.dumps(header, sort_keys=True).encode()
    buf.write(MAGIC + struct.pack("<HI", VERSION, len(h)) + h)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le.str not in _FLAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<BB", _FLAGS[le.str], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=le).tobytes())
    return buf.getvalue()


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        if data[:4] != MAGIC:
            raise CheckpointError("not an FPSC checkpoint")
        version, hlen = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 10
        header = json.loads(data[off:off + hlen].decode())
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode()
            off += nlen
            flag, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            dt = _DTYPES[flag]
            n = int(np.prod(shape, dtype=np.int64))
            if off + n * dt.itemsize > len(data):
                raise CheckpointError("checkpoint truncated")
            tensors[name] = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(shape).copy()
            off += n * dt.itemsize
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    return tensors, header


def save_network(net: Network, path, meta: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    steps = {}
    for name, p in net.named_parameters():
        tensors[f"param/{name}"] = p.data
        tensors[f"adam/{name}.m"] = p.m
        tensors[f"adam/{name}.v"] = p.v
        steps[name] = p.step
    for name, b in net.named_buffers():
        tensors[f"buffer/{name}.mean"] = b.mean
        tensors[f"buffer/{name}.var"] = b.var
    header = {
        "network": net.cfg.to_dict(),
        "seed": net.seed,
        "init": INIT_SCHEME,
        "dtype": net.dtype.str,
        "adam_steps": steps,
        "meta": meta or {},
    }
    Path(path).write_bytes(encode(tensors, header))


def load_network(path, expect: NetworkConfig | None = None) -> tuple[Network, dict]:
    """Rebuild the network stored at ``path``; returns (network, meta)."""
    tensors, header = decode(Path(path).read_bytes())
    cfg = NetworkConfig.from_dict(header["network"])
    if expect is not None and cfg.to_dict() != expect.to_dict():
        raise CheckpointError("checkpoint architecture does not match the configuration")
    net = Network(cfg, header["seed"], np.dtype(header["dtype"]))
    params = dict(net.named_parameters())
    for name, p in params.items():
        try:
            arr = tensors[f"param/{name}"]
        except KeyError:
            raise CheckpointError(f"checkpoint lacks parameter {name}") from None
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {name}: shape {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.dtype)
        p.m = tensors[f"adam/{name}.m"].astype(p.dtype)
        p.v = tensors[f"adam/{name}.v"].astype(p.dtype)
        p.step = int(header["adam_steps"][name])
    for name, b in net.named_buffers():
        b.mean = tensors[f"buffer/{name}.mean"].astype(b.mean.dtype)
        b.var = tensors[f"buffer/{name}.var"].astype(b.var.dtype)
    return net, header.get("meta", {})
