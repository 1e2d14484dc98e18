"""Self-describing model checkpoints.

Layout: 8-byte magic, little-endian ``u32`` format version and ``u64`` header
length, a UTF-8 JSON header, then every array as raw little-endian float64 in
header order. The header carries the run configuration and, per array, its
name, role and shape.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import config as config_mod
from .network import Adam, SegmentationNet

MAGIC = b"GLCKPT\0\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, model: SegmentationNet, run_cfg: config_mod.RunConfig,
         optimizer: Adam | None = None, meta: dict | None = None) -> None:
    entries, blobs = [], []

    def put(name, role, arr):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "role": role, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())

    params = list(model.named_parameters())
    for name, p in params:
        put(name, "param", p.data)
    for name, buf in model.named_buffers():
        put(name, "buffer", buf)
    if optimizer is not None:
        index = {id(p): name for name, p in params}
        for p, m, v in zip(optimizer.params, optimizer.m, optimizer.v):
            put(index[id(p)], "adam_m", m)
            put(index[id(p)], "adam_v", v)
    header = {
        "format": "gelatto-checkpoint",
        "version": VERSION,
        "config": config_mod.dumps(run_cfg),
        "adam": None if optimizer is None else {
            "t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1,
            "beta2": optimizer.beta2, "eps": optimizer.eps,
        },
        "meta": meta or {},
        "arrays": entries,
    }
    raw = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(raw)) + raw)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load(path, expect: config_mod.RunConfig | None = None):
    """Returns ``(model, run_config, optimizer_or_None, meta)``.

    With ``expect`` the stored network configuration must match it.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(raw[start:start + hlen])
    cfg = config_mod.loads(header["config"])
    if expect is not None and expect.network != cfg.network:
        raise CheckpointError("checkpoint network configuration differs from the requested one")
    model = SegmentationNet(cfg.network)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    at = start + hlen
    adam_m, adam_v = {}, {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=at).reshape(shape).copy()
        at += 8 * count
        name, role = entry["name"], entry["role"]
        if role == "param":
            target = params.get(name)
            if target is None or target.shape != shape:
                raise CheckpointError(f"parameter {name} {shape} does not fit the model")
            target.data = arr
        elif role == "buffer":
            target = buffers.get(name)
            if target is None or target.shape != shape:
                raise CheckpointError(f"buffer {name} {shape} does not fit the model")
            target[...] = arr
        elif role == "adam_m":
            adam_m[name] = arr
        elif role == "adam_v":
            adam_v[name] = arr
    optimizer = None
    if header.get("adam"):
        a = header["adam"]
        order = [name for name, _ in model.named_parameters()]
        optimizer = Adam([params[n] for n in order], a["lr"], a["beta1"], a["beta2"], a["eps"])
        optimizer.t = a["t"]
        optimizer.m = [adam_m.get(n, np.zeros_like(params[n].data)) for n in order]
        optimizer.v = [adam_v.get(n, np.zeros_like(params[n].data)) for n in order]
    return model, cfg, optimizer, header.get("meta", {})
