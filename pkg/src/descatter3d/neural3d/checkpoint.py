"""``.dnet`` checkpoints: magic, header length, JSON header, raw LE f32 tensors."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .network import Network, NetworkConfig
from .optim import AdamState

MAGIC = b"DNET"


def save_checkpoint(path, net: Network, adam: AdamState | None = None, rng_state: dict | None = None,
                    seed: int | None = None, extra: dict | None = None) -> None:
    """Write network parameters, running stats and (optionally) optimizer/RNG state.

    Tensor order: parameters, then running stats, then Adam first and second
    moments, each in manifest order.
    """
    tensors: list[tuple[str, np.ndarray]] = []
    tensors += list(net.parameters().items())
    tensors += list(net.running_stats().items())
    if adam is not None:
        for name in net.parameters():
            if name in adam.m:
                tensors.append((f"adam.m.{name}", adam.m[name]))
                tensors.append((f"adam.v.{name}", adam.v[name]))
    header = {
        "config": net.config.to_dict(),
        "layers": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "step": adam.t if adam is not None else 0,
        "seed": seed,
        "running_stats": True,
        "adam": None if adam is None else {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "rng_state": rng_state,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(hbytes)) + hbytes)
        for _, a in tensors:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Network, AdamState | None, dict]:
    """Returns (network in eval mode, Adam state or None, header dict)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC or len(raw) < 8:
        raise FormatError(f"{path}: not a .dnet checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    net = Network(NetworkConfig.from_dict(header["config"]))
    adam = None
    if header.get("adam") is not None:
        adam = AdamState(**header["adam"], t=header["step"])
    off = 8 + hlen
    for entry in header["layers"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        if off + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated tensor {entry['name']}")
        a = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(entry["shape"]).astype(np.float32)
        off += 4 * n
        name = entry["name"]
        if name.startswith("adam.m."):
            adam.m[name[7:]] = a
        elif name.startswith("adam.v."):
            adam.v[name[7:]] = a
        else:
            net.set_tensor(name, a)
    return net.eval(), adam, header
