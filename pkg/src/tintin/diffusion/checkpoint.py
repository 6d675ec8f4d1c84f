"""Versioned binary checkpoint container.

Layout: 8-byte magic, little-endian uint32 format version, uint64 header length, a UTF-8
JSON header (sorted keys), then raw little-endian float32 tensors in header order. Writing
the same weights and metadata always yields the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..imageio import atomic_write_bytes
from .model import TinyUNet, TorchDenoiser, UNetConfig
from .schedule import NoiseSchedule

MAGIC = b"TINTCKPT"
FORMAT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    pass


def encode_checkpoint(net: TinyUNet, sched: NoiseSchedule, training: dict) -> bytes:
    tensors = []
    index = []
    offset = 0
    for name, tensor in net.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        tensors.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "model": {k: getattr(net.cfg, k) for k in net.cfg.__dataclass_fields__},
        "schedule": sched.to_record(),
        "training": training,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(tensors)


def save_checkpoint(path: str | Path, net: TinyUNet, sched: NoiseSchedule, training: dict) -> str:
    """Write atomically and return the SHA-256 fingerprint of the file contents."""
    data = encode_checkpoint(net, sched, training)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def fingerprint(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[TorchDenoiser, NoiseSchedule, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {version}, this build reads version {FORMAT_VERSION}"
        )
    header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    body = memoryview(data)[20 + hlen :]
    cfg = UNetConfig(**header["model"])
    net = TinyUNet(cfg)
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    net.load_state_dict(state)
    s = header["schedule"]
    sched = NoiseSchedule.from_betas(s["betas"], s["kind"], s["model_timesteps"])
    return TorchDenoiser(net), sched, header["training"]
