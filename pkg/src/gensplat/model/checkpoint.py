"""Weight checkpoints: JSON manifest header + little-endian f32 blobs."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import BadMagicError

MAGIC = b"GGSW1"


def save_weights(state_dict: dict, path) -> None:
    names = list(state_dict.keys())
    blobs = []
    entries = []
    offset = 0
    for name in names:
        arr = state_dict[name].detach().cpu().numpy().astype("<f4")
        arr = np.ascontiguousarray(arr)
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset}
        )
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = json.dumps({"tensors": entries}).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_weights(path) -> dict[str, torch.Tensor]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path} does not start with {MAGIC!r}")
    hlen = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])[0]
    start = len(MAGIC) + 4
    header = json.loads(raw[start: start + hlen].decode("utf-8"))
    body = raw[start + hlen:]
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=count,
                            offset=entry["offset"]).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy())
    return state
