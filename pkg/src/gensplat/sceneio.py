"""Scene serialization: binary PLY for splat geometry/appearance plus a
little-endian f32 sidecar ("GGSF") for the per-splat feature vectors."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError
from .scene import SplatScene

FEATURE_MAGIC = b"GGSF"

_PLY_PROPS = [
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
    "red", "green", "blue",
]


def _feature_path(path) -> Path:
    return Path(path).with_suffix(".ggsf")


def export_scene(scene: SplatScene, path) -> None:
    """Write `<path>.ply` (positions, scales, rotations, opacity, rgb as f32)
    and the `<path>.ggsf` feature sidecar."""
    path = Path(path)
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _PLY_PROPS]
    header += ["end_header"]
    table = np.concatenate(
        [
            scene.means, scene.scales, scene.quats,
            scene.opacities[:, None], scene.colors,
        ],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(table.tobytes())

    feats = scene.features.astype("<f4")
    with open(_feature_path(path), "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", n, scene.feature_dim))
        fh.write(np.ascontiguousarray(feats).tobytes())


def import_scene(path) -> SplatScene:
    """Inverse of export_scene (f32 precision)."""
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise BadMagicError(f"{path} is not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    n = None
    props = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property float"):
            props.append(line.split()[-1])
    if n is None or props != _PLY_PROPS:
        raise BadMagicError(f"{path} does not carry the expected splat layout")
    body = raw[end + len(b"end_header\n"):]
    table = np.frombuffer(body, dtype="<f4", count=n * len(_PLY_PROPS))
    table = table.reshape(n, len(_PLY_PROPS)).astype(np.float64)

    fpath = _feature_path(path)
    fraw = fpath.read_bytes()
    if fraw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{fpath} does not start with {FEATURE_MAGIC!r}")
    count, dim = struct.unpack("<II", fraw[4:12])
    if count != n:
        raise BadMagicError(f"feature sidecar holds {count} rows, PLY holds {n}")
    feats = np.frombuffer(fraw[12:], dtype="<f4", count=count * dim)
    feats = feats.reshape(count, dim).astype(np.float64)

    return SplatScene(
        means=table[:, 0:3],
        scales=table[:, 3:6],
        quats=table[:, 6:10],
        opacities=table[:, 10],
        colors=table[:, 11:14],
        features=feats,
    )
