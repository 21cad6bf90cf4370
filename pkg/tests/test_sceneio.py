import numpy as np
import pytest

from gensplat.errors import BadMagicError
from gensplat.geometry import Camera
from gensplat.rendering import rasterize
from gensplat.scene import SplatScene
from gensplat.sceneio import export_scene, import_scene


def make_scene(rng, n=20, feature_dim=8):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return SplatScene(
        means=rng.uniform(-1, 1, (n, 3)) + [0, 0, 4.0],
        scales=rng.uniform(0.05, 0.3, (n, 3)),
        quats=q,
        opacities=rng.uniform(0.3, 1.0, n),
        colors=rng.uniform(0, 1, (n, 3)),
        features=rng.standard_normal((n, feature_dim)),
    )


def test_roundtrip_preserves_f32_values(tmp_path):
    rng = np.random.default_rng(0)
    scene = make_scene(rng)
    path = tmp_path / "scene.ply"
    export_scene(scene, path)
    back = import_scene(path)
    assert len(back) == len(scene)
    for name in ("means", "scales", "quats", "opacities", "colors", "features"):
        stored = getattr(scene, name).astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(getattr(back, name), stored)
    # a second export of the reimported scene is byte-identical
    path2 = tmp_path / "scene2.ply"
    export_scene(back, path2)
    assert path.read_bytes() == path2.read_bytes()
    assert (tmp_path / "scene.ggsf").read_bytes() == (tmp_path / "scene2.ggsf").read_bytes()


def test_corrupted_magic(tmp_path):
    rng = np.random.default_rng(1)
    scene = make_scene(rng, n=3)
    path = tmp_path / "scene.ply"
    export_scene(scene, path)
    raw = bytearray(path.read_bytes())
    raw[:3] = b"xxx"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        import_scene(path)
    # corrupt the sidecar instead
    export_scene(scene, path)
    side = tmp_path / "scene.ggsf"
    raw = bytearray(side.read_bytes())
    raw[:4] = b"NOPE"
    side.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        import_scene(path)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        import_scene(tmp_path / "absent.ply")


def test_exported_scene_renders_identically(tmp_path):
    rng = np.random.default_rng(2)
    scene = make_scene(rng, n=30, feature_dim=4)
    # quantize to f32 first so storage is exact
    for name in ("means", "scales", "quats", "opacities", "colors", "features"):
        setattr(scene, name, getattr(scene, name).astype(np.float32).astype(np.float64))
    path = tmp_path / "scene.ply"
    export_scene(scene, path)
    back = import_scene(path)
    cam = Camera(fx=24, fy=24, cx=16, cy=16, R=np.eye(3), t=np.zeros(3),
                 width=32, height=32)
    a = rasterize(scene, cam)
    b = rasterize(back, cam)
    assert np.abs(a.color - b.color).max() < 1e-6
    assert np.abs(a.feature - b.feature).max() < 1e-6
