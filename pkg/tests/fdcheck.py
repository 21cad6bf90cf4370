"""Central finite-difference oracle for the rasterizer backward pass."""

import numpy as np

from gensplat.rendering import rasterize


def scene_params(scene):
    return [
        ("means", scene.means), ("scales", scene.scales), ("quats", scene.quats),
        ("opacities", scene.opacities), ("colors", scene.colors),
        ("features", scene.features),
    ]


def projection_loss(scene, cam, grad_out, width, height):
    out = rasterize(scene, cam, width, height)
    total = 0.0
    for name in ("color", "feature", "alpha", "depth"):
        g = grad_out.get(name)
        if g is not None:
            total += float(np.sum(g * getattr(out, name)))
    return total


def fd_gradients(scene, cam, grad_out, width, height, h=1e-5):
    """Central differences of the projected loss w.r.t. every splat field."""
    grads = {}
    for name, arr in scene_params(scene):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = projection_loss(scene, cam, grad_out, width, height)
            flat[i] = orig - h
            lm = projection_loss(scene, cam, grad_out, width, height)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic, fd, floor_frac=1e-3):
    """Per-group max elementwise relative error.

    Elements are compared against max(|analytic|, |fd|) with an absolute
    floor of floor_frac times the group's largest gradient, so entries that
    are numerically zero do not blow up the ratio.
    """
    worst = 0.0
    for name, a in analytic.items():
        f = fd[name]
        scale = max(np.abs(a).max(), np.abs(f).max(), 1e-12)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor_frac * scale)
        worst = max(worst, float((np.abs(a - f) / denom).max()))
    return worst
