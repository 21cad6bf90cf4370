"""Vectorized splat projection: covariance construction, camera transform and
the local-affine (Jacobian) projection to 2D, with analytic backward."""

from __future__ import annotations

import numpy as np

from ..errors import BehindCameraError, InvalidScaleError
from ..geometry import Camera, MIN_DEPTH

# anti-aliasing floor added to the projected covariance diagonal (px^2)
COV2D_FLOOR = 0.3


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """[N,4] unit quaternions (w,x,y,z) -> [N,3,3] rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    O = np.empty(q.shape[:1] + (3, 3), dtype=q.dtype)
    O[:, 0, 0] = 1 - 2 * (y * y + z * z)
    O[:, 0, 1] = 2 * (x * y - w * z)
    O[:, 0, 2] = 2 * (x * z + w * y)
    O[:, 1, 0] = 2 * (x * y + w * z)
    O[:, 1, 1] = 1 - 2 * (x * x + z * z)
    O[:, 1, 2] = 2 * (y * z - w * x)
    O[:, 2, 0] = 2 * (x * z - w * y)
    O[:, 2, 1] = 2 * (y * z + w * x)
    O[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return O


def _rotmat_quat_grad(q: np.ndarray, dO: np.ndarray) -> np.ndarray:
    """Chain [N,3,3] rotation-matrix gradients back to quaternion entries."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zeros = np.zeros_like(w)
    # dO/dw, dO/dx, dO/dy, dO/dz, each [N,3,3]
    dOdw = 2 * np.stack([
        np.stack([zeros, -z, y], axis=-1),
        np.stack([z, zeros, -x], axis=-1),
        np.stack([-y, x, zeros], axis=-1),
    ], axis=-2)
    dOdx = 2 * np.stack([
        np.stack([zeros, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1),
    ], axis=-2)
    dOdy = 2 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zeros, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1),
    ], axis=-2)
    dOdz = 2 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zeros], axis=-1),
    ], axis=-2)
    return np.stack(
        [np.einsum("nij,nij->n", dO, d) for d in (dOdw, dOdx, dOdy, dOdz)], axis=1
    )


def normalize_quats(q_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(q_raw, axis=1, keepdims=True)
    return q_raw / n, n


def normalize_quats_backward(q: np.ndarray, n: np.ndarray, dq: np.ndarray) -> np.ndarray:
    # q = q_raw / |q_raw|; project out the radial component
    return (dq - q * np.sum(q * dq, axis=1, keepdims=True)) / n


def build_covariance(scale: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """World-space covariance O diag(s) diag(s) O^T of a single splat."""
    scale = np.asarray(scale, dtype=np.float64).reshape(3)
    if np.any(scale <= 0):
        raise InvalidScaleError(f"scale must be positive, got {scale}")
    quat = np.asarray(quat, dtype=np.float64).reshape(1, 4)
    quat = quat / np.linalg.norm(quat)
    O = quat_to_rotmat(quat)[0]
    M = O * scale[None, :]
    return M @ M.T


def build_covariances(scales: np.ndarray, quats_unit: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched covariance; returns (Sigma [N,3,3], M [N,3,3], O [N,3,3])."""
    O = quat_to_rotmat(quats_unit)
    M = O * scales[:, None, :]
    return M @ np.swapaxes(M, 1, 2), M, O


def project_gaussians(
    means: np.ndarray,
    scales: np.ndarray,
    quats: np.ndarray,
    cam: Camera,
) -> dict:
    """Project N world-space Gaussians into a camera.

    Returns a dict with mean2d [N,2], cov2d [N,2,2], conic [N,3] (a,b,c of the
    inverse covariance), z [N], valid [N] (in front of the camera) and the
    intermediates needed by the backward pass. The anti-aliasing floor
    COV2D_FLOOR is already added to cov2d.

    All arithmetic runs in float64 regardless of the input dtype: splats can
    land arbitrarily close to another view's camera plane, where the squared
    projection Jacobian overflows float32.
    """
    in_dtype = means.dtype
    dtype = np.float64
    means = means.astype(dtype)
    scales = scales.astype(dtype)
    quats = quats.astype(dtype)
    R = cam.R.astype(dtype)
    t = cam.t.astype(dtype)
    q_unit, q_norm = normalize_quats(quats)
    Sigma, M, O = build_covariances(scales, q_unit)

    p_cam = means @ R.T + t  # [N,3]
    z = p_cam[:, 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)  # placeholder to keep arithmetic finite

    mean2d = np.stack(
        [cam.fx * p_cam[:, 0] / zs + cam.cx, cam.fy * p_cam[:, 1] / zs + cam.cy], axis=1
    )

    N = len(means)
    J = np.zeros((N, 2, 3), dtype=dtype)
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * p_cam[:, 0] / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * p_cam[:, 1] / zs**2

    T = J @ R[None, :, :]  # [N,2,3]
    cov2d = T @ Sigma @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack(
        [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1
    )
    return {
        "mean2d": mean2d, "cov2d": cov2d, "conic": conic, "z": z, "valid": valid,
        "p_cam": p_cam, "J": J, "T": T, "Sigma": Sigma, "M": M, "O": O,
        "q_unit": q_unit, "q_norm": q_norm, "scales": scales, "in_dtype": in_dtype,
    }


def project_gaussian(mean, scale, quat, cam: Camera):
    """Single-splat projection: (mean2d [2], cov2d [2,2], depth).

    Raises BehindCameraError when the camera-space depth is <= MIN_DEPTH,
    InvalidScaleError for non-positive scales.
    """
    scale = np.asarray(scale, dtype=np.float64).reshape(1, 3)
    if np.any(scale <= 0):
        raise InvalidScaleError(f"scale must be positive, got {scale}")
    proj = project_gaussians(
        np.asarray(mean, dtype=np.float64).reshape(1, 3),
        scale,
        np.asarray(quat, dtype=np.float64).reshape(1, 4),
        cam,
    )
    if not proj["valid"][0]:
        raise BehindCameraError(f"splat depth {proj['z'][0]:.3e} <= {MIN_DEPTH:.0e}")
    return proj["mean2d"][0], proj["cov2d"][0], float(proj["z"][0])


def project_gaussians_backward(
    proj: dict,
    cam: Camera,
    d_mean2d: np.ndarray,
    d_conic: np.ndarray,
    d_z: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain blending-stage gradients back to (means, scales, raw quats).

    d_conic uses the kernel convention: gradient w.r.t. the stored (a, b, c)
    where the Mahalanobis form is a*dx^2 + 2*b*dx*dy + c*dy^2.
    """
    mean2d = proj["mean2d"]
    cov2d = proj["cov2d"]
    conic = proj["conic"]
    p_cam, J, T = proj["p_cam"], proj["J"], proj["T"]
    Sigma, M, O = proj["Sigma"], proj["M"], proj["O"]
    q_unit, q_norm = proj["q_unit"], proj["q_norm"]
    valid = proj["valid"]
    dtype = mean2d.dtype
    N = len(mean2d)

    mask = valid.astype(dtype)
    d_mean2d = d_mean2d.astype(dtype) * mask[:, None]
    d_conic = d_conic.astype(dtype) * mask[:, None]
    d_z = d_z.astype(dtype) * mask

    # conic = inv(cov2d): dL/dS = -P G P with symmetric-matrix forms
    P = np.empty_like(cov2d)
    P[:, 0, 0] = conic[:, 0]
    P[:, 0, 1] = P[:, 1, 0] = conic[:, 1]
    P[:, 1, 1] = conic[:, 2]
    G = np.empty_like(cov2d)
    G[:, 0, 0] = d_conic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * d_conic[:, 1]
    G[:, 1, 1] = d_conic[:, 2]
    dS = -P @ G @ P  # [N,2,2] gradient w.r.t. cov2d (floor is additive, passes through)

    # cov2d = T Sigma T^T
    dSigma = np.swapaxes(T, 1, 2) @ dS @ T
    dT = 2.0 * (dS @ T @ Sigma)
    dJ = dT @ cam.R.T.astype(dtype)[None, :, :]

    # mean2d = pinhole(p_cam): dL/dp_cam += J^T d_mean2d
    dp_cam = np.einsum("nij,ni->nj", J, d_mean2d)
    # z channel
    dp_cam[:, 2] += d_z

    # J's own dependence on p_cam
    x, y = p_cam[:, 0], p_cam[:, 1]
    zs = np.where(valid, p_cam[:, 2], 1.0)
    inv_z2 = 1.0 / zs**2
    inv_z3 = inv_z2 / zs
    dp_cam[:, 0] += dJ[:, 0, 2] * (-cam.fx * inv_z2)
    dp_cam[:, 1] += dJ[:, 1, 2] * (-cam.fy * inv_z2)
    dp_cam[:, 2] += (
        dJ[:, 0, 0] * (-cam.fx * inv_z2)
        + dJ[:, 1, 1] * (-cam.fy * inv_z2)
        + dJ[:, 0, 2] * (2 * cam.fx * x * inv_z3)
        + dJ[:, 1, 2] * (2 * cam.fy * y * inv_z3)
    )

    d_means = dp_cam @ cam.R.astype(dtype)
    d_means *= mask[:, None]

    # Sigma = M M^T with M = O diag(s)
    dM = 2.0 * (dSigma @ M)
    d_scales = np.einsum("nij,nij->nj", O, dM)
    dO = dM * proj["scales"][:, None, :]
    dq_unit = _rotmat_quat_grad(q_unit, dO)
    d_quats = normalize_quats_backward(q_unit, q_norm, dq_unit)
    d_scales *= mask[:, None]
    d_quats *= mask[:, None]
    out_dtype = proj["in_dtype"]
    return (d_means.astype(out_dtype), d_scales.astype(out_dtype),
            d_quats.astype(out_dtype))
