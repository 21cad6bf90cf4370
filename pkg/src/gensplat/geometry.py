"""Cameras, epipolar geometry, block matching and the epipolar-distance
consistency score.

Conventions (used everywhere in this package):
  * extrinsics are world-to-camera: p_cam = R @ p_world + t, +z looks forward
  * pixel origin at the top-left corner, x right, y down
  * the center of integer pixel (row i, col j) is at (j + 0.5, i + 0.5)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateBaselineError,
    DegenerateLineError,
    NonpositiveDepthError,
    NoPairsError,
)

MIN_DEPTH = 1e-8

# depth bracket used for epipolar sampling; wide enough for every
# procedurally generated scene in this repo
D_NEAR = 0.1
D_FAR = 100.0


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # (3, 3) world-to-camera rotation
    t: np.ndarray  # (3,) world-to-camera translation
    width: int
    height: int

    def __post_init__(self):
        R = np.ascontiguousarray(np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        t = np.ascontiguousarray(np.asarray(self.t, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err >= 1e-9 or np.linalg.det(R) < 0:
            raise ValueError(f"R is not a proper rotation (|RR^T - I|_inf = {err:.3e})")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    def cam_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.t) @ self.R

    def scaled(self, factor: float) -> "Camera":
        """Camera for the same view at a resolution scaled by `factor`."""
        return Camera(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            R=self.R,
            t=self.t,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
        }

    @staticmethod
    def from_json(doc: dict) -> "Camera":
        return Camera(
            fx=float(doc["fx"]),
            fy=float(doc["fy"]),
            cx=float(doc["cx"]),
            cy=float(doc["cy"]),
            R=np.array(doc["R"], dtype=np.float64).reshape(3, 3),
            t=np.array(doc["t"], dtype=np.float64),
            width=int(doc["width"]),
            height=int(doc["height"]),
        )


def identity_camera(width: int = 1, height: int = 1, fx: float = 1.0, fy: float = 1.0,
                    cx: float = 0.0, cy: float = 0.0) -> Camera:
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, R=np.eye(3), t=np.zeros(3),
                  width=width, height=height)


def look_at_camera(eye: np.ndarray, target: np.ndarray, up: np.ndarray,
                   fx: float, fy: float, width: int, height: int) -> Camera:
    """Camera at `eye` whose +z axis points at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)  # rows are camera axes
    t = -R @ eye
    return Camera(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0, R=R, t=t,
                  width=width, height=height)


def save_trajectory(cams: list[Camera], path) -> None:
    Path(path).write_text(json.dumps([c.to_json() for c in cams], indent=1))


def load_trajectory(path) -> list[Camera]:
    return [Camera.from_json(doc) for doc in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_point(cam: Camera, p: np.ndarray) -> tuple[np.ndarray, float]:
    """Project a world point; returns (pixel, camera-space depth).

    Raises BehindCameraError when the camera-space depth is <= MIN_DEPTH.
    """
    pc = cam.world_to_cam(np.asarray(p, dtype=np.float64))
    z = float(pc[2])
    if z <= MIN_DEPTH:
        raise BehindCameraError(f"depth {z:.3e} <= {MIN_DEPTH:.0e}")
    pixel = np.array([cam.fx * pc[0] / z + cam.cx, cam.fy * pc[1] / z + cam.cy])
    return pixel, z


def project_points(cam: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection without the behind-camera check; returns (pixels [N,2], z [N])."""
    pc = cam.world_to_cam(np.asarray(points, dtype=np.float64))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1)
    return px, z


def unproject_pixel(cam: Camera, pixel: np.ndarray, depth: float) -> np.ndarray:
    """World point that projects to `pixel` at camera-space depth `depth`."""
    if depth <= 0:
        raise NonpositiveDepthError(f"depth must be > 0, got {depth}")
    pixel = np.asarray(pixel, dtype=np.float64)
    pc = np.array(
        [(pixel[0] - cam.cx) / cam.fx * depth, (pixel[1] - cam.cy) / cam.fy * depth, depth]
    )
    return cam.cam_to_world(pc)


def unproject_pixels(cam: Camera, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Vectorized unprojection; pixels [N,2], depths [N] -> world points [N,3]."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise NonpositiveDepthError("all depths must be > 0")
    pc = np.stack(
        [
            (pixels[:, 0] - cam.cx) / cam.fx * depths,
            (pixels[:, 1] - cam.cy) / cam.fy * depths,
            depths,
        ],
        axis=1,
    )
    return cam.cam_to_world(pc)


def pixel_center_grid(width: int, height: int) -> np.ndarray:
    """[H, W, 2] grid of pixel-center coordinates."""
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def plucker_map(cam: Camera) -> np.ndarray:
    """[H, W, 6] per-pixel ray encoding (direction d, moment m = o x d)."""
    grid = pixel_center_grid(cam.width, cam.height)  # [H, W, 2]
    d_cam = np.stack(
        [
            (grid[..., 0] - cam.cx) / cam.fx,
            (grid[..., 1] - cam.cy) / cam.fy,
            np.ones_like(grid[..., 0]),
        ],
        axis=-1,
    )
    d = d_cam @ cam.R  # rotate to world frame (R^T applied on the right)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    o = cam.center()
    m = np.cross(np.broadcast_to(o, d.shape), d)
    return np.concatenate([d, m], axis=-1)


# ---------------------------------------------------------------------------
# epipolar geometry
# ---------------------------------------------------------------------------

def fundamental_matrix(cam_a: Camera, cam_b: Camera) -> np.ndarray:
    """Fundamental matrix with x_b^T F x_a = 0; Frobenius-normalized, rank 2.

    Raises DegenerateBaselineError when the camera centers coincide.
    """
    baseline = np.linalg.norm(cam_a.center() - cam_b.center())
    if baseline <= 1e-9:
        raise DegenerateBaselineError(f"baseline {baseline:.3e} <= 1e-9")
    R_rel = cam_b.R @ cam_a.R.T
    t_rel = cam_b.t - R_rel @ cam_a.t
    tx = np.array(
        [
            [0.0, -t_rel[2], t_rel[1]],
            [t_rel[2], 0.0, -t_rel[0]],
            [-t_rel[1], t_rel[0], 0.0],
        ]
    )
    E = tx @ R_rel
    F = np.linalg.inv(cam_b.K).T @ E @ np.linalg.inv(cam_a.K)
    F = F / np.linalg.norm(F)
    # deterministic sign: largest-magnitude entry positive
    flat = np.argmax(np.abs(F))
    if F.reshape(-1)[flat] < 0:
        F = -F
    return F


def _hom(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.array([p[0], p[1], 1.0])


def point_line_distance(line: np.ndarray, pixel: np.ndarray) -> float:
    """Distance in pixels from `pixel` to the homogeneous 2D line."""
    n = np.hypot(line[0], line[1])
    if n < 1e-300:
        raise DegenerateLineError("epipolar line is the zero vector")
    return abs(float(np.dot(line, _hom(pixel)))) / n


def symmetric_epipolar_distance(F: np.ndarray, x_a: np.ndarray, x_b: np.ndarray) -> float:
    """d(x_b, F x_a) + d(x_a, F^T x_b), both point-to-line distances in pixels."""
    return point_line_distance(F @ _hom(x_a), x_b) + point_line_distance(F.T @ _hom(x_b), x_a)


def symmetric_epipolar_distances(F: np.ndarray, xs_a: np.ndarray, xs_b: np.ndarray) -> np.ndarray:
    """Vectorized symmetric epipolar distance for match arrays [N,2], [N,2]."""
    xs_a = np.asarray(xs_a, dtype=np.float64)
    xs_b = np.asarray(xs_b, dtype=np.float64)
    ha = np.concatenate([xs_a, np.ones((len(xs_a), 1))], axis=1)
    hb = np.concatenate([xs_b, np.ones((len(xs_b), 1))], axis=1)
    la = ha @ F.T  # lines in image b
    lb = hb @ F  # lines in image a
    na = np.hypot(la[:, 0], la[:, 1])
    nb = np.hypot(lb[:, 0], lb[:, 1])
    if np.any(na < 1e-300) or np.any(nb < 1e-300):
        raise DegenerateLineError("epipolar line is the zero vector")
    d_ab = np.abs(np.sum(la * hb, axis=1)) / na
    d_ba = np.abs(np.sum(lb * ha, axis=1)) / nb
    return d_ab + d_ba


def _clip_segment_to_rect(p0: np.ndarray, p1: np.ndarray, width: int, height: int):
    """Liang-Barsky clip of segment p0->p1 to [0,W]x[0,H]; returns (t0, t1) or None."""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for axis, lim in ((0, width), (1, height)):
        for sign, bound in ((-1.0, 0.0), (1.0, float(lim))):
            # inside condition: sign * p <= sign * bound
            denom = sign * d[axis]
            num = sign * (bound - p0[axis])
            if abs(denom) < 1e-300:
                if sign * p0[axis] > sign * bound:
                    return None
                continue
            r = num / denom
            if denom > 0:
                t1 = min(t1, r)
            else:
                t0 = max(t0, r)
            if t0 > t1:
                return None
    return t0, t1


def epipolar_sample_grid(
    cam_src: Camera,
    cam_nbr: Camera,
    pixels: np.ndarray,
    n: int,
    d_near: float = D_NEAR,
    d_far: float = D_FAR,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample `n` points on each pixel's epipolar line in the neighbor view.

    pixels: [P, 2] coordinates in cam_src. Returns (samples [P, n, 2],
    valid [P] bool). Rows with an empty clipped segment are flagged invalid
    and filled with zeros.
    """
    if n < 2:
        raise ValueError(f"need n >= 2 samples, got {n}")
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    P = len(pixels)
    o = cam_src.center()
    dirs_cam = np.stack(
        [
            (pixels[:, 0] - cam_src.cx) / cam_src.fx,
            (pixels[:, 1] - cam_src.cy) / cam_src.fy,
            np.ones(P),
        ],
        axis=1,
    )
    dirs = dirs_cam @ cam_src.R  # world-frame, scaled so depth d sits at o + d*dirs

    # ray point in neighbor camera coords: q(d) = q0 + d * qd
    q0 = cam_nbr.R @ o + cam_nbr.t
    qd = dirs @ cam_nbr.R.T

    samples = np.zeros((P, n, 2))
    valid = np.zeros(P, dtype=bool)
    z_eps = 1e-6
    for i in range(P):
        z0, zd = q0[2], qd[i, 2]
        lo, hi = d_near, d_far
        # restrict depth interval so neighbor-space z(d) >= z_eps
        if abs(zd) < 1e-300:
            if z0 < z_eps:
                continue
        else:
            d_cross = (z_eps - z0) / zd
            if zd > 0:
                lo = max(lo, d_cross)
            else:
                hi = min(hi, d_cross)
        if lo >= hi:
            continue
        qa = q0 + lo * qd[i]
        qb = q0 + hi * qd[i]
        pa = np.array([cam_nbr.fx * qa[0] / qa[2] + cam_nbr.cx, cam_nbr.fy * qa[1] / qa[2] + cam_nbr.cy])
        pb = np.array([cam_nbr.fx * qb[0] / qb[2] + cam_nbr.cx, cam_nbr.fy * qb[1] / qb[2] + cam_nbr.cy])
        clip = _clip_segment_to_rect(pa, pb, cam_nbr.width, cam_nbr.height)
        if clip is None:
            continue
        t0, t1 = clip
        ts = np.linspace(t0, t1, n)
        samples[i] = pa[None, :] + ts[:, None] * (pb - pa)[None, :]
        valid[i] = True
    return samples, valid


def epipolar_samples(
    cam_src: Camera,
    cam_nbr: Camera,
    pixel: np.ndarray,
    n: int = 32,
    d_near: float = D_NEAR,
    d_far: float = D_FAR,
) -> np.ndarray:
    """Points on the epipolar line of `pixel`, uniformly spaced over the
    in-image segment; [n, 2], or [0, 2] when the segment misses the image."""
    samples, valid = epipolar_sample_grid(
        cam_src, cam_nbr, np.asarray(pixel, dtype=np.float64)[None, :], n, d_near, d_far
    )
    if not valid[0]:
        return np.zeros((0, 2))
    return samples[0]


# ---------------------------------------------------------------------------
# correspondences and the consistency score
# ---------------------------------------------------------------------------

@dataclass
class CorrespondenceSet:
    """Matched pixel pairs between two images with per-pair scores in [0,1]."""

    xy_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    xy_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    score: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.xy_a = np.asarray(self.xy_a, dtype=np.float64).reshape(-1, 2)
        self.xy_b = np.asarray(self.xy_b, dtype=np.float64).reshape(-1, 2)
        self.score = np.asarray(self.score, dtype=np.float64).reshape(-1)
        if not (len(self.xy_a) == len(self.xy_b) == len(self.score)):
            raise ValueError("xy_a, xy_b, score must have equal length")

    def __len__(self) -> int:
        return len(self.xy_a)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["xa", "ya", "xb", "yb", "score"])
            for a, b, s in zip(self.xy_a, self.xy_b, self.score):
                writer.writerow([repr(float(v)) for v in (a[0], a[1], b[0], b[1], s)])

    @staticmethod
    def from_csv(path) -> "CorrespondenceSet":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["xa", "ya", "xb", "yb", "score"]:
                raise ValueError(f"unexpected correspondence CSV header: {header}")
            rows = [[float(v) for v in row] for row in reader]
        if not rows:
            return CorrespondenceSet()
        arr = np.array(rows)
        return CorrespondenceSet(arr[:, 0:2], arr[:, 2:4], arr[:, 4])


def tsed(
    pairs: list[tuple[CorrespondenceSet, np.ndarray]],
    threshold: float = 2.0,
    min_matches: int = 10,
) -> float:
    """Fraction of view pairs whose median symmetric epipolar distance over
    their matches is below `threshold` pixels.

    Pairs with fewer than `min_matches` matches count as inconsistent.
    """
    if not pairs:
        raise NoPairsError("tsed needs at least one view pair")
    consistent = 0
    for corr, F in pairs:
        if len(corr) < min_matches:
            continue
        med = float(np.median(symmetric_epipolar_distances(F, corr.xy_a, corr.xy_b)))
        if med < threshold:
            consistent += 1
    return consistent / len(pairs)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=2)
    return img


def match_blocks(
    img_a: np.ndarray,
    img_b: np.ndarray,
    grid_step: int = 4,
    window: int = 4,
    search_radius: int = 6,
    min_score: float = 0.8,
) -> CorrespondenceSet:
    """Grid-based normalized-cross-correlation matching from img_a to img_b.

    For every grid pixel the best NCC match within `search_radius` is kept
    if its score reaches `min_score`. Patches are (2*window+1)^2.
    """
    ga, gb = _to_gray(img_a), _to_gray(img_b)
    if ga.shape != gb.shape:
        raise ValueError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    H, W = ga.shape
    margin = window + search_radius
    xs_a, xs_b, scores = [], [], []
    for iy in range(margin, H - margin, grid_step):
        for ix in range(margin, W - margin, grid_step):
            patch = ga[iy - window: iy + window + 1, ix - window: ix + window + 1]
            pz = patch - patch.mean()
            pn = np.sqrt((pz * pz).sum())
            if pn < 1e-9:
                continue
            best_score, best_off = -1.0, (0, 0)
            for dy in range(-search_radius, search_radius + 1):
                for dx in range(-search_radius, search_radius + 1):
                    cand = gb[iy + dy - window: iy + dy + window + 1,
                              ix + dx - window: ix + dx + window + 1]
                    cz = cand - cand.mean()
                    cn = np.sqrt((cz * cz).sum())
                    if cn < 1e-9:
                        continue
                    score = float((pz * cz).sum() / (pn * cn))
                    if score > best_score:
                        best_score, best_off = score, (dx, dy)
            if best_score >= min_score:
                xs_a.append((ix + 0.5, iy + 0.5))
                xs_b.append((ix + best_off[0] + 0.5, iy + best_off[1] + 0.5))
                scores.append(best_score)
    if not xs_a:
        return CorrespondenceSet()
    return CorrespondenceSet(np.array(xs_a), np.array(xs_b), np.array(scores))


def reproject_correspondences(
    cam_a: Camera,
    cam_b: Camera,
    depth_a: np.ndarray,
    mask_a: np.ndarray | None = None,
    grid_step: int = 2,
) -> CorrespondenceSet:
    """Exact correspondences from known per-pixel depth in view a.

    Grid pixels with mask (or finite positive depth) are unprojected with
    their depth and reprojected into view b; pairs landing inside view b
    are returned with score 1.
    """
    H, W = depth_a.shape
    grid = pixel_center_grid(W, H)[::grid_step, ::grid_step].reshape(-1, 2)
    depths = np.asarray(depth_a, dtype=np.float64)[::grid_step, ::grid_step].reshape(-1)
    keep = np.isfinite(depths) & (depths > MIN_DEPTH)
    if mask_a is not None:
        keep &= np.asarray(mask_a)[::grid_step, ::grid_step].reshape(-1)
    if not np.any(keep):
        return CorrespondenceSet()
    pts = unproject_pixels(cam_a, grid[keep], depths[keep])
    px_b, z_b = project_points(cam_b, pts)
    ok = (
        (z_b > MIN_DEPTH)
        & (px_b[:, 0] >= 0)
        & (px_b[:, 0] <= cam_b.width)
        & (px_b[:, 1] >= 0)
        & (px_b[:, 1] <= cam_b.height)
    )
    if not np.any(ok):
        return CorrespondenceSet()
    return CorrespondenceSet(grid[keep][ok], px_b[ok], np.ones(int(ok.sum())))
