"""Pinhole cameras, rays, projection, grid normalization and stratified sampling.

Poses are world-from-camera with +z forward, +x right, +y down. Pixel (row, col)
has its center at image coordinates (col + 0.5, row + 0.5).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion."""
    w, x, y, z = (float(v) for v in q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """(w, x, y, z) with w >= 0 for a proper rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-from-camera (quaternion, translation) for a camera at ``eye`` facing ``target``.

    ``up`` is the world direction that appears toward the top of the image.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    y = -np.asarray(up, dtype=np.float64)
    y = y - (y @ z) * z
    if np.linalg.norm(y) < 1e-12:
        raise ValueError("look_at: view direction parallel to up vector")
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return matrix_to_quat(np.stack([x, y, z], axis=1)), eye


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside "
                             f"{self.width}x{self.height} image")


@dataclass(frozen=True)
class Pose:
    rotation: tuple[float, float, float, float]
    translation: tuple[float, float, float]

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"rotation must be a unit quaternion, got {self.rotation}")
        object.__setattr__(self, "rotation", tuple(float(v) for v in q))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @classmethod
    def identity(cls) -> "Pose":
        return cls((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(tuple(matrix_to_quat(R)), tuple(np.asarray(t, dtype=np.float64)))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_matrix(R.T, -R.T @ self.t)


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height


@dataclass(frozen=True)
class SceneBounds:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("bounds corners must be 3-vectors")
        if not np.all(hi > lo):
            raise ValueError(f"degenerate bounds: lo={tuple(lo)} hi={tuple(hi)}")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.hi) - np.array(self.lo)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.hi) + np.array(self.lo))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def padded(self, fraction: float) -> "SceneBounds":
        pad = fraction * self.extent
        return SceneBounds(tuple(np.array(self.lo) - pad), tuple(np.array(self.hi) + pad))

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.all((p >= np.array(self.lo)) & (p <= np.array(self.hi)), axis=-1)

    @classmethod
    def around(cls, points, pad: float = 0.1) -> "SceneBounds":
        """Axis-aligned box of ``points`` padded by ``pad`` times its extent per side."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot bound an empty point set")
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        ext = np.maximum(hi - lo, 1e-6)
        return cls(tuple(lo - pad * ext), tuple(hi + pad * ext))


@dataclass
class Rays:
    origins: np.ndarray     # (N, 3)
    directions: np.ndarray  # (N, 3) unit
    near: np.ndarray        # (N,)
    far: np.ndarray         # (N,)
    pixels: np.ndarray      # (N, 2) row, col

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def valid(self) -> np.ndarray:
        return self.far > self.near

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.near[idx],
                    self.far[idx], self.pixels[idx])


def camera_directions(intr: Intrinsics, pixels) -> np.ndarray:
    """Unnormalized camera-frame directions through pixel centers."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    return np.stack([(px[:, 1] + 0.5 - intr.cx) / intr.fx,
                     (px[:, 0] + 0.5 - intr.cy) / intr.fy,
                     np.ones(len(px))], axis=1)


def generate_rays(cam: Camera, pixels, bounds: SceneBounds | None = None,
                  pad: float = 0.05) -> Rays:
    """Rays through pixel centers; near/far clipped to ``bounds`` padded by ``pad``."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    h, w = cam.height, cam.width
    bad = np.flatnonzero((px[:, 0] < -0.5) | (px[:, 0] >= h - 0.5)
                         | (px[:, 1] < -0.5) | (px[:, 1] >= w - 0.5))
    if bad.size:
        i = int(bad[0])
        raise IndexError(f"pixel {i} at (row={px[i, 0]}, col={px[i, 1]}) outside {w}x{h} image")
    d = camera_directions(cam.intrinsics, px) @ cam.pose.R.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.pose.t, d.shape).copy()
    if bounds is None:
        near, far = np.zeros(len(d)), np.full(len(d), np.inf)
    else:
        near, far = clip_to_box(o, d, bounds.padded(pad))
    return Rays(o, d, near, far, px)


def clip_to_box(origins, directions, bounds: SceneBounds) -> tuple[np.ndarray, np.ndarray]:
    """Slab-method entry/exit distances; misses return near >= far."""
    lo, hi = np.array(bounds.lo), np.array(bounds.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    near = np.maximum(tmin.max(axis=1), 0.0)
    far = tmax.min(axis=1)
    far = np.where(far > near, far, near)
    return near, far


def project_points(cam: Camera, points) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection: (row, col, depth, in_front). Row/col are pixel-center coordinates."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = (p - cam.pose.t) @ cam.pose.R
    z = pc[:, 2]
    front = z > 0
    safe = np.where(front, z, 1.0)
    intr = cam.intrinsics
    col = intr.fx * pc[:, 0] / safe + intr.cx - 0.5
    row = intr.fy * pc[:, 1] / safe + intr.cy - 0.5
    return row, col, z, front


def project_point(cam: Camera, p) -> tuple[float, float, float] | None:
    """(row, col, depth) of a world point, or ``None`` when it is behind the camera."""
    row, col, z, front = project_points(cam, p)
    if not front[0]:
        return None
    return float(row[0]), float(col[0]), float(z[0])


def normalize_to_grid(p, bounds: SceneBounds) -> tuple[np.ndarray, np.ndarray]:
    """Affine map of ``bounds`` onto the unit cube, plus an outside-bounds flag."""
    p = np.asarray(p, dtype=np.float64)
    u = (p - np.array(bounds.lo)) / bounds.extent
    outside = np.any((u < 0) | (u > 1), axis=-1)
    return u, outside


def denormalize_from_grid(u, bounds: SceneBounds) -> np.ndarray:
    return np.asarray(u, dtype=np.float64) * bounds.extent + np.array(bounds.lo)


def stratified_sample(near, far, n: int, rng: np.random.Generator | None = None):
    """One draw per equal-width stratum of [near, far]; ``rng=None`` takes bin midpoints.

    Returns ``(t, delta)`` of shape (R, n); the last gap is ``(far - near) / n``.
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    width = (far - near) / n
    u = np.full((len(near), n), 0.5) if rng is None else rng.random((len(near), n))
    t = near[:, None] + (np.arange(n)[None, :] + u) * width[:, None]
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = width
    return t, delta
