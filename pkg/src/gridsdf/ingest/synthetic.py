"""Analytic CSG scenes rendered by sphere tracing: exact color, depth, normals and sparse points."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import (Camera, Intrinsics, Pose, SceneBounds, clip_to_box, generate_rays,
                        look_at, project_points)
from .colmap import SparsePoint, SparsePointCloud


@dataclass
class Primitive:
    kind: str                 # sphere | box | plane
    params: dict
    albedo: tuple[float, float, float]

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "plane"):
            raise ValueError(f"unknown primitive {self.kind!r}")
        self.albedo = tuple(float(a) for a in self.albedo)
        if self.kind == "plane":
            n = np.asarray(self.params["normal"], dtype=np.float64)
            self.params = {"normal": n / np.linalg.norm(n), "offset": float(self.params["offset"])}
        elif self.kind == "sphere":
            self.params = {"center": np.asarray(self.params["center"], dtype=np.float64),
                           "radius": float(self.params["radius"])}
        else:
            self.params = {"center": np.asarray(self.params["center"], dtype=np.float64),
                           "half_size": np.asarray(self.params["half_size"], dtype=np.float64)}

    def sdf(self, p: np.ndarray) -> np.ndarray:
        P = self.params
        if self.kind == "sphere":
            return np.linalg.norm(p - P["center"], axis=-1) - P["radius"]
        if self.kind == "plane":
            return p @ P["normal"] - P["offset"]
        q = np.abs(p - P["center"]) - P["half_size"]
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)

    def gradient(self, p: np.ndarray) -> np.ndarray:
        P = self.params
        if self.kind == "sphere":
            v = p - P["center"]
            return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-300)
        if self.kind == "plane":
            return np.broadcast_to(P["normal"], p.shape).copy()
        v = p - P["center"]
        q = np.abs(v) - P["half_size"]
        outside = np.maximum(q, 0.0)
        length = np.linalg.norm(outside, axis=-1, keepdims=True)
        g_out = outside / np.maximum(length, 1e-300) * np.sign(v)
        g_in = np.zeros_like(v)
        ax = np.argmax(q, axis=-1)
        g_in[np.arange(len(v)), ax] = np.sign(v[np.arange(len(v)), ax])
        return np.where(length > 0, g_out, g_in)

    def box(self) -> tuple[np.ndarray, np.ndarray] | None:
        P = self.params
        if self.kind == "sphere":
            return P["center"] - P["radius"], P["center"] + P["radius"]
        if self.kind == "box":
            return P["center"] - P["half_size"], P["center"] + P["half_size"]
        return None

    def to_dict(self) -> dict:
        return {"type": self.kind, "albedo": list(self.albedo),
                **{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}}


@dataclass
class NoiseConfig:
    scale: float = 2.0          # w*
    shift: float = 0.5          # b*
    depth_sigma: float = 0.0
    normal_sigma: float = 0.0   # radians


@dataclass
class SyntheticScene:
    primitives: list[Primitive]
    light: np.ndarray
    bounds: SceneBounds
    intrinsics: Intrinsics
    poses: list[Pose]
    train: list[int]
    test: list[int]
    sparse_points: int = 200
    seed: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ambient: float = 0.1

    def __post_init__(self):
        light = np.asarray(self.light, dtype=np.float64)
        self.light = light / np.linalg.norm(light)

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        return np.min(np.stack([pr.sdf(p) for pr in self.primitives]), axis=0)

    def nearest(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        return np.argmin(np.stack([pr.sdf(p) for pr in self.primitives]), axis=0)

    def gradient(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        which = self.nearest(p)
        out = np.zeros_like(p)
        for k, pr in enumerate(self.primitives):
            m = which == k
            if m.any():
                out[m] = pr.gradient(p[m])
        return out

    def albedo(self, p) -> np.ndarray:
        table = np.array([pr.albedo for pr in self.primitives])
        return table[self.nearest(p)]

    def cameras(self) -> list[Camera]:
        return [Camera(self.intrinsics, pose) for pose in self.poses]

    # serialization

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        known = {"primitives", "light", "bounds", "camera", "views", "train", "test",
                 "sparse_points", "seed", "noise", "ambient"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        prims = []
        for p in d["primitives"]:
            p = dict(p)
            kind, albedo = p.pop("type"), p.pop("albedo", (0.8, 0.8, 0.8))
            prims.append(Primitive(kind, p, albedo))
        cam = d["camera"]
        w, h = int(cam["width"]), int(cam["height"])
        if "fov_deg" in cam:
            fx = fy = 0.5 * w / np.tan(np.radians(cam["fov_deg"]) / 2)
        else:
            fx, fy = float(cam["fx"]), float(cam.get("fy", cam["fx"]))
        intr = Intrinsics(fx, fy, float(cam.get("cx", w / 2)), float(cam.get("cy", h / 2)), w, h)
        views = d["views"]
        poses = []
        if isinstance(views, dict) and "orbit" in views:
            o = views["orbit"]
            target = np.asarray(o.get("target", (0, 0, 0)), dtype=np.float64)
            for k in range(int(o["count"])):
                ang = 2 * np.pi * k / o["count"] + np.radians(o.get("start_deg", 0.0))
                eye = target + np.array([o["radius"] * np.cos(ang), o["height"], o["radius"] * np.sin(ang)])
                q, t = look_at(eye, target)
                poses.append(Pose(tuple(q), tuple(t)))
        else:
            for v in views:
                q, t = look_at(v["eye"], v["target"], v.get("up", (0, 1, 0)))
                poses.append(Pose(tuple(q), tuple(t)))
        if "bounds" in d:
            bounds = SceneBounds(tuple(d["bounds"]["lo"]), tuple(d["bounds"]["hi"]))
        else:
            boxes = [pr.box() for pr in prims if pr.box() is not None]
            if len(boxes) != len(prims):
                raise ValueError("scenes with planes need explicit bounds")
            lo = np.min([b[0] for b in boxes], axis=0)
            hi = np.max([b[1] for b in boxes], axis=0)
            bounds = SceneBounds(tuple(lo), tuple(hi)).padded(0.1)
        n = len(poses)
        train = list(d.get("train", range(n)))
        test = list(d.get("test", []))
        for i in train + test:
            if not 0 <= i < n:
                raise ValueError(f"view index {i} out of range for {n} views")
        noise = NoiseConfig(**d.get("noise", {}))
        return cls(prims, np.asarray(d["light"], dtype=np.float64), bounds, intr, poses, train, test,
                   int(d.get("sparse_points", 200)), int(d.get("seed", 0)), noise,
                   float(d.get("ambient", 0.1)))

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sphere_box_scene_dict() -> dict:
    """The default desk-scale test scene: a sphere and a box on a floor, 24 orbit views."""
    return {
        "primitives": [
            {"type": "sphere", "center": [-0.45, 0.0, 0.1], "radius": 0.45, "albedo": [0.85, 0.3, 0.25]},
            {"type": "box", "center": [0.5, -0.15, -0.1], "half_size": [0.3, 0.35, 0.3],
             "albedo": [0.25, 0.5, 0.85]},
            {"type": "plane", "normal": [0.0, 1.0, 0.0], "offset": -0.5, "albedo": [0.7, 0.7, 0.55]},
        ],
        "light": [0.4, 1.0, 0.3],
        "bounds": {"lo": [-1.2, -0.6, -1.2], "hi": [1.2, 1.0, 1.2]},
        "camera": {"width": 64, "height": 64, "fov_deg": 50.0},
        "views": {"orbit": {"count": 24, "radius": 2.6, "height": 1.1, "target": [0.0, -0.1, 0.0]}},
        "train": [0, 3, 6, 9, 12, 15, 18, 21],
        "test": [1, 7, 13, 19],
        "sparse_points": 200,
        "seed": 0,
        "noise": {"scale": 2.0, "shift": 0.5, "depth_sigma": 0.02, "normal_sigma": 0.05},
    }


def sphere_trace(sdf, origins, directions, near, far, tol: float = 1e-6, max_steps: int = 512,
                 grad=None):
    """March each ray by the SDF value; returns (t, hit). Optional Newton polish with ``grad``."""
    t = near.copy()
    active = far > near
    hit = np.zeros(len(t), dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        s = sdf(origins[idx] + t[idx, None] * directions[idx])
        done = np.abs(s) < tol
        hit[idx[done]] = True
        t[idx[~done]] += s[~done]
        escaped = t[idx] > far[idx]
        active[idx[done | escaped]] = False
    if grad is not None and hit.any():
        idx = np.flatnonzero(hit)
        for _ in range(2):
            p = origins[idx] + t[idx, None] * directions[idx]
            slope = np.sum(grad(p) * directions[idx], axis=1)
            ok = np.abs(slope) > 0.1
            t[idx[ok]] -= sdf(p[ok]) / slope[ok]
        # grazing rays: Newton is ill-conditioned, so bracket a sign change and bisect
        graze = idx[np.abs(slope) <= 0.1]
        if graze.size:
            t[graze] = _bisect_graze(sdf, origins[graze], directions[graze], t[graze], far[graze])
    return t, hit


def _bisect_graze(sdf, o, d, t, far, iters: int = 60):
    lo, hi = t.copy(), np.full_like(t, np.nan)
    step = np.full_like(t, 1e-6)
    for _ in range(20):
        open_ = np.isnan(hi)
        if not open_.any():
            break
        tt = np.minimum(lo[open_] + step[open_], far[open_])
        inside = sdf(o[open_] + tt[:, None] * d[open_]) < 0
        k = np.flatnonzero(open_)
        hi[k[inside]] = tt[inside]
        step[open_] *= 2
    ok = ~np.isnan(hi)
    if not ok.any():
        return t
    a, b, oo, dd = lo[ok], hi[ok], o[ok], d[ok]
    for _ in range(iters):
        m = 0.5 * (a + b)
        neg = sdf(oo + m[:, None] * dd) < 0
        b = np.where(neg, m, b)
        a = np.where(neg, a, m)
    out = t.copy()
    out[ok] = 0.5 * (a + b)
    return out


@dataclass
class SynthView:
    color: np.ndarray       # (H, W, 3)
    depth: np.ndarray       # (H, W) distance along the unit ray, 0 where invalid
    zdepth: np.ndarray      # (H, W) camera-frame z
    normal: np.ndarray      # (H, W, 3) world frame
    normal_cam: np.ndarray  # (H, W, 3) camera frame
    valid: np.ndarray       # (H, W) bool
    points: np.ndarray      # (H, W, 3) world hit points


def synth_render(scene: SyntheticScene, cam: Camera) -> SynthView:
    if scene.sdf(cam.pose.t[None])[0] <= 0:
        raise ValueError("camera is inside a solid")
    h, w = cam.height, cam.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rays = generate_rays(cam, np.stack([rows.ravel(), cols.ravel()], axis=1))
    near, far = clip_to_box(rays.origins, rays.directions, scene.bounds)
    t, hit = sphere_trace(scene.sdf, rays.origins, rays.directions, near, far, grad=scene.gradient)
    pts = rays.origins + t[:, None] * rays.directions
    inside = scene.bounds.padded(1e-9).contains(pts)
    valid = hit & inside
    normal = np.zeros_like(pts)
    color = np.zeros_like(pts)
    if valid.any():
        n = scene.gradient(pts[valid])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        normal[valid] = n
        shade = np.maximum(0.0, n @ scene.light)[:, None]
        color[valid] = np.clip(scene.albedo(pts[valid]) * shade + scene.ambient, 0.0, 1.0)
    depth = np.where(valid, t, 0.0)
    R = cam.pose.R
    zdepth = np.where(valid, (pts - cam.pose.t) @ R[:, 2], 0.0)
    normal_cam = normal @ R
    return SynthView(color.reshape(h, w, 3), depth.reshape(h, w), zdepth.reshape(h, w),
                     normal.reshape(h, w, 3), normal_cam.reshape(h, w, 3), valid.reshape(h, w),
                     np.where(valid[:, None], pts, 0.0).reshape(h, w, 3))


def sample_sparse_points(views: list[SynthView], count: int, seed: int,
                         image_ids=None) -> SparsePointCloud:
    """Seeded hit-point subsample, ``ceil(count / len(views))`` per view, zero error.

    Each point is observed only by the view it was sampled from, at its pixel center.
    """
    rng = np.random.default_rng(seed)
    per_view = int(np.ceil(count / max(len(views), 1)))
    image_ids = list(range(1, len(views) + 1)) if image_ids is None else list(image_ids)
    points = []
    for vi, view in enumerate(views):
        cand = np.flatnonzero(view.valid.ravel())
        if cand.size == 0:
            continue
        pick = rng.choice(cand, size=min(per_view, cand.size), replace=False)
        for j, flat in enumerate(np.sort(pick)):
            xyz = view.points.reshape(-1, 3)[flat]
            points.append(SparsePoint(len(points) + 1, xyz.copy(), 0.0, [(image_ids[vi], j)],
                                      tuple(int(c) for c in np.round(view.color.reshape(-1, 3)[flat] * 255))))
    return SparsePointCloud(points)


def project_sparse_depths(cloud: SparsePointCloud, cameras: list[Camera], image_ids=None) -> list[np.ndarray]:
    """Per-camera (row, col, depth) arrays at the nearest pixel.

    Points with a track are projected only into the images that observe them;
    points without one are projected into every camera. Behind-camera and
    out-of-image projections are dropped.
    """
    image_ids = list(range(1, len(cameras) + 1)) if image_ids is None else list(image_ids)
    out = []
    for cam, iid in zip(cameras, image_ids):
        sel = [p for p in cloud.points if not p.track or any(t[0] == iid for t in p.track)]
        if not sel:
            out.append(np.zeros((0, 3)))
            continue
        row, col, z, front = project_points(cam, np.array([p.xyz for p in sel]))
        r, c = np.rint(row), np.rint(col)
        ok = front & (r >= 0) & (r < cam.height) & (c >= 0) & (c < cam.width)
        out.append(np.stack([r[ok], c[ok], z[ok]], axis=1))
    return out


@dataclass
class PriorMaps:
    depth: np.ndarray    # (H, W) camera-frame z, affine-ambiguous
    normal: np.ndarray   # (H, W, 3) camera frame
    mask: np.ndarray     # (H, W) bool

    def __post_init__(self):
        m = self.mask.astype(bool)
        self.mask = m
        if m.any():
            if np.any(self.depth[m] <= 0):
                raise ValueError("valid prior depths must be positive")
            if np.any(np.abs(np.linalg.norm(self.normal[m], axis=-1) - 1.0) > 1e-3):
                raise ValueError("valid prior normals must be unit length")


def _rotate(v: np.ndarray, axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle)[:, None], np.sin(angle)[:, None]
    return v * c + np.cross(axis, v) * s + axis * np.sum(axis * v, axis=1, keepdims=True) * (1 - c)


def degrade_priors(zdepth, normal_cam, valid, noise: NoiseConfig, seed: int) -> PriorMaps:
    """depth' = (depth - shift) / scale * (1 + eps); normals jittered by a random axis-angle."""
    rng = np.random.default_rng(seed)
    valid = np.asarray(valid, dtype=bool)
    eps = rng.normal(0.0, noise.depth_sigma, zdepth.shape) if noise.depth_sigma > 0 else 0.0
    depth = np.where(valid, (zdepth - noise.shift) / noise.scale * (1.0 + eps), 0.0)
    normal = normal_cam.copy()
    if noise.normal_sigma > 0 and valid.any():
        n = normal[valid]
        axis = rng.normal(size=n.shape)
        axis /= np.linalg.norm(axis, axis=1, keepdims=True)
        angle = rng.normal(0.0, noise.normal_sigma, len(n))
        n = _rotate(n, axis, angle)
        normal[valid] = n / np.linalg.norm(n, axis=1, keepdims=True)
    return PriorMaps(depth, normal, valid & (depth > 0))
