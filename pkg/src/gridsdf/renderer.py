"""Differentiable SDF volume rendering with the discrete logistic-CDF opacity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .field import SDFField
from .geometry import Camera, Rays, SceneBounds, generate_rays, stratified_sample

_EPS = 1e-10


def alpha_from_sdf(s, inv_std) -> Tensor:
    """Opacity of each interval between consecutive samples along the last axis.

    ``alpha_i = max((Phi(s_i) - Phi(s_{i+1})) / Phi(s_i), 0)`` with
    ``Phi(x) = sigmoid(inv_std * x)``; returns one fewer entry than ``s``.
    """
    s = dc.constant(s)
    cdf = dc.sigmoid(s * inv_std)
    prev, nxt = cdf[..., :-1], cdf[..., 1:]
    return dc.maximum_scalar((prev - nxt) / (prev + _EPS), 0.0)


def composite_weights(alpha) -> Tensor:
    """w_i = T_i alpha_i with T_i = prod_{j<i} (1 - alpha_j)."""
    alpha = dc.constant(alpha)
    return dc.cumprod_exclusive(1.0 - alpha) * alpha


@dataclass
class RenderOutput:
    color: Tensor     # (R, 3)
    depth: Tensor     # (R,)
    normal: Tensor    # (R, 3)
    opacity: Tensor   # (R,)
    weights: Tensor   # (R, S)
    t: np.ndarray     # (R, S)
    delta: np.ndarray
    sdf: Tensor | None = None       # (R, S)
    gradient: Tensor | None = None  # (R, S, 3)
    zero_weight: np.ndarray | None = None


def composite(t, alpha, colors, gradients=None, normalize_normal: bool = True,
              delta=None) -> RenderOutput:
    """Alpha-composite per-sample colors, depths and SDF gradients along each ray.

    ``alpha`` has shape (R, S) and is already padded for the final sample.
    """
    t = np.asarray(t, dtype=np.float64)
    alpha = dc.constant(alpha)
    if alpha.shape[-1] < 2:
        raise ValueError("compositing needs at least 2 samples per ray")
    w = composite_weights(alpha)
    opacity = dc.sum(w, axis=-1)
    color = dc.sum(w[..., None] * colors, axis=-2)
    depth = dc.sum(w * t, axis=-1)
    zero = opacity.data <= 1e-12
    if gradients is None:
        normal = Tensor(np.zeros(color.shape))
    else:
        nsum = dc.sum(w[..., None] * gradients, axis=-2)
        if normalize_normal:
            normal = nsum / dc.maximum_scalar(dc.l2_norm(nsum), 1e-12)[..., None]
        else:
            normal = nsum
    return RenderOutput(color, depth, normal, opacity, w, t,
                        delta if delta is not None else np.zeros_like(t), zero_weight=zero)


def render_rays(rays: Rays, field: SDFField, n_samples: int,
                rng: np.random.Generator | None = None, normalize_normal: bool = True,
                with_normals: bool = True) -> RenderOutput:
    """Sample, evaluate the field and composite. ``rng=None`` uses stratum midpoints."""
    t, delta = stratified_sample(rays.near, rays.far, n_samples, rng)
    R, S = t.shape
    pts = (rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]).reshape(-1, 3)
    if with_normals:
        s, n = field.sdf_and_gradient(pts)
        n = dc.reshape(n, (R, S, 3))
    else:
        s, n = field.sdf(pts), None
    c = dc.reshape(field.color(pts), (R, S, 3))
    s = dc.reshape(s, (R, S))
    for name, v in (("SDF", s), ("color", c), ("gradient", n)):
        if v is not None and not np.all(np.isfinite(v.data)):
            ray = int(np.argwhere(~np.isfinite(v.data))[0][0])
            r, col = rays.pixels[ray]
            raise FloatingPointError(f"non-finite {name} on ray {ray} (pixel row={r:g}, col={col:g})")
    alpha = alpha_from_sdf(s, field.inv_std())
    alpha = dc.concatenate([alpha, np.zeros((R, 1))])
    out = composite(t, alpha, c, n, normalize_normal=normalize_normal, delta=delta)
    out.sdf, out.gradient = s, n
    return out


def render_image(cam: Camera, field: SDFField, bounds: SceneBounds, n_samples: int,
                 chunk: int = 2048) -> dict[str, np.ndarray]:
    """Full-image color/depth/normal/opacity without a tape (stratum midpoints)."""
    h, w = cam.height, cam.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([rows.ravel(), cols.ravel()], axis=1)
    rays = generate_rays(cam, pix, bounds)
    color = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    normal = np.zeros((h * w, 3))
    opacity = np.zeros(h * w)
    hit = np.flatnonzero(rays.valid)
    with dc.no_tape():
        for start in range(0, len(hit), chunk):
            idx = hit[start:start + chunk]
            out = render_rays(rays.subset(idx), field, n_samples)
            color[idx] = out.color.data
            depth[idx] = out.depth.data
            normal[idx] = out.normal.data
            opacity[idx] = out.opacity.data
    return {"color": color.reshape(h, w, 3), "depth": depth.reshape(h, w),
            "normal": normal.reshape(h, w, 3), "opacity": opacity.reshape(h, w)}
