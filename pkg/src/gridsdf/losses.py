"""Training objectives: Eikonal, annealed SDF smoothing, rendering and depth terms.

Every per-sample or per-ray sum is reduced as a mean so loss weights do not
depend on batch size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class LossWeights:
    normal: float = 0.1
    depth: float = 0.12
    asdf: float = 0.2
    weikonal: float = 0.75

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


@dataclass
class BoundSchedule:
    b_max: float = 0.5
    b_opt: float = 0.05
    i_opt: int = 150

    def __post_init__(self):
        if not (self.b_max >= self.b_opt > 0):
            raise ValueError(f"need b_max >= b_opt > 0, got {self.b_max}, {self.b_opt}")
        if self.i_opt < 1:
            raise ValueError("i_opt must be at least 1")


@dataclass
class ScaleShift:
    w: float
    b: float

    @property
    def degenerate(self) -> bool:
        return abs(self.w) < 1e-6


def truncation_bound(i: int, sched: BoundSchedule) -> float:
    """Linear anneal from b_max at i=0 to b_opt at i=i_opt, constant afterwards."""
    if i < 0:
        raise ValueError("iteration must be non-negative")
    if i >= sched.i_opt:
        return sched.b_opt
    if i == 0:
        return sched.b_max
    return (sched.i_opt - i) / sched.i_opt * (sched.b_max - sched.b_opt) + sched.b_opt


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    count = int(np.count_nonzero(mask))
    if count == 0:
        return Tensor(0.0)
    return dc.sum(x * mask.astype(np.float64)) * (1.0 / count)


def geometric_smoothing_loss(sdf, t, depth, b: float, region: str = "paper-branch",
                             ray_mask=None, detach_depth: bool = True) -> Tensor:
    """Mean |s(p(t)) - (D - t)| over samples whose ray distance to the surface is below ``b``.

    ``region="paper-branch"`` keeps every sample with ``D - t < b`` (including
    samples behind the rendered surface); ``"front-band"`` keeps ``|D - t| < b``.
    ``ray_mask`` drops whole rays (e.g. zero opacity).
    """
    sdf = dc.constant(sdf)
    t = np.asarray(t, dtype=np.float64)
    depth = dc.constant(depth)
    if detach_depth:
        depth = dc.stop_gradient(depth)
    d = depth[:, None] - t
    if region == "paper-branch":
        mask = d.data < b
    elif region == "front-band":
        mask = np.abs(d.data) < b
    else:
        raise ValueError(f"unknown smoothing region {region!r}")
    if ray_mask is not None:
        mask = mask & np.asarray(ray_mask, dtype=bool)[:, None]
    return _masked_mean(dc.absolute(sdf - d), mask)


def eikonal_loss(grad) -> Tensor:
    """Mean of (||n|| - 1)^2 over all gradient vectors."""
    return dc.mean(dc.square(dc.l2_norm(grad) - 1.0))


def weighted_eikonal_loss(sdf, grad) -> tuple[Tensor, bool]:
    """|s|-weighted mean of (||n|| - 1)^2; returns (loss, degenerate flag)."""
    sdf = dc.constant(sdf)
    w = dc.absolute(sdf)
    total = float(np.sum(w.data))
    if total <= 0.0:
        return Tensor(0.0), True
    dev = dc.square(dc.l2_norm(grad) - 1.0)
    return dc.sum(dev * w) / dc.sum(w), False


def asdf_loss(sdf, grad, t, depth, i: int, sched: BoundSchedule, weikonal: float,
              region: str = "paper-branch", ray_mask=None, detach_depth: bool = True):
    """L_GS + weikonal * L_wEik with the scheduled bound; returns (total, L_GS, L_wEik, b)."""
    b = truncation_bound(i, sched)
    gs = geometric_smoothing_loss(sdf, t, depth, b, region, ray_mask, detach_depth)
    we, _ = weighted_eikonal_loss(sdf, grad)
    return gs + weikonal * we, gs, we, b


def color_loss(pred, target, mask=None) -> Tensor:
    """Mean per-ray Euclidean distance between rendered and observed color."""
    err = dc.l2_norm(dc.constant(pred) - np.asarray(target, dtype=np.float64))
    if mask is None:
        return dc.mean(err)
    return _masked_mean(err, np.asarray(mask, dtype=bool))


def normal_loss(pred, target, mask=None) -> Tensor:
    """Mean per-ray Euclidean distance between rendered and prior normals (world frame)."""
    return color_loss(pred, target, mask)


def solve_scale_shift(prior, sparse) -> ScaleShift | None:
    """Least-squares (w, b) minimizing sum (w * prior + b - sparse)^2, or None if unsolvable."""
    d = np.asarray(prior, dtype=np.float64).ravel()
    z = np.asarray(sparse, dtype=np.float64).ravel()
    if d.size != z.size:
        raise ValueError("prior and sparse depth counts differ")
    if d.size < 2 or np.ptp(d) == 0.0:
        return None
    A = np.array([[d @ d, d.sum()], [d.sum(), float(d.size)]])
    rhs = np.array([d @ z, z.sum()])
    if abs(np.linalg.det(A)) <= 1e-12 * max(1.0, abs(A[0, 0] * A[1, 1])):
        return None
    w, b = np.linalg.solve(A, rhs)
    return ScaleShift(float(w), float(b))


def depth_loss(pred, target, mask) -> Tensor:
    """Mean |target - rendered| over rays whose image has a scale/shift fit and a valid prior."""
    err = dc.absolute(np.asarray(target, dtype=np.float64) - dc.constant(pred))
    return _masked_mean(err, np.asarray(mask, dtype=bool))


def total_loss(terms: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """L_C + w_N L_N + w_D L_D + w_ASDF L_reg; raises on any non-finite term."""
    for name in ("color", "normal", "depth", "reg"):
        v = terms[name]
        if not math.isfinite(float(np.sum(dc.constant(v).data))):
            raise FloatingPointError(f"non-finite loss term {name!r}")
    return (dc.constant(terms["color"]) + weights.normal * terms["normal"]
            + weights.depth * terms["depth"] + weights.asdf * terms["reg"])
