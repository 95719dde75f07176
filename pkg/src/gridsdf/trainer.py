"""Optimization loop, Adam, gradient statistics and checkpoints."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numba
import numpy as np

from . import diffcore as dc
from .diffcore import Parameter
from .field import FieldConfig, SDFField
from .geometry import SceneBounds, generate_rays, Rays
from .ingest.dataset import SceneDataset
from .losses import (BoundSchedule, LossWeights, asdf_loss, color_loss, depth_loss, eikonal_loss,
                     normal_loss, total_loss, truncation_bound)
from .renderer import render_rays

LOSS_COLUMNS = ["iteration", "L_C", "L_N", "L_D", "L_GS", "L_wEik", "L_ASDF", "L_total", "b", "inv_std"]
GRAD_COLUMNS = ["iteration", "near_mean", "near_std", "near_count", "far_mean", "far_std", "far_count",
                "flag"]


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    rays_per_batch: int = 1024
    samples_per_ray: int = 64
    lr_grid: float = 0.01
    lr_decoder: float = 0.001
    lr_inv_std: float = 0.001
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: BoundSchedule = field(default_factory=BoundSchedule)
    seed: int = 0
    regularizer: str = "asdf"          # asdf | eikonal
    gs_region: str = "paper-branch"    # paper-branch | front-band
    detach_depth: bool = True
    normalize_normal: bool = True
    use_depth: bool = True
    use_normal: bool = True
    log_every: int = 10
    gradstats_every: int = 0           # 0 disables
    gradstats_points: int = 4096
    near_band: float = 0.02            # fraction of the bounds diagonal
    far_band: tuple[float, float] = (0.18, 0.20)
    train_views: list[int] | None = None
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        for k in ("iterations", "rays_per_batch", "samples_per_ray", "log_every", "gradstats_points"):
            v = getattr(self, k)
            if v < 0 or (v == 0 and k != "iterations"):
                raise ConfigError(f"{k} must be positive, got {v}")
        if self.samples_per_ray < 2:
            raise ConfigError("samples_per_ray must be at least 2")
        for k in ("lr_grid", "lr_decoder", "lr_inv_std"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative")
        if self.regularizer not in ("asdf", "eikonal"):
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.gs_region not in ("paper-branch", "front-band"):
            raise ConfigError(f"unknown gs_region {self.gs_region!r}")
        lo, hi = self.far_band
        if not 0 < self.near_band and 0 <= lo < hi:
            raise ConfigError("bands must be positive with far_band lo < hi")
        self.far_band = (float(lo), float(hi))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = asdict(self.weights)
        d["schedule"] = asdict(self.schedule)
        d["field"] = self.field.to_dict()
        d["far_band"] = list(self.far_band)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "weights" in d:
                d["weights"] = LossWeights(**d["weights"])
            if "schedule" in d:
                d["schedule"] = BoundSchedule(**d["schedule"])
            if "field" in d:
                fd = dict(d["field"])
                if "resolutions" in fd:
                    fd["resolutions"] = tuple(fd["resolutions"])
                d["field"] = FieldConfig(**fd)
            if "far_band" in d:
                d["far_band"] = tuple(d["far_band"])
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# optimizer

@numba.njit(cache=True)
def _adam_kernel(value, grad, m, v, rate, beta1, beta2, eps, c1, c2):
    for k in range(value.size):
        g = grad[k]
        m[k] = beta1 * m[k] + (1.0 - beta1) * g
        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g
        value[k] -= rate * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)


def adam_step(params: list[Parameter], rate: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of ``p.value`` from ``p.grad``; moments live on the parameter."""
    for p in params:
        # a finite sum is a cheap proof; overflow falls through to the exact check
        if not np.isfinite(p.grad.sum()) and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name}")
    for p in params:
        p.step += 1
        _adam_kernel(p.value.reshape(-1), p.grad.reshape(-1), p.m.reshape(-1), p.v.reshape(-1),
                     rate, beta1, beta2, eps, 1.0 - beta1 ** p.step, 1.0 - beta2 ** p.step)


# checkpoints

MAGIC = b"GSDFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _records(field_: SDFField) -> list[tuple[str, np.ndarray]]:
    out = []
    for p in field_.parameters:
        out += [(p.name, p.value), (p.name + "#m", p.m), (p.name + "#v", p.v)]
    return out


def save_checkpoint(field_: SDFField, config: TrainConfig | None, path, iteration: int = 0) -> None:
    """Magic, uint32 version, uint32 header length, JSON header, then per-array records.

    Each record: uint16 name length, name (utf-8), uint8 ndim, ndim x uint32 shape,
    raw float64 little-endian values.
    """
    header = {"config": None if config is None else config.to_dict(),
              "field": field_.config.to_dict(),
              "bounds": {"lo": list(field_.bounds.lo), "hi": list(field_.bounds.hi)},
              "iteration": int(iteration),
              "prior_radius": field_.prior_radius,
              "steps": {p.name: p.step for p in field_.parameters}}
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(hb)), hb]
    recs = _records(field_)
    parts.append(struct.pack("<I", len(recs)))
    for name, arr in recs:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[SDFField, TrainConfig | None, int]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<II", raw, off)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off += 8
        header = json.loads(raw[off:off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nl].decode()
            off += nl
            (nd,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", raw, off)
            off += 4 * nd
            n = int(np.prod(shape, dtype=np.int64))
            if off + 8 * n > len(raw):
                raise CheckpointError(f"truncated checkpoint at record {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
    except struct.error:
        raise CheckpointError("truncated checkpoint") from None
    fd = dict(header["field"])
    fd["resolutions"] = tuple(fd["resolutions"])
    b = header["bounds"]
    field_ = SDFField(FieldConfig(**fd), SceneBounds(tuple(b["lo"]), tuple(b["hi"])))
    for p in field_.parameters:
        for suffix, attr in (("", "value"), ("#m", "m"), ("#v", "v")):
            arr = arrays.get(p.name + suffix)
            if arr is None or arr.shape != p.shape:
                raise CheckpointError(f"checkpoint record {p.name + suffix} missing or mis-shaped")
            getattr(p, attr)[...] = arr
        p.step = int(header["steps"][p.name])
    field_.prior_radius = header.get("prior_radius")
    config = None if header["config"] is None else TrainConfig.from_dict(header["config"])
    return field_, config, int(header["iteration"])


# ray pool

@dataclass
class RayPool:
    """Every bounds-intersecting training pixel with its supervision targets."""
    rays: Rays
    color: np.ndarray
    normal: np.ndarray        # world-frame prior normal
    normal_mask: np.ndarray
    depth: np.ndarray         # aligned prior depth as distance along the ray
    depth_mask: np.ndarray
    image: np.ndarray

    def __len__(self):
        return len(self.rays)

    def take(self, idx):
        return (self.rays.subset(idx), self.color[idx], self.normal[idx], self.normal_mask[idx],
                self.depth[idx], self.depth_mask[idx])


def build_ray_pool(ds: SceneDataset, views: list[int]) -> RayPool:
    parts = []
    for i in views:
        cam = ds.cameras[i]
        h, w = cam.height, cam.width
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pix = np.stack([rows.ravel(), cols.ravel()], axis=1)
        rays = generate_rays(cam, pix, ds.bounds)
        keep = np.flatnonzero(rays.valid)
        rays = rays.subset(keep)
        r, c = pix[keep, 0], pix[keep, 1]
        pri = ds.priors[i]
        R = cam.pose.R
        n_world = pri.normal[r, c] @ R.T
        nmask = pri.mask[r, c]
        ss = ds.scale_shift(i)
        # prior depth is camera z; convert to distance along the unit ray
        dz = rays.directions @ R[:, 2]
        if ss is None or ss.degenerate:
            depth, dmask = np.zeros(len(keep)), np.zeros(len(keep), dtype=bool)
        else:
            depth = (ss.w * pri.depth[r, c] + ss.b) / dz
            dmask = pri.mask[r, c] & (depth > 0)
        parts.append((rays, ds.images[i][r, c], n_world, nmask, depth, dmask, np.full(len(keep), i)))
    cat = lambda k: np.concatenate([p[k] for p in parts])
    rays = Rays(*(np.concatenate([getattr(p[0], k) for p in parts])
                  for k in ("origins", "directions", "near", "far", "pixels")))
    return RayPool(rays, cat(1), cat(2), cat(3), cat(4), cat(5), cat(6))


# gradient statistics

@dataclass
class GradStats:
    iteration: int
    near_mean: float
    near_std: float
    near_count: int
    far_mean: float
    far_std: float
    far_count: int
    flag: str = ""

    def row(self) -> list:
        return [self.iteration, self.near_mean, self.near_std, self.near_count,
                self.far_mean, self.far_std, self.far_count, self.flag]


def log_gradient_stats(field_: SDFField, oracle_sdf, bounds: SceneBounds, n_points: int = 4096,
                       seed: int = 0, near_band: float = 0.02, far_band=(0.18, 0.20),
                       iteration: int = 0) -> GradStats:
    """Mean/std of ||n(p)|| for uniform points binned by |oracle SDF| (bands as diagonal fractions)."""
    rng = np.random.default_rng(seed)
    lo, hi = np.array(bounds.lo), np.array(bounds.hi)
    p = lo + rng.random((n_points, 3)) * (hi - lo)
    dist = np.abs(oracle_sdf(p))
    diag = bounds.diagonal
    near = dist < near_band * diag
    far = (dist >= far_band[0] * diag) & (dist <= far_band[1] * diag)
    with dc.no_tape():
        _, n = field_.sdf_and_gradient(p)
    norm = np.linalg.norm(n.data, axis=1)
    flags = []
    stats = []
    for name, m in (("near", near), ("far", far)):
        if m.any():
            stats += [float(norm[m].mean()), float(norm[m].std()), int(m.sum())]
        else:
            stats += [math.nan, math.nan, 0]
            flags.append(f"empty_{name}")
    return GradStats(iteration, *stats, flag=";".join(flags))


# training

@dataclass
class TrainResult:
    field: SDFField
    losses: list[list[float]]
    gradstats: list[GradStats]
    iteration: int


def _write_csv(path, header, rows, append=False):
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def total_objective(field_: SDFField, batch, cfg: TrainConfig, i: int, rng=None):
    """Render a ray batch and assemble the weighted objective; returns (total, log terms).

    ``batch`` is what :meth:`RayPool.take` returns. With ``rng=None`` samples sit at
    stratum midpoints, which makes the objective a deterministic function of the parameters.
    """
    rays, color, normal, nmask, depth, dmask = batch
    w = cfg.weights
    out = render_rays(rays, field_, cfg.samples_per_ray, rng, normalize_normal=cfg.normalize_normal)
    l_c = color_loss(out.color, color)
    live = ~out.zero_weight
    l_n = normal_loss(out.normal, normal, nmask & live) if cfg.use_normal else dc.Tensor(0.0)
    l_d = depth_loss(out.depth, depth, dmask) if cfg.use_depth else dc.Tensor(0.0)
    if cfg.regularizer == "asdf":
        reg, gs, we, b = asdf_loss(out.sdf, out.gradient, out.t, out.depth, i, cfg.schedule,
                                   w.weikonal, cfg.gs_region, live, cfg.detach_depth)
    else:
        # Eikonal-only baseline: the plain Eikonal term sits in the L_wEik column
        reg = eikonal_loss(out.gradient)
        gs, we, b = dc.Tensor(0.0), reg, truncation_bound(i, cfg.schedule)
    total = total_loss({"color": l_c, "normal": l_n, "depth": l_d, "reg": reg}, w)
    return total, (l_c, l_n, l_d, gs, we, reg, b)


def train_step(field_: SDFField, pool: RayPool, cfg: TrainConfig, i: int) -> list[float]:
    """One seeded iteration: sample rays, render, total loss, backward, Adam per group."""
    rng = np.random.default_rng([cfg.seed, i])
    idx = rng.integers(0, len(pool), size=cfg.rays_per_batch)
    for p in field_.parameters:
        p.grad[...] = 0.0
    with dc.Tape() as tape:
        total, (l_c, l_n, l_d, gs, we, reg, b) = total_objective(field_, pool.take(idx), cfg, i, rng)
        if not np.isfinite(total.item()):
            raise FloatingPointError(f"non-finite loss at iteration {i}")
        tape.backward(total)
    groups = field_.groups()
    adam_step(groups["grid"], cfg.lr_grid)
    adam_step(groups["decoder"], cfg.lr_decoder)
    adam_step(groups["inv_std"], cfg.lr_inv_std)
    return [i, l_c.item(), l_n.item(), l_d.item(), gs.item(), we.item(), reg.item(), total.item(),
            float(b), float(field_.inv_std().item())]


def train(ds: SceneDataset, cfg: TrainConfig, out_dir=None, oracle_sdf=None,
          resume=None, stop_at: int | None = None) -> TrainResult:
    """Run ``cfg.iterations`` steps (or up to ``stop_at``) from scratch or a checkpoint.

    Writes ``losses.csv``, ``gradstats.csv`` (when enabled with an oracle) and
    ``checkpoint.bin`` into ``out_dir``. On a non-finite loss the last good
    checkpoint is kept and the error is re-raised.
    """
    views = cfg.train_views if cfg.train_views is not None else ds.train
    if not views:
        raise ConfigError("no training views")
    pool = build_ray_pool(ds, list(views))
    if len(pool) == 0:
        raise ConfigError("no training ray intersects the scene bounds")
    if resume is not None:
        field_, _, start = load_checkpoint(resume)
    else:
        field_, start = SDFField(cfg.field, ds.bounds, seed=cfg.seed), 0
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is None:
            _write_csv(out / "losses.csv", LOSS_COLUMNS, [])
            if cfg.gradstats_every and oracle_sdf is not None:
                _write_csv(out / "gradstats.csv", GRAD_COLUMNS, [])
    losses, gstats, pending_l, pending_g = [], [], [], []
    ckpt = out / "checkpoint.bin" if out is not None else None

    def flush(i):
        if out is None:
            return
        _write_csv(out / "losses.csv", LOSS_COLUMNS, pending_l, append=True)
        if pending_g:
            _write_csv(out / "gradstats.csv", GRAD_COLUMNS, [g.row() for g in pending_g], append=True)
        pending_l.clear()
        pending_g.clear()
        save_checkpoint(field_, cfg, ckpt, i)

    def grad_row(i):
        g = log_gradient_stats(field_, oracle_sdf, ds.bounds, cfg.gradstats_points, seed=cfg.seed,
                               near_band=cfg.near_band, far_band=cfg.far_band, iteration=i)
        gstats.append(g)
        pending_g.append(g)

    if out is not None and resume is None:
        save_checkpoint(field_, cfg, ckpt, start)
    for i in range(start, end):
        if cfg.gradstats_every and oracle_sdf is not None and i % cfg.gradstats_every == 0:
            grad_row(i)
        try:
            row = train_step(field_, pool, cfg, i)
        except FloatingPointError:
            if out is not None:
                _write_csv(out / "losses.csv", LOSS_COLUMNS, pending_l, append=True)
            raise
        losses.append(row)
        if i % cfg.log_every == 0 or i == end - 1:
            pending_l.append(row)
        if out is not None and (i + 1) % max(cfg.log_every * 50, 100) == 0:
            flush(i + 1)
    if cfg.gradstats_every and oracle_sdf is not None and end % cfg.gradstats_every == 0 and end > start:
        grad_row(end)
    flush(end)
    return TrainResult(field_, losses, gstats, end)
