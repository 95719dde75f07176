"""Multi-level feature grids with MLP decoders for SDF and color.

The SDF spatial gradient is computed by pushing three tangent directions
forward through interpolation, encoding and decoder alongside the value. Every
step of that pass is a tape operation, so losses on ``||n(p)||`` receive exact
parameter gradients from a single reverse sweep.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field as dc_field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _trilinear
from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .geometry import SceneBounds

VALUE = (0, 0, 0)
SPATIAL = ((1, 0, 0), (0, 1, 0), (0, 0, 1))

def interp(u, grid, derivs: Sequence[tuple[int, int, int]] = (VALUE,)) -> Tensor:
    """Trilinear interpolation of a (R, R, R, C) grid at normalized points ``u`` (N, 3).

    Returns shape (len(derivs), N, C): for each requested per-axis derivative
    order, the corresponding partial derivative with respect to ``u``.
    Coordinates outside [0, 1] are clamped; clamped axes have zero derivative.
    Differentiable in both ``u`` and ``grid``.
    """
    u, grid = dc.constant(u), dc.constant(grid)
    res, ch = grid.shape[0], grid.shape[-1]
    if grid.ndim != 4 or grid.shape[:3] != (res, res, res) or res < 2:
        raise dc.ShapeError(f"interp: expected a cubic grid with resolution >= 2, got {grid.shape}")
    if u.ndim != 2 or u.shape[1] != 3:
        raise dc.ShapeError(f"interp: expected points of shape (N, 3), got {u.shape}")
    ud = np.ascontiguousarray(u.data)
    flat = grid.data.reshape(-1, ch)
    dv = np.array(derivs, dtype=np.int64).reshape(-1, 3)
    out = _trilinear.forward(ud, flat, res, dv)

    def vjp(g):
        g = np.ascontiguousarray(g)
        gu = _trilinear.backward_points(ud, flat, res, dv, g) if u.node is not None else None
        ggrid = None
        if grid.node is not None:
            ggrid = _trilinear.backward_grid(ud, g, res, dv, ch).reshape(grid.shape)
        return gu, ggrid

    return dc.custom_op("interp", (u, grid), out, vjp)


def pe_matrix(n_freqs: int) -> np.ndarray:
    """(3, 3L) block matrix; column ``a * L + k`` carries 2^k * pi for axis ``a``."""
    F = np.zeros((3, 3 * n_freqs))
    for a in range(3):
        F[a, a * n_freqs:(a + 1) * n_freqs] = np.pi * 2.0 ** np.arange(n_freqs)
    return F


def positional_encoding(p, n_freqs: int, tangents: bool = False):
    """Fourier features ``[sin(2^k pi p_a) ..., cos(2^k pi p_a) ...]`` of width 6L.

    With ``tangents=True`` also returns the (3, N, 6L) derivatives along each axis.
    """
    if n_freqs < 1:
        raise ValueError("positional encoding needs at least one frequency")
    p = dc.constant(p)
    F = pe_matrix(n_freqs)
    z = dc.matmul(p, F)
    sz, cz = dc.sin(z), dc.cos(z)
    enc = dc.concatenate([sz, cz])
    if not tangents:
        return enc
    dz = F[:, None, :]  # (3, 1, 3L)
    tan = dc.concatenate([cz * dz, -sz * dz])
    return enc, tan


@dataclass
class FieldConfig:
    resolutions: tuple[int, ...] = (16, 32, 64, 128)
    channels: int = 4
    hidden: int = 128
    pe_freqs: int = 6
    init_radius: float = 0.5      # fraction of the bounds half-diagonal
    init_std: float = 0.3         # NeuS logistic standard deviation
    init_noise: float = 1e-2      # std of random grid features

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ValueError(f"resolutions must be strictly increasing, got {self.resolutions}")
        if min(self.resolutions) < 2 or self.channels < 1 or self.hidden < 1:
            raise ValueError("resolutions >= 2, channels >= 1 and hidden >= 1 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolutions"] = list(self.resolutions)
        return d

    @property
    def n_inputs(self) -> int:
        return len(self.resolutions) * self.channels + 6 * self.pe_freqs


class Decoder:
    """softplus(x W1 + b1) W2 + x Ws + b2, with a linear skip path ``Ws``."""

    def __init__(self, name: str, n_in: int, hidden: int, n_out: int, rng: np.random.Generator,
                 out_scale: float = 1e-3):
        self.name = name
        self.W1 = Parameter(f"{name}.W1", rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, hidden)))
        self.b1 = Parameter(f"{name}.b1", np.zeros(hidden))
        self.W2 = Parameter(f"{name}.W2", rng.normal(0.0, out_scale, (hidden, n_out)))
        self.Ws = Parameter(f"{name}.Ws", np.zeros((n_in, n_out)))
        self.b2 = Parameter(f"{name}.b2", np.zeros(n_out))

    @property
    def parameters(self) -> list[Parameter]:
        return [self.W1, self.b1, self.W2, self.Ws, self.b2]

    def __call__(self, x, tx=None):
        W1, b1, W2, Ws, b2 = (p.tensor() for p in self.parameters)
        h = dc.matmul(x, W1) + b1
        out = dc.matmul(dc.softplus(h), W2) + dc.matmul(x, Ws) + b2
        if tx is None:
            return out
        th = dc.matmul(tx, W1)
        tout = dc.matmul(dc.sigmoid(h) * th, W2) + dc.matmul(tx, Ws)
        return out, tout


class SDFField:
    """Feature pyramid, SDF/color decoders and the learnable inverse standard deviation."""

    def __init__(self, config: FieldConfig, bounds: SceneBounds, seed: int = 0):
        self.config = config
        self.bounds = bounds
        rng = np.random.default_rng(seed)
        c = config.channels
        self.sdf_grids = [Parameter(f"sdf_grid.{i}", rng.normal(0, config.init_noise, (r, r, r, c)))
                          for i, r in enumerate(config.resolutions)]
        self.color_grids = [Parameter(f"color_grid.{i}", rng.normal(0, config.init_noise, (r, r, r, c)))
                            for i, r in enumerate(config.resolutions)]
        self.sdf_decoder = Decoder("sdf_decoder", config.n_inputs, config.hidden, 1, rng, out_scale=1e-4)
        self.color_decoder = Decoder("color_decoder", config.n_inputs, config.hidden, 3, rng)
        self.log_inv_std = Parameter("log_inv_std", np.array([np.log(1.0 / config.init_std)]))
        self.init_sphere()

    # parameters

    @property
    def parameters(self) -> list[Parameter]:
        return (self.sdf_grids + self.color_grids + self.sdf_decoder.parameters
                + self.color_decoder.parameters + [self.log_inv_std])

    def groups(self) -> dict[str, list[Parameter]]:
        return {"grid": self.sdf_grids + self.color_grids,
                "decoder": self.sdf_decoder.parameters + self.color_decoder.parameters,
                "inv_std": [self.log_inv_std]}

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters}

    def vertices(self, level: int) -> np.ndarray:
        """World coordinates (R, R, R, 3) of one level's lattice."""
        r = self.config.resolutions[level]
        ax = np.linspace(0.0, 1.0, r)
        u = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
        return u * self.bounds.extent + np.array(self.bounds.lo)

    def set_sdf_function(self, fn: Callable[[np.ndarray], np.ndarray], bias: float = 0.0):
        """Hand-set the SDF head to ``mean_levels(trilinear(fn)) + bias`` via the skip path.

        Channel 0 of every SDF level holds ``fn`` at the lattice vertices, all other
        SDF features, the hidden path output and the sphere prior are removed.
        """
        levels = len(self.config.resolutions)
        c = self.config.channels
        for i, g in enumerate(self.sdf_grids):
            g.value[...] = 0.0
            g.value[..., 0] = fn(self.vertices(i).reshape(-1, 3)).reshape(g.shape[:3])
        dec = self.sdf_decoder
        dec.W2.value[...] = 0.0
        dec.Ws.value[...] = 0.0
        dec.Ws.value[np.arange(levels) * c, 0] = 1.0 / levels
        dec.b2.value[...] = bias
        self.prior_radius = None

    def init_sphere(self):
        """Fixed analytic sphere prior ``|p - center| - r`` added to the decoder output.

        ``r = init_radius`` x half-diagonal about the bounds center. The grids and
        decoder start near zero, so the initial field is the sphere SDF up to the
        small random hidden path, with an exactly radial gradient.
        """
        self.prior_center = self.bounds.center
        self.prior_radius = self.config.init_radius * 0.5 * self.bounds.diagonal
        self.init_radius_world = self.prior_radius

    def _prior(self, p: Tensor, tangents: bool):
        if self.prior_radius is None:
            return None, None
        diff = p - self.prior_center
        norm = dc.maximum_scalar(dc.l2_norm(diff), 1e-12)
        s = norm - self.prior_radius
        if not tangents:
            return s, None
        return s, diff / norm[:, None]

    # evaluation

    def normalize(self, p) -> Tensor:
        p = dc.constant(p)
        return (p - np.array(self.bounds.lo)) * (1.0 / self.bounds.extent)

    def _features(self, u: Tensor, grids: Iterable[Parameter], tangents: bool):
        derivs = (VALUE,) + SPATIAL if tangents else (VALUE,)
        vals, tans = [], []
        for g in grids:
            out = interp(u, g.tensor(), derivs)
            vals.append(out[0])
            if tangents:
                tans.append(out[1:])
        if not tangents:
            return dc.concatenate(vals + [positional_encoding(u, self.config.pe_freqs)]), None
        enc, tenc = positional_encoding(u, self.config.pe_freqs, tangents=True)
        return dc.concatenate(vals + [enc]), dc.concatenate(tans + [tenc])

    def sdf(self, p) -> Tensor:
        """s(p) for world points (N, 3) -> (N,)."""
        p = dc.constant(p)
        x, _ = self._features(self.normalize(p), self.sdf_grids, tangents=False)
        s = self.sdf_decoder(x)[:, 0]
        prior, _ = self._prior(p, False)
        return s if prior is None else s + prior

    def sdf_and_gradient(self, p) -> tuple[Tensor, Tensor]:
        """s(p) (N,) and its world-space gradient n(p) (N, 3)."""
        p = dc.constant(p)
        x, tx = self._features(self.normalize(p), self.sdf_grids, tangents=True)
        out, tout = self.sdf_decoder(x, tx)
        # d/du -> d/dp_world
        s, n = out[:, 0], dc.transpose(tout[:, :, 0]) * (1.0 / self.bounds.extent)
        prior, nprior = self._prior(p, True)
        if prior is None:
            return s, n
        return s + prior, n + nprior

    def color(self, p) -> Tensor:
        """c(p) in (0, 1)^3 for world points (N, 3)."""
        x, _ = self._features(self.normalize(p), self.color_grids, tangents=False)
        return dc.sigmoid(self.color_decoder(x))

    def inv_std(self) -> Tensor:
        return dc.exp(self.log_inv_std.tensor())[0]

    def check_finite(self, t: Tensor, what: str):
        if not np.all(np.isfinite(t.data)):
            bad = np.argwhere(~np.isfinite(t.data))[0]
            raise FloatingPointError(f"non-finite {what} at index {tuple(int(i) for i in bad)}")


def sdf_eval(p, field: SDFField) -> Tensor:
    s = field.sdf(p)
    field.check_finite(s, "SDF value")
    return s


def color_eval(p, field: SDFField) -> Tensor:
    c = field.color(p)
    field.check_finite(c, "color")
    return c


def sdf_gradient(p, field: SDFField) -> Tensor:
    _, n = field.sdf_and_gradient(p)
    field.check_finite(n, "SDF gradient")
    return n
