import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridsdf import diffcore as dc
from gridsdf.diffcore import Tape, Tensor, grad_check, grad_check_parameter
from gridsdf.field import (SPATIAL, VALUE, FieldConfig, SDFField, color_eval, interp, positional_encoding,
                           sdf_eval, sdf_gradient)
from gridsdf.geometry import SceneBounds

SMALL = FieldConfig(resolutions=(3, 5), channels=2, hidden=8, pe_freqs=2)
BOUNDS = SceneBounds((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def _oracle_interp(u, grid):
    """Independent 8-term weighted sum."""
    r = grid.shape[0]
    out = []
    for p in u:
        x = np.clip(p, 0, 1) * (r - 1)
        c = np.minimum(np.floor(x).astype(int), r - 2)
        f = x - c
        acc = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2]))
                    acc = acc + w * grid[c[0] + dx, c[1] + dy, c[2] + dz]
        out.append(acc)
    return np.array(out)


def test_interp_exact_at_every_vertex_of_a_4_cubed_grid(rng):
    g = rng.normal(size=(4, 4, 4, 3))
    idx = np.stack(np.meshgrid(*[np.arange(4)] * 3, indexing="ij"), -1).reshape(-1, 3)
    out = interp(idx / 3.0, g).data[0]
    np.testing.assert_array_equal(out, g.reshape(-1, 3))


def test_interp_cell_center_is_corner_mean(rng):
    g = rng.normal(size=(4, 4, 4, 2))
    out = interp(np.array([[0.5, 0.5, 0.5]]) / 3.0 + 1 / 3.0, g).data[0, 0]
    np.testing.assert_allclose(out, g[1:3, 1:3, 1:3].reshape(-1, 2).mean(0), atol=1e-14)


def test_interp_matches_weighted_sum_oracle(rng):
    g = rng.normal(size=(5, 5, 5, 3))
    u = rng.uniform(-0.1, 1.1, (200, 3))
    np.testing.assert_allclose(interp(u, g).data[0], _oracle_interp(u, g), atol=1e-12)


def test_interp_spatial_derivatives_and_gradients(rng):
    g = rng.normal(size=(5, 5, 5, 2))
    u = rng.uniform(0.05, 0.95, (20, 3))
    # keep away from cell faces (multiples of 1/4)
    u = np.where(np.abs(u * 4 - np.round(u * 4)) < 0.05, u + 0.1, u)
    d = interp(u, g, (VALUE,) + SPATIAL).data
    h = 1e-6
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fd = (_oracle_interp(u + e, g) - _oracle_interp(u - e, g)) / (2 * h)
        np.testing.assert_allclose(d[1 + a], fd, atol=1e-6)
    w = rng.normal(size=(4, 20, 2))
    assert grad_check(lambda t: dc.sum(interp(t, g, (VALUE,) + SPATIAL) * w), u, step=1e-7) < 1e-6
    assert grad_check(lambda t: dc.sum(interp(u, t, (VALUE,) + SPATIAL) * w), g) < 1e-8


def test_interp_clamps_outside():
    g = np.arange(8.0).reshape(2, 2, 2, 1)
    out = interp(np.array([[-3.0, -3.0, -3.0], [9.0, 9.0, 9.0]]), g, (VALUE, (1, 0, 0))).data
    np.testing.assert_array_equal(out[0, :, 0], [0.0, 7.0])
    np.testing.assert_array_equal(out[1, :, 0], [0.0, 0.0])


def test_positional_encoding_examples(rng):
    e = positional_encoding(np.zeros((1, 3)), 6).data[0]
    assert e.shape == (36,)
    np.testing.assert_array_equal(e[:18], 0.0)
    np.testing.assert_array_equal(e[18:], 1.0)
    e = positional_encoding(np.array([[1.0, 0.0, 0.0]]), 6).data[0]
    assert abs(e[0]) < 1e-15 and e[18] == -1.0
    p = rng.uniform(-1, 1, (4, 3))
    w = rng.normal(size=(4, 36))
    assert grad_check(lambda t: dc.sum(positional_encoding(t, 6) * w), p, step=1e-7) < 1e-6
    # tangent output is the analytic Jacobian
    _, tan = positional_encoding(p, 6, tangents=True)
    h = 1e-6
    for a in range(3):
        e3 = np.zeros(3)
        e3[a] = h
        fd = (positional_encoding(p + e3, 6).data - positional_encoding(p - e3, 6).data) / (2 * h)
        np.testing.assert_allclose(tan.data[a], fd, atol=1e-6)
    with pytest.raises(ValueError):
        positional_encoding(p, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        FieldConfig(resolutions=(8, 8))
    assert FieldConfig().n_inputs == 16 + 36


def test_sphere_init_center_value_and_radial_gradient(rng):
    f = SDFField(FieldConfig(resolutions=(9, 17, 33, 65)), BOUNDS, seed=0)
    r = 0.5 * 0.5 * BOUNDS.diagonal
    s = sdf_eval(np.zeros((1, 3)), f).item()
    assert s < 0
    assert abs(s + r) < 0.05
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    n = sdf_gradient(0.3 * d, f).data
    cos = np.sum(n * d, axis=1) / np.linalg.norm(n, axis=1)
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 2.0


def test_linear_field_has_constant_gradient(rng):
    f = SDFField(SMALL, BOUNDS, seed=0)
    f.set_sdf_function(lambda p: p[:, 0])
    p = rng.uniform(-0.9, 0.9, (30, 3))
    s, n = f.sdf_and_gradient(p)
    np.testing.assert_allclose(s.data, p[:, 0], atol=1e-12)
    np.testing.assert_allclose(n.data, np.tile([1.0, 0, 0], (30, 1)), atol=1e-12)


def test_purity_and_color_range(rng):
    f = SDFField(SMALL, BOUNDS, seed=3)
    p = rng.uniform(-1, 1, (10, 3))
    assert sdf_eval(p, f).data.tobytes() == sdf_eval(p, f).data.tobytes()
    c = color_eval(p, f).data
    assert np.all((c > 0) & (c < 1))
    f.color_decoder.W2.value[...] = 0
    f.color_decoder.Ws.value[...] = 0
    f.color_decoder.b2.value[...] = 0
    np.testing.assert_array_equal(color_eval(p, f).data, 0.5)


def _perturbed_field(seed=0):
    f = SDFField(SMALL, BOUNDS, seed=seed)
    r = np.random.default_rng(seed + 1)
    for p in f.parameters:
        p.value += r.normal(0, 0.1, p.shape)
    return f


def _off_face_points(rng, n):
    # faces of the 3- and 5-level lattices sit at multiples of 0.5 in world units
    p = rng.uniform(-0.9, 0.9, (n, 3))
    return np.where(np.abs(p * 2 - np.round(p * 2)) < 0.02, p + 0.05, p)


def test_gradient_matches_finite_differences(rng):
    f = _perturbed_field()
    p = _off_face_points(rng, 10)
    n = sdf_gradient(p, f).data
    h = 1e-6
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fd = (sdf_eval(p + e, f).data - sdf_eval(p - e, f).data) / (2 * h)
        np.testing.assert_allclose(n[:, a], fd, rtol=1e-3, atol=1e-6)


def test_sdf_and_color_grad_check_wrt_points_and_parameters(rng):
    f = _perturbed_field(2)
    p = _off_face_points(rng, 6)
    w = rng.normal(size=(6,))
    assert grad_check(lambda t: dc.sum(f.sdf(t) * w), p, step=1e-7) < 1e-4
    wc = rng.normal(size=(6, 3))
    assert grad_check(lambda t: dc.sum(f.color(t) * wc), p, step=1e-7) < 1e-4
    for param in f.parameters:
        idx = [tuple(rng.integers(0, s) for s in param.shape) for _ in range(3)]
        if param.name.startswith("color"):
            loss = lambda: dc.sum(f.color(p) * wc)
        else:
            loss = lambda: dc.sum(f.sdf(p) * w)
        if param.name == "log_inv_std":
            continue
        assert grad_check_parameter(loss, param, 1e-6, idx) < 1e-4, param.name


def test_eikonal_style_loss_parameter_gradients(rng):
    """Parameters receive exact gradients of a loss on ||n(p)||."""
    f = _perturbed_field(4)
    p = _off_face_points(rng, 6)

    def loss():
        _, n = f.sdf_and_gradient(p)
        return dc.mean(dc.square(dc.l2_norm(n) - 1.0))
    for param in f.sdf_grids + f.sdf_decoder.parameters:
        idx = [tuple(rng.integers(0, s) for s in param.shape) for _ in range(3)]
        assert grad_check_parameter(loss, param, 1e-6, idx) < 1e-4, param.name


def test_non_finite_output_is_reported():
    f = SDFField(SMALL, BOUNDS)
    f.sdf_decoder.b2.value[...] = np.nan
    with pytest.raises(FloatingPointError, match="SDF"):
        sdf_eval(np.zeros((2, 3)), f)


def test_inv_std_initialized_from_std():
    f = SDFField(SMALL, BOUNDS)
    assert f.inv_std().item() == pytest.approx(1 / 0.3, rel=1e-12)


@given(st.integers(0, 1000))
def test_interp_is_linear_in_grid(seed):
    r = np.random.default_rng(seed)
    g1, g2 = r.normal(size=(2, 3, 3, 3, 1))
    u = r.uniform(0, 1, (5, 3))
    a = interp(u, g1 + 2 * g2).data
    np.testing.assert_allclose(a, interp(u, g1).data + 2 * interp(u, g2).data, atol=1e-12)
