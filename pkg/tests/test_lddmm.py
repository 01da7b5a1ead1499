import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from morphkit import lddmm as L
from morphkit.errors import DimensionMismatch, InvalidParameter, NumericalError
from morphkit.volume import Volume3D

P = L.LddmmParams(alpha=0.5, gamma=1.0, exponent=2.0, sigma=1.0, timesteps=5)


def random_field(seed, shape=(3, 8, 8, 8)):
    return np.random.default_rng(seed).standard_normal(shape)


class TestOperator:
    def test_zero_field(self):
        assert np.all(L.apply_K(np.zeros((3, 8, 8, 8)), P) == 0)

    def test_constant_field_is_eigenvector(self):
        p = L.LddmmParams(alpha=0.3, gamma=2.0, exponent=2.5)
        f = np.full((3, 6, 6, 6), 1.7)
        assert np.allclose(L.apply_K(f, p), 1.7 * 2.0 ** (-5.0), rtol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_round_trip(self, seed):
        f = random_field(seed)
        back = L.apply_LdagL(L.apply_K(f, P, (0.5, 1.0, 2.0)), P, (0.5, 1.0, 2.0))
        assert np.linalg.norm(back - f) <= 1e-10 * np.linalg.norm(f)

    def test_self_adjoint(self):
        a, b = random_field(1), random_field(2)
        assert np.isclose(np.sum(L.apply_K(a, P) * b), np.sum(a * L.apply_K(b, P)), rtol=1e-10)

    def test_non_finite_rejected(self):
        f = random_field(0)
        f[0, 1, 1, 1] = np.nan
        with pytest.raises(NumericalError):
            L.apply_K(f, P)

    def test_params_validated(self):
        with pytest.raises(InvalidParameter):
            L.LddmmParams(exponent=1.5)
        with pytest.raises(InvalidParameter):
            L.LddmmParams(timesteps=1)


def stencil_L(f, p, spacing):
    """(-alpha Lap + gamma)^a by repeated periodic 7-point stencils (integer a)."""
    out = f.copy()
    for _ in range(int(p.exponent)):
        lap = np.zeros_like(out)
        for axis, h in enumerate(spacing):
            ax = axis + 1
            lap += (np.roll(out, 1, ax) - 2 * out + np.roll(out, -1, ax)) / h**2
        out = -p.alpha * lap + p.gamma * out
    return out


class TestMetricDistance:
    def test_zero(self):
        assert L.metric_distance(np.zeros((5, 3, 4, 4, 4)), P) == 0

    def test_homogeneous(self):
        v = np.random.default_rng(3).standard_normal((5, 3, 6, 6, 6))
        assert np.isclose(L.metric_distance(2.5 * v, P), 2.5 * L.metric_distance(v, P), rtol=1e-12)

    @pytest.mark.parametrize("spacing", [(1.0, 1.0, 1.0), (0.5, 0.75, 1.25)])
    def test_spatial_stencil_oracle(self, spacing):
        f = random_field(4)
        oracle = np.sqrt(np.sum(stencil_L(f, P, spacing) ** 2) * np.prod(spacing))
        assert np.isclose(L.v_norm(f, P, spacing), oracle, rtol=1e-6)

    def test_trapezoid_weights(self):
        f = random_field(5)
        v = np.stack([f * k for k in range(5)])
        # norms 0, n, 2n, 3n, 4n; trapezoid over [0, 1] integrates to 2n
        assert np.isclose(L.metric_distance(v, P), 2 * L.v_norm(f, P), rtol=1e-12)

    def test_wrong_timesteps(self):
        with pytest.raises(DimensionMismatch):
            L.metric_distance(np.zeros((3, 3, 4, 4, 4)), P)


def smooth_velocity(seed, scale, T=5, n=8):
    return scale * L.apply_K(np.random.default_rng(seed).standard_normal((T, 3, n, n, n)), P)


def rk4_trace(v, points, p, substeps=40):
    """Trace particles through the trilinear, piecewise-linear-in-time field."""
    T = v.shape[0]
    dt = 1.0 / (T - 1)

    def vel(t, x):
        k = min(int(t / dt), T - 2)
        s = t / dt - k
        a = np.stack([ndimage.map_coordinates(c, x, order=1, mode="nearest") for c in v[k]])
        b = np.stack([ndimage.map_coordinates(c, x, order=1, mode="nearest") for c in v[k + 1]])
        return (1 - s) * a + s * b

    x = points.copy()
    h = 1.0 / ((T - 1) * substeps)
    t = 0.0
    for _ in range((T - 1) * substeps):
        k1 = vel(t, x)
        k2 = vel(t + h / 2, x + h / 2 * k1)
        k3 = vel(t + h / 2, x + h / 2 * k2)
        k4 = vel(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return x


class TestFlow:
    def test_zero_velocity_identity(self):
        flow = L.integrate_flow(np.zeros((5, 3, 6, 6, 6)), P)
        ident = L.identity_grid((6, 6, 6), (1, 1, 1))
        assert all(np.array_equal(m, ident) for m in flow.to_source)
        assert all(np.array_equal(m, ident) for m in flow.to_target)

    def test_constant_translation(self):
        u = np.array([0.4, -0.2, 0.1])
        v = np.broadcast_to(u[None, :, None, None, None], (5, 3, 8, 8, 8)).copy()
        flow = L.integrate_flow(v, P)
        ident = L.identity_grid((8, 8, 8), (1, 1, 1))
        assert np.allclose(flow.inverse, ident - u[:, None, None, None], atol=1e-12)
        assert np.allclose(flow.forward, ident + u[:, None, None, None], atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_forward_backward_composition(self, seed):
        v = smooth_velocity(seed, 0.5)
        flow = L.integrate_flow(v, P)
        ident = L.identity_grid((8, 8, 8), (1, 1, 1))
        tol = 10 * P.dt * np.abs(v).max()
        err = np.abs(L.compose(flow.forward, flow.inverse, (1, 1, 1)) - ident)[:, 1:-1, 1:-1, 1:-1]
        assert err.max() <= tol

    @pytest.mark.parametrize("seed", range(3))
    def test_forward_map_matches_particle_tracing(self, seed):
        v = smooth_velocity(seed, 0.5)
        flow = L.integrate_flow(v, P)
        ident = L.identity_grid((8, 8, 8), (1, 1, 1))
        traced = rk4_trace(v, ident, P)
        tol = 10 * P.dt * np.abs(v).max()
        assert np.abs(flow.forward - traced)[:, 2:-2, 2:-2, 2:-2].max() <= tol

    def test_jacobian_positive(self):
        flow = L.integrate_flow(smooth_velocity(7, 0.5), P)
        for m in list(flow.to_source) + list(flow.to_target):
            assert L.jacobian_determinant(m, (1, 1, 1))[1:-1, 1:-1, 1:-1].min() > 0

    def test_non_finite(self):
        v = np.zeros((5, 3, 4, 4, 4))
        v[2, 0, 1, 1, 1] = np.inf
        with pytest.raises(NumericalError):
            L.integrate_flow(v, P)


def gradient_instance(seed, T=5):
    rng = np.random.default_rng(seed)
    I0 = Volume3D(ndimage.gaussian_filter(rng.random((8, 8, 8)), 2.5))
    I1 = Volume3D(ndimage.gaussian_filter(rng.random((8, 8, 8)), 2.5))
    v = 0.1 * L.apply_K(rng.standard_normal((T, 3, 8, 8, 8)), P)
    h = L.apply_K(rng.standard_normal((T, 3, 8, 8, 8)), P)
    return I0, I1, v, h


def directional_check(I0, I1, v, h, p=P, eps=1e-4):
    flow = L.integrate_flow(v, p)
    g = L.gradient(v, I0, I1, flow, p)
    w = p.time_weights()
    analytic = sum(w[k] * L.v_inner(g[k], h[k], p) for k in range(p.timesteps))
    fd = (L.energy(v + eps * h, I0, I1, p) - L.energy(v - eps * h, I0, I1, p)) / (2 * eps)
    return analytic, fd


class TestGradient:
    def test_identical_images_zero_velocity(self):
        I0, _, v, _ = gradient_instance(0)
        g = L.gradient(np.zeros_like(v), I0, I0, L.integrate_flow(np.zeros_like(v), P), P)
        assert np.abs(g).max() == 0

    def test_constant_images(self):
        I = Volume3D(np.full((8, 8, 8), 3.0))
        _, _, v, _ = gradient_instance(1)
        g = L.gradient(v, I, I, L.integrate_flow(v, P), P)
        assert np.allclose(g, 2 * v, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        analytic, fd = directional_check(*gradient_instance(seed))
        assert abs(analytic - fd) <= 1e-3 * abs(fd)

    def test_at_zero_velocity(self):
        I0, I1, v, h = gradient_instance(9)
        analytic, fd = directional_check(I0, I1, np.zeros_like(v), h)
        assert abs(analytic - fd) <= 1e-3 * abs(fd)

    def test_grid_mismatch(self):
        I0 = Volume3D(np.zeros((8, 8, 8)))
        I1 = Volume3D(np.zeros((8, 8, 7)))
        v = np.zeros((5, 3, 8, 8, 8))
        with pytest.raises(DimensionMismatch):
            L.gradient(v, I0, I1, L.integrate_flow(v, P), P)


class TestRegister:
    def test_self_registration(self):
        I = Volume3D(ndimage.gaussian_filter(np.random.default_rng(0).random((10, 10, 10)), 1.5))
        res = L.register(I, I, L.LddmmParams(timesteps=4, max_iters=10))
        assert res.metric_distance <= 1e-6
        assert np.abs(res.velocity).max() <= 1e-6
        assert res.converged

    def test_energy_trace_monotone_and_deterministic(self):
        rng = np.random.default_rng(2)
        I0 = Volume3D(ndimage.gaussian_filter(rng.random((10, 10, 10)), 1.5))
        I1 = Volume3D(ndimage.gaussian_filter(rng.random((10, 10, 10)), 1.5))
        p = L.LddmmParams(alpha=0.5, sigma=0.1, timesteps=4, step_size=0.05, max_iters=15)
        a = L.register(I0, I1, p)
        b = L.register(I0, I1, p)
        totals = [m + r for _, m, r in a.energy_trace]
        assert all(np.diff(totals) <= 0)
        assert totals[-1] < totals[0]
        assert a.metric_distance == b.metric_distance
        assert np.array_equal(a.velocity, b.velocity)

    def test_dims_mismatch(self):
        with pytest.raises(DimensionMismatch):
            L.register(Volume3D(np.zeros((4, 4, 4))), Volume3D(np.zeros((4, 4, 5))))

    def test_dice(self):
        a = np.zeros((4, 4, 4))
        a[:2] = 1
        b = np.zeros((4, 4, 4))
        b[1:3] = 1
        assert L.dice(a, b) == 0.5
