import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipdrecon.ssm import SsmParams, discretize, hippo_init, init_ssm, plane_scan
from ipdrecon.tensor import DimensionError, NumericError, Tensor, grad_check


def _params(rng, c=2, m=4, c_out=3, d=0.1, u=None):
    return SsmParams.from_values(hippo_init(m) if u is None else u, rng.normal(size=(c, m)),
                                 d, rng.normal(size=(m, c_out)))


class TestHippo:
    def test_m1(self):
        np.testing.assert_array_equal(hippo_init(1), [[-1.0]])

    def test_m2(self):
        np.testing.assert_allclose(hippo_init(2), [[-1.0, 0.0], [-np.sqrt(3.0), -2.0]])

    def test_zero_size(self):
        with pytest.raises(ValueError):
            hippo_init(0)

    def test_formula(self):
        a = hippo_init(6)
        for n in range(6):
            for k in range(6):
                want = -np.sqrt(2 * n + 1) * np.sqrt(2 * k + 1) if n > k else (-(n + 1.0) if n == k else 0.0)
                assert a[n, k] == pytest.approx(want, abs=1e-15)

    def test_m8_eigenvalues_negative(self):
        # lower triangular: the eigenvalues are the diagonal, cross-checked by QR iteration
        ev = np.linalg.eigvals(hippo_init(8))
        assert np.all(ev.real < 0)
        np.testing.assert_allclose(np.sort(ev.real), -np.arange(8, 0, -1.0), atol=1e-8)


class TestDiscretize:
    def test_diagonal_case(self):
        p = SsmParams.from_values(-np.eye(2), np.ones((1, 2)), np.log(2.0), np.ones((2, 1)))
        dz = discretize(p)
        np.testing.assert_allclose(dz.q_hat.data[0], 0.5 * np.eye(2), atol=1e-14)
        np.testing.assert_allclose(dz.w_hat.data[0], [0.5, 0.5], atol=1e-14)

    def test_zero_u(self):
        w = np.array([[1.0, -2.0, 0.5]])
        dz = discretize(SsmParams.from_values(np.zeros((3, 3)), w, 0.3, np.ones((3, 1))))
        np.testing.assert_allclose(dz.q_hat.data[0], np.eye(3), atol=1e-15)
        np.testing.assert_allclose(dz.w_hat.data[0], 0.3 * w[0], atol=1e-15)

    def test_explicit_inverse_oracle(self):
        rng = np.random.default_rng(0)
        u = hippo_init(4)
        w = rng.normal(size=(1, 4))
        dz = discretize(SsmParams.from_values(u, w, 0.1, np.ones((4, 1))))
        mpmath.mp.dps = 40
        um = mpmath.matrix(u.tolist())
        e = mpmath.expm(um * mpmath.mpf("0.1"))
        want = (e - mpmath.eye(4)) * mpmath.inverse(um) * mpmath.matrix(w[0].tolist())
        want = np.array(want.tolist(), dtype=np.float64)[:, 0]
        assert np.abs(dz.w_hat.data[0] - want).max() < 1e-10
        e_np = np.array(e.tolist(), dtype=np.float64)
        assert np.abs(dz.q_hat.data[0] - e_np).max() < 1e-10

    def test_small_step_limit(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(2, 5))
        dz = discretize(SsmParams.from_values(hippo_init(5), w, 1e-8, np.ones((5, 1))))
        assert np.abs(dz.q_hat.data - np.eye(5)).max() < 1e-6
        assert np.abs(dz.w_hat.data - 1e-8 * w).max() < 1e-6 * 1e-8 + 1e-14

    def test_non_finite(self):
        p = init_ssm(np.random.default_rng(0), 2, 2, 4)
        p.u.data = p.u.data.copy()
        p.u.data[0, 0] = np.nan
        with pytest.raises(NumericError):
            discretize(p)

    def test_step_positive(self):
        p = SsmParams.from_values(hippo_init(3), np.ones((4, 3)), [1e-3, 0.1, 1.0, 30.0], np.ones((3, 1)))
        d = p.step().data
        assert np.all(d > 0)
        np.testing.assert_allclose(d, [1e-3, 0.1, 1.0, 30.0], rtol=1e-12)

    def test_initial_spectral_radius(self):
        dz = discretize(init_ssm(np.random.default_rng(0), 3, 3, 16))
        for q in dz.q_hat.data:
            assert np.abs(np.linalg.eigvals(q)).max() <= 1.0

    @settings(max_examples=25, deadline=None)
    @given(st.floats(1e-3, 1.0), st.integers(0, 2**31 - 1))
    def test_contraction(self, d, seed):
        p = SsmParams.from_values(hippo_init(8), np.ones((1, 8)), d, np.ones((8, 1)))
        q = discretize(p).q_hat.data[0]
        h = np.random.default_rng(seed).normal(size=(8, 16))
        assert np.all(np.linalg.norm(q @ h, axis=0) <= np.linalg.norm(h, axis=0) * (1 + 1e-12))


def _raster_scan(q, wh, x, reverse):
    # direct per-channel loop over pixels in raster order
    c, t_len = x.shape
    m = q.shape[1]
    out = np.zeros((t_len, m))
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for ch in range(c):
        h = np.zeros(m)
        for t in order:
            h = q[ch] @ h + wh[ch] * x[ch, t]
            out[t] += h
    return out


class TestPlaneScan:
    def test_single_pixel(self):
        rng = np.random.default_rng(2)
        p = _params(rng)
        x = rng.normal(size=(2, 1, 1))
        dz = discretize(p)
        want = p.readout.data.T @ (dz.w_hat.data * x[:, 0, 0, None]).sum(0)
        np.testing.assert_allclose(plane_scan(p, x).data[:, 0, 0], want, atol=1e-14)

    def test_zero_input_projection(self):
        rng = np.random.default_rng(3)
        p = SsmParams.from_values(hippo_init(4), np.zeros((2, 4)), 0.2, rng.normal(size=(4, 3)))
        np.testing.assert_array_equal(plane_scan(p, rng.normal(size=(2, 5, 6))).data, 0.0)

    def test_bidirectional_is_mean_of_directions(self):
        rng = np.random.default_rng(4)
        p = _params(rng)
        x = rng.normal(size=(2, 8, 8))
        fwd = plane_scan(p, x, "forward").data
        rev = plane_scan(p, x, "reverse").data
        np.testing.assert_allclose(plane_scan(p, x).data, 0.5 * (fwd + rev), atol=1e-13)

    def test_direction_oracle(self):
        rng = np.random.default_rng(5)
        p = _params(rng)
        x = rng.normal(size=(2, 4, 5))
        dz = discretize(p)
        flat = x.reshape(2, -1)
        for name, rev in (("forward", False), ("reverse", True)):
            states = _raster_scan(dz.q_hat.data, dz.w_hat.data, flat, rev)
            want = (states @ p.readout.data).T.reshape(3, 4, 5)
            np.testing.assert_allclose(plane_scan(p, x, name).data, want, atol=1e-12)

    def test_batched_equals_single(self):
        rng = np.random.default_rng(6)
        p = _params(rng)
        x = rng.normal(size=(3, 2, 4, 4))
        batch = plane_scan(p, x).data
        for i in range(3):
            np.testing.assert_allclose(batch[i], plane_scan(p, x[i]).data, atol=1e-14)

    def test_width_mismatch(self):
        p = _params(np.random.default_rng(0))
        with pytest.raises(DimensionError):
            plane_scan(p, np.zeros((3, 2, 2)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_input(self, seed, a, b):
        rng = np.random.default_rng(seed)
        p = _params(rng)
        x, y = rng.normal(size=(2, 2, 3, 4))
        lhs = plane_scan(p, a * x + b * y).data
        rhs = a * plane_scan(p, x).data + b * plane_scan(p, y).data
        assert np.abs(lhs - rhs).max() < 1e-10

    @pytest.mark.parametrize("name", ["u", "w", "d_raw", "readout"])
    def test_gradients(self, name):
        rng = np.random.default_rng(7)
        base = _params(rng, m=3)
        x = rng.normal(size=(2, 3, 3))
        c = rng.normal(size=(3, 3, 3))

        def f(t):
            fields = {k: getattr(base, k) for k in ("u", "w", "d_raw", "readout")}
            fields[name] = t
            return (plane_scan(SsmParams(**fields), x) * c).sum()
        assert grad_check(f, getattr(base, name).data) < 1e-4
