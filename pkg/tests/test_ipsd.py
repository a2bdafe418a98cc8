import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipdrecon.geometry import CameraModel, GridSpec, back_project, look_at
from ipdrecon.ipsd import build_cost_volume, init_ipsd, state_project
from ipdrecon.ssm import plane_scan
from ipdrecon.tensor import DimensionError, Tensor, grad_check
from oracles import back_project_loop


def _cam(rng):
    eye = np.array([0.16, 0.16, -1.0]) + rng.normal(size=3) * 0.2
    return CameraModel.from_intrinsics(40.0, 40.0, 15.5, 11.5, 32, 24, look_at(eye, (0.16, 0.16, 0.16), up=(0, -1, 0)))


def _gelu(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _mlp_loop(m, x):
    w1, b1, w2, b2 = m.fc1.weight.data, m.fc1.bias.data, m.fc2.weight.data, m.fc2.bias.data
    hid = [_gelu(sum(x[i] * w1[i, j] for i in range(len(x))) + b1[j]) for j in range(w1.shape[1])]
    out = [sum(hid[j] * w2[j, k] for j in range(len(hid))) + b2[k] for k in range(w2.shape[1])]
    if m.skip is not None:
        out = [out[k] + sum(x[i] * m.skip.weight.data[i, k] for i in range(len(x))) for k in range(len(out))]
    return np.array(out)


def _cost_volume_loop(params, state, feat, cam, grid):
    # sampling the state is the same bilinear lift as back-projection
    spatial, valid = back_project_loop(grid, state, cam)
    fbp, _ = back_project_loop(grid, feat, cam)
    out = np.zeros((len(valid), params.mlp_d.fc2.weight.shape[1]))
    for n in np.flatnonzero(valid):
        out[n] = _mlp_loop(params.mlp_d, np.concatenate([spatial[n], fbp[n]]))
    return out, valid


class TestStateProject:
    def test_matches_composition(self):
        rng = np.random.default_rng(0)
        p = init_ipsd(rng, 3, 4, state_size=4)
        cr = rng.normal(size=(6, 5, 7))
        x = np.einsum("chw,cs->shw", cr, p.proj.data)
        bias = cr.mean(axis=(1, 2)) @ p.bias_net.weight.data + p.bias_net.bias.data
        want = plane_scan(p.ssm_a, x).data + bias[:, None, None]
        np.testing.assert_allclose(state_project(p, cr).data, want, atol=1e-12)

    def test_zero_projection_gives_bias(self):
        rng = np.random.default_rng(1)
        p = init_ipsd(rng, 3, 4, state_size=4)
        p.proj.data = np.zeros_like(p.proj.data)
        cr = rng.normal(size=(6, 4, 4))
        bias = cr.mean(axis=(1, 2)) @ p.bias_net.weight.data + p.bias_net.bias.data
        out = state_project(p, cr).data
        np.testing.assert_allclose(out, np.broadcast_to(bias[:, None, None], out.shape), atol=1e-14)

    def test_batched(self):
        rng = np.random.default_rng(2)
        p = init_ipsd(rng, 2, 3, state_size=4)
        cr = rng.normal(size=(3, 4, 4, 5))
        batch = state_project(p, cr).data
        for i in range(3):
            np.testing.assert_allclose(batch[i], state_project(p, cr[i]).data, atol=1e-13)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-2, 2))
    def test_affine_in_input(self, seed, a):
        # scan and pooling are linear, so only the bias offset breaks additivity
        rng = np.random.default_rng(seed)
        p = init_ipsd(rng, 2, 3, state_size=4)
        x, y = rng.normal(size=(2, 4, 3, 4))
        zero = state_project(p, np.zeros_like(x)).data
        lhs = state_project(p, a * x + y).data - zero
        rhs = a * (state_project(p, x).data - zero) + (state_project(p, y).data - zero)
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_channel_mismatch(self):
        p = init_ipsd(np.random.default_rng(0), 2, 3)
        with pytest.raises(DimensionError):
            state_project(p, np.zeros((3, 2, 2)))

    @pytest.mark.parametrize("name", ["proj", "bias_net.weight", "ssm_a.u", "ssm_a.w", "ssm_a.d_raw"])
    def test_gradients(self, name):
        from test_pce_acm import _swap
        from ipdrecon.layers import named_parameters

        rng = np.random.default_rng(3)
        p = init_ipsd(rng, 2, 2, state_size=3)
        cr = rng.normal(size=(4, 3, 3))
        c = rng.normal(size=(2, 3, 3))
        theta = named_parameters(p)[name].data
        assert grad_check(lambda t: (state_project(_swap(p, name, t), cr) * c).sum(), theta) < 1e-4


class TestCostVolume:
    grid = GridSpec(np.zeros(3), 0.04, (8, 8, 8))

    @pytest.mark.parametrize("seed", range(3))
    def test_scalar_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p = init_ipsd(rng, 3, 2, state_size=4)
        cam = _cam(rng)
        state = rng.normal(size=(2, 24, 32))
        feat = rng.normal(size=(3, 24, 32))
        got = build_cost_volume(p, state, back_project(self.grid, feat, cam), cam, self.grid)
        want, valid = _cost_volume_loop(p, state, feat, cam, self.grid)
        np.testing.assert_array_equal(got.valid, valid)
        assert valid.any()
        assert np.abs(got.features.data - want).max() < 1e-12

    def test_zero_state_is_fixed_transform(self):
        # with no decoder state the volume depends on F_BP alone, through MLP_D
        rng = np.random.default_rng(4)
        p = init_ipsd(rng, 3, 2, state_size=4)
        cam = _cam(rng)
        fbp = back_project(self.grid, rng.normal(size=(3, 24, 32)), cam)
        cv = build_cost_volume(p, np.zeros((2, 24, 32)), fbp, cam, self.grid)
        x = np.concatenate([np.zeros((len(cv.valid), 2)), fbp[0].data], axis=1)
        want = p.mlp_d(Tensor(x)).data * cv.valid[:, None]
        np.testing.assert_allclose(cv.features.data, want, atol=1e-14)

    def test_invalid_rows_zero(self):
        rng = np.random.default_rng(5)
        p = init_ipsd(rng, 3, 2)
        cam = _cam(rng)
        mask = np.zeros((24, 32), dtype=bool)
        fbp = back_project(self.grid, rng.normal(size=(3, 24, 32)), cam, mask)
        cv = build_cost_volume(p, rng.normal(size=(2, 24, 32)), fbp, cam, self.grid)
        assert not cv.valid.any() and np.all(cv.features.data == 0) and np.all(cv.depth == 0)

    def test_sparse_subset(self):
        rng = np.random.default_rng(6)
        p = init_ipsd(rng, 3, 2)
        cam = _cam(rng)
        state, feat = rng.normal(size=(2, 24, 32)), rng.normal(size=(3, 24, 32))
        full = build_cost_volume(p, state, back_project(self.grid, feat, cam), cam, self.grid)
        coords = self.grid.all_coords()[::5]
        sub = build_cost_volume(p, state, back_project(self.grid, feat, cam, coords=coords), cam, self.grid, coords)
        idx = self.grid.flat_index(coords)
        np.testing.assert_allclose(sub.features.data, full.features.data[idx], atol=1e-14)

    def test_mismatched_selection(self):
        rng = np.random.default_rng(7)
        p = init_ipsd(rng, 3, 2)
        cam = _cam(rng)
        fbp = back_project(self.grid, rng.normal(size=(3, 24, 32)), cam)
        with pytest.raises(ValueError):
            build_cost_volume(p, np.zeros((2, 24, 32)), fbp, cam, self.grid, self.grid.all_coords()[:10])

    def test_state_width(self):
        rng = np.random.default_rng(8)
        p = init_ipsd(rng, 3, 2)
        cam = _cam(rng)
        fbp = back_project(self.grid, rng.normal(size=(3, 24, 32)), cam)
        with pytest.raises(DimensionError):
            build_cost_volume(p, np.zeros((5, 24, 32)), fbp, cam, self.grid)

    def test_gradients(self):
        rng = np.random.default_rng(9)
        p = init_ipsd(rng, 2, 2, state_size=3)
        grid = GridSpec(np.zeros(3), 0.08, (4, 4, 4))
        cam = _cam(rng)
        feat = rng.normal(size=(2, 24, 32))
        c = rng.normal(size=(64, 2))
        state0 = rng.normal(size=(2, 24, 32))
        assert grad_check(lambda s: (build_cost_volume(p, s, back_project(grid, feat, cam), cam, grid).features
                                     * c).sum(), state0) < 1e-4
        assert grad_check(lambda f: (build_cost_volume(p, state0, back_project(grid, f, cam), cam, grid).features
                                     * c).sum(), feat) < 1e-4
