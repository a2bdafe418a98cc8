import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipdrecon.acm import (AcmParams, acm_forward, affine_invariance_probe, init_acm, make_grid,
                          translation, warp)
from ipdrecon.pce import PceOutput, confidence_mask, init_pce, pce_forward
from ipdrecon.tensor import DimensionError, Tensor, grad_check


def _zero_bias(p):
    for lin in (p.mlp_e.fc1, p.mlp_e.fc2, p.conf_head):
        lin.bias.data = np.zeros_like(lin.bias.data)
    return p


class TestPce:
    def test_zero_input_zero_encoding(self):
        p = _zero_bias(init_pce(np.random.default_rng(0), 4, 8))
        out = pce_forward(p, np.zeros((4, 5, 6)))
        np.testing.assert_array_equal(out.encoded.data, 0.0)

    def test_shapes_and_confidence_range(self):
        p = init_pce(np.random.default_rng(1), 4, 8)
        out = pce_forward(p, np.random.default_rng(2).normal(size=(4, 5, 6)) * 10)
        assert out.encoded.shape == (4, 5, 6)
        assert out.confidence.shape == (1, 5, 6)
        assert np.all((out.confidence.data > 0) & (out.confidence.data < 1))

    def test_single_pixel_has_no_mixing(self):
        from ipdrecon.ssm import plane_scan
        from ipdrecon.tensor import gelu, sigmoid

        p = init_pce(np.random.default_rng(3), 3, 4)
        x = np.random.default_rng(4).normal(size=(3, 1, 1))
        lvec = plane_scan(p.ssm, x).data[:, 0, 0]
        conf = sigmoid(lvec @ p.conf_head.weight.data + p.conf_head.bias.data).data
        hid = gelu(conf * lvec @ p.mlp_e.fc1.weight.data + p.mlp_e.fc1.bias.data).data
        want = hid @ p.mlp_e.fc2.weight.data + p.mlp_e.fc2.bias.data
        np.testing.assert_allclose(pce_forward(p, x).encoded.data[:, 0, 0], want, atol=1e-13)

    def test_global_receptive_field(self):
        p = init_pce(np.random.default_rng(5), 3, 4)
        x = np.random.default_rng(6).normal(size=(3, 6, 7))
        y = x.copy()
        y[:, 0, 0] += 1.0
        diff = np.abs(pce_forward(p, x).encoded.data - pce_forward(p, y).encoded.data).max(axis=0)
        assert np.all(diff > 0)

    def test_deterministic(self):
        p = init_pce(np.random.default_rng(7), 3, 4)
        x = np.random.default_rng(8).normal(size=(3, 4, 4))
        assert pce_forward(p, x).encoded.data.tobytes() == pce_forward(p, x).encoded.data.tobytes()

    def test_gating_bias_to_minus_infinity(self):
        p = init_pce(np.random.default_rng(9), 3, 4)
        p.conf_head.bias.data = np.array([-20.0])
        x = np.random.default_rng(10).normal(size=(3, 4, 4))
        enc = pce_forward(p, x).encoded.data
        pure = p.mlp_e(Tensor(np.zeros((1, 3)))).data[0]
        assert np.abs(enc - pure[:, None, None]).max() < 1e-6

    def test_width_mismatch(self):
        p = init_pce(np.random.default_rng(0), 3, 4)
        with pytest.raises(DimensionError):
            pce_forward(p, np.zeros((5, 2, 2)))

    @pytest.mark.parametrize("group", ["ssm.u", "ssm.w", "ssm.d_raw", "ssm.readout", "mlp_e.fc1.weight",
                                       "mlp_e.fc2.bias", "conf_head.weight", "conf_head.bias"])
    def test_gradients(self, group):
        from ipdrecon.layers import named_parameters

        p = init_pce(np.random.default_rng(11), 2, 3)
        x = np.random.default_rng(12).normal(size=(2, 3, 3))
        c = np.random.default_rng(13).normal(size=(2, 3, 3))
        theta = named_parameters(p)[group].data
        assert grad_check(lambda t: (pce_forward(_swap(p, group, t), x).encoded * c).sum(), theta) < 1e-4


def _swap(params, dotted, t):
    # shallow-rebuild the dataclass path so the tensor under test is ``t``
    import dataclasses

    head, _, rest = dotted.partition(".")
    child = getattr(params, head)
    new = t if not rest else _swap(child, rest, t)
    return dataclasses.replace(params, **{head: new})


class TestConfidenceMask:
    def _out(self, conf):
        conf = np.asarray(conf, dtype=np.float64)
        return PceOutput(Tensor(np.zeros((1,) + conf.shape)), Tensor(conf[None]))

    def test_tiny_threshold_keeps_all(self):
        conf = np.random.default_rng(0).uniform(1e-6, 1, (4, 5))
        assert confidence_mask(self._out(conf), 1e-9).all()

    def test_uniform_half_above_threshold_empty(self):
        assert not confidence_mask(self._out(np.full((3, 3), 0.5)), 0.6).any()

    def test_median_threshold(self):
        conf = np.random.default_rng(1).uniform(0.01, 0.99, (5, 7))
        tau = float(np.median(conf))
        assert confidence_mask(self._out(conf), tau).sum() == int(np.ceil(conf.size / 2))

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
    def test_threshold_range(self, tau):
        with pytest.raises(ValueError):
            confidence_mask(self._out(np.full((2, 2), 0.5)), tau)


class TestGrid:
    def test_corners(self):
        g = make_grid(2, 2)
        assert g[0, 0].tolist() == [-1, -1] and g[0, 1].tolist() == [1, -1]
        assert g[1, 0].tolist() == [-1, 1] and g[1, 1].tolist() == [1, 1]

    def test_single(self):
        assert make_grid(1, 1).tolist() == [[[0.0, 0.0]]]

    def test_middle_row(self):
        assert np.all(make_grid(3, 4)[1, :, 1] == 0.0)

    def test_zero_extent(self):
        with pytest.raises(ValueError):
            make_grid(0, 3)


class TestAcm:
    def test_identity_pass_through(self):
        r = np.random.default_rng(0).normal(size=(3, 5, 6))
        cr = acm_forward(init_acm(3), r).data
        np.testing.assert_array_equal(cr[:3], r)
        np.testing.assert_array_equal(cr[3:], r)

    def test_channel_annihilation(self):
        p = init_acm(3)
        p.b_c.data = np.array([1.0, 0.0, 1.0])
        cr = acm_forward(p, np.random.default_rng(1).normal(size=(3, 4, 4))).data
        assert np.all(cr[4] == 0.0)

    def test_one_pixel_translation(self):
        r = np.random.default_rng(2).normal(size=(2, 4, 6))
        p = AcmParams(Tensor(translation(1, 0, 4, 6)), Tensor(np.ones(2)))
        ap = acm_forward(p, r).data[2:]
        want = np.zeros_like(r)
        want[:, :, :-1] = r[:, :, 1:]
        np.testing.assert_allclose(ap, want, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-2, 2))
    def test_linear_in_input(self, seed, a):
        rng = np.random.default_rng(seed)
        p = AcmParams(Tensor(np.eye(2, 3) + rng.normal(0, 0.1, (2, 3))), Tensor(rng.uniform(0, 2, 2)))
        x, y = rng.normal(size=(2, 2, 4, 5))
        lhs = acm_forward(p, a * x + y).data
        rhs = a * acm_forward(p, x).data + acm_forward(p, y).data
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_gradients(self):
        rng = np.random.default_rng(3)
        r = rng.normal(size=(2, 4, 5))
        c = rng.normal(size=(4, 4, 5))
        a0 = np.eye(2, 3) + rng.normal(0, 0.05, (2, 3))
        b0 = rng.uniform(0.5, 1.5, 2)
        assert grad_check(lambda t: (acm_forward(AcmParams(t, Tensor(b0)), r) * c).sum(), a0) < 1e-4
        assert grad_check(lambda t: (acm_forward(AcmParams(Tensor(a0), t), r) * c).sum(), b0) < 1e-4

    def test_batched_warp(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 2, 4, 4))
        a = np.eye(2, 3) + rng.normal(0, 0.1, (2, 3))
        batch = warp(x, a).data
        for i in range(3):
            np.testing.assert_allclose(batch[i], warp(x[i], a).data, atol=1e-14)


class TestInvarianceProbe:
    r = np.random.default_rng(5).normal(size=(3, 7, 7))

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_rotation(self, k):
        rep = affine_invariance_probe(self.r, "rotation", k=k)
        assert rep["passed"] and rep["permutation"]

    def test_reflection(self):
        assert affine_invariance_probe(self.r, "reflection")["passed"]

    def test_whole_pixel_translation(self):
        rep = affine_invariance_probe(self.r, "translation", dx=2, dy=-1)
        assert rep["passed"] and rep["pairwise_distance_change"] == 0.0

    def test_subpixel_translation(self):
        assert affine_invariance_probe(self.r, "translation", dx=0.3, dy=0.6)["max_abs_error"] < 1e-12

    def test_shear(self):
        assert affine_invariance_probe(self.r, "shear", k=0.4)["passed"]

    def test_unsupported(self):
        with pytest.raises(ValueError):
            affine_invariance_probe(self.r, "scaling")
