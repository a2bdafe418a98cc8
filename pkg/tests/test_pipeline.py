import dataclasses
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipdrecon.geometry import GridSpec, VoxelVolume
from ipdrecon.ipsd import CostVolume
from ipdrecon.layers import named_parameters
from ipdrecon.pipeline import (Adam, CheckpointError, Fusion, FusionHead, LevelOutput, PipelineConfig,
                               TrainScene, TrainingError, checkpoint_bytes, child_offsets, compute_losses,
                               dump_config, extract_features, fuse_views, init_model, load_checkpoint,
                               load_config, loss_csv, occupancy_filter, reconstruct_volume, save_checkpoint,
                               train_toy, training_forward, visibility_targets)
from ipdrecon.layers import linear
from ipdrecon.scenes import SceneSpec, build_bundle
from ipdrecon.tensor import Tensor, grad_check

TINY = SceneSpec(room=(1.6, 1.6, 1.2), n_furniture=1, n_views=4, width=16, height=16, focal=10.0,
                 voxel_size_fine=0.1, margin=0.1, trajectory="perimeter", seed=0)
CFG = PipelineConfig(width_coarse=4, width_medium=4, width_fine=4, state_size=4, views_per_step=3,
                     max_medium=60, max_fine=80, steps=3, n_views=4)


@pytest.fixture(scope="module")
def tiny():
    return build_bundle(TINY)


@pytest.fixture(scope="module")
def scene(tiny):
    return TrainScene.from_bundle(tiny)


def _set(obj, dotted, value):
    *path, last = dotted.split(".")
    for part in path:
        obj = obj[part] if isinstance(obj, dict) else obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    if isinstance(obj, dict):
        obj[last] = value
    elif isinstance(obj, list):
        obj[int(last)] = value
    else:
        setattr(obj, last, value)


class TestOccupancyFilter:
    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        coords = rng.integers(0, 5, (20, 3))
        occ = rng.random(20) > 0.5
        kids, parent = occupancy_filter(coords, occ)
        want_k, want_p = [], []
        for n in range(20):
            if occ[n]:
                for dx in (0, 1):
                    for dy in (0, 1):
                        for dz in (0, 1):
                            want_k.append(2 * coords[n] + [dx, dy, dz])
                            want_p.append(n)
        np.testing.assert_array_equal(kids, np.array(want_k).reshape(-1, 3))
        np.testing.assert_array_equal(parent, want_p)

    def test_none_occupied(self):
        kids, parent = occupancy_filter(np.zeros((3, 3), dtype=int), np.zeros(3, dtype=bool))
        assert kids.shape == (0, 3) and parent.shape == (0,)

    def test_offsets_unique(self):
        assert len({tuple(o) for o in child_offsets()}) == 8


def _volumes(rng, v, n, c, p_valid=0.7):
    return [CostVolume(Tensor(rng.normal(size=(n, c))), rng.random(n) < p_valid, rng.uniform(0.5, 3, n))
            for _ in range(v)]


def _head(rng, c):
    return FusionHead(Tensor(rng.normal(size=c)), linear(rng, c + 1, c), linear(rng, c, c))


class TestFusion:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 6))
    def test_simplex(self, seed, v):
        rng = np.random.default_rng(seed)
        vols = _volumes(rng, v, 30, 3)
        fu = fuse_views(_head(rng, 3), vols)
        w = fu.weights.data
        assert np.all(w >= 0)
        assert np.all(w[~fu.view_mask] == 0)
        np.testing.assert_allclose(w.sum(0)[fu.valid], 1.0, atol=1e-14)
        assert np.all(w.sum(0)[~fu.valid] == 0)

    def test_single_view_passes_values(self):
        rng = np.random.default_rng(1)
        vols = _volumes(rng, 1, 10, 3, p_valid=1.0)
        head = _head(rng, 3)
        fu = fuse_views(head, vols)
        np.testing.assert_allclose(fu.fused.data, head.value(vols[0].features).data, atol=1e-14)
        assert np.all(fu.spread.data == 0)

    def test_view_order_equivariant(self):
        rng = np.random.default_rng(2)
        vols = _volumes(rng, 4, 25, 3)
        head = _head(rng, 3)
        a = fuse_views(head, vols)
        b = fuse_views(head, vols[::-1])
        np.testing.assert_allclose(a.fused.data, b.fused.data, atol=1e-14)
        np.testing.assert_allclose(a.weights.data, b.weights.data[::-1], atol=1e-15)

    def test_mismatched_volumes(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            fuse_views(_head(rng, 3), _volumes(rng, 1, 5, 3) + _volumes(rng, 1, 6, 3))
        with pytest.raises(ValueError):
            fuse_views(_head(rng, 3), [])


def _fusion(scores, mask):
    s = Tensor(scores)
    return Fusion(Tensor(np.zeros((scores.shape[1], 1))), Tensor(np.zeros((scores.shape[1], 1))),
                  Tensor(np.zeros_like(scores)), s, mask, mask.any(0))


class TestLosses:
    grid = GridSpec(np.zeros(3), 0.1, (3, 3, 3))

    def _case(self, rng, n=12, v=3):
        coords = np.stack(np.unravel_index(rng.choice(27, n, replace=False), (3, 3, 3)), 1)
        mask = rng.random((v, n)) < 0.7
        tgt = np.where(mask & (rng.random((v, n)) < 0.6), 1.0, 0.0)
        tgt = tgt / np.maximum(tgt.sum(0), 1)
        gt = VoxelVolume(self.grid, rng.uniform(-1, 1, (3, 3, 3)) * rng.choice([0.5, 1.0], (3, 3, 3)))
        return coords, mask, tgt, gt

    def _oracle(self, scores, mask, tgt, logits, gt_vals):
        ces = []
        for n in range(scores.shape[1]):
            if tgt[:, n].sum() == 0:
                continue
            z = [scores[v, n] for v in range(scores.shape[0]) if mask[v, n]]
            lse = max(z) + math.log(sum(math.exp(x - max(z)) for x in z))
            ces.append(-sum(tgt[v, n] * (scores[v, n] - lse) for v in range(scores.shape[0]) if tgt[v, n]))
        bce = 0.0
        for n, g in enumerate(gt_vals):
            a, b = logits[n]
            lse = max(a, b) + math.log(math.exp(a - max(a, b)) + math.exp(b - max(a, b)))
            bce -= (b if abs(g) < 1 else a) - lse
        return sum(ces) / len(ces), bce / len(gt_vals)

    @pytest.mark.parametrize("seed", range(5))
    def test_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        coords, mask, tgt, gt = self._case(rng)
        scores = rng.normal(size=mask.shape)
        logits = rng.normal(size=(len(coords), 2))
        tsdf = np.tanh(rng.normal(size=len(coords)))
        outs = {"coarse": LevelOutput(coords, None, Tensor(logits), None, _fusion(scores, mask)),
                "fine": LevelOutput(coords, None, None, Tensor(tsdf), _fusion(scores, mask))}
        rep = compute_losses(outs, {"coarse": gt, "fine": gt}, {"coarse": tgt, "fine": tgt})
        gt_vals = gt.values[tuple(coords.T)]
        ce, bce = self._oracle(scores, mask, tgt, logits, gt_vals)
        assert rep.l_fusion["coarse"] == pytest.approx(ce, rel=1e-12)
        assert rep.l_occ["coarse"] == pytest.approx(bce, rel=1e-12)
        assert rep.l_tsdf == pytest.approx(np.mean(np.abs(tsdf - gt_vals)), rel=1e-12)
        assert rep.total == pytest.approx(rep.fusion_sum + rep.occ_sum + rep.l_tsdf, rel=1e-12)

    def test_equal_logits_give_ln2(self):
        rng = np.random.default_rng(7)
        coords, mask, tgt, gt = self._case(rng)
        out = LevelOutput(coords, None, Tensor(np.zeros((len(coords), 2))), None,
                          _fusion(np.zeros(mask.shape), mask))
        rep = compute_losses({"coarse": out}, {"coarse": gt}, {"coarse": np.zeros_like(tgt)})
        assert rep.l_occ["coarse"] == pytest.approx(math.log(2), abs=1e-15)
        assert rep.l_fusion["coarse"] == 0.0

    def test_exact_tsdf_gives_zero(self):
        rng = np.random.default_rng(8)
        coords, mask, tgt, gt = self._case(rng)
        out = LevelOutput(coords, None, None, Tensor(gt.values[tuple(coords.T)]), _fusion(np.zeros(mask.shape), mask))
        assert compute_losses({"fine": out}, {"fine": gt}, {"fine": tgt}).l_tsdf == 0.0

    def test_out_of_grid(self):
        rng = np.random.default_rng(9)
        coords, mask, tgt, gt = self._case(rng)
        coords[0] = [5, 0, 0]
        out = LevelOutput(coords, None, Tensor(np.zeros((len(coords), 2))), None, _fusion(np.zeros(mask.shape), mask))
        with pytest.raises(ValueError):
            compute_losses({"coarse": out}, {"coarse": gt}, {"coarse": tgt})

    def test_visibility_targets_oracle(self, tiny):
        grid = tiny.grids["coarse"]
        coords = grid.all_coords()
        mask = np.ones((len(tiny.cameras), len(coords)), dtype=bool)
        band = 0.3
        got = visibility_targets(grid, coords, tiny.cameras, tiny.depths, mask, band)
        for n, c in enumerate(coords[::7]):
            n *= 7
            p = grid.origin + (c + 0.5) * grid.voxel_size
            hits = []
            for cam, d in zip(tiny.cameras, tiny.depths):
                u, v, z = (x[0] for x in cam.project(p[None]))
                iu = int(min(max(round(u), 0), cam.width - 1))
                iv = int(min(max(round(v), 0), cam.height - 1))
                hits.append(bool(np.isfinite(d[iv, iu]) and abs(d[iv, iu] - z) < band))
            want = np.array(hits, dtype=float) / max(sum(hits), 1)
            np.testing.assert_array_equal(got[:, n], want)


def _map_hw(scene, level):
    h, w = scene.images.shape[2:]
    f = {"coarse": 8, "medium": 4, "fine": 2}[level]
    return h // f, w // f


def _smooth_warp(rng, a0, hw, eps=1e-5):
    """Nudge A off the identity until no warped sample lies within the finite-difference
    reach of a pixel line; bilinear taps have kinks there and central differences
    straddling one measure the kink, not the tape."""
    h, w = hw
    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    homog = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], 1)
    for _ in range(100):
        a = a0 + rng.normal(0, 0.01, (2, 3))
        c = homog @ a.T
        px = np.stack([(c[:, 0] + 1) * (w - 1) / 2, (c[:, 1] + 1) * (h - 1) / 2], 1)
        reach = eps * np.abs(homog).sum(1, keepdims=True) * np.array([(w - 1) / 2, (h - 1) / 2])
        if np.all(np.abs(px - np.round(px)) > 2 * reach):
            return a
    raise RuntimeError("no smooth warp found")


@pytest.fixture(scope="module")
def chain_scene():
    # large enough that the coarse maps are not all zero padding and views overlap
    return TrainScene.from_bundle(build_bundle(dataclasses.replace(TINY, width=32, height=32, focal=20.0)))


class TestChainGradient:
    GROUPS = ["levels.coarse.fusion.query", "levels.coarse.acm.b_c", "levels.coarse.pce.conf_head.bias",
              "levels.medium.ipsd.bias_net.bias", "levels.fine.head.out.bias", "levels.medium.acm.A",
              "levels.fine.pce.mlp_e.fc2.bias", "backbone.lat_f.bias", "levels.coarse.ipsd.ssm_a.d_raw",
              "levels.fine.fusion.query"]

    @pytest.mark.parametrize("seed", range(20))
    def test_composed_chain(self, chain_scene, seed):
        # image features -> PCE -> ACM -> IPSD -> fusion -> heads -> summed losses
        scene = chain_scene
        cfg = dataclasses.replace(CFG, seed=seed, width_coarse=3, width_medium=3, width_fine=3, state_size=3,
                                  max_medium=12, max_fine=16)
        model = init_model(cfg)
        rng = np.random.default_rng(seed)
        for lvl, lp in model.levels.items():
            lp.acm.A.data = _smooth_warp(rng, lp.acm.A.data, _map_hw(scene, lvl))
        name = self.GROUPS[seed % len(self.GROUPS)]
        theta = named_parameters({"backbone": model.backbone, "levels": model.levels})[name].data
        views = np.array([0, 2])

        def f(t):
            _set(model, name, t)
            return training_forward(model, cfg, scene, views, np.random.default_rng(seed)).total_tensor
        assert grad_check(f, theta) < 1e-4


class TestFeatures:
    def test_pyramid_shapes(self):
        model = init_model(CFG)
        pyr = extract_features(model.backbone, np.random.default_rng(0).random((2, 3, 16, 24)))
        assert pyr.fine.shape == (2, 4, 8, 12) and pyr.medium.shape == (2, 4, 4, 6)
        assert pyr.coarse.shape == (2, 4, 2, 3)

    def test_size_not_multiple_of_8(self):
        with pytest.raises(ValueError):
            extract_features(init_model(CFG).backbone, np.zeros((1, 3, 12, 16)))


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.array([3.0, -0.5])
        opt.step()
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)

    def test_two_step_oracle(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
        x, m, v = 0.0, 0.0, 0.0
        for t, g in enumerate((1.0, -3.0), start=1):
            p.grad = np.array([g])
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data[0] == pytest.approx(x, rel=1e-12)


class TestTraining:
    def test_deterministic(self, scene):
        a = train_toy([scene], CFG)
        b = train_toy([scene], CFG)
        assert loss_csv(a[1]) == loss_csv(b[1])
        assert checkpoint_bytes(a[0]) == checkpoint_bytes(b[0])

    def test_history_and_csv(self, scene):
        _, hist = train_toy([scene], CFG)
        text = loss_csv(hist)
        assert len(hist) == CFG.steps + 1
        assert text.splitlines()[0] == "step,l_fusion,l_occ,l_tsdf,total"
        assert len(text.splitlines()) == CFG.steps + 2

    def test_zero_lr_keeps_weights(self, scene):
        cfg = dataclasses.replace(CFG, lr=0.0)
        model, _ = train_toy([scene], cfg)
        assert checkpoint_bytes(model) == checkpoint_bytes(init_model(cfg))

    def test_loss_decreases(self, scene):
        _, hist = train_toy([scene], dataclasses.replace(CFG, steps=40, lr=5e-3))
        assert hist[-1].total < hist[0].total

    def test_non_finite_loss(self, scene):
        model = init_model(CFG)
        model.backbone.conv1.weight.data = np.full_like(model.backbone.conv1.weight.data, np.nan)
        with pytest.raises(TrainingError) as exc:
            train_toy([scene], CFG, model=model)
        assert exc.value.step == 0

    def test_no_scenes(self):
        with pytest.raises(ValueError):
            train_toy([], CFG)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = init_model(dataclasses.replace(CFG, seed=3))
        save_checkpoint(tmp_path / "m.ipdr", model)
        back = load_checkpoint(tmp_path / "m.ipdr")
        assert checkpoint_bytes(back) == checkpoint_bytes(model)

    def test_architecture_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m.ipdr", init_model(CFG))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.ipdr", dataclasses.replace(CFG, width_fine=8))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.ipdr").write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.ipdr")

    def test_truncated(self, tmp_path):
        data = checkpoint_bytes(init_model(CFG))
        (tmp_path / "m.ipdr").write_bytes(data[:len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.ipdr")

    def test_extra_record(self, tmp_path):
        extra = struct.pack("<I", 5) + b"bogus" + struct.pack("<II", 1, 1) + np.zeros(1).tobytes()
        (tmp_path / "m.ipdr").write_bytes(checkpoint_bytes(init_model(CFG)) + extra)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.ipdr")


class TestConfig:
    def test_file_and_overrides(self, tmp_path):
        (tmp_path / "c.toml").write_text("steps = 7\nlr = 0.01\n")
        cfg = load_config(tmp_path / "c.toml", {"steps": 9, "seed": None})
        assert cfg.steps == 9 and cfg.lr == 0.01 and cfg.seed == 42

    def test_dump_round_trip(self, tmp_path):
        cfg = dataclasses.replace(CFG, ablation=True)
        (tmp_path / "c.toml").write_text(dump_config(cfg))
        assert load_config(tmp_path / "c.toml") == cfg

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.toml").write_text("stepz = 7\n")
        with pytest.raises(ValueError):
            load_config(tmp_path / "c.toml")

    @pytest.mark.parametrize("bad", [{"conf_tau": 1.0}, {"steps": -1}, {"width_fine": 0}, {"beta1": 1.0}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)


class TestReconstruct:
    def test_smoke(self, tiny):
        model, _ = train_toy([TrainScene.from_bundle(tiny)], CFG)
        rec = reconstruct_volume(tiny.images, tiny.cameras, model, tiny.grids["coarse"], CFG)
        assert rec.counts["coarse"] == int(np.prod(tiny.grids["coarse"].dims))
        assert rec.tsdf.dims == tiny.grids["fine"].dims
        assert np.all(np.abs(rec.tsdf.values) <= 1)

    def test_view_permutation(self, tiny):
        model = init_model(CFG)
        a = reconstruct_volume(tiny.images, tiny.cameras, model, tiny.grids["coarse"], CFG)
        perm = [2, 0, 3, 1]
        b = reconstruct_volume([tiny.images[i] for i in perm], [tiny.cameras[i] for i in perm], model,
                               tiny.grids["coarse"], CFG)
        assert a.tsdf.values.tobytes() == b.tsdf.values.tobytes()
        va = a.mesh.vertices[np.lexsort(a.mesh.vertices.T)]
        vb = b.mesh.vertices[np.lexsort(b.mesh.vertices.T)]
        np.testing.assert_array_equal(va, vb)

    def test_camera_count_mismatch(self, tiny):
        with pytest.raises(ValueError):
            reconstruct_volume(tiny.images[:2], tiny.cameras, init_model(CFG), tiny.grids["coarse"], CFG)
