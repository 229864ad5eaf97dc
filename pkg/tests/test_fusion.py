import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import randomize, small_inputs, small_model
from quatfuse import fusion as F
from quatfuse import numcore as nc
from quatfuse import quat
from quatfuse.numcore import ConfigError, ShapeError, Tensor

MODES = ("progressive", "separate", "input_summation", "deep_summation")


def live_dae(seed=0, mixer="quaternion", axis="lidar_on_i", c_depth_in=3):
    blk = F.DAEBlock(4, c_depth_in, 2, hidden=3, mixer=mixer, axis=axis, seed=seed)
    randomize(blk, np.random.default_rng(seed + 1))
    return blk


def f_with(module, p, t, f):
    """Evaluate ``f`` with parameter ``p`` swapped for tensor ``t`` (keeps the graph)."""
    for owner in _owners(module):
        for key, val in vars(owner).items():
            if val is p:
                setattr(owner, key, t)
                try:
                    return f(None)
                finally:
                    setattr(owner, key, p)
    raise KeyError("parameter not found")


def _owners(module):
    seen = [module]
    for val in vars(module).values():
        if isinstance(val, list):
            for v in val:
                if hasattr(v, "__dict__"):
                    seen += _owners(v)
        elif hasattr(val, "parameters") and hasattr(val, "__dict__") and not isinstance(
                val, Tensor):
            seen += _owners(val)
    return seen


class TestMatchSpatial:
    def test_passthrough(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 6)))
        assert F.match_spatial(x, 4, 6) is x

    @pytest.mark.parametrize("src,dst", [((4, 6), (8, 8)), ((5, 3), (4, 9)), ((16, 32), (2, 4))])
    def test_shapes(self, src, dst):
        x = Tensor(np.ones((2, *src)))
        out = F.match_spatial(x, *dst)
        assert out.shape == (2, *dst)
        np.testing.assert_allclose(out.data, 1.0, atol=1e-14)


class TestAxisAssignment:
    def test_packing(self):
        assert F.axis_assignment("lidar_on_i")("img", "lid") == ("img", "lid")
        assert F.axis_assignment("lidar_on_r")("img", "lid") == ("lid", "img")
        with pytest.raises(ConfigError):
            F.axis_assignment("lidar_on_k")

    def test_symmetric_weights_component_relation(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 3))
        z = np.zeros((3, 3))
        layer = quat.QuaternionLinear(Tensor(a), Tensor(a), Tensor(z), Tensor(z))
        f, c = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2, 2))
        zero = np.zeros_like(f)
        out = {}
        for variant in F.AXIS_VARIANTS:
            r, i = F.axis_assignment(variant)(f, c)
            q = quat.QuaternionTensor(Tensor(np.stack([r, i, zero, zero])))
            out[variant] = quat.qlinear_forward(layer, q).inner.data
        a_, b_ = out["lidar_on_i"], out["lidar_on_r"]
        np.testing.assert_allclose(b_[0], -a_[0], atol=1e-13)
        np.testing.assert_allclose(b_[1], a_[1], atol=1e-13)
        np.testing.assert_array_equal(a_[2:], 0.0)
        np.testing.assert_array_equal(b_[2:], 0.0)

    def test_variant_swaps_only_inputs(self):
        blk_i = live_dae(axis="lidar_on_i")
        blk_r = live_dae(axis="lidar_on_r")
        rng = np.random.default_rng(4)
        fimg, cprev = Tensor(rng.normal(size=(4, 6, 6))), Tensor(rng.normal(size=(3, 6, 6)))
        # same seed, same weights; the lidar_on_r block sees (c_hat, f_hat)
        f_hat, c_hat = blk_i.g1(fimg), blk_i.g2(cprev)
        zero = Tensor(np.zeros(f_hat.shape))
        q = quat.QuaternionTensor.from_components(c_hat, f_hat, zero, zero)
        ref = quat.split_activation(quat.qlinear_forward(blk_r.qua_fa, q), "relu")
        r, i = blk_r.mixed(fimg, cprev)
        np.testing.assert_array_equal(r.data, ref.r.data)
        np.testing.assert_array_equal(i.data, ref.i.data)


class TestDAE:
    def test_default_hidden(self):
        assert F.DAEBlock(4, 1, 8).hidden == 8

    @pytest.mark.parametrize("mixer", F.DAE_MIXERS)
    def test_zero_init_is_identity(self, mixer):
        blk = F.DAEBlock(4, 1, 2, hidden=3, mixer=mixer, seed=5)
        rng = np.random.default_rng(5)
        fimg = Tensor(rng.normal(size=(4, 6, 6)))
        for cprev in (Tensor(rng.normal(size=(1, 11, 13))), Tensor(np.zeros((1, 6, 6)))):
            f_enh, c_next = F.dae_forward(blk, fimg, cprev)
            assert f_enh.data.tobytes() == fimg.data.tobytes()
            assert c_next.shape == (2, 6, 6) and not c_next.data.any()

    def test_channel_mismatch(self):
        blk = F.DAEBlock(4, 1, 2, hidden=3)
        with pytest.raises(ShapeError):
            blk(Tensor(np.zeros((5, 6, 6))), Tensor(np.zeros((1, 6, 6))))

    def test_unknown_mixer(self):
        with pytest.raises(ConfigError):
            F.DAEBlock(4, 1, 2, mixer="attention")

    @pytest.mark.parametrize("mixer", F.DAE_MIXERS)
    def test_gradients(self, mixer):
        rng = np.random.default_rng(7)
        blk = live_dae(7, mixer)
        fimg = rng.normal(size=(4, 6, 6))
        cprev = rng.normal(size=(3, 4, 5))

        def loss(f_enh, c_next):
            return nc.add(nc.sum_(nc.square(f_enh)), nc.sum_(nc.sigmoid(c_next)))

        assert nc.finite_diff_check(lambda t: loss(*blk(t, Tensor(cprev))), Tensor(fimg)) < 1e-5
        assert nc.finite_diff_check(lambda t: loss(*blk(Tensor(fimg), t)), Tensor(cprev)) < 1e-5
        for name, p in blk.parameters().items():
            idx = rng.choice(p.data.size, size=min(5, p.data.size), replace=False)
            err = nc.finite_diff_check(
                lambda t, p=p: f_with(blk, p, t, lambda _: loss(*blk(Tensor(fimg),
                                                                     Tensor(cprev)))),
                Tensor(p.data), indices=idx)
            assert err < 1e-5, name

    def test_quaternion_mixer_quarter_of_mlp(self):
        for hidden in (2, 8, 13):
            q = F.DAEBlock(4, 1, 2, hidden=hidden, mixer="quaternion")
            m = F.DAEBlock(4, 1, 2, hidden=hidden, mixer="mlp")
            assert q.mixing_weight_count() * 4 == m.mixing_weight_count()


class TestGAE:
    def test_zero_init_is_identity(self):
        blk = F.GAEBlock(4, 3, hidden=5, seed=2)
        rng = np.random.default_rng(2)
        q = Tensor(rng.normal(size=(4, 8, 8)))
        q_out, c_geo = F.gae_forward(blk, q, Tensor(rng.normal(size=(3, 8, 8))))
        assert q_out.data.tobytes() == q.data.tobytes()
        assert c_geo.shape == (5, 8, 8)

    def test_zero_transform_halves(self):
        blk = F.GAEBlock(4, 3, hidden=5, seed=2)
        blk.w_t.data[...] = 0.0
        rng = np.random.default_rng(3)
        q, c = Tensor(rng.normal(size=(4, 8, 8))), Tensor(rng.normal(size=(3, 8, 8)))
        _, c_geo = blk(q, c)
        np.testing.assert_array_equal(c_geo.data, 0.5 * blk.align(q, c).data)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 5.0))
    def test_gate_range(self, seed, scale):
        rng = np.random.default_rng(seed)
        blk = F.GAEBlock(4, 3, hidden=6, seed=seed % 1000)
        blk.w_t.data[...] = rng.normal(size=(6, 6)) * scale
        f = blk.align(Tensor(rng.normal(size=(4, 5, 5))), Tensor(rng.normal(size=(3, 5, 5))))
        g = blk.gate(f).data
        assert ((g > 0) & (g < 1)).all()

    def test_spatial_mismatch(self):
        blk = F.GAEBlock(4, 3, hidden=5)
        with pytest.raises(ShapeError):
            blk(Tensor(np.zeros((4, 8, 8))), Tensor(np.zeros((3, 8, 7))))

    @pytest.mark.parametrize("quaternion", [False, True])
    def test_gradients(self, quaternion):
        rng = np.random.default_rng(11)
        blk = F.GAEBlock(8, 8, hidden=6, quaternion=quaternion, seed=11)
        randomize(blk, rng)
        q, c = rng.normal(size=(8, 10, 10)), rng.normal(size=(8, 10, 10))

        def loss(q_out, c_geo):
            return nc.add(nc.sum_(nc.square(q_out)), nc.sum_(c_geo))

        idx = rng.choice(800, size=40, replace=False)
        assert nc.finite_diff_check(lambda t: loss(*blk(t, Tensor(c))), Tensor(q),
                                    indices=idx) < 1e-5
        assert nc.finite_diff_check(lambda t: loss(*blk(Tensor(q), t)), Tensor(c),
                                    indices=idx) < 1e-5
        for name, p in blk.parameters().items():
            pidx = rng.choice(p.data.size, size=min(5, p.data.size), replace=False)
            err = nc.finite_diff_check(
                lambda t, p=p: f_with(blk, p, t, lambda _: loss(*blk(Tensor(q), Tensor(c)))),
                Tensor(p.data), indices=pidx)
            assert err < 1e-5, name


class TestParseQuaFA:
    @pytest.mark.parametrize("spec,expected", [
        ("off", [False, False, False]), ("first_layer", [True, False, False]),
        ("depth:2", [False, True, False]), ("all", [True, True, True]),
    ])
    def test_settings(self, spec, expected):
        assert F.parse_qua_fa(spec, 3) == expected

    @pytest.mark.parametrize("spec", ["depth:0", "depth:4", "sometimes"])
    def test_invalid(self, spec):
        with pytest.raises(ConfigError):
            F.parse_qua_fa(spec, 3)


class TestChain:
    def test_progressive_threads_depth_state(self, monkeypatch):
        model = small_model("progressive")
        calls = []
        orig = F.DAEBlock.__call__

        def spy(self, f_img, c_prev):
            out = orig(self, f_img, c_prev)
            calls.append((self, c_prev, out[1]))
            return out
        monkeypatch.setattr(F.DAEBlock, "__call__", spy)
        images, depths, bev = small_inputs()
        model.forward(images, depths, bev)
        assert [c[0] for c in calls] == model.chain.dae_blocks
        assert calls[0][1] is depths[0]
        for prev, cur in zip(calls, calls[1:]):
            assert cur[1] is prev[2]

    def test_separate_feeds_raw_depth(self, monkeypatch):
        model = small_model("separate")
        seen = []
        orig = F.DAEBlock.__call__
        monkeypatch.setattr(F.DAEBlock, "__call__",
                            lambda self, f, c: seen.append(c) or orig(self, f, c))
        images, depths, bev = small_inputs()
        model.forward(images, depths, bev)
        assert len(seen) == 3 and all(c is depths[0] for c in seen)

    def test_gae_recurrence(self, monkeypatch):
        model = small_model("progressive")
        calls = []
        orig = F.GAEBlock.__call__

        def spy(self, q, c_prev):
            out = orig(self, q, c_prev)
            calls.append((c_prev, out[1]))
            return out
        monkeypatch.setattr(F.GAEBlock, "__call__", spy)
        model.forward(*small_inputs())
        assert len(calls) == 2 and calls[1][0] is calls[0][1]

    @pytest.mark.parametrize("mode", MODES)
    def test_block_inventory(self, mode):
        chain = small_model(mode).chain
        n_dae = sum(b is not None for b in chain.dae_blocks)
        n_gae = sum(b is not None for b in chain.gae_enc_blocks + chain.gae_dec_blocks)
        per_stage = mode in ("progressive", "separate")
        assert n_dae == (3 if per_stage else 0) and n_gae == (2 if per_stage else 0)
        assert (chain.embed_bev is not None) == (not per_stage)

    @pytest.mark.parametrize("lidar", [True, False])
    def test_all_modes_finite_same_shapes(self, lidar):
        shapes = set()
        for mode in MODES + ("camera_only",):
            model = small_model(mode, seed=3)
            randomize(model, np.random.default_rng(3))
            pred = model.forward(*small_inputs(3, lidar=lidar))
            assert np.isfinite(pred.heat_logits.data).all()
            assert np.isfinite(pred.sizes.data).all()
            shapes.add((pred.heat_logits.shape, pred.sizes.shape))
        assert len(shapes) == 1

    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("seed", range(3))
    def test_zero_init_matches_camera_only(self, mode, seed):
        model = small_model(mode, seed=seed, qua_fa="all")
        images, depths, bev = small_inputs(seed)
        fused = model.forward(images, depths, bev)
        cam = model.forward(images, depths, bev, camera_only=True)
        assert fused.heat_logits.data.tobytes() == cam.heat_logits.data.tobytes()
        assert fused.sizes.data.tobytes() == cam.sizes.data.tobytes()

    def test_zero_init_features_and_query_bitwise(self):
        model = small_model("progressive")
        images, depths, bev = small_inputs(1)
        fused = F.chain_forward(model.chain, model, images, depths, bev)
        cam = F.chain_forward(model._camera_only_chain, model, images, depths, bev)
        for a, b in zip(fused.features[0], cam.features[0]):
            assert a.data.tobytes() == b.data.tobytes()
        assert fused.query.data.tobytes() == cam.query.data.tobytes()

    def test_depth_perturbation_propagates(self):
        model = small_model("progressive", seed=4)
        randomize(model, np.random.default_rng(4))
        images, depths, bev = small_inputs(4)
        base = F.chain_forward(model.chain, model, images, depths, bev)
        bumped = [Tensor(depths[0].data + 0.05 * (depths[0].data > 0))]
        pert = F.chain_forward(model.chain, model, images, bumped, bev)
        for s, (a, b) in enumerate(zip(base.depth_states[0], pert.depth_states[0])):
            assert np.abs(a.data - b.data).max() > 0, f"stage {s}"

    def test_image_count_mismatch(self):
        model = small_model()
        images, depths, bev = small_inputs()
        with pytest.raises(ConfigError):
            model.forward(images * 2, depths, bev)

    def test_manifest(self):
        rows = small_model(qua_fa="depth:2").chain.manifest()
        kinds = [(r["kind"], r["stage"]) for r in rows]
        assert kinds == [("dae", 0), ("dae", 1), ("dae", 2), ("gae_enc", 0), ("gae_dec", 0)]
        assert [r.get("mixer") for r in rows[:3]] == ["concat", "quaternion", "concat"]

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            F.ChainSpec(mode="late_fusion")
