"""Encoder: embed oracle, stage geometry, block wiring, parameter sharing,
and the end-to-end backward check."""

import numpy as np
import pytest

from dpx import tensor as T
from dpx.encoder import (
    BiModalFeatures,
    Encoder,
    EncoderConfig,
    IimibBlock,
    PatchEmbed,
    PatchSpec,
    StageConfig,
    encoder_backward,
    encoder_forward,
    iimib_forward,
    iimib_backward,
    merge_forward,
    patch_embed_forward,
    patch_embed_backward,
    preset_config,
    stage_geometries,
)
from dpx.errors import ConfigError, DimensionError
from dpx.gradcheck import check_param_grads, max_rel_error
from dpx.tensor import RngState, Tensor


def _bold(rng, module, std=0.4):
    for name, t in list(module.named_params()):
        module.set_param(name, rng.normal(t.shape, std=std, precision="double"))


def _small_cfg(**kw):
    stages = (
        StageConfig(1, 8, 2, PatchSpec(3, 2, 1)),
        StageConfig(1, 8, 2, PatchSpec(3, 2, 1)),
        StageConfig(1, 8, 2, PatchSpec(3, 2, 1)),
        StageConfig(1, 8, 2, PatchSpec(3, 2, 1)),
    )
    return EncoderConfig(stages=stages, **kw)


class TestPatchEmbed:
    def test_constant_image_constant_tokens(self):
        rng = RngState(0)
        pe = PatchEmbed.init(rng, PatchSpec(2, 2, 0), 3, 5, "double")
        img = T.full((6, 6, 3), 0.7, "double")
        grid, _ = patch_embed_forward(pe, img)
        assert grid.h == grid.w == 3
        first = grid.feat.data[0]
        for row in grid.feat.data:
            np.testing.assert_allclose(row, first, atol=1e-12)

    def test_geometry_arithmetic_7_4_3(self):
        rng = RngState(1)
        pe = PatchEmbed.init(rng, PatchSpec(7, 4, 3), 3, 4, "double")
        img = rng.uniform((64, 64, 3), precision="double")
        grid, _ = patch_embed_forward(pe, img)
        assert (grid.h, grid.w) == (16, 16)

    def test_sliding_window_oracle(self):
        rng = RngState(2)
        k, s, p = 3, 2, 1
        pe = PatchEmbed.init(rng, PatchSpec(k, s, p), 2, 5, "double")
        _bold(rng, pe)
        img = rng.normal((6, 8, 2), precision="double")
        grid, _ = patch_embed_forward(pe, img)
        padded = np.pad(img.data, ((p, p), (p, p), (0, 0)))
        for oi in range(grid.h):
            for oj in range(grid.w):
                window = padded[oi * s:oi * s + k, oj * s:oj * s + k, :]
                cols = window.reshape(-1)
                expect = cols @ pe.proj.weight.data + pe.proj.bias.data
                got = grid.feat.data[oi * grid.w + oj]
                assert np.max(np.abs(got - expect)) < 1e-5

    def test_indivisible_geometry_rejected(self):
        rng = RngState(3)
        pe = PatchEmbed.init(rng, PatchSpec(7, 4, 3), 3, 4)
        with pytest.raises(ConfigError):
            patch_embed_forward(pe, T.zeros((63, 64, 3)))

    def test_backward_matches_finite_differences(self):
        rng = RngState(4)
        pe = PatchEmbed.init(rng, PatchSpec(3, 2, 1), 2, 3, "double")
        _bold(rng, pe)
        img = rng.normal((4, 4, 2), precision="double")
        cot = rng.normal((4, 3), precision="double")
        grid, cache = patch_embed_forward(pe, img)
        dimg, grads = patch_embed_backward(pe, cache, cot)

        def loss():
            g, _ = patch_embed_forward(pe, img)
            return float((g.feat.data * cot.data).sum())

        records = check_param_grads(pe, loss, grads)
        assert all(r.passed for r in records)

        from dpx.gradcheck import finite_difference_grad
        fd = finite_difference_grad(
            lambda im: float((patch_embed_forward(pe, im)[0].feat.data * cot.data).sum()),
            img)
        assert max_rel_error(dimg.data, fd.data) < 1e-6


class TestStageGeometries:
    def test_strides_4_2_2_2_on_64(self):
        cfg = preset_config("default")
        geoms = stage_geometries(cfg, 64, 64)
        assert geoms == [(16, 16), (8, 8), (4, 4), (2, 2)]

    def test_error_names_stage(self):
        cfg = preset_config("default")
        with pytest.raises(ConfigError, match="stage 1"):
            stage_geometries(cfg, 63, 64)
        with pytest.raises(ConfigError, match="stage 2"):
            stage_geometries(cfg, 68, 68)  # 68/4=17 odd, stage-2 stride 2 fails


class TestIimibBlock:
    def test_zero_init_block_is_identity(self):
        rng = RngState(5)
        cfg = _small_cfg(n_noise=1)
        block = IimibBlock.init(rng, cfg, cfg.stages[0], 0, "double")
        xr = rng.normal((16, 8), precision="double")
        xd = rng.normal((16, 8), precision="double")
        yr, yd, _ = iimib_forward(block, xr, xd, 4, 4)
        assert np.array_equal(yr.data, xr.data)
        assert np.array_equal(yd.data, xd.data)

    def test_shape_preservation_random_configs(self):
        rng = RngState(6)
        for variant in ("dsim", "ca", "pwca", "baseline"):
            cfg = _small_cfg(variant=variant, n_noise=1)
            block = IimibBlock.init(rng, cfg, cfg.stages[0], 0, "double")
            xr = rng.normal((16, 8), precision="double")
            xd = rng.normal((16, 8), precision="double")
            yr, yd, _ = iimib_forward(block, xr, xd, 4, 4)
            assert yr.shape == xr.shape and yd.shape == xd.shape

    def test_three_block_composition_is_sequential(self):
        rng = RngState(7)
        cfg = _small_cfg(n_noise=1)
        blocks = [IimibBlock.init(rng, cfg, cfg.stages[0], i, "double") for i in range(3)]
        for b in blocks:
            _bold(rng, b, std=0.2)
        xr = rng.normal((16, 8), precision="double")
        xd = rng.normal((16, 8), precision="double")
        step_r, step_d = xr, xd
        for b in blocks:
            step_r, step_d, _ = iimib_forward(b, step_r, step_d, 4, 4)
        chain_r, chain_d = xr, xd
        for b in blocks:
            chain_r, chain_d, _ = iimib_forward(b, chain_r, chain_d, 4, 4)
        assert np.array_equal(step_r.data, chain_r.data)
        assert np.array_equal(step_d.data, chain_d.data)

    def test_four_distinct_layernorm_groups(self):
        rng = RngState(8)
        cfg = _small_cfg()
        block = IimibBlock.init(rng, cfg, cfg.stages[0], 0)
        names = {n for n, _ in block.named_params()}
        ln_groups = {n.split(".")[0] for n in names if n.startswith("ln_")}
        assert ln_groups == {"ln_rgb_1", "ln_depth_1", "ln_rgb_2", "ln_depth_2"}

    def test_baseline_block_has_no_inter_or_second_norms(self):
        rng = RngState(9)
        cfg = _small_cfg(variant="baseline")
        block = IimibBlock.init(rng, cfg, cfg.stages[0], 0)
        names = {n for n, _ in block.named_params()}
        assert not any(n.startswith(("inter.", "ln_rgb_2", "ln_depth_2")) for n in names)

    def test_backward_matches_finite_differences(self):
        rng = RngState(10)
        cfg = _small_cfg(n_noise=1)
        block = IimibBlock.init(rng, cfg, cfg.stages[0], 0, "double")
        _bold(rng, block, std=0.3)
        xr = rng.normal((4, 8), precision="double")
        xd = rng.normal((4, 8), precision="double")
        cot_r = rng.normal((4, 8), precision="double")
        cot_d = rng.normal((4, 8), precision="double")
        _, _, cache = iimib_forward(block, xr, xd, 2, 2)
        dxr, dxd, grads = iimib_backward(block, cache, cot_r, cot_d)

        def loss():
            a, b, _ = iimib_forward(block, xr, xd, 2, 2)
            return float((a.data * cot_r.data).sum() + (b.data * cot_d.data).sum())

        records = check_param_grads(block, loss, grads, tol=1e-5)
        failed = [r.group for r in records if not r.passed]
        assert not failed, f"mismatches: {failed}"


class TestEncoder:
    def test_default_depths_sum_to_16(self):
        cfg = preset_config("default")
        assert [s.depth for s in cfg.stages] == [3, 6, 4, 3]
        assert cfg.total_depth == 16

    def test_default_heads_eight(self):
        cfg = preset_config("default")
        assert all(s.heads == 8 for s in cfg.stages)

    def test_forward_geometries(self):
        rng = RngState(11)
        cfg = _small_cfg(n_noise=1)
        enc = Encoder.init(rng, cfg, "double")
        rgb = rng.uniform((16, 16, 3), precision="double")
        depth = rng.uniform((16, 16, 1), precision="double")
        feats, _ = encoder_forward(enc, rgb, depth)
        assert [(f.rgb.h, f.rgb.w) for f in feats] == [(8, 8), (4, 4), (2, 2), (1, 1)]
        for f in feats:
            assert f.rgb.feat.shape == f.depth.feat.shape

    def test_zero_init_blocks_pure_embed_pipeline(self):
        rng = RngState(12)
        cfg = _small_cfg(n_noise=1)
        enc = Encoder.init(rng, cfg, "double")
        rgb = rng.uniform((16, 16, 3), precision="double")
        depth = rng.uniform((16, 16, 1), precision="double")
        feats, _ = encoder_forward(enc, rgb, depth)
        # blocks are identity at init: outputs equal embed/merge chain alone
        grid, _ = patch_embed_forward(enc.embed_rgb, rgb)
        np.testing.assert_array_equal(feats[0].rgb.feat.data, grid.feat.data)
        merged, _ = merge_forward(enc.merges[0], grid)
        np.testing.assert_array_equal(feats[1].rgb.feat.data, merged.feat.data)

    def test_shared_parameters_move_both_branches(self):
        rng = RngState(13)
        cfg = _small_cfg(n_noise=1)
        enc = Encoder.init(rng, cfg, "double")
        _bold(rng, enc, std=0.2)
        rgb = rng.uniform((16, 16, 3), precision="double")
        depth = rng.uniform((16, 16, 1), precision="double")
        f0, _ = encoder_forward(enc, rgb, depth)
        name = "stages.0.blocks.0.intra.w_v.weight"
        old = dict(enc.named_params())[name]
        enc.set_param(name, Tensor(old.data + 0.3, "double"))
        f1, _ = encoder_forward(enc, rgb, depth)
        assert not np.array_equal(f1[3].rgb.feat.data, f0[3].rgb.feat.data)
        assert not np.array_equal(f1[3].depth.feat.data, f0[3].depth.feat.data)

    def test_geometry_error_names_stage(self):
        rng = RngState(14)
        cfg = _small_cfg()
        enc = Encoder.init(rng, cfg)
        with pytest.raises(ConfigError, match="stage 1"):
            encoder_forward(enc, T.zeros((15, 16, 3)), T.zeros((15, 16, 1)))

    def test_end_to_end_backward_matches_finite_differences(self):
        # 16x16 input, d=8, depths [1,1,1,1]; deep composition tolerance.
        # A subset of parameter groups keeps runtime reasonable here; the
        # full-battery acceptance check covers every group.
        rng = RngState(15)
        stages = tuple(StageConfig(1, 8, 2, PatchSpec(3, 2, 1)) for _ in range(4))
        cfg = EncoderConfig(stages=stages, n_noise=1)
        enc = Encoder.init(rng, cfg, "double")
        for name, t in list(enc.named_params()):
            enc.set_param(name, rng.normal(t.shape, std=0.25, precision="double"))
        rgb = rng.uniform((16, 16, 3), precision="double")
        depth = rng.uniform((16, 16, 1), precision="double")
        feats, cache = encoder_forward(enc, rgb, depth)
        cots = [(rng.normal(f.rgb.feat.shape, precision="double"),
                 rng.normal(f.depth.feat.shape, precision="double")) for f in feats]
        grads, dimg_r, dimg_d = encoder_backward(enc, cache, cots, with_inputs=True)

        def loss():
            fs, _ = encoder_forward(enc, rgb, depth)
            return sum(float((f.rgb.feat.data * cr.data).sum()
                             + (f.depth.feat.data * cd.data).sum())
                       for f, (cr, cd) in zip(fs, cots))

        probe = [
            "embed_rgb.proj.bias", "embed_depth.proj.bias",
            "merges.0.proj.bias", "stages.0.blocks.0.ln_rgb_1.gain",
            "stages.0.blocks.0.intra.w_q.bias",
            "stages.0.blocks.0.inter.mod.alpha_rgb",
            "stages.0.blocks.0.inter.mod.noise_k_rgb",
            "stages.3.blocks.0.ffn.second.bias",
        ]
        named = dict(enc.named_params())
        import numpy as _np
        h = 1e-6
        for name in probe:
            t = named[name]
            base = t.data.copy()
            fd = _np.zeros_like(base)
            it = _np.nditer(base, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                hi = base.copy(); hi[i] += h
                enc.set_param(name, Tensor(hi, "double"))
                lp = loss()
                lo = base.copy(); lo[i] -= h
                enc.set_param(name, Tensor(lo, "double"))
                lm = loss()
                fd[i] = (lp - lm) / (2 * h)
            enc.set_param(name, Tensor(base, "double"))
            ga = grads[name].data
            err = _np.abs(ga - fd)
            denom = _np.maximum(_np.maximum(_np.abs(ga), _np.abs(fd)), 1e-12)
            assert _np.all((err / denom < 1e-5) | (err < 1e-5)), name

        # input gradients via finite differences on a few coordinates
        base = rgb.data.copy()
        for (i, j, c) in ((0, 0, 0), (7, 9, 1), (15, 15, 2)):
            hi = base.copy(); hi[i, j, c] += h
            lo = base.copy(); lo[i, j, c] -= h

            def at(img):
                fs, _ = encoder_forward(enc, Tensor(img, "double"), depth)
                return sum(float((f.rgb.feat.data * cr.data).sum()
                                 + (f.depth.feat.data * cd.data).sum())
                           for f, (cr, cd) in zip(fs, cots))

            fd_val = (at(hi) - at(lo)) / (2 * h)
            ga = dimg_r.data[i, j, c]
            assert abs(ga - fd_val) / max(abs(ga), abs(fd_val), 1e-12) < 1e-5


class TestPresets:
    def test_preset_names(self):
        for name in ("default", "toy", "mit-b3-like", "mit-b5-like"):
            cfg = preset_config(name)
            assert len(cfg.stages) == 4

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset_config("mit-b7")

    def test_dims_nondecreasing_enforced(self):
        stages = (
            StageConfig(1, 16, 2, PatchSpec(3, 2, 1)),
            StageConfig(1, 8, 2, PatchSpec(3, 2, 1)),
            StageConfig(1, 8, 2, PatchSpec(3, 2, 1)),
            StageConfig(1, 8, 2, PatchSpec(3, 2, 1)),
        )
        with pytest.raises(ConfigError):
            EncoderConfig(stages=stages)
