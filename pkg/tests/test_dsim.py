"""Inter-modal module: per-stage oracles, the literal per-pixel composition
oracle, algebraic invariants, reductions, and finite-difference backward."""

import numpy as np
import pytest

from dpx import attention as att
from dpx import tensor as T
from dpx.attention import AttentionConfig, PixelwiseParams, QkvoParams, TokenGrid
from dpx.dsim import (
    DsimConfig,
    DsimParams,
    assemble_qkv,
    build_keys,
    build_values,
    dsim_backward,
    paca_forward,
    relation_scores,
)
from dpx.errors import ConfigError, DimensionError, StateError
from dpx.gradcheck import check_param_grads, finite_difference_grad, max_rel_error
from dpx.nn import Linear, linear_forward, mlp2_forward
from dpx.tensor import RngState, Tensor


def _grid(rng, h, w, d, std=0.8):
    return TokenGrid(h, w, rng.normal((h * w, d), std=std, precision="double"))


def _bold(rng, module, std=0.5):
    for name, t in list(module.named_params()):
        module.set_param(name, rng.normal(t.shape, std=std, precision="double"))


def _params(seed=0, **cfg_kwargs):
    rng = RngState(seed)
    cfg = DsimConfig(**{"dim": 4, "heads": 2, "n_noise": 1, **cfg_kwargs})
    p = DsimParams.init(rng, cfg, "double")
    _bold(rng, p)
    return p, rng


class TestRelationScores:
    def test_equal_inputs_with_shared_difference_discriminators(self):
        p, rng = _params(0)
        # share the two difference discriminators' parameters
        for name in ("first.weight", "first.bias", "second.weight", "second.bias"):
            p.set_param(f"disc.f_d_depth.{name}",
                        dict(p.named_params())[f"disc.f_d_rgb.{name}"])
        x = _grid(rng, 2, 2, 4)
        d_r, d_d, s = relation_scores(p, x, x)
        np.testing.assert_array_equal(d_r.data, d_d.data)

    def test_softmax_rows_sum_to_one(self):
        p, rng = _params(1)
        d_r, d_d, s = relation_scores(p, _grid(rng, 3, 3, 4), _grid(rng, 3, 3, 4))
        for t in (d_r, d_d, s):
            assert np.all((t.data >= 0) & (t.data <= 1))
            np.testing.assert_allclose(t.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_sigmoid_variant_in_unit_interval(self):
        p, rng = _params(2, discriminator_variant="mlp2_sigmoid")
        d_r, d_d, s = relation_scores(p, _grid(rng, 3, 3, 4), _grid(rng, 3, 3, 4))
        for t in (d_r, d_d, s):
            assert np.all((t.data > 0) & (t.data < 1))

    def test_swapping_inputs_and_discriminators_swaps_outputs(self):
        p, rng = _params(3)
        x = _grid(rng, 2, 3, 4)
        y = _grid(rng, 2, 3, 4)
        d_r1, d_d1, _ = relation_scores(p, x, y)
        # swap the two difference discriminators' parameter sets
        named = dict(p.named_params())
        for field in ("first.weight", "first.bias", "second.weight", "second.bias"):
            p.set_param(f"disc.f_d_rgb.{field}", named[f"disc.f_d_depth.{field}"])
            p.set_param(f"disc.f_d_depth.{field}", named[f"disc.f_d_rgb.{field}"])
        d_r2, d_d2, _ = relation_scores(p, y, x)
        np.testing.assert_array_equal(d_r2.data, d_d1.data)
        np.testing.assert_array_equal(d_d2.data, d_r1.data)

    def test_shape_mismatch(self):
        p, rng = _params(4)
        with pytest.raises(DimensionError):
            relation_scores(p, _grid(rng, 2, 2, 4), _grid(rng, 2, 3, 4))


class TestBuildKeys:
    def test_zero_factors_zero_keys(self):
        p, rng = _params(5)
        zero = T.zeros((4,), "double")
        for name in ("alpha_rgb", "beta_rgb", "alpha_depth", "beta_depth"):
            p.set_param(name, zero)
        q_r = rng.normal((6, 4), precision="double")
        q_d = rng.normal((6, 4), precision="double")
        d_r = rng.uniform((6, 4), precision="double")
        d_d = rng.uniform((6, 4), precision="double")
        s = rng.uniform((6, 4), precision="double")
        k_r, k_d = build_keys(p, q_r, q_d, d_r, d_d, s)
        assert np.all(k_r.data == 0) and np.all(k_d.data == 0)

    def test_neutral_gating_returns_q_lt(self):
        p, rng = _params(6)
        one_vec = T.ones((4,), "double")
        for name in ("alpha_rgb", "beta_rgb", "alpha_depth", "beta_depth"):
            p.set_param(name, one_vec)
        q_r = rng.normal((6, 4), precision="double")
        q_d = rng.normal((6, 4), precision="double")
        ones = T.ones((6, 4), "double")
        k_r, k_d = build_keys(p, q_r, q_d, ones, ones, ones)
        for e in range(2):
            np.testing.assert_array_equal(k_r.data[:, e, :], q_r.data)
            np.testing.assert_array_equal(k_d.data[:, e, :], q_d.data)

    def test_scalar_oracle_exact(self):
        p, rng = _params(7)
        n, d = 5, 4
        q_r = rng.normal((n, d), precision="double")
        q_d = rng.normal((n, d), precision="double")
        d_r = rng.uniform((n, d), precision="double")
        d_d = rng.uniform((n, d), precision="double")
        s = rng.uniform((n, d), precision="double")
        k_r, k_d = build_keys(p, q_r, q_d, d_r, d_d, s)
        for i in range(n):
            for c in range(d):
                assert k_r.data[i, 0, c] == \
                    p.alpha_rgb.data[c] * q_r.data[i, c] * d_r.data[i, c]
                assert k_r.data[i, 1, c] == \
                    p.beta_rgb.data[c] * q_r.data[i, c] * s.data[i, c]
                assert k_d.data[i, 0, c] == \
                    p.alpha_depth.data[c] * q_d.data[i, c] * d_d.data[i, c]
                assert k_d.data[i, 1, c] == \
                    p.beta_depth.data[c] * q_d.data[i, c] * s.data[i, c]


class TestBuildValues:
    def test_identical_projections_zero_difference_entry(self):
        p, rng = _params(8)
        v = rng.normal((5, 4), precision="double")
        v_r, v_d = build_values(p, v, v)
        assert np.all(v_r.data[:, 0, :] == 0) and np.all(v_d.data[:, 0, :] == 0)

    def test_antisymmetry_exact(self):
        p, rng = _params(9)
        a = rng.normal((5, 4), precision="double")
        b = rng.normal((5, 4), precision="double")
        v_r, v_d = build_values(p, a, b)
        np.testing.assert_array_equal(v_r.data[:, 0, :], -v_d.data[:, 0, :])

    def test_scalar_oracle_exact(self):
        p, rng = _params(10)
        a = rng.normal((5, 4), precision="double")
        b = rng.normal((5, 4), precision="double")
        v_r, v_d = build_values(p, a, b)
        np.testing.assert_array_equal(v_r.data[:, 0, :], a.data - b.data)
        np.testing.assert_array_equal(v_r.data[:, 1, :], b.data)
        np.testing.assert_array_equal(v_d.data[:, 0, :], b.data - a.data)
        np.testing.assert_array_equal(v_d.data[:, 1, :], a.data)


class TestAssembleQkv:
    def test_no_noise_extent_two(self):
        p, rng = _params(11, n_noise=0)
        x = rng.normal((4, 4), precision="double")
        y = rng.normal((4, 4), precision="double")
        k = rng.normal((4, 2, 4), precision="double")
        v = rng.normal((4, 2, 4), precision="double")
        (q_r, k_r, v_r), _ = assemble_qkv(p, x, y, k, k, v, v)
        assert k_r.shape == (4, 2, 4) and v_r.shape == (4, 2, 4)

    def test_identity_projections_preserve_inputs(self):
        p, rng = _params(12, n_noise=1)
        ident = Linear(T.eye(4, "double"), T.zeros((4,), "double"))
        p.w_q = ident
        p.w_k = ident
        p.w_v = ident
        x = rng.normal((4, 4), precision="double")
        y = rng.normal((4, 4), precision="double")
        k = rng.normal((4, 2, 4), precision="double")
        v = rng.normal((4, 2, 4), precision="double")
        (q_r, k_r, v_r), _ = assemble_qkv(p, x, y, k, k, v, v)
        np.testing.assert_array_equal(q_r.data, x.data)
        np.testing.assert_array_equal(k_r.data[:, 1:, :], k.data)
        np.testing.assert_array_equal(k_r.data[:, 0, :],
                                      np.broadcast_to(p.noise_k_rgb.data, (4, 4)))

    def test_shape_arithmetic_9x4x8(self):
        rng = RngState(13)
        cfg = DsimConfig(dim=8, heads=2, n_noise=2)
        p = DsimParams.init(rng, cfg, "double")
        x = rng.normal((9, 8), precision="double")
        y = rng.normal((9, 8), precision="double")
        k = rng.normal((9, 2, 8), precision="double")
        v = rng.normal((9, 2, 8), precision="double")
        (q_r, k_r, v_r), (q_d, k_d, v_d) = assemble_qkv(p, x, y, k, k, v, v)
        assert k_r.shape == (9, 4, 8)
        assert v_d.shape == (9, 4, 8)


def _paca_oracle(p: DsimParams, xr: np.ndarray, xd: np.ndarray):
    """Literal per-pixel composition of the whole pipeline, one token at a
    time: discriminator scores, gated keys, differential values, noise
    injection, projections, per-pixel multihead attention, residual."""
    cfg = p.cfg
    n, d = xr.shape
    dh = d // cfg.heads
    scale = 1.0 / np.sqrt(dh)

    def mlp(m, v):
        out, _ = mlp2_forward(m, Tensor(v[None, :], "double"))
        return out.data[0]

    def lin(layer, v):
        return v @ layer.weight.data + layer.bias.data

    out_r = np.zeros_like(xr)
    out_d = np.zeros_like(xd)
    for k_tok in range(n):
        a, b = xr[k_tok], xd[k_tok]
        d_r = mlp(p.disc.f_d_rgb, a - b)
        d_d = mlp(p.disc.f_d_depth, b - a)
        s = mlp(p.disc.f_s, np.concatenate([a, b]))
        qlt_r, qlt_d = lin(p.lt_q, a), lin(p.lt_q, b)
        vlt_r, vlt_d = lin(p.lt_v, a), lin(p.lt_v, b)
        k_r = [p.alpha_rgb.data * qlt_r * d_r, p.beta_rgb.data * qlt_r * s]
        k_d = [p.alpha_depth.data * qlt_d * d_d, p.beta_depth.data * qlt_d * s]
        v_r = [vlt_r - vlt_d, vlt_d]
        v_d = [vlt_d - vlt_r, vlt_r]
        kset_r = [p.noise_k_rgb.data[j] for j in range(cfg.n_noise)] + k_r
        kset_d = [p.noise_k_depth.data[j] for j in range(cfg.n_noise)] + k_d
        vset_r = [p.noise_v_rgb.data[j] for j in range(cfg.n_noise)] + v_r
        vset_d = [p.noise_v_depth.data[j] for j in range(cfg.n_noise)] + v_d
        q_r = lin(p.w_q, a)
        q_d = lin(p.w_q, b)
        kp_r = np.stack([lin(p.w_k, e) for e in kset_r])
        kp_d = np.stack([lin(p.w_k, e) for e in kset_d])
        vp_r = np.stack([lin(p.w_v, e) for e in vset_r])
        vp_d = np.stack([lin(p.w_v, e) for e in vset_d])

        def attend(q, ks, vs):
            o = np.zeros(d)
            for h_ in range(cfg.heads):
                sl = slice(h_ * dh, (h_ + 1) * dh)
                logits = ks[:, sl] @ q[sl] * scale
                w = np.exp(logits - logits.max())
                w = w / w.sum()
                o[sl] = w @ vs[:, sl]
            return o

        # RGB queries attend depth keys, retrieve RGB-side values
        out_r[k_tok] = lin(p.w_o, attend(q_r, kp_d, vp_r)) + a
        out_d[k_tok] = lin(p.w_o, attend(q_d, kp_r, vp_d)) + b
    return out_r, out_d


class TestPacaForward:
    def test_literal_composition_oracle(self):
        p, rng = _params(14)
        x = _grid(rng, 2, 2, 4)
        y = _grid(rng, 2, 2, 4)
        yr, yd, _ = paca_forward(p, x, y)
        exp_r, exp_d = _paca_oracle(p, x.feat.data, y.feat.data)
        assert np.max(np.abs(yr.feat.data - exp_r)) < 1e-5
        assert np.max(np.abs(yd.feat.data - exp_d)) < 1e-5

    def test_literal_oracle_heads1_noise1(self):
        rng = RngState(15)
        cfg = DsimConfig(dim=4, heads=1, n_noise=1)
        p = DsimParams.init(rng, cfg, "double")
        _bold(rng, p)
        x = _grid(rng, 2, 2, 4)
        y = _grid(rng, 2, 2, 4)
        yr, yd, _ = paca_forward(p, x, y)
        exp_r, exp_d = _paca_oracle(p, x.feat.data, y.feat.data)
        assert np.max(np.abs(yr.feat.data - exp_r)) < 1e-5

    def test_residual_identity_with_zero_output_projection(self):
        rng = RngState(16)
        p = DsimParams.init(rng, DsimConfig(dim=4, heads=2, n_noise=1), "double")
        x = _grid(rng, 2, 2, 4)
        y = _grid(rng, 2, 2, 4)
        yr, yd, _ = paca_forward(p, x, y)
        assert np.array_equal(yr.feat.data, x.feat.data)
        assert np.array_equal(yd.feat.data, y.feat.data)

    def test_per_pixel_locality_bitwise(self):
        p, rng = _params(17)
        x = _grid(rng, 3, 3, 4)
        y = _grid(rng, 3, 3, 4)
        yr0, yd0, _ = paca_forward(p, x, y)
        for trial in range(20):
            j = int(rng.integers(0, 9))
            y2 = y.feat.data.copy()
            y2[j] += rng.normal((4,), precision="double").data
            yr1, _, _ = paca_forward(p, x, TokenGrid(3, 3, Tensor(y2, "double")))
            for k in range(9):
                if k != j:
                    assert np.array_equal(yr0.feat.data[k], yr1.feat.data[k])

    def test_weights_sum_to_one(self):
        p, rng = _params(18, n_noise=2)
        x = _grid(rng, 3, 3, 4)
        y = _grid(rng, 3, 3, 4)
        _, _, cache = paca_forward(p, x, y)
        for tag in ("core_r", "core_d"):
            a = cache[tag]["att"].data
            assert a.shape[-1] == 4  # 2 noise + 2 entries
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)

    def test_geometry_mismatch(self):
        p, rng = _params(19)
        with pytest.raises(DimensionError):
            paca_forward(p, _grid(rng, 2, 2, 4), _grid(rng, 2, 3, 4))


class TestReduction:
    def test_ablated_dsim_equals_single_key_pixelwise(self):
        rng = RngState(20)
        d = 4
        dcfg = DsimConfig(dim=d, heads=2, n_noise=0, enable_difference=False,
                          enable_similarity=False, enable_learning_factor=False)
        p = DsimParams.init(rng, dcfg, "double")
        _bold(rng, p)
        ident = Linear(T.eye(d, "double"), T.zeros((d,), "double"))
        p.lt_q = ident
        p.lt_v = ident
        x = _grid(rng, 3, 3, d)
        y = _grid(rng, 3, 3, d)
        yr, yd, _ = paca_forward(p, x, y)
        acfg = AttentionConfig(dim=d, heads=2, n_noise=0)
        pp = PixelwiseParams(QkvoParams(p.w_q, p.w_k, p.w_v, p.w_o))
        pr, pd = att.pixelwise_cross_attention(acfg, pp, x, y)
        assert np.max(np.abs(yr.feat.data - pr.feat.data)) < 1e-5
        assert np.max(np.abs(yd.feat.data - pd.feat.data)) < 1e-5


class TestAblationStructure:
    def test_entry_counts_per_switch(self):
        for diff, sim, expect in ((True, True, 2), (True, False, 1),
                                  (False, True, 1), (False, False, 1)):
            cfg = DsimConfig(dim=4, heads=2, n_noise=1, enable_difference=diff,
                             enable_similarity=sim)
            assert cfg.n_entries == expect
            assert cfg.keys_per_pixel == expect + 1

    def test_disabled_factor_params_absent(self):
        rng = RngState(21)
        p = DsimParams.init(rng, DsimConfig(dim=4, heads=2,
                                            enable_learning_factor=False), "double")
        names = {n for n, _ in p.named_params()}
        assert not any(n.startswith(("alpha", "beta")) for n in names)

    def test_disabled_discriminators_absent(self):
        rng = RngState(22)
        p = DsimParams.init(rng, DsimConfig(dim=4, heads=2, enable_difference=False),
                            "double")
        names = {n for n, _ in p.named_params()}
        assert not any("f_d_" in n for n in names)
        assert any("f_s" in n for n in names)

    def test_bad_variant_rejected(self):
        with pytest.raises(ConfigError):
            DsimConfig(dim=4, heads=2, discriminator_variant="tanh")


class TestDsimBackward:
    def test_zero_cotangent_zero_grads(self):
        p, rng = _params(23)
        x = _grid(rng, 2, 2, 4)
        y = _grid(rng, 2, 2, 4)
        _, _, cache = paca_forward(p, x, y)
        zero = T.zeros((4, 4), "double")
        dxr, dxd, grads = dsim_backward(p, cache, zero, zero)
        assert np.all(dxr.data == 0) and np.all(dxd.data == 0)
        for g in grads.values():
            assert np.all(g.data == 0)

    def test_missing_cache_raises_state_error(self):
        p, _ = _params(24)
        with pytest.raises(StateError):
            dsim_backward(p, {}, T.zeros((4, 4), "double"), T.zeros((4, 4), "double"))

    def test_all_parameter_groups_match_finite_differences(self):
        p, rng = _params(25)
        x = _grid(rng, 2, 2, 4)
        y = _grid(rng, 2, 2, 4)
        cot_r = rng.normal((4, 4), precision="double")
        cot_d = rng.normal((4, 4), precision="double")
        _, _, cache = paca_forward(p, x, y)
        dxr, dxd, grads = dsim_backward(p, cache, cot_r, cot_d)

        def loss():
            a, b, _ = paca_forward(p, x, y)
            return float((a.feat.data * cot_r.data).sum()
                         + (b.feat.data * cot_d.data).sum())

        records = check_param_grads(p, loss, grads)
        failed = [r.group for r in records if not r.passed]
        assert not failed, f"gradient mismatches: {failed}"

        fd_x = finite_difference_grad(
            lambda xt: (lambda a, b, _: float(
                (a.feat.data * cot_r.data).sum() + (b.feat.data * cot_d.data).sum()
            ))(*paca_forward(p, x.with_feat(xt), y)), x.feat)
        assert max_rel_error(dxr.data, fd_x.data) < 1e-6

    def test_unused_lt_k_gradient_is_zero(self):
        # lt_k is declared by the projection stage but unused by the key
        # construction: its finite-difference gradient must be exactly zero
        p, rng = _params(26)
        x = _grid(rng, 2, 2, 4)
        y = _grid(rng, 2, 2, 4)
        cot = rng.normal((4, 4), precision="double")

        base = p.lt_k.weight.data.copy()

        def loss_at(v):
            p.set_param("lt_k.weight", v)
            a, b, _ = paca_forward(p, x, y)
            out = float((a.feat.data * cot.data).sum())
            p.set_param("lt_k.weight", Tensor(base, "double"))
            return out

        fd = finite_difference_grad(loss_at, p.lt_k.weight)
        assert np.all(fd.data == 0.0)

    def test_noise_gradient_zero_when_masked_by_zero_weights(self):
        # zero w_v kills the value path: noise VALUE tokens cannot influence
        # the output, so their gradient must vanish while noise KEY tokens
        # still act through the attention weights
        p, rng = _params(27)
        p.set_param("w_v.weight", T.zeros((4, 4), "double"))
        p.set_param("w_v.bias", T.zeros((4,), "double"))
        x = _grid(rng, 2, 2, 4)
        y = _grid(rng, 2, 2, 4)
        cot_r = rng.normal((4, 4), precision="double")
        cot_d = rng.normal((4, 4), precision="double")
        _, _, cache = paca_forward(p, x, y)
        _, _, grads = dsim_backward(p, cache, cot_r, cot_d)
        assert np.all(grads["noise_v_rgb"].data == 0)
        assert np.all(grads["noise_v_depth"].data == 0)
