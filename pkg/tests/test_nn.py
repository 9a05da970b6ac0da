"""Layer primitives: forward contracts and finite-difference backward checks."""

import numpy as np
import pytest

from dpx import tensor as T
from dpx.errors import ConfigError, DimensionError
from dpx.gradcheck import finite_difference_grad, max_rel_error
from dpx.nn import (
    DropPathConfig,
    LayerNorm,
    Linear,
    Mlp2,
    drop_path_forward,
    gelu_forward,
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    linear_forward,
    mlp2_backward,
    mlp2_forward,
)
from dpx.tensor import RngState, Tensor


def _bold(rng, module, std=0.6):
    for name, t in list(module.named_params()):
        module.set_param(name, rng.normal(t.shape, std=std, precision="double"))


class TestLinear:
    def test_identity_weights(self):
        rng = RngState(0)
        lin = Linear(T.eye(4, "double"), T.zeros((4,), "double"))
        x = rng.normal((3, 4), precision="double")
        y, _ = linear_forward(lin, x)
        np.testing.assert_array_equal(y.data, x.data)

    def test_zero_cotangent_zero_grads(self):
        rng = RngState(1)
        lin = Linear.init(rng, 4, 3, precision="double")
        x = rng.normal((5, 4), precision="double")
        _, cache = linear_forward(lin, x)
        dx, grads = linear_backward(lin, cache, T.zeros((5, 3), "double"))
        assert np.all(dx.data == 0)
        assert all(np.all(g.data == 0) for g in grads.values())

    def test_backward_matches_finite_differences(self):
        rng = RngState(2)
        lin = Linear.init(rng, 4, 3, precision="double")
        _bold(rng, lin)
        x = rng.normal((5, 4), precision="double")
        cot = rng.normal((5, 3), precision="double")
        _, cache = linear_forward(lin, x)
        dx, grads = linear_backward(lin, cache, cot)

        fd_x = finite_difference_grad(
            lambda xt: float((linear_forward(lin, xt)[0].data * cot.data).sum()), x)
        assert max_rel_error(dx.data, fd_x.data) < 1e-7

        for name, t in lin.named_params():
            base = t.data.copy()

            def loss_at(v, name=name, t=t):
                lin.set_param(name, v)
                out = float((linear_forward(lin, x)[0].data * cot.data).sum())
                lin.set_param(name, Tensor(base, "double"))
                return out

            fd = finite_difference_grad(loss_at, t)
            assert max_rel_error(grads[name].data, fd.data) < 1e-7

    def test_dim_error(self):
        lin = Linear.init(RngState(0), 4, 3)
        with pytest.raises(DimensionError):
            linear_forward(lin, T.zeros((2, 5)))


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        ln = LayerNorm.init(6, "double")
        x = T.full((2, 6), 3.5, "double")
        y, _ = layernorm_forward(ln, x)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-6)

    def test_output_statistics(self):
        rng = RngState(3)
        ln = LayerNorm.init(32, "double")
        x = rng.normal((100, 32), std=2.0, precision="double")
        y, _ = layernorm_forward(ln, x)
        assert np.max(np.abs(y.data.mean(axis=-1))) < 1e-6
        assert np.max(np.abs(y.data.var(axis=-1) - 1.0)) < 1e-4

    def test_additive_invariance(self):
        rng = RngState(4)
        ln = LayerNorm.init(8, "double")
        x = rng.normal((4, 8), precision="double")
        y1, _ = layernorm_forward(ln, x)
        y2, _ = layernorm_forward(ln, Tensor(x.data + 11.0, "double"))
        np.testing.assert_allclose(y1.data, y2.data, atol=1e-9)

    def test_backward_matches_finite_differences(self):
        rng = RngState(5)
        ln = LayerNorm.init(5, "double")
        _bold(rng, ln)
        x = rng.normal((4, 5), precision="double")
        cot = rng.normal((4, 5), precision="double")
        _, cache = layernorm_forward(ln, x)
        dx, grads = layernorm_backward(ln, cache, cot)
        fd_x = finite_difference_grad(
            lambda xt: float((layernorm_forward(ln, xt)[0].data * cot.data).sum()), x)
        assert max_rel_error(dx.data, fd_x.data) < 1e-6
        for name, t in ln.named_params():
            base = t.data.copy()

            def loss_at(v, name=name):
                ln.set_param(name, v)
                out = float((layernorm_forward(ln, x)[0].data * cot.data).sum())
                ln.set_param(name, Tensor(base, "double"))
                return out

            fd = finite_difference_grad(loss_at, t)
            assert max_rel_error(grads[name].data, fd.data) < 1e-6

    def test_zero_extent_rejected(self):
        with pytest.raises(DimensionError):
            LayerNorm.init(0)


class TestGeluAndMlp2:
    def test_gelu_zero_fixed_point(self):
        y, _ = gelu_forward(T.zeros((3,), "double"))
        assert np.all(y.data == 0.0)

    def test_softmax_head_rows_sum_to_one(self):
        rng = RngState(6)
        m = Mlp2.init(rng, 5, 5, 5, "softmax", "double")
        _bold(rng, m)
        x = rng.normal((7, 5), precision="double")
        y, _ = mlp2_forward(m, x)
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_sigmoid_head_in_open_unit_interval(self):
        rng = RngState(7)
        m = Mlp2.init(rng, 5, 5, 5, "sigmoid", "double")
        _bold(rng, m)
        x = rng.normal((7, 5), precision="double")
        y, _ = mlp2_forward(m, x)
        assert np.all(y.data > 0) and np.all(y.data < 1)

    @pytest.mark.parametrize("final", ["none", "softmax", "sigmoid"])
    def test_backward_matches_finite_differences(self, final):
        rng = RngState(8)
        m = Mlp2.init(rng, 4, 6, 4, final, "double")
        _bold(rng, m)
        x = rng.normal((3, 4), precision="double")
        cot = rng.normal((3, 4), precision="double")
        _, cache = mlp2_forward(m, x)
        dx, grads = mlp2_backward(m, cache, cot)
        fd_x = finite_difference_grad(
            lambda xt: float((mlp2_forward(m, xt)[0].data * cot.data).sum()), x)
        assert max_rel_error(dx.data, fd_x.data) < 1e-6
        for name, t in m.named_params():
            base = t.data.copy()

            def loss_at(v, name=name):
                m.set_param(name, v)
                out = float((mlp2_forward(m, x)[0].data * cot.data).sum())
                m.set_param(name, Tensor(base, "double"))
                return out

            fd = finite_difference_grad(loss_at, t)
            err = np.abs(grads[name].data - fd.data)
            denom = np.maximum(np.maximum(np.abs(grads[name].data), np.abs(fd.data)), 1e-12)
            assert np.all((err / denom < 1e-6) | (err < 1e-8))

    def test_bad_final_activation(self):
        rng = RngState(0)
        with pytest.raises(ConfigError):
            Mlp2(Linear.init(rng, 2, 2), Linear.init(rng, 2, 2), "relu")

    def test_hidden_dim_chain_checked(self):
        rng = RngState(0)
        with pytest.raises(DimensionError):
            Mlp2(Linear.init(rng, 2, 3), Linear.init(rng, 4, 2), "none")


class TestDropPath:
    def test_eval_is_exact_identity(self):
        rng = RngState(9)
        x = rng.normal((4, 4), precision="double")
        y, _ = drop_path_forward(DropPathConfig(0.7, "eval"), x, rng)
        assert np.array_equal(y.data, x.data)

    def test_train_zero_rate_identity(self):
        rng = RngState(9)
        x = rng.normal((4, 4), precision="double")
        y, _ = drop_path_forward(DropPathConfig(0.0, "train"), x, rng)
        assert np.array_equal(y.data, x.data)

    def test_train_drops_or_scales(self):
        rng = RngState(10)
        x = T.ones((2, 2), "double")
        seen = set()
        for _ in range(50):
            y, _ = drop_path_forward(DropPathConfig(0.5, "train"), x, rng)
            seen.add(float(y.data[0, 0]))
        assert seen == {0.0, 2.0}

    def test_rate_validation(self):
        with pytest.raises(ConfigError):
            DropPathConfig(1.0, "train")


class TestParamRegistry:
    def test_named_params_and_set_param(self):
        rng = RngState(11)
        m = Mlp2.init(rng, 3, 4, 3, "none", "double")
        names = [n for n, _ in m.named_params()]
        assert names == ["first.weight", "first.bias", "second.weight", "second.bias"]
        new = T.ones((3, 4), "double")
        m.set_param("first.weight", new)
        assert np.array_equal(dict(m.named_params())["first.weight"].data, new.data)

    def test_unknown_param_rejected(self):
        m = Mlp2.init(RngState(0), 3, 4, 3)
        with pytest.raises(KeyError):
            m.set_param("third.weight", T.zeros((1,)))
