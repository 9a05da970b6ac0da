"""Tensor substrate: strict shapes, softmax/matmul oracles, DPTF format, RNG."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpx import tensor as T
from dpx.errors import DimensionError, DomainError, PrecisionError
from dpx.tensor import RngState, Tensor


class TestMatmul:
    def test_identity(self):
        rng = RngState(0)
        a = rng.normal((2, 2), precision="double")
        out = T.matmul(T.eye(2, "double"), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_example(self):
        a = Tensor([[1, 2], [3, 4]], "double")
        b = Tensor([[5], [6]], "double")
        np.testing.assert_array_equal(T.matmul(a, b).data, [[17], [39]])

    def test_shape_error_names_both_shapes(self):
        a = T.zeros((2, 3))
        b = T.zeros((4, 5))
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(a, b)

    def test_triple_loop_oracle_double(self):
        # independent oracle: explicit scalar triple loop
        rng = RngState(11)
        for _ in range(100):
            m, k, n = (int(rng.integers(1, 17)) for _ in range(3))
            a = rng.normal((m, k), precision="double")
            b = rng.normal((k, n), precision="double")
            ref = np.zeros((m, n))
            for i in range(m):
                for j in range(n):
                    acc = 0.0
                    for t in range(k):
                        acc += float(a.data[i, t]) * float(b.data[t, j])
                    ref[i, j] = acc
            np.testing.assert_allclose(T.matmul(a, b).data, ref, atol=1e-12)

    def test_triple_loop_oracle_single(self):
        rng = RngState(12)
        for _ in range(20):
            m, k, n = (int(rng.integers(1, 17)) for _ in range(3))
            a = rng.normal((m, k), precision="single")
            b = rng.normal((k, n), precision="single")
            ref = a.data.astype(np.float64) @ b.data.astype(np.float64)
            np.testing.assert_allclose(T.matmul(a, b).data, ref, atol=1e-5)

    def test_transpose_identity(self):
        rng = RngState(3)
        a = rng.normal((4, 6), precision="double")
        b = rng.normal((6, 3), precision="double")
        lhs = T.transpose(T.matmul(a, b))
        rhs = T.matmul(T.transpose(b), T.transpose(a))
        np.testing.assert_allclose(lhs.data, rhs.data, atol=1e-12)

    def test_precision_mismatch(self):
        with pytest.raises(PrecisionError):
            T.matmul(T.zeros((2, 2), "single"), T.zeros((2, 2), "double"))


class TestSoftmax:
    def test_uniform_input(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0], "double"), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_singleton_axis(self):
        out = T.softmax(T.zeros((3, 1), "double"), axis=1)
        np.testing.assert_array_equal(out.data, np.ones((3, 1)))

    def test_direct_formula_oracle(self):
        rng = RngState(5)
        x = rng.normal((4, 6), precision="double")
        ref = np.exp(x.data - x.data.max(axis=1, keepdims=True))
        ref = ref / ref.sum(axis=1, keepdims=True)
        assert np.max(np.abs(T.softmax(x, axis=1).data - ref)) < 1e-12

    def test_rows_sum_to_one_1000(self):
        rng = RngState(6)
        for prec, tol in (("single", 1e-6), ("double", 1e-12)):
            worst = 0.0
            for _ in range(500):
                x = rng.normal((3, 7), std=4.0, precision=prec)
                s = T.softmax(x, axis=-1)
                worst = max(worst, float(np.max(np.abs(s.data.sum(-1) - 1))))
            assert worst < tol

    def test_inf_input_rejected(self):
        bad = Tensor(np.array([1.0, np.inf]), "double")
        with pytest.raises(DomainError):
            T.softmax(bad, axis=0)

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            T.softmax(T.zeros((2, 2)), axis=5)

    @given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, seed, c):
        rng = RngState(seed)
        x = rng.normal((3, 5), precision="double")
        shifted = Tensor(x.data + c, "double")
        np.testing.assert_allclose(
            T.softmax(x, axis=-1).data, T.softmax(shifted, axis=-1).data, atol=1e-12)


class TestElementwise:
    def test_self_subtraction_is_zero(self):
        rng = RngState(1)
        a = rng.normal((3, 4))
        assert np.all(T.sub(a, a).data == 0)

    def test_mul_scalar_loop_oracle(self):
        rng = RngState(2)
        a = rng.normal((3, 4), precision="double")
        b = rng.normal((3, 4), precision="double")
        out = T.mul(a, b)
        for i in range(3):
            for j in range(4):
                assert out.data[i, j] == a.data[i, j] * b.data[i, j]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(T.zeros((2, 3)), T.zeros((3, 2)))

    def test_concat_slice_roundtrip(self):
        rng = RngState(4)
        a = rng.normal((2, 3), precision="double")
        b = rng.normal((2, 5), precision="double")
        cat = T.concat([a, b], axis=1)
        assert cat.shape == (2, 8)
        np.testing.assert_array_equal(T.slice_axis(cat, 1, 0, 3).data, a.data)
        np.testing.assert_array_equal(T.slice_axis(cat, 1, 3, 8).data, b.data)

    def test_concat_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat([T.zeros((2, 3)), T.zeros((3, 3))], axis=1)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 5),
           st.integers(1, 5))
    @settings(max_examples=30, deadline=None)
    def test_concat_slice_roundtrip_property(self, seed, rows, c1, c2):
        rng = RngState(seed)
        a = rng.normal((rows, c1), precision="double")
        b = rng.normal((rows, c2), precision="double")
        cat = T.concat([a, b], axis=1)
        assert np.array_equal(T.slice_axis(cat, 1, 0, c1).data, a.data)
        assert np.array_equal(T.slice_axis(cat, 1, c1, c1 + c2).data, b.data)

    def test_reshape_validates_size(self):
        with pytest.raises(DimensionError):
            T.reshape(T.zeros((2, 3)), (4, 2))


class TestDeterminismAndImmutability:
    def test_bit_identical_pipeline(self):
        def run():
            rng = RngState(77)
            a = rng.normal((5, 5), precision="double")
            b = rng.normal((5, 5), precision="double")
            return T.softmax(T.matmul(a, b), axis=-1).data

        r1, r2 = run(), run()
        assert np.array_equal(r1, r2)

    def test_tensor_is_immutable(self):
        t = T.zeros((2, 2))
        with pytest.raises(ValueError):
            t.data[0, 0] = 1.0
        with pytest.raises(AttributeError):
            t.data = np.ones((2, 2))


class TestRngState:
    def test_same_seed_bitwise(self):
        a = RngState(123).normal((4, 4), precision="double")
        b = RngState(123).normal((4, 4), precision="double")
        assert np.array_equal(a.data, b.data)

    def test_spawn_streams_independent_and_deterministic(self):
        c1 = RngState(9).spawn(2)
        c2 = RngState(9).spawn(2)
        assert np.array_equal(c1[0].normal((3,)).data, c2[0].normal((3,)).data)
        assert not np.array_equal(c1[0].normal((3,)).data, c1[1].normal((3,)).data)

    def test_trunc_normal_bounds(self):
        vals = RngState(5).trunc_normal((1000,), std=0.02, precision="double")
        assert np.all(np.abs(vals.data) <= 0.04 + 1e-12)

    def test_algorithm_identifier(self):
        assert "philox" in RngState(0).algorithm


class TestDptfFormat:
    def test_header_layout(self, tmp_path):
        t = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), "single")
        path = tmp_path / "t.dptf"
        T.save_dptf(path, t)
        raw = path.read_bytes()
        assert raw[:4] == b"DPTF"
        assert raw[4] == 1          # version
        assert raw[5] == 0          # single precision
        assert raw[6] == 2          # rank
        assert int.from_bytes(raw[7:15], "little") == 2
        assert int.from_bytes(raw[15:23], "little") == 3
        assert raw[23:] == t.data.astype("<f4").tobytes()

    @pytest.mark.parametrize("precision,code", [("single", 0), ("double", 1)])
    def test_roundtrip_floats(self, tmp_path, precision, code):
        rng = RngState(8)
        t = rng.normal((3, 2, 4), precision=precision)
        path = tmp_path / "x.dptf"
        T.save_dptf(path, t)
        back = T.load_dptf(path)
        assert back.precision == precision
        assert path.read_bytes()[5] == code
        assert np.array_equal(back.data, t.data)

    def test_roundtrip_int32_labels(self, tmp_path):
        labels = Tensor(np.arange(12, dtype=np.int32).reshape(3, 4), "int32")
        path = tmp_path / "labels.dptf"
        T.save_dptf(path, labels)
        raw = path.read_bytes()
        assert raw[5] == 2
        back = T.load_dptf(path)
        assert back.precision == "int32"
        assert np.array_equal(back.data, labels.data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.dptf"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(DomainError):
            T.load_dptf(path)

    def test_truncated_payload_rejected(self, tmp_path):
        t = T.ones((4, 4))
        path = tmp_path / "t.dptf"
        T.save_dptf(path, t)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(DomainError):
            T.load_dptf(path)


class TestFlopMeter:
    def test_matmul_counts(self):
        meter = T.FlopMeter()
        with T.use_meter(meter):
            T.matmul(T.zeros((3, 4)), T.zeros((4, 5)))
        assert meter.muls == 3 * 4 * 5
        assert meter.adds == 3 * 4 * 5
        assert meter.flops == 2 * 3 * 4 * 5

    def test_softmax_counts(self):
        meter = T.FlopMeter()
        with T.use_meter(meter):
            T.softmax(T.zeros((2, 5)), axis=-1)
        assert meter.exps == 10 and meter.divs == 10 and meter.adds == 8

    def test_masked_softmax_counts_unmasked_only(self):
        meter = T.FlopMeter()
        x = T.zeros((2, 4))
        mask = np.array([[True, True, False, False], [True, False, False, False]])
        with T.use_meter(meter):
            out = T.masked_softmax(x, mask, axis=-1)
        assert meter.exps == 3 and meter.divs == 3 and meter.adds == 1
        assert np.all(out.data[~mask] == 0.0)
        np.testing.assert_allclose(out.data.sum(-1), [1.0, 1.0])

    def test_fully_masked_row_yields_zeros(self):
        x = T.zeros((1, 3))
        out = T.masked_softmax(x, np.zeros((1, 3), dtype=bool), axis=-1)
        assert np.all(out.data == 0.0)

    def test_meter_inactive_outside_context(self):
        meter = T.FlopMeter()
        with T.use_meter(meter):
            pass
        T.matmul(T.zeros((2, 2)), T.zeros((2, 2)))
        assert meter.flops == 0
