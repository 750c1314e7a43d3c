import numpy as np
import pytest

from rawcm import tensor as T
from rawcm.layers import BatchNorm1d, batchnorm1d
from rawcm.tensor import (ContractError, ShapeError, Tape, Tensor, backward,
                          tensor_new)


def conv1d_oracle(x, w, b, stride, padding, groups):
    """Independent direct-summation reference (plain triple loop)."""
    B, C_in, L = x.shape
    C_out, c_in_g, K = w.shape
    xp = np.zeros((B, C_in, L + 2 * padding))
    xp[:, :, padding:padding + L] = x
    L_out = (L + 2 * padding - K) // stride + 1
    out = np.zeros((B, C_out, L_out))
    out_per_group = C_out // groups
    for bi in range(B):
        for o in range(C_out):
            base = (o // out_per_group) * c_in_g
            for t in range(L_out):
                acc = 0.0 if b is None else b[o]
                for c in range(c_in_g):
                    for k in range(K):
                        acc += w[o, c, k] * xp[bi, base + c, t * stride + k]
                out[bi, o, t] = acc
    return out


class TestConv1d:
    def test_identity_kernel(self):
        x = tensor_new((1, 1, 4), "explicit", values=[5, 6, 7, 8])
        w = tensor_new((1, 1, 1), "explicit", values=[1])
        assert T.conv1d(x, w).data.reshape(-1).tolist() == [5, 6, 7, 8]

    def test_zero_kernel_leaves_bias(self):
        x = tensor_new((1, 1, 4), "uniform", seed=0)
        w = tensor_new((1, 1, 3), "zeros")
        b = tensor_new((1, 1, 1), "explicit", values=[3])
        assert T.conv1d(x, w, b).data.reshape(-1).tolist() == [3, 3]

    def test_padded_box_kernel(self):
        x = tensor_new((1, 1, 4), "explicit", values=[1, 2, 3, 4])
        w = tensor_new((1, 1, 3), "explicit", values=[1, 1, 1])
        out = T.conv1d(x, w, padding=1)
        assert out.data.reshape(-1).tolist() == [3, 6, 9, 7]

    def test_group_divisibility_error(self):
        x = tensor_new((1, 3, 8), "uniform", seed=1)
        w = tensor_new((2, 1, 3), "zeros")
        with pytest.raises(ShapeError):
            T.conv1d(x, w, groups=2)

    def test_kernel_longer_than_input(self):
        x = tensor_new((1, 1, 2), "uniform", seed=2)
        w = tensor_new((1, 1, 5), "zeros")
        with pytest.raises(ShapeError):
            T.conv1d(x, w)

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            B = int(rng.integers(1, 5))
            C_in = int(rng.integers(1, 5))
            groups = int(rng.choice([1, C_in]))
            C_out = int(rng.integers(1, 5)) * groups
            K = int(rng.integers(1, 6))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 3))
            L = int(rng.integers(max(1, K - 2 * padding), 17))
            x = rng.standard_normal((B, C_in, L))
            w = rng.standard_normal((C_out, C_in // groups, K))
            b = rng.standard_normal(C_out)
            got = T.conv1d(Tensor(x), Tensor(w), Tensor(b.reshape(1, -1, 1)),
                           stride=stride, padding=padding, groups=groups)
            want = conv1d_oracle(x, w, b, stride, padding, groups)
            assert np.max(np.abs(got.data - want)) < 1e-12


class TestLinear:
    def test_identity_map(self):
        x = tensor_new((1, 3, 1), "uniform", seed=3)
        w = Tensor(np.eye(3)[:, :, None])
        assert np.allclose(T.linear(x, w).data, x.data)

    def test_constant_map(self):
        x = tensor_new((2, 3, 1), "uniform", seed=4)
        w = tensor_new((2, 3, 1), "zeros")
        b = tensor_new((1, 2, 1), "explicit", values=[5, 7])
        out = T.linear(x, w, b)
        assert np.allclose(out.data, np.array([5.0, 7.0]).reshape(1, 2, 1))

    def test_hand_matrix_multiply(self):
        x = tensor_new((1, 2, 1), "explicit", values=[5, 6])
        w = tensor_new((2, 2, 1), "explicit", values=[1, 2, 3, 4])
        b = tensor_new((1, 2, 1), "explicit", values=[0, 1])
        assert T.linear(x, w, b).data.reshape(-1).tolist() == [17, 40]

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(tensor_new((1, 3, 1), "zeros"), tensor_new((2, 4, 1), "zeros"))


class TestBatchNorm:
    def test_eval_identity_statistics(self):
        x = tensor_new((1, 2, 3), "uniform", seed=5, dtype=np.float64)
        bn = BatchNorm1d(2, dtype=np.float64)
        out = bn(x, train=False)
        assert np.allclose(out.data, x.data / np.sqrt(1 + 1e-5), atol=1e-12)

    def test_train_constant_input_maps_to_shift(self):
        x = Tensor(np.full((2, 2, 3), 4.0))
        bn = BatchNorm1d(2)
        bn.shift.data[...] = np.array([1.0, -2.0]).reshape(1, 2, 1)
        out = bn(x, train=True)
        assert np.allclose(out.data[:, 0], 1.0, atol=1e-6)
        assert np.allclose(out.data[:, 1], -2.0, atol=1e-6)

    def test_train_hand_normalization(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 2).astype(np.float64))
        bn = BatchNorm1d(1, dtype=np.float64)
        out = bn(x, train=True)
        want = np.array([-1.0, 1.0]) / np.sqrt(1 + 1e-5)
        assert np.allclose(out.data.reshape(-1), want, atol=1e-12)

    def test_train_requires_two_values(self):
        bn = BatchNorm1d(1)
        with pytest.raises(ContractError):
            bn(tensor_new((1, 1, 1), "ones"), train=True)

    def test_normalizes_mean_and_variance(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 8)))
        bn = BatchNorm1d(3, dtype=np.float64)
        out = bn(x, train=True).data
        assert np.all(np.abs(out.mean(axis=(0, 2))) < 1e-6)
        assert np.all(np.abs(out.var(axis=(0, 2)) - 1.0) < 1e-5)

    def test_eval_mode_has_no_batch_coupling(self):
        bn = BatchNorm1d(2)
        bn.running_mean[:] = [0.5, -0.5]
        bn.running_var[:] = [2.0, 3.0]
        a = tensor_new((1, 2, 4), "uniform", seed=7)
        stacked = Tensor(np.concatenate([a.data, np.zeros((1, 2, 4), np.float32)]))
        alone = bn(a, train=False).data
        together = bn(stacked, train=False).data[:1]
        assert np.array_equal(alone, together)

    def test_running_variance_nonnegative(self):
        bn = BatchNorm1d(2)
        for seed in range(5):
            bn(tensor_new((2, 2, 6), "uniform", seed=seed), train=True)
        assert np.all(bn.running_var >= 0)


class TestSelu:
    def test_zero_fixed_point(self):
        assert T.selu(tensor_new((1, 1, 1), "zeros")).data.reshape(()) == 0.0

    def test_value_at_one(self):
        x = tensor_new((1, 1, 1), "explicit", values=[1.0], dtype=np.float64)
        assert T.selu(x).data.reshape(()) == pytest.approx(1.0507009873554805)

    def test_negative_asymptote(self):
        x = tensor_new((1, 1, 1), "explicit", values=[-100.0], dtype=np.float64)
        want = -1.0507009873554805 * 1.6732632423543772
        assert T.selu(x).data.reshape(()) == pytest.approx(want, abs=1e-12)
        assert want == pytest.approx(-1.7581, abs=1e-4)

    def test_continuity_at_zero(self):
        for v in (1e-12, -1e-12):
            x = tensor_new((1, 1, 1), "explicit", values=[v], dtype=np.float64)
            assert abs(T.selu(x).data.reshape(())) < 1e-11


class TestMaxPool:
    def test_full_window(self):
        x = tensor_new((1, 1, 9), "explicit", values=[1, 2, 3, 4, 5, 6, 7, 8, 9])
        assert T.maxpool1d(x, 9, 9).data.reshape(-1).tolist() == [9]

    def test_tie_gradient_goes_to_first_element(self):
        with Tape() as tape:
            x = Tensor(np.full((1, 1, 6), 2.0), requires_grad=True)
            backward(tape, T.sum_all(T.maxpool1d(x, 3, 3)))
            assert tape.grad(x).reshape(-1).tolist() == [1, 0, 0, 1, 0, 0]

    def test_two_windows(self):
        vals = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 7, 9, 3, 2, 3]
        x = tensor_new((1, 1, 18), "explicit", values=vals)
        assert T.maxpool1d(x, 9, 9).data.reshape(-1).tolist() == [9, 9]

    def test_window_max_property(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 20))
        out = T.maxpool1d(Tensor(x), 4, 4).data
        assert out.max() <= x.max()
        for t in range(out.shape[2]):
            assert np.array_equal(out[:, :, t], x[:, :, 4 * t:4 * t + 4].max(axis=2))

    def test_empty_output_error(self):
        with pytest.raises(ShapeError):
            T.maxpool1d(tensor_new((1, 1, 3), "ones"), 9, 9)


class TestGlobalAvgPool:
    def test_constant(self):
        x = Tensor(np.full((1, 2, 5), 3.5))
        assert np.allclose(T.global_avg_pool(x).data, 3.5)

    def test_mean(self):
        x = tensor_new((1, 1, 4), "explicit", values=[1, 2, 3, 4])
        assert T.global_avg_pool(x).data.reshape(()) == pytest.approx(2.5)

    def test_backward_is_one_over_length(self):
        with Tape() as tape:
            x = tensor_new((1, 2, 8), "uniform", seed=9, requires_grad=True)
            backward(tape, T.sum_all(T.global_avg_pool(x)))
            assert np.allclose(tape.grad(x), 1.0 / 8.0)


class TestSigmoid:
    def test_symmetry_point(self):
        assert T.sigmoid(tensor_new((1, 1, 1), "zeros")).data.reshape(()) == 0.5

    def test_odd_symmetry(self):
        x = tensor_new((1, 1, 7), "uniform", lo=-5, hi=5, seed=10, dtype=np.float64)
        neg = Tensor(-x.data)
        assert np.allclose(T.sigmoid(neg).data, 1.0 - T.sigmoid(x).data, atol=1e-12)

    def test_value_at_two(self):
        x = tensor_new((1, 1, 1), "explicit", values=[2.0], dtype=np.float64)
        assert T.sigmoid(x).data.reshape(()) == pytest.approx(0.8807970779778823,
                                                             abs=1e-15)

    def test_stable_at_large_inputs(self):
        x = tensor_new((1, 1, 2), "explicit", values=[100.0, -100.0],
                       dtype=np.float64)
        out = T.sigmoid(x).data.reshape(-1)
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-40)
