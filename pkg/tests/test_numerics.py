import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmdistill.errors import ContractError, DimensionError, DomainError, InputTooShortError
from xmdistill.numerics import (
    GradTape,
    SeededRng,
    Tensor,
    backward,
    conv1d,
    finite_diff_check,
    gelu,
    layer_norm,
    matmul,
    reduce_mean,
    sin,
    softmax,
    stack,
    transpose,
)
from xmdistill.numerics import _kernels_py, kernels


def T(x):
    return Tensor(x)


class TestMatmul:
    def test_identity(self):
        out = matmul(T(np.eye(2)), T([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_product(self):
        out = matmul(T([[1, 2], [3, 4]]), T([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_empty_inner_dimension(self):
        out = matmul(T(np.zeros((1, 0))), T(np.zeros((0, 1))))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))

    def test_associative_random_8x8(self):
        rng = SeededRng(7)
        a, b, c = (T(rng.normal(size=(8, 8))) for _ in range(3))
        left = matmul(matmul(a, b), c).data
        right = matmul(a, matmul(b, c)).data
        assert np.max(np.abs(left - right)) <= 1e-9 * np.max(np.abs(left))


class TestConv1d:
    def test_adjacent_sums(self):
        out = conv1d(T([[1, 2, 3]]), T([[[1, 1]]]), 1)
        np.testing.assert_array_equal(out.data, [[3, 5]])

    def test_single_window(self):
        out = conv1d(T([[1, 2, 3]]), T([[[1, 1]]]), 2)
        np.testing.assert_array_equal(out.data, [[3]])

    def test_hand_cross_correlation(self):
        out = conv1d(T([[1, 0, -1, 2]]), T([[[2, 1]]]), 1)
        np.testing.assert_array_equal(out.data, [[2, -1, 0]])

    def test_too_short(self):
        with pytest.raises(InputTooShortError):
            conv1d(T([[1, 2]]), T([[[1, 1, 1]]]), 1)

    @given(st.integers(1, 60), st.integers(1, 8), st.integers(1, 5))
    @settings(max_examples=60, deadline=None)
    def test_output_length_formula(self, length, k, stride):
        x = T(np.ones((2, length)))
        w = T(np.ones((3, 2, k)))
        if length < k:
            with pytest.raises(InputTooShortError):
                conv1d(x, w, stride)
        else:
            assert conv1d(x, w, stride).shape == (3, (length - k) // stride + 1)

    def test_matches_brute_force(self):
        rng = SeededRng(3)
        x = rng.normal(size=(3, 23))
        w = rng.normal(size=(4, 3, 5))
        stride = 3
        n_out = (23 - 5) // stride + 1
        expect = np.zeros((4, n_out))
        for o in range(4):
            for t in range(n_out):
                expect[o, t] = sum(w[o, c, j] * x[c, t * stride + j] for c in range(3) for j in range(5))
        np.testing.assert_allclose(conv1d(T(x), T(w), stride).data, expect, rtol=1e-12, atol=1e-12)


class TestLayerNorm:
    def test_constant_input(self):
        out = layer_norm(T([5, 5, 5]), np.ones(3), np.zeros(3))
        np.testing.assert_array_equal(out.data, [0, 0, 0])

    def test_two_values(self):
        out = layer_norm(T([1, 3]), np.ones(2), np.zeros(2), eps=0.0)
        np.testing.assert_allclose(out.data, [-1, 1], atol=1e-15)

    def test_shift_after_normalization(self):
        out = layer_norm(T([1, 3]), np.ones(2), np.array([10.0, 10.0]), eps=0.0)
        np.testing.assert_allclose(out.data, [9, 11], atol=1e-14)

    def test_constant_row_without_eps_is_domain_error(self):
        with pytest.raises(DomainError):
            layer_norm(T([2, 2]), np.ones(2), np.zeros(2), eps=0.0)

    def test_zero_mean_rows(self):
        x = SeededRng(11).normal(size=(6, 9)) * 5 + 3
        out = layer_norm(T(x), np.ones(9), np.zeros(9), eps=0.0).data
        assert np.max(np.abs(out.mean(axis=1))) <= 1e-12


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax(T([0, 0])).data, [0.5, 0.5])

    def test_log_weights(self):
        np.testing.assert_allclose(softmax(T([math.log(1), math.log(3)])).data, [0.25, 0.75], rtol=1e-15)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-50, 50))
    @settings(max_examples=100, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, xs, c):
        x = np.array(xs)
        y = softmax(T(x)).data
        assert abs(y.sum() - 1.0) <= 1e-12
        assert np.max(np.abs(softmax(T(x + c)).data - y)) <= 1e-12

    def test_large_values_stable(self):
        y = softmax(T([1000.0, 1000.0])).data
        np.testing.assert_allclose(y, [0.5, 0.5])


class TestGelu:
    def test_zero(self):
        assert gelu(T([0.0])).data[0] == 0.0

    def test_one_against_erf(self):
        expect = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert abs(gelu(T([1.0])).data[0] - expect) < 1e-15
        assert abs(expect - 0.841345) < 1e-6

    def test_tail(self):
        assert abs(gelu(T([-10.0])).data[0]) < 1e-9


class TestReduceMean:
    def test_time_axis(self):
        np.testing.assert_array_equal(reduce_mean(T([[1, 3], [3, 5]]), 0).data, [2, 4])

    def test_single_step(self):
        np.testing.assert_array_equal(reduce_mean(T([[7, -1]]), 0).data, [7, -1])

    def test_three_steps(self):
        np.testing.assert_array_equal(reduce_mean(T([[1, 1], [2, 2], [6, 6]]), 0).data, [3, 3])

    def test_empty_axis(self):
        with pytest.raises(DomainError):
            reduce_mean(T(np.zeros((0, 2))), 0)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        with GradTape() as tape:
            loss = (x * x).sum()
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[x], [2.0, -4.0])

    def test_constant_loss_gives_empty_map(self):
        with GradTape() as tape:
            loss = (T([1.0, 2.0]) * 3.0).sum()
        assert backward(tape, loss) == {}

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            backward(tape, y)

    def test_tape_consumed(self):
        x = Tensor([1.0], requires_grad=True)
        with GradTape() as tape:
            loss = (x * x).sum()
        backward(tape, loss)
        with pytest.raises(ContractError):
            backward(tape, loss)

    def test_untracked_inputs_absent(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = T([3.0, 4.0])
        with GradTape() as tape:
            loss = (x * c).sum()
        grads = backward(tape, loss)
        assert c not in grads and x in grads

    def test_no_recording_without_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        assert not y.tracked

    def test_reused_input_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with GradTape() as tape:
            loss = (x * x * x).sum()
        assert backward(tape, loss)[x][0] == pytest.approx(27.0)

    def test_composed_chain_matches_finite_differences(self):
        rng = SeededRng(5)
        w = rng.normal(size=(3, 2, 4))
        gain, bias = rng.normal(size=3), rng.normal(size=3)
        probe = rng.normal(size=(5, 3))

        def f(x):
            h = transpose(conv1d(x, w, 2))
            h = layer_norm(h, gain, bias)
            return (softmax(h) * probe).sum()

        assert finite_diff_check(f, rng.normal(size=(2, 13))) <= 1e-4


class TestFiniteDiffCheck:
    def test_square(self):
        assert finite_diff_check(lambda x: (x * x).sum(), np.array([1.0]), h=1e-5) < 1e-6

    def test_sin_against_cos(self):
        x = SeededRng(1).normal(size=10)
        assert finite_diff_check(lambda t: sin(t).sum(), x) < 1e-4
        # independent analytic oracle for the tape gradient
        leaf = Tensor(x, requires_grad=True)
        with GradTape() as tape:
            loss = sin(leaf).sum()
        np.testing.assert_allclose(backward(tape, loss)[leaf], np.cos(x), rtol=1e-14)

    @pytest.mark.parametrize("h", [0.25, 0.5, 1.0, 2.0, 8.0])
    def test_linear_exact_for_any_step(self, h):
        c = np.array([2.0, -3.0, 0.5])
        assert finite_diff_check(lambda t: (t * c).sum(), np.array([1.0, 2.0, -4.0]), h=h) < 1e-10

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda t: t.sum(), np.ones(2), h=0.0)


PRIMITIVES = {
    "matmul": lambda x, r: (matmul(x, r["b"]) * r["p"]).sum(),
    "conv1d": lambda x, r: (conv1d(x, r["w"], 2) * r["pc"]).sum(),
    "layer_norm": lambda x, r: (layer_norm(x, r["g"], r["bias"]) * r["p4"]).sum(),
    "softmax": lambda x, r: (softmax(x) * r["p4"]).sum(),
    "gelu": lambda x, r: (gelu(x) * r["p4"]).sum(),
    "reduce_mean": lambda x, r: (reduce_mean(x, 0) * r["p4"][0]).sum(),
    "stack": lambda x, r: (stack([x, x * x]) * r["p4"]).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients(name, seed):
    rng = SeededRng(100 + seed)
    r = {
        "b": rng.normal(size=(4, 3)),
        "p": rng.normal(size=(3, 3)),
        "w": rng.normal(size=(2, 3, 3)),
        "pc": rng.normal(size=(2, 1)),
        "g": rng.normal(size=4),
        "bias": rng.normal(size=4),
        "p4": rng.normal(size=(3, 4)),
    }
    x = rng.normal(size=(3, 4))
    assert finite_diff_check(lambda t: PRIMITIVES[name](t, r), x) <= 1e-4


class TestKernelBackends:
    """The compiled kernels must agree with the numpy reference."""

    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_active_backend_named(self):
        assert kernels.BACKEND in ("compiled", "python")

    @pytest.mark.parametrize("shape", [(1, 40, 3, 5, 2), (4, 31, 6, 3, 1), (2, 9, 2, 9, 4)])
    def test_conv(self, shape):
        c_in, length, c_out, k, stride = shape
        x = self.rng.normal(size=(c_in, length))
        w = self.rng.normal(size=(c_out, c_in, k))
        out = kernels.conv1d_forward(x, w, stride)
        np.testing.assert_allclose(out, _kernels_py.conv1d_forward(x, w, stride), atol=1e-12)
        g = self.rng.normal(size=out.shape)
        for a, b in zip(kernels.conv1d_backward(x, w, g, stride), _kernels_py.conv1d_backward(x, w, g, stride)):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_elementwise_and_norm(self):
        x = self.rng.normal(size=(7, 5))
        g = self.rng.normal(size=(7, 5))
        gain, bias = self.rng.normal(size=5), self.rng.normal(size=5)
        np.testing.assert_allclose(kernels.gelu_forward(x), _kernels_py.gelu_forward(x), atol=1e-14)
        np.testing.assert_allclose(kernels.gelu_backward(x, g), _kernels_py.gelu_backward(x, g), atol=1e-14)
        fa = kernels.layer_norm_forward(x, gain, bias, 1e-5)
        fb = _kernels_py.layer_norm_forward(x, gain, bias, 1e-5)
        for a, b in zip(fa, fb):
            np.testing.assert_allclose(a, b, atol=1e-12)
        for a, b in zip(kernels.layer_norm_backward(g, fa[1], fa[2], gain),
                        _kernels_py.layer_norm_backward(g, fb[1], fb[2], gain)):
            np.testing.assert_allclose(a, b, atol=1e-12)
        y = _kernels_py.softmax_forward(x)
        np.testing.assert_allclose(kernels.softmax_backward(y, g), _kernels_py.softmax_backward(y, g), atol=1e-14)

    def test_compiled_kernels_not_dispatched_still_agree(self):
        # gelu backward and softmax forward are routed to numpy, but the compiled versions are kept correct
        compiled = pytest.importorskip("xmdistill.numerics._kernels")
        x = self.rng.normal(size=(7, 5)) * 3
        g = self.rng.normal(size=(7, 5))
        np.testing.assert_allclose(compiled.gelu_backward(x, g), _kernels_py.gelu_backward(x, g), atol=1e-14)
        np.testing.assert_allclose(compiled.softmax_forward(x), _kernels_py.softmax_forward(x), atol=1e-15)


class TestTensor:
    def test_rejects_nan(self):
        with pytest.raises(DomainError):
            Tensor([1.0, float("nan")])

    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a, b = SeededRng(42), SeededRng(42)
        np.testing.assert_array_equal(a.normal(size=20), b.normal(size=20))

    def test_known_stream_prefix(self):
        # frozen values: guards the documented algorithm against silent changes
        draws = SeededRng(0).integers(0, 1_000_000, size=4).tolist()
        assert draws == FROZEN_PHILOX_DRAWS

    def test_children_independent_of_parent_draws(self):
        a = SeededRng(3)
        a.normal(size=100)
        np.testing.assert_array_equal(a.child(1).normal(size=5), SeededRng(3, 1).normal(size=5))


FROZEN_PHILOX_DRAWS = [135622, 14067, 937732, 257767]
