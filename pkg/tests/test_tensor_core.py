"""
Tests for the numpy autodiff core.
"""
import os
import sys
import threading
import unittest

import numpy as np

# Get the project root directory
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
# Add the project root to the Python path
sys.path.insert(0, project_root)

from src.tensor_core import (ParameterSet, Tensor, TensorError, adam_step, backward, bilstm, concat,
                             conv1d, conv2d, cosine_similarity_matrix, embedding_lookup, gradient_check,
                             log, logistic, matmul, max_over_time, max_pool2d, mean, mul, no_grad,
                             reset_tape, softmax, softplus, stack, tanh, tape_size, transpose, tsum)

TOLERANCE = 1e-4


def make_params(seed=0, **shapes):
    rng = np.random.RandomState(seed)
    params = ParameterSet()
    for name, shape in shapes.items():
        params.add(name, rng.normal(0.0, 0.7, size=shape))
    return params


class TestGradients(unittest.TestCase):
    """Backward gradients agree with finite differences."""

    def tearDown(self):
        reset_tape()

    def assertGradientsMatch(self, build_loss, params):
        self.assertLess(gradient_check(build_loss, params), TOLERANCE)

    def test_elementwise_and_matmul(self):
        """Arithmetic, broadcasting and matmul."""
        params = make_params(a=(3, 4), b=(4,), w=(4, 2))

        def build(p):
            x = tanh(p["a"] * p["b"] + 0.3) / (softplus(p["a"]) + 1.0) - p["b"]
            return tsum(logistic(matmul(x, p["w"])))

        self.assertGradientsMatch(build, params)

    def test_reductions_and_shapes(self):
        """mean, concat, stack, transpose, getitem and log."""
        params = make_params(a=(2, 3), b=(2, 3))

        def build(p):
            joined = concat([p["a"], p["b"]], axis=-1)
            stacked = stack([p["a"], p["b"]], axis=0)
            positive = softplus(transpose(joined)) + 0.1
            return mean(log(positive)) + tsum(stacked[1, :, 1:] * stacked[0, :, :2])

        self.assertGradientsMatch(build, params)

    def test_masked_softmax(self):
        """Softmax gradient with some positions masked out."""
        params = make_params(a=(2, 5), target=(2, 5))
        mask = np.array([[1, 1, 0, 1, 0], [0, 1, 1, 1, 1]], dtype=bool)

        def build(p):
            return tsum(softmax(p["a"], mask=mask) * p["target"])

        self.assertGradientsMatch(build, params)

    def test_embedding_lookup_repeated_ids(self):
        """Repeated ids accumulate into the same table row."""
        params = make_params(table=(5, 3))
        ids = np.array([[1, 1, 4], [0, 1, 2]])

        def build(p):
            return tsum(tanh(embedding_lookup(p["table"], ids)))

        self.assertGradientsMatch(build, params)

    def test_conv1d_and_max_over_time(self):
        """Windowed convolution followed by length-aware max pooling."""
        params = make_params(x=(2, 5, 3), w=(2, 3, 4), b=(4,))
        lengths = np.array([5, 3])

        def build(p):
            return tsum(max_over_time(tanh(conv1d(p["x"], p["w"], p["b"])), lengths))

        self.assertGradientsMatch(build, params)

    def test_conv2d_and_pooling(self):
        """Padded 2-D convolution with ceil-mode pooling."""
        params = make_params(x=(1, 2, 5, 4), k=(3, 2, 3, 3), b=(3,))

        def build(p):
            return tsum(tanh(max_pool2d(conv2d(p["x"], p["k"], p["b"], padding=1), 2)))

        self.assertGradientsMatch(build, params)

    def test_cosine_similarity(self):
        """Batched cosine similarity matrix."""
        params = make_params(a=(2, 3, 4), b=(2, 2, 4))

        def build(p):
            return tsum(tanh(cosine_similarity_matrix(p["a"], p["b"]) * 2.0))

        self.assertGradientsMatch(build, params)

    def test_bilstm(self):
        """Bidirectional LSTM over ragged lengths."""
        params = make_params(x=(2, 4, 3), fx=(3, 8), fh=(2, 8), fb=(8,), bx=(3, 8), bh=(2, 8), bb=(8,))
        lengths = np.array([4, 2])

        def build(p):
            out = bilstm(p["x"], lengths, (p["fx"], p["fh"], p["fb"]), (p["bx"], p["bh"], p["bb"]))
            return tsum(out * out)

        self.assertGradientsMatch(build, params)

    def test_sampled_check_on_large_sets(self):
        """Large parameter sets are checked on a random sample."""
        params = make_params(w=(120, 100))

        def build(p):
            return tsum(tanh(p["w"]))

        self.assertLess(gradient_check(build, params, max_coordinates=1000, sample_fraction=0.01), TOLERANCE)


class TestForwardValues(unittest.TestCase):
    """Forward results against direct numpy computations."""

    def test_softmax_masking(self):
        """Masked positions get zero probability and fully masked rows are zero."""
        x = Tensor(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        mask = np.array([[True, False, True], [False, False, False]])
        out = softmax(x, mask=mask).data
        expected = np.exp([1.0, 3.0]) / np.exp([1.0, 3.0]).sum()
        np.testing.assert_allclose(out[0], [expected[0], 0.0, expected[1]])
        np.testing.assert_array_equal(out[1], np.zeros(3))

    def test_softmax_rejects_bad_mask(self):
        """A mask that cannot broadcast is a TensorError."""
        with self.assertRaises(TensorError):
            softmax(Tensor(np.ones((2, 3))), mask=np.ones((4,), dtype=bool))

    def test_cosine_matches_double_loop(self):
        """Every entry is the cosine of the two rows, zero rows give 0."""
        rng = np.random.RandomState(1)
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(5, 3))
        b[2] = 0.0
        out = cosine_similarity_matrix(Tensor(a), Tensor(b)).data
        for i in range(4):
            for j in range(5):
                norm = np.linalg.norm(a[i]) * np.linalg.norm(b[j])
                expected = 0.0 if norm == 0 else a[i] @ b[j] / norm
                self.assertAlmostEqual(out[i, j], expected)

    def test_bilstm_padding_is_inert(self):
        """Values past the valid length do not change valid outputs and output zeros."""
        params = make_params(seed=2, fx=(3, 8), fh=(2, 8), fb=(8,), bx=(3, 8), bh=(2, 8), bb=(8,))
        weights = ((params["fx"], params["fh"], params["fb"]), (params["bx"], params["bh"], params["bb"]))
        rng = np.random.RandomState(3)
        x = rng.normal(size=(1, 5, 3))
        noisy = x.copy()
        noisy[0, 3:] = rng.normal(size=(2, 3)) * 10
        with no_grad():
            clean_out = bilstm(Tensor(x), np.array([3]), *weights).data
            noisy_out = bilstm(Tensor(noisy), np.array([3]), *weights).data
        np.testing.assert_allclose(clean_out, noisy_out)
        np.testing.assert_array_equal(clean_out[0, 3:], np.zeros((2, 4)))

    def test_max_pool_ceil_mode(self):
        """Odd sizes round up."""
        x = Tensor(np.arange(15.0).reshape(1, 1, 3, 5))
        out = max_pool2d(x, 2).data
        self.assertEqual(out.shape, (1, 1, 2, 3))
        np.testing.assert_array_equal(out[0, 0], [[6, 8, 9], [11, 13, 14]])

    def test_conv2d_shape_errors(self):
        """Mismatched channels and oversized kernels are rejected."""
        with self.assertRaises(TensorError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))
        with self.assertRaises(TensorError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestTape(unittest.TestCase):
    """Tape bookkeeping and optimizer."""

    def tearDown(self):
        reset_tape()

    def test_backward_needs_scalar(self):
        """Only scalar losses can be differentiated."""
        with self.assertRaises(TensorError):
            backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_no_grad_records_nothing(self):
        """Ops inside no_grad leave the tape untouched."""
        reset_tape()
        w = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = tsum(w * 3.0)
        self.assertEqual(tape_size(), 0)
        self.assertFalse(out.requires_grad)

    def test_backward_clears_tape(self):
        """The tape is empty after backward."""
        w = Tensor(np.ones(3), requires_grad=True)
        backward(tsum(mul(w, w)))
        self.assertEqual(tape_size(), 0)
        np.testing.assert_array_equal(w.grad, [2.0, 2.0, 2.0])

    def test_tape_is_thread_local(self):
        """Another thread starts with its own empty tape."""
        w = Tensor(np.ones(2), requires_grad=True)
        tsum(w * 2.0)
        sizes = []
        thread = threading.Thread(target=lambda: sizes.append(tape_size()))
        thread.start()
        thread.join()
        self.assertEqual(sizes, [0])
        self.assertGreater(tape_size(), 0)

    def test_adam_descends(self):
        """Adam reduces a convex quadratic."""
        params = make_params(w=(4,))
        losses = []
        for _ in range(50):
            params.zero_grad()
            loss = tsum(params["w"] * params["w"])
            losses.append(loss.item())
            backward(loss)
            adam_step(params, lr=0.05)
        self.assertLess(losses[-1], losses[0] * 0.5)
        self.assertEqual(params.adam_t, 50)

    def test_adam_requires_gradients(self):
        """A trainable parameter without a gradient is an error."""
        with self.assertRaises(TensorError):
            adam_step(make_params(w=(2,)))

    def test_snapshot_round_trip(self):
        """Snapshots restore values and reject shape changes."""
        params = make_params(w=(2, 2))
        saved = params.snapshot()
        params["w"].data = params["w"].data + 1.0
        params.load_snapshot(saved)
        np.testing.assert_array_equal(params["w"].data, saved["w"])
        with self.assertRaises(TensorError):
            params.load_snapshot({"w": np.zeros(3)})


if __name__ == '__main__':
    unittest.main()
