import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from app.core.codebook import Codebook, pq_decode, pq_encode, reconstruct
from app.core.descriptor_store import DescriptorSet
from app.core.dpq_encoder import encode_backward, encode_forward, soft_assign, soft_reconstruct
from app.core.errors import DimensionError, StateError
from app.core.numerics import finite_diff_check


def _random_instance(rng, n=5, M=2, K=3, sub=2):
    codebook = Codebook(centroids=rng.normal(size=(M, K, sub)))
    x = rng.normal(size=(n, M * sub))
    g = rng.normal(size=(n, M * sub))
    return codebook, x, g


class TestForward:
    def test_output_is_hard_reconstruction(self, small_codebook):
        x = np.random.default_rng(0).normal(size=(10_000, small_codebook.dim))
        fwd = encode_forward(x, small_codebook)
        hard = pq_decode(small_codebook, pq_encode(small_codebook, DescriptorSet(descriptors=x)))
        assert_array_equal(fwd.output, hard.descriptors)

    def test_soft_assign_is_a_distribution(self, rng):
        weights = soft_assign(rng.normal(size=3), rng.normal(size=(6, 3)), tau=0.05)
        assert weights.shape == (6,)
        assert weights.sum() == pytest.approx(1.0)
        assert np.all(weights >= 0)

    def test_small_tau_approaches_hard(self, small_set, small_codebook):
        x = small_set.descriptors[:50]
        soft = soft_reconstruct(x, small_codebook, tau=1e-6)
        assert_allclose(soft, encode_forward(x, small_codebook).output, atol=1e-8)

    def test_tau_must_be_positive(self, small_codebook):
        with pytest.raises(ValidationError):
            encode_forward(np.zeros((1, small_codebook.dim)), small_codebook, tau=0.0)

    def test_dimension_mismatch(self, small_codebook):
        with pytest.raises(DimensionError):
            encode_forward(np.zeros((2, 5)), small_codebook)


class TestBackward:
    def test_centroid_gradient_matches_finite_differences(self, rng):
        for _ in range(20):
            codebook, x, g = _random_instance(rng)
            grad_c, _ = encode_backward(encode_forward(x, codebook, tau=0.5), g)

            def f(c):
                return float(np.sum(g * soft_reconstruct(x, Codebook(centroids=c), tau=0.5)))

            assert finite_diff_check(f, codebook.centroids, grad_c, floor=1e-3) < 1e-4

    def test_input_gradient_matches_finite_differences(self, rng):
        for _ in range(20):
            codebook, x, g = _random_instance(rng)
            _, grad_x = encode_backward(encode_forward(x, codebook, tau=0.5), g)

            def f(z):
                return float(np.sum(g * soft_reconstruct(z, codebook, tau=0.5)))

            assert finite_diff_check(f, x, grad_x, floor=1e-3) < 1e-4

    def test_needs_cache(self, small_set, small_codebook):
        fwd = encode_forward(small_set.descriptors[:4], small_codebook, keep_cache=False)
        with pytest.raises(StateError):
            encode_backward(fwd, np.zeros((4, small_codebook.dim)))

    def test_zero_gradient_in_gives_zero_out(self, rng):
        codebook, x, _ = _random_instance(rng)
        grad_c, grad_x = encode_backward(encode_forward(x, codebook), np.zeros_like(x))
        assert not grad_c.any() and not grad_x.any()

    def test_zero_distance_has_finite_gradients(self, rng):
        codebook, _, g = _random_instance(rng, n=4)
        x = reconstruct(np.zeros((4, 2), dtype=np.int64), codebook)
        with np.errstate(divide="raise", invalid="raise"):
            fwd = encode_forward(x, codebook, tau=0.5)
            grad_c, grad_x = encode_backward(fwd, g)
        assert np.any(fwd.distances == 0.0)
        assert np.all(np.isfinite(grad_c)) and np.all(np.isfinite(grad_x))

    def test_single_centroid_passes_gradient_through(self, rng):
        codebook, x, g = _random_instance(rng, n=1, K=1)
        grad_c, grad_x = encode_backward(encode_forward(x, codebook), g)
        assert_allclose(grad_c[:, 0, :].reshape(1, -1), g, rtol=0, atol=1e-12)
        assert_allclose(grad_x, 0.0, atol=1e-12)
