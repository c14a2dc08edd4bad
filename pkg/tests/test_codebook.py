import numpy as np
import pytest
from numpy.testing import assert_array_equal

from app.core.codebook import (
    Codebook,
    assign_codes,
    code_bits,
    code_bytes,
    fit_codebook,
    kmeans,
    load_codebook,
    load_index,
    pack_codes,
    pq_decode,
    pq_encode,
    reconstruct,
    save_codebook,
    save_index,
    unpack_codes,
)
from app.core.descriptor_store import DescriptorSet, synth_descriptors
from app.core.errors import ConfigError, DegenerateInputError, FormatError, IntegrityError


class TestKMeans:
    def test_distortion_never_increases(self, rng):
        points = rng.normal(size=(300, 4))
        fit = kmeans(points, K=12, iters=30, seed=2)
        history = np.array(fit.distortion_history)
        assert np.all(np.diff(history) <= 1e-9 * history[:-1])
        assert fit.centroids.shape == (12, 4)

    def test_seeded(self, rng):
        points = rng.normal(size=(100, 3))
        a = kmeans(points, K=5, seed=7)
        b = kmeans(points, K=5, seed=7)
        assert_array_equal(a.centroids, b.centroids)

    def test_too_few_distinct_points(self):
        points = np.repeat(np.eye(3), 4, axis=0)
        with pytest.raises(DegenerateInputError):
            kmeans(points, K=5)
        fit = kmeans(points, K=5, allow_duplicates=True)
        assert fit.centroids.shape == (5, 3)

    def test_k_equal_to_n_reproduces_points(self, rng):
        points = rng.normal(size=(6, 2))
        fit = kmeans(points, K=6, seed=1)
        assert fit.distortion_history[-1] == 0.0

    def test_one_dimensional_pairs(self):
        fit = kmeans(np.array([[0.0], [1.0], [9.0], [10.0]]), K=2, seed=3)
        assert sorted(fit.centroids[:, 0].tolist()) == [0.5, 9.5]


class TestCodebook:
    def test_dimension_must_divide(self, small_set):
        with pytest.raises(ConfigError):
            fit_codebook(small_set, M=3, K=4)

    def test_subspaces_are_independent_fits(self, small_set):
        codebook = fit_codebook(small_set, M=4, K=8, iters=10, seed=5)
        assert codebook.centroids.shape == (4, 8, 4)
        assert codebook.dim == 16

    def test_ties_pick_lowest_index(self):
        centroids = np.array([[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]])
        codebook = Codebook(centroids=centroids)
        codes = assign_codes(np.array([[1.0, 0.0], [0.5, 0.5]]), codebook)
        assert_array_equal(codes[:, 0], [0, 0])

    def test_centroid_inputs_are_fixed_points(self, small_codebook, rng):
        codes = rng.integers(0, small_codebook.K, size=(50, small_codebook.M))
        x = reconstruct(codes, small_codebook)
        index = pq_encode(small_codebook, DescriptorSet(descriptors=x))
        decoded = pq_decode(small_codebook, index)
        assert_array_equal(decoded.descriptors, x)

    def test_fitted_beats_random_codebook(self, rng):
        data = synth_descriptors(n_clusters=32, per_cluster=20, dim=32, spread=0.05, seed=8)
        fitted = fit_codebook(data, M=4, K=32, iters=15, seed=0)
        random = Codebook(centroids=rng.normal(scale=1.0 / np.sqrt(32), size=(4, 32, 8)))

        def error(codebook):
            recon = reconstruct(assign_codes(data.descriptors, codebook), codebook)
            return np.linalg.norm(data.descriptors - recon, axis=1).mean()

        assert error(fitted) < error(random)

    def test_encode_decode_is_idempotent(self, small_set, small_codebook):
        first = pq_encode(small_codebook, small_set)
        again = pq_encode(small_codebook, pq_decode(small_codebook, first))
        assert_array_equal(again.codes, first.codes)

    def test_single_centroid_decodes_to_it(self, rng):
        codebook = Codebook(centroids=rng.normal(size=(2, 1, 3)))
        index = pq_encode(codebook, DescriptorSet(descriptors=rng.normal(size=(5, 6))))
        assert not index.codes.any()
        decoded = pq_decode(codebook, index).descriptors
        assert_array_equal(decoded, np.tile(codebook.centroids[:, 0, :].reshape(1, 6), (5, 1)))

    def test_decode_with_other_codebook(self, small_set, small_codebook):
        other = Codebook(centroids=small_codebook.centroids * 2.0)
        index = pq_encode(small_codebook, small_set)
        with pytest.raises(IntegrityError):
            pq_decode(other, index)

    def test_content_hash_tracks_centroids(self, small_codebook):
        moved = Codebook(centroids=small_codebook.centroids + 1.0)
        assert len(small_codebook.content_hash()) == 32
        assert moved.content_hash() != small_codebook.content_hash()


class TestCodeSizes:
    def test_bits(self):
        assert code_bits(4, 256) == 32
        assert code_bits(32, 256) == 256
        assert code_bytes(4, 256) == 4.0
        assert code_bits(3, 1) == 0

    def test_non_power_of_two(self):
        with pytest.raises(ConfigError):
            code_bits(4, 100)

    def test_pack_is_msb_first(self):
        assert_array_equal(pack_codes(np.array([[1, 2]]), K=16), [[0x12]])
        assert_array_equal(pack_codes(np.array([[7, 0, 1]]), K=8), [[0xE0, 0x80]])

    def test_unpack_inverts_pack(self, rng):
        codes = rng.integers(0, 32, size=(9, 5)).astype(np.uint32)
        packed = pack_codes(codes, K=32)
        assert packed.shape == (9, 4)
        assert_array_equal(unpack_codes(packed, 9, 5, 32), codes)


class TestFiles:
    def test_codebook_file(self, tmp_path, small_codebook):
        path = tmp_path / "model.cbk"
        save_codebook(small_codebook, path)
        loaded = load_codebook(path)
        assert loaded.centroids.shape == small_codebook.centroids.shape
        assert path.stat().st_size == 20 + 4 * 8 * 4 * 4

    def test_index_file(self, tmp_path, small_set, small_codebook):
        index = pq_encode(small_codebook, small_set)
        path = tmp_path / "codes.qix"
        save_index(index, path)
        # header 56 bytes, 4 codes of 3 bits -> 2 bytes per row
        assert path.stat().st_size == 56 + small_set.n * 2
        loaded = load_index(path)
        assert_array_equal(loaded.codes, index.codes)
        assert loaded.codebook_ref == small_codebook.content_hash()

    def test_index_with_trailing_bytes(self, tmp_path, small_set, small_codebook):
        path = tmp_path / "codes.qix"
        save_index(pq_encode(small_codebook, small_set), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_index(path)
