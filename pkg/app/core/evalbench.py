"""Descriptor-level benchmarks: reconstruction error, matching recall and ranking preservation.

Queries are raw descriptors plus Gaussian noise; the database is the compressed
(and optionally decoded) version of the same set, so query i should match
database row i.
"""
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np
from pydantic import BaseModel, Field

from .binary_format import write_atomic
from .codebook import Codebook, assign_codes, reconstruct
from .decoder import DecoderWeights, decoder_forward, param_count
from .descriptor_store import DescriptorSet, synth_descriptors
from .errors import DimensionError, InputError
from .models import BenchResult
from .numerics import fast_squared_distances, make_rng, row_blocks, row_distances

logger = logging.getLogger(__name__)

GroundTruth = Union[Mapping[int, int], Sequence[int], np.ndarray]

RESULTS_HEADER = "method\tbytes_per_vector\trecon_mean\trecall@1\trecall@5\tranking_preservation"
DEFAULT_TRIPLETS = 10_000
# Relative width of the band in which expanded distances are re-checked exactly.
_TIE_BAND = 1e-9


def _as_array(values: Union[DescriptorSet, np.ndarray]) -> np.ndarray:
    if isinstance(values, DescriptorSet):
        return values.descriptors
    return np.asarray(values, dtype=np.float64)


def _ground_truth_rows(ground_truth: GroundTruth, n_queries: int, database: DescriptorSet) -> np.ndarray:
    """Translate query -> database id into query -> database row (first row carrying the id)"""
    row_of: Dict[int, int] = {}
    for row, db_id in enumerate(database.ids.tolist()):
        row_of.setdefault(int(db_id), row)

    rows = np.empty(n_queries, dtype=np.int64)
    for q in range(n_queries):
        try:
            target = ground_truth[q]
        except (KeyError, IndexError):
            raise InputError(f"No ground-truth match for query {q}")
        if int(target) not in row_of:
            raise InputError(f"Ground truth for query {q} names id {int(target)}, absent from the database")
        rows[q] = row_of[int(target)]
    return rows


def match_ranks(queries: np.ndarray, database: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """0-based position of each target row in its query's nearest-neighbour list.

    Ordering is by exact squared distance, ties broken by lowest database row.
    Candidates are ranked with the expanded form and every entry within a
    narrow band of the target's distance is re-checked exactly.
    """
    queries = np.asarray(queries, dtype=np.float64)
    database = np.asarray(database, dtype=np.float64)
    if queries.shape[1] != database.shape[1]:
        raise DimensionError(f"Query dimension {queries.shape[1]} does not match database {database.shape[1]}")
    db_norms = np.einsum("ij,ij->i", database, database)
    max_norm = float(db_norms.max()) if db_norms.size else 0.0
    ranks = np.empty(queries.shape[0], dtype=np.int64)

    for block in row_blocks(queries.shape[0], database.shape[0]):
        q = queries[block]
        t = targets[block]
        approx = fast_squared_distances(q, database)
        target_diff = database[t] - q
        exact_target = np.einsum("ij,ij->i", target_diff, target_diff)
        band = _TIE_BAND * (1.0 + np.einsum("ij,ij->i", q, q) + max_norm)
        below = approx < (exact_target - band)[:, None]
        near = np.abs(approx - exact_target[:, None]) <= band[:, None]
        block_ranks = below.sum(axis=1)
        for i in range(q.shape[0]):
            cols = np.flatnonzero(near[i])
            diff = database[cols] - q[i]
            exact = np.einsum("ij,ij->i", diff, diff)
            ahead = (exact < exact_target[i]) | ((exact == exact_target[i]) & (cols < t[i]))
            block_ranks[i] += int(ahead.sum())
        ranks[block] = block_ranks
    return ranks


def recall_at_k(
    queries: DescriptorSet, database: DescriptorSet, ground_truth: GroundTruth, k: int
) -> float:
    """Fraction of queries whose true match is among their k nearest database rows"""
    if k < 1:
        raise InputError(f"k must be at least 1, got {k}")
    targets = _ground_truth_rows(ground_truth, queries.n, database)
    ranks = match_ranks(queries.descriptors, database.descriptors, targets)
    return float(np.mean(ranks < k))


def ranking_preservation(
    original: Union[DescriptorSet, np.ndarray],
    compressed: Union[DescriptorSet, np.ndarray],
    n_triplets: int = DEFAULT_TRIPLETS,
    seed: int = 0,
) -> float:
    """Fraction of random triplets (a, b, c) whose order of ‖a−b‖ vs ‖a−c‖ survives compression"""
    x = _as_array(original)
    y = _as_array(compressed)
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"Sets differ in size: {x.shape[0]} vs {y.shape[0]}")
    if n_triplets < 1:
        return 1.0
    a, b, c = make_rng(seed).integers(0, x.shape[0], size=(3, n_triplets))
    before = row_distances(x[a], x[b]) - row_distances(x[a], x[c])
    after = row_distances(y[a], y[b]) - row_distances(y[a], y[c])
    tied = (np.abs(before) <= 1e-12) | (np.abs(after) <= 1e-12)
    return float(np.mean(tied | (np.sign(before) == np.sign(after))))


def bytes_per_code(M: int, K: int) -> float:
    """Code size of one vector; at least one bit per subspace"""
    return M * max(1, math.ceil(math.log2(K))) / 8.0 if K > 1 else M / 8.0


def compress(x: np.ndarray, codebook: Codebook, decoder: Optional[DecoderWeights] = None) -> np.ndarray:
    """Hard PQ reconstruction, passed through the decoder when one is given"""
    recon = reconstruct(assign_codes(x, codebook), codebook)
    return recon if decoder is None else decoder_forward(recon, decoder)


def _noisy_queries(descriptor_set: DescriptorSet, noise_sigma: float, seed: int) -> np.ndarray:
    if noise_sigma < 0:
        raise InputError(f"noise_sigma must be non-negative, got {noise_sigma}")
    x = descriptor_set.descriptors
    if noise_sigma == 0:
        return x.copy()
    return x + make_rng(seed).normal(0.0, noise_sigma, size=x.shape)


def _score(
    method: str,
    original: DescriptorSet,
    queries: np.ndarray,
    database: np.ndarray,
    bytes_per_vector: float,
    n_triplets: int,
    seed: int,
    params: Dict,
) -> BenchResult:
    errors = row_distances(original.descriptors, database)
    ranks = match_ranks(queries, database, np.arange(original.n))
    result = BenchResult(
        method=method,
        bytes_per_vector=bytes_per_vector,
        recon_mean=float(errors.mean()),
        recon_median=float(np.median(errors)),
        recall_at_1=float(np.mean(ranks < 1)),
        recall_at_5=float(np.mean(ranks < 5)),
        ranking_preservation=ranking_preservation(original.descriptors, database, n_triplets, seed),
        params={**params, "seed": seed, "n_triplets": n_triplets},
    )
    logger.info(
        f"{method}: recall@1={result.recall_at_1:.4f} recall@5={result.recall_at_5:.4f} "
        f"recon={result.recon_mean:.4f} ranking={result.ranking_preservation:.4f}"
    )
    return result


def raw_bench(
    descriptor_set: DescriptorSet, noise_sigma: float, seed: int = 0, n_triplets: int = DEFAULT_TRIPLETS,
    method: str = "raw",
) -> BenchResult:
    """Uncompressed reference: database = raw descriptors at 4 bytes per dimension"""
    queries = _noisy_queries(descriptor_set, noise_sigma, seed)
    return _score(
        method, descriptor_set, queries, descriptor_set.descriptors, 4.0 * descriptor_set.dim,
        n_triplets, seed, {"noise_sigma": noise_sigma},
    )


def _compressed_params(codebook: Codebook, decoder: Optional[DecoderWeights], noise_sigma: float,
                       symmetric: bool) -> Dict:
    params = {
        "noise_sigma": noise_sigma,
        "M": codebook.M,
        "K": codebook.K,
        "decoder": decoder is not None,
        "symmetric": symmetric,
    }
    if decoder is not None:
        params["hidden"] = decoder.hidden
        params["decoder_params"] = param_count(decoder)
    return params


def asymmetric_bench(
    descriptor_set: DescriptorSet,
    noise_sigma: float,
    codebook: Codebook,
    decoder: Optional[DecoderWeights] = None,
    seed: int = 0,
    n_triplets: int = DEFAULT_TRIPLETS,
    method: Optional[str] = None,
) -> BenchResult:
    """Raw noisy queries against a compressed database"""
    queries = _noisy_queries(descriptor_set, noise_sigma, seed)
    database = compress(descriptor_set.descriptors, codebook, decoder)
    label = method or ("PQ+decoder" if decoder is not None else "PQ")
    return _score(
        label, descriptor_set, queries, database, bytes_per_code(codebook.M, codebook.K),
        n_triplets, seed, _compressed_params(codebook, decoder, noise_sigma, symmetric=False),
    )


def symmetric_bench(
    descriptor_set: DescriptorSet,
    noise_sigma: float,
    codebook: Codebook,
    decoder: Optional[DecoderWeights] = None,
    seed: int = 0,
    n_triplets: int = DEFAULT_TRIPLETS,
    method: Optional[str] = None,
) -> BenchResult:
    """Queries are compressed the same way as the database before matching"""
    queries = compress(_noisy_queries(descriptor_set, noise_sigma, seed), codebook, decoder)
    database = compress(descriptor_set.descriptors, codebook, decoder)
    label = method or "symmetric"
    return _score(
        label, descriptor_set, queries, database, bytes_per_code(codebook.M, codebook.K),
        n_triplets, seed, _compressed_params(codebook, decoder, noise_sigma, symmetric=True),
    )


class StandardBenchmark(BaseModel):
    """Fixed synthetic setup used to compare methods"""

    dim: int = 64
    n_clusters: int = 32
    per_cluster: int = 200
    spread: float = Field(0.08, gt=0)
    noise_sigma: float = Field(0.05, ge=0)
    M: int = 4
    K: int = 16
    hidden: int = 256
    epochs: int = 5
    batch_size: int = 1000
    seeds: Tuple[int, ...] = (1, 2, 3)
    n_triplets: int = DEFAULT_TRIPLETS
    keep_best: bool = True

    def data(self, seed: int) -> DescriptorSet:
        return synth_descriptors(self.n_clusters, self.per_cluster, self.dim, self.spread, seed)


def run_standard_benchmark(seed: int, bench: Optional[StandardBenchmark] = None) -> List[BenchResult]:
    """Raw, PQ, the ablations and the three D-PQED losses on one seed of the standard setup"""
    # trainer imports this module for validation recall
    from .codebook import fit_codebook
    from .trainer import TrainConfig, train

    bench = bench or StandardBenchmark()
    data = bench.data(seed)
    noise = bench.noise_sigma
    common = {"seed": seed, "n_triplets": bench.n_triplets}

    def _trained(**overrides):
        cfg = TrainConfig(
            epochs=bench.epochs, batch_size=bench.batch_size, M=bench.M, K=bench.K,
            hidden=bench.hidden, seed=seed, val_noise_sigma=noise, keep_best=bench.keep_best, **overrides,
        )
        codebook, decoder, _ = train(data, cfg, init_codebook=pq)
        return codebook, (decoder if cfg.use_decoder else None)

    results = [raw_bench(data, noise, **common)]
    pq = fit_codebook(data, bench.M, bench.K, seed=seed)
    results.append(asymmetric_bench(data, noise, pq, None, method="PQ", **common))

    codebook, decoder = _trained(freeze_codebook=True)
    results.append(asymmetric_bench(data, noise, codebook, decoder, method="PQ+decoder", **common))
    codebook, _ = _trained(use_decoder=False)
    results.append(asymmetric_bench(data, noise, codebook, None, method="D-PQ", **common))

    for variant, label in (("l2", "D-PQED(L2)"), ("npair", "D-PQED(N-pair)")):
        codebook, decoder = _trained(loss_variant=variant)
        results.append(asymmetric_bench(data, noise, codebook, decoder, method=label, **common))

    codebook, decoder = _trained(loss_variant="triplet_combined")
    results.append(asymmetric_bench(data, noise, codebook, decoder, method="D-PQED(triplet)", **common))
    results.append(symmetric_bench(data, noise, codebook, decoder, method="D-PQED(symmetric)", **common))
    return results


def results_table(results: Sequence[BenchResult]) -> str:
    return "\n".join([RESULTS_HEADER] + [r.to_row() for r in results]) + "\n"


def write_results_table(results: Sequence[BenchResult], path: Path) -> None:
    write_atomic(Path(path), results_table(results).encode("utf-8"))
    logger.info(f"Wrote {len(results)} benchmark rows to {path}")
