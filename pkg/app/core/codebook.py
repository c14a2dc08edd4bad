"""K-means codebooks and hard product quantization.

A Codebook holds M sub-codebooks of K centroids in R^{D'}; a vector is encoded
as the index of the nearest centroid in each subspace and decoded by
concatenating those centroids.
"""
from pathlib import Path
from typing import List, NamedTuple, Optional
import hashlib
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .binary_format import BinaryReader, f32_bytes, pack_header, write_atomic
from .descriptor_store import DescriptorSet
from .errors import ConfigError, DegenerateInputError, DimensionError, FormatError, IntegrityError, NumericError
from .numerics import as_matrix, make_rng, squared_distances

logger = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"DPQC"
INDEX_MAGIC = b"DPQI"
DEFAULT_KMEANS_ITERS = 25
# Relative slack when asserting that Lloyd distortion never increases.
_DISTORTION_SLACK = 1e-9


class Codebook(BaseModel):
    """Centroid tensor of shape (M, K, D')"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    centroids: np.ndarray

    @model_validator(mode="after")
    def _check(self):
        c = self.centroids
        if c.ndim != 3 or min(c.shape) < 1:
            raise ValueError(f"centroids must have shape (M, K, D') with positive sizes, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids must be finite")
        return self

    @property
    def M(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def K(self) -> int:
        return int(self.centroids.shape[1])

    @property
    def sub_dim(self) -> int:
        return int(self.centroids.shape[2])

    @property
    def dim(self) -> int:
        return self.M * self.sub_dim

    def content_hash(self) -> bytes:
        """SHA-256 over the header and the 32-bit payload, as written to .cbk files"""
        return hashlib.sha256(codebook_to_bytes(self)).digest()


class QuantizedIndex(BaseModel):
    """N × M code matrix tied to the codebook it was produced with"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    codes: np.ndarray
    K: int
    codebook_ref: bytes
    ids: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check(self):
        if self.codes.ndim != 2:
            raise ValueError(f"codes must be N × M, got shape {self.codes.shape}")
        if self.codes.size and int(self.codes.max()) >= self.K:
            raise ValueError(f"code {int(self.codes.max())} out of range for K={self.K}")
        if len(self.codebook_ref) != 32:
            raise ValueError("codebook_ref must be a 32-byte SHA-256 digest")
        return self

    @property
    def n(self) -> int:
        return int(self.codes.shape[0])

    @property
    def M(self) -> int:
        return int(self.codes.shape[1])


class KMeansFit(NamedTuple):
    centroids: np.ndarray
    assignments: np.ndarray
    distortion_history: List[float]


def _nearest(points: np.ndarray, centroids: np.ndarray):
    """Argmin of squared distance (lowest index on ties) and the minimum itself"""
    sq = squared_distances(points, centroids)
    idx = np.argmin(sq, axis=1)
    return idx, sq[np.arange(points.shape[0]), idx]


def _kmeans_plus_plus(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(points, points[chosen[0]:chosen[0] + 1])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        closest = np.minimum(closest, squared_distances(points, points[nxt:nxt + 1])[:, 0])
    return points[chosen].copy()


def kmeans(
    points: np.ndarray,
    K: int,
    iters: int = DEFAULT_KMEANS_ITERS,
    seed: int = 0,
    allow_duplicates: bool = False,
) -> KMeansFit:
    """k-means++ seeding followed by Lloyd iterations.

    Empty clusters are re-seeded to the points farthest from their centroids.
    Raises NumericError if distortion ever increases.
    """
    points = as_matrix(points, "points")
    if K < 1:
        raise ConfigError(f"K must be at least 1, got {K}")
    n_distinct = np.unique(points, axis=0).shape[0]
    if K > n_distinct and not allow_duplicates:
        raise DegenerateInputError(
            f"K={K} exceeds the {n_distinct} distinct points; pass allow_duplicates to continue"
        )

    rng = make_rng(seed)
    centroids = _kmeans_plus_plus(points, K, rng)
    assignments, dists = _nearest(points, centroids)
    history = [float(dists.sum())]

    for it in range(iters):
        counts = np.bincount(assignments, minlength=K)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignments, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        empty = np.flatnonzero(~nonempty)
        if empty.size:
            farthest = np.argsort(-dists, kind="stable")[:empty.size]
            centroids[empty] = points[farthest]
            logger.warning(f"k-means iteration {it}: re-seeded {empty.size} empty clusters")

        new_assignments, dists = _nearest(points, centroids)
        distortion = float(dists.sum())
        if distortion > history[-1] * (1.0 + _DISTORTION_SLACK) + 1e-300:
            raise NumericError(
                f"k-means distortion increased at iteration {it}: {history[-1]} -> {distortion}"
            )
        history.append(distortion)
        if np.array_equal(new_assignments, assignments) and not empty.size:
            break
        assignments = new_assignments

    logger.debug(f"k-means K={K}: distortion {history[0]:.6g} -> {history[-1]:.6g} in {len(history) - 1} steps")
    return KMeansFit(centroids, assignments, history)


def fit_codebook(
    descriptor_set: DescriptorSet,
    M: int,
    K: int,
    iters: int = DEFAULT_KMEANS_ITERS,
    seed: int = 0,
    allow_duplicates: bool = False,
) -> Codebook:
    """Independent k-means per subspace; subspace m is seeded with seed + m"""
    D = descriptor_set.dim
    if M < 1 or D % M != 0:
        raise ConfigError(f"D={D} is not divisible by M={M}")
    sub = D // M
    centroids = np.empty((M, K, sub))
    for m in range(M):
        fit = kmeans(
            descriptor_set.descriptors[:, m * sub:(m + 1) * sub], K, iters, seed + m, allow_duplicates
        )
        centroids[m] = fit.centroids
    logger.info(f"Fitted codebook M={M}, K={K}, D'={sub} on {descriptor_set.n} descriptors")
    return Codebook(centroids=centroids)


def assign_codes(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid index per subspace (lowest index on ties), shape (N, M)"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise DimensionError(f"Input dimension {x.shape[-1]} does not match codebook dimension {codebook.dim}")
    sub = codebook.sub_dim
    codes = np.empty((x.shape[0], codebook.M), dtype=np.uint32)
    for m in range(codebook.M):
        codes[:, m], _ = _nearest(x[:, m * sub:(m + 1) * sub], codebook.centroids[m])
    return codes


def reconstruct(codes: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Concatenate the selected centroids of every subspace"""
    codes = np.asarray(codes, dtype=np.int64)
    parts = [codebook.centroids[m][codes[:, m]] for m in range(codebook.M)]
    return np.concatenate(parts, axis=1)


def pq_encode(codebook: Codebook, descriptor_set: DescriptorSet) -> QuantizedIndex:
    codes = assign_codes(descriptor_set.descriptors, codebook)
    return QuantizedIndex(
        codes=codes, K=codebook.K, codebook_ref=codebook.content_hash(), ids=descriptor_set.ids
    )


def pq_decode(codebook: Codebook, index: QuantizedIndex) -> DescriptorSet:
    if index.codebook_ref != codebook.content_hash():
        raise IntegrityError("Quantized index was produced with a different codebook")
    if index.M != codebook.M or index.K != codebook.K:
        raise IntegrityError(f"Index shape M={index.M}, K={index.K} does not match the codebook")
    return DescriptorSet(descriptors=reconstruct(index.codes, codebook), ids=index.ids, l2_normalized=False)


def _log2_exact(K: int) -> int:
    if K < 1 or K & (K - 1):
        raise ConfigError(f"K={K} is not a power of two")
    return K.bit_length() - 1


def code_bits(M: int, K: int) -> int:
    """Bits per encoded vector: M × log2(K)"""
    return M * _log2_exact(K)


def code_bytes(M: int, K: int) -> float:
    return code_bits(M, K) / 8.0


def pack_codes(codes: np.ndarray, K: int) -> np.ndarray:
    """log2(K) bits per code, most significant bit first, each row padded to whole bytes"""
    bits = _log2_exact(K)
    codes = np.asarray(codes, dtype=np.uint32)
    n, M = codes.shape
    if bits == 0:
        return np.zeros((n, 0), dtype=np.uint8)
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    bit_matrix = ((codes[:, :, None] >> shifts) & 1).astype(np.uint8).reshape(n, M * bits)
    return np.packbits(bit_matrix, axis=1)


def unpack_codes(packed: np.ndarray, n: int, M: int, K: int) -> np.ndarray:
    bits = _log2_exact(K)
    if bits == 0:
        return np.zeros((n, M), dtype=np.uint32)
    bit_matrix = np.unpackbits(np.asarray(packed, dtype=np.uint8), axis=1, count=M * bits)
    weights = (1 << np.arange(bits - 1, -1, -1)).astype(np.uint32)
    return (bit_matrix.reshape(n, M, bits).astype(np.uint32) * weights).sum(axis=2).astype(np.uint32)


def codebook_to_bytes(codebook: Codebook) -> bytes:
    header = pack_header(CODEBOOK_MAGIC, "III", codebook.M, codebook.K, codebook.sub_dim)
    return header + f32_bytes(codebook.centroids)


def save_codebook(codebook: Codebook, path: Path) -> None:
    write_atomic(path, codebook_to_bytes(codebook))


def load_codebook(path: Path) -> Codebook:
    reader = BinaryReader.from_path(path)
    M, K, sub = reader.header(CODEBOOK_MAGIC, "III")
    if min(M, K, sub) < 1:
        raise FormatError(f"{path}: invalid codebook shape M={M}, K={K}, D'={sub}", 8)
    centroids = reader.array("<f4", (M, K, sub)).astype(np.float64)
    reader.finish()
    logger.info(f"Loaded codebook M={M}, K={K}, D'={sub} from {path}")
    return Codebook(centroids=centroids)


def save_index(index: QuantizedIndex, path: Path) -> None:
    header = pack_header(INDEX_MAGIC, "QII32s", index.n, index.M, index.K, index.codebook_ref)
    write_atomic(path, header + pack_codes(index.codes, index.K).tobytes())


def load_index(path: Path) -> QuantizedIndex:
    """Ids are not stored in .qix files; loaded indices number their rows 0..N-1"""
    reader = BinaryReader.from_path(path)
    n, M, K, ref = reader.header(INDEX_MAGIC, "QII32s")
    row_bytes = (M * _log2_exact(K) + 7) // 8
    packed = reader.array("u1", (n, row_bytes))
    reader.finish()
    codes = unpack_codes(packed, n, M, K)
    if codes.size and int(codes.max()) >= K:
        raise FormatError(f"{path}: code out of range for K={K}", reader.offset)
    return QuantizedIndex(codes=codes, K=K, codebook_ref=ref)
