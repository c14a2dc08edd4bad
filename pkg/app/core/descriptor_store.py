"""Descriptor sets and scene point sets: types, binary files and synthetic generators."""
from pathlib import Path
from typing import Optional, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .binary_format import BinaryReader, f32_bytes, pack_header, write_atomic
from .config import validation_message
from .errors import ConfigError, DimensionError, FormatError
from .numerics import as_matrix, l2_normalize, make_rng

logger = logging.getLogger(__name__)

DESCRIPTOR_MAGIC = b"DPQD"
SCENE_MAGIC = b"DPQS"
NORM_TOLERANCE = 1e-4


class DescriptorSet(BaseModel):
    """N × D descriptors with 64-bit ids.

    ``group_ids`` optionally ties descriptors of the same 3D point together;
    it is in-memory only and is not part of the .dsc file.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    descriptors: np.ndarray
    ids: np.ndarray
    l2_normalized: bool = False
    group_ids: Optional[np.ndarray] = None

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data):
        if isinstance(data, dict) and "descriptors" in data:
            data = dict(data)
            data["descriptors"] = as_matrix(data["descriptors"], "descriptors")
            if data.get("ids") is None:
                data["ids"] = np.arange(data["descriptors"].shape[0], dtype=np.uint64)
            else:
                data["ids"] = np.asarray(data["ids"], dtype=np.uint64)
        return data

    @model_validator(mode="after")
    def _check(self):
        n = self.descriptors.shape[0]
        if n < 1:
            raise ValueError("a descriptor set needs at least one row")
        if self.ids.shape != (n,):
            raise ValueError(f"expected {n} ids, got shape {self.ids.shape}")
        if self.group_ids is not None and np.shape(self.group_ids) != (n,):
            raise ValueError(f"expected {n} group ids, got shape {np.shape(self.group_ids)}")
        if self.l2_normalized:
            norms = np.linalg.norm(self.descriptors, axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
                raise ValueError("l2_normalized set has rows whose norm is not 1")
        return self

    @property
    def n(self) -> int:
        return int(self.descriptors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.descriptors.shape[1])

    def subset(self, indices: np.ndarray) -> "DescriptorSet":
        indices = np.asarray(indices, dtype=np.int64)
        return DescriptorSet(
            descriptors=self.descriptors[indices],
            ids=self.ids[indices],
            l2_normalized=self.l2_normalized,
            group_ids=None if self.group_ids is None else np.asarray(self.group_ids)[indices],
        )

    def with_descriptors(self, descriptors: np.ndarray, l2_normalized: bool = False) -> "DescriptorSet":
        """Same ids and groups, new vectors"""
        return DescriptorSet(
            descriptors=descriptors, ids=self.ids, l2_normalized=l2_normalized, group_ids=self.group_ids
        )


class ScenePointSet(BaseModel):
    """3D points with per-point distinctiveness (fraction of images observing the point)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    positions: np.ndarray
    distinctiveness: np.ndarray
    total_images: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self):
        positions = np.asarray(self.positions)
        if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape[0] < 1:
            raise ValueError(f"positions must be m × 3 with m ≥ 1, got {positions.shape}")
        if not np.all(np.isfinite(positions)):
            raise ValueError("positions must be finite")
        d = np.asarray(self.distinctiveness)
        if d.shape != (positions.shape[0],):
            raise ValueError(f"expected {positions.shape[0]} distinctiveness values, got {d.shape}")
        if np.any(d < 0) or np.any(d > 1) or not np.all(np.isfinite(d)):
            raise ValueError("distinctiveness must lie in [0, 1]")
        return self

    @property
    def m(self) -> int:
        return int(self.positions.shape[0])


def save_descriptors(descriptor_set: DescriptorSet, path: Path) -> None:
    header = pack_header(
        DESCRIPTOR_MAGIC, "IQB",
        descriptor_set.dim, descriptor_set.n, int(descriptor_set.l2_normalized),
    )
    payload = f32_bytes(descriptor_set.descriptors)
    ids = np.ascontiguousarray(descriptor_set.ids, dtype="<u8").tobytes()
    write_atomic(path, header + payload + ids)


def load_descriptors(path: Path, expected_dim: Optional[int] = None) -> DescriptorSet:
    reader = BinaryReader.from_path(path)
    dim, n, flag = reader.header(DESCRIPTOR_MAGIC, "IQB")
    if dim < 1 or n < 1:
        raise FormatError(f"{path}: empty descriptor set (D={dim}, N={n})", 8)
    if expected_dim is not None and dim != expected_dim:
        raise DimensionError(f"{path}: dimension {dim} does not match expected {expected_dim}")
    if flag not in (0, 1):
        raise FormatError(f"{path}: invalid l2_normalized flag {flag}", 20)
    descriptors = reader.array("<f4", (n, dim)).astype(np.float64)
    ids = reader.array("<u8", (n,))
    reader.finish()
    if not np.all(np.isfinite(descriptors)):
        raise FormatError(f"{path}: payload holds non-finite values", 21)
    try:
        loaded = DescriptorSet(descriptors=descriptors, ids=ids, l2_normalized=bool(flag))
    except ValidationError as e:
        raise FormatError(f"{path}: {validation_message(e)}") from e
    logger.info(f"Loaded {n} descriptors of dimension {dim} from {path}")
    return loaded


def save_scene(scene: ScenePointSet, path: Path) -> None:
    header = pack_header(SCENE_MAGIC, "QQ", scene.m, scene.total_images)
    write_atomic(path, header + f32_bytes(scene.positions) + f32_bytes(scene.distinctiveness))


def load_scene(path: Path) -> ScenePointSet:
    reader = BinaryReader.from_path(path)
    m, total_images = reader.header(SCENE_MAGIC, "QQ")
    if m < 1:
        raise FormatError(f"{path}: scene without points", 8)
    positions = reader.array("<f4", (m, 3)).astype(np.float64)
    distinctiveness = reader.array("<f4", (m,)).astype(np.float64)
    reader.finish()
    try:
        scene = ScenePointSet(
            positions=positions, distinctiveness=distinctiveness, total_images=max(1, total_images)
        )
    except ValidationError as e:
        raise FormatError(f"{path}: {validation_message(e)}") from e
    logger.info(f"Loaded scene with {m} points from {path}")
    return scene


def synth_descriptors(
    n_clusters: int, per_cluster: int, dim: int, spread: float, seed: int
) -> DescriptorSet:
    """Gaussian mixture on the unit sphere, L2-normalized, rows grouped by cluster"""
    if min(n_clusters, per_cluster, dim) < 1:
        raise ConfigError("n_clusters, per_cluster and dim must all be at least 1")
    if spread <= 0:
        raise ConfigError(f"spread must be positive, got {spread}")
    rng = make_rng(seed)
    centers = l2_normalize(rng.standard_normal((n_clusters, dim)))
    noise = rng.standard_normal((n_clusters, per_cluster, dim)) * spread
    members = (centers[:, None, :] + noise).reshape(n_clusters * per_cluster, dim)
    descriptors = l2_normalize(members)
    logger.info(
        f"Synthesized {descriptors.shape[0]} descriptors ({n_clusters} clusters, dim {dim}, spread {spread})"
    )
    return DescriptorSet(descriptors=descriptors, l2_normalized=True)


def synth_scene(m: int, n_clusters: int, seed: int, total_images: int = 100) -> ScenePointSet:
    """Clustered 3D points on a jittered lattice of cluster centres.

    Centres occupy distinct lattice cells 30 units apart (±3 jitter) and points
    scatter around them with standard deviation 2, so clusters stay separated.
    """
    if n_clusters < 1 or m < n_clusters:
        raise ConfigError(f"need m ≥ n_clusters ≥ 1, got m={m}, n_clusters={n_clusters}")
    rng = make_rng(seed)
    side = int(np.ceil(n_clusters ** (1.0 / 3.0)))
    while side ** 3 < n_clusters:
        side += 1
    cells = rng.choice(side ** 3, size=n_clusters, replace=False)
    lattice = np.stack(np.unravel_index(cells, (side, side, side)), axis=1).astype(np.float64)
    centers = lattice * 30.0 + rng.uniform(-3.0, 3.0, size=(n_clusters, 3))
    labels = np.arange(m) % n_clusters
    positions = centers[labels] + rng.normal(0.0, 2.0, size=(m, 3))
    distinctiveness = rng.uniform(0.0, 1.0, size=m)
    return ScenePointSet(positions=positions, distinctiveness=distinctiveness, total_images=total_images)


def average_by_group(descriptor_set: DescriptorSet) -> DescriptorSet:
    """One mean descriptor per group id, ordered by first appearance; the id kept is the group id"""
    if descriptor_set.group_ids is None:
        raise ConfigError("average_by_group needs group_ids on the descriptor set")
    groups = np.asarray(descriptor_set.group_ids)
    unique, first, inverse = np.unique(groups, return_index=True, return_inverse=True)
    sums = np.zeros((unique.size, descriptor_set.dim))
    np.add.at(sums, inverse, descriptor_set.descriptors)
    counts = np.bincount(inverse, minlength=unique.size)[:, None]
    means = sums / counts
    order = np.argsort(first, kind="stable")
    logger.info(f"Averaged {descriptor_set.n} descriptors into {unique.size} groups")
    return DescriptorSet(
        descriptors=means[order],
        ids=unique[order].astype(np.uint64),
        l2_normalized=False,
        group_ids=unique[order],
    )


def split_holdout(
    descriptor_set: DescriptorSet, fraction: float, seed: int
) -> Tuple[DescriptorSet, Optional[DescriptorSet]]:
    """Seeded shuffled split; the held-out part gets round(fraction·N) rows (None when zero)"""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"holdout fraction must be in [0, 1), got {fraction}")
    order = make_rng(seed).permutation(descriptor_set.n)
    n_val = int(round(fraction * descriptor_set.n))
    if n_val == 0:
        return descriptor_set.subset(order), None
    if n_val >= descriptor_set.n:
        raise DimensionError("holdout split leaves no training rows")
    return descriptor_set.subset(order[n_val:]), descriptor_set.subset(order[:n_val])
