"""Training objectives with analytic gradients w.r.t. the reconstructions x̂.

triplet_combined = L_raw + λ·L_d with in-batch hard negatives:
  L_raw = mean max(m + ‖x − x̂‖ − min_{j≠i} ‖x_j − x̂_i‖, 0)
  L_d   = mean max(m + ‖x − x̂‖ − min_{j≠i} ‖x̂_i − x̂_j‖, 0)
Mined indices are treated as constants in the backward pass.
"""
from typing import Literal, NamedTuple, Optional, Tuple
import logging

import numpy as np
from pydantic import BaseModel, Field

from .errors import BatchTooSmallError, DimensionError
from .numerics import fast_squared_distances, row_distances

logger = logging.getLogger(__name__)

LossVariant = Literal["triplet_combined", "l2", "npair"]


class LossConfig(BaseModel):
    margin: float = Field(0.9, ge=0)
    lambda_d: float = Field(1.0, ge=0)
    variant: LossVariant = "triplet_combined"
    npair_n: int = Field(10, ge=2)


class NegativeMining(NamedTuple):
    neg_raw: np.ndarray
    neg_d: np.ndarray
    idx_raw: np.ndarray
    idx_d: np.ndarray


class TripletTerms(NamedTuple):
    l_raw: float
    l_d: float


class NPairGrads(NamedTuple):
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray


def _pair(batch_x: np.ndarray, batch_xh: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(batch_x, dtype=np.float64)
    xh = np.asarray(batch_xh, dtype=np.float64)
    if x.shape != xh.shape or x.ndim != 2:
        raise DimensionError(f"Batch shapes differ: {x.shape} vs {xh.shape}")
    return x, xh


def positive_dist(x: np.ndarray, x_hat: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DimensionError(f"Shapes differ: {x.shape} vs {x_hat.shape}")
    diff = (x - x_hat).ravel()
    return float(np.sqrt(np.dot(diff, diff)))


def positive_distances(batch_x: np.ndarray, batch_xh: np.ndarray) -> np.ndarray:
    x, xh = _pair(batch_x, batch_xh)
    return row_distances(x, xh)


def _hardest(anchors: np.ndarray, candidates: np.ndarray, exclude: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Closest non-excluded candidate per anchor; the distance is recomputed exactly for the winner"""
    masked = np.where(exclude, np.inf, fast_squared_distances(anchors, candidates))
    idx = np.argmin(masked, axis=1)
    found = np.isfinite(masked[np.arange(anchors.shape[0]), idx])
    values = np.where(found, row_distances(anchors, candidates[idx]), np.inf)
    return values, np.where(found, idx, -1)


def mine_negatives(
    batch_x: np.ndarray, batch_xh: np.ndarray, group_ids: Optional[np.ndarray] = None
) -> NegativeMining:
    """Hardest in-batch negatives for every row.

    Rows sharing a group id (when given) are excluded as well as the row itself;
    a row left without candidates gets distance inf and index -1.
    """
    x, xh = _pair(batch_x, batch_xh)
    n = x.shape[0]
    if n < 2:
        raise BatchTooSmallError(f"Hard negative mining needs at least 2 rows, got {n}")
    exclude = np.eye(n, dtype=bool)
    if group_ids is not None:
        g = np.asarray(group_ids)
        exclude |= g[:, None] == g[None, :]
    # rows: reconstruction i, columns: raw descriptor j
    neg_raw, idx_raw = _hardest(xh, x, exclude)
    neg_d, idx_d = _hardest(xh, xh, exclude)
    return NegativeMining(neg_raw, neg_d, idx_raw, idx_d)


def _unit(diff: np.ndarray, norm: np.ndarray) -> np.ndarray:
    safe = np.where(norm > 0, norm, 1.0)[:, None]
    return np.where(norm[:, None] > 0, diff / safe, 0.0)


def _negative_distances(x: np.ndarray, xh: np.ndarray, mining: NegativeMining) -> Tuple[np.ndarray, np.ndarray]:
    """Distances to the mined negatives at the current x̂ (inf where none was found)"""
    rows = np.arange(x.shape[0])
    j = np.where(mining.idx_raw >= 0, mining.idx_raw, rows)
    k = np.where(mining.idx_d >= 0, mining.idx_d, rows)
    neg_raw = np.where(mining.idx_raw >= 0, row_distances(xh, x[j]), np.inf)
    neg_d = np.where(mining.idx_d >= 0, row_distances(xh, xh[k]), np.inf)
    return neg_raw, neg_d


def triplet_terms(
    batch_x: np.ndarray, batch_xh: np.ndarray, margin: float, mining: NegativeMining
) -> TripletTerms:
    x, xh = _pair(batch_x, batch_xh)
    pos = positive_distances(x, xh)
    neg_raw, neg_d = _negative_distances(x, xh, mining)
    l_raw = np.maximum(margin + pos - neg_raw, 0.0).mean()
    l_d = np.maximum(margin + pos - neg_d, 0.0).mean()
    return TripletTerms(float(l_raw), float(l_d))


def triplet_combined(
    batch_x: np.ndarray,
    batch_xh: np.ndarray,
    cfg: LossConfig,
    mining: Optional[NegativeMining] = None,
    group_ids: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray]:
    """L_raw + λ·L_d and its gradient w.r.t. batch_xh; pass ``mining`` to freeze the negatives"""
    x, xh = _pair(batch_x, batch_xh)
    if mining is None:
        mining = mine_negatives(x, xh, group_ids)
    n = x.shape[0]
    rows = np.arange(n)

    pos = positive_distances(x, xh)
    u_pos = _unit(xh - x, pos)
    neg_raw, neg_d = _negative_distances(x, xh, mining)

    active_raw = (cfg.margin + pos - neg_raw > 0) & (mining.idx_raw >= 0)
    active_d = (cfg.margin + pos - neg_d > 0) & (mining.idx_d >= 0)
    l_raw = np.maximum(cfg.margin + pos - neg_raw, 0.0).mean()
    l_d = np.maximum(cfg.margin + pos - neg_d, 0.0).mean()
    loss = l_raw + cfg.lambda_d * l_d

    grad = np.zeros_like(xh)
    j = np.where(mining.idx_raw >= 0, mining.idx_raw, rows)
    u_raw = _unit(xh - x[j], np.where(np.isfinite(neg_raw), neg_raw, 0.0))
    grad += active_raw[:, None] * (u_pos - u_raw) / n

    k = np.where(mining.idx_d >= 0, mining.idx_d, rows)
    u_d = _unit(xh - xh[k], np.where(np.isfinite(neg_d), neg_d, 0.0))
    coef = cfg.lambda_d * active_d[:, None] / n
    grad += coef * (u_pos - u_d)
    np.add.at(grad, k, coef * u_d)
    return float(loss), grad


def l2_loss(batch_x: np.ndarray, batch_xh: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean over rows of ‖x̂ − x‖²"""
    x, xh = _pair(batch_x, batch_xh)
    diff = xh - x
    n = x.shape[0]
    return float(np.einsum("ij,ij->", diff, diff) / n), 2.0 * diff / n


def _logsumexp_with_zero(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """log(1 + Σ_j exp z_j) per row and the softmax weights of the z_j terms"""
    top = np.maximum(z.max(axis=1), 0.0)
    e = np.exp(z - top[:, None])
    base = np.exp(-top)
    total = base + e.sum(axis=1)
    return top + np.log(total), e / total[:, None]


def npair_loss(
    anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray
) -> Tuple[float, NPairGrads]:
    """mean_i log[1 + Σ_j exp(f_i·f⁻_ij − f_i·f⁺_i)] with negatives shaped (N, N−1, D)"""
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if a.shape != p.shape or neg.ndim != 3 or neg.shape[0] != a.shape[0] or neg.shape[2] != a.shape[1]:
        raise DimensionError(
            f"N-pair shapes inconsistent: anchors {a.shape}, positives {p.shape}, negatives {neg.shape}"
        )
    n = a.shape[0]
    pos_sim = np.einsum("nd,nd->n", a, p)
    neg_sim = np.einsum("nd,njd->nj", a, neg)
    per_row, w = _logsumexp_with_zero(neg_sim - pos_sim[:, None])
    loss = float(per_row.mean())

    g_anchor = (np.einsum("nj,njd->nd", w, neg) - w.sum(axis=1)[:, None] * p) / n
    g_pos = -(w.sum(axis=1)[:, None] * a) / n
    g_neg = (w[:, :, None] * a[:, None, :]) / n
    return loss, NPairGrads(g_anchor, g_pos, g_neg)


def npair_batch(
    batch_x: np.ndarray, batch_xh: np.ndarray, n_pairs: int, group_ids: Optional[np.ndarray] = None
) -> Tuple[float, np.ndarray]:
    """N-pair loss on a reconstruction batch: anchor x̂_i, positive x_i, negatives the
    n_pairs − 1 raw descriptors most similar to x̂_i (excluding row i). Gradient is w.r.t. x̂."""
    x, xh = _pair(batch_x, batch_xh)
    n = x.shape[0]
    exclude = np.eye(n, dtype=bool)
    if group_ids is not None:
        g = np.asarray(group_ids)
        exclude |= g[:, None] == g[None, :]
    n_neg = min(n_pairs - 1, int((~exclude).sum(axis=1).min()))
    if n_neg < 1:
        raise BatchTooSmallError(f"N-pair loss needs a negative for every row, batch has {n} rows")
    sim = np.where(exclude, -np.inf, xh @ x.T)
    order = np.argsort(-sim, axis=1, kind="stable")[:, :n_neg]
    loss, grads = npair_loss(xh, x, x[order])
    return loss, grads.anchors


def loss_and_grad(
    batch_x: np.ndarray, batch_xh: np.ndarray, cfg: LossConfig, group_ids: Optional[np.ndarray] = None
) -> Tuple[float, np.ndarray]:
    if cfg.variant == "triplet_combined":
        return triplet_combined(batch_x, batch_xh, cfg, group_ids=group_ids)
    if cfg.variant == "l2":
        return l2_loss(batch_x, batch_xh)
    return npair_batch(batch_x, batch_xh, cfg.npair_n, group_ids)
