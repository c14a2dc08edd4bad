"""Dense linear algebra helpers, seeded RNG, Adam and a finite-difference checker.

Matrices are plain float64 numpy arrays; the helpers here validate shapes and
finiteness so that errors surface as DimensionError/NumericError.
"""
from typing import Callable, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import DimensionError, NumericError

logger = logging.getLogger(__name__)

Matrix = np.ndarray

# Rows per block for pairwise computations; keeps block * cols * dim bounded.
_BLOCK_ELEMENTS = 4_000_000


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; every random draw in the package goes through one of these."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(values, name: str = "matrix") -> Matrix:
    """Coerce to a finite 2-D float64 array"""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"Cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_blocks(n_rows: int, per_row: int):
    """Yield slices covering n_rows so that each block holds about _BLOCK_ELEMENTS values"""
    step = max(1, _BLOCK_ELEMENTS // max(1, per_row))
    for start in range(0, n_rows, step):
        yield slice(start, min(n_rows, start + step))


def squared_distances(a: Matrix, b: Matrix) -> Matrix:
    """Exact ‖a_i − b_j‖² computed from differences, row-blocked"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"Dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for block in row_blocks(a.shape[0], b.shape[0] * max(1, b.shape[1])):
        diff = a[block, None, :] - b[None, :, :]
        out[block] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def pairwise_distances(a: Matrix, b: Matrix) -> Matrix:
    return np.sqrt(squared_distances(a, b))


def fast_squared_distances(a: Matrix, b: Matrix) -> Matrix:
    """‖a‖² + ‖b‖² − 2a·b clipped at zero; for ranking only, exact values come from
    squared_distances or row_distances"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"Dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    sq = np.einsum("ij,ij->i", a, a)[:, None] + np.einsum("ij,ij->i", b, b)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(sq, 0.0)


def row_distances(a: Matrix, b: Matrix) -> Matrix:
    """‖a_i − b_i‖ for paired rows"""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def l2_normalize(x: Matrix) -> Matrix:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms = np.where(norms == 0, 1.0, norms)
    return x / norms


class AdamState(BaseModel):
    """Moments and hyperparameters of one Adam instance"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    step: int = Field(0, ge=0)
    m: np.ndarray
    v: np.ndarray
    lr: float = Field(0.001, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)

    @model_validator(mode="after")
    def _moments_agree(self):
        if self.m.shape != self.v.shape:
            raise ValueError(f"moment shapes differ: {self.m.shape} vs {self.v.shape}")
        return self

    @classmethod
    def zeros(cls, shape, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, param: Matrix, grad: Matrix) -> Tuple[AdamState, Matrix]:
    """One bias-corrected Adam update. Pure: returns a new state and a new parameter."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise DimensionError(
            f"Adam shapes disagree: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NumericError("Adam received a non-finite gradient")

    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    updated = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state.model_copy(update={"step": t, "m": m, "v": v}), updated


def finite_diff_check(
    f: Callable[[Matrix], float],
    x: Matrix,
    analytic_grad: Matrix,
    h: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Max elementwise relative error between ``analytic_grad`` and central differences of ``f``.

    Element i contributes |a_i − n_i| / max(|n_i|, floor), so a gradient off by a
    factor of two anywhere reports 1.0. Numerical entries smaller than ``floor``
    are measured against ``floor`` instead.
    """
    if h <= 0:
        raise NumericError(f"Step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != x.shape:
        raise DimensionError(f"Gradient shape {analytic.shape} does not match input {x.shape}")

    numeric = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_num = numeric.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + h
        f_plus = float(f(x))
        flat_x[i] = original - h
        f_minus = float(f(x))
        flat_x[i] = original
        flat_num[i] = (f_plus - f_minus) / (2.0 * h)

    if not numeric.size:
        return 0.0
    relative = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)
    return float(np.max(relative))
