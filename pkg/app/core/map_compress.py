"""Scene point selection as a box-simplex QP, and the memory budget planner.

The QP is  min_v vᵀKv − τ·dᵀv  subject to Σv = 1 and 0 ≤ v_i ≤ 1/(α·m).
With the default RBF kernel, mass spreads over mutually distant points while
τ pulls it toward distinctive ones; points keeping non-negligible mass are
selected.
"""
from pathlib import Path
from typing import List, Literal, NamedTuple, Optional, Tuple
import json
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .binary_format import write_atomic
from .codebook import Codebook, code_bits, codebook_to_bytes
from .decoder import DecoderWeights, decoder_to_bytes
from .descriptor_store import ScenePointSet
from .errors import ConfigError, DegenerateInputError, InfeasibleBudgetError, InfeasibleError, NumericError
from .numerics import make_rng, squared_distances

logger = logging.getLogger(__name__)

KernelKind = Literal["rbf", "distance"]

DEFAULT_QP_ITERS = 500
SIGMA_SAMPLE = 1000
SELECT_THRESHOLD = 1e-6
_SYMMETRY_TOL = 1e-9
_POLISH_LIMIT = 2000


class CompressionProblem(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kernel: np.ndarray
    distinctiveness: np.ndarray
    tau_qp: float = Field(1.0, ge=0)
    alpha: float = Field(gt=0, le=1)

    @model_validator(mode="after")
    def _check(self):
        k = np.asarray(self.kernel)
        m = k.shape[0] if k.ndim == 2 else -1
        if k.ndim != 2 or k.shape != (m, m) or m < 1:
            raise ValueError(f"kernel must be a non-empty square matrix, got shape {k.shape}")
        if np.max(np.abs(k - k.T)) > _SYMMETRY_TOL:
            raise ValueError("kernel must be symmetric")
        if np.shape(self.distinctiveness) != (m,):
            raise ValueError(f"expected {m} distinctiveness values, got {np.shape(self.distinctiveness)}")
        return self

    @property
    def m(self) -> int:
        return int(self.kernel.shape[0])

    @property
    def cap(self) -> float:
        return 1.0 / (self.alpha * self.m)

    def objective(self, v: np.ndarray) -> float:
        return float(v @ self.kernel @ v - self.tau_qp * (self.distinctiveness @ v))

    def gradient(self, v: np.ndarray) -> np.ndarray:
        return 2.0 * (self.kernel @ v) - self.tau_qp * self.distinctiveness


class QPSolution(NamedTuple):
    v: np.ndarray
    objective: float
    history: List[float]


class CompressionPlan(BaseModel):
    """Budget split: codes of the kept descriptors plus a fixed model overhead"""

    budget_bytes: float = Field(gt=0)
    pq_level: int = Field(ge=1)
    K: int = Field(ge=1)
    descriptor_count: int = Field(ge=1)
    overhead_bytes: float = Field(0.0, ge=0)
    code_bytes_total: float
    alpha: float = Field(gt=0, le=1)
    selected_count: int


class CompressionResult(BaseModel):
    """Outcome of compress_scene; indices refer to the input scene"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    selected: np.ndarray
    objective: float
    alpha: float
    solved_alpha: float
    sigma: float
    kind: KernelKind
    total_points: int
    solved_points: int
    iterations: int

    def summary(self) -> dict:
        return {
            "alpha": self.alpha,
            "iterations": self.iterations,
            "kernel": self.kind,
            "objective": self.objective,
            "selected_count": int(self.selected.size),
            "sigma": self.sigma,
            "solved_alpha": self.solved_alpha,
            "solved_points": self.solved_points,
            "total_points": self.total_points,
        }


def build_kernel(scene: ScenePointSet, sigma: float, kind: KernelKind = "rbf") -> np.ndarray:
    """RBF similarity exp(−‖p_i − p_j‖²/(2σ²)), or the plain distance matrix for kind="distance" """
    sq = squared_distances(scene.positions, scene.positions)
    if kind == "distance":
        return np.sqrt(sq)
    if kind != "rbf":
        raise ConfigError(f"Unknown kernel kind {kind!r}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    return np.exp(-sq / (2.0 * sigma * sigma))


def default_sigma(scene: ScenePointSet, seed: int = 0, sample: int = SIGMA_SAMPLE) -> float:
    """Median pairwise distance over a seeded subsample of at most ``sample`` points"""
    positions = scene.positions
    if scene.m > sample:
        rows = np.sort(make_rng(seed).choice(scene.m, size=sample, replace=False))
        positions = positions[rows]
    if positions.shape[0] < 2:
        return 1.0
    dist = np.sqrt(squared_distances(positions, positions))
    median = float(np.median(dist[np.triu_indices(positions.shape[0], k=1)]))
    if median <= 0:
        logger.warning("Median pairwise distance is zero, using sigma = 1")
        return 1.0
    return median


def normalize_distinctiveness(d: np.ndarray) -> np.ndarray:
    """Zero mean, largest magnitude 1 (all-equal input maps to zeros)"""
    d = np.asarray(d, dtype=np.float64)
    centered = d - d.mean()
    peak = float(np.max(np.abs(centered))) if centered.size else 0.0
    return centered / peak if peak > 0 else centered


def _clip_sum(x: np.ndarray, shift: float, cap: float) -> float:
    return float(np.clip(x - shift, 0.0, cap).sum())


def project_capped_simplex(v: np.ndarray, cap: float) -> np.ndarray:
    """Euclidean projection onto {Σv = 1, 0 ≤ v ≤ cap}.

    Bisection on the shift λ of clip(v − λ, 0, cap), then the shift is solved
    exactly on the detected free set.
    """
    x = np.asarray(v, dtype=np.float64).ravel()
    m = x.size
    if m == 0 or cap * m < 1.0 - 1e-12:
        raise InfeasibleError(f"Capped simplex is empty: cap={cap} with m={m}")
    if not np.all(np.isfinite(x)):
        raise NumericError("Cannot project a vector with non-finite entries")
    if abs(cap * m - 1.0) <= 1e-12:
        return np.full(m, 1.0 / m)

    lo, hi = float(x.min()) - cap, float(x.max())
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _clip_sum(x, mid, cap) > 1.0:
            lo = mid
        else:
            hi = mid
    shift = 0.5 * (lo + hi)

    for _ in range(5):
        free = (x - shift > 0.0) & (x - shift < cap)
        if not free.any():
            break
        upper = int(np.count_nonzero(x - shift >= cap))
        exact = (float(x[free].sum()) + upper * cap - 1.0) / int(np.count_nonzero(free))
        if exact == shift:
            break
        if abs(_clip_sum(x, exact, cap) - 1.0) > abs(_clip_sum(x, shift, cap) - 1.0):
            break
        shift = exact
    return np.clip(x - shift, 0.0, cap)


def _polish(problem: CompressionProblem, v: np.ndarray) -> Optional[np.ndarray]:
    """Solve the KKT system on the free coordinates of ``v``; None if the result leaves the box"""
    cap = problem.cap
    tol = 1e-9 * cap
    free = (v > tol) & (v < cap - tol)
    n_free = int(np.count_nonzero(free))
    if n_free == 0:
        return None
    fixed = np.where(v >= cap - tol, cap, 0.0)
    fixed[free] = 0.0
    K = problem.kernel
    system = np.zeros((n_free + 1, n_free + 1))
    system[:n_free, :n_free] = 2.0 * K[np.ix_(free, free)]
    system[:n_free, n_free] = 1.0
    system[n_free, :n_free] = 1.0
    rhs = np.empty(n_free + 1)
    rhs[:n_free] = problem.tau_qp * problem.distinctiveness[free] - 2.0 * (K[free] @ fixed)
    rhs[n_free] = 1.0 - fixed.sum()
    solution = np.linalg.lstsq(system, rhs, rcond=None)[0]
    candidate = fixed.copy()
    candidate[free] = solution[:n_free]
    if np.any(candidate < -1e-12) or np.any(candidate > cap + 1e-12):
        return None
    candidate = np.clip(candidate, 0.0, cap)
    if abs(candidate.sum() - 1.0) > 1e-9:
        return None
    return candidate


def solve_map_qp(
    problem: CompressionProblem, iters: int = DEFAULT_QP_ITERS, step: Optional[float] = None
) -> QPSolution:
    """Projected gradient descent from the uniform point with backtracking.

    Accepted iterates never increase the objective; the best point seen is
    returned. Small problems get a final exact solve on the detected active set.
    """
    m, cap = problem.m, problem.cap
    v = np.full(m, 1.0 / m)
    f = problem.objective(v)
    if not math.isfinite(f):
        raise NumericError("QP objective is not finite at the starting point")
    if step is None:
        # 1/L with L = 2‖K‖₂ bounded by the largest absolute row sum
        lipschitz = 2.0 * float(np.max(np.abs(problem.kernel).sum(axis=1)))
        step = 1.0 / lipschitz if lipschitz > 0 else 1.0
    if step <= 0:
        raise ConfigError(f"QP step must be positive, got {step}")

    history = [f]
    t = step
    done = 0
    for done in range(1, iters + 1):
        grad = problem.gradient(v)
        accepted = False
        for _ in range(60):
            candidate = project_capped_simplex(v - t * grad, cap)
            delta = candidate - v
            f_new = problem.objective(candidate)
            if not math.isfinite(f_new):
                raise NumericError(f"QP objective became non-finite at iteration {done}")
            if f_new <= f + grad @ delta + (delta @ delta) / (2.0 * t) and f_new <= f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        moved = float(np.sqrt(delta @ delta))
        v, f = candidate, f_new
        history.append(f)
        if moved <= 1e-12:
            break

    if m <= _POLISH_LIMIT:
        polished = _polish(problem, v)
        if polished is not None and problem.objective(polished) < f:
            v, f = polished, problem.objective(polished)
            history.append(f)

    logger.info(f"QP over {m} points: objective {history[0]:.6g} -> {f:.6g} after {done} iterations")
    return QPSolution(v=v, objective=f, history=history)


def select_points(v: np.ndarray, alpha: float, distinctiveness: np.ndarray) -> np.ndarray:
    """Indices with non-negligible mass, by v descending then distinctiveness descending then index.

    At most ⌈α·m⌉ indices are returned.
    """
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(distinctiveness, dtype=np.float64)
    m = v.size
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    cap = 1.0 / (alpha * m)
    keep = math.ceil(alpha * m - 1e-9)
    candidates = np.flatnonzero(v > SELECT_THRESHOLD * cap)
    order = np.lexsort((candidates, -d[candidates], -v[candidates]))
    return candidates[order][:keep].astype(np.int64)


def plan_budget(
    budget_bytes: float, N: int, M: int, K: int, overhead_bytes: float = 0.0
) -> CompressionPlan:
    """α = (budget − overhead) / (N·M·log2(K)/8), capped at 1"""
    if N < 1:
        raise ConfigError(f"descriptor count must be positive, got {N}")
    if overhead_bytes >= budget_bytes:
        raise InfeasibleBudgetError(
            f"Model overhead of {overhead_bytes} bytes does not fit the budget of {budget_bytes} bytes"
        )
    code_total = N * code_bits(M, K) / 8.0
    available = budget_bytes - overhead_bytes
    alpha = 1.0 if code_total <= 0 else min(1.0, available / code_total)
    plan = CompressionPlan(
        budget_bytes=budget_bytes,
        pq_level=M,
        K=K,
        descriptor_count=N,
        overhead_bytes=overhead_bytes,
        code_bytes_total=code_total,
        alpha=alpha,
        selected_count=math.ceil(alpha * N - 1e-9),
    )
    logger.info(f"Budget {budget_bytes} bytes, M={M}, K={K}, N={N}: alpha={alpha:.6g}")
    return plan


def model_overhead_bytes(codebook: Codebook, decoder: Optional[DecoderWeights] = None) -> int:
    """Stored size of the codebook and decoder files"""
    total = len(codebook_to_bytes(codebook))
    if decoder is not None:
        total += len(decoder_to_bytes(decoder))
    return total


def _fill_unsolved(scene: ScenePointSet, solved_rows: np.ndarray, alpha: float) -> np.ndarray:
    """Points outside the subsample, most distinctive first, up to ⌈α·m⌉ selected overall"""
    rest = np.setdiff1d(np.arange(scene.m), solved_rows)
    order = np.lexsort((rest, -scene.distinctiveness[rest]))
    extra = math.ceil(alpha * scene.m - 1e-9) - solved_rows.size
    return rest[order][:max(extra, 0)].astype(np.int64)


def compress_scene(
    scene: ScenePointSet,
    alpha: float,
    tau_qp: float = 1.0,
    sigma: Optional[float] = None,
    kind: KernelKind = "rbf",
    iters: int = DEFAULT_QP_ITERS,
    max_points: int = 50000,
    seed: int = 0,
) -> CompressionResult:
    """Kernel, QP and selection end to end; scenes above ``max_points`` are subsampled first.

    On a subsample the QP keeps the same absolute count: it is solved with
    α·m/max_points (capped at 1). When that cap is hit the whole subsample is
    kept and the remaining points are filled by distinctiveness descending,
    then index, so α = 1 always keeps every point.
    """
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    rows = np.arange(scene.m)
    working = scene
    solved_alpha = alpha
    if scene.m > max_points:
        rows = np.sort(make_rng(seed).choice(scene.m, size=max_points, replace=False))
        working = ScenePointSet(
            positions=scene.positions[rows],
            distinctiveness=scene.distinctiveness[rows],
            total_images=scene.total_images,
        )
        solved_alpha = min(1.0, alpha * scene.m / max_points)
        logger.warning(f"Scene has {scene.m} points, solving on a seeded subsample of {max_points}")
    if sigma is None:
        sigma = default_sigma(working, seed)
    if kind == "rbf" and sigma <= 0:
        raise DegenerateInputError(f"Kernel width must be positive, got {sigma}")

    kernel = build_kernel(working, sigma, kind)
    d = normalize_distinctiveness(working.distinctiveness)
    problem = CompressionProblem(kernel=kernel, distinctiveness=d, tau_qp=tau_qp, alpha=solved_alpha)
    solution = solve_map_qp(problem, iters)
    selected = rows[select_points(solution.v, solved_alpha, working.distinctiveness)]
    if working.m < scene.m and solved_alpha == 1.0:
        selected = np.concatenate([selected, _fill_unsolved(scene, rows, alpha)])
    logger.info(f"Selected {selected.size} of {scene.m} scene points (alpha={alpha}, solved at {solved_alpha:.6g})")
    return CompressionResult(
        selected=selected,
        objective=solution.objective,
        alpha=alpha,
        solved_alpha=solved_alpha,
        sigma=float(sigma),
        kind=kind,
        total_points=scene.m,
        solved_points=working.m,
        iterations=len(solution.history) - 1,
    )


def save_selection(result: CompressionResult, path: Path) -> Tuple[Path, Path]:
    """Indices one per line at ``path``; the summary as sorted-key JSON at ``<path>.summary.json``"""
    path = Path(path)
    summary_path = Path(f"{path}.summary.json")
    write_atomic(path, "".join(f"{int(i)}\n" for i in result.selected).encode("utf-8"))
    write_atomic(summary_path, (json.dumps(result.summary(), sort_keys=True, indent=2) + "\n").encode("utf-8"))
    return path, summary_path
