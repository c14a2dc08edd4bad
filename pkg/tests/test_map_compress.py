import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from app.core.codebook import save_codebook
from app.core.decoder import init_decoder, save_decoder
from app.core.descriptor_store import ScenePointSet, synth_scene
from app.core.errors import ConfigError, InfeasibleBudgetError, InfeasibleError
from app.core.map_compress import (
    CompressionProblem,
    build_kernel,
    compress_scene,
    default_sigma,
    model_overhead_bytes,
    normalize_distinctiveness,
    plan_budget,
    project_capped_simplex,
    save_selection,
    select_points,
    solve_map_qp,
)


def _scene(positions, distinctiveness=None):
    positions = np.asarray(positions, dtype=np.float64)
    if distinctiveness is None:
        distinctiveness = np.full(positions.shape[0], 0.5)
    return ScenePointSet(positions=positions, distinctiveness=np.asarray(distinctiveness, dtype=np.float64))


def _feasible_points(rng, m, cap, count):
    """Dirichlet samples inside the box; the cap is generous enough that most survive"""
    samples = rng.dirichlet(np.ones(m), size=count)
    return samples[samples.max(axis=1) <= cap]


def _random_problem(rng, m=5, alpha=0.5):
    scene = _scene(rng.normal(size=(m, 3)), rng.uniform(size=m))
    return CompressionProblem(
        kernel=build_kernel(scene, sigma=1.0),
        distinctiveness=normalize_distinctiveness(scene.distinctiveness),
        tau_qp=1.0,
        alpha=alpha,
    )


class TestKernel:
    def test_coincident_points(self):
        kernel = build_kernel(_scene([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]), sigma=0.7)
        assert_array_equal(kernel, np.ones((2, 2)))

    def test_unit_exponent(self):
        kernel = build_kernel(_scene([[0.0, 0.0, 0.0], [2.0 * math.sqrt(2.0), 0.0, 0.0]]), sigma=2.0)
        assert kernel[0, 1] == pytest.approx(math.exp(-1.0), rel=1e-12)

    def test_rbf_kernel_is_positive_semidefinite(self, rng):
        kernel = build_kernel(_scene(rng.normal(size=(40, 3))), sigma=0.8)
        assert_allclose(kernel, kernel.T, atol=0)
        assert np.linalg.eigvalsh(kernel).min() > -1e-10

    def test_distance_kernel(self):
        kernel = build_kernel(_scene([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]), sigma=1.0, kind="distance")
        assert_allclose(kernel, [[0.0, 5.0], [5.0, 0.0]])

    def test_bad_parameters(self):
        scene = _scene([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        with pytest.raises(ConfigError):
            build_kernel(scene, sigma=0.0)
        with pytest.raises(ConfigError):
            build_kernel(scene, sigma=1.0, kind="laplace")

    def test_default_sigma(self):
        assert default_sigma(_scene([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])) == 1.0
        assert default_sigma(_scene([[0.0, 0.0, 0.0], [0.0, 2.0, 0.0]])) == pytest.approx(2.0)

    def test_problem_needs_symmetric_kernel(self):
        with pytest.raises(ValidationError):
            CompressionProblem(kernel=np.array([[1.0, 0.5], [0.2, 1.0]]), distinctiveness=np.zeros(2), alpha=1.0)


class TestProjection:
    def test_already_feasible(self):
        v = np.array([0.2, 0.3, 0.5])
        assert_allclose(project_capped_simplex(v, cap=0.6), v, atol=1e-15)

    def test_pinched_set_is_uniform(self, rng):
        assert_array_equal(project_capped_simplex(rng.normal(size=4), cap=0.25), np.full(4, 0.25))

    def test_unit_case(self):
        assert_allclose(project_capped_simplex(np.array([1.0, 0.0, 0.0]), cap=0.5), [0.5, 0.25, 0.25], atol=1e-9)

    def test_infeasible_cap(self):
        with pytest.raises(InfeasibleError):
            project_capped_simplex(np.zeros(4), cap=0.2)

    def test_constraints_hold(self, rng):
        for _ in range(50):
            v = project_capped_simplex(rng.normal(scale=3.0, size=20), cap=0.1)
            assert abs(v.sum() - 1.0) < 1e-9
            assert v.min() >= 0.0 and v.max() <= 0.1

    def test_closer_than_random_feasible_points(self, rng):
        m, cap = 6, 0.5
        candidates = _feasible_points(rng, m, cap, 10_000)
        for _ in range(10):
            target = rng.normal(size=m)
            projected = project_capped_simplex(target, cap)
            best = np.min(np.linalg.norm(candidates - target, axis=1))
            assert np.linalg.norm(projected - target) <= best + 1e-12


class TestSolver:
    def test_full_alpha_is_uniform(self, rng):
        problem = _random_problem(rng, m=6, alpha=1.0)
        solution = solve_map_qp(problem)
        m = problem.m
        expected = problem.kernel.sum() / m ** 2 - problem.tau_qp * problem.distinctiveness.sum() / m
        assert_allclose(solution.v, np.full(m, 1.0 / m), atol=1e-12)
        assert solution.objective == pytest.approx(expected, abs=1e-12)

    def test_equidistant_points_without_distinctiveness(self):
        m = 4
        kernel = np.full((m, m), 0.3)
        np.fill_diagonal(kernel, 1.0)
        problem = CompressionProblem(kernel=kernel, distinctiveness=np.zeros(m), tau_qp=0.0, alpha=0.5)
        uniform = problem.objective(np.full(m, 1.0 / m))
        assert solve_map_qp(problem).objective <= uniform + 1e-9

    def test_beats_random_feasible_points(self, rng):
        for _ in range(50):
            problem = _random_problem(rng, m=5, alpha=0.5)
            candidates = _feasible_points(rng, 5, problem.cap, 100_000)
            values = np.einsum("ni,ij,nj->n", candidates, problem.kernel, candidates)
            values -= problem.tau_qp * (candidates @ problem.distinctiveness)
            assert solve_map_qp(problem).objective <= values.min() + 1e-6

    def test_history_never_increases(self, rng):
        problem = _random_problem(rng, m=30, alpha=0.2)
        history = np.array(solve_map_qp(problem, iters=100).history)
        assert np.all(np.diff(history) <= 0.0)

    def test_solution_is_feasible(self, rng):
        problem = _random_problem(rng, m=30, alpha=0.2)
        v = solve_map_qp(problem).v
        assert abs(v.sum() - 1.0) < 1e-9
        assert v.min() >= 0.0 and v.max() <= problem.cap


class TestSelection:
    def test_uniform_at_full_alpha(self):
        assert_array_equal(np.sort(select_points(np.full(7, 1 / 7), 1.0, np.zeros(7))), np.arange(7))

    def test_mass_at_cap(self):
        v = np.zeros(10)
        v[[2, 5, 7]] = 1.0 / 3.0
        assert_array_equal(np.sort(select_points(v, 0.3, np.zeros(10))), [2, 5, 7])

    def test_ties_prefer_distinctive_then_lower_index(self):
        v = np.full(4, 0.25)
        d = np.array([0.1, 0.9, 0.1, 0.5])
        assert_array_equal(select_points(v, 0.5, d), [1, 3])
        assert_array_equal(select_points(v, 0.75, np.zeros(4)), [0, 1, 2])

    def test_never_more_than_alpha_share(self, rng):
        for alpha in (0.1, 0.25, 0.6):
            problem = _random_problem(rng, m=40, alpha=alpha)
            chosen = select_points(solve_map_qp(problem, iters=50).v, alpha, rng.uniform(size=40))
            assert 0 < chosen.size <= math.ceil(alpha * 40)
            assert np.unique(chosen).size == chosen.size

    def test_alpha_range(self):
        with pytest.raises(ConfigError):
            select_points(np.full(2, 0.5), 0.0, np.zeros(2))


class TestBudget:
    def test_full_budget(self):
        plan = plan_budget(4_000_000, N=1_000_000, M=4, K=256)
        assert plan.alpha == 1.0
        assert plan.code_bytes_total == 4_000_000
        assert plan.selected_count == 1_000_000

    def test_half_budget(self):
        assert plan_budget(2_000_000, N=1_000_000, M=4, K=256).alpha == 0.5

    def test_coarser_codes_keep_more_points(self):
        coarse = plan_budget(1_000_000, N=1_000_000, M=2, K=256)
        fine = plan_budget(1_000_000, N=1_000_000, M=4, K=256)
        finest = plan_budget(1_000_000, N=1_000_000, M=32, K=256)
        assert coarse.alpha == 2.0 * fine.alpha == 16.0 * finest.alpha

    def test_overhead_reduces_alpha(self):
        plan = plan_budget(3_000_000, N=1_000_000, M=4, K=256, overhead_bytes=1_000_000)
        assert plan.alpha == 0.5
        assert plan.selected_count == 500_000

    def test_overhead_exceeds_budget(self):
        with pytest.raises(InfeasibleBudgetError):
            plan_budget(1000, N=10, M=4, K=256, overhead_bytes=1000)

    def test_overhead_is_stored_model_size(self, tmp_path, small_codebook):
        decoder = init_decoder(16, 32, seed=0)
        save_codebook(small_codebook, tmp_path / "m.cbk")
        save_decoder(decoder, tmp_path / "m.dec")
        expected = (tmp_path / "m.cbk").stat().st_size + (tmp_path / "m.dec").stat().st_size
        assert model_overhead_bytes(small_codebook, decoder) == expected
        assert model_overhead_bytes(small_codebook) == (tmp_path / "m.cbk").stat().st_size


class TestCompressScene:
    def test_selection_size(self):
        scene = synth_scene(m=200, n_clusters=8, seed=1)
        result = compress_scene(scene, alpha=0.25)
        assert 0 < result.selected.size <= 50
        assert np.unique(result.selected).size == result.selected.size
        assert result.total_points == result.solved_points == 200

    def test_full_alpha_keeps_everything(self):
        scene = synth_scene(m=60, n_clusters=4, seed=2)
        assert_array_equal(np.sort(compress_scene(scene, alpha=1.0).selected), np.arange(60))

    def test_large_scene_is_subsampled(self):
        scene = synth_scene(m=300, n_clusters=6, seed=3)
        result = compress_scene(scene, alpha=0.5, max_points=100, seed=4)
        assert result.solved_points == 100 and result.total_points == 300
        assert result.solved_alpha == 1.0
        assert result.selected.size == 150
        assert np.unique(result.selected).size == 150
        assert result.selected.max() < 300
        again = compress_scene(scene, alpha=0.5, max_points=100, seed=4)
        assert_array_equal(result.selected, again.selected)

    def test_subsample_keeps_absolute_count(self):
        scene = synth_scene(m=300, n_clusters=6, seed=3)
        result = compress_scene(scene, alpha=0.2, max_points=100, seed=4)
        assert result.solved_alpha == pytest.approx(0.6)
        assert 0 < result.selected.size <= 60
        assert result.summary()["solved_alpha"] == result.solved_alpha

    def test_full_alpha_keeps_everything_when_subsampled(self):
        scene = synth_scene(m=300, n_clusters=6, seed=3)
        result = compress_scene(scene, alpha=1.0, max_points=100, seed=4)
        assert_array_equal(np.sort(result.selected), np.arange(300))

    def test_alpha_range(self):
        with pytest.raises(ConfigError):
            compress_scene(synth_scene(m=20, n_clusters=2, seed=0), alpha=1.5)

    def test_saved_selection(self, tmp_path):
        result = compress_scene(synth_scene(m=80, n_clusters=4, seed=5), alpha=0.3, kind="distance")
        indices_path, summary_path = save_selection(result, tmp_path / "keep.txt")
        lines = indices_path.read_text().splitlines()
        assert [int(line) for line in lines] == result.selected.tolist()
        summary = json.loads(summary_path.read_text())
        assert list(summary) == sorted(summary)
        assert summary["selected_count"] == len(lines)
        assert summary["kernel"] == "distance"
