import math

import numpy as np
import pytest

from registration.models.cloud import RigidTransform, NeighborGraph
from registration.models.mixture import (
    MixtureState, PosteriorMatrix, RegistrationConfig, ConvergedBy,
    InvalidConfigError, PosteriorCollapseError, DegenerateGeometryError,
)
from registration.services.geometry import apply_transform, kabsch
from registration.services.metrics import transform_rmse
from registration.services.mixture import (
    init_state, e_step, pairwise_divergence, local_consistency, objective,
    weighted_centroids, cross_covariance, update_rotation, unclamped_variances,
    update_variances, register, squared_distances,
)
from registration.services.spatial import build_knn_graph
from registration.services.synth import euler_zyx

from conftest import random_rotation, random_transform


def random_instance(rng, n, m, omega, volume=50.0):
    x = rng.normal(size=(n, 3))
    y = rng.normal(size=(m, 3))
    transform = random_transform(rng, trans_scale=0.5)
    state = MixtureState(
        variances=rng.uniform(0.5, 2.0, m),
        outlier_weight=omega,
        volume=volume,
        variance_floor=1e-6,
    )
    return x, y, transform, state


def loop_posterior(x, y, transform, state):
    """Direct per-entry evaluation of the responsibilities, one row at a time."""
    moved = apply_transform(y, transform).points
    n, m = x.shape[0], y.shape[0]
    rows = np.zeros((n, m + 1))
    for i in range(n):
        logs = []
        for k in range(m):
            d = sum((x[i, c] - moved[k, c]) ** 2 for c in range(3))
            sigma2 = state.variances[k]
            prior = (1.0 - state.outlier_weight) / m
            logs.append(math.log(prior) - 1.5 * math.log(2 * math.pi * sigma2) - d / (2 * sigma2)
                        if prior > 0 else -math.inf)
        logs.append(math.log(state.outlier_weight / state.volume) if state.outlier_weight > 0 else -math.inf)
        top = max(logs)
        weights = [math.exp(v - top) if v > -math.inf else 0.0 for v in logs]
        total = sum(weights)
        rows[i] = [w / total for w in weights]
    return rows


def direct_symmetric_kl(p_i, p_j):
    forward = np.sum(p_i * (np.log(p_i) - np.log(p_j)))
    backward = np.sum(p_j * (np.log(p_j) - np.log(p_i)))
    return 0.5 * (forward + backward)


class TestPosteriorMatrix:

    def test_accepts_normalized_rows(self):
        posterior = PosteriorMatrix(np.array([[0.25, 0.75, 0.0], [0.0, 0.0, 1.0]]))
        assert posterior.shape == (2, 3)
        np.testing.assert_array_equal(posterior.outliers, [0.0, 1.0])

    @pytest.mark.parametrize("rows", [
        [[0.5, 0.4, 0.0]],
        [[0.5, 0.5, 1e-9]],
        [[1.5, -0.5, 0.0]],
        [[np.nan, 0.5, 0.5]],
    ])
    def test_rejects_rows_that_are_not_distributions(self, rows):
        with pytest.raises(InvalidConfigError):
            PosteriorMatrix(np.array(rows))

    def test_e_step_output_passes_validation(self, rng):
        for omega in (0.0, 0.3, 1.0):
            x, y, transform, state = random_instance(rng, 40, 15, omega)
            posterior = e_step(x, y, transform, state, truncation=0.05)
            np.testing.assert_allclose(posterior.responsibilities.sum(axis=1), 1.0, rtol=0, atol=1e-12)


class TestEStep:

    @pytest.mark.parametrize("omega", [0.0, 0.1, 0.5, 1.0])
    def test_rows_sum_to_one(self, rng, omega):
        for _ in range(25):
            n, m = rng.integers(1, 51, size=2)
            x, y, transform, state = random_instance(rng, n, m, omega)
            posterior = e_step(x, y, transform, state)
            assert posterior.shape == (n, m + 1)
            np.testing.assert_allclose(posterior.responsibilities.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(posterior.responsibilities >= 0)

    def test_matches_loop_oracle(self, rng):
        for _ in range(10):
            x, y, transform, state = random_instance(rng, 7, 5, 0.1)
            posterior = e_step(x, y, transform, state)
            np.testing.assert_allclose(posterior.responsibilities, loop_posterior(x, y, transform, state), atol=1e-12)

    def test_hand_chosen_two_by_two(self):
        x = np.array([[0.0, 0.0, 0.0], [1.0, 0.5, 0.0]])
        y = np.array([[0.2, 0.0, 0.0], [1.0, 1.0, 0.0]])
        state = MixtureState(variances=np.ones(2), outlier_weight=0.1, volume=8.0, variance_floor=1e-9)
        posterior = e_step(x, y, RigidTransform.identity(), state)
        np.testing.assert_allclose(posterior.responsibilities,
                                   loop_posterior(x, y, RigidTransform.identity(), state), atol=1e-12)

    def test_single_component_without_outliers(self):
        state = MixtureState(variances=np.ones(1), outlier_weight=0.0, volume=1.0, variance_floor=1e-9)
        posterior = e_step(np.array([[5.0, 0.0, 0.0]]), np.zeros((1, 3)), RigidTransform.identity(), state)
        np.testing.assert_array_equal(posterior.responsibilities, [[1.0, 0.0]])

    def test_full_outlier_weight_puts_all_mass_on_outliers(self, rng):
        x, y, transform, state = random_instance(rng, 6, 4, 1.0)
        posterior = e_step(x, y, transform, state)
        np.testing.assert_array_equal(posterior.components, 0.0)
        np.testing.assert_array_equal(posterior.outliers, 1.0)

    def test_far_point_goes_to_outlier_column(self):
        state = MixtureState(variances=np.full(2, 1e-4), outlier_weight=0.1, volume=1e9, variance_floor=1e-9)
        x = np.array([[1e6, 0.0, 0.0]])
        posterior = e_step(x, np.zeros((2, 3)), RigidTransform.identity(), state)
        assert np.all(np.isfinite(posterior.responsibilities))
        assert posterior.outliers[0] == pytest.approx(1.0)

    def test_truncation_renormalizes(self, rng):
        x, y, transform, state = random_instance(rng, 10, 8, 0.1)
        posterior = e_step(x, y, transform, state, truncation=0.05)
        np.testing.assert_allclose(posterior.responsibilities.sum(axis=1), 1.0, atol=1e-12)
        kept = posterior.responsibilities[posterior.responsibilities > 0]
        assert np.all(kept >= 0.05 * (1 - 1e-12))


class TestLocalConsistency:

    def test_divergence_matches_direct_symmetric_kl(self, rng):
        for _ in range(100):
            n, m = rng.integers(2, 21), rng.integers(1, 11)
            x, y, transform, state = random_instance(rng, n, m, 0.2)
            posterior = e_step(x, y, transform, state)
            i, j = rng.choice(n, size=2, replace=False)
            closed = pairwise_divergence(i, j, posterior, x, y, transform, state)
            direct = direct_symmetric_kl(posterior.responsibilities[i], posterior.responsibilities[j])
            assert closed == pytest.approx(direct, abs=1e-10)
            assert closed >= -1e-10

    def test_divergence_is_symmetric_and_zero_on_diagonal(self, rng):
        x, y, transform, state = random_instance(rng, 9, 6, 0.1)
        posterior = e_step(x, y, transform, state)
        assert pairwise_divergence(3, 3, posterior, x, y, transform, state) == 0.0
        for i, j in [(0, 1), (2, 7), (8, 4)]:
            assert pairwise_divergence(i, j, posterior, x, y, transform, state) == pytest.approx(
                pairwise_divergence(j, i, posterior, x, y, transform, state), abs=1e-12)

    def test_empty_graph_gives_zero(self, rng):
        x, y, transform, state = random_instance(rng, 5, 3, 0.1)
        posterior = e_step(x, y, transform, state)
        assert local_consistency(posterior, NeighborGraph.empty(5), x, y, transform, state) == 0.0

    def test_identical_points_give_zero(self, rng):
        x = np.tile(rng.normal(size=(1, 3)), (4, 1))
        _, y, transform, state = random_instance(rng, 4, 3, 0.1)
        posterior = e_step(x, y, transform, state)
        graph = NeighborGraph(4, np.array([[0, 1], [1, 2], [2, 3], [0, 3]]))
        assert local_consistency(posterior, graph, x, y, transform, state) == pytest.approx(0.0, abs=1e-14)

    def test_matches_double_sum_over_all_pairs(self, rng):
        x, y, transform, state = random_instance(rng, 4, 5, 0.1)
        graph = build_knn_graph(x, k=1)
        posterior = e_step(x, y, transform, state)
        expected = 0.0
        for i in range(4):
            for j in range(4):
                if graph.has_edge(i, j) and i != j:
                    expected += pairwise_divergence(i, j, posterior, x, y, transform, state)
        assert local_consistency(posterior, graph, x, y, transform, state) == pytest.approx(expected, rel=1e-12, abs=1e-14)

    def test_rejects_mismatched_graph(self, rng):
        x, y, transform, state = random_instance(rng, 5, 3, 0.1)
        posterior = e_step(x, y, transform, state)
        with pytest.raises(InvalidConfigError):
            local_consistency(posterior, NeighborGraph.empty(4), x, y, transform, state)

    def test_objective_combines_terms(self, rng):
        x, y, transform, state = random_instance(rng, 12, 6, 0.1)
        graph = build_knn_graph(x, k=3)
        posterior = e_step(x, y, transform, state)
        q, q_gmm, q_lc = objective(posterior, graph, x, y, transform, state, 0.7)
        assert q == pytest.approx(q_gmm + 0.7 * q_lc, rel=1e-14)
        assert q_lc == pytest.approx(local_consistency(posterior, graph, x, y, transform, state), rel=1e-14)


class TestMStep:

    @staticmethod
    def _setup(rng, lam):
        x, y, transform, state = random_instance(rng, int(rng.integers(8, 25)), int(rng.integers(3, 10)), 0.1)
        graph = build_knn_graph(x, k=3)
        posterior = e_step(x, y, transform, state)
        mu_x, mu_y = weighted_centroids(posterior, graph, x, y, state, lam)
        alignment = update_rotation(posterior, graph, x, y, state, lam, mu_x, mu_y)
        return x, y, state, graph, posterior, mu_x, mu_y, alignment.transform

    def test_translation_is_stationary(self, rng):
        for _ in range(50):
            lam = float(rng.uniform(0.0, 2.0))
            x, y, state, graph, posterior, _, _, best = self._setup(rng, lam)

            def q_at(t):
                return objective(posterior, graph, x, y, RigidTransform(best.rotation, t), state, lam)[0]

            q0 = q_at(best.translation)
            h = 1e-4
            gradient = np.array([(q_at(best.translation + h * e) - q_at(best.translation - h * e)) / (2 * h)
                                 for e in np.eye(3)])
            assert np.linalg.norm(gradient) < 1e-6 * (1 + abs(q0))

    def test_variances_are_stationary(self, rng):
        for _ in range(50):
            lam = float(rng.uniform(0.0, 0.5))
            x, y, state, graph, posterior, _, _, best = self._setup(rng, lam)
            raw = unclamped_variances(posterior, graph, x, y, best, lam)
            at_optimum = state.with_variances(np.maximum(np.nan_to_num(raw, nan=1.0), state.variance_floor))
            q0 = objective(posterior, graph, x, y, best, at_optimum, lam)[0]
            for m in np.flatnonzero(raw > 1e-2):
                h = 1e-6 * raw[m]

                def q_at(value):
                    variances = at_optimum.variances.copy()
                    variances[m] = value
                    return objective(posterior, graph, x, y, best, at_optimum.with_variances(variances), lam)[0]

                derivative = (q_at(raw[m] + h) - q_at(raw[m] - h)) / (2 * h)
                assert abs(derivative) < 1e-6 * (1 + abs(q0))

    def test_rotation_beats_random_rotations(self, rng):
        for _ in range(5):
            lam = float(rng.uniform(0.0, 1.0))
            x, y, state, graph, posterior, mu_x, mu_y, best = self._setup(rng, lam)
            h = cross_covariance(posterior, graph, x, y, state, lam, mu_x, mu_y)
            score = np.trace(best.rotation @ h)
            for _ in range(1000):
                assert np.trace(random_rotation(rng) @ h) <= score + 1e-9

    def test_update_is_equivariant_under_scanned_motion(self, rng):
        lam = 0.5
        x, y, transform, state = random_instance(rng, 15, 6, 0.1)
        graph = build_knn_graph(x, k=3)
        posterior = e_step(x, y, transform, state)
        g = random_transform(rng)
        gx = apply_transform(x, g).points

        base = update_rotation(posterior, graph, x, y, state, lam,
                               *weighted_centroids(posterior, graph, x, y, state, lam)).transform
        moved = update_rotation(posterior, graph, gx, y, state, lam,
                                *weighted_centroids(posterior, graph, gx, y, state, lam)).transform
        expected = g.compose(base)
        np.testing.assert_allclose(moved.rotation, expected.rotation, atol=1e-9)
        np.testing.assert_allclose(moved.translation, expected.translation, atol=1e-9)

    def test_rotation_without_consistency_is_weighted_kabsch_over_all_pairs(self, rng):
        for _ in range(10):
            x, y, state, graph, posterior, mu_x, mu_y, best = self._setup(rng, 0.0)
            n, m = posterior.components.shape
            weights = (posterior.components / state.variances).reshape(-1)
            pairs = kabsch(np.tile(y, (n, 1)), np.repeat(x, m, axis=0), weights).transform
            np.testing.assert_allclose(best.rotation, pairs.rotation, rtol=0, atol=1e-12)
            np.testing.assert_allclose(best.translation, pairs.translation, rtol=0, atol=1e-12)

    def test_centroids_match_double_sum(self, rng):
        lam = 0.5
        for _ in range(10):
            x, y, transform, state = random_instance(rng, 12, 5, 0.1)
            graph = build_knn_graph(x, k=3)
            posterior = e_step(x, y, transform, state)
            p = posterior.components
            w = graph.adjacency().toarray()
            n, m = p.shape

            total = sum(p[i, k] / state.variances[k] for i in range(n) for k in range(m))
            mu_y = sum(p[i, k] / state.variances[k] * y[k] for i in range(n) for k in range(m)) / total
            mu_x = sum(p[i, k] / state.variances[k] * x[i] for i in range(n) for k in range(m))
            for i in range(n):
                for j in range(n):
                    if w[i, j]:
                        gap = sum((p[i, k] - p[j, k]) / state.variances[k] for k in range(m))
                        mu_x = mu_x + 0.5 * lam * w[i, j] * (x[j] - x[i]) * gap
            mu_x = mu_x / total

            got_x, got_y = weighted_centroids(posterior, graph, x, y, state, lam)
            np.testing.assert_allclose(got_x, mu_x, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(got_y, mu_y, rtol=1e-12, atol=1e-12)

    def test_negative_consistency_numerator_clamps_to_floor(self):
        # the near point belongs to the outlier column, the far one to the single component
        x = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
        y = np.zeros((1, 3))
        posterior = PosteriorMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        graph = build_knn_graph(x, k=1)
        assert graph.edge_count == 1

        raw = unclamped_variances(posterior, graph, x, y, RigidTransform.identity(), 2.0)
        assert raw[0] == pytest.approx(-100.0 / 3.0)
        np.testing.assert_allclose(unclamped_variances(posterior, graph, x, y, RigidTransform.identity(), 0.0),
                                   [100.0 / 3.0])
        updated = update_variances(posterior, graph, x, y, RigidTransform.identity(), 2.0,
                                   floor=1e-4, previous=np.array([7.0]))
        np.testing.assert_array_equal(updated, [1e-4])

    def test_variances_respect_floor_and_keep_empty_components(self):
        x = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        y = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        responsibilities = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        posterior = PosteriorMatrix(responsibilities)
        previous = np.array([0.3, 0.4, 0.5])
        updated = update_variances(posterior, NeighborGraph.empty(3), x, y, RigidTransform.identity(), 0.0,
                                   floor=1e-3, previous=previous)
        assert updated[1] == pytest.approx(1e-3)
        assert updated[2] == pytest.approx(0.5)
        assert updated[0] == pytest.approx(1.0 / 6.0)

    def test_collapsed_posterior_raises(self, rng):
        x, y, transform, state = random_instance(rng, 6, 4, 1.0)
        posterior = e_step(x, y, transform, state)
        with pytest.raises(PosteriorCollapseError):
            weighted_centroids(posterior, NeighborGraph.empty(6), x, y, state, 0.0, iteration=3)

    def test_zero_cross_covariance_raises(self):
        x = np.zeros((4, 3))
        y = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        state = MixtureState(variances=np.ones(2), outlier_weight=0.0, volume=1.0, variance_floor=1e-9)
        posterior = PosteriorMatrix(np.tile([0.5, 0.5, 0.0], (4, 1)))
        mu_x, mu_y = weighted_centroids(posterior, NeighborGraph.empty(4), x, y, state, 0.0)
        with pytest.raises(DegenerateGeometryError):
            update_rotation(posterior, NeighborGraph.empty(4), x, y, state, 0.0, mu_x, mu_y, iteration=2)


class TestInitState:

    def test_initial_variance_is_mean_cross_distance(self, rng):
        x = rng.normal(size=(10, 3))
        y = rng.normal(size=(7, 3)) + 5.0
        state, transform = init_state(x, y, RegistrationConfig(outlier_weight=0.2))
        aligned = apply_transform(y, transform).points
        expected = squared_distances(x, aligned, RigidTransform.identity()).sum() / (3 * 10 * 7)
        np.testing.assert_allclose(state.variances, expected, rtol=1e-12)
        np.testing.assert_allclose(transform.rotation, np.eye(3))
        assert state.outlier_weight == 0.2

    def test_identical_single_points_fall_back_to_floor(self):
        state, _ = init_state(np.zeros((1, 3)), np.zeros((1, 3)), RegistrationConfig(variance_floor=1e-5))
        np.testing.assert_array_equal(state.variances, [1e-5])


class TestRegister:

    def test_exact_recovery_without_noise(self, small_blade):
        truth = RigidTransform(euler_zyx([10.0, 10.0, 10.0]), np.array([5.0, 5.0, 5.0]))
        scanned = apply_transform(small_blade, truth)
        cfg = RegistrationConfig(lam=0.0, outlier_weight=0.0, max_iterations=100, convergence_tol=1e-12)
        report = register(scanned, small_blade, cfg)
        assert report.iterations_run <= 100
        assert transform_rmse(small_blade, truth, report.transform) < 1e-6 * scanned.diameter()

    def test_converged_result_moves_with_the_scan(self, small_blade, rng):
        truth = RigidTransform(euler_zyx([10.0, -5.0, 8.0]), np.array([3.0, -2.0, 4.0]))
        scanned = apply_transform(small_blade, truth).points + rng.normal(0.0, 0.5, size=small_blade.points.shape)
        g = RigidTransform(euler_zyx([4.0, 6.0, -5.0]), np.array([2.0, 1.0, -3.0]))
        # omega = 0: the outlier density depends on the axis-aligned box of the scan, which is not
        # rigidly invariant, so with outliers the two runs agree only up to that change in volume
        cfg = RegistrationConfig(lam=0.5, outlier_weight=0.0, max_iterations=1000, convergence_tol=1e-12)

        base = register(scanned, small_blade, cfg).transform
        moved = register(apply_transform(scanned, g), small_blade, cfg).transform
        expected = g.compose(base)
        np.testing.assert_allclose(moved.rotation, expected.rotation, atol=1e-6)
        np.testing.assert_allclose(moved.translation, expected.translation, atol=1e-5)

    def test_likelihood_never_increases_without_regularizer(self, small_blade):
        rng = np.random.default_rng(3)
        for _ in range(20):
            model = small_blade.points[rng.choice(len(small_blade), 60, replace=False)]
            truth = random_transform(rng, trans_scale=5.0)
            scanned = apply_transform(model, truth).points + rng.normal(0.0, 1.0, size=model.shape)
            cfg = RegistrationConfig(lam=0.0, outlier_weight=0.1, max_iterations=30)
            trace = np.array(register(scanned, model, cfg).likelihood_trace)
            steps = np.diff(trace)
            assert np.all(steps <= 1e-9 * (1 + np.abs(trace[:-1])))

    def test_single_iteration_reports_max_iterations(self, small_blade):
        report = register(small_blade, small_blade, RegistrationConfig(max_iterations=1))
        assert report.iterations_run == 1
        assert report.converged_by is ConvergedBy.MAX_ITERATIONS
        assert len(report.objective_trace) == 1

    def test_converges_by_tolerance_on_identical_clouds(self, small_blade):
        report = register(small_blade, small_blade, RegistrationConfig(lam=0.5, max_iterations=200, convergence_tol=1e-6))
        assert report.converged_by is ConvergedBy.TRANSFORM_TOLERANCE
        np.testing.assert_allclose(report.transform.rotation, np.eye(3), atol=1e-3)
        assert np.linalg.norm(report.transform.translation) < 0.5

    def test_full_outlier_weight_collapses(self, small_blade):
        with pytest.raises(PosteriorCollapseError):
            register(small_blade, small_blade, RegistrationConfig(outlier_weight=1.0))

    def test_single_model_point_keeps_identity_rotation(self, rng):
        scanned = rng.normal(size=(20, 3)) + np.array([3.0, 0.0, 0.0])
        report = register(scanned, np.zeros((1, 3)), RegistrationConfig(lam=0.0, max_iterations=5))
        np.testing.assert_array_equal(report.transform.rotation, np.eye(3))
        assert report.degenerate_iterations == [1, 2, 3, 4, 5][:report.iterations_run]

    def test_report_traces_line_up(self, small_blade):
        report = register(small_blade, small_blade, RegistrationConfig(max_iterations=5))
        assert len(report.objective_trace) == len(report.gmm_trace) == len(report.consistency_trace)
        assert len(report.likelihood_trace) == report.iterations_run
        assert report.final_variances.shape == (len(small_blade),)
        assert np.all(report.final_variances > 0)

    def test_rejects_invalid_config(self, small_blade):
        with pytest.raises(InvalidConfigError):
            register(small_blade, small_blade, RegistrationConfig(lam=-1.0))
        with pytest.raises(InvalidConfigError):
            register(small_blade, small_blade, RegistrationConfig(outlier_weight=1.5))
