"""Tests for the Gauss-Newton solver and the weighted residual."""

import numpy as np
import pytest

from acamcal.errors import DivergenceError, UnderdeterminedProblemError
from acamcal.geometry import MicArray, make_cube_array
from acamcal.solver import (
    CalibrationResult,
    SolverOptions,
    gauss_newton,
    result_to_dict,
    save_result,
    weighted_residual,
)
from acamcal.tdoa import (
    EmissionEvent,
    MeasurementSet,
    NoiseModel,
    PairingStrategy,
    assemble_noise,
    predict,
)

C = 340.0


def make_problem(rng, n_events=40, strategy=None, n_mics=8):
    """Noiseless measurement set from a cube-array truth."""
    strategy = strategy or PairingStrategy.single_reference()
    truth = make_cube_array(0.5) if n_mics == 8 else MicArray(rng.uniform(-0.3, 0.3, (n_mics, 3)))
    events = tuple(
        EmissionEvent(k, 0, rng.uniform(-1, 1, 3) * [1, 1, 0.5] + [0, 0, 1.0])
        for k in range(n_events)
    )
    values = predict(truth, events, strategy, C)
    z = MeasurementSet(values, strategy, events, strategy.block_size(truth.n_mics))
    noise = assemble_noise(1.0, strategy, truth.n_mics, n_events)
    return truth, z, noise


class TestWeightedResidual:
    def test_zero_at_truth(self):
        rng = np.random.default_rng(0)
        truth, z, noise = make_problem(rng)
        assert weighted_residual(truth, z, noise, C) == 0.0

    def test_unit_weight_all_ones_error(self):
        rng = np.random.default_rng(1)
        truth, z, noise = make_problem(rng, n_events=1)
        shifted = MeasurementSet(z.values - 1.0, z.strategy, z.events, z.block_size)
        assert weighted_residual(truth, shifted, noise, C) == pytest.approx(7.0)

    def test_matches_brute_force_double_loop(self):
        # Oracle: naive summation e^T W^-1 e with an explicit double loop.
        rng = np.random.default_rng(2)
        truth, z, _ = make_problem(rng, n_events=3)
        a = rng.normal(size=(7, 7))
        noise = NoiseModel(1.0, a @ a.T + 7 * np.eye(7), 3)
        x = MicArray(truth.positions + rng.normal(0, 0.05, (8, 3)))
        e = predict(x, z.events, z.strategy, C) - z.values
        winv = np.linalg.inv(noise.weight_matrix())
        brute = 0.0
        for i in range(21):
            for j in range(21):
                brute += e[i] * winv[i, j] * e[j]
        got = weighted_residual(x, z, noise, C)
        assert got == pytest.approx(brute, rel=1e-12)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(3)
        truth, z, _ = make_problem(rng, n_events=3)
        with pytest.raises(ValueError, match="covers"):
            weighted_residual(truth, z, assemble_noise(1.0, z.strategy, 8, 2), C)


class TestGaussNewton:
    def test_noiseless_exact_recovery(self):
        rng = np.random.default_rng(4)
        truth, z, noise = make_problem(rng)
        init = MicArray(truth.positions + rng.uniform(-0.3, 0.3, (8, 3)))
        res = gauss_newton(init, z, noise, C, SolverOptions(step_threshold=1e-9))
        errors = np.linalg.norm(res.estimate.positions - truth.positions, axis=1)
        assert errors.max() < 1e-9
        assert res.converged
        assert res.iterations_used <= 50
        assert res.final_weighted_residual < 1e-18

    def test_residual_non_increasing_noiseless(self):
        # Plain Gauss-Newton steps on well-conditioned zero-residual problems.
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            truth, z, noise = make_problem(rng, n_events=30)
            x = truth.positions + rng.uniform(-0.2, 0.2, (8, 3))
            prev = weighted_residual(x, z, noise, C)
            for _ in range(6):
                res = gauss_newton(
                    MicArray(x), z, noise, C, SolverOptions(max_iterations=1, step_threshold=1e-15)
                )
                x = res.estimate.positions
                now = res.final_weighted_residual
                # 1e-28 absolute slack: fully converged residuals are float dust
                assert now <= prev * (1 + 1e-12) + 1e-28
                prev = now

    def test_stationary_point_when_converged(self):
        rng = np.random.default_rng(5)
        truth, z, noise = make_problem(rng)
        noisy = MeasurementSet(
            z.values + rng.normal(0, 1e-4, z.values.shape), z.strategy, z.events, z.block_size
        )
        init = MicArray(truth.positions + rng.uniform(-0.2, 0.2, (8, 3)))
        res = gauss_newton(init, noisy, noise, C, SolverOptions(step_threshold=1e-10, max_iterations=100))
        assert res.converged
        from acamcal.tdoa import jacobian

        e = predict(res.estimate, noisy.events, noisy.strategy, C) - noisy.values
        j = jacobian(res.estimate, noisy.events, noisy.strategy, C)
        grad = j.T @ noise.apply_inverse(e)
        ref = j.T @ noise.apply_inverse(noisy.values)
        assert np.linalg.norm(grad) < 1e-6 * (1 + np.linalg.norm(ref))

    def test_weight_scaling_leaves_iterates_identical(self):
        rng = np.random.default_rng(6)
        truth, z, noise = make_problem(rng)
        init = MicArray(truth.positions + rng.uniform(-0.2, 0.2, (8, 3)))
        opts = SolverOptions(max_iterations=8, step_threshold=1e-15)
        res_a = gauss_newton(init, z, noise, C, opts)
        res_b = gauss_newton(init, z, noise.scaled(37.5), C, opts)
        np.testing.assert_allclose(
            res_a.estimate.positions, res_b.estimate.positions, atol=1e-10
        )
        np.testing.assert_allclose(
            res_a.step_norm_trace, res_b.step_norm_trace, rtol=1e-6, atol=1e-10
        )

    def test_permutation_consistency(self):
        rng = np.random.default_rng(7)
        truth, z, noise = make_problem(rng, strategy=PairingStrategy.all_pairs())
        init = truth.positions + rng.uniform(-0.2, 0.2, (8, 3))
        opts = SolverOptions(step_threshold=1e-12)
        res = gauss_newton(MicArray(init), z, noise, C, opts)

        perm = np.array([3, 1, 0, 2, 7, 6, 5, 4])
        #

        strat = PairingStrategy.all_pairs()
        pairs = strat.pairs(8)
        inv = np.argsort(perm)
        # Re-stack measurement rows so pair (i, r) follows the permuted labels.
        values_by_event = z.values.reshape(z.n_events, z.block_size)
        lookup = {}
        for b, (mic, ref) in enumerate(pairs):
            lookup[frozenset((int(mic), int(ref)))] = b
        new_values = np.empty_like(values_by_event)
        for b, (mic, ref) in enumerate(pairs):
            old_mic, old_ref = perm[mic], perm[ref]
            src = lookup[frozenset((int(old_mic), int(old_ref)))]
            sign = 1.0 if (old_mic > old_ref) == (mic > ref) else -1.0
            # canonical orientation delays higher index relative to lower
            old_pair = pairs[src]
            oriented = values_by_event[:, src]
            if (old_mic, old_ref) != (int(old_pair[0]), int(old_pair[1])):
                oriented = -oriented
            new_values[:, b] = oriented
        z_perm = MeasurementSet(new_values.ravel(), strat, z.events, z.block_size)
        res_perm = gauss_newton(MicArray(init[perm]), z_perm, noise, C, opts)
        np.testing.assert_allclose(
            res_perm.estimate.positions, res.estimate.positions[perm], atol=1e-9
        )

    def test_underdetermined_rejected(self):
        rng = np.random.default_rng(8)
        truth, z, noise = make_problem(rng, n_events=3)  # 21 rows < 24 unknowns
        with pytest.raises(UnderdeterminedProblemError, match="cannot determine"):
            gauss_newton(truth, z, noise, C)

    def test_too_few_mics_rejected(self):
        rng = np.random.default_rng(9)
        truth, z, noise = make_problem(rng, n_events=30, n_mics=3)
        with pytest.raises(UnderdeterminedProblemError, match="at least 4"):
            gauss_newton(truth, z, noise, C)

    def test_divergence_carries_trace(self):
        rng = np.random.default_rng(10)
        truth, z, noise = make_problem(rng)
        bad = MeasurementSet(
            np.where(np.arange(z.values.size) == 0, np.nan, z.values),
            z.strategy,
            z.events,
            z.block_size,
        )
        with pytest.raises(DivergenceError) as err:
            gauss_newton(truth, bad, noise, C)
        assert err.value.step_norm_trace == []

    def test_fixed_mic_stays_put(self):
        rng = np.random.default_rng(11)
        truth, z, noise = make_problem(rng)
        init = truth.positions + rng.uniform(-0.2, 0.2, (8, 3))
        init[2] = truth.positions[2]
        res = gauss_newton(
            MicArray(init), z, noise, C, SolverOptions(step_threshold=1e-9, fixed_mics=(2,))
        )
        np.testing.assert_array_equal(res.estimate.positions[2], truth.positions[2])
        err = np.linalg.norm(res.estimate.positions - truth.positions, axis=1)
        assert err.max() < 1e-9

    def test_block_coordinate_mode_converges(self):
        # Coordinate descent converges linearly (the reference microphone
        # couples every row), so expectations are looser than joint mode.
        rng = np.random.default_rng(12)
        truth, z, noise = make_problem(rng)
        init = MicArray(truth.positions + rng.uniform(-0.1, 0.1, (8, 3)))
        res = gauss_newton(
            init, z, noise, C,
            SolverOptions(step_threshold=1e-7, max_iterations=600, block_coordinate=True),
        )
        assert res.converged
        err = np.linalg.norm(res.estimate.positions - truth.positions, axis=1)
        assert err.max() < 1e-5

    def test_iteration_cap_flag(self):
        rng = np.random.default_rng(13)
        truth, z, noise = make_problem(rng)
        init = MicArray(truth.positions + rng.uniform(-0.3, 0.3, (8, 3)))
        res = gauss_newton(init, z, noise, C, SolverOptions(max_iterations=1, step_threshold=1e-15))
        assert not res.converged
        assert res.iterations_used == 1
        assert len(res.step_norm_trace) == 1


class TestResultReport:
    def test_trace_length_invariant(self):
        with pytest.raises(ValueError, match="trace"):
            CalibrationResult(make_cube_array(0.5), 3, 0.0, True, (0.1,))

    def test_save_round_trip(self, tmp_path):
        import json

        res = CalibrationResult(make_cube_array(0.5), 2, 1.5, True, (0.5, 1e-4))
        path = tmp_path / "result.json"
        save_result(res, path, grid_settings={"resolution": 0.05})
        payload = json.loads(path.read_text())
        assert payload["iterations_used"] == 2
        assert payload["converged"] is True
        assert payload["grid_settings"] == {"resolution": 0.05}
        np.testing.assert_allclose(payload["estimate"], make_cube_array(0.5).positions)
        assert payload == {**result_to_dict(res), "grid_settings": {"resolution": 0.05}}
