"""Tests for the TDOA observation model, stacking, and noise assembly."""

import math

import numpy as np
import pytest

from acamcal.errors import DegenerateGeometryError
from acamcal.geometry import MicArray, Pose, make_cube_array, rotation_z
from acamcal.simulate import default_board_layout
from acamcal.tdoa import (
    EmissionEvent,
    MeasurementSet,
    NoiseModel,
    PairingStrategy,
    assemble_noise,
    jacobian,
    predict,
    read_measurements,
    resolve_events,
    tdoa_pair,
    write_measurements,
)

C = 340.0


def cube_events(rng, n_events=3):
    return [
        EmissionEvent(k, 0, rng.uniform(-1, 1, 3) + [0, 0, 2.0]) for k in range(n_events)
    ]


class TestTdoaPair:
    def test_equidistant_source_is_zero(self):
        assert tdoa_pair([0.2, 0, 0], [-0.2, 0, 0], [0, 0, 1.0], C) == pytest.approx(0.0)

    def test_hand_evaluated_case(self):
        # Oracle: independent evaluation with math.dist.
        mic, ref, src = (0.25, 0.25, 0.25), (-0.25, -0.25, -0.25), (0.0, 0.0, 2.0)
        expected = (math.dist(mic, src) - math.dist(ref, src)) / C
        got = tdoa_pair(mic, ref, src, C)
        assert got == pytest.approx(expected, rel=1e-15)
        assert got == pytest.approx(-1.4478e-3, rel=1e-4)

    def test_antisymmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
            s = rng.uniform(-1, 1, 3) + [0, 0, 3.0]
            assert tdoa_pair(a, b, s, C) == -tdoa_pair(b, a, s, C)

    def test_translation_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            a, b = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
            s = rng.uniform(-1, 1, 3) + [0, 0, 3.0]
            shift = rng.uniform(-5, 5, 3)
            base = tdoa_pair(a, b, s, C)
            moved = tdoa_pair(a + shift, b + shift, s + shift, C)
            assert abs(base - moved) < 1e-12

    def test_speed_scaling_exact(self):
        val = tdoa_pair([0.2, 0.1, 0], [-0.2, 0, 0.1], [0.3, 0.2, 1.5], C)
        assert tdoa_pair([0.2, 0.1, 0], [-0.2, 0, 0.1], [0.3, 0.2, 1.5], 2 * C) == val / 2

    def test_coincident_source_raises(self):
        with pytest.raises(DegenerateGeometryError):
            tdoa_pair([0.1, 0, 0], [-0.1, 0, 0], [0.1, 0, 0], C)


class TestStrategy:
    def test_single_ref_block_size(self):
        assert PairingStrategy.single_reference().block_size(8) == 7

    def test_all_pairs_block_size(self):
        assert PairingStrategy.all_pairs().block_size(8) == 28

    def test_single_ref_pair_order(self):
        pairs = PairingStrategy.single_reference(2).pairs(5)
        assert pairs.tolist() == [[0, 2], [1, 2], [3, 2], [4, 2]]

    def test_all_pairs_order_and_no_self_pairs(self):
        pairs = PairingStrategy.all_pairs().pairs(4)
        assert pairs.tolist() == [[1, 0], [2, 0], [3, 0], [2, 1], [3, 1], [3, 2]]
        assert all(i != r for i, r in pairs)

    def test_ref_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            PairingStrategy.single_reference(8).pairs(8)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown pairing"):
            PairingStrategy("pairwise")

    def test_block_size_inversion(self):
        for n in range(2, 12):
            for strat in (PairingStrategy.single_reference(), PairingStrategy.all_pairs()):
                assert strat.n_mics_for_block(strat.block_size(n)) == n


class TestPredict:
    def test_single_ref_length(self):
        arr = make_cube_array(0.5)
        out = predict(arr, [EmissionEvent(0, 0, (0.3, -0.2, 1.9))], PairingStrategy.single_reference(), C)
        assert out.shape == (7,)

    def test_all_pairs_length(self):
        arr = make_cube_array(0.5)
        out = predict(arr, [EmissionEvent(0, 0, (0.3, -0.2, 1.9))], PairingStrategy.all_pairs(), C)
        assert out.shape == (28,)

    def test_matches_scalar_model(self):
        rng = np.random.default_rng(2)
        arr = MicArray(rng.uniform(-0.3, 0.3, (5, 3)))
        events = cube_events(rng, 4)
        strat = PairingStrategy.all_pairs()
        stacked = predict(arr, events, strat, C)
        pairs = strat.pairs(5)
        k = 0
        for ev in events:
            for mic, ref in pairs:
                expected = tdoa_pair(arr.positions[mic], arr.positions[ref], ev.source_position_camera, C)
                assert stacked[k] == pytest.approx(expected, abs=1e-15)
                k += 1

    def test_all_pairs_contains_single_ref_block(self):
        rng = np.random.default_rng(3)
        arr = MicArray(rng.uniform(-0.3, 0.3, (8, 3)))
        events = cube_events(rng, 2)
        single = predict(arr, events, PairingStrategy.single_reference(0), C)
        full = predict(arr, events, PairingStrategy.all_pairs(), C)
        np.testing.assert_array_equal(full.reshape(2, 28)[:, :7], single.reshape(2, 7))

    def test_speed_scaling(self):
        rng = np.random.default_rng(4)
        arr = MicArray(rng.uniform(-0.3, 0.3, (4, 3)))
        events = cube_events(rng, 2)
        base = predict(arr, events, PairingStrategy.all_pairs(), C)
        np.testing.assert_array_equal(predict(arr, events, PairingStrategy.all_pairs(), 2 * C), base / 2)

    def test_empty_events_rejected(self):
        with pytest.raises(ValueError, match="event"):
            predict(make_cube_array(0.5), [], PairingStrategy.all_pairs(), C)

    def test_unresolved_event_rejected(self):
        with pytest.raises((ValueError, TypeError)):
            predict(make_cube_array(0.5), [EmissionEvent(0, 0, None)], PairingStrategy.all_pairs(), C)


class TestJacobian:
    def test_row_sparsity(self):
        rng = np.random.default_rng(5)
        arr = MicArray(rng.uniform(-0.3, 0.3, (8, 3)))
        jac = jacobian(arr, cube_events(rng, 2), PairingStrategy.all_pairs(), C)
        assert jac.shape == (56, 24)
        assert (np.count_nonzero(jac, axis=1) <= 6).all()

    def test_matches_central_finite_differences(self):
        # Oracle: central differences of predict, h = 1e-6 m.
        rng = np.random.default_rng(6)
        h = 1e-6
        for _ in range(20):
            arr = rng.uniform(-0.3, 0.3, (5, 3))
            events = cube_events(rng, 3)
            strat = PairingStrategy.all_pairs() if rng.random() < 0.5 else PairingStrategy.single_reference()
            jac = jacobian(arr, events, strat, C)
            fd = np.empty_like(jac)
            for col in range(15):
                bumped_p = arr.copy().ravel()
                bumped_m = arr.copy().ravel()
                bumped_p[col] += h
                bumped_m[col] -= h
                fd[:, col] = (
                    predict(bumped_p.reshape(5, 3), events, strat, C)
                    - predict(bumped_m.reshape(5, 3), events, strat, C)
                ) / (2 * h)
            scale = np.abs(jac).max()
            assert np.abs(jac - fd).max() / scale < 1e-5

    def test_first_order_prediction_agreement(self):
        rng = np.random.default_rng(7)
        arr = rng.uniform(-0.3, 0.3, (6, 3))
        events = cube_events(rng, 3)
        strat = PairingStrategy.all_pairs()
        delta = rng.normal(size=18)
        delta *= 1e-7 / np.linalg.norm(delta)
        lhs = predict(arr + delta.reshape(6, 3), events, strat, C)
        rhs = predict(arr, events, strat, C) + jacobian(arr, events, strat, C) @ delta
        assert np.abs(lhs - rhs).max() <= 1e-9


class TestNoise:
    def test_paper_sigma_single_ref(self):
        noise = assemble_noise(0.333e-3, PairingStrategy.single_reference(), 8, 1)
        np.testing.assert_array_equal(noise.block_cov, (0.333e-3) ** 2 * np.eye(7))
        np.testing.assert_array_equal(noise.weight_matrix(), (0.333e-3) ** 2 * np.eye(7))

    def test_unit_sigma(self):
        noise = assemble_noise(1.0, PairingStrategy.single_reference(), 8, 1)
        np.testing.assert_array_equal(noise.weight_matrix(), np.eye(7))

    def test_all_pairs_two_events(self):
        noise = assemble_noise(0.0666e-3, PairingStrategy.all_pairs(), 8, 2)
        w = noise.weight_matrix()
        assert w.shape == (56, 56)
        np.testing.assert_array_equal(w, np.diag(np.diagonal(w)))

    def test_rejects_non_positive_sigma(self):
        with pytest.raises(ValueError, match="positive"):
            assemble_noise(0.0, PairingStrategy.all_pairs(), 8, 1)

    def test_apply_inverse_matches_dense(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(3, 3))
        noise = NoiseModel(1.0, a @ a.T + 3 * np.eye(3), 4)
        x = rng.normal(size=12)
        np.testing.assert_allclose(
            noise.apply_inverse(x), np.linalg.solve(noise.weight_matrix(), x), atol=1e-12
        )

    def test_rejects_indefinite_cov(self):
        with pytest.raises(ValueError, match="positive definite"):
            NoiseModel(1.0, np.diag([1.0, -1.0]), 1)


class TestMeasurementSet:
    def test_length_validation(self):
        with pytest.raises(ValueError, match="expected"):
            MeasurementSet(np.zeros(6), PairingStrategy.single_reference(), (EmissionEvent(0, 0, (0, 0, 1)),), 7)

    def test_n_mics(self):
        ms = MeasurementSet(np.zeros(28), PairingStrategy.all_pairs(), (EmissionEvent(0, 0, (0, 0, 1)),), 28)
        assert ms.n_mics == 8

    def test_resolve_events(self):
        board = default_board_layout(2)
        poses = [Pose(rotation_z(0.3), [0.1, -0.2, 1.4])]
        events = resolve_events([EmissionEvent(0, 1)], poses, board)
        expected = poses[0].rotation @ board.source_positions_board[1] + poses[0].translation
        np.testing.assert_allclose(events[0].source_position_camera, expected)

    def test_resolve_rejects_bad_indices(self):
        board = default_board_layout(2)
        poses = [Pose(np.eye(3), [0, 0, 1])]
        with pytest.raises(ValueError, match="board 1"):
            resolve_events([EmissionEvent(1, 0)], poses, board)
        with pytest.raises(ValueError, match="source 2"):
            resolve_events([EmissionEvent(0, 2)], poses, board)


class TestMeasurementCsv:
    def _make_set(self, rng, strategy, n_mics=5, n_events=3):
        arr = MicArray(rng.uniform(-0.3, 0.3, (n_mics, 3)))
        events = [EmissionEvent(k // 2, k % 2, rng.uniform(-1, 1, 3) + [0, 0, 2]) for k in range(n_events)]
        values = predict(arr, events, strategy, C)
        return MeasurementSet(values, strategy, tuple(events), strategy.block_size(n_mics))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        for strategy in (PairingStrategy.single_reference(1), PairingStrategy.all_pairs()):
            ms = self._make_set(rng, strategy)
            path = tmp_path / "m.csv"
            write_measurements(ms, path)
            back = read_measurements(path, 5, strategy)
            np.testing.assert_array_equal(back.values, ms.values)
            assert [(e.board_index, e.source_index) for e in back.events] == [
                (e.board_index, e.source_index) for e in ms.events
            ]

    def test_wrong_block_length_cites_expected(self, tmp_path):
        rng = np.random.default_rng(10)
        ms = self._make_set(rng, PairingStrategy.single_reference())
        path = tmp_path / "m.csv"
        write_measurements(ms, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")  # drop one row
        with pytest.raises(ValueError, match="N-1"):
            read_measurements(path, 5, PairingStrategy.single_reference())

    def test_out_of_order_pairs_rejected(self, tmp_path):
        rng = np.random.default_rng(11)
        ms = self._make_set(rng, PairingStrategy.single_reference())
        path = tmp_path / "m.csv"
        write_measurements(ms, path)
        lines = path.read_text().splitlines()
        lines[1], lines[2] = lines[2], lines[1]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="canonical order"):
            read_measurements(path, 5, PairingStrategy.single_reference())

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(ValueError, match="header"):
            read_measurements(path, 5, PairingStrategy.single_reference())
