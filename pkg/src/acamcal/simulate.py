"""Scenario generation, noise injection, and Monte-Carlo evaluation.

A scenario fixes the true microphone cube, the board poses, and the
emission events; each Monte-Carlo trial then draws fresh measurement
noise and a fresh initial guess. Per-trial randomness comes from seeds
spawned off the master seed, so reports are reproducible and independent
of execution order (including threaded runs).
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _kernels
from .baseline import GridOptions, grid_calibrate
from .errors import CalibrationError
from .geometry import (
    BoardLayout,
    MicArray,
    Pose,
    board_to_camera,
    make_cube_array,
    rotation_about_axis,
)
from .solver import CalibrationResult, SolverOptions, gauss_newton
from .tdoa import (
    EmissionEvent,
    MeasurementSet,
    NoiseModel,
    PairingStrategy,
    assemble_noise,
)

NOISE_LEVELS = {
    "lv1": 0.0666e-3,
    "lv2": 0.333e-3,
    "lv3": 0.999e-3,
    "lv4": 1.332e-3,
}

_BOARD_SOURCE_SPACING = 0.15  # meters between sources on the default board
_POSE_LATERAL_RANGE = 1.0  # board positions sampled in x,y within +/- this
_POSE_DEPTH_RANGE = (0.5, 1.5)  # and in z (depth in front of the camera) within this
_POSE_MAX_TILT = math.pi / 4  # boards face the camera to within 45 degrees

# Per-axis sigma such that the RMS 3-D norm of the source-position error is
# 0.1 m. Wavefront curvature at 0.5-1.5 m depth is what pins the array's
# range; farther boards leave a near-null global-translation mode.
_DEFAULT_SOURCE_ERROR_STD = 0.1 / math.sqrt(3.0)


@dataclass(frozen=True)
class Scenario:
    """Ground truth for one simulated calibration session."""

    true_mics: MicArray
    poses: tuple[Pose, ...]
    board: BoardLayout
    c: float
    events: tuple[EmissionEvent, ...]
    known_mic_index: int | None = None
    known_ref_in_board1: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "events", tuple(self.events))
        if len(self.events) != len(self.poses) * self.board.n_sources:
            raise ValueError("events must cover every (pose, source) combination")
        if self.known_ref_in_board1 is not None:
            ref = np.array(self.known_ref_in_board1, dtype=np.float64, copy=True)
            ref.flags.writeable = False
            object.__setattr__(self, "known_ref_in_board1", ref)

    @property
    def free_mics(self) -> tuple[int, ...]:
        return tuple(
            i for i in range(self.true_mics.n_mics) if i != self.known_mic_index
        )


@dataclass(frozen=True)
class SimConfig:
    """Everything a Monte-Carlo run needs, JSON-serializable."""

    noise_level: float = NOISE_LEVELS["lv1"]
    source_position_error_std: float = _DEFAULT_SOURCE_ERROR_STD
    init_range: float = 0.5
    trials: int = 100
    strategy: PairingStrategy = field(default_factory=PairingStrategy.single_reference)
    n_boards: int = 69
    n_sources: int = 6
    seed: int = 0
    c: float = 340.0
    cube_side: float = 0.5
    known_extra_mic: bool = False
    known_mic_position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    redraw_scenario_per_trial: bool = False
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.n_boards < 1 or self.n_sources < 1:
            raise ValueError("need at least one board position and one source")
        for name in ("noise_level", "source_position_error_std", "init_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.c > 0 or not self.cube_side > 0:
            raise ValueError("c and cube_side must be positive")

    def to_dict(self) -> dict:
        return {
            "noise_level": float(self.noise_level),
            "source_position_error_std": float(self.source_position_error_std),
            "init_range": float(self.init_range),
            "trials": self.trials,
            "strategy": self.strategy.kind,
            "ref_index": self.strategy.ref_index,
            "n_boards": self.n_boards,
            "n_sources": self.n_sources,
            "seed": self.seed,
            "c": float(self.c),
            "cube_side": float(self.cube_side),
            "known_extra_mic": self.known_extra_mic,
            "known_mic_position": [float(v) for v in self.known_mic_position],
            "redraw_scenario_per_trial": self.redraw_scenario_per_trial,
            "solver": {
                "max_iterations": self.solver.max_iterations,
                "step_threshold": self.solver.step_threshold,
                "damping_floor": self.solver.damping_floor,
                "condition_limit": self.solver.condition_limit,
                "block_coordinate": self.solver.block_coordinate,
            },
        }

    @staticmethod
    def from_dict(raw: dict) -> "SimConfig":
        raw = dict(raw)
        solver_raw = dict(raw.pop("solver", {}))
        known_fields = {
            "noise_level", "source_position_error_std", "init_range", "trials",
            "strategy", "ref_index", "n_boards", "n_sources", "seed", "c",
            "cube_side", "known_extra_mic", "known_mic_position",
            "redraw_scenario_per_trial",
        }
        unknown = set(raw) - known_fields
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        solver_unknown = set(solver_raw) - {
            "max_iterations", "step_threshold", "damping_floor",
            "condition_limit", "block_coordinate",
        }
        if solver_unknown:
            raise ValueError(f"unknown solver config keys: {sorted(solver_unknown)}")
        kwargs = {}
        if "noise_level" in raw:
            kwargs["noise_level"] = resolve_noise_level(raw["noise_level"])
        if "strategy" in raw or "ref_index" in raw:
            kwargs["strategy"] = PairingStrategy.from_name(
                raw.get("strategy", "single-ref"), int(raw.get("ref_index", 0))
            )
        for name in ("source_position_error_std", "init_range", "c", "cube_side"):
            if name in raw:
                kwargs[name] = float(raw[name])
        for name in ("trials", "n_boards", "n_sources", "seed"):
            if name in raw:
                kwargs[name] = int(raw[name])
        for name in ("known_extra_mic", "redraw_scenario_per_trial"):
            if name in raw:
                kwargs[name] = bool(raw[name])
        if "known_mic_position" in raw:
            kwargs["known_mic_position"] = tuple(float(v) for v in raw["known_mic_position"])
        if solver_raw:
            kwargs["solver"] = SolverOptions(
                max_iterations=int(solver_raw.get("max_iterations", 50)),
                step_threshold=float(solver_raw.get("step_threshold", 1e-3)),
                damping_floor=float(solver_raw.get("damping_floor", 0.0)),
                condition_limit=float(solver_raw.get("condition_limit", 1e14)),
                block_coordinate=bool(solver_raw.get("block_coordinate", False)),
            )
        return SimConfig(**kwargs)


def resolve_noise_level(value) -> float:
    """Accept lv1..lv4 preset names or a plain sigma in seconds."""
    if isinstance(value, str):
        key = value.strip().lower()
        if key not in NOISE_LEVELS:
            raise ValueError(f"unknown noise level {value!r}; use {sorted(NOISE_LEVELS)} or seconds")
        return NOISE_LEVELS[key]
    sigma = float(value)
    if sigma < 0:
        raise ValueError("noise level must be non-negative")
    return sigma


def default_board_layout(n_sources: int) -> BoardLayout:
    """Sources on a centered planar grid in the board frame (z = 0)."""
    cols = math.ceil(math.sqrt(n_sources))
    rows = math.ceil(n_sources / cols)
    positions = []
    for j in range(n_sources):
        r, col = divmod(j, cols)
        positions.append(
            [
                (col - (cols - 1) / 2.0) * _BOARD_SOURCE_SPACING,
                (r - (rows - 1) / 2.0) * _BOARD_SOURCE_SPACING,
                0.0,
            ]
        )
    return BoardLayout(
        np.array(positions),
        {"rows": 7, "cols": 10, "square_size": 0.025},
    )


def _facing_rotation(board_pos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rotation whose +z axis points toward the camera, tilted <= 45 deg, free roll."""
    d = -board_pos / np.linalg.norm(board_pos)
    e_z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(e_z, d)
    base = rotation_about_axis(axis, math.atan2(np.linalg.norm(axis), float(e_z @ d)))
    tilt_axis = rng.normal(size=3)
    tilt_axis -= (tilt_axis @ d) * d
    if np.linalg.norm(tilt_axis) < 1e-12:
        tilt_axis = np.cross(d, e_z)
    tilt = rotation_about_axis(tilt_axis, rng.uniform(0.0, _POSE_MAX_TILT))
    roll = rotation_about_axis(d, rng.uniform(0.0, 2.0 * math.pi))
    return roll @ tilt @ base


def generate_scenario(config: SimConfig, seed) -> Scenario:
    """Cube array plus randomized board poses in a frustum in front of the camera.

    Board positions are uniform in x,y within +/-1 m and in depth within
    0.5-1.5 m; orientations face the camera to within 45 degrees with free
    roll. Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    mic_positions = make_cube_array(config.cube_side).positions
    known_index = None
    known_ref_b1 = None
    if config.known_extra_mic:
        known_index = mic_positions.shape[0]
        mic_positions = np.vstack([mic_positions, np.asarray(config.known_mic_position)])
    mics = MicArray(mic_positions)

    board = default_board_layout(config.n_sources)
    poses = []
    for _ in range(config.n_boards):
        pos = np.array(
            [
                rng.uniform(-_POSE_LATERAL_RANGE, _POSE_LATERAL_RANGE),
                rng.uniform(-_POSE_LATERAL_RANGE, _POSE_LATERAL_RANGE),
                rng.uniform(*_POSE_DEPTH_RANGE),
            ]
        )
        poses.append(Pose(_facing_rotation(pos, rng), pos))

    events = []
    for k, pose in enumerate(poses):
        for j in range(board.n_sources):
            events.append(
                EmissionEvent(k, j, board_to_camera(pose, board.source_positions_board[j]))
            )

    if known_index is not None:
        inv = poses[0].inverse()
        known_ref_b1 = board_to_camera(inv, mic_positions[known_index])
    return Scenario(mics, tuple(poses), board, config.c, tuple(events), known_index, known_ref_b1)


def simulate_measurements(scenario: Scenario, config: SimConfig, seed) -> MeasurementSet:
    """Noisy stacked TDOAs for every scenario event.

    Source positions are perturbed per axis by the source-position error
    (modeling board-pose error) before computing delays, then TDOA noise
    is added; the returned events keep the unperturbed nominal positions,
    which is what a downstream solver gets to see.
    """
    rng = np.random.default_rng(seed)
    sources = np.array([ev.source_position_camera for ev in scenario.events])
    if config.source_position_error_std > 0:
        sources = sources + rng.normal(0.0, config.source_position_error_std, sources.shape)
    pairs = config.strategy.pairs(scenario.true_mics.n_mics)
    values = _kernels.tdoa_stack(scenario.true_mics.positions, sources, pairs, scenario.c)
    if config.noise_level > 0:
        values = values + rng.normal(0.0, config.noise_level, values.shape)
    return MeasurementSet(values, config.strategy, scenario.events, pairs.shape[0])


def rmse(estimates: Sequence[MicArray], truth: MicArray) -> float:
    """Root mean square position error over trials and microphones."""
    if not estimates:
        raise ValueError("need at least one estimate")
    sq = []
    for est in estimates:
        if est.n_mics != truth.n_mics:
            raise ValueError("estimate and truth have different microphone counts")
        sq.append(np.sum((est.positions - truth.positions) ** 2, axis=1))
    return float(np.sqrt(np.mean(np.concatenate(sq))))


@dataclass(frozen=True)
class McReport:
    """Aggregate of one Monte-Carlo batch.

    ``per_trial_errors`` holds one tuple of per-microphone position errors
    per trial, or None for trials that raised; those are excluded from the
    RMSE and counted in ``failed_trials``. Trials that merely hit the
    iteration cap still contribute their estimate. ``convergence_rate`` is
    the fraction of trials that stopped on the step threshold.
    """

    rmse: float
    per_trial_errors: tuple
    per_trial_converged: tuple
    convergence_rate: float
    failed_trials: int
    config: dict
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "per_trial_errors": [
                list(errs) if errs is not None else None for errs in self.per_trial_errors
            ],
            "per_trial_converged": list(self.per_trial_converged),
            "convergence_rate": self.convergence_rate,
            "failed_trials": self.failed_trials,
            "config": self.config,
            "wall_time": self.wall_time,
        }


def write_trials_csv(report: McReport, path) -> None:
    """Per-trial errors as trial,mic_index,error_m,converged rows."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial", "mic_index", "error_m", "converged"])
        for t, (errs, conv) in enumerate(zip(report.per_trial_errors, report.per_trial_converged)):
            if errs is None:
                writer.writerow([t, -1, "nan", False])
            else:
                for m, err in enumerate(errs):
                    writer.writerow([t, m, repr(float(err)), bool(conv)])


def _weight_sigma(config: SimConfig) -> float:
    # Zero-noise runs keep a unit weight; scaling W uniformly does not
    # change the minimizer.
    return config.noise_level if config.noise_level > 0 else 1.0


def _uniform_in_ball(rng: np.random.Generator, radius: float, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return v * r[:, None]


def _trial_scenario(config: SimConfig, base: Scenario, scenario_seed) -> Scenario:
    if config.redraw_scenario_per_trial:
        return generate_scenario(config, scenario_seed)
    return base


def _run_trials(config: SimConfig, worker, threads: int | None):
    """Spawn per-trial seeds and collect (errors, converged) pairs in order."""
    children = np.random.SeedSequence(config.seed).spawn(config.trials)
    streams = [c.spawn(3) for c in children]  # noise, init, scenario redraw
    threads = threads or 1
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(worker, streams))
    else:
        results = [worker(s) for s in streams]
    return results


def _aggregate(config: SimConfig, results, wall_time: float) -> McReport:
    per_trial_errors = []
    per_trial_converged = []
    all_sq = []
    failed = 0
    for errs, converged in results:
        per_trial_converged.append(bool(converged))
        if errs is None:
            per_trial_errors.append(None)
            failed += 1
        else:
            per_trial_errors.append(tuple(float(e) for e in errs))
            all_sq.extend(float(e) ** 2 for e in errs)
    batch_rmse = float(np.sqrt(np.mean(all_sq))) if all_sq else float("nan")
    return McReport(
        rmse=batch_rmse,
        per_trial_errors=tuple(per_trial_errors),
        per_trial_converged=tuple(per_trial_converged),
        convergence_rate=float(np.mean(per_trial_converged)),
        failed_trials=failed,
        config=config.to_dict(),
        wall_time=wall_time,
    )


def run_monte_carlo(config: SimConfig, threads: int | None = None) -> McReport:
    """Batch of randomized calibrations with the Gauss-Newton solver.

    Per trial: fresh measurement noise, initial guess uniform in a ball of
    ``init_range`` around the truth, then a solve; a scenario with a known
    extra microphone pins it at its exact position.
    """
    t0 = time.perf_counter()
    base = generate_scenario(config, config.seed)
    fixed = () if base.known_mic_index is None else (base.known_mic_index,)
    opts = replace(config.solver, fixed_mics=fixed)

    def worker(streams):
        noise_s, init_s, scen_s = streams
        scenario = _trial_scenario(config, base, scen_s)
        z = simulate_measurements(scenario, config, noise_s)
        noise = assemble_noise(
            _weight_sigma(config), config.strategy, scenario.true_mics.n_mics, z.n_events
        )
        truth = scenario.true_mics.positions
        free = list(scenario.free_mics)
        init = truth.copy()
        init[free] += _uniform_in_ball(np.random.default_rng(init_s), config.init_range, len(free))
        try:
            result = gauss_newton(MicArray(init), z, noise, scenario.c, opts)
        except CalibrationError:
            return None, False
        errors = np.linalg.norm(result.estimate.positions[free] - truth[free], axis=1)
        return errors, result.converged

    results = _run_trials(config, worker, threads)
    return _aggregate(config, results, time.perf_counter() - t0)


def run_baseline_monte_carlo(
    config: SimConfig,
    search_half_width: float,
    resolution: float,
    threads: int | None = None,
) -> McReport:
    """Same trial structure as :func:`run_monte_carlo`, solved by grid search.

    Needs a scenario with the known extra microphone as the single
    reference. The per-trial noise and prior draws reuse the exact seed
    streams of the proposed-method run, so comparisons are paired.
    """
    if not config.known_extra_mic:
        raise ValueError("grid baseline needs known_extra_mic=true in the config")
    t0 = time.perf_counter()
    base = generate_scenario(config, config.seed)
    if config.strategy.kind != "single-ref" or config.strategy.ref_index != base.known_mic_index:
        raise ValueError(
            "grid baseline needs strategy single-ref with ref_index pointing at the known microphone"
        )

    def worker(streams):
        noise_s, init_s, scen_s = streams
        scenario = _trial_scenario(config, base, scen_s)
        z = simulate_measurements(scenario, config, noise_s)
        noise = assemble_noise(
            _weight_sigma(config), config.strategy, scenario.true_mics.n_mics, z.n_events
        )
        truth = scenario.true_mics.positions
        free = list(scenario.free_mics)
        nominal = truth.copy()
        nominal[free] += _uniform_in_ball(
            np.random.default_rng(init_s), config.init_range, len(free)
        )
        opts = GridOptions(search_half_width, resolution, MicArray(nominal), scenario.known_ref_in_board1)
        try:
            result = grid_calibrate(z, list(scenario.poses), opts, scenario.c, noise)
        except CalibrationError:
            return None, False
        errors = np.linalg.norm(result.estimate.positions[free] - truth[free], axis=1)
        return errors, result.converged

    results = _run_trials(config, worker, threads)
    return _aggregate(config, results, time.perf_counter() - t0)


def run_comparison(
    config: SimConfig,
    levels: Sequence,
    search_half_width: float,
    resolution: float,
    threads: int | None = None,
) -> dict:
    """Proposed solver vs. grid baseline across noise levels."""
    rows = []
    for level in levels:
        sigma = resolve_noise_level(level)
        level_config = replace(config, noise_level=sigma)
        proposed = run_monte_carlo(level_config, threads)
        baseline = run_baseline_monte_carlo(level_config, search_half_width, resolution, threads)
        rows.append(
            {
                "noise_level": level if isinstance(level, str) else float(level),
                "sigma_tdoa_s": sigma,
                "proposed": proposed.to_dict(),
                "baseline": baseline.to_dict(),
            }
        )
    return {
        "grid_settings": {
            "search_half_width": float(search_half_width),
            "resolution": float(resolution),
        },
        "levels": rows,
    }


def write_comparison_csv(comparison: dict, path) -> None:
    """Noise level per row, proposed and baseline RMSE side by side."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["noise_level", "sigma_tdoa_s", "proposed_rmse_m", "baseline_rmse_m", "ratio"])
        for row in comparison["levels"]:
            prop = row["proposed"]["rmse"]
            base = row["baseline"]["rmse"]
            ratio = base / prop if prop else float("inf")
            writer.writerow(
                [row["noise_level"], repr(row["sigma_tdoa_s"]), repr(prop), repr(base), repr(ratio)]
            )
