"""Weighted Gauss-Newton estimation of microphone positions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DivergenceError, IllConditionedError, UnderdeterminedProblemError
from .geometry import MicArray
from .tdoa import MeasurementSet, NoiseModel, jacobian, predict

MIN_MICS = 4  # below this, 3-D positions are not identifiable from TDOAs

_DAMPING_START = 1e-8
_DAMPING_MAX = 1e-2


@dataclass(frozen=True)
class SolverOptions:
    """Iteration controls.

    ``step_threshold`` is the Euclidean norm of the stacked position
    increment in meters. ``damping_floor`` adds lambda*I to the normal
    matrix; it defaults to 0 (plain Gauss-Newton) and escalates tenfold up
    to 1e-2 only when factorization fails. ``fixed_mics`` pins those
    microphones at their initial positions; their rows still contribute.
    ``block_coordinate`` updates one microphone's three coordinates at a
    time instead of the full joint step.
    """

    max_iterations: int = 50
    step_threshold: float = 1e-3
    damping_floor: float = 0.0
    condition_limit: float = 1e14
    fixed_mics: tuple[int, ...] = ()
    block_coordinate: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.step_threshold > 0:
            raise ValueError("step_threshold must be positive")
        if self.damping_floor < 0:
            raise ValueError("damping_floor must be non-negative")
        object.__setattr__(self, "fixed_mics", tuple(sorted(set(self.fixed_mics))))


@dataclass(frozen=True)
class CalibrationResult:
    estimate: MicArray
    iterations_used: int
    final_weighted_residual: float
    converged: bool
    step_norm_trace: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "step_norm_trace", tuple(self.step_norm_trace))
        if len(self.step_norm_trace) != self.iterations_used:
            raise ValueError("step trace length must equal iterations_used")


def weighted_residual(mics, z: MeasurementSet, noise: NoiseModel, c: float) -> float:
    """Squared weighted norm of the prediction error, ||g(x) - z||^2_{W^-1}."""
    e = predict(mics, z.events, z.strategy, c) - z.values
    if noise.total_size != e.shape[0]:
        raise ValueError(
            f"noise model covers {noise.total_size} measurements, data has {e.shape[0]}"
        )
    return float(e @ noise.apply_inverse(e))


def _solve_damped(h: np.ndarray, b: np.ndarray, opts: SolverOptions) -> np.ndarray:
    lam = opts.damping_floor
    eye = np.eye(h.shape[0])
    while True:
        hd = h + lam * eye if lam > 0 else h
        try:
            factor = cho_factor(hd)
            break
        except np.linalg.LinAlgError:
            lam = _DAMPING_START if lam == 0 else lam * 10
            if lam > _DAMPING_MAX:
                raise IllConditionedError(
                    "normal matrix not positive definite even at maximum damping"
                ) from None
    cond = np.linalg.cond(hd)
    if cond > opts.condition_limit:
        raise IllConditionedError(
            f"normal matrix condition number {cond:.3e} exceeds limit {opts.condition_limit:.3e}"
        )
    return cho_solve(factor, -b)


def _check_problem(initial: MicArray, z: MeasurementSet, noise: NoiseModel, opts: SolverOptions):
    n = initial.n_mics
    if n < MIN_MICS:
        raise UnderdeterminedProblemError(f"need at least {MIN_MICS} microphones, got {n}")
    if z.n_mics != n:
        raise ValueError(f"measurements imply {z.n_mics} microphones, initial guess has {n}")
    if not np.all(np.isfinite(initial.positions)):
        raise ValueError("initial guess contains non-finite positions")
    if any(i < 0 or i >= n for i in opts.fixed_mics):
        raise ValueError(f"fixed microphone index out of range for N={n}")
    free = [i for i in range(n) if i not in opts.fixed_mics]
    if not free:
        raise ValueError("all microphones are fixed; nothing to estimate")
    n_meas = z.values.shape[0]
    if noise.total_size != n_meas:
        raise ValueError(
            f"noise model covers {noise.total_size} measurements, data has {n_meas}"
        )
    if n_meas < 3 * len(free):
        raise UnderdeterminedProblemError(
            f"{n_meas} measurements cannot determine {3 * len(free)} coordinates"
        )
    return free


def gauss_newton(
    initial: MicArray,
    z: MeasurementSet,
    noise: NoiseModel,
    c: float,
    opts: SolverOptions | None = None,
) -> CalibrationResult:
    """Minimize the weighted TDOA residual by Gauss-Newton iteration.

    Each iteration solves (J^T W^-1 J) dx = -J^T W^-1 e for the stacked
    increment and applies it, stopping when ||dx|| falls below
    ``step_threshold`` (converged) or the iteration cap is hit.
    """
    opts = opts or SolverOptions()
    free = _check_problem(initial, z, noise, opts)
    free_cols = np.array([3 * i + a for i in free for a in range(3)], dtype=np.intp)

    x = initial.positions.copy()
    trace: list[float] = []
    converged = False
    for _ in range(opts.max_iterations):
        if opts.block_coordinate:
            step_sq = 0.0
            for i in free:
                e = predict(x, z.events, z.strategy, c) - z.values
                if not np.all(np.isfinite(e)):
                    raise DivergenceError("residual became non-finite", trace)
                j_i = jacobian(x, z.events, z.strategy, c)[:, 3 * i : 3 * i + 3]
                winv_j = noise.apply_inverse(j_i)
                delta = _solve_damped(j_i.T @ winv_j, winv_j.T @ e, opts)
                x[i] += delta
                step_sq += float(delta @ delta)
            step = float(np.sqrt(step_sq))
        else:
            e = predict(x, z.events, z.strategy, c) - z.values
            if not np.all(np.isfinite(e)):
                raise DivergenceError("residual became non-finite", trace)
            j = jacobian(x, z.events, z.strategy, c)[:, free_cols]
            winv_j = noise.apply_inverse(j)
            delta = _solve_damped(j.T @ winv_j, winv_j.T @ e, opts)
            x[free] += delta.reshape(-1, 3)
            step = float(np.linalg.norm(delta))
        trace.append(step)
        if not np.isfinite(step):
            raise DivergenceError("step norm became non-finite", trace)
        if step < opts.step_threshold:
            converged = True
            break

    estimate = MicArray(x)
    final = weighted_residual(estimate, z, noise, c)
    if not np.isfinite(final):
        raise DivergenceError("final residual is non-finite", trace)
    return CalibrationResult(estimate, len(trace), final, converged, tuple(trace))


def result_to_dict(result: CalibrationResult) -> dict:
    return {
        "estimate": [[float(v) for v in row] for row in result.estimate.positions],
        "iterations_used": result.iterations_used,
        "final_weighted_residual": result.final_weighted_residual,
        "converged": result.converged,
        "step_norm_trace": [float(s) for s in result.step_norm_trace],
    }


def save_result(result: CalibrationResult, path, grid_settings: dict | None = None,
                manifest: dict | None = None) -> None:
    """Write the result-report JSON; grid_settings is set by the baseline."""
    payload = result_to_dict(result)
    if grid_settings is not None:
        payload["grid_settings"] = grid_settings
    if manifest is not None:
        payload["manifest"] = manifest
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
