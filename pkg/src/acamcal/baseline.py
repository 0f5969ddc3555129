"""Grid-search calibration baseline.

Stand-in for search-based calibration methods that require a reference
microphone at a known position: the reference is anchored through the
first board pose, then each remaining microphone is searched independently
over a cube of grid nodes around its nominal position. Grid extent and
resolution are explicit knobs and are echoed in every report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import MicArray, Pose, board_to_camera
from .solver import CalibrationResult, weighted_residual
from .tdoa import SINGLE_REFERENCE, MeasurementSet, NoiseModel


@dataclass(frozen=True)
class GridOptions:
    """Search cube half-extent and step, the rough array prior, and the
    known reference-microphone position in the first board's frame."""

    search_half_width: float
    resolution: float
    nominal_array: MicArray
    known_ref_in_board1: np.ndarray

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("grid resolution must be positive")
        if self.search_half_width < self.resolution:
            raise ValueError("search half-width below resolution leaves an empty grid")
        ref = np.array(self.known_ref_in_board1, dtype=np.float64, copy=True)
        if ref.shape != (3,) or not np.all(np.isfinite(ref)):
            raise ValueError("known reference position must be a finite 3-vector")
        ref.flags.writeable = False
        object.__setattr__(self, "known_ref_in_board1", ref)

    def offsets(self) -> np.ndarray:
        """(G, 3) grid offsets in lexicographic (x, y, z) index order."""
        n = int(round(2 * self.search_half_width / self.resolution)) + 1
        axis = -self.search_half_width + self.resolution * np.arange(n)
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    def settings_dict(self) -> dict:
        return {
            "search_half_width": float(self.search_half_width),
            "resolution": float(self.resolution),
        }


def grid_calibrate(
    z: MeasurementSet,
    poses: list[Pose],
    opts: GridOptions,
    c: float,
    noise: NoiseModel | None = None,
) -> CalibrationResult:
    """Two-stage exhaustive search.

    Stage 1 maps the known reference microphone through the first board
    pose. Stage 2 scores, for each remaining microphone independently, the
    weighted residual of that microphone's measurement rows over every
    grid node around its nominal position and keeps the minimizer; cost
    ties resolve to the lowest lexicographic grid index.

    Requires a single-reference measurement set whose reference is the
    known microphone; rows of other microphones do not then couple, so the
    per-microphone search is an exact decomposition.
    """
    if z.strategy.kind != SINGLE_REFERENCE:
        raise ValueError("grid baseline needs single-reference measurements (known reference)")
    if not poses:
        raise ValueError("need the first board pose to anchor the reference microphone")
    n = opts.nominal_array.n_mics
    if z.n_mics != n:
        raise ValueError(f"measurements imply {z.n_mics} microphones, nominal array has {n}")
    ref = z.strategy.ref_index

    anchor = board_to_camera(poses[0], opts.known_ref_in_board1)
    sources = z.source_positions()
    base_dists = np.linalg.norm(anchor - sources, axis=1)

    pairs = z.strategy.pairs(n)
    block_values = z.values.reshape(z.n_events, z.block_size)
    if noise is None:
        row_weights = np.ones(z.block_size)
    else:
        if noise.block_size != z.block_size or noise.event_count != z.n_events:
            raise ValueError("noise model does not match measurement block structure")
        # Off-diagonal covariance is ignored for the per-row restriction.
        row_weights = 1.0 / np.diagonal(noise.block_cov)

    offsets = opts.offsets()
    estimate = opts.nominal_array.positions.copy()
    estimate[ref] = anchor
    for b, (mic, pair_ref) in enumerate(pairs):
        assert pair_ref == ref
        nodes = opts.nominal_array.positions[mic] + offsets
        targets = block_values[:, b]
        weights = np.full(z.n_events, row_weights[b])
        costs = _kernels.grid_costs(nodes, sources, base_dists, targets, weights, c)
        estimate[mic] = nodes[int(np.argmin(costs))]

    result_array = MicArray(estimate)
    resid_noise = noise if noise is not None else NoiseModel(1.0, np.eye(z.block_size), z.n_events)
    final = weighted_residual(result_array, z, resid_noise, c)
    return CalibrationResult(result_array, 0, final, True, ())
