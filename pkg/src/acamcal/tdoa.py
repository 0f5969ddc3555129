"""Forward TDOA observation model, measurement stacking, and noise model.

Conventions fixed here and used by every file format and solver:

* A measurement row pairs a microphone ``i`` with a reference ``r`` and has
  value ``(|x_i - s| - |x_r - s|) / c`` seconds for source position ``s``.
* Single-reference blocks list the non-reference microphones in increasing
  index order.
* All-pairs blocks enumerate unordered pairs lexicographically (low index
  first) and orient each row with the lower index as the reference, so the
  rows pairing with microphone 0 reproduce the single-reference block of
  reference 0 value-for-value.
* Stacked vectors are event-major: one block per emission event, events in
  their listed order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import DegenerateGeometryError
from .geometry import BoardLayout, MicArray, Pose, board_to_camera

COINCIDENCE_TOL = 1e-12  # meters; closer than this counts as degenerate

SINGLE_REFERENCE = "single-ref"
ALL_PAIRS = "all-pairs"


@dataclass(frozen=True)
class PairingStrategy:
    """How TDOA pairs are formed from N microphones.

    ``single-ref`` pairs every microphone with one fixed reference
    (N-1 rows per event); ``all-pairs`` uses every unordered pair
    (N(N-1)/2 rows per event).
    """

    kind: str
    ref_index: int = 0

    def __post_init__(self):
        if self.kind not in (SINGLE_REFERENCE, ALL_PAIRS):
            raise ValueError(f"unknown pairing strategy {self.kind!r}")
        if self.kind == SINGLE_REFERENCE and self.ref_index < 0:
            raise ValueError("reference index must be non-negative")

    @staticmethod
    def single_reference(ref_index: int = 0) -> "PairingStrategy":
        return PairingStrategy(SINGLE_REFERENCE, ref_index)

    @staticmethod
    def all_pairs() -> "PairingStrategy":
        return PairingStrategy(ALL_PAIRS)

    @staticmethod
    def from_name(name: str, ref_index: int = 0) -> "PairingStrategy":
        return PairingStrategy(name.strip().lower(), ref_index)

    def block_size(self, n_mics: int) -> int:
        if self.kind == SINGLE_REFERENCE:
            return n_mics - 1
        return n_mics * (n_mics - 1) // 2

    def pairs(self, n_mics: int) -> np.ndarray:
        """(B, 2) array of (mic, reference) index pairs in canonical order."""
        if n_mics < 2:
            raise ValueError("need at least two microphones to form pairs")
        if self.kind == SINGLE_REFERENCE:
            if not 0 <= self.ref_index < n_mics:
                raise ValueError(
                    f"reference index {self.ref_index} out of range for {n_mics} microphones"
                )
            mics = [i for i in range(n_mics) if i != self.ref_index]
            return np.array([[i, self.ref_index] for i in mics], dtype=np.int64)
        out = [[j, i] for i in range(n_mics) for j in range(i + 1, n_mics)]
        return np.array(out, dtype=np.int64)

    def n_mics_for_block(self, block_size: int) -> int:
        """Invert block_size; raises if no integer N matches."""
        if self.kind == SINGLE_REFERENCE:
            return block_size + 1
        n = (1 + math.isqrt(1 + 8 * block_size)) // 2
        if n * (n - 1) // 2 != block_size:
            raise ValueError(f"block size {block_size} is not N(N-1)/2 for any integer N")
        return n


@dataclass(frozen=True)
class EmissionEvent:
    """One sound emission: board position k, source j, and (once the board
    pose is known) the source position in the camera frame.

    ``source_position_camera`` may be None for measurements read from file
    before poses are attached; resolve with :func:`resolve_events`.
    """

    board_index: int
    source_index: int
    source_position_camera: np.ndarray | None = None

    def __post_init__(self):
        if self.board_index < 0 or self.source_index < 0:
            raise ValueError("event indices must be non-negative")
        pos = self.source_position_camera
        if pos is not None:
            pos = np.array(pos, dtype=np.float64, copy=True)
            if pos.shape != (3,) or not np.all(np.isfinite(pos)):
                raise ValueError("source position must be a finite 3-vector")
            pos.flags.writeable = False
            object.__setattr__(self, "source_position_camera", pos)


@dataclass(frozen=True)
class MeasurementSet:
    """Stacked TDOA vector with its pairing strategy and event bookkeeping."""

    values: np.ndarray
    strategy: PairingStrategy
    events: tuple[EmissionEvent, ...]
    block_size: int

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "events", tuple(self.events))
        if not self.events:
            raise ValueError("measurement set needs at least one event")
        expected = self.block_size * len(self.events)
        if vals.shape != (expected,):
            raise ValueError(
                f"value vector has length {vals.shape}, expected "
                f"{self.block_size} x {len(self.events)} = {expected}"
            )

    @property
    def n_events(self) -> int:
        return len(self.events)

    @property
    def n_mics(self) -> int:
        return self.strategy.n_mics_for_block(self.block_size)

    def source_positions(self) -> np.ndarray:
        """(E, 3) resolved source positions; raises if any event is unresolved."""
        if any(ev.source_position_camera is None for ev in self.events):
            raise ValueError(
                "events have no source positions; attach board poses with resolve_events()"
            )
        return np.array([ev.source_position_camera for ev in self.events])

    def with_resolved_events(self, poses: Sequence[Pose], board: BoardLayout) -> "MeasurementSet":
        return MeasurementSet(
            self.values, self.strategy, resolve_events(self.events, poses, board), self.block_size
        )


def resolve_events(
    events: Sequence[EmissionEvent], poses: Sequence[Pose], board: BoardLayout
) -> tuple[EmissionEvent, ...]:
    """Fill in camera-frame source positions from board poses and layout."""
    out = []
    for ev in events:
        if ev.board_index >= len(poses):
            raise ValueError(f"event references board {ev.board_index} but only {len(poses)} poses given")
        if ev.source_index >= board.n_sources:
            raise ValueError(
                f"event references source {ev.source_index} but board has {board.n_sources}"
            )
        pos = board_to_camera(poses[ev.board_index], board.source_positions_board[ev.source_index])
        out.append(EmissionEvent(ev.board_index, ev.source_index, pos))
    return tuple(out)


@dataclass(frozen=True)
class NoiseModel:
    """Per-block TDOA noise covariance and the implied stacked weight.

    The stacked weight is block-diagonal with ``event_count`` copies of
    ``block_cov``; it is never materialized for solving (see
    :meth:`apply_inverse`), only on demand for small diagnostics.
    """

    sigma_tdoa: float
    block_cov: np.ndarray
    event_count: int

    def __post_init__(self):
        cov = np.array(self.block_cov, dtype=np.float64, copy=True)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("block covariance must be square")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise ValueError("block covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("block covariance must be positive definite") from exc
        cov.flags.writeable = False
        object.__setattr__(self, "block_cov", cov)
        if self.event_count < 1:
            raise ValueError("event count must be at least 1")

    @property
    def block_size(self) -> int:
        return self.block_cov.shape[0]

    @property
    def total_size(self) -> int:
        return self.block_size * self.event_count

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        """W^-1 @ x, applied block by block; x is (R,) or (R, M)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.total_size:
            raise ValueError(f"expected leading dimension {self.total_size}, got {x.shape[0]}")
        stacked = x.reshape(self.event_count, self.block_size, -1)
        solved = np.linalg.solve(self.block_cov, stacked)
        return solved.reshape(x.shape)

    def weight_matrix(self) -> np.ndarray:
        """Dense stacked weight W (use only for small problems/diagnostics)."""
        w = np.zeros((self.total_size, self.total_size))
        b = self.block_size
        for k in range(self.event_count):
            w[k * b : (k + 1) * b, k * b : (k + 1) * b] = self.block_cov
        return w

    def scaled(self, factor: float) -> "NoiseModel":
        if not factor > 0:
            raise ValueError("scale factor must be positive")
        return NoiseModel(self.sigma_tdoa * math.sqrt(factor), factor * self.block_cov, self.event_count)


def assemble_noise(
    sigma_tdoa: float, strategy: PairingStrategy, n_mics: int, event_count: int
) -> NoiseModel:
    """Independent-noise model: block covariance sigma^2 * I."""
    if not sigma_tdoa > 0:
        raise ValueError(f"sigma must be positive, got {sigma_tdoa}")
    block = strategy.block_size(n_mics)
    return NoiseModel(sigma_tdoa, sigma_tdoa**2 * np.eye(block), event_count)


def _positions(mics) -> np.ndarray:
    if isinstance(mics, MicArray):
        return mics.positions
    pos = np.asarray(mics, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValueError("microphone positions must be (N, 3)")
    return pos


def _sources_array(events: Sequence[EmissionEvent]) -> np.ndarray:
    if any(ev.source_position_camera is None for ev in events):
        raise ValueError(
            "events have no source positions; attach board poses with resolve_events()"
        )
    return np.array([ev.source_position_camera for ev in events], dtype=np.float64)


def _check_geometry(positions: np.ndarray, sources: np.ndarray) -> None:
    dists = np.linalg.norm(positions[:, None, :] - sources[None, :, :], axis=2)
    if np.any(dists < COINCIDENCE_TOL):
        i, e = np.argwhere(dists < COINCIDENCE_TOL)[0]
        raise DegenerateGeometryError(
            f"microphone {i} coincides with the source of event {e}"
        )


def tdoa_pair(mic_i, mic_ref, source, c: float) -> float:
    """Delay of mic_i relative to mic_ref for a source at ``source``.

    Antisymmetric under swapping the two microphones.
    """
    if not c > 0:
        raise ValueError(f"speed of sound must be positive, got {c}")
    mic_i = np.asarray(mic_i, dtype=np.float64)
    mic_ref = np.asarray(mic_ref, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    d_i = float(np.linalg.norm(mic_i - source))
    d_ref = float(np.linalg.norm(mic_ref - source))
    if d_i < COINCIDENCE_TOL or d_ref < COINCIDENCE_TOL:
        raise DegenerateGeometryError("source coincides with a microphone")
    return (d_i - d_ref) / c


def predict(mics, events: Sequence[EmissionEvent], strategy: PairingStrategy, c: float) -> np.ndarray:
    """Stacked noiseless TDOA vector g(x) for the given events."""
    if not c > 0:
        raise ValueError(f"speed of sound must be positive, got {c}")
    if not events:
        raise ValueError("need at least one emission event")
    positions = _positions(mics)
    sources = _sources_array(events)
    pairs = strategy.pairs(positions.shape[0])
    _check_geometry(positions, sources)
    return _kernels.tdoa_stack(positions, sources, pairs, c)


def jacobian(mics, events: Sequence[EmissionEvent], strategy: PairingStrategy, c: float) -> np.ndarray:
    """Derivative of :func:`predict` w.r.t. the stacked (3N,) position vector.

    The row of pair (i, r) carries (x_i - s)^T / (c |x_i - s|) in the
    columns of microphone i and the negated analog for r; all other
    columns are zero.
    """
    if not c > 0:
        raise ValueError(f"speed of sound must be positive, got {c}")
    if not events:
        raise ValueError("need at least one emission event")
    positions = _positions(mics)
    sources = _sources_array(events)
    pairs = strategy.pairs(positions.shape[0])
    _check_geometry(positions, sources)
    return _kernels.tdoa_jacobian(positions, sources, pairs, c)


# ---------------------------------------------------------------------------
# measurement file format

MEASUREMENT_HEADER = ["event", "board_index", "source_index", "pair_i", "pair_ref", "tdoa_seconds"]


def write_measurements(ms: MeasurementSet, path) -> None:
    """CSV export in the canonical block order (one row per stacked entry)."""
    pairs = ms.strategy.pairs(ms.n_mics)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MEASUREMENT_HEADER)
        for e, ev in enumerate(ms.events):
            for b, (mic, ref) in enumerate(pairs):
                writer.writerow(
                    [e, ev.board_index, ev.source_index, mic, ref, repr(float(ms.values[e * ms.block_size + b]))]
                )


def read_measurements(path, n_mics: int, strategy: PairingStrategy) -> MeasurementSet:
    """Parse and validate a measurement CSV against the canonical ordering.

    Events come back unresolved (no source positions); attach poses with
    :meth:`MeasurementSet.with_resolved_events` before solving.
    """
    pairs = strategy.pairs(n_mics)
    block = pairs.shape[0]
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        rows = list(reader)
    if not rows or rows[0] != MEASUREMENT_HEADER:
        raise ValueError(f"{path}:1: expected header {','.join(MEASUREMENT_HEADER)}")
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: no measurement rows")
    if len(body) % block != 0:
        raise ValueError(
            f"{path}: {len(body)} rows do not divide into blocks of {block} "
            f"(expected N-1={n_mics - 1} rows per event for single-ref, "
            f"N(N-1)/2 for all-pairs)"
        )
    values = []
    events = []
    for e in range(len(body) // block):
        chunk = body[e * block : (e + 1) * block]
        first_line = 2 + e * block
        try:
            board_idx = int(chunk[0][1])
            source_idx = int(chunk[0][2])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{first_line}: malformed row: {exc}") from exc
        for b, row in enumerate(chunk):
            line = first_line + b
            if len(row) != 6:
                raise ValueError(f"{path}:{line}: expected 6 columns, got {len(row)}")
            if int(row[0]) != e or int(row[1]) != board_idx or int(row[2]) != source_idx:
                raise ValueError(f"{path}:{line}: inconsistent event bookkeeping within block {e}")
            if int(row[3]) != pairs[b, 0] or int(row[4]) != pairs[b, 1]:
                raise ValueError(
                    f"{path}:{line}: pair ({row[3]},{row[4]}) out of canonical order; "
                    f"expected ({pairs[b, 0]},{pairs[b, 1]})"
                )
            values.append(float(row[5]))
        events.append(EmissionEvent(board_idx, source_idx))
    return MeasurementSet(np.array(values), strategy, tuple(events), block)
