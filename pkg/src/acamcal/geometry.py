"""Rigid transforms, calibration-board layouts, and microphone arrays.

All positions are 3-vectors in meters. The camera frame is the global
frame: board poses map board-frame points into it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

ORTHONORMALITY_TOL = 1e-9


def _as_readonly(a, shape=None) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    if shape is not None and out.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform of the calibration board into the camera frame.

    ``rotation`` must be orthonormal with determinant +1 (within 1e-9);
    inputs failing that are rejected rather than re-orthonormalized, so a
    bad pose file surfaces as an error instead of a silent repair.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_readonly(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _as_readonly(self.translation, (3,)))
        if not np.all(np.isfinite(self.rotation)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("pose contains non-finite entries")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ORTHONORMALITY_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > ORTHONORMALITY_TOL:
            raise ValueError(f"rotation determinant is {det:.12f}, expected +1")

    def inverse(self) -> "Pose":
        """Pose mapping camera-frame points back into the board frame."""
        r_inv = self.rotation.T
        return Pose(r_inv, -r_inv @ self.translation)


@dataclass(frozen=True)
class BoardLayout:
    """Known sound-source positions on the calibration board.

    ``source_positions_board`` is (M, 3) in the board frame; ``checker_spec``
    is free-form metadata about the visual pattern (rows, cols, square size).
    """

    source_positions_board: np.ndarray
    checker_spec: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.source_positions_board, dtype=np.float64))
        object.__setattr__(self, "source_positions_board", _as_readonly(pos, (pos.shape[0], 3)))
        if pos.shape[0] < 1:
            raise ValueError("board layout needs at least one sound source")
        if not np.all(np.isfinite(pos)):
            raise ValueError("source positions contain non-finite entries")

    @property
    def n_sources(self) -> int:
        return self.source_positions_board.shape[0]


@dataclass(frozen=True)
class MicArray:
    """Microphone positions (N, 3) in the camera frame.

    Construction only requires finite positions; the solver enforces the
    N >= 4 identifiability bound at entry.
    """

    positions: np.ndarray

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        object.__setattr__(self, "positions", _as_readonly(pos, (pos.shape[0], 3)))
        if not np.all(np.isfinite(pos)):
            raise ValueError("microphone positions contain non-finite entries")

    @property
    def n_mics(self) -> int:
        return self.positions.shape[0]

    def as_vector(self) -> np.ndarray:
        """Stacked (3N,) parameter vector, microphone-major."""
        return self.positions.ravel().copy()

    @staticmethod
    def from_vector(x: np.ndarray) -> "MicArray":
        x = np.asarray(x, dtype=np.float64)
        if x.size % 3 != 0:
            raise ValueError("stacked vector length must be a multiple of 3")
        return MicArray(x.reshape(-1, 3))


def board_to_camera(pose: Pose, source_board) -> np.ndarray:
    """Map a board-frame point into the camera frame: R @ s + t."""
    s = np.asarray(source_board, dtype=np.float64)
    return pose.rotation @ s + pose.translation


def make_cube_array(side: float, center=(0.0, 0.0, 0.0)) -> MicArray:
    """Eight microphones at the vertices of an axis-aligned cube.

    Vertex order is the binary order of the +/- side/2 offsets with x
    varying fastest: index i has offset sign (-1)^(1-bit) on axis a for
    bit a of i (bit 0 = x, bit 1 = y, bit 2 = z). Vertex 0 is the
    all-negative corner. The ordering is fixed so ground-truth
    comparisons stay index-stable.
    """
    if not side > 0:
        raise ValueError(f"cube side must be positive, got {side}")
    center = np.asarray(center, dtype=np.float64)
    half = side / 2.0
    verts = np.empty((8, 3))
    for i in range(8):
        verts[i] = [
            half if (i >> 0) & 1 else -half,
            half if (i >> 1) & 1 else -half,
            half if (i >> 2) & 1 else -half,
        ]
    return MicArray(verts + center)


def rotation_x(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(a)
    if norm < 1e-15:
        return np.eye(3)
    a = a / norm
    k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + math.sin(angle_rad) * k + (1.0 - math.cos(angle_rad)) * (k @ k)


def load_poses(path) -> list[Pose]:
    """Read a pose file: JSON array of {rotation: 9 row-major, translation: 3}."""
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise ValueError(f"{path}: pose file must be a JSON array")
    poses = []
    for k, entry in enumerate(raw):
        try:
            rot = np.asarray(entry["rotation"], dtype=np.float64).reshape(3, 3)
            trans = np.asarray(entry["translation"], dtype=np.float64)
            poses.append(Pose(rot, trans))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: invalid pose at index {k}: {exc}") from exc
    return poses


def save_poses(poses: Sequence[Pose], path) -> None:
    payload = [
        {
            "rotation": [float(v) for v in p.rotation.ravel()],
            "translation": [float(v) for v in p.translation],
        }
        for p in poses
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
