"""Hot numeric kernels with numba and pure-numpy implementations.

The backend is chosen at import time from the ``ACAM_BACKEND`` environment
variable: ``numba`` (require the JIT path), ``numpy`` (force the fallback),
or ``auto`` (default: numba when importable). Both implementations produce
identical results up to floating-point rounding; ``benchmarks/bench_kernels.py``
compares their throughput.

Stacking convention shared by all kernels: measurement row ``e * B + b``
holds pair ``b`` of event ``e``, where ``pairs`` is a (B, 2) int array of
(mic, reference) index pairs.
"""

from __future__ import annotations

import os

import numpy as np

_GRID_CHUNK = 1024  # nodes per numpy chunk, keeps temporaries ~10 MB


# ---------------------------------------------------------------------------
# pure-numpy implementations


def _tdoa_stack_numpy(mics, sources, pairs, c):
    dists = np.linalg.norm(mics[:, None, :] - sources[None, :, :], axis=2)
    blocks = (dists[pairs[:, 0], :] - dists[pairs[:, 1], :]) / c  # (B, E)
    return np.ascontiguousarray(blocks.T).ravel()


def _tdoa_jacobian_numpy(mics, sources, pairs, c):
    n_mics = mics.shape[0]
    n_events = sources.shape[0]
    n_pairs = pairs.shape[0]
    diff = mics[:, None, :] - sources[None, :, :]  # (N, E, 3)
    dists = np.linalg.norm(diff, axis=2)
    units = diff / (c * dists[:, :, None])  # (N, E, 3)
    jac = np.zeros((n_events, n_pairs, n_mics, 3))
    rows = np.arange(n_pairs)
    jac[:, rows, pairs[:, 0], :] = units[pairs[:, 0]].transpose(1, 0, 2)
    jac[:, rows, pairs[:, 1], :] -= units[pairs[:, 1]].transpose(1, 0, 2)
    return jac.reshape(n_events * n_pairs, 3 * n_mics)


def _grid_costs_numpy(nodes, sources, base_dists, targets, weights, c):
    costs = np.empty(nodes.shape[0])
    for start in range(0, nodes.shape[0], _GRID_CHUNK):
        chunk = nodes[start : start + _GRID_CHUNK]
        d = np.linalg.norm(chunk[:, None, :] - sources[None, :, :], axis=2)
        resid = (d - base_dists[None, :]) / c - targets[None, :]
        costs[start : start + _GRID_CHUNK] = (resid * resid) @ weights
    return costs


_NUMPY_IMPL = {
    "tdoa_stack": _tdoa_stack_numpy,
    "tdoa_jacobian": _tdoa_jacobian_numpy,
    "grid_costs": _grid_costs_numpy,
}


# ---------------------------------------------------------------------------
# numba implementations

_NUMBA_IMPL = {}

try:
    from numba import njit, prange

    HAVE_NUMBA = True

    @njit(cache=True, nogil=True)
    def _tdoa_stack_numba(mics, sources, pairs, c):
        n_events = sources.shape[0]
        n_pairs = pairs.shape[0]
        n_mics = mics.shape[0]
        dists = np.empty((n_mics, n_events))
        for i in range(n_mics):
            for e in range(n_events):
                dx = mics[i, 0] - sources[e, 0]
                dy = mics[i, 1] - sources[e, 1]
                dz = mics[i, 2] - sources[e, 2]
                dists[i, e] = np.sqrt(dx * dx + dy * dy + dz * dz)
        out = np.empty(n_events * n_pairs)
        for e in range(n_events):
            for b in range(n_pairs):
                out[e * n_pairs + b] = (dists[pairs[b, 0], e] - dists[pairs[b, 1], e]) / c
        return out

    @njit(cache=True, nogil=True)
    def _tdoa_jacobian_numba(mics, sources, pairs, c):
        n_events = sources.shape[0]
        n_pairs = pairs.shape[0]
        n_mics = mics.shape[0]
        jac = np.zeros((n_events * n_pairs, 3 * n_mics))
        for e in range(n_events):
            for b in range(n_pairs):
                row = e * n_pairs + b
                for side in range(2):
                    m = pairs[b, side]
                    dx = mics[m, 0] - sources[e, 0]
                    dy = mics[m, 1] - sources[e, 1]
                    dz = mics[m, 2] - sources[e, 2]
                    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
                    scale = 1.0 / (c * dist) if side == 0 else -1.0 / (c * dist)
                    jac[row, 3 * m + 0] += scale * dx
                    jac[row, 3 * m + 1] += scale * dy
                    jac[row, 3 * m + 2] += scale * dz
        return jac

    @njit(cache=True, nogil=True, parallel=True)
    def _grid_costs_numba(nodes, sources, base_dists, targets, weights, c):
        n_nodes = nodes.shape[0]
        n_events = sources.shape[0]
        costs = np.empty(n_nodes)
        for g in prange(n_nodes):
            acc = 0.0
            for e in range(n_events):
                dx = nodes[g, 0] - sources[e, 0]
                dy = nodes[g, 1] - sources[e, 1]
                dz = nodes[g, 2] - sources[e, 2]
                dist = np.sqrt(dx * dx + dy * dy + dz * dz)
                resid = (dist - base_dists[e]) / c - targets[e]
                acc += weights[e] * resid * resid
            costs[g] = acc
        return costs

    _NUMBA_IMPL = {
        "tdoa_stack": _tdoa_stack_numba,
        "tdoa_jacobian": _tdoa_jacobian_numba,
        "grid_costs": _grid_costs_numba,
    }

except ImportError:  # numba absent: numpy fallback only
    HAVE_NUMBA = False


def _resolve_backend() -> str:
    requested = os.environ.get("ACAM_BACKEND", "auto").strip().lower()
    if requested not in ("auto", "numba", "numpy"):
        raise ValueError(f"ACAM_BACKEND must be auto, numba, or numpy; got {requested!r}")
    if requested == "numpy":
        return "numpy"
    if requested == "numba":
        if not HAVE_NUMBA:
            raise ImportError("ACAM_BACKEND=numba but numba is not importable")
        return "numba"
    return "numba" if HAVE_NUMBA else "numpy"


_ACTIVE = _resolve_backend()
_IMPL = _NUMBA_IMPL if _ACTIVE == "numba" else _NUMPY_IMPL


def active_backend() -> str:
    """Name of the kernel backend selected at import ('numba' or 'numpy')."""
    return _ACTIVE


def implementations(name: str) -> dict:
    """All available implementations of one kernel, keyed by backend name."""
    out = {"numpy": _NUMPY_IMPL[name]}
    if HAVE_NUMBA:
        out["numba"] = _NUMBA_IMPL[name]
    return out


def tdoa_stack(mics, sources, pairs, c):
    """Stacked pairwise delays: row e*B+b = (|x_mic - s_e| - |x_ref - s_e|) / c."""
    return _IMPL["tdoa_stack"](mics, sources, pairs, c)


def tdoa_jacobian(mics, sources, pairs, c):
    """Dense (E*B, 3N) derivative of tdoa_stack w.r.t. the stacked positions."""
    return _IMPL["tdoa_jacobian"](mics, sources, pairs, c)


def grid_costs(nodes, sources, base_dists, targets, weights, c):
    """Weighted squared-residual score of candidate nodes for one microphone.

    Per node g: sum_e weights[e] * ((|node_g - s_e| - base_dists[e]) / c - targets[e])^2.
    """
    return _IMPL["grid_costs"](nodes, sources, base_dists, targets, weights, c)
