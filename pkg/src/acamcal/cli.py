"""Command-line interface: simulate, calibrate, extract, compare.

Exit codes: 0 success, 2 invalid config or input file, 3 runtime failure,
4 solver non-convergence or partial extraction (a partial report is still
written). All outputs are written atomically (temp file + rename) and all
JSON reports embed a run manifest with input hashes and the materialized
configuration, so runs are reproducible byte-for-byte modulo timestamps.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CalibrationError, ExtractionError
from .geometry import BoardLayout, MicArray, load_poses
from .gccphat import extract_measurements, read_wav, read_windows
from .simulate import (
    SimConfig,
    default_board_layout,
    resolve_noise_level,
    run_comparison,
    run_monte_carlo,
    write_comparison_csv,
    write_trials_csv,
)
from .solver import SolverOptions, gauss_newton, result_to_dict
from .tdoa import PairingStrategy, assemble_noise, read_measurements, write_measurements

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_RUNTIME = 3
EXIT_NOT_CONVERGED = 4


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: str
    inputs: dict
    seed: int | None
    tool_version: str
    created_utc: str

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_path": self.config_path,
            "inputs": self.inputs,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "created_utc": self.created_utc,
        }


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def make_manifest(command: str, config_path, input_paths: dict, seed) -> RunManifest:
    inputs = {name: {"path": str(p), "sha256": _sha256(p)} for name, p in input_paths.items()}
    return RunManifest(
        command=command,
        config_path=str(config_path) if config_path else "",
        inputs=inputs,
        seed=seed,
        tool_version=__version__,
        created_utc=datetime.datetime.now(datetime.timezone.utc).isoformat(),
    )


def _atomic_write(path: Path, write_fn) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write_fn(tmp)
    os.replace(tmp, path)


def _write_json(path: Path, payload: dict) -> None:
    def do(p):
        with open(p, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")

    _atomic_write(path, do)


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _resolve_threads(args) -> int:
    env = os.environ.get("ACAM_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"ACAM_THREADS must be an integer, got {env!r}") from None
    return max(1, args.threads)


def _apply_overrides(config: SimConfig, args) -> SimConfig:
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.noise_level is not None:
        config = replace(config, noise_level=resolve_noise_level(args.noise_level))
    if args.strategy is not None:
        config = replace(
            config, strategy=PairingStrategy.from_name(args.strategy, config.strategy.ref_index)
        )
    return config


def _fail(code: int, message: str) -> int:
    print(f"acam: error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    try:
        config = SimConfig.from_dict(_load_json(args.config))
        config = _apply_overrides(config, args)
        threads = _resolve_threads(args)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        return _fail(EXIT_BAD_INPUT, f"invalid config: {exc}")

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        report = run_monte_carlo(config, threads)
        manifest = make_manifest("simulate", args.config, {"config": args.config}, config.seed)
        payload = report.to_dict()
        payload["manifest"] = manifest.to_dict()
        _write_json(out_dir / "report.json", payload)
        _atomic_write(out_dir / "trials.csv", lambda p: write_trials_csv(report, p))
    except Exception as exc:  # runtime failure, not an input problem
        return _fail(EXIT_RUNTIME, f"simulation failed: {exc}")
    print(f"rmse {report.rmse:.6e} m over {config.trials} trials -> {out_dir / 'report.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate


def _parse_calibrate_config(raw: dict):
    known = {
        "n_mics", "strategy", "ref_index", "c", "sigma_tdoa", "board",
        "n_sources", "initial_positions", "init_range", "seed", "solver",
        "fixed_mics",
    }
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    n_mics = int(raw["n_mics"])
    strategy = PairingStrategy.from_name(raw.get("strategy", "single-ref"), int(raw.get("ref_index", 0)))
    c = float(raw.get("c", 340.0))
    sigma = float(raw.get("sigma_tdoa", 1.0))
    if "board" in raw:
        board = BoardLayout(
            np.asarray(raw["board"]["source_positions_board"], dtype=float),
            dict(raw["board"].get("checker_spec", {})),
        )
    elif "n_sources" in raw:
        board = default_board_layout(int(raw["n_sources"]))
    else:
        raise ValueError("config needs either a board layout or n_sources")
    solver_raw = dict(raw.get("solver", {}))
    opts = SolverOptions(
        max_iterations=int(solver_raw.get("max_iterations", 50)),
        step_threshold=float(solver_raw.get("step_threshold", 1e-3)),
        damping_floor=float(solver_raw.get("damping_floor", 0.0)),
        condition_limit=float(solver_raw.get("condition_limit", 1e14)),
        block_coordinate=bool(solver_raw.get("block_coordinate", False)),
        fixed_mics=tuple(int(i) for i in raw.get("fixed_mics", ())),
    )
    return n_mics, strategy, c, sigma, board, opts, raw


def _initial_guess(raw: dict, n_mics: int, seed_override) -> MicArray:
    if raw.get("initial_positions") is not None:
        init = np.asarray(raw["initial_positions"], dtype=float)
        if init.shape != (n_mics, 3):
            raise ValueError(f"initial_positions must be ({n_mics}, 3)")
        return MicArray(init)
    init_range = float(raw.get("init_range", 0.5))
    seed = seed_override if seed_override is not None else int(raw.get("seed", 0))
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n_mics, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    radii = init_range * rng.random(n_mics) ** (1.0 / 3.0)
    return MicArray(v * radii[:, None])


def cmd_calibrate(args) -> int:
    try:
        raw = _load_json(args.config)
        n_mics, strategy, c, sigma, board, opts, raw = _parse_calibrate_config(raw)
        poses = load_poses(args.poses)
        ms = read_measurements(args.measurements, n_mics, strategy)
        ms = ms.with_resolved_events(poses, board)
        initial = _initial_guess(raw, n_mics, args.seed)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        return _fail(EXIT_BAD_INPUT, str(exc))

    manifest = make_manifest(
        "calibrate",
        args.config,
        {"config": args.config, "poses": args.poses, "measurements": args.measurements},
        args.seed,
    )
    noise = assemble_noise(sigma, strategy, n_mics, ms.n_events)
    out = Path(args.out)
    try:
        result = gauss_newton(initial, ms, noise, c, opts)
    except CalibrationError as exc:
        payload = {
            "error": str(exc),
            "converged": False,
            "step_norm_trace": list(getattr(exc, "step_norm_trace", [])),
            "manifest": manifest.to_dict(),
        }
        _write_json(out, payload)
        return _fail(EXIT_NOT_CONVERGED, f"solver failed: {exc} (partial report at {out})")

    payload = result_to_dict(result)
    payload["manifest"] = manifest.to_dict()
    _write_json(out, payload)
    if not result.converged:
        return _fail(
            EXIT_NOT_CONVERGED,
            f"iteration cap reached without meeting the step threshold (report at {out})",
        )
    print(f"converged in {result.iterations_used} iterations -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract


def cmd_extract(args) -> int:
    try:
        raw = _load_json(args.config)
        known = {"n_mics", "strategy", "ref_index", "c", "max_lag_s", "array_diameter_m"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        n_mics = int(raw["n_mics"])
        strategy = PairingStrategy.from_name(
            raw.get("strategy", "single-ref"), int(raw.get("ref_index", 0))
        )
        if args.strategy is not None:
            strategy = PairingStrategy.from_name(args.strategy, int(raw.get("ref_index", 0)))
        c = float(raw.get("c", 340.0))
        if "max_lag_s" in raw:
            max_lag = float(raw["max_lag_s"])
        elif "array_diameter_m" in raw:
            max_lag = float(raw["array_diameter_m"]) / c
        else:
            raise ValueError("config needs max_lag_s or array_diameter_m")
        audio = read_wav(args.wav)
        if audio.n_channels != n_mics:
            raise ValueError(f"{args.wav}: has {audio.n_channels} channels, config says {n_mics}")
        windows = read_windows(args.windows)
        if not windows:
            raise ValueError(f"{args.windows}: empty window list")
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        return _fail(EXIT_BAD_INPUT, str(exc))

    manifest = make_manifest(
        "extract", args.config, {"config": args.config, "wav": args.wav, "windows": args.windows}, None
    )
    out = Path(args.out)
    try:
        ms = extract_measurements(audio, windows, strategy, max_lag)
    except ExtractionError as exc:
        for window_idx, pair, message in exc.failures:
            print(f"acam: window {window_idx} pair {pair}: {message}", file=sys.stderr)
        if exc.partial is not None:
            _atomic_write(out, lambda p: write_measurements(exc.partial, p))
            _write_json(out.with_name(out.name + ".manifest.json"), manifest.to_dict())
        return _fail(EXIT_NOT_CONVERGED, f"{len(exc.failures)} extraction failure(s)")
    except Exception as exc:
        return _fail(EXIT_RUNTIME, f"extraction failed: {exc}")

    _atomic_write(out, lambda p: write_measurements(ms, p))
    _write_json(out.with_name(out.name + ".manifest.json"), manifest.to_dict())
    print(f"extracted {ms.n_events} blocks of {ms.block_size} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args) -> int:
    try:
        raw = _load_json(args.config)
        levels = raw.pop("noise_levels", ["lv1", "lv2", "lv3", "lv4"])
        grid = raw.pop("grid", {})
        half_width = float(grid.get("search_half_width", 0.5))
        resolution = float(grid.get("resolution", 0.05))
        raw.setdefault("known_extra_mic", True)
        # The known microphone is appended after the cube, hence index 8.
        raw.setdefault("ref_index", 8)
        config = SimConfig.from_dict(raw)
        config = _apply_overrides(config, args)
        if args.noise_level is not None:
            levels = [args.noise_level]
        threads = _resolve_threads(args)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        return _fail(EXIT_BAD_INPUT, f"invalid config: {exc}")

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        comparison = run_comparison(config, levels, half_width, resolution, threads)
        manifest = make_manifest("compare", args.config, {"config": args.config}, config.seed)
        comparison["manifest"] = manifest.to_dict()
        _write_json(out_dir / "comparison.json", comparison)
        _atomic_write(out_dir / "comparison.csv", lambda p: write_comparison_csv(comparison, p))
    except Exception as exc:
        return _fail(EXIT_RUNTIME, f"comparison failed: {exc}")
    for row in comparison["levels"]:
        print(
            f"{row['noise_level']}: proposed {row['proposed']['rmse']:.4e} m, "
            f"baseline {row['baseline']['rmse']:.4e} m"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acam", description="Acoustic-camera extrinsic calibration toolkit"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_noise=True):
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output file or directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads (env ACAM_THREADS overrides)")
        if with_noise:
            p.add_argument("--noise-level", default=None,
                           help="lv1..lv4 or sigma in seconds (custom)")
        p.add_argument("--strategy", choices=["single-ref", "all-pairs"], default=None)

    p = sub.add_parser("simulate", help="Monte-Carlo batch with the Gauss-Newton solver")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="solve microphone positions from pose and TDOA files")
    p.add_argument("poses", help="board poses JSON")
    p.add_argument("measurements", help="measurement CSV")
    common(p, with_noise=False)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("extract", help="GCC-PHAT TDOA extraction from a multi-channel WAV")
    p.add_argument("wav", help="multi-channel WAV, channel i = microphone i")
    p.add_argument("windows", help="emission windows CSV")
    common(p, with_noise=False)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("compare", help="proposed solver vs. grid-search baseline")
    common(p)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
