"""Acoustic-camera extrinsic calibration.

Estimates the 3-D position of every microphone of an acoustic camera in
the optical-camera frame from TDOA measurements and calibration-board
poses, via weighted Gauss-Newton batch optimization. Includes a
Monte-Carlo simulation harness, a grid-search baseline, and GCC-PHAT
TDOA extraction from multi-channel audio.
"""

__version__ = "0.1.0"

from ._kernels import active_backend
from .baseline import GridOptions, grid_calibrate
from .errors import (
    AmbiguousPeakError,
    CalibrationError,
    DegenerateGeometryError,
    DivergenceError,
    ExtractionError,
    IllConditionedError,
    NoSignalError,
    UnderdeterminedProblemError,
)
from .geometry import (
    BoardLayout,
    MicArray,
    Pose,
    board_to_camera,
    load_poses,
    make_cube_array,
    save_poses,
)
from .gccphat import (
    AudioBuffer,
    EmissionWindow,
    extract_measurements,
    gcc_phat,
    read_wav,
    read_windows,
    synth_emission,
    synth_session,
    write_wav,
    write_windows,
)
from .simulate import (
    NOISE_LEVELS,
    McReport,
    Scenario,
    SimConfig,
    generate_scenario,
    rmse,
    run_baseline_monte_carlo,
    run_comparison,
    run_monte_carlo,
    simulate_measurements,
)
from .solver import CalibrationResult, SolverOptions, gauss_newton, save_result, weighted_residual
from .tdoa import (
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
