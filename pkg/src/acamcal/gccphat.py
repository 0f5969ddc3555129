"""TDOA extraction from multi-channel audio via whitened cross-correlation,
plus synthetic multi-channel signal generation for hardware-free testing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import AmbiguousPeakError, ExtractionError, NoSignalError
from .tdoa import EmissionEvent, MeasurementSet, PairingStrategy

SPECTRUM_FLOOR = 1e-12  # cross-power bins below this are zeroed, not whitened

_CHIRP_F0_HZ = 500.0
_CHIRP_BANDWIDTH_FRAC = 0.4  # sweep up to this fraction of the sample rate
_CHIRP_DURATION_S = 0.05
_PAD_SAMPLES = 64


@dataclass(frozen=True)
class AudioBuffer:
    """Multi-channel audio: (N, L) float array, channel i = microphone i."""

    channels: np.ndarray
    sample_rate: float

    def __post_init__(self):
        ch = np.atleast_2d(np.asarray(self.channels, dtype=np.float64))
        ch = np.ascontiguousarray(ch)
        ch.flags.writeable = False
        object.__setattr__(self, "channels", ch)
        if not self.sample_rate > 0:
            raise ValueError("sample rate must be positive")

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]


@dataclass(frozen=True)
class EmissionWindow:
    """Sample range of one source emission within a recording."""

    start_sample: int
    length_samples: int
    board_index: int
    source_index: int

    def __post_init__(self):
        if self.start_sample < 0 or self.length_samples < 1:
            raise ValueError("window must have non-negative start and positive length")
        if self.board_index < 0 or self.source_index < 0:
            raise ValueError("window indices must be non-negative")


def gcc_phat(sig_a, sig_b, sample_rate: float, max_lag: float) -> float:
    """Lag of ``sig_a`` relative to ``sig_b`` in seconds.

    The cross-power spectrum is normalized to unit magnitude per bin
    (phase transform), inverted, and the peak within +/- ``max_lag`` is
    refined by parabolic interpolation. Positive lag means ``sig_a`` is
    the delayed copy.
    """
    a = np.asarray(sig_a, dtype=np.float64)
    b = np.asarray(sig_b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError("signals must be 1-D and of equal length")
    if a.shape[0] < 16:
        raise ValueError("signals must have at least 16 samples")
    if not sample_rate > 0:
        raise ValueError("sample rate must be positive")
    max_shift = int(max_lag * sample_rate)
    if max_shift < 1:
        raise ValueError(f"max_lag {max_lag} is below one sample period")
    if max_lag * sample_rate >= a.shape[0]:
        raise ValueError("max_lag must be shorter than the signal")

    n = a.shape[0] + b.shape[0]
    cross = np.fft.rfft(a, n) * np.conj(np.fft.rfft(b, n))
    mag = np.abs(cross)
    live = mag >= SPECTRUM_FLOOR
    if not np.any(live):
        raise NoSignalError("inputs have no spectral content above the floor")
    white = np.zeros_like(cross)
    white[live] = cross[live] / mag[live]
    cc = np.fft.irfft(white, n)

    window = np.concatenate([cc[-max_shift:], cc[: max_shift + 1]])
    strength = np.abs(window)
    peak = int(np.argmax(strength))
    if peak == 0 or peak == window.shape[0] - 1:
        raise AmbiguousPeakError(
            f"correlation peak sits on the +/-{max_lag:g} s window boundary"
        )
    y0, y1, y2 = strength[peak - 1], strength[peak], strength[peak + 1]
    denom = y0 - 2.0 * y1 + y2
    delta = 0.0 if abs(denom) < 1e-15 else 0.5 * (y0 - y2) / denom
    return (peak - max_shift + delta) / sample_rate


def extract_measurements(
    audio: AudioBuffer,
    windows: list[EmissionWindow],
    strategy: PairingStrategy,
    max_lag: float,
) -> MeasurementSet:
    """One canonical-order TDOA block per emission window.

    Windows must be sorted, non-overlapping, and inside the buffer. If any
    (window, pair) extraction fails, an :class:`ExtractionError` is raised
    carrying every failure and the measurements of the windows that did
    succeed.
    """
    if not windows:
        raise ValueError("need at least one emission window")
    prev_end = 0
    for w in windows:
        if w.start_sample < prev_end:
            raise ValueError("windows must be sorted and non-overlapping")
        if w.start_sample + w.length_samples > audio.n_samples:
            raise ValueError(
                f"window [{w.start_sample}, {w.start_sample + w.length_samples}) "
                f"exceeds buffer of {audio.n_samples} samples"
            )
        prev_end = w.start_sample + w.length_samples

    pairs = strategy.pairs(audio.n_channels)
    blocks: list[np.ndarray] = []
    events: list[EmissionEvent] = []
    failures: list[tuple[int, tuple[int, int], str]] = []
    for idx, w in enumerate(windows):
        seg = audio.channels[:, w.start_sample : w.start_sample + w.length_samples]
        block = np.empty(pairs.shape[0])
        ok = True
        for b, (mic, ref) in enumerate(pairs):
            try:
                block[b] = gcc_phat(seg[mic], seg[ref], audio.sample_rate, max_lag)
            except (NoSignalError, AmbiguousPeakError, ValueError) as exc:
                failures.append((idx, (int(mic), int(ref)), str(exc)))
                ok = False
        if ok:
            blocks.append(block)
            events.append(EmissionEvent(w.board_index, w.source_index))

    partial = None
    if blocks:
        partial = MeasurementSet(
            np.concatenate(blocks), strategy, tuple(events), pairs.shape[0]
        )
    if failures:
        raise ExtractionError(
            f"{len(failures)} pair extraction(s) failed across "
            f"{len({f[0] for f in failures})} window(s)",
            failures=failures,
            partial=partial,
        )
    return partial


def _chirp(sample_rate: float) -> np.ndarray:
    """Hann-windowed linear up-chirp used as the synthetic source signal."""
    n = int(round(_CHIRP_DURATION_S * sample_rate))
    t = np.arange(n) / sample_rate
    f1 = _CHIRP_BANDWIDTH_FRAC * sample_rate
    phase = 2.0 * np.pi * (_CHIRP_F0_HZ * t + 0.5 * (f1 - _CHIRP_F0_HZ) / _CHIRP_DURATION_S * t**2)
    return np.sin(phase) * np.hanning(n)


def synth_emission(scenario, event: EmissionEvent, sample_rate: float,
                   snr_db: float = math.inf, seed=0) -> AudioBuffer:
    """Synthesize one emission as heard by every microphone.

    Each channel is the chirp delayed by its exact propagation time
    (fractional delays applied as frequency-domain phase shifts), plus
    white noise at ``snr_db`` relative to the channel signal. Bit-identical
    for a fixed seed.
    """
    if sample_rate < 8000:
        raise ValueError("sample rate must be at least 8 kHz")
    if event.source_position_camera is None:
        raise ValueError("event has no source position")
    mics = scenario.true_mics.positions
    delays = np.linalg.norm(mics - event.source_position_camera, axis=1) / scenario.c

    src = _chirp(sample_rate)
    n = src.shape[0] + int(np.ceil(delays.max() * sample_rate)) + _PAD_SAMPLES
    spectrum = np.fft.rfft(src, n)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    channels = np.empty((mics.shape[0], n))
    for i, tau in enumerate(delays):
        channels[i] = np.fft.irfft(spectrum * np.exp(-2j * np.pi * freqs * tau), n)

    if np.isfinite(snr_db):
        rng = np.random.default_rng(seed)
        noise_std = float(np.sqrt(np.mean(channels[0] ** 2))) * 10.0 ** (-snr_db / 20.0)
        channels = channels + rng.normal(0.0, noise_std, channels.shape)
    return AudioBuffer(channels, sample_rate)


def synth_session(scenario, sample_rate: float, snr_db: float = math.inf,
                  seed: int = 0, gap_s: float = 0.01):
    """Concatenate one emission per scenario event into a single recording.

    Returns (AudioBuffer, windows); window order matches scenario.events.
    """
    seeds = np.random.SeedSequence(seed).spawn(len(scenario.events))
    gap = int(round(gap_s * sample_rate))
    n_ch = scenario.true_mics.n_mics
    pieces = []
    windows = []
    cursor = 0
    for ev, child in zip(scenario.events, seeds):
        buf = synth_emission(scenario, ev, sample_rate, snr_db, child)
        pieces.append(buf.channels)
        windows.append(EmissionWindow(cursor, buf.n_samples, ev.board_index, ev.source_index))
        cursor += buf.n_samples
        if gap:
            pieces.append(np.zeros((n_ch, gap)))
            cursor += gap
    return AudioBuffer(np.concatenate(pieces, axis=1), sample_rate), windows


# ---------------------------------------------------------------------------
# file formats

WINDOW_HEADER = ["start_sample", "length_samples", "board_index", "source_index"]

_INT_SCALES = {np.dtype(np.int16): 2.0**15, np.dtype(np.int32): 2.0**31}


def read_wav(path) -> AudioBuffer:
    """Read a multi-channel WAV (PCM 16/24/32-bit or float) as float64 in [-1, 1]."""
    rate, data = wavfile.read(path)
    if data.ndim == 1:
        data = data[:, None]
    dtype = data.dtype
    if dtype == np.uint8:
        floats = (data.astype(np.float64) - 128.0) / 128.0
    elif dtype in (np.dtype(np.int16), np.dtype(np.int32)):
        floats = data.astype(np.float64) / _INT_SCALES[dtype]
    elif dtype in (np.dtype(np.float32), np.dtype(np.float64)):
        floats = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample format {dtype}")
    return AudioBuffer(floats.T, float(rate))


def write_wav(path, audio: AudioBuffer) -> None:
    """Write as 32-bit float WAV, channels in microphone order."""
    wavfile.write(path, int(round(audio.sample_rate)), audio.channels.T.astype(np.float32))


def write_windows(windows: list[EmissionWindow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(WINDOW_HEADER)
        for w in windows:
            writer.writerow([w.start_sample, w.length_samples, w.board_index, w.source_index])


def read_windows(path) -> list[EmissionWindow]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != WINDOW_HEADER:
        raise ValueError(f"{path}:1: expected header {','.join(WINDOW_HEADER)}")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise ValueError(f"{path}:{i}: expected 4 columns, got {len(row)}")
        try:
            out.append(EmissionWindow(int(row[0]), int(row[1]), int(row[2]), int(row[3])))
        except ValueError as exc:
            raise ValueError(f"{path}:{i}: {exc}") from exc
    return out
