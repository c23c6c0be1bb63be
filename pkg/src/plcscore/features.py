"""Log-power spectrogram input features and training-time microaugmentations.

Framing: 32 ms periodic Hamming window, 16 ms shift, FFT size equal to the
window (512 samples at 16 kHz, no zero padding), trailing partial frame
dropped. Per-bin value is log(|X|^2 + 1e-12), natural log.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .audio import SAMPLES_PER_MS, AudioClip

WINDOW_MS = 32
FRAME_SHIFT_MS = 16
WINDOW_SAMPLES = WINDOW_MS * SAMPLES_PER_MS  # 512
HOP_SAMPLES = FRAME_SHIFT_MS * SAMPLES_PER_MS  # 256
FFT_SIZE = WINDOW_SAMPLES
N_BINS = FFT_SIZE // 2 + 1  # 257
LOG_FLOOR = 1e-12

MAX_TRIM_SAMPLES = 10
MAX_GAIN_REDUCTION_DB = 3.0


@dataclass(frozen=True)
class Spectrogram:
    """Time-major (T, F) log-power matrix, F = 257."""

    frames: np.ndarray
    frame_shift_ms: int = FRAME_SHIFT_MS
    window_ms: int = WINDOW_MS

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 2:
            raise ValueError("frames must be a 2-D (T, F) matrix")
        if frames.shape[1] != N_BINS:
            raise ValueError(f"expected {N_BINS} frequency bins, got {frames.shape[1]}")
        if not np.isfinite(frames).all():
            raise ValueError("spectrogram entries must be finite")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def n_bins(self) -> int:
        return int(self.frames.shape[1])


def periodic_hamming(n: int) -> np.ndarray:
    """DFT-even Hamming window (denominator n, not n-1)."""
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int) -> int:
    """Closed-form T for a clip of n_samples (no padding, partial frame dropped)."""
    if n_samples < WINDOW_SAMPLES:
        raise ValueError(f"need at least {WINDOW_SAMPLES} samples, got {n_samples}")
    return (n_samples - WINDOW_SAMPLES) // HOP_SAMPLES + 1


def power_frames(samples: np.ndarray) -> np.ndarray:
    """Windowed |rfft|^2 per frame, shape (T, 257). Shared with the MCD metric."""
    samples = np.asarray(samples, dtype=np.float64)
    n_frames = frame_count(samples.size)
    window = periodic_hamming(WINDOW_SAMPLES)
    idx = np.arange(WINDOW_SAMPLES)[None, :] + HOP_SAMPLES * np.arange(n_frames)[:, None]
    frames = samples[idx] * window
    spectrum = np.fft.rfft(frames, n=FFT_SIZE, axis=1)
    return (spectrum.real**2 + spectrum.imag**2)


def logpow_spectrogram(clip: AudioClip) -> Spectrogram:
    """Log-power STFT of a clip; frame t covers samples [256t, 256t + 512)."""
    power = power_frames(clip.samples)
    return Spectrogram(np.log(power + LOG_FLOOR))


def trim_and_gain(clip: AudioClip, trim_samples: int, gain_db: float) -> AudioClip:
    """Deterministic core of microaugment: drop samples from the start, scale."""
    if not 0 <= trim_samples <= MAX_TRIM_SAMPLES:
        raise ValueError(f"trim_samples must be in [0, {MAX_TRIM_SAMPLES}]")
    if not -MAX_GAIN_REDUCTION_DB <= gain_db <= 0.0:
        raise ValueError(f"gain_db must be in [-{MAX_GAIN_REDUCTION_DB}, 0]")
    if trim_samples == 0 and gain_db == 0.0:
        return clip
    gain = 10.0 ** (gain_db / 20.0)
    return AudioClip(clip.samples[trim_samples:] * gain)


def microaugment(clip: AudioClip, rng_seed: int) -> AudioClip:
    """Randomly trim up to 10 start samples and attenuate by up to 3 dBFS."""
    if len(clip) <= MAX_TRIM_SAMPLES:
        raise ValueError(f"clip must be longer than {MAX_TRIM_SAMPLES} samples")
    rng = np.random.default_rng(rng_seed)
    trim = int(rng.integers(0, MAX_TRIM_SAMPLES + 1))
    gain_db = float(rng.uniform(-MAX_GAIN_REDUCTION_DB, 0.0))
    return trim_and_gain(clip, trim, gain_db)


def write_feature_dump(path, spec: Spectrogram) -> None:
    """Debug dump: one JSON header line, then little-endian float32 row-major data."""
    header = {
        "n_frames": spec.n_frames,
        "n_bins": spec.n_bins,
        "frame_shift_ms": spec.frame_shift_ms,
        "window_ms": spec.window_ms,
        "dtype": "<f4",
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        fh.write(spec.frames.astype("<f4").tobytes())


def read_feature_dump(path) -> Spectrogram:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f4")
    frames = data.reshape(header["n_frames"], header["n_bins"]).astype(np.float64)
    return Spectrogram(frames, header["frame_shift_ms"], header["window_ms"])
