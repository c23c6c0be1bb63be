"""Mono 16 kHz audio clips and 16-bit PCM WAV I/O.

Only the canonical case is supported: mono, 16-bit PCM, 16 kHz. Anything
else is rejected with AudioFormatError -- no resampling, no channel mixing.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

REQUIRED_SAMPLE_RATE = 16_000
SAMPLES_PER_MS = REQUIRED_SAMPLE_RATE // 1000

# int16 <-> float scale; v/32768 then round(v*32768) round-trips every int16.
_PCM_SCALE = 32768.0


class AudioFormatError(ValueError):
    """WAV file is not mono 16-bit PCM at 16 kHz, or is otherwise unreadable."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = REQUIRED_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if self.sample_rate_hz != REQUIRED_SAMPLE_RATE:
            raise AudioFormatError(
                f"sample_rate_hz must be {REQUIRED_SAMPLE_RATE}, got {self.sample_rate_hz}"
            )
        if samples.size and not np.isfinite(samples).all():
            raise ValueError("samples must be finite")

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_ms(self) -> float:
        return 1000.0 * len(self) / self.sample_rate_hz


def read_wav(path) -> AudioClip:
    """Read a mono 16-bit PCM WAV at 16 kHz into [-1, 1] floats."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            rate = wf.getframerate()
            comptype = wf.getcomptype()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (wave.Error, EOFError, OSError) as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file ({exc})") from exc

    if comptype != "NONE":
        raise AudioFormatError(f"{path}: compression {comptype!r} not supported, need PCM")
    if n_channels != 1:
        raise AudioFormatError(f"{path}: {n_channels} channels, need mono")
    if sampwidth != 2:
        raise AudioFormatError(f"{path}: {8 * sampwidth}-bit samples, need 16-bit")
    if rate != REQUIRED_SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz, need {REQUIRED_SAMPLE_RATE} Hz")

    ints = np.frombuffer(raw, dtype="<i2")
    return AudioClip(ints.astype(np.float64) / _PCM_SCALE)


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as mono 16-bit PCM WAV (canonical 44-byte header)."""
    scaled = np.round(clip.samples * _PCM_SCALE)
    ints = np.clip(scaled, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(REQUIRED_SAMPLE_RATE)
        wf.writeframes(ints.tobytes())
