"""Apply a loss trace to clean audio: zero fill (no-op concealment) or
oracle fill (perfect concealment, i.e. the reference itself).

Zero fill is literal -- no crossfading or click smoothing at loss
boundaries, since any smoothing would itself be a concealment algorithm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import SAMPLES_PER_MS, AudioClip
from .traces import TraceSegment

FILL_MODES = ("zero", "oracle")


@dataclass(frozen=True)
class DegradedClip:
    audio: AudioClip
    trace: TraceSegment
    fill_mode: str


def samples_per_packet(trace: TraceSegment) -> int:
    spp = trace.packet_duration_ms * SAMPLES_PER_MS
    spp_int = int(round(spp))
    if abs(spp - spp_int) > 1e-9 or spp_int < 1:
        raise ValueError(
            f"packet_duration_ms={trace.packet_duration_ms} is not an integral number of samples"
        )
    return spp_int


def cut_segment(clip: AudioClip, target_samples: int, rng_seed: int) -> AudioClip:
    """Contiguous random slice of exactly target_samples, deterministic per seed."""
    if target_samples < 1:
        raise ValueError("target_samples must be >= 1")
    if len(clip) < target_samples:
        raise ValueError(f"clip has {len(clip)} samples, need at least {target_samples}")
    rng = np.random.default_rng(rng_seed)
    offset = int(rng.integers(0, len(clip) - target_samples + 1))
    return AudioClip(clip.samples[offset : offset + target_samples].copy())


def apply_trace(clip: AudioClip, trace: TraceSegment, fill_mode: str) -> DegradedClip:
    """Replace the sample span of every lost packet.

    zero mode writes zeros; oracle mode leaves the reference untouched.
    Received packets pass through bit-identical in both modes. The clip must
    be exactly trace-length (packet count x samples per packet).
    """
    if fill_mode not in FILL_MODES:
        raise ValueError(f"fill_mode must be one of {FILL_MODES}, got {fill_mode!r}")
    spp = samples_per_packet(trace)
    expected = trace.n_packets * spp
    if len(clip) != expected:
        raise ValueError(
            f"clip length {len(clip)} != trace length {expected} "
            f"({trace.n_packets} packets x {spp} samples)"
        )
    out = clip.samples.copy()
    if fill_mode == "zero":
        out[np.repeat(trace.lost, spp)] = 0.0
    return DegradedClip(AudioClip(out), trace, fill_mode)
