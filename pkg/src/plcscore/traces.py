"""Packet-loss traces: parsing, synthesis, segmentation, burst statistics,
and the three stratified sampling strategies (basic / heavy_loss / long_bursts).

Trace file format (text, UTF-8, "\\n" endings)::

    #plctrace v1 packet_ms=20.0
    0,0
    1,1
    2,0

One packet per line as ``seq,lost`` with lost in {0,1}; seq must run
0..N-1 with no gaps or duplicates.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

TRACE_HEADER_RE = re.compile(r"^#plctrace v1 packet_ms=([0-9.eE+-]+)\s*$")

SAMPLING_MODES = ("basic", "heavy_loss", "long_bursts")

# Burst-length partition for heavy_loss, half-open intervals (lo, hi] in ms.
HEAVY_SUBSETS = (
    ("burst_le_120ms", 0.0, 120.0),
    ("burst_120_320ms", 120.0, 320.0),
    ("burst_320_1000ms", 320.0, 1000.0),
)

BASIC_MAX_BURST_MS = 120.0
LONG_BURST_LO_MS = 120.0
LONG_BURST_HI_MS = 300.0
LONG_BURST_MEDIAN_MS = 80.0
LONG_BURST_LOSS_RANGE = (10.0, 70.0)


class TraceParseError(ValueError):
    """A trace file line could not be parsed. Carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TraceStructureError(ValueError):
    """The parsed packet list violates trace invariants (empty, gap, duplicate)."""


@dataclass(frozen=True)
class PacketTrace:
    """Loss metadata for one audio stream. ``lost[i]`` is packet i (seq == i)."""

    lost: np.ndarray
    packet_duration_ms: float

    def __post_init__(self):
        lost = np.asarray(self.lost, dtype=bool)
        object.__setattr__(self, "lost", lost)
        if lost.ndim != 1 or lost.size == 0:
            raise TraceStructureError("trace must contain at least one packet")
        if self.packet_duration_ms <= 0:
            raise ValueError("packet_duration_ms must be positive")

    @property
    def n_packets(self) -> int:
        return int(self.lost.size)

    @property
    def duration_ms(self) -> float:
        return self.n_packets * self.packet_duration_ms


@dataclass(frozen=True)
class TraceSegment:
    """A fixed-duration window of a source trace."""

    source_id: str
    start_packet: int
    lost: np.ndarray
    packet_duration_ms: float

    def __post_init__(self):
        lost = np.asarray(self.lost, dtype=bool)
        object.__setattr__(self, "lost", lost)
        if lost.ndim != 1 or lost.size == 0:
            raise TraceStructureError("segment must contain at least one packet")
        if self.packet_duration_ms <= 0:
            raise ValueError("packet_duration_ms must be positive")

    @property
    def n_packets(self) -> int:
        return int(self.lost.size)

    @property
    def duration_ms(self) -> float:
        return self.n_packets * self.packet_duration_ms

    def as_trace(self) -> PacketTrace:
        return PacketTrace(self.lost.copy(), self.packet_duration_ms)


@dataclass(frozen=True)
class BurstStats:
    loss_percent: float
    max_burst_ms: float
    median_burst_ms: float
    burst_count: int

    def to_dict(self) -> dict:
        return {
            "loss_percent": self.loss_percent,
            "max_burst_ms": self.max_burst_ms,
            "median_burst_ms": self.median_burst_ms,
            "burst_count": self.burst_count,
        }


@dataclass(frozen=True)
class GilbertParams:
    """Two-state (good/bad) Markov loss model parameters."""

    p_good_to_bad: float
    p_bad_to_good: float
    loss_in_bad: float = 1.0
    loss_in_good: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_good_to_bad", "p_bad_to_good", "loss_in_bad", "loss_in_good"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.p_good_to_bad + self.p_bad_to_good <= 0:
            raise ValueError("p_good_to_bad + p_bad_to_good must be > 0")


@dataclass(frozen=True)
class SamplingSpec:
    mode: str = "basic"
    segment_ms: float = 10_000.0
    bucket_count: int = 14
    per_bucket: int = 100
    heavy_per_bucket: tuple[int, int, int] = (100, 50, 25)
    long_burst_total: int = 500
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"mode must be one of {SAMPLING_MODES}, got {self.mode!r}")
        if self.segment_ms <= 0:
            raise ValueError("segment_ms must be positive")
        if self.bucket_count < 1:
            raise ValueError("bucket_count must be >= 1")
        if self.per_bucket < 1 or self.long_burst_total < 1:
            raise ValueError("sample counts must be >= 1")
        if len(self.heavy_per_bucket) != 3 or any(c < 1 for c in self.heavy_per_bucket):
            raise ValueError("heavy_per_bucket must be three positive integers")


@dataclass(frozen=True)
class SampledSegment:
    segment: TraceSegment
    bucket: str
    stats: BurstStats


@dataclass(frozen=True)
class BucketShortfall:
    bucket: str
    requested: int
    available: int


@dataclass
class SampleResult:
    items: list[SampledSegment]
    shortfalls: list[BucketShortfall] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


def parse_trace(text: str) -> PacketTrace:
    """Parse trace-file content into a PacketTrace.

    Raises TraceParseError (with line number) on malformed lines and
    TraceStructureError on empty traces, duplicate, or missing seq values.
    """
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise TraceParseError(1, "missing '#plctrace v1' header")
    m = TRACE_HEADER_RE.match(lines[0])
    if m is None:
        raise TraceParseError(1, f"bad header {lines[0]!r}; expected '#plctrace v1 packet_ms=<real>'")
    try:
        packet_ms = float(m.group(1))
    except ValueError:
        raise TraceParseError(1, f"bad packet_ms value {m.group(1)!r}") from None
    if packet_ms <= 0:
        raise TraceParseError(1, f"packet_ms must be positive, got {packet_ms}")

    seqs: list[int] = []
    lost: list[bool] = []
    for i, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise TraceParseError(i, f"expected 'seq,lost', got {raw!r}")
        try:
            seq = int(parts[0])
        except ValueError:
            raise TraceParseError(i, f"bad seq {parts[0]!r}") from None
        if parts[1] not in ("0", "1"):
            raise TraceParseError(i, f"lost flag must be 0 or 1, got {parts[1]!r}")
        if seq < 0:
            raise TraceParseError(i, f"seq must be non-negative, got {seq}")
        seqs.append(seq)
        lost.append(parts[1] == "1")

    if not seqs:
        raise TraceStructureError("trace contains no packets")
    for pos, seq in enumerate(seqs):
        if seq == pos:
            continue
        if seq in seqs[:pos]:
            raise TraceStructureError(f"duplicate seq {seq}")
        raise TraceStructureError(f"seq gap: expected {pos}, got {seq}")

    return PacketTrace(np.array(lost, dtype=bool), packet_ms)


def format_trace(trace: PacketTrace) -> str:
    """Inverse of parse_trace."""
    out = [f"#plctrace v1 packet_ms={trace.packet_duration_ms:g}"]
    out.extend(f"{i},{int(flag)}" for i, flag in enumerate(trace.lost))
    return "\n".join(out) + "\n"


def load_trace(path) -> PacketTrace:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trace(fh.read())


def save_trace(path, trace: PacketTrace) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_trace(trace))


def synth_gilbert(params: GilbertParams, n_packets: int, packet_duration_ms: float = 20.0) -> PacketTrace:
    """Synthesize a trace from the two-state loss model.

    The chain starts in the good state; packet i is lost with probability
    loss_in_bad or loss_in_good depending on the current state, and the state
    transition is applied after each packet. Bit-reproducible per seed.
    """
    if n_packets < 1:
        raise ValueError("n_packets must be >= 1")
    rng = np.random.default_rng(params.seed)
    u_loss = rng.random(n_packets)
    u_trans = rng.random(n_packets)

    in_bad = np.empty(n_packets, dtype=bool)
    state_bad = False
    p, q = params.p_good_to_bad, params.p_bad_to_good
    for i in range(n_packets):
        in_bad[i] = state_bad
        if state_bad:
            state_bad = not (u_trans[i] < q)
        else:
            state_bad = u_trans[i] < p

    loss_prob = np.where(in_bad, params.loss_in_bad, params.loss_in_good)
    lost = u_loss < loss_prob
    return PacketTrace(lost, packet_duration_ms)


def _segment_packet_count(segment_ms: float, packet_duration_ms: float) -> int:
    n = segment_ms / packet_duration_ms
    n_round = int(round(n))
    if n_round < 1 or abs(n_round * packet_duration_ms - segment_ms) > 1e-6 * packet_duration_ms:
        raise ValueError(
            f"segment_ms={segment_ms} is not an integral number of {packet_duration_ms} ms packets"
        )
    return n_round


def segment_trace(
    trace: PacketTrace,
    segment_ms: float,
    rng_seed: int,
    count: int = 1,
    retry_factor: int = 10,
    source_id: str = "trace",
) -> list[TraceSegment]:
    """Randomly extract fixed-duration segments that contain at least one loss.

    Offsets are drawn uniformly (packet-aligned, deterministic per seed) and
    de-duplicated; extraction stops once `count` distinct segments are found
    or the retry budget (retry_factor * count draws) is exhausted. A trace
    shorter than segment_ms is an error; a loss-free trace yields [].
    """
    n_seg = _segment_packet_count(segment_ms, trace.packet_duration_ms)
    if trace.n_packets < n_seg:
        raise ValueError(
            f"trace ({trace.duration_ms:g} ms) is shorter than segment_ms ({segment_ms:g} ms)"
        )
    if count < 1:
        raise ValueError("count must be >= 1")
    if not trace.lost.any():
        return []

    rng = np.random.default_rng(rng_seed)
    max_offset = trace.n_packets - n_seg
    seen: set[int] = set()
    out: list[TraceSegment] = []
    budget = retry_factor * count
    while len(out) < count and budget > 0:
        budget -= 1
        off = int(rng.integers(0, max_offset + 1))
        if off in seen:
            continue
        seen.add(off)
        window = trace.lost[off : off + n_seg]
        if not window.any():
            continue
        out.append(TraceSegment(source_id, off, window.copy(), trace.packet_duration_ms))
    return out


def burst_stats(seg: TraceSegment | PacketTrace) -> BurstStats:
    """Loss percentage and burst-run statistics for a segment.

    A burst is a maximal run of consecutive lost packets. The median over the
    burst-length multiset uses the lower median for even counts so filters
    stay reproducible.
    """
    lost = seg.lost
    total = lost.size
    n_lost = int(lost.sum())
    loss_percent = 100.0 * n_lost / total
    if n_lost == 0:
        return BurstStats(loss_percent, 0.0, 0.0, 0)

    padded = np.concatenate(([False], lost, [False]))
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    starts, ends = edges[::2], edges[1::2]
    run_lengths = np.sort(ends - starts)
    pd = seg.packet_duration_ms
    lower_median = run_lengths[(run_lengths.size - 1) // 2]
    return BurstStats(
        loss_percent=loss_percent,
        max_burst_ms=float(run_lengths[-1] * pd),
        median_burst_ms=float(lower_median * pd),
        burst_count=int(run_lengths.size),
    )


def quantile_bucket_edges(values: np.ndarray, bucket_count: int) -> np.ndarray:
    """Equal-probability bucket edges computed from the candidate population."""
    if bucket_count < 1:
        raise ValueError("bucket_count must be >= 1")
    if bucket_count == 1:
        return np.empty(0)
    probs = np.arange(1, bucket_count) / bucket_count
    return np.quantile(np.asarray(values, dtype=float), probs)


def assign_bucket(value: float, edges: np.ndarray) -> int:
    """Values exactly on an edge go to the lower bucket."""
    return int(np.searchsorted(edges, value, side="left"))


def basic_filter(stats: BurstStats) -> bool:
    return stats.max_burst_ms <= BASIC_MAX_BURST_MS


def long_bursts_filter(stats: BurstStats) -> bool:
    lo, hi = LONG_BURST_LOSS_RANGE
    return (
        LONG_BURST_LO_MS < stats.max_burst_ms <= LONG_BURST_HI_MS
        and stats.median_burst_ms >= LONG_BURST_MEDIAN_MS
        and lo <= stats.loss_percent <= hi
    )


def heavy_subset_of(stats: BurstStats) -> str | None:
    """Name of the heavy_loss burst subset for a segment, or None if discarded."""
    for name, lo, hi in HEAVY_SUBSETS:
        if lo < stats.max_burst_ms <= hi:
            return name
    return None


def _draw_bucket(
    rng: np.random.Generator,
    population: list[tuple[TraceSegment, BurstStats]],
    bucket: str,
    requested: int,
    items: list[SampledSegment],
    shortfalls: list[BucketShortfall],
) -> None:
    if len(population) < requested:
        shortfalls.append(BucketShortfall(bucket, requested, len(population)))
        warnings.warn(
            f"bucket {bucket}: requested {requested} segments but only "
            f"{len(population)} candidates available; taking all",
            stacklevel=3,
        )
        chosen = range(len(population))
    else:
        chosen = rng.choice(len(population), size=requested, replace=False)
    for idx in chosen:
        seg, st = population[int(idx)]
        items.append(SampledSegment(seg, bucket, st))


def _quantile_sample(
    rng: np.random.Generator,
    survivors: list[tuple[TraceSegment, BurstStats]],
    bucket_count: int,
    per_bucket: int,
    label_prefix: str,
    items: list[SampledSegment],
    shortfalls: list[BucketShortfall],
) -> None:
    loss = np.array([st.loss_percent for _, st in survivors])
    edges = quantile_bucket_edges(loss, bucket_count)
    assignment = np.searchsorted(edges, loss, side="left")
    for b in range(bucket_count):
        bucket_label = f"{label_prefix}bucket_{b:02d}"
        pop = [survivors[i] for i in np.flatnonzero(assignment == b)]
        _draw_bucket(rng, pop, bucket_label, per_bucket, items, shortfalls)


def stratified_sample(candidates: list[TraceSegment], spec: SamplingSpec) -> SampleResult:
    """Sample candidate segments under one of the three strategies.

    basic: keep max_burst <= 120 ms, bucket survivors into `bucket_count`
    loss-percentage quantile buckets, draw `per_bucket` from each without
    replacement.

    heavy_loss: partition by max burst into (0,120] / (120,320] / (320,1000] ms
    (longer discarded), quantile-bucket each subset independently, draw
    heavy_per_bucket[i] per bucket of subset i.

    long_bursts: keep 120 < max_burst <= 300 ms, median burst >= 80 ms and
    loss in [10, 70] percent; draw `long_burst_total` uniformly.

    Under-populated buckets yield all their candidates plus a shortfall entry
    (and a warning) rather than an error. Deterministic per spec.rng_seed.
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    rng = np.random.default_rng(spec.rng_seed)
    stats = [burst_stats(seg) for seg in candidates]
    paired = list(zip(candidates, stats))

    items: list[SampledSegment] = []
    shortfalls: list[BucketShortfall] = []

    if spec.mode == "basic":
        survivors = [(seg, st) for seg, st in paired if basic_filter(st)]
        if not survivors:
            for b in range(spec.bucket_count):
                shortfalls.append(BucketShortfall(f"bucket_{b:02d}", spec.per_bucket, 0))
            warnings.warn("basic filter removed every candidate", stacklevel=2)
            return SampleResult(items, shortfalls)
        _quantile_sample(rng, survivors, spec.bucket_count, spec.per_bucket, "", items, shortfalls)

    elif spec.mode == "heavy_loss":
        for (name, _, _), per_bucket in zip(HEAVY_SUBSETS, spec.heavy_per_bucket):
            subset = [(seg, st) for seg, st in paired if heavy_subset_of(st) == name]
            if not subset:
                for b in range(spec.bucket_count):
                    shortfalls.append(BucketShortfall(f"{name}/bucket_{b:02d}", per_bucket, 0))
                warnings.warn(f"heavy_loss subset {name} has no candidates", stacklevel=2)
                continue
            _quantile_sample(
                rng, subset, spec.bucket_count, per_bucket, f"{name}/", items, shortfalls
            )

    else:  # long_bursts
        survivors = [(seg, st) for seg, st in paired if long_bursts_filter(st)]
        _draw_bucket(rng, survivors, "long_bursts", spec.long_burst_total, items, shortfalls)

    return SampleResult(items, shortfalls)


def sample_manifest(result: SampleResult, spec: SamplingSpec) -> dict:
    """JSON-ready manifest for a sampling run."""
    return {
        "format": "plcsample v1",
        "mode": spec.mode,
        "spec": {
            "segment_ms": spec.segment_ms,
            "bucket_count": spec.bucket_count,
            "per_bucket": spec.per_bucket,
            "heavy_per_bucket": list(spec.heavy_per_bucket),
            "long_burst_total": spec.long_burst_total,
            "rng_seed": spec.rng_seed,
        },
        "shortfalls": [
            {"bucket": s.bucket, "requested": s.requested, "available": s.available}
            for s in result.shortfalls
        ],
        "segments": [
            {
                "source_id": it.segment.source_id,
                "start_packet": it.segment.start_packet,
                "n_packets": it.segment.n_packets,
                "packet_duration_ms": it.segment.packet_duration_ms,
                "bucket": it.bucket,
                **it.stats.to_dict(),
            }
            for it in result.items
        ],
    }


def write_sample_manifest(path, result: SampleResult, spec: SamplingSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sample_manifest(result, spec), fh, indent=2)
        fh.write("\n")
