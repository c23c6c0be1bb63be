"""Evaluation battery: Pearson/Spearman/MAE with filewise and modelwise
aggregation, percentile-bootstrap confidence intervals, and the intrusive
mel-cepstral-distortion baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .audio import REQUIRED_SAMPLE_RATE, AudioClip
from .features import FFT_SIZE, N_BINS, power_frames

MEL_BANDS = 40
MEL_F_LO = 0.0
MEL_F_HI = 8000.0
N_CEPSTRA = 13  # c0..c12; c0 is excluded from the distortion sum
MEL_LOG_FLOOR = 1e-12
MCD_SCALE = 10.0 / np.log(10.0)

AGGREGATION_LEVELS = ("filewise", "modelwise")


class DegenerateDataError(ValueError):
    """Correlation is undefined: constant input, or too many degenerate resamples."""


def _check_pair(x, y, min_len: int = 2):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"x and y must be equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} points, got {x.size}")
    return x, y


def pearson(x, y) -> float:
    """Product-moment correlation; constant input raises DegenerateDataError."""
    x, y = _check_pair(x, y)
    xd = x - x.mean()
    yd = y - y.mean()
    sxx = float(np.dot(xd, xd))
    syy = float(np.dot(yd, yd))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateDataError("correlation undefined for a constant vector")
    return float(np.dot(xd, yd) / np.sqrt(sxx * syy))


def average_ranks(v) -> np.ndarray:
    """1-based ranks; ties get the mean of their rank span."""
    v = np.asarray(v)
    order = np.argsort(v, kind="stable")
    sv = v[order]
    n = v.size
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = sv[1:] != sv[:-1]
    group_id = np.cumsum(new_group) - 1
    starts = np.flatnonzero(new_group)
    ends = np.append(starts[1:], n)
    group_rank = (starts + ends - 1) / 2.0 + 1.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = group_rank[group_id]
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = _check_pair(x, y)
    return pearson(average_ranks(x), average_ranks(y))


def mae(x, y) -> float:
    x, y = _check_pair(x, y, min_len=1)
    return float(np.mean(np.abs(x - y)))


@dataclass(frozen=True)
class ScorePair:
    file_id: str
    model_tag: str
    predicted: float
    reference_mos: float

    def __post_init__(self):
        if not np.isfinite(self.predicted) or not np.isfinite(self.reference_mos):
            raise ValueError("scores must be finite")
        if not 1.0 <= self.reference_mos <= 5.0:
            raise ValueError(f"reference_mos must be in [1, 5], got {self.reference_mos}")


def aggregate(pairs: list[ScorePair], level: str):
    """(x, y) = (predicted, reference) vectors at the requested level.

    filewise keeps one point per pair (reference votes are already averaged
    per file); modelwise averages each model's files with equal weight and
    orders points by model tag.
    """
    if not pairs:
        raise ValueError("pairs must be non-empty")
    if level not in AGGREGATION_LEVELS:
        raise ValueError(f"level must be one of {AGGREGATION_LEVELS}, got {level!r}")
    if level == "filewise":
        x = np.array([p.predicted for p in pairs])
        y = np.array([p.reference_mos for p in pairs])
        return x, y
    by_model: dict[str, list[ScorePair]] = {}
    for p in pairs:
        by_model.setdefault(p.model_tag, []).append(p)
    tags = sorted(by_model)
    x = np.array([np.mean([p.predicted for p in by_model[t]]) for t in tags])
    y = np.array([np.mean([p.reference_mos for p in by_model[t]]) for t in tags])
    return x, y


_BOOTSTRAP_STATS = {"pcc": pearson, "srcc": spearman}


def bootstrap_ci(x, y, statistic: str = "pcc", n_resamples: int = 1000, seed: int = 0,
                 confidence: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap over paired resamples, deterministic per seed.

    Resamples on which the statistic is degenerate (constant vector) are
    skipped; more than 10% skipped is an error. Per-resample generators are
    spawned from (seed, resample index) so any parallel execution would merge
    to the same interval.
    """
    x, y = _check_pair(x, y, min_len=10)
    if statistic not in _BOOTSTRAP_STATS:
        raise ValueError(f"statistic must be one of {sorted(_BOOTSTRAP_STATS)}")
    stat = _BOOTSTRAP_STATS[statistic]
    n = x.size
    children = np.random.SeedSequence(seed).spawn(n_resamples)
    values = []
    skipped = 0
    for child in children:
        rng = np.random.default_rng(child)
        idx = rng.integers(0, n, size=n)
        try:
            values.append(stat(x[idx], y[idx]))
        except DegenerateDataError:
            skipped += 1
    if skipped > 0.1 * n_resamples:
        raise DegenerateDataError(
            f"{skipped}/{n_resamples} bootstrap resamples were degenerate")
    alpha = 100.0 * (1.0 - confidence) / 2.0
    lo, hi = np.percentile(values, [alpha, 100.0 - alpha])
    return float(lo), float(hi)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_bands: int = MEL_BANDS, f_lo: float = MEL_F_LO,
                   f_hi: float = MEL_F_HI) -> np.ndarray:
    """Triangular mel filters on the 257-bin grid, shape (n_bands, 257)."""
    mel_points = np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_bands + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(N_BINS) * REQUIRED_SAMPLE_RATE / FFT_SIZE
    fb = np.zeros((n_bands, N_BINS))
    for m in range(n_bands):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def _dct2_basis(n_coeffs: int, n_bands: int) -> np.ndarray:
    # c_k = sum_m logE_m * cos(pi k (m + 0.5) / M)
    k = np.arange(n_coeffs)[:, None]
    m = np.arange(n_bands)[None, :]
    return np.cos(np.pi * k * (m + 0.5) / n_bands)


def mel_cepstra(samples: np.ndarray, n_coeffs: int = N_CEPSTRA) -> np.ndarray:
    """Per-frame mel cepstra (T, n_coeffs) from the shared STFT framing."""
    power = power_frames(samples)
    energies = power @ mel_filterbank().T
    log_e = np.log(energies + MEL_LOG_FLOOR)
    return log_e @ _dct2_basis(n_coeffs, MEL_BANDS).T


def mcd(reference: AudioClip, degraded: AudioClip) -> float:
    """Mel-cepstral distortion in dB over aligned, equal-length clips.

    Per frame: (10 / ln 10) * sqrt(2 * sum_{k=1..12} (c_k - c'_k)^2), averaged
    over frames; c0 (overall gain) is excluded. Alignment is the caller's
    responsibility; a length mismatch is an error, not a warp.
    """
    if len(reference) != len(degraded):
        raise ValueError(
            f"reference ({len(reference)}) and degraded ({len(degraded)}) lengths differ; "
            "mcd requires an aligned reference")
    c_ref = mel_cepstra(reference.samples)
    c_deg = mel_cepstra(degraded.samples)
    diff = c_ref[:, 1:] - c_deg[:, 1:]
    per_frame = MCD_SCALE * np.sqrt(2.0 * np.sum(diff * diff, axis=1))
    return float(np.mean(per_frame))


@dataclass(frozen=True)
class CorrelationReport:
    pcc: float
    srcc: float
    mae: float
    n: int
    pcc_ci: tuple[float, float] | None = None
    srcc_ci: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "pcc": self.pcc,
            "srcc": self.srcc,
            "mae": self.mae,
            "n": self.n,
            "pcc_ci": list(self.pcc_ci) if self.pcc_ci else None,
            "srcc_ci": list(self.srcc_ci) if self.srcc_ci else None,
        }


def correlation_report(x: np.ndarray, y: np.ndarray, ci: bool = False,
                       n_resamples: int = 1000, seed: int = 0) -> CorrelationReport:
    pcc_ci = srcc_ci = None
    if ci and x.size >= 10:
        pcc_ci = bootstrap_ci(x, y, "pcc", n_resamples, seed)
        srcc_ci = bootstrap_ci(x, y, "srcc", n_resamples, seed)
    return CorrelationReport(pcc=pearson(x, y), srcc=spearman(x, y), mae=mae(x, y),
                             n=int(x.size), pcc_ci=pcc_ci, srcc_ci=srcc_ci)


@dataclass
class EvalReport:
    filewise: CorrelationReport
    modelwise: CorrelationReport | None
    per_model: list[dict]

    def to_dict(self) -> dict:
        return {
            "filewise": self.filewise.to_dict(),
            "modelwise": self.modelwise.to_dict() if self.modelwise else None,
            "per_model": self.per_model,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate_pairs(pairs: list[ScorePair], ci: bool = False, n_resamples: int = 1000,
                   seed: int = 0) -> EvalReport:
    """Filewise and (when >= 2 model tags) modelwise reports plus a per-model table."""
    fx, fy = aggregate(pairs, "filewise")
    filewise = correlation_report(fx, fy, ci, n_resamples, seed)
    by_model: dict[str, list[ScorePair]] = {}
    for p in pairs:
        by_model.setdefault(p.model_tag, []).append(p)
    per_model = [
        {
            "model_tag": tag,
            "n_files": len(group),
            "mean_predicted": float(np.mean([p.predicted for p in group])),
            "mean_reference": float(np.mean([p.reference_mos for p in group])),
        }
        for tag, group in sorted(by_model.items())
    ]
    modelwise = None
    if len(by_model) >= 2:
        mx, my = aggregate(pairs, "modelwise")
        modelwise = correlation_report(mx, my, ci, n_resamples, seed)
    return EvalReport(filewise=filewise, modelwise=modelwise, per_model=per_model)


def _fmt_ci(interval) -> str:
    return f"[{interval[0]:.3f}, {interval[1]:.3f}]" if interval else ""


def render_report_text(report: EvalReport) -> str:
    """Plain-text table in the filewise/modelwise layout."""
    rows = [("level", "n", "PCC", "SRCC", "MAE", "PCC 95% CI", "SRCC 95% CI")]
    for level, rep in (("filewise", report.filewise), ("modelwise", report.modelwise)):
        if rep is None:
            rows.append((level, "-", "-", "-", "-", "(needs >= 2 models)", ""))
            continue
        rows.append((level, str(rep.n), f"{rep.pcc:.4f}", f"{rep.srcc:.4f}",
                     f"{rep.mae:.4f}", _fmt_ci(rep.pcc_ci), _fmt_ci(rep.srcc_ci)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.append("")
    lines.append(f"{'model':<24} {'files':>5} {'pred':>8} {'ref':>8}")
    for entry in report.per_model:
        lines.append(f"{entry['model_tag']:<24} {entry['n_files']:>5} "
                     f"{entry['mean_predicted']:>8.4f} {entry['mean_reference']:>8.4f}")
    return "\n".join(lines)
