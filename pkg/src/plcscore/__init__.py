"""plcscore: desk-scale toolkit for packet-loss-concealment quality work.

Packet-loss trace ingestion, synthesis, and stratified sampling; trace-driven
audio degradation with zero-fill / oracle fills; log-power spectrogram
features; a trainable non-intrusive MOS network with virtual-rater inference;
and a correlation-based evaluation battery with an intrusive MCD baseline.
"""

__version__ = "0.1.0"

from .audio import AudioClip, AudioFormatError, read_wav, write_wav
from .degrade import DegradedClip, apply_trace, cut_segment
from .features import Spectrogram, logpow_spectrogram, microaugment
from .metrics import (
    CorrelationReport,
    EvalReport,
    ScorePair,
    aggregate,
    bootstrap_ci,
    evaluate_pairs,
    mae,
    mcd,
    pearson,
    spearman,
)
from .model import (
    ModelConfig,
    MosResult,
    count_params,
    encode_audio,
    id_to_vector,
    infer_mos,
    init_weights,
    load_weights,
    predict_vote,
    save_weights,
    tiny_config,
)
from .traces import (
    BurstStats,
    GilbertParams,
    PacketTrace,
    SampleResult,
    SamplingSpec,
    TraceSegment,
    burst_stats,
    parse_trace,
    segment_trace,
    stratified_sample,
    synth_gilbert,
)
from .training import (
    TrainConfig,
    VoteRecord,
    adamw_init,
    adamw_update,
    backward,
    gradcheck,
    mse_loss,
    train,
)

__all__ = [
    "__version__",
    "AudioClip", "AudioFormatError", "read_wav", "write_wav",
    "DegradedClip", "apply_trace", "cut_segment",
    "Spectrogram", "logpow_spectrogram", "microaugment",
    "CorrelationReport", "EvalReport", "ScorePair", "aggregate", "bootstrap_ci",
    "evaluate_pairs", "mae", "mcd", "pearson", "spearman",
    "ModelConfig", "MosResult", "count_params", "encode_audio", "id_to_vector",
    "infer_mos", "init_weights", "load_weights", "predict_vote", "save_weights",
    "tiny_config",
    "BurstStats", "GilbertParams", "PacketTrace", "SampleResult", "SamplingSpec",
    "TraceSegment", "burst_stats", "parse_trace", "segment_trace",
    "stratified_sample", "synth_gilbert",
    "TrainConfig", "VoteRecord", "adamw_init", "adamw_update", "backward",
    "gradcheck", "mse_loss", "train",
]
