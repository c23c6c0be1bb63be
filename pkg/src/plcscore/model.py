"""The MOS-prediction network: convolutional/recurrent audio encoder, rater-ID
embedding pathway, fully connected combiner head, and virtual-rater inference.

Architecture (defaults): the (T, 257) log-power spectrogram passes through
three 3x3 conv layers (channels 32/64/64, dilation 2 on the time axis, zero
same padding) with 2x frequency max-pooling after the first and second layer
(4x total); per-frame features are flattened and projected to 512 dims by a
width-1 1D convolution, then fed to a bidirectional GRU whose concatenated
final hidden states form the audio embedding. A rater ID maps to a fixed
64-dim normal vector which an MLP [128, 128, 128, 128, 64] transforms into
the ID embedding. Both embeddings are concatenated and combined by an MLP
[32, 32, 32, 32, 1]; a sigmoid scaled to [1, 5] produces the score. ReLU on
hidden layers, dropout 0.1 between the fully connected layers of the ID MLP
and head only.

Several details of the originally released 299265-parameter model are
unpublished (GRU hidden size, projection kernel width, pooling placement,
activation functions); the defaults here are documented choices and the
parameter count is reported per tensor rather than forced to match.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .features import N_BINS, Spectrogram

REFERENCE_RELEASE_PARAMS = 299_265
ARCHITECTURE_UNKNOWNS = (
    "GRU hidden size",
    "projection kernel width",
    "frequency-pooling placement",
    "activation functions",
    "dropout placement",
)

WEIGHT_MAGIC = b"PLCW1"


class WeightFormatError(ValueError):
    """Weight blob is malformed: bad magic, truncated data, or checksum mismatch."""


class WeightVersionError(WeightFormatError):
    """Weight blob was saved under a different model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    conv_channels: tuple[int, ...] = (32, 64, 64)
    conv_kernel: int = 3
    time_dilation: int = 2
    freq_pool_total: int = 4
    proj_dim: int = 512
    proj_kernel_w: int = 1
    gru_hidden: int = 128
    gru_bidirectional: bool = True
    id_dim: int = 64
    id_mlp_sizes: tuple[int, ...] = (128, 128, 128, 128, 64)
    head_sizes: tuple[int, ...] = (32, 32, 32, 32, 1)
    dropout: float = 0.1
    n_virtual_raters: int = 25
    score_lo: float = 1.0
    score_hi: float = 5.0
    # verification knobs: "identity"/"linear" turn the combiner into a purely
    # linear map so gradients can be checked against closed forms
    activation: str = "relu"
    output_squash: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "id_mlp_sizes", tuple(self.id_mlp_sizes))
        object.__setattr__(self, "head_sizes", tuple(self.head_sizes))
        if any(c < 1 for c in self.conv_channels):
            raise ValueError("conv channel counts must be positive")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd and positive")
        if self.time_dilation < 1:
            raise ValueError("time_dilation must be >= 1")
        if self.freq_pool_total < 1 or self.freq_pool_total & (self.freq_pool_total - 1):
            raise ValueError("freq_pool_total must be a power of two")
        if self.n_pool_layers > max(len(self.conv_channels), 0):
            raise ValueError("freq_pool_total needs more conv layers than configured")
        if self.head_sizes and self.head_sizes[-1] != 1:
            raise ValueError("final head layer must have size 1")
        if self.id_mlp_sizes and self.id_mlp_sizes[-1] != self.id_dim:
            raise ValueError("final ID-MLP layer size must equal id_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.score_hi <= self.score_lo:
            raise ValueError("score_hi must exceed score_lo")
        if self.activation not in ("relu", "identity"):
            raise ValueError("activation must be 'relu' or 'identity'")
        if self.output_squash not in ("sigmoid", "linear"):
            raise ValueError("output_squash must be 'sigmoid' or 'linear'")

    @property
    def n_pool_layers(self) -> int:
        return int(self.freq_pool_total).bit_length() - 1

    @property
    def pooled_bins(self) -> int:
        f = N_BINS
        for _ in range(self.n_pool_layers):
            f = (f + 1) // 2
        return f

    @property
    def flat_dim(self) -> int:
        """Per-frame feature size after the conv stack, before projection."""
        if not self.conv_channels:
            return N_BINS
        return self.conv_channels[-1] * self.pooled_bins

    @property
    def audio_emb_dim(self) -> int:
        return (2 if self.gru_bidirectional else 1) * self.gru_hidden

    def to_dict(self) -> dict:
        return asdict(self)


def config_from_dict(d: dict) -> ModelConfig:
    kwargs = dict(d)
    for key in ("conv_channels", "id_mlp_sizes", "head_sizes"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return ModelConfig(**kwargs)


def config_hash(config: ModelConfig) -> str:
    canon = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def tiny_config() -> ModelConfig:
    """Down-scaled configuration for gradient checks and overfit fixtures.

    Dropout is 0 so finite differences and memorization fixtures are free of
    mask noise; dropout gradients are exercised separately.
    """
    return ModelConfig(
        conv_channels=(2, 2, 2),
        proj_dim=16,
        gru_hidden=4,
        id_dim=8,
        id_mlp_sizes=(16, 8),
        head_sizes=(16, 1),
        dropout=0.0,
    )


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every trainable tensor; also the file order."""
    shapes: dict[str, tuple[int, ...]] = {}
    k = config.conv_kernel
    in_ch = 1
    for i, out_ch in enumerate(config.conv_channels):
        shapes[f"conv{i}.w"] = (out_ch, in_ch, k, k)
        shapes[f"conv{i}.b"] = (out_ch,)
        in_ch = out_ch
    if config.proj_dim > 0:
        shapes["proj.w"] = (config.proj_dim, config.flat_dim, config.proj_kernel_w)
        shapes["proj.b"] = (config.proj_dim,)
    if config.gru_hidden > 0:
        gru_in = config.proj_dim if config.proj_dim > 0 else config.flat_dim
        directions = ("fwd", "bwd") if config.gru_bidirectional else ("fwd",)
        for d in directions:
            shapes[f"gru_{d}.w_ih"] = (3 * config.gru_hidden, gru_in)
            shapes[f"gru_{d}.w_hh"] = (3 * config.gru_hidden, config.gru_hidden)
            shapes[f"gru_{d}.b_ih"] = (3 * config.gru_hidden,)
            shapes[f"gru_{d}.b_hh"] = (3 * config.gru_hidden,)
    prev = config.id_dim
    for i, size in enumerate(config.id_mlp_sizes):
        shapes[f"id_mlp{i}.w"] = (size, prev)
        shapes[f"id_mlp{i}.b"] = (size,)
        prev = size
    prev = config.audio_emb_dim + (config.id_mlp_sizes[-1] if config.id_mlp_sizes else 0)
    for i, size in enumerate(config.head_sizes):
        shapes[f"head{i}.w"] = (size, prev)
        shapes[f"head{i}.b"] = (size,)
        prev = size
    return shapes


def count_params(config: ModelConfig) -> tuple[int, dict[str, int]]:
    """Total trainable scalar count plus the per-tensor breakdown."""
    breakdown = {name: int(np.prod(shape)) for name, shape in tensor_shapes(config).items()}
    return sum(breakdown.values()), breakdown


def init_weights(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-uniform weight tensors, uniform +-1/sqrt(H) for GRU, zero biases."""
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith(".b") or name.endswith("b_ih") or name.endswith("b_hh"):
            weights[name] = np.zeros(shape, dtype=dtype)
        elif name.startswith("gru"):
            limit = 1.0 / np.sqrt(config.gru_hidden)
            weights[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / max(fan_in, 1))
            weights[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return weights


def id_to_vector(rater_id: str, dim: int = 64) -> np.ndarray:
    """Fixed standard-normal vector for an ID: a stable 64-bit hash of the
    string seeds the draw, so the same ID maps to the same vector forever."""
    if not rater_id:
        raise ValueError("rater id must be non-empty")
    digest = hashlib.blake2b(rater_id.encode("utf-8"), digest_size=8).digest()
    seed = int.from_bytes(digest, "little")
    return np.random.default_rng(seed).standard_normal(dim)


def _mlp_forward(x, weights, config, prefix, sizes, rng, train_mode):
    """Dense stack: hidden layers get activation + dropout, the last is affine."""
    caches = []
    h = x
    last = len(sizes) - 1
    for i in range(len(sizes)):
        h, lin_cache = nn.dense_forward(h, weights[f"{prefix}{i}.w"], weights[f"{prefix}{i}.b"])
        if i < last:
            h, act_cache = nn.act_forward(h, config.activation)
            h, drop_mask = nn.dropout_forward(h, config.dropout, rng, train_mode)
        else:
            act_cache, drop_mask = None, None
        caches.append((lin_cache, act_cache, drop_mask))
    return h, caches


def _mlp_backward(dy, caches, weights, grads, prefix):
    d = dy
    for i in range(len(caches) - 1, -1, -1):
        lin_cache, act_cache, drop_mask = caches[i]
        d = nn.dropout_backward(d, drop_mask)
        d = nn.act_backward(d, act_cache)
        d, dw, db = nn.dense_backward(d, lin_cache, weights[f"{prefix}{i}.w"])
        grads[f"{prefix}{i}.w"] = dw
        grads[f"{prefix}{i}.b"] = db
    return d


def encode_batch(frames: np.ndarray, weights: dict[str, np.ndarray], config: ModelConfig):
    """Audio encoder over a (B, T, F) batch; returns (emb, cache).

    The encoder carries no dropout, so it is deterministic in both modes.
    """
    if frames.ndim != 3:
        raise ValueError("frames must be (batch, time, freq)")
    if frames.shape[1] < 1:
        raise ValueError("need at least one spectrogram frame")
    if frames.shape[2] != N_BINS:
        raise ValueError(f"expected {N_BINS} frequency bins, got {frames.shape[2]}")
    dtype = weights["proj.w"].dtype
    x = np.ascontiguousarray(frames, dtype=dtype)[:, None, :, :]

    conv_caches = []
    for i in range(len(config.conv_channels)):
        x, c_cache = nn.conv2d_forward(x, weights[f"conv{i}.w"], weights[f"conv{i}.b"],
                                       config.time_dilation)
        x, a_cache = nn.act_forward(x, config.activation)
        p_cache = None
        if i < config.n_pool_layers:
            x, p_cache = nn.maxpool_freq2_forward(x)
        conv_caches.append((c_cache, a_cache, p_cache))

    B, C, T, Fp = x.shape
    seq = x.transpose(0, 2, 1, 3).reshape(B, T, C * Fp)
    seq, proj_cache = nn.conv1d_forward(seq, weights["proj.w"], weights["proj.b"])
    seq, proj_act_cache = nn.act_forward(seq, config.activation)

    h_fwd, gru_f_cache = nn.gru_forward(seq, weights["gru_fwd.w_ih"], weights["gru_fwd.w_hh"],
                                        weights["gru_fwd.b_ih"], weights["gru_fwd.b_hh"])
    if config.gru_bidirectional:
        h_bwd, gru_b_cache = nn.gru_forward(seq, weights["gru_bwd.w_ih"], weights["gru_bwd.w_hh"],
                                            weights["gru_bwd.b_ih"], weights["gru_bwd.b_hh"],
                                            reverse=True)
        emb = np.concatenate([h_fwd, h_bwd], axis=1)
    else:
        h_bwd, gru_b_cache = None, None
        emb = h_fwd
    cache = (conv_caches, (B, C, T, Fp), proj_cache, proj_act_cache, gru_f_cache, gru_b_cache)
    return emb, cache


def encode_backward(demb: np.ndarray, cache, weights, config: ModelConfig, grads):
    conv_caches, conv_out_shape, proj_cache, proj_act_cache, gru_f_cache, gru_b_cache = cache
    h = config.gru_hidden
    if config.gru_bidirectional:
        d_fwd, d_bwd = demb[:, :h], demb[:, h:]
        dseq, dw_ih, dw_hh, db_ih, db_hh = nn.gru_backward(
            np.ascontiguousarray(d_fwd), gru_f_cache, weights["gru_fwd.w_ih"], weights["gru_fwd.w_hh"])
        grads["gru_fwd.w_ih"], grads["gru_fwd.w_hh"] = dw_ih, dw_hh
        grads["gru_fwd.b_ih"], grads["gru_fwd.b_hh"] = db_ih, db_hh
        dseq_b, dw_ih, dw_hh, db_ih, db_hh = nn.gru_backward(
            np.ascontiguousarray(d_bwd), gru_b_cache, weights["gru_bwd.w_ih"], weights["gru_bwd.w_hh"])
        grads["gru_bwd.w_ih"], grads["gru_bwd.w_hh"] = dw_ih, dw_hh
        grads["gru_bwd.b_ih"], grads["gru_bwd.b_hh"] = db_ih, db_hh
        dseq = dseq + dseq_b
    else:
        dseq, dw_ih, dw_hh, db_ih, db_hh = nn.gru_backward(
            demb, gru_f_cache, weights["gru_fwd.w_ih"], weights["gru_fwd.w_hh"])
        grads["gru_fwd.w_ih"], grads["gru_fwd.w_hh"] = dw_ih, dw_hh
        grads["gru_fwd.b_ih"], grads["gru_fwd.b_hh"] = db_ih, db_hh

    dseq = nn.act_backward(dseq, proj_act_cache)
    dseq, dw, db = nn.conv1d_backward(dseq, proj_cache, weights["proj.w"])
    grads["proj.w"], grads["proj.b"] = dw, db

    B, C, T, Fp = conv_out_shape
    dx = dseq.reshape(B, T, C, Fp).transpose(0, 2, 1, 3)
    for i in range(len(config.conv_channels) - 1, -1, -1):
        c_cache, a_cache, p_cache = conv_caches[i]
        if p_cache is not None:
            dx = nn.maxpool_freq2_backward(dx, p_cache)
        dx = nn.act_backward(dx, a_cache)
        dx, dw, db = nn.conv2d_backward(dx, c_cache, weights[f"conv{i}.w"])
        grads[f"conv{i}.w"], grads[f"conv{i}.b"] = dw, db


def combine_batch(emb: np.ndarray, rater_vecs: np.ndarray, weights, config: ModelConfig,
                  train_mode: bool = False, rng: np.random.Generator | None = None):
    """ID MLP + concat + head + squash; returns (scores, cache).

    Dropout masks, when train_mode is set, are drawn from `rng` in a fixed
    order (ID-MLP layers first, then head layers).
    """
    dtype = emb.dtype
    rv = np.ascontiguousarray(rater_vecs, dtype=dtype)
    id_emb, id_caches = _mlp_forward(rv, weights, config, "id_mlp", config.id_mlp_sizes,
                                     rng, train_mode)
    z = np.concatenate([emb, id_emb], axis=1)
    u, head_caches = _mlp_forward(z, weights, config, "head", config.head_sizes,
                                  rng, train_mode)
    u = u[:, 0]
    span = config.score_hi - config.score_lo
    if config.output_squash == "sigmoid":
        s = nn.sigmoid(u)
        scores = config.score_lo + span * s
        squash_cache = s
    else:
        scores = config.score_lo + span * u
        squash_cache = None
    return scores, (id_caches, head_caches, emb.shape[1], squash_cache)


def combine_backward(dscores: np.ndarray, cache, weights, config: ModelConfig, grads):
    """Returns d(emb); fills grads for the ID MLP and head."""
    id_caches, head_caches, emb_dim, squash_cache = cache
    span = config.score_hi - config.score_lo
    if config.output_squash == "sigmoid":
        s = squash_cache
        du = dscores * span * s * (1.0 - s)
    else:
        du = dscores * span
    dz = _mlp_backward(du[:, None], head_caches, weights, grads, "head")
    demb, did_emb = dz[:, :emb_dim], dz[:, emb_dim:]
    _mlp_backward(did_emb, id_caches, weights, grads, "id_mlp")
    return np.ascontiguousarray(demb)


def forward_batch(frames: np.ndarray, rater_vecs: np.ndarray, weights, config: ModelConfig,
                  train_mode: bool = False, rng_seed: int = 0):
    """Full forward over a batch; returns (scores, cache)."""
    rng = np.random.default_rng(rng_seed) if train_mode and config.dropout > 0 else None
    emb, enc_cache = encode_batch(frames, weights, config)
    scores, comb_cache = combine_batch(emb, rater_vecs, weights, config, train_mode, rng)
    return scores, (enc_cache, comb_cache)


def backward_batch(dscores: np.ndarray, cache, weights, config: ModelConfig) -> dict[str, np.ndarray]:
    """Gradients for every trainable tensor given d(loss)/d(scores)."""
    enc_cache, comb_cache = cache
    grads: dict[str, np.ndarray] = {}
    demb = combine_backward(dscores, comb_cache, weights, config, grads)
    encode_backward(demb, enc_cache, weights, config, grads)
    return grads


def encode_audio(spec: Spectrogram, weights, config: ModelConfig,
                 train_mode: bool = False, rng_seed: int = 0) -> np.ndarray:
    """Audio embedding of one spectrogram, shape (2 * gru_hidden,)."""
    del train_mode, rng_seed  # no dropout inside the encoder; kept for symmetry
    emb, _ = encode_batch(spec.frames[None, :, :], weights, config)
    return emb[0]


def predict_vote(spec: Spectrogram, rater_vec: np.ndarray, weights, config: ModelConfig,
                 train_mode: bool = False, rng_seed: int = 0) -> float:
    """Score one (clip, rater-vector) pair; in (score_lo, score_hi)."""
    scores, _ = forward_batch(spec.frames[None, :, :], np.asarray(rater_vec)[None, :],
                              weights, config, train_mode, rng_seed)
    return float(scores[0])


@dataclass(frozen=True)
class MosResult:
    mos: float
    per_rater: np.ndarray
    rater_stddev: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "rater_stddev", float(np.std(self.per_rater)))


def infer_mos(spec: Spectrogram, weights, config: ModelConfig, inference_seed: int = 0) -> MosResult:
    """Average the score over `n_virtual_raters` standard-normal rater vectors.

    The virtual raters are drawn from inference_seed (not from any rater ID),
    so released scores are reproducible; the audio embedding is computed once
    and shared, which is exact because the encoder is deterministic.
    """
    rng = np.random.default_rng(inference_seed)
    raters = rng.standard_normal((config.n_virtual_raters, config.id_dim))
    emb, _ = encode_batch(spec.frames[None, :, :], weights, config)
    scores = np.empty(config.n_virtual_raters, dtype=np.float64)
    for i in range(config.n_virtual_raters):
        s, _ = combine_batch(emb, raters[i][None, :], weights, config, train_mode=False)
        scores[i] = float(s[0])
    return MosResult(mos=float(np.mean(scores)), per_rater=scores)


def save_weights(weights: dict[str, np.ndarray], config: ModelConfig) -> bytes:
    """Serialize weights: magic line, JSON header line, then little-endian
    float32 tensor payload in header order. Bit-exact round trip for float32."""
    shapes = tensor_shapes(config)
    missing = set(shapes) - set(weights)
    extra = set(weights) - set(shapes)
    if missing or extra:
        raise ValueError(f"weight set does not match config (missing={sorted(missing)}, "
                         f"extra={sorted(extra)})")
    chunks = []
    tensor_meta = []
    offset = 0
    for name, shape in shapes.items():
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        if arr.shape != shape:
            raise ValueError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        data = arr.tobytes()
        tensor_meta.append({"name": name, "shape": list(shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "tensors": tensor_meta,
        "payload_bytes": len(payload),
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    return WEIGHT_MAGIC + b"\n" + json.dumps(header).encode("utf-8") + b"\n" + payload


def load_weights(blob: bytes, expected_config: ModelConfig | None = None):
    """Inverse of save_weights; returns (config, weights).

    Raises WeightFormatError on corruption and WeightVersionError when
    expected_config does not hash-match the stored configuration.
    """
    if not blob.startswith(WEIGHT_MAGIC + b"\n"):
        raise WeightFormatError("bad magic; not a PLCW1 weight blob")
    rest = blob[len(WEIGHT_MAGIC) + 1 :]
    nl = rest.find(b"\n")
    if nl < 0:
        raise WeightFormatError("truncated blob: missing header")
    try:
        header = json.loads(rest[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"unreadable header: {exc}") from exc
    payload = rest[nl + 1 :]
    if len(payload) != header.get("payload_bytes", -1):
        raise WeightFormatError(
            f"truncated blob: payload {len(payload)} bytes, header says {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise WeightFormatError("payload checksum mismatch")
    config = config_from_dict(header["config"])
    if config_hash(config) != header.get("config_hash"):
        raise WeightFormatError("stored config does not match its hash")
    if expected_config is not None and config_hash(expected_config) != header["config_hash"]:
        raise WeightVersionError("weight blob was saved under a different model configuration")
    weights: dict[str, np.ndarray] = {}
    for meta in header["tensors"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise WeightFormatError(f"tensor {meta['name']} extends past payload")
        weights[meta["name"]] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    expected_shapes = tensor_shapes(config)
    if set(weights) != set(expected_shapes):
        raise WeightFormatError("tensor list does not match stored config")
    return config, weights


def save_weights_file(path, weights, config: ModelConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(save_weights(weights, config))


def load_weights_file(path, expected_config: ModelConfig | None = None):
    with open(path, "rb") as fh:
        return load_weights(fh.read(), expected_config)
