"""From-scratch training: per-vote MSE objective, reverse-mode gradients
through the whole network, AdamW with decoupled weight decay, and a
finite-difference gradient checker.

Votes are never aggregated to MOS for training; each example is one
(clip, rater-or-vote ID, rating) record and the ID input lets the network
fit systematically different raters on the same clip.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from . import nn
from .audio import AudioClip, read_wav
from .features import Spectrogram, logpow_spectrogram, microaugment
from .model import ModelConfig, id_to_vector, tiny_config

DATASET_HEADER = ["clip_path", "rating", "id", "model_tag", "split"]


class NonFiniteLossError(RuntimeError):
    """Training loss became NaN/inf; message carries epoch and step."""


@dataclass(frozen=True)
class VoteRecord:
    clip_path: str
    rating: float
    id: str
    model_tag: str = ""
    split: str = "train"

    def __post_init__(self):
        if not 1.0 <= self.rating <= 5.0:
            raise ValueError(f"rating must be in [1, 5], got {self.rating}")
        if not self.id:
            raise ValueError("vote id must be non-empty")
        if self.split not in ("train", "eval"):
            raise ValueError(f"split must be 'train' or 'eval', got {self.split!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    batch_size: int = 16
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    rng_seed: int = 0
    dtype: str = "float32"  # "float64" for verification runs
    augment: bool = True
    grad_clip: float | None = None  # max global grad norm; None disables
    lr_decay_per_epoch: float = 1.0  # multiplicative; 1.0 disables

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")


def load_dataset_csv(path) -> list[VoteRecord]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DATASET_HEADER:
            raise ValueError(f"dataset header must be {','.join(DATASET_HEADER)}, "
                             f"got {reader.fieldnames}")
        records = []
        for i, row in enumerate(reader, start=2):
            try:
                records.append(VoteRecord(
                    clip_path=row["clip_path"],
                    rating=float(row["rating"]),
                    id=row["id"],
                    model_tag=row["model_tag"],
                    split=row["split"],
                ))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: bad record on line {i}: {exc}") from exc
    return records


def save_dataset_csv(path, records: list[VoteRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DATASET_HEADER)
        for r in records:
            writer.writerow([r.clip_path, repr(r.rating), r.id, r.model_tag, r.split])


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError(f"prediction/target shapes differ or empty: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


Batch = list[tuple[Spectrogram, str, float]]


def _batch_arrays(batch: Batch, config: ModelConfig, dtype):
    if not batch:
        raise ValueError("batch must be non-empty")
    n_frames = {spec.n_frames for spec, _, _ in batch}
    if len(n_frames) != 1:
        raise ValueError(f"batch mixes spectrogram lengths {sorted(n_frames)}")
    frames = np.stack([spec.frames for spec, _, _ in batch]).astype(dtype)
    raters = np.stack([id_to_vector(rid, config.id_dim) for _, rid, _ in batch]).astype(dtype)
    targets = np.array([rating for _, _, rating in batch], dtype=dtype)
    return frames, raters, targets


def batch_loss(batch: Batch, weights, config: ModelConfig, rng_seed: int = 0,
               train_mode: bool = True) -> float:
    """Forward-only MSE of a batch; the finite-difference probe for backward."""
    dtype = next(iter(weights.values())).dtype
    frames, raters, targets = _batch_arrays(batch, config, dtype)
    scores, _ = model_mod.forward_batch(frames, raters, weights, config, train_mode, rng_seed)
    return mse_loss(scores, targets)


def backward(batch: Batch, weights, config: ModelConfig, rng_seed: int = 0,
             train_mode: bool = True):
    """Loss and exact gradients for every trainable tensor.

    Dropout masks are drawn from rng_seed inside the forward pass and reused
    by the backward pass, so analytic and finite-difference gradients agree.
    """
    dtype = next(iter(weights.values())).dtype
    frames, raters, targets = _batch_arrays(batch, config, dtype)
    scores, cache = model_mod.forward_batch(frames, raters, weights, config, train_mode, rng_seed)
    loss = mse_loss(scores, targets)
    if not math.isfinite(loss):
        bad = [rid for (_, rid, _), s in zip(batch, scores) if not math.isfinite(s)]
        raise NonFiniteLossError(f"non-finite loss {loss}; non-finite scores for ids {bad}")
    dscores = (2.0 / len(batch)) * (scores - targets).astype(dtype)
    grads = model_mod.backward_batch(dscores, cache, weights, config)
    return loss, grads


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def adamw_init(weights: dict[str, np.ndarray]) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(w) for k, w in weights.items()},
        v={k: np.zeros_like(w) for k, w in weights.items()},
    )


def adamw_update(weights, grads, state: AdamWState, t: int, config: TrainConfig,
                 lr: float | None = None):
    """One AdamW step (decoupled decay); returns (new_weights, state).

        m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
        w <- w - lr * mhat / (sqrt(vhat) + eps) - lr * decay * w
    """
    if set(weights) != set(grads):
        raise ValueError("gradient tensor set does not match weights")
    if t < 1:
        raise ValueError("step t must be >= 1")
    lr = config.lr if lr is None else lr
    b1, b2 = config.betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_weights = {}
    for k, w in weights.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {w.shape}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        new_weights[k] = w - lr * (m_hat / (np.sqrt(v_hat) + config.eps)) - lr * config.weight_decay * w
    return new_weights, state


@dataclass
class TrainResult:
    weights: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)


def _load_clip(record: VoteRecord) -> AudioClip:
    try:
        return read_wav(record.clip_path)
    except Exception as exc:
        raise type(exc)(f"record (clip={record.clip_path!r}, id={record.id!r}): {exc}") from exc


def _epoch_batches(specs_by_record, order, batch_size):
    """Group a shuffled epoch order into batches of equal frame count."""
    by_len: dict[int, list[int]] = {}
    for idx in order:
        by_len.setdefault(specs_by_record[idx].n_frames, []).append(idx)
    for t in sorted(by_len):
        bucket = by_len[t]
        for i in range(0, len(bucket), batch_size):
            yield bucket[i : i + batch_size]


def train(dataset: list[VoteRecord], config: ModelConfig, tcfg: TrainConfig,
          callbacks=None, eval_every: int = 0, eval_seed: int = 0,
          initial_weights: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Seed-deterministic training loop over per-vote targets.

    Shuffling, dropout masks, and microaugmentations all derive from
    tcfg.rng_seed, so two runs with identical inputs produce identical loss
    histories and final weights. When augmentation is on, features are
    re-extracted from freshly augmented audio each epoch; otherwise
    spectrograms are computed once.
    """
    train_records = [r for r in dataset if r.split == "train"]
    eval_records = [r for r in dataset if r.split == "eval"]
    if not train_records:
        raise ValueError("dataset has no records with split='train'")
    dtype = np.float32 if tcfg.dtype == "float32" else np.float64

    clips = [_load_clip(r) for r in train_records]
    cached_specs = None
    if not tcfg.augment:
        cached_specs = [logpow_spectrogram(c) for c in clips]

    weights = initial_weights if initial_weights is not None else model_mod.init_weights(
        config, seed=tcfg.rng_seed, dtype=dtype)
    weights = {k: np.asarray(w, dtype=dtype) for k, w in weights.items()}
    state = adamw_init(weights)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([tcfg.rng_seed, 0xD5]))

    history: list[dict] = []
    step = 0
    lr = tcfg.lr
    for epoch in range(tcfg.epochs):
        if tcfg.augment:
            specs = []
            for i, clip in enumerate(clips):
                aug_seed = np.random.SeedSequence([tcfg.rng_seed, epoch, i]).generate_state(1)[0]
                specs.append(logpow_spectrogram(microaugment(clip, int(aug_seed))))
        else:
            specs = cached_specs

        order = shuffle_rng.permutation(len(train_records))
        sq_sum = 0.0
        n_seen = 0
        for batch_idx in _epoch_batches(specs, order, tcfg.batch_size):
            batch = [(specs[i], train_records[i].id, train_records[i].rating) for i in batch_idx]
            drop_seed = int(np.random.SeedSequence([tcfg.rng_seed, 0xB0, epoch, step]).generate_state(1)[0])
            try:
                loss, grads = backward(batch, weights, config, rng_seed=drop_seed)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"epoch {epoch}, step {step}: {exc}") from exc
            if tcfg.grad_clip is not None:
                grads = nn.clip_gradients(grads, tcfg.grad_clip)
            step += 1
            weights, state = adamw_update(weights, grads, state, step, tcfg, lr=lr)
            sq_sum += loss * len(batch)
            n_seen += len(batch)

        row: dict = {"epoch": epoch, "train_mse": sq_sum / n_seen}
        if eval_every and eval_records and (epoch + 1) % eval_every == 0:
            row.update(_eval_metrics(eval_records, weights, config, eval_seed))
        history.append(row)
        if callbacks:
            for cb in callbacks:
                cb(epoch, row)
        lr *= tcfg.lr_decay_per_epoch
    return TrainResult(weights=weights, history=history)


def _eval_metrics(eval_records, weights, config, eval_seed: int) -> dict:
    from .metrics import mae as mae_fn
    from .metrics import pearson, spearman

    by_clip: dict[str, list[float]] = {}
    for r in eval_records:
        by_clip.setdefault(r.clip_path, []).append(r.rating)
    preds, refs = [], []
    for i, (path, ratings) in enumerate(sorted(by_clip.items())):
        spec = logpow_spectrogram(read_wav(path))
        seed = int(np.random.SeedSequence([eval_seed, i]).generate_state(1)[0])
        preds.append(model_mod.infer_mos(spec, weights, config, inference_seed=seed).mos)
        refs.append(float(np.mean(ratings)))
    if len(preds) < 2:
        return {}
    x, y = np.array(preds), np.array(refs)
    return {
        "eval_pcc": pearson(x, y),
        "eval_srcc": spearman(x, y),
        "eval_mae": mae_fn(x, y),
    }


def write_history_csv(path, history: list[dict]) -> None:
    has_eval = any("eval_pcc" in row for row in history)
    cols = ["epoch", "train_mse"] + (["eval_pcc", "eval_srcc", "eval_mae"] if has_eval else [])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in history:
            writer.writerow([row.get(c, "") for c in cols])


@dataclass
class GradcheckReport:
    tolerance: float
    max_rel_err: dict[str, float]
    passed: bool
    worst_tensor: str

    def lines(self) -> list[str]:
        out = [f"{'tensor':<16} {'max rel err':>12}  status"]
        for name, err in self.max_rel_err.items():
            status = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{name:<16} {err:>12.3e}  {status}")
        verdict = "PASS" if self.passed else f"FAIL (worst: {self.worst_tensor})"
        out.append(f"gradcheck {verdict} at tolerance {self.tolerance:g}")
        return out


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(config: ModelConfig | None = None, tolerance: float = 1e-3, h: float = 1e-5,
              seed: int = 0, batch_size: int = 2, n_frames: int = 8,
              _corrupt_tensor: str | None = None) -> GradcheckReport:
    """Compare analytic gradients against central finite differences in 64-bit.

    Every element of every trainable tensor is probed; the report carries the
    max relative error per tensor. `_corrupt_tensor` deliberately perturbs one
    analytic gradient (negative-control hook for the test suite).
    """
    config = config or tiny_config()
    rng = np.random.default_rng(seed)
    from .features import N_BINS

    batch: Batch = []
    for i in range(batch_size):
        frames = rng.standard_normal((n_frames, N_BINS))
        batch.append((Spectrogram(frames), f"gradcheck_{i}", float(rng.uniform(1.5, 4.5))))

    weights = model_mod.init_weights(config, seed=seed, dtype=np.float64)
    drop_seed = seed + 17
    _, analytic = backward(batch, weights, config, rng_seed=drop_seed)
    if _corrupt_tensor is not None:
        analytic = dict(analytic)
        analytic[_corrupt_tensor] = analytic[_corrupt_tensor] + 1e-2

    max_rel: dict[str, float] = {}
    for name, w in weights.items():
        numeric = np.zeros_like(w)
        flat_w = w.reshape(-1)
        flat_n = numeric.reshape(-1)
        for j in range(flat_w.size):
            orig = flat_w[j]
            flat_w[j] = orig + h
            lp = batch_loss(batch, weights, config, rng_seed=drop_seed)
            flat_w[j] = orig - h
            lm = batch_loss(batch, weights, config, rng_seed=drop_seed)
            flat_w[j] = orig
            flat_n[j] = (lp - lm) / (2.0 * h)
        max_rel[name] = _rel_err(analytic[name], numeric)

    worst = max(max_rel, key=max_rel.get)
    passed = all(err < tolerance for err in max_rel.values())
    return GradcheckReport(tolerance=tolerance, max_rel_err=max_rel, passed=passed,
                           worst_tensor=worst if not passed else "")


def overfit_fixture_config() -> tuple[ModelConfig, TrainConfig]:
    """Tiny config plus a fast-memorization training config for verification."""
    mcfg = tiny_config()
    tcfg = TrainConfig(epochs=500, batch_size=16, lr=5e-3, weight_decay=0.0,
                       rng_seed=0, augment=False)
    return mcfg, tcfg


__all__ = [
    "VoteRecord", "TrainConfig", "TrainResult", "AdamWState", "GradcheckReport",
    "NonFiniteLossError", "load_dataset_csv", "save_dataset_csv", "mse_loss",
    "batch_loss", "backward", "adamw_init", "adamw_update", "train",
    "write_history_csv", "gradcheck", "overfit_fixture_config",
]
