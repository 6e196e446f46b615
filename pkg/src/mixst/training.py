"""Teacher-forced training: smoothed cross-entropy, Adam with inverse-sqrt
warmup, optional time/frequency masking augmentation, length-bucketed
batching, and the training loop with periodic validation."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ConfigurationError, DivergenceError, ValidationError
from .tensor import Tensor
from .vocab import BOS_ID, EOS_ID, PAD_ID


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """One padded teacher-forcing batch.

    tgt_in is BOS-prefixed, tgt_out EOS-suffixed; both (B, T_max) with PAD_ID
    at padded positions, and pad flags consistent with the true lengths.
    """

    features: np.ndarray  # (B, L_max, F)
    feature_pad: np.ndarray  # (B, L_max) bool
    tgt_in: np.ndarray  # (B, T_max) int
    tgt_out: np.ndarray  # (B, T_max) int
    tgt_pad: np.ndarray  # (B, T_max) bool
    utt_ids: list = field(default_factory=list)


def make_batch(samples) -> Batch:
    """Pad a list of (features, target_tokens[, utt_id]) samples into one Batch."""
    feats = [np.asarray(s.features) for s in samples]
    tgts = [list(s.target_tokens) for s in samples]
    for t in tgts:
        if any(tok in (PAD_ID, BOS_ID) for tok in t):
            raise ValidationError("target tokens must not contain pad/bos ids")
    b = len(samples)
    l_max = max(f.shape[0] for f in feats)
    t_max = max(len(t) for t in tgts) + 1  # +1 for BOS/EOS shift
    fdim = feats[0].shape[1]
    features = np.zeros((b, l_max, fdim), dtype=feats[0].dtype)
    feature_pad = np.ones((b, l_max), dtype=bool)
    tgt_in = np.full((b, t_max), PAD_ID, dtype=np.int64)
    tgt_out = np.full((b, t_max), PAD_ID, dtype=np.int64)
    for i, (f, t) in enumerate(zip(feats, tgts)):
        features[i, : f.shape[0]] = f
        feature_pad[i, : f.shape[0]] = False
        tgt_in[i, 0] = BOS_ID
        tgt_in[i, 1 : 1 + len(t)] = t
        tgt_out[i, : len(t)] = t
        tgt_out[i, len(t)] = EOS_ID
    tgt_pad = tgt_in == PAD_ID
    ids = [getattr(s, "utt_id", str(i)) for i, s in enumerate(samples)]
    return Batch(features, feature_pad, tgt_in, tgt_out, tgt_pad, ids)


def make_batches(samples, batch_size: int, rng: np.random.Generator | None = None) -> list[Batch]:
    """Sort by feature length to limit padding, bucket, shuffle bucket order."""
    if not samples:
        raise ValidationError("cannot batch an empty sample list")
    order = sorted(range(len(samples)), key=lambda i: (np.asarray(samples[i].features).shape[0], i))
    buckets = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        buckets = [buckets[i] for i in rng.permutation(len(buckets))]
    return [make_batch([samples[i] for i in bucket]) for bucket in buckets]


# ---------------------------------------------------------------------------
# loss and metrics
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, tgt_out, tgt_pad, label_smoothing: float = 0.0) -> Tensor:
    """Mean smoothed NLL over non-padded positions.

    The smoothed target distribution is (1-s) * onehot + s/V, so uniform
    logits give exactly ln V per position for any s.
    """
    if not 0.0 <= label_smoothing <= 0.3:
        raise ConfigurationError(f"label_smoothing must be in [0, 0.3], got {label_smoothing}")
    ids = np.asarray(tgt_out)
    pad = np.asarray(tgt_pad, dtype=bool)
    if ids.ndim == 1:
        ids, pad = ids[None, :], pad[None, :]
        logits = T.reshape(logits, (1,) + logits.shape)
    v = logits.shape[-1]
    if ids.min() < 0 or ids.max() >= v:
        raise ValidationError(f"target id out of range [0, {v}): [{ids.min()}, {ids.max()}]")
    n_valid = int((~pad).sum())
    if n_valid == 0:
        raise ValidationError("all target positions are padded")
    q = np.full(logits.shape, label_smoothing / v, dtype=logits.data.dtype)
    rows = np.arange(ids.shape[0])[:, None]
    cols = np.arange(ids.shape[1])[None, :]
    q[rows, cols, ids] += 1.0 - label_smoothing
    q[pad] = 0.0
    logp = T.log_softmax_lastdim(logits)
    return T.mul(T.tsum(T.mul(logp, q)), -1.0 / n_valid)


def token_accuracy(logits, tgt_out, tgt_pad) -> float:
    """Teacher-forced argmax accuracy over non-padded positions."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    ids = np.asarray(tgt_out)
    pad = np.asarray(tgt_pad, dtype=bool)
    pred = data.argmax(axis=-1)
    hits = (pred == ids) & ~pad
    total = int((~pad).sum())
    return float(hits.sum()) / total if total else 0.0


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments plus the inverse-sqrt warmup schedule."""

    step: int
    m: dict
    v: dict
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 400

    @classmethod
    def create(cls, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, warmup_steps: int = 400) -> "AdamState":
        if warmup_steps < 1:
            raise ConfigurationError("warmup_steps must be >= 1")
        m = {name: np.zeros_like(p.data) for name, p in params.items()}
        v = {name: np.zeros_like(p.data) for name, p in params.items()}
        return cls(step=0, m=m, v=v, lr=lr, beta1=beta1, beta2=beta2, eps=eps, warmup_steps=warmup_steps)

    def learning_rate(self, step: int) -> float:
        return self.lr * min(step / self.warmup_steps, math.sqrt(self.warmup_steps / step))


def adam_step(params, grads=None, state: AdamState | None = None) -> AdamState:
    """One bias-corrected Adam update with warmup; mutates params in place.

    `params` maps name -> Tensor; `grads` maps name -> ndarray and defaults
    to each tensor's accumulated `.grad` (missing gradients count as zero).
    """
    if state is None:
        raise ConfigurationError("adam_step requires an AdamState")
    state.step += 1
    t = state.step
    lr_t = state.learning_rate(t)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def spec_augment(
    features: np.ndarray,
    time_masks: int,
    freq_masks: int,
    max_t: int,
    max_f: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Zero random time stripes (width <= max_t) and frequency stripes
    (width <= max_f); returns a copy, identity when both counts are 0."""
    feats = np.array(features, copy=True)
    length, fdim = feats.shape
    if max_t > length or max_f > fdim:
        raise ValidationError(f"mask extents ({max_t}, {max_f}) exceed dims ({length}, {fdim})")
    for _ in range(time_masks):
        w = int(rng.integers(0, max_t + 1))
        start = int(rng.integers(0, length - w + 1))
        feats[start : start + w, :] = 0.0
    for _ in range(freq_masks):
        w = int(rng.integers(0, max_f + 1))
        start = int(rng.integers(0, fdim - w + 1))
        feats[:, start : start + w] = 0.0
    return feats


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 400
    label_smoothing: float = 0.1
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_interval: int = 250
    log_interval: int = 50
    sa_time_masks: int = 0
    sa_freq_masks: int = 0
    sa_max_t: int = 10
    sa_max_f: int = 4
    run_dir: str | None = None


@dataclass
class TrainResult:
    log_rows: list  # (step, split, loss, token_acc)
    best_val_acc: float
    best_checkpoint: str | None
    last_checkpoint: str | None
    steps_done: int


LOG_HEADER = ("step", "split", "loss", "token_acc")


def write_log(rows, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for row in rows:
            w.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.6f}"])


def _augment(batch: Batch, hp: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    if hp.sa_time_masks == 0 and hp.sa_freq_masks == 0:
        return batch.features
    feats = batch.features.copy()
    for b in range(feats.shape[0]):
        true_len = int((~batch.feature_pad[b]).sum())
        feats[b, :true_len] = spec_augment(
            feats[b, :true_len],
            hp.sa_time_masks,
            hp.sa_freq_masks,
            min(hp.sa_max_t, true_len),
            hp.sa_max_f,
            rng,
        )
    return feats


def evaluate(model: M.Model, samples, batch_size: int, label_smoothing: float) -> tuple[float, float]:
    """Dev loss and teacher-forced token accuracy under no_grad."""
    losses, accs, weights = [], [], []
    with T.no_grad():
        for batch in make_batches(samples, batch_size):
            logits = M.forward_logits(model, batch.features, batch.feature_pad, batch.tgt_in)
            loss = cross_entropy(logits, batch.tgt_out, batch.tgt_pad, label_smoothing)
            n = int((~batch.tgt_pad).sum())
            losses.append(float(loss.data) * n)
            accs.append(token_accuracy(logits, batch.tgt_out, batch.tgt_pad) * n)
            weights.append(n)
    total = sum(weights)
    return sum(losses) / total, sum(accs) / total


def train(model: M.Model, data, hp: TrainConfig, rng: np.random.Generator, start_step: int = 0) -> TrainResult:
    """Run the teacher-forced loop; keeps the best-validation checkpoint.

    `data` is a mapping with "train" and "dev" sample lists. Raises
    DivergenceError on a non-finite loss/gradient, leaving the last good
    checkpoint on disk.
    """
    train_samples = data["train"]
    dev_samples = data["dev"]
    if not train_samples:
        raise ValidationError("training split is empty")
    named = model.named_parameters()
    state = AdamState.create(
        named, lr=hp.peak_lr, beta1=hp.beta1, beta2=hp.beta2, eps=hp.adam_eps, warmup_steps=hp.warmup_steps
    )
    state.step = start_step
    drop_rate = model.config.dropout
    rows: list = []
    best_acc = -1.0
    best_path = last_path = None
    if hp.run_dir:
        os.makedirs(hp.run_dir, exist_ok=True)
        best_path = os.path.join(hp.run_dir, "best")
        last_path = os.path.join(hp.run_dir, "last")

    def validate(step: int) -> None:
        nonlocal best_acc
        if not dev_samples:
            return
        loss, acc = evaluate(model, dev_samples, hp.batch_size, hp.label_smoothing)
        rows.append((step, "dev", loss, acc))
        if last_path:
            M.save_checkpoint(model, last_path)
        if acc > best_acc:
            best_acc = acc
            if best_path:
                M.save_checkpoint(model, best_path)

    step = start_step
    target = start_step + hp.steps
    try:
        while step < target:
            for batch in make_batches(train_samples, hp.batch_size, rng):
                if step >= target:
                    break
                step += 1
                feats = _augment(batch, hp, rng)
                drop = (lambda t: T.dropout(t, drop_rate, rng)) if drop_rate > 0 else None
                logits = M.forward_logits(model, feats, batch.feature_pad, batch.tgt_in, drop)
                loss = cross_entropy(logits, batch.tgt_out, batch.tgt_pad, hp.label_smoothing)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise DivergenceError(
                        f"loss became non-finite at step {step}; last good checkpoint: {last_path}"
                    )
                model.zero_grads()
                T.backward(loss)
                clip_gradients(named, hp.clip_norm)
                adam_step(named, None, state)
                if step % hp.log_interval == 0 or step == target:
                    rows.append((step, "train", loss_val, token_accuracy(logits, batch.tgt_out, batch.tgt_pad)))
                if step % hp.val_interval == 0 or step == target:
                    validate(step)
    finally:
        if hp.run_dir:
            write_log(rows, os.path.join(hp.run_dir, "train_log.csv"))
            with open(os.path.join(hp.run_dir, "train_state.txt"), "w", encoding="utf-8") as fh:
                fh.write(f"step = {step}\n")
    return TrainResult(rows, best_acc, best_path, last_path, step)
