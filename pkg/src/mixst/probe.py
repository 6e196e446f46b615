"""Frozen-encoder class probing: pool encoder states over time, train only a
linear classifier, report class accuracy per split."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from . import training
from .errors import ConfigurationError, ContractError, ValidationError
from .tensor import Tensor

POOLINGS = ("mean", "max")


@dataclass
class ProbeHParams:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 64
    pooling: str = "mean"
    seed: int = 0

    def validate(self) -> "ProbeHParams":
        if self.pooling not in POOLINGS:
            raise ConfigurationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be >= 1")
        return self


@dataclass
class ProbeResult:
    model_variant: str
    train_acc: float
    val_acc: float
    test_acc: float
    n_classes: int
    steps: int

    def csv_row(self) -> str:
        return (
            f"{self.model_variant},{self.train_acc:.4f},{self.val_acc:.4f},"
            f"{self.test_acc:.4f},{self.n_classes},{self.steps}"
        )


def encoder_checksum(model: M.Model) -> str:
    """Digest over every encoder-side parameter byte (freezing witness)."""
    digest = hashlib.sha256()
    for name, p in sorted(model.named_parameters().items()):
        if name.startswith(("subsampler", "encoder")):
            digest.update(name.encode())
            digest.update(p.data.tobytes())
    return digest.hexdigest()


def pooled_states(model: M.Model, utterances, pooling: str = "mean") -> np.ndarray:
    """Per-utterance pooled encoder states (no gradients, padded rows excluded)."""
    out = np.empty((len(utterances), model.config.d_model), dtype=np.float64)
    with T.no_grad():
        for i, utt in enumerate(utterances):
            states, s_pad = M.encode(model, np.asarray(utt.features))
            rows = states.data[~np.asarray(s_pad)]
            out[i] = rows.mean(axis=0) if pooling == "mean" else rows.max(axis=0)
    return out


def _labels(utterances) -> np.ndarray:
    labels = np.array([getattr(u, "class_id", None) for u in utterances])
    if any(l is None for l in labels):
        raise ValidationError("corpus has utterances without class labels")
    return labels.astype(np.int64)


def run_probe(checkpoint, corpus: dict, hparams: ProbeHParams | None = None) -> ProbeResult:
    """Freeze the encoder of a trained model, fit a linear classifier on
    pooled states, report train/val/test accuracy.

    `checkpoint` is a checkpoint directory path or an already-loaded Model;
    `corpus` maps split name to Utterance lists carrying class_ids.
    """
    hp = (hparams or ProbeHParams()).validate()
    model = checkpoint if isinstance(checkpoint, M.Model) else M.load_checkpoint(checkpoint)
    for split in ("train", "dev", "test"):
        if split not in corpus or not corpus[split]:
            raise ValidationError(f"probe corpus is missing a non-empty {split!r} split")
    labels = {s: _labels(corpus[s]) for s in ("train", "dev", "test")}
    n_classes = int(max(l.max() for l in labels.values())) + 1
    if len(np.unique(labels["train"])) < 2:
        raise ValidationError("probing needs at least 2 classes in the training split")

    before = encoder_checksum(model)
    feats = {s: pooled_states(model, corpus[s], hp.pooling) for s in ("train", "dev", "test")}
    after = encoder_checksum(model)
    if before != after:
        raise ContractError("encoder parameters changed while pooling states")

    rng = np.random.default_rng(hp.seed)
    d = model.config.d_model
    w = Tensor(np.zeros((d, n_classes), dtype=T.default_dtype()), requires_grad=True)
    b = Tensor(np.zeros(n_classes, dtype=T.default_dtype()), requires_grad=True)
    params = {"probe.w": w, "probe.b": b}
    state = training.AdamState.create(params, lr=hp.lr, warmup_steps=1)
    x_train = feats["train"]
    y_train = labels["train"]
    n = x_train.shape[0]
    for step in range(hp.steps):
        idx = rng.integers(0, n, size=min(hp.batch_size, n))
        logits = T.add(T.matmul(Tensor(x_train[idx]), w), b)
        # reuse the sequence loss with a length-1 "sequence" per example
        logits3 = T.reshape(logits, (len(idx), 1, n_classes))
        loss = training.cross_entropy(logits3, y_train[idx][:, None], np.zeros((len(idx), 1), dtype=bool))
        T.zero_grads(params.values())
        T.backward(loss)
        training.adam_step(params, None, state)

    def accuracy(split: str) -> float:
        scores = feats[split] @ w.data.astype(np.float64) + b.data.astype(np.float64)
        return float((scores.argmax(axis=1) == labels[split]).mean())

    if encoder_checksum(model) != before:
        raise ContractError("encoder parameters changed during probe training")
    return ProbeResult(
        model_variant=model.config.variant,
        train_acc=accuracy("train"),
        val_acc=accuracy("dev"),
        test_acc=accuracy("test"),
        n_classes=n_classes,
        steps=hp.steps,
    )
