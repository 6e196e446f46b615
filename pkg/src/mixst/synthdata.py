"""Synthetic speech-like corpora in three task modes.

Each content token has a fixed random unit prototype vector; an utterance
emits per-token frame blocks (prototype + per-class additive bias + noise).
Targets are a deterministic function of the source: identity for asr_like,
a bijective remap plus pairwise reorder for mt_like, and the same remapped
target over frame-expanded input for st_like.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorpusFormatError, ValidationError
from .vocab import FIRST_CONTENT_ID

TASK_MODES = ("asr_like", "mt_like", "st_like")

FEATURE_MAGIC = b"ADST"
FEATURE_FORMAT_VERSION = 1
FEATURES_NAME = "features.bin"
MANIFEST_NAME = "manifest.txt"
SPLIT_NAMES = ("train", "dev", "test")


@dataclass
class SyntheticSpec:
    vocab_size: int = 32
    seq_len_min: int = 4
    seq_len_max: int = 10
    frames_min: int = 3
    frames_max: int = 6
    feature_dim: int = 16
    noise_std: float = 0.05
    task_mode: str = "st_like"
    n_classes: int = 4
    class_bias_scale: float = 1.0
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.task_mode not in TASK_MODES:
            raise ValidationError(f"task_mode must be one of {TASK_MODES}, got {self.task_mode!r}")
        if self.vocab_size < FIRST_CONTENT_ID + 1:
            raise ValidationError(f"vocab_size must leave room for content tokens (>= {FIRST_CONTENT_ID + 1})")
        if not 1 <= self.seq_len_min <= self.seq_len_max:
            raise ValidationError("need 1 <= seq_len_min <= seq_len_max")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ValidationError("need 1 <= frames_min <= frames_max")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if self.feature_dim < 4:
            raise ValidationError("feature_dim must be >= 4 (subsampler minimum)")
        if self.n_classes < 1:
            raise ValidationError("n_classes must be >= 1")
        min_frames = self.seq_len_min * (self.frames_min if self.task_mode != "mt_like" else 1)
        if min_frames < 4:
            raise ValidationError(
                f"shortest utterance would have {min_frames} frames; the subsampler needs >= 4"
            )
        for name in ("n_train", "n_dev", "n_test"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        return self


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # (L, F) float32
    source_tokens: list
    target_tokens: list
    class_id: int


def content_ids(vocab_size: int) -> np.ndarray:
    return np.arange(FIRST_CONTENT_ID, vocab_size)


def token_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """(vocab, F) fixed random unit vectors for content ids (reserved ids zero)."""
    rng = np.random.default_rng([spec.seed, 101])
    table = np.zeros((spec.vocab_size, spec.feature_dim), dtype=np.float32)
    for tok in content_ids(spec.vocab_size):
        v = rng.normal(size=spec.feature_dim)
        table[tok] = (v / np.linalg.norm(v)).astype(np.float32)
    return table


def class_biases(spec: SyntheticSpec) -> np.ndarray:
    """(n_classes, F) additive per-class feature offsets."""
    rng = np.random.default_rng([spec.seed, 202])
    return (spec.class_bias_scale * rng.normal(size=(spec.n_classes, spec.feature_dim))).astype(np.float32)


def build_remap(spec: SyntheticSpec) -> dict:
    """Seeded bijection over content token ids."""
    ids = content_ids(spec.vocab_size)
    rng = np.random.default_rng([spec.seed, 303])
    return dict(zip(ids.tolist(), rng.permutation(ids).tolist()))


def apply_reorder(tokens: list) -> list:
    """Swap adjacent pairs (i, i+1), i even, whenever the token at the even
    position has an odd id: deterministic, position-dependent reordering."""
    out = list(tokens)
    for i in range(0, len(out) - 1, 2):
        if out[i] % 2 == 1:
            out[i], out[i + 1] = out[i + 1], out[i]
    return out


def derive_target(source_tokens: list, task_mode: str, remap: dict | None) -> list:
    if task_mode == "asr_like":
        return list(source_tokens)
    mapped = [remap[t] for t in source_tokens]
    return apply_reorder(mapped)


def generate(spec: SyntheticSpec) -> dict:
    """Build {"train": [...], "dev": [...], "test": [...]} utterance lists.

    Splits draw from disjoint seeded streams; targets are a pure function of
    the source per task mode.
    """
    spec.validate()
    protos = token_prototypes(spec)
    biases = class_biases(spec)
    remap = build_remap(spec) if spec.task_mode != "asr_like" else None
    splits: dict = {}
    for split_idx, (split, count) in enumerate(
        zip(SPLIT_NAMES, (spec.n_train, spec.n_dev, spec.n_test))
    ):
        rng = np.random.default_rng([spec.seed, 1000 + split_idx])
        utts = []
        for i in range(count):
            n = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
            tokens = rng.integers(FIRST_CONTENT_ID, spec.vocab_size, size=n).tolist()
            class_id = int(rng.integers(spec.n_classes))
            if spec.task_mode == "mt_like":
                frame_counts = np.ones(n, dtype=int)
            else:
                frame_counts = rng.integers(spec.frames_min, spec.frames_max + 1, size=n)
            length = int(frame_counts.sum())
            feats = np.empty((length, spec.feature_dim), dtype=np.float32)
            row = 0
            for tok, reps in zip(tokens, frame_counts):
                block = protos[tok] + biases[class_id]
                if spec.noise_std > 0:
                    block = block + rng.normal(0.0, spec.noise_std, size=(int(reps), spec.feature_dim))
                    feats[row : row + reps] = block.astype(np.float32)
                else:
                    feats[row : row + reps] = np.tile(block, (int(reps), 1))
                row += int(reps)
            utts.append(
                Utterance(
                    utt_id=f"{split}-{i:06d}",
                    features=feats,
                    source_tokens=tokens,
                    target_tokens=derive_target(tokens, spec.task_mode, remap),
                    class_id=class_id,
                )
            )
        splits[split] = utts
    return splits


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def write_corpus(corpus: list, directory: str) -> None:
    """Write features.bin (binary records) + manifest.txt (text index)."""
    os.makedirs(directory, exist_ok=True)
    manifest_lines = []
    with open(os.path.join(directory, FEATURES_NAME), "wb") as fh:
        for utt in corpus:
            offset = fh.tell()
            utt_id_bytes = utt.utt_id.encode("utf-8")
            feats = np.ascontiguousarray(utt.features, dtype="<f4")
            length, fdim = feats.shape
            fh.write(FEATURE_MAGIC)
            fh.write(struct.pack("<II", FEATURE_FORMAT_VERSION, len(utt_id_bytes)))
            fh.write(utt_id_bytes)
            fh.write(struct.pack("<II", length, fdim))
            fh.write(feats.tobytes(order="C"))
            manifest_lines.append(
                ",".join(
                    [
                        utt.utt_id,
                        str(offset),
                        " ".join(str(t) for t in utt.source_tokens),
                        " ".join(str(t) for t in utt.target_tokens),
                        str(utt.class_id),
                    ]
                )
            )
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(manifest_lines))
        if manifest_lines:
            fh.write("\n")


def read_corpus(directory: str) -> list:
    """Inverse of write_corpus; malformed records raise CorpusFormatError
    carrying the byte offset."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    blob_path = os.path.join(directory, FEATURES_NAME)
    if not os.path.exists(manifest_path):
        raise CorpusFormatError(f"missing {MANIFEST_NAME} in {directory}")
    if not os.path.exists(blob_path):
        raise CorpusFormatError(f"missing {FEATURES_NAME} in {directory}")
    blob = open(blob_path, "rb").read()
    corpus = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise CorpusFormatError(f"manifest line {lineno} has {len(parts)} fields, expected 5")
            utt_id, offset_s, src_s, tgt_s, class_s = parts
            try:
                offset = int(offset_s)
                source = [int(t) for t in src_s.split()] if src_s else []
                target = [int(t) for t in tgt_s.split()] if tgt_s else []
                class_id = int(class_s)
            except ValueError as exc:
                raise CorpusFormatError(f"manifest line {lineno} is malformed: {exc}") from exc
            corpus.append(_read_record(blob, offset, utt_id, source, target, class_id))
    return corpus


def _read_record(blob: bytes, offset: int, utt_id: str, source, target, class_id) -> Utterance:
    pos = offset
    if blob[pos : pos + 4] != FEATURE_MAGIC:
        raise CorpusFormatError("bad record magic", offset=pos)
    pos += 4
    if pos + 8 > len(blob):
        raise CorpusFormatError("truncated record header", offset=pos)
    version, id_len = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != FEATURE_FORMAT_VERSION:
        raise CorpusFormatError(f"unsupported feature record version {version}", offset=offset)
    if pos + id_len + 8 > len(blob):
        raise CorpusFormatError("truncated utt_id or dims", offset=pos)
    stored_id = blob[pos : pos + id_len].decode("utf-8")
    if stored_id != utt_id:
        raise CorpusFormatError(f"manifest says {utt_id!r}, record says {stored_id!r}", offset=offset)
    pos += id_len
    length, fdim = struct.unpack_from("<II", blob, pos)
    pos += 8
    nbytes = length * fdim * 4
    if pos + nbytes > len(blob):
        raise CorpusFormatError(
            f"record dims ({length}, {fdim}) overrun the blob", offset=pos
        )
    feats = np.frombuffer(blob, dtype="<f4", count=length * fdim, offset=pos).reshape(length, fdim)
    return Utterance(utt_id, feats.copy(), source, target, class_id)


def write_splits(splits: dict, root: str) -> None:
    for name in SPLIT_NAMES:
        write_corpus(splits.get(name, []), os.path.join(root, name))


def read_splits(root: str) -> dict:
    return {name: read_corpus(os.path.join(root, name)) for name in SPLIT_NAMES}
