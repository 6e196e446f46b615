"""Inference: greedy and beam decoding for all variants, an incremental
decoder for the adaptive variant that reuses the target-independent audio
track, and corpus metrics (BLEU-4, token accuracy).

The audio rows of the adaptive decoder never read target rows, so their
per-layer evolution and projected K/V are computed once per utterance
(AcousticTrack) and shared by every hypothesis; each decoding step then
touches O(S + t) keys instead of re-running the full sequence.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import masks as MK
from . import model as M
from . import tensor as T
from .errors import ConfigurationError, ContractError, ValidationError
from .tensor import Tensor
from .vocab import BOS_ID, EOS_ID

# instrumentation: total key positions read by incremental attention
_attention_reads = 0


def reset_attention_reads() -> None:
    global _attention_reads
    _attention_reads = 0


def attention_reads() -> int:
    return _attention_reads


# ---------------------------------------------------------------------------
# acoustic track
# ---------------------------------------------------------------------------


@dataclass
class AcousticTrack:
    """Per-decoder-layer audio rows and projected K/V, computed once per
    utterance; independent of any target token by construction."""

    layer_rows: list  # n_dec arrays (S, d): audio rows entering each layer
    k_cache: list  # n_dec arrays (n_heads, S, d_k)
    v_cache: list
    key_mask: np.ndarray  # (S,) additive 0/NEG over audio key columns
    s_len: int
    s_true: int
    d_model: int

    @property
    def n_row_elements(self) -> int:
        return sum(r.size for r in self.layer_rows)


def precompute_acoustic_track(model: M.Model, enc_states, enc_pad=None) -> AcousticTrack:
    """Run the decoder's audio half alone (T=0), caching per-layer K/V."""
    M._check_variant(model, "adaptive")
    enc = enc_states if isinstance(enc_states, Tensor) else Tensor(enc_states)
    if enc.ndim != 2:
        raise ValidationError(f"expected a single utterance (S, d), got shape {enc.shape}")
    s_len = enc.shape[0]
    pad = np.zeros(s_len, dtype=bool) if enc_pad is None else np.asarray(enc_pad, dtype=bool)
    rows: list = []
    kv: list = []
    with T.no_grad():
        M._adaptive_pass(model, enc.data[None, :, :], pad[None, :], None, collect_kv=kv, collect_rows=rows)
    return AcousticTrack(
        layer_rows=[r[0] for r in rows],
        k_cache=[k[0] for k, _ in kv],
        v_cache=[v[0] for _, v in kv],
        key_mask=MK.build_padding_mask(s_len, pad),
        s_len=s_len,
        s_true=int((~pad).sum()),
        d_model=model.config.d_model,
    )


# ---------------------------------------------------------------------------
# hypotheses and incremental stepping
# ---------------------------------------------------------------------------


@dataclass
class Hypothesis:
    """Tokens fed so far plus per-layer target K/V caches."""

    tokens: list = field(default_factory=list)
    log_prob: float = 0.0
    k_cache: list = field(default_factory=list)  # per layer (n_heads, t, d_k), absent until first step
    v_cache: list = field(default_factory=list)
    finished: bool = False

    def clone(self) -> "Hypothesis":
        return Hypothesis(
            tokens=list(self.tokens),
            log_prob=self.log_prob,
            k_cache=[k.copy() for k in self.k_cache],
            v_cache=[v.copy() for v in self.v_cache],
            finished=self.finished,
        )


def _heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """(1, d) -> (n_heads, 1, d_k)."""
    d = x.shape[-1]
    return x.reshape(1, n_heads, d // n_heads).transpose(1, 0, 2)


def incremental_step(model: M.Model, track: AcousticTrack, hyp: Hypothesis, next_token: int) -> np.ndarray:
    """Feed one target token through all layers against cached K/V.

    Appends the new token and its per-layer K/V to `hyp` and returns the
    next-token logits (V,).
    """
    global _attention_reads
    M._check_variant(model, "adaptive")
    if hyp.finished:
        raise ContractError("cannot extend a finished hypothesis")
    t = len(hyp.tokens)
    if hyp.k_cache and hyp.k_cache[0].shape[1] != t:
        raise ContractError(
            f"cache length {hyp.k_cache[0].shape[1]} inconsistent with {t} fed tokens"
        )
    c = model.config
    pos = t if c.position_restart_at_text else track.s_true + t
    with T.no_grad():
        x = T.mul(T.embedding(model.token_embedding, np.array([next_token])), math.sqrt(c.d_model))
        if model.modality is not None:
            x = T.add(x, T.slice_tensor(model.modality.table, (slice(1, 2),)))
        x = T.add(x, L.sinusoidal_positions(1, c.d_model, pos))
        first_step = not hyp.k_cache
        for li, layer in enumerate(model.decoder_layers):
            n = layer.norm_attn(x)
            qh = _heads(T._project(n, layer.attn.w_q, layer.attn.b_q).data, c.n_heads)
            kh = _heads(T._project(n, layer.attn.w_k, layer.attn.b_k).data, c.n_heads)
            vh = _heads(T._project(n, layer.attn.w_v, layer.attn.b_v).data, c.n_heads)
            if first_step:
                hyp.k_cache.append(kh)
                hyp.v_cache.append(vh)
                k_all = np.concatenate([track.k_cache[li], kh], axis=1)
                v_all = np.concatenate([track.v_cache[li], vh], axis=1)
            else:
                hyp.k_cache[li] = np.concatenate([hyp.k_cache[li], kh], axis=1)
                hyp.v_cache[li] = np.concatenate([hyp.v_cache[li], vh], axis=1)
                k_all = np.concatenate([track.k_cache[li], hyp.k_cache[li]], axis=1)
                v_all = np.concatenate([track.v_cache[li], hyp.v_cache[li]], axis=1)
            _attention_reads += k_all.shape[1]
            mask = np.concatenate(
                [track.key_mask, np.zeros(k_all.shape[1] - track.s_len, dtype=track.key_mask.dtype)]
            )
            att = L.attention(Tensor._const(qh), Tensor._const(k_all), Tensor._const(v_all), mask, layer.attn.d_k)
            merged = att.data.transpose(1, 0, 2).reshape(1, c.d_model)
            x = T.add(x, T._project(Tensor._const(merged), layer.attn.w_o, layer.attn.b_o))
            x = T.add(x, L.apply_ffn(layer.norm_ffn(x), layer.ffn))
        logits = M.output_logits(model, x)
    hyp.tokens.append(int(next_token))
    return logits.data[0]


# ---------------------------------------------------------------------------
# greedy and beam decoding
# ---------------------------------------------------------------------------


def default_max_len(s_len: int) -> int:
    return 2 * s_len + 16


def _use_incremental(model: M.Model, incremental) -> bool:
    if model.config.variant != "adaptive":
        return False
    return incremental is not False


class _FullStepper:
    """Per-step logits by full teacher-forced re-decoding (any variant)."""

    def __init__(self, model, enc, s_pad):
        self.model, self.enc, self.s_pad = model, enc, s_pad

    def start(self):
        return [BOS_ID]

    def logits(self, state):
        with T.no_grad():
            out = M.decode_train(self.model, self.enc, self.s_pad, np.asarray(state))
        return out.data[-1]

    def extend(self, state, token):
        return state + [token]


class _IncrementalStepper:
    """Per-step logits through the cached audio track (adaptive variant).

    State is (Hypothesis, pending logits); extending clones the caches so
    beam branches stay independent while sharing the audio track.
    """

    def __init__(self, model, track):
        self.model, self.track = model, track

    def start(self):
        hyp = Hypothesis()
        return (hyp, incremental_step(self.model, self.track, hyp, BOS_ID))

    def logits(self, state):
        return state[1]

    def extend(self, state, token):
        new = state[0].clone()
        return (new, incremental_step(self.model, self.track, new, token))


def _make_stepper(model, features, feature_pad, incremental):
    with T.no_grad():
        enc, s_pad = M.encode(model, features, feature_pad)
    s_true = int((~np.asarray(s_pad)).sum())
    if _use_incremental(model, incremental):
        return _IncrementalStepper(model, precompute_acoustic_track(model, enc, s_pad)), s_true
    return _FullStepper(model, enc.data, s_pad), s_true


def greedy_decode(model: M.Model, features, max_len: int | None = None, feature_pad=None, incremental=None) -> list:
    """Argmax chain from BOS until EOS or max_len; ties break to the lowest id."""
    stepper, s_true = _make_stepper(model, features, feature_pad, incremental)
    if max_len is None:
        max_len = default_max_len(s_true)
    if max_len < 1:
        raise ConfigurationError("max_len must be >= 1")
    state = stepper.start()
    out: list[int] = []
    for _ in range(max_len):
        tok = int(np.argmax(stepper.logits(state)))
        if tok == EOS_ID:
            break
        out.append(tok)
        state = stepper.extend(state, tok)
    return out


@dataclass
class BeamResult:
    tokens: list
    log_prob: float
    score: float


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - math.log(np.exp(shifted).sum())


def beam_search(
    model: M.Model,
    features,
    beam: int,
    max_len: int | None = None,
    length_penalty: float = 1.0,
    feature_pad=None,
    incremental=None,
) -> list:
    """Deterministic beam search, best hypothesis first.

    Per step, all expansions of the live beam are ranked by cumulative
    log-prob (ties broken by lowest token ids). An EOS expansion finalizes
    only from the top-beam ranks (so beam=1 reproduces greedy exactly);
    the remaining ranks refill the live beam. Search stops once `beam`
    hypotheses have finished or max_len is reached; results are ranked by
    score = log_prob / length^length_penalty, then lexicographic tokens.
    """
    if beam < 1:
        raise ConfigurationError("beam must be >= 1")
    stepper, s_true = _make_stepper(model, features, feature_pad, incremental)
    if max_len is None:
        max_len = default_max_len(s_true)

    def score_of(log_prob: float, n_tokens: int) -> float:
        return log_prob / (max(n_tokens, 1) ** length_penalty)

    live = [((), 0.0, stepper.start())]  # (generated tokens, log_prob, state)
    finished: list[BeamResult] = []
    for _ in range(max_len):
        pool = []  # (lp, tokens_after, parent index, token)
        for idx, (tokens, lp, state) in enumerate(live):
            logq = _log_softmax(stepper.logits(state))
            for tok in range(logq.shape[0]):
                pool.append((lp + float(logq[tok]), tokens + (tok,), idx, tok))
        pool.sort(key=lambda c: (-c[0], c[1]))
        new_live = []
        for rank, (lp, tokens, idx, tok) in enumerate(pool):
            if tok == EOS_ID:
                if rank < beam:
                    finished.append(BeamResult(list(tokens[:-1]), lp, score_of(lp, len(tokens))))
                continue
            if len(new_live) < beam:
                new_live.append((tokens, lp, stepper.extend(live[idx][2], tok)))
            if len(new_live) >= beam and rank >= beam:
                break
        live = new_live
        if len(finished) >= beam or not live:
            break
    if not finished:
        finished = [BeamResult(list(tokens), lp, score_of(lp, len(tokens) + 1)) for tokens, lp, _ in live]
    finished.sort(key=lambda r: (-r.score, r.tokens))
    return finished


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: list, references: list) -> float:
    """Corpus BLEU-4 with brevity penalty on token ids, non-smoothed, 0-100."""
    if len(candidates) != len(references):
        raise ValidationError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    if not candidates:
        raise ValidationError("empty corpus")
    matched = [0] * 4
    total = [0] * 4
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            counts = _ngram_counts(cand, n)
            ref_counts = _ngram_counts(ref, n)
            total[n - 1] += max(len(cand) - n + 1, 0)
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
    if cand_len == 0 or any(t == 0 for t in total) or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(0.25 * math.log(m / t) for m, t in zip(matched, total))
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_precision) * 100.0


def sequence_token_accuracy(candidates: list, references: list) -> float:
    """Position-aligned token matches over total reference tokens."""
    if len(candidates) != len(references):
        raise ValidationError("candidate/reference lists differ in length")
    hits = total = 0
    for cand, ref in zip(candidates, references):
        total += len(ref)
        hits += sum(1 for a, b in zip(cand, ref) if a == b)
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# hypotheses files: one line per utterance, `utt_id <TAB> space-joined tokens`
# ---------------------------------------------------------------------------


def write_hypotheses(entries: list, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, tokens in entries:
            fh.write(f"{utt_id}\t{' '.join(str(t) for t in tokens)}\n")


def read_hypotheses(path: str) -> list:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, _, rest = line.partition("\t")
            entries.append((utt_id, [int(t) for t in rest.split()] if rest else []))
    return entries
