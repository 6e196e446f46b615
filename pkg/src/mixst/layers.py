"""Neural building blocks: scaled dot-product and multi-head attention, the
mixed audio+text attention sublayer, feed-forward, embeddings, sinusoidal
positions, and the 2x2/stride-2 CNN subsampler.

Sequence tensors carry an optional leading batch dimension; public helpers
accept (n, d) or (B, n, d) and preserve the rank they were given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, InputTooShortError, ValidationError
from .masks import MaskMatrix
from .tensor import Tensor


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())


def init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> tuple[Tensor, Tensor]:
    w = Tensor(xavier_uniform(rng, (d_in, d_out), d_in, d_out), requires_grad=True)
    b = Tensor(np.zeros(d_out, dtype=T.default_dtype()), requires_grad=True)
    return w, b


def init_embedding(rng: np.random.Generator, n_rows: int, d: int) -> Tensor:
    data = rng.normal(0.0, d ** -0.5, size=(n_rows, d)).astype(T.default_dtype())
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# parameter records
# ---------------------------------------------------------------------------


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, d: int) -> "LayerNormParams":
        return cls(
            gain=Tensor(np.ones(d, dtype=T.default_dtype()), requires_grad=True),
            bias=Tensor(np.zeros(d, dtype=T.default_dtype()), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


@dataclass
class AttentionParams:
    """Shared Q/K/V/O projections for one multi-head attention sublayer."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor
    b_k: Tensor
    b_v: Tensor
    b_o: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise ConfigurationError(f"{name} must be square {d}x{d}, got {w.shape}")
        if self.n_heads < 1 or d % self.n_heads != 0:
            raise ConfigurationError(f"d_model {d} is not divisible by n_heads {self.n_heads}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def create(cls, rng: np.random.Generator, d_model: int, n_heads: int) -> "AttentionParams":
        ws, bs = zip(*(init_linear(rng, d_model, d_model) for _ in range(4)))
        return cls(*ws, *bs, n_heads=n_heads)


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, d_model: int, d_ff: int) -> "FeedForwardParams":
        w1, b1 = init_linear(rng, d_model, d_ff)
        w2, b2 = init_linear(rng, d_ff, d_model)
        return cls(w1, b1, w2, b2)


@dataclass
class ModalityEmbedding:
    """Two learned rows added to mark each position as audio (0) or text (1)."""

    table: Tensor

    def __post_init__(self):
        if self.table.shape[0] != 2:
            raise ConfigurationError(f"modality table must have exactly 2 rows, got {self.table.shape}")

    @classmethod
    def create(cls, rng: np.random.Generator, d_model: int) -> "ModalityEmbedding":
        return cls(table=init_embedding(rng, 2, d_model))


@dataclass
class SubsamplerParams:
    """Two 2x2/stride-2 conv layers plus a linear map to d_model."""

    conv1_w: Tensor  # (2, 2, 1, channels)
    conv1_b: Tensor
    conv2_w: Tensor  # (2, 2, channels, channels)
    conv2_b: Tensor
    proj_w: Tensor  # (channels * (F // 4), d_model)
    proj_b: Tensor
    feature_dim: int
    channels: int

    @classmethod
    def create(
        cls, rng: np.random.Generator, feature_dim: int, channels: int, d_model: int
    ) -> "SubsamplerParams":
        if feature_dim < 4:
            raise ConfigurationError(f"feature_dim must be >= 4 for two stride-2 convs, got {feature_dim}")
        c1 = Tensor(xavier_uniform(rng, (2, 2, 1, channels), 4, channels), requires_grad=True)
        c2 = Tensor(xavier_uniform(rng, (2, 2, channels, channels), 4 * channels, channels), requires_grad=True)
        flat = channels * (feature_dim // 4)
        pw, pb = init_linear(rng, flat, d_model)
        return cls(
            conv1_w=c1,
            conv1_b=Tensor(np.zeros(channels, dtype=T.default_dtype()), requires_grad=True),
            conv2_w=c2,
            conv2_b=Tensor(np.zeros(channels, dtype=T.default_dtype()), requires_grad=True),
            proj_w=pw,
            proj_b=pb,
            feature_dim=feature_dim,
            channels=channels,
        )


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"expected a (n, d) or (B, n, d) tensor, got shape {x.shape}")


def _swap_last2(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.permute(x, axes)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, n, d) -> (B, h, n, d/h)."""
    b, n, d = x.shape
    x = T.reshape(x, (b, n, n_heads, d // n_heads))
    return T.permute(x, (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, h, n, d_k) -> (B, n, h*d_k)."""
    b, h, n, dk = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, n, h * dk))


def _project(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None, d_k: int | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two dims."""
    q, k, v = T._as_tensor(q), T._as_tensor(k), T._as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"q/k feature dims disagree: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"k/v sequence lengths disagree: {k.shape} vs {v.shape}")
    if d_k is None:
        d_k = q.shape[-1]
    scores = T.mul(T.matmul(q, _swap_last2(k)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if m.shape[-1] != k.shape[-2] or (m.ndim >= 2 and m.shape[-2] not in (1, q.shape[-2])):
            raise DimensionError(
                f"mask shape {m.shape} does not cover queries x keys ({q.shape[-2]}, {k.shape[-2]})"
            )
        scores = T.add(scores, Tensor._const(m.astype(scores.data.dtype, copy=False)))
    return T.matmul(T.softmax_lastdim(scores), v)


def multi_head_attention(q_seq: Tensor, kv_seq: Tensor, params: AttentionParams, mask=None) -> Tensor:
    """Project, split into heads, attend (mask broadcast per head), merge, project."""
    q_seq, squeeze = _batched(q_seq)
    kv_seq, _ = _batched(kv_seq)
    q = split_heads(_project(q_seq, params.w_q, params.b_q), params.n_heads)
    k = split_heads(_project(kv_seq, params.w_k, params.b_k), params.n_heads)
    v = split_heads(_project(kv_seq, params.w_v, params.b_v), params.n_heads)
    out = _project(merge_heads(attention(q, k, v, mask, params.d_k)), params.w_o, params.b_o)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def multi_head_cross_attention(q_seq: Tensor, kv_seq: Tensor, params: AttentionParams, key_mask=None) -> Tensor:
    """Encoder-decoder attention: queries over a fixed memory with a key mask."""
    return multi_head_attention(q_seq, kv_seq, params, key_mask)


def _stma_halves(
    src: Tensor,
    tgt: Tensor | None,
    params: AttentionParams,
    m_ss,
    m_t_all=None,
    want_kv: bool = False,
):
    """Mixed attention computed as two halves over shared projections.

    Audio queries attend audio keys under m_ss; text queries attend the
    concatenated audio++text keys in one softmax under m_t_all. Identical to
    masking the full (S+T)x(S+T) score matrix (the audio-to-text block is
    NEG, whose exponentials underflow to exact zero), but keeps the audio
    half structurally independent of the text, which also yields the cached
    audio K/V used by incremental decoding.
    """
    h = params.n_heads
    ks = split_heads(_project(src, params.w_k, params.b_k), h)
    vs = split_heads(_project(src, params.w_v, params.b_v), h)
    qs = split_heads(_project(src, params.w_q, params.b_q), h)
    out_s = _project(merge_heads(attention(qs, ks, vs, m_ss, params.d_k)), params.w_o, params.b_o)
    kv = (ks.data, vs.data) if want_kv else None
    if tgt is None:
        return out_s, None, kv
    qt = split_heads(_project(tgt, params.w_q, params.b_q), h)
    kt = split_heads(_project(tgt, params.w_k, params.b_k), h)
    vt = split_heads(_project(tgt, params.w_v, params.b_v), h)
    k_all = T.concat([ks, kt], axis=-2)
    v_all = T.concat([vs, vt], axis=-2)
    out_t = _project(merge_heads(attention(qt, k_all, v_all, m_t_all, params.d_k)), params.w_o, params.b_o)
    return out_s, out_t, kv


def stma(src_states: Tensor, tgt_states: Tensor, params: AttentionParams, mask: MaskMatrix) -> Tensor:
    """Mixed attention over the concatenated (audio ++ text) sequence.

    Returns the full (S+T, d) output; rows 0..S-1 never depend on the text.
    """
    src, squeeze = _batched(src_states)
    tgt, _ = _batched(tgt_states)
    s_len, t_len = src.shape[-2], tgt.shape[-2]
    if s_len < 1:
        raise ValidationError("mixed attention requires at least one audio position")
    if mask.s_len != s_len or mask.t_len != t_len:
        raise DimensionError(
            f"mask covers ({mask.s_len}, {mask.t_len}) positions, sequences are ({s_len}, {t_len})"
        )
    out_s, out_t, _ = _stma_halves(src, tgt, params, mask.m_ss, mask.target_rows)
    out = T.concat([out_s, out_t], axis=-2)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise w2 . relu(w1 . x + b1) + b2."""
    return T.add(T.matmul(T.relu(T.add(T.matmul(x, w1), b1)), w2), b2)


def apply_ffn(x: Tensor, p: FeedForwardParams) -> Tensor:
    return feed_forward(x, p.w1, p.b1, p.w2, p.b2)


# ---------------------------------------------------------------------------
# positions, modality, subsampling
# ---------------------------------------------------------------------------


def sinusoidal_positions(n: int, d_model: int, offset: int = 0) -> np.ndarray:
    """(n, d_model) sin/cos table starting at position `offset`."""
    if d_model % 2 != 0:
        raise ConfigurationError(f"d_model must be even for sin/cos pairs, got {d_model}")
    pos = np.arange(offset, offset + n, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    table = np.empty((n, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(T.default_dtype())


def modality_position_split(
    src: Tensor,
    tgt_emb: Tensor,
    modality: ModalityEmbedding | None,
    restart_positions: bool = False,
    add_positions: bool = True,
    tgt_offsets=None,
) -> tuple[Tensor, Tensor]:
    """Audio rows get modality row 0 + positions 0..S-1; text rows get row 1
    and positions continuing at S (or restarting at 0).

    `tgt_offsets` overrides the text position start per batch sample so that
    padded audio tails do not shift text positions (defaults to S).
    """
    src, squeeze = _batched(src)
    tgt_emb, _ = _batched(tgt_emb)
    d = src.shape[-1]
    if tgt_emb.shape[-1] != d:
        raise DimensionError(f"audio dim {d} != text dim {tgt_emb.shape[-1]}")
    s_len, t_len = src.shape[-2], tgt_emb.shape[-2]
    if modality is not None:
        src = T.add(src, T.slice_tensor(modality.table, (slice(0, 1),)))
        tgt_emb = T.add(tgt_emb, T.slice_tensor(modality.table, (slice(1, 2),)))
    if add_positions:
        src = T.add(src, sinusoidal_positions(s_len, d, 0))
        if restart_positions:
            offsets = np.zeros(src.shape[0], dtype=int)
        elif tgt_offsets is None:
            offsets = np.full(src.shape[0], s_len, dtype=int)
        else:
            offsets = np.broadcast_to(np.asarray(tgt_offsets, dtype=int), (src.shape[0],))
        if np.all(offsets == offsets[0]):
            pe_t = sinusoidal_positions(t_len, d, int(offsets[0]))
        else:
            pe_t = np.stack([sinusoidal_positions(t_len, d, int(o)) for o in offsets])
        tgt_emb = T.add(tgt_emb, pe_t)
    if squeeze:
        return T.reshape(src, src.shape[1:]), T.reshape(tgt_emb, tgt_emb.shape[1:])
    return src, tgt_emb


def add_modality_and_position(
    src: Tensor,
    tgt_emb: Tensor,
    modality: ModalityEmbedding | None,
    restart_positions: bool = False,
    add_positions: bool = True,
) -> Tensor:
    """Concatenated (S+T, d) decoder input with modality and position terms."""
    s, t = modality_position_split(src, tgt_emb, modality, restart_positions, add_positions)
    return T.concat([s, t], axis=-2)


def subsampled_length(length: int) -> int:
    """Output length of the two kernel-2/stride-2 conv layers."""
    after1 = (length - 2) // 2 + 1
    return (after1 - 2) // 2 + 1


def _conv2x2_stride2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Non-overlapping 2x2 patches as a matmul; x is (B, H, W, C)."""
    bsz, hgt, wid, c = x.shape
    h2, w2 = hgt // 2, wid // 2
    x = T.slice_tensor(x, (slice(None), slice(0, 2 * h2), slice(0, 2 * w2), slice(None)))
    x = T.reshape(x, (bsz, h2, 2, w2, 2, c))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (bsz, h2, w2, 4 * c))
    out_c = w.shape[-1]
    return T.relu(T.add(T.matmul(x, T.reshape(w, (4 * c, out_c))), b))


def subsample(features: Tensor, params: SubsamplerParams) -> Tensor:
    """(L, F) or (B, L, F) acoustic features -> (L', d_model) states."""
    x, squeeze = _batched(features)
    bsz, length, fdim = x.shape
    if length < 4:
        raise InputTooShortError(length, 4)
    if fdim != params.feature_dim:
        raise DimensionError(f"feature dim {fdim} != configured {params.feature_dim}")
    x = T.reshape(x, (bsz, length, fdim, 1))
    x = _conv2x2_stride2(x, params.conv1_w, params.conv1_b)
    x = _conv2x2_stride2(x, params.conv2_w, params.conv2_b)
    b2, l4, f4, ch = x.shape
    x = T.reshape(x, (b2, l4, f4 * ch))
    x = T.add(T.matmul(x, params.proj_w), params.proj_b)
    return T.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# transformer blocks (pre-norm residual)
# ---------------------------------------------------------------------------


@dataclass
class EncoderLayerParams:
    norm_attn: LayerNormParams
    attn: AttentionParams
    norm_ffn: LayerNormParams
    ffn: FeedForwardParams

    @classmethod
    def create(cls, rng, d_model: int, n_heads: int, d_ff: int) -> "EncoderLayerParams":
        return cls(
            norm_attn=LayerNormParams.create(d_model),
            attn=AttentionParams.create(rng, d_model, n_heads),
            norm_ffn=LayerNormParams.create(d_model),
            ffn=FeedForwardParams.create(rng, d_model, d_ff),
        )


def encoder_layer(x: Tensor, p: EncoderLayerParams, key_mask=None, drop=None) -> Tensor:
    n = p.norm_attn(x)
    h = multi_head_attention(n, n, p.attn, key_mask)
    x = T.add(x, h if drop is None else drop(h))
    h = apply_ffn(p.norm_ffn(x), p.ffn)
    return T.add(x, h if drop is None else drop(h))


@dataclass
class BaselineDecoderLayerParams:
    norm_self: LayerNormParams
    self_attn: AttentionParams
    norm_cross: LayerNormParams
    cross_attn: AttentionParams
    norm_ffn: LayerNormParams
    ffn: FeedForwardParams

    @classmethod
    def create(cls, rng, d_model: int, n_heads: int, d_ff: int) -> "BaselineDecoderLayerParams":
        return cls(
            norm_self=LayerNormParams.create(d_model),
            self_attn=AttentionParams.create(rng, d_model, n_heads),
            norm_cross=LayerNormParams.create(d_model),
            cross_attn=AttentionParams.create(rng, d_model, n_heads),
            norm_ffn=LayerNormParams.create(d_model),
            ffn=FeedForwardParams.create(rng, d_model, d_ff),
        )


def baseline_decoder_layer(
    x: Tensor, memory: Tensor, p: BaselineDecoderLayerParams, causal_mask, mem_key_mask=None, drop=None
) -> Tensor:
    n = p.norm_self(x)
    h = multi_head_attention(n, n, p.self_attn, causal_mask)
    x = T.add(x, h if drop is None else drop(h))
    h = multi_head_cross_attention(p.norm_cross(x), memory, p.cross_attn, mem_key_mask)
    x = T.add(x, h if drop is None else drop(h))
    h = apply_ffn(p.norm_ffn(x), p.ffn)
    return T.add(x, h if drop is None else drop(h))


@dataclass
class AdaptiveDecoderLayerParams:
    """One mixed-attention block: a single attention sublayer plus FFN."""

    norm_attn: LayerNormParams
    attn: AttentionParams
    norm_ffn: LayerNormParams
    ffn: FeedForwardParams

    @classmethod
    def create(cls, rng, d_model: int, n_heads: int, d_ff: int) -> "AdaptiveDecoderLayerParams":
        return cls(
            norm_attn=LayerNormParams.create(d_model),
            attn=AttentionParams.create(rng, d_model, n_heads),
            norm_ffn=LayerNormParams.create(d_model),
            ffn=FeedForwardParams.create(rng, d_model, d_ff),
        )


def adaptive_decoder_layer(
    src: Tensor,
    tgt: Tensor | None,
    p: AdaptiveDecoderLayerParams,
    m_ss,
    m_t_all=None,
    drop=None,
    collect_kv: list | None = None,
):
    """Process the audio half (and optionally the text half) of one block.

    The audio path never reads `tgt`, so calling with tgt=None reproduces the
    audio rows of a full pass bit-for-bit. When `collect_kv` is a list, the
    per-head projected audio K/V of this layer are appended to it (consumed
    by incremental decoding).
    """
    out_s, out_t, kv = _stma_halves(
        p.norm_attn(src),
        None if tgt is None else p.norm_attn(tgt),
        p.attn,
        m_ss,
        m_t_all,
        want_kv=collect_kv is not None,
    )
    if collect_kv is not None:
        collect_kv.append(kv)
    src = T.add(src, out_s if drop is None else drop(out_s))
    h = apply_ffn(p.norm_ffn(src), p.ffn)
    src = T.add(src, h if drop is None else drop(h))
    if tgt is None:
        return src, None
    tgt = T.add(tgt, out_t if drop is None else drop(out_t))
    h = apply_ffn(p.norm_ffn(tgt), p.ffn)
    tgt = T.add(tgt, h if drop is None else drop(h))
    return src, tgt
