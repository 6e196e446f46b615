"""Model assembly: the CNN+Transformer baseline, the adaptive mixed-attention
variant, and the static-adaptation ablation, plus parameter audit and
checkpoint I/O.

Ablation wiring (documented interpretation): the decoder is the baseline
decoder, but before decoder layer l cross-attends, the encoder memory is
refreshed by one extra self-attention block dedicated to layer l. The memory
therefore evolves per decoder layer but never reads target states; whether
the original design lets encoder states read decoder states is ambiguous,
and this implementation deliberately keeps the memory target-independent.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import masks as M
from . import tensor as T
from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
    ValidationError,
)
from .tensor import Tensor
from .vocab import PAD_ID

VARIANTS = ("baseline", "adaptive", "static_ablation")

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"
WEIGHTS_NAME = "weights.bin"


@dataclass
class ModelConfig:
    """All architecture hyperparameters."""

    variant: str = "adaptive"
    n_cnn_layers: int = 2
    n_enc_layers: int = 12
    n_dec_layers: int = 10
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 1024
    vocab_size: int = 32
    feature_dim: int = 80
    dropout: float = 0.0
    subsampler_channels: int = 64
    position_restart_at_text: bool = False
    use_modality_embedding: bool = True
    tie_output_embedding: bool = False

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("n_cnn_layers", "n_enc_layers", "n_dec_layers", "d_model", "n_heads", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_cnn_layers != 2:
            raise ConfigurationError("the subsampler implements the fixed two-layer front end (n_cnn_layers=2)")
        if self.d_model % 2 != 0:
            raise ConfigurationError(f"d_model must be even, got {self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.feature_dim < 4:
            raise ConfigurationError(f"feature_dim must be >= 4, got {self.feature_dim}")
        if self.vocab_size < 4:
            raise ConfigurationError("vocab_size must be >= 4 (pad/eos/bos plus content)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.subsampler_channels < 1:
            raise ConfigurationError("subsampler_channels must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class MemoryRefreshParams:
    """Extra self-attention block refreshing the encoder memory (ablation)."""

    norm: L.LayerNormParams
    attn: L.AttentionParams


@dataclass
class Model:
    config: ModelConfig
    subsampler: L.SubsamplerParams
    encoder_layers: list
    encoder_norm: L.LayerNormParams
    decoder_layers: list
    decoder_norm: L.LayerNormParams
    token_embedding: Tensor
    modality: L.ModalityEmbedding | None = None
    out_w: Tensor | None = None
    out_b: Tensor | None = None
    memory_refresh: list = field(default_factory=list)

    def named_parameters(self) -> dict[str, Tensor]:
        """Deterministically ordered name -> Tensor mapping."""
        out: dict[str, Tensor] = {}

        def walk(prefix, obj):
            if isinstance(obj, Tensor):
                out[prefix] = obj
            elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                for f in dataclasses.fields(obj):
                    walk(f"{prefix}.{f.name}", getattr(obj, f.name))
            elif isinstance(obj, list):
                for i, item in enumerate(obj):
                    walk(f"{prefix}.{i}", item)

        walk("subsampler", self.subsampler)
        walk("encoder.layers", self.encoder_layers)
        walk("encoder.norm", self.encoder_norm)
        walk("memory_refresh", self.memory_refresh)
        walk("decoder.layers", self.decoder_layers)
        walk("decoder.norm", self.decoder_norm)
        walk("token_embedding", self.token_embedding)
        if self.modality is not None:
            walk("modality", self.modality)
        if self.out_w is not None:
            walk("output.w", self.out_w)
            walk("output.b", self.out_b)
        return out

    def zero_grads(self) -> None:
        T.zero_grads(self.named_parameters().values())


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Construct a model with seeded, deterministic initialization."""
    config.validate()
    rng = np.random.default_rng(seed)
    c = config
    subsampler = L.SubsamplerParams.create(rng, c.feature_dim, c.subsampler_channels, c.d_model)
    encoder = [L.EncoderLayerParams.create(rng, c.d_model, c.n_heads, c.d_ff) for _ in range(c.n_enc_layers)]
    refresh: list[MemoryRefreshParams] = []
    if c.variant == "static_ablation":
        refresh = [
            MemoryRefreshParams(
                norm=L.LayerNormParams.create(c.d_model),
                attn=L.AttentionParams.create(rng, c.d_model, c.n_heads),
            )
            for _ in range(c.n_dec_layers)
        ]
    if c.variant == "adaptive":
        decoder = [
            L.AdaptiveDecoderLayerParams.create(rng, c.d_model, c.n_heads, c.d_ff)
            for _ in range(c.n_dec_layers)
        ]
    else:
        decoder = [
            L.BaselineDecoderLayerParams.create(rng, c.d_model, c.n_heads, c.d_ff)
            for _ in range(c.n_dec_layers)
        ]
    token_embedding = L.init_embedding(rng, c.vocab_size, c.d_model)
    modality = None
    if c.variant == "adaptive" and c.use_modality_embedding:
        modality = L.ModalityEmbedding.create(rng, c.d_model)
    out_w = out_b = None
    if not c.tie_output_embedding:
        out_w, out_b = L.init_linear(rng, c.d_model, c.vocab_size)
    return Model(
        config=c,
        subsampler=subsampler,
        encoder_layers=encoder,
        encoder_norm=L.LayerNormParams.create(c.d_model),
        decoder_layers=decoder,
        decoder_norm=L.LayerNormParams.create(c.d_model),
        token_embedding=token_embedding,
        modality=modality,
        out_w=out_w,
        out_b=out_b,
        memory_refresh=refresh,
    )


# ---------------------------------------------------------------------------
# mask caches (one mask per (lengths, pad pattern), shared across layers)
# ---------------------------------------------------------------------------

_stma_cache: dict = {}
_causal_cache: dict = {}
_padding_cache: dict = {}


def _cached_stma_mask(s_len: int, t_len: int, s_pad: np.ndarray, t_pad: np.ndarray) -> M.MaskMatrix:
    key = (s_len, t_len, s_pad.tobytes(), t_pad.tobytes(), np.dtype(T.default_dtype()).str)
    hit = _stma_cache.get(key)
    if hit is None:
        hit = _stma_cache[key] = M.build_stma_mask(s_len, t_len, s_pad, t_pad)
    return hit


def _cached_causal_mask(t_len: int, t_pad: np.ndarray) -> np.ndarray:
    key = (t_len, t_pad.tobytes(), np.dtype(T.default_dtype()).str)
    hit = _causal_cache.get(key)
    if hit is None:
        hit = _causal_cache[key] = M.build_causal_mask(t_len, t_pad)
    return hit


def _cached_padding_mask(s_len: int, s_pad: np.ndarray) -> np.ndarray:
    key = (s_len, s_pad.tobytes(), np.dtype(T.default_dtype()).str)
    hit = _padding_cache.get(key)
    if hit is None:
        hit = _padding_cache[key] = M.build_padding_mask(s_len, s_pad)
    return hit


def _as_bool_pad(pad, length: int, batch: int) -> np.ndarray:
    if pad is None:
        return np.zeros((batch, length), dtype=bool)
    pad = np.asarray(pad, dtype=bool)
    if pad.ndim == 1:
        pad = pad[None, :]
    if pad.shape != (batch, length):
        raise ValidationError(f"pad flags have shape {pad.shape}, expected ({batch}, {length})")
    return pad


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def encode(model: Model, features, pad=None, drop=None):
    """Subsample, add positions, run the encoder stack.

    Accepts (L, F) with an L-length pad list or (B, L, F) with (B, L) flags.
    Returns (states, subsampled pad flags) at the rank given.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    single = x.ndim == 2
    x, _ = L._batched(x)
    bsz, length, _ = x.shape
    fpad = _as_bool_pad(pad, length, bsz)
    if np.any(fpad[:, 0]):
        raise ValidationError("first feature frame must not be padded")
    # trailing-padding contract: true length = count of non-padded frames
    true_lens = (~fpad).sum(axis=1)
    for b in range(bsz):
        if fpad[b, : true_lens[b]].any():
            raise ValidationError("padding must be trailing")

    states = L.subsample(x, model.subsampler)
    s_max = states.shape[-2]
    s_true = np.array([L.subsampled_length(int(n)) for n in true_lens])
    s_pad = np.arange(s_max)[None, :] >= s_true[:, None]

    states = T.add(states, L.sinusoidal_positions(s_max, model.config.d_model, 0))
    key_mask = np.stack([_cached_padding_mask(s_max, s_pad[b]) for b in range(bsz)])[:, None, None, :]
    for layer in model.encoder_layers:
        states = L.encoder_layer(states, layer, key_mask, drop)
    states = model.encoder_norm(states)
    if single:
        return T.reshape(states, states.shape[1:]), s_pad[0]
    return states, s_pad


# ---------------------------------------------------------------------------
# decoders (teacher-forced)
# ---------------------------------------------------------------------------


def _prep_targets(model: Model, tgt_ids) -> tuple[np.ndarray, np.ndarray, Tensor]:
    ids = np.asarray(tgt_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ValidationError(f"target ids must be (T,) or (B, T), got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise ValidationError(
            f"target ids must lie in [0, {model.config.vocab_size}), got range "
            f"[{ids.min()}, {ids.max()}]"
        )
    t_pad = ids == PAD_ID
    emb = T.mul(T.embedding(model.token_embedding, ids), math.sqrt(model.config.d_model))
    return ids, t_pad, emb


def _check_variant(model: Model, expected: str) -> None:
    if model.config.variant != expected:
        raise ConfigurationError(f"model variant is {model.config.variant!r}, expected {expected!r}")


def _output_logits(model: Model, x: Tensor) -> Tensor:
    h = model.decoder_norm(x)
    if model.config.tie_output_embedding:
        return T.matmul(h, T.transpose2d(model.token_embedding))
    return T.add(T.matmul(h, model.out_w), model.out_b)


def _baseline_stack(model, enc_states, enc_pad, tgt_ids, drop, layers, memories=None):
    """Shared baseline/ablation decoder loop; `memories` overrides per-layer memory."""
    ids, t_pad, emb = _prep_targets(model, tgt_ids)
    enc_b, _ = L._batched(enc_states if isinstance(enc_states, Tensor) else Tensor(enc_states))
    bsz, s_len, d = enc_b.shape
    s_pad = _as_bool_pad(enc_pad, s_len, bsz)
    t_len = ids.shape[1]
    x = T.add(emb, L.sinusoidal_positions(t_len, d, 0))
    causal = np.stack([_cached_causal_mask(t_len, t_pad[b]) for b in range(bsz)])[:, None, :, :]
    mem_mask = np.stack([_cached_padding_mask(s_len, s_pad[b]) for b in range(bsz)])[:, None, None, :]
    for i, layer in enumerate(layers):
        memory = enc_b if memories is None else memories[i]
        x = L.baseline_decoder_layer(x, memory, layer, causal, mem_mask, drop)
    return _output_logits(model, x)


def decode_train_baseline(model: Model, enc_states, enc_pad, tgt_ids, drop=None) -> Tensor:
    """Causal self-attention -> cross-attention over static memory -> FFN."""
    _check_variant(model, "baseline")
    single = np.asarray(tgt_ids).ndim == 1
    logits = _baseline_stack(model, enc_states, enc_pad, tgt_ids, drop, model.decoder_layers)
    return T.reshape(logits, logits.shape[1:]) if single else logits


def decode_train_static_ablation(model: Model, enc_states, enc_pad, tgt_ids, drop=None) -> Tensor:
    """Baseline decoder over a memory refreshed by one extra self-attention
    block per decoder layer; the memory never reads target states."""
    _check_variant(model, "static_ablation")
    single = np.asarray(tgt_ids).ndim == 1
    enc_b, _ = L._batched(enc_states if isinstance(enc_states, Tensor) else Tensor(enc_states))
    bsz, s_len, _ = enc_b.shape
    s_pad = _as_bool_pad(enc_pad, s_len, bsz)
    key_mask = np.stack([_cached_padding_mask(s_len, s_pad[b]) for b in range(bsz)])[:, None, None, :]
    memories = []
    memory = enc_b
    for block in model.memory_refresh:
        h = L.multi_head_attention(block.norm(memory), block.norm(memory), block.attn, key_mask)
        memory = T.add(memory, h if drop is None else drop(h))
        memories.append(memory)
    logits = _baseline_stack(model, enc_states, enc_pad, tgt_ids, drop, model.decoder_layers, memories)
    return T.reshape(logits, logits.shape[1:]) if single else logits


def _adaptive_pass(
    model: Model,
    enc_states,
    enc_pad,
    tgt_ids=None,
    drop=None,
    collect_kv: list | None = None,
    collect_rows: list | None = None,
):
    """Run the mixed-attention decoder; tgt_ids=None processes the audio
    track alone (identical audio computation either way)."""
    enc_b, _ = L._batched(enc_states if isinstance(enc_states, Tensor) else Tensor(enc_states))
    bsz, s_len, d = enc_b.shape
    s_pad = _as_bool_pad(enc_pad, s_len, bsz)
    c = model.config

    if tgt_ids is not None:
        ids = np.asarray(tgt_ids)
        single = ids.ndim == 1
        ids, t_pad, emb = _prep_targets(model, tgt_ids)
        emb_b, _ = L._batched(emb)
        t_len = ids.shape[1]
        mask_pairs = [
            _cached_stma_mask(s_len, t_len, s_pad[b], t_pad[b]) for b in range(bsz)
        ]
        m_ss = np.stack([m.m_ss for m in mask_pairs])[:, None, :, :]
        m_t_all = np.stack([m.target_rows for m in mask_pairs])[:, None, :, :]
        s_true = (~s_pad).sum(axis=1)
        src, tgt = L.modality_position_split(
            enc_b, emb_b, model.modality, c.position_restart_at_text, tgt_offsets=s_true
        )
    else:
        single = False
        # audio-only: the audio half of the full mask, padded key columns NEG
        m_ss = np.stack(
            [np.broadcast_to(_cached_padding_mask(s_len, s_pad[b]), (s_len, s_len)) for b in range(bsz)]
        )[:, None, :, :]
        m_t_all = None
        tgt = None
        src = T.add(enc_b, L.sinusoidal_positions(s_len, d, 0))
        if model.modality is not None:
            src = T.add(src, T.slice_tensor(model.modality.table, (slice(0, 1),)))

    for layer in model.decoder_layers:
        if collect_rows is not None:
            collect_rows.append(src.data)
        src, tgt = L.adaptive_decoder_layer(src, tgt, layer, m_ss, m_t_all, drop, collect_kv)
    return src, tgt, single


def decode_train_adaptive(model: Model, enc_states, enc_pad, tgt_ids, drop=None) -> Tensor:
    """Concatenated audio+text decoding; logits read from the text rows only."""
    _check_variant(model, "adaptive")
    _, tgt, single = _adaptive_pass(model, enc_states, enc_pad, tgt_ids, drop)
    logits = _output_logits(model, tgt)
    return T.reshape(logits, logits.shape[1:]) if single else logits


_DECODERS = {
    "baseline": decode_train_baseline,
    "adaptive": decode_train_adaptive,
    "static_ablation": decode_train_static_ablation,
}


def decode_train(model: Model, enc_states, enc_pad, tgt_ids, drop=None) -> Tensor:
    return _DECODERS[model.config.variant](model, enc_states, enc_pad, tgt_ids, drop)


def forward_logits(model: Model, features, feature_pad=None, tgt_ids=None, drop=None) -> Tensor:
    enc, s_pad = encode(model, features, feature_pad, drop)
    return decode_train(model, enc, s_pad, tgt_ids, drop)


def teacher_forced_acoustic_rows(model: Model, enc_states, enc_pad, tgt_ids) -> list[np.ndarray]:
    """Per-layer audio rows entering each decoder layer of a full pass."""
    _check_variant(model, "adaptive")
    rows: list[np.ndarray] = []
    _adaptive_pass(model, enc_states, enc_pad, tgt_ids, collect_rows=rows)
    return rows


# ---------------------------------------------------------------------------
# parameter audit
# ---------------------------------------------------------------------------

_COMPONENT_PREFIXES = (
    ("subsampler", "subsampler"),
    ("encoder", "encoder"),
    ("memory_refresh", "memory_refresh"),
    ("decoder", "decoder"),
    ("token_embedding", "embeddings"),
    ("modality", "embeddings"),
    ("output", "output_head"),
)


def param_count(model: Model) -> dict[str, int]:
    """Exact element counts per component plus 'total'."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters().items():
        for prefix, component in _COMPONENT_PREFIXES:
            if name == prefix or name.startswith(prefix + "."):
                counts[component] = counts.get(component, 0) + p.size
                break
        else:
            raise ContractError(f"parameter {name} has no component mapping")
    counts["total"] = sum(counts.values())
    return counts


def baseline_minus_adaptive_delta(n_dec_layers: int, d_model: int) -> int:
    """Closed-form parameter saving: one attention block and one norm per
    decoder layer, minus the 2 x d modality table."""
    d = d_model
    return n_dec_layers * (4 * d * d + 6 * d) - 2 * d


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CONFIG_DEFAULTS = ModelConfig()

_CONFIG_PARSERS = {
    str: str,
    int: int,
    float: float,
    bool: lambda s: {"true": True, "false": False}[s.lower()],
}


def save_checkpoint(model: Model, path: str) -> None:
    """Write manifest.txt (key = value) plus a little-endian weights blob."""
    os.makedirs(path, exist_ok=True)
    named = model.named_parameters()
    lines = [f"format_version = {CHECKPOINT_FORMAT_VERSION}"]
    for key, value in model.config.to_dict().items():
        lines.append(f"config.{key} = {value}")
    blob = bytearray()
    for i, (name, p) in enumerate(named.items()):
        arr = p.data
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        offset = len(blob)
        blob.extend(le.tobytes(order="C"))
        shape = ",".join(str(s) for s in arr.shape) if arr.ndim else "scalar"
        lines.append(f"tensor.{i} = {name} {shape} {arr.dtype.name} {offset}")
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, WEIGHTS_NAME), "wb") as fh:
        fh.write(bytes(blob))


def _parse_manifest(path: str) -> tuple[int, dict, list[tuple[str, tuple, str, int]]]:
    manifest = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise CheckpointFormatError(f"missing {MANIFEST_NAME} under {path}")
    version = None
    config_raw: dict[str, str] = {}
    tensors: list[tuple[str, tuple, str, int]] = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise CheckpointFormatError(f"manifest line {lineno} is not key = value: {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "format_version":
                version = int(value)
            elif key.startswith("config."):
                config_raw[key[len("config."):]] = value
            elif key.startswith("tensor."):
                parts = value.split()
                if len(parts) != 4:
                    raise CheckpointFormatError(f"bad tensor entry on line {lineno}: {value!r}")
                name, shape_s, dtype_s, offset_s = parts
                shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
                tensors.append((name, shape, dtype_s, int(offset_s)))
            else:
                raise CheckpointFormatError(f"unknown manifest key {key!r} on line {lineno}")
    if version is None:
        raise CheckpointFormatError("manifest missing format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} unsupported (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return version, config_raw, tensors


def load_checkpoint(path: str, seed: int = 0) -> Model:
    """Rebuild a Model from a checkpoint directory; parameters load at the
    current run precision."""
    _, config_raw, tensor_entries = _parse_manifest(path)
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    cfg_kwargs = {}
    for key, raw in config_raw.items():
        if key not in fields:
            raise CheckpointFormatError(f"unknown config key {key!r} in manifest")
        cfg_kwargs[key] = _CONFIG_PARSERS[type(getattr(_CONFIG_DEFAULTS, key))](raw)
    config = ModelConfig.from_dict(cfg_kwargs)
    model = build_model(config, seed=seed)
    named = model.named_parameters()
    if len(named) != len(tensor_entries):
        raise CheckpointShapeError(
            f"manifest lists {len(tensor_entries)} tensors, model has {len(named)}"
        )
    blob_path = os.path.join(path, WEIGHTS_NAME)
    if not os.path.exists(blob_path):
        raise CheckpointFormatError(f"missing {WEIGHTS_NAME} under {path}")
    blob = open(blob_path, "rb").read()
    for name, shape, dtype_s, offset in tensor_entries:
        if name not in named:
            raise CheckpointShapeError(f"manifest tensor {name!r} not present in rebuilt model")
        p = named[name]
        if tuple(shape) != tuple(p.data.shape):
            raise CheckpointShapeError(
                f"tensor {name!r} has stored shape {shape}, config implies {p.data.shape}"
            )
        dt = np.dtype(dtype_s).newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if shape else dt.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointFormatError(
                f"tensor {name!r} overruns blob (offset {offset}, {nbytes} bytes, blob {len(blob)})"
            )
        arr = np.frombuffer(blob, dtype=dt, count=max(1, int(np.prod(shape, dtype=np.int64))), offset=offset)
        p.data = arr.reshape(shape).astype(T.default_dtype())
    return model
