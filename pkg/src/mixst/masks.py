"""Additive attention masks.

The concatenated audio+text decoder uses one (S+T)x(S+T) block matrix per
utterance: audio rows see non-padded audio, text rows see non-padded audio
plus their causal text prefix, and the audio-to-text block is always fully
masked. The masking constant is a large finite negative so max-subtracted
softmax stays NaN-free while masked weights underflow to exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import ValidationError

NEG = -1.0e9


def _check_pad(length: int, pad, what: str) -> np.ndarray:
    if length < 1:
        raise ValidationError(f"{what} length must be >= 1, got {length}")
    if pad is None:
        return np.zeros(length, dtype=bool)
    pad = np.asarray(pad, dtype=bool)
    if pad.shape != (length,):
        raise ValidationError(f"{what} pad list has shape {pad.shape}, expected ({length},)")
    if pad.all():
        raise ValidationError(f"{what} sequence is entirely padded")
    return pad


@dataclass(frozen=True)
class MaskMatrix:
    """Additive mask over a concatenated (audio ++ text) sequence.

    Attributes:
        s_len: number of audio positions S.
        t_len: number of text positions T.
        values: (S+T, S+T) array over {0, NEG}; read-only.
    """

    s_len: int
    t_len: int
    values: np.ndarray

    @property
    def m_ss(self) -> np.ndarray:
        return self.values[: self.s_len, : self.s_len]

    @property
    def m_st(self) -> np.ndarray:
        return self.values[: self.s_len, self.s_len :]

    @property
    def m_ts(self) -> np.ndarray:
        return self.values[self.s_len :, : self.s_len]

    @property
    def m_tt(self) -> np.ndarray:
        return self.values[self.s_len :, self.s_len :]

    @property
    def target_rows(self) -> np.ndarray:
        """The (T, S+T) bottom row block [m_ts | m_tt]."""
        return self.values[self.s_len :, :]


def build_stma_mask(s_len: int, t_len: int, s_pad=None, t_pad=None) -> MaskMatrix:
    """Build the four-block decoder mask for S audio and T text positions.

    Audio rows: 0 at non-padded audio key columns, NEG at padded ones and at
    every text column. Non-padded text rows: 0 at non-padded audio columns
    and at non-padded text columns <= own position. Padded text rows keep
    self-visibility only, so no softmax row is ever fully masked.
    """
    s_pad = _check_pad(s_len, s_pad, "audio")
    t_pad = _check_pad(t_len, t_pad, "text")
    n = s_len + t_len
    values = np.full((n, n), NEG, dtype=tensor.default_dtype())

    audio_visible = ~s_pad
    values[:s_len, :s_len][:, audio_visible] = 0.0

    for i in range(t_len):
        row = s_len + i
        if t_pad[i]:
            values[row, row] = 0.0
            continue
        values[row, :s_len][audio_visible] = 0.0
        for j in range(i + 1):
            if not t_pad[j]:
                values[row, s_len + j] = 0.0

    values.setflags(write=False)
    return MaskMatrix(s_len=s_len, t_len=t_len, values=values)


def build_causal_mask(t_len: int, t_pad=None) -> np.ndarray:
    """(T, T) look-ahead mask: row i sees non-padded columns j <= i.

    Padded query rows keep self-visibility only.
    """
    t_pad = _check_pad(t_len, t_pad, "text")
    values = np.full((t_len, t_len), NEG, dtype=tensor.default_dtype())
    for i in range(t_len):
        if t_pad[i]:
            values[i, i] = 0.0
            continue
        for j in range(i + 1):
            if not t_pad[j]:
                values[i, j] = 0.0
    return values


def build_padding_mask(s_len: int, s_pad) -> np.ndarray:
    """Row-broadcastable (S,) additive key mask: 0 real, NEG padded."""
    s_pad = _check_pad(s_len, s_pad, "sequence")
    values = np.where(s_pad, NEG, 0.0).astype(tensor.default_dtype())
    return values
