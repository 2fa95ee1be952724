"""Attention fusion: turning per-word attentions into per-token conditioning weights.

A caption word's weight combines its sentence attention (noun probability),
its audio attention (scaled down by ``noun_audio_scale`` for nouns so the
object emphasis dominates), and a bounded positional-encoding term.  Word
weights are scattered onto the word's encoder tokens; every token outside
the caption span keeps the neutral weight 1.0.  Modulating the text latent
with these weights is a per-token scalar broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    AttentionVector,
    BackendError,
    Caption,
    LatentConditioning,
    TensorBuffer,
    TokenWeights,
    ValidationError,
)
from .backends import TaggerBackend

POSITION_INDEX = "position_index"
ATTENTION_VALUE = "attention_value"
_PE_MODES = (POSITION_INDEX, ATTENTION_VALUE)


@dataclass(frozen=True)
class FusionConfig:
    """Knobs of the weight-assembly stage.

    positional_argument_mode selects what feeds the positional encoding:
    the word's 1-based position, or the word's own audio attention value.
    """

    noun_audio_scale: float = 0.1
    noun_threshold: float = 0.5
    positional_argument_mode: str = POSITION_INDEX

    def __post_init__(self):
        if self.noun_audio_scale < 0:
            raise ValidationError("noun_audio_scale must be non-negative")
        if not (0.0 <= self.noun_threshold <= 1.0):
            raise ValidationError("noun_threshold must lie in [0, 1]")
        if self.positional_argument_mode not in _PE_MODES:
            raise ValidationError(
                f"positional_argument_mode must be one of {_PE_MODES}, "
                f"got {self.positional_argument_mode!r}"
            )


def positional_encoding(x):
    """Bounded logistic ramp 1 / (2 + exp(2 - 0.5 x)).

    Strictly increasing, with range the open interval (0, 0.5). Accepts a
    scalar or an ndarray.
    """
    arr = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = 1.0 / (2.0 + np.exp(2.0 - 0.5 * arr))
    if np.ndim(x) == 0:
        return float(out)
    return out


def fuse_token_weight(s: float, a: float, pe_arg: float, is_noun: bool, cfg: FusionConfig) -> float:
    """Combine one word's sentence attention, audio attention and positional term.

    Nouns take ``noun_audio_scale * a``; non-nouns take the full audio value.
    """
    if not (0.0 <= s <= 1.0) or not (0.0 <= a <= 1.0):
        raise ValidationError(f"attention values must lie in [0, 1], got s={s}, a={a}")
    audio_term = cfg.noun_audio_scale * a if is_noun else a
    return s + audio_term + positional_encoding(pe_arg)


def sentence_attention(caption: Caption, tagger: TaggerBackend) -> AttentionVector:
    """Per-word noun probabilities from the tagger, packaged as attention."""
    if len(caption.words) == 0:
        raise ValidationError("caption has no words")
    try:
        probs = tagger.noun_probabilities(caption.words)
    except Exception as exc:
        raise BackendError(f"tagger: {exc}") from exc
    probs = list(probs)
    if len(probs) != len(caption.words):
        raise BackendError(
            f"tagger: returned {len(probs)} probabilities for {len(caption.words)} words"
        )
    return AttentionVector("sentence", np.asarray(probs, dtype=np.float64))


def positional_arguments(
    caption: Caption, audio_attn: AttentionVector, cfg: FusionConfig
) -> np.ndarray:
    """Per-word argument fed to the positional encoding, per the config mode."""
    if cfg.positional_argument_mode == POSITION_INDEX:
        return np.arange(1, len(caption.words) + 1, dtype=np.float64)
    return np.asarray(audio_attn.values, dtype=np.float64)


def scatter_word_weights(
    caption: Caption,
    word_weights: Sequence[float],
    noun_flags: Sequence[bool],
    encoder_token_count: int,
) -> TokenWeights:
    """Copy each word's scalar weight onto its encoder tokens.

    Unaligned tokens (markers, padding, user-prompt text) stay at the
    neutral weight 1.0 and belong to neither optimization group.
    """
    if len(word_weights) != len(caption.words) or len(noun_flags) != len(caption.words):
        raise ValidationError("per-word weights and flags must match the caption length")
    n = int(encoder_token_count)
    weights = np.ones(n, dtype=np.float64)
    noun_mask = np.zeros(n, dtype=bool)
    caption_mask = np.zeros(n, dtype=bool)
    for word_idx, token_idxs in enumerate(caption.encoder_alignment):
        for tok in token_idxs:
            if tok >= n:
                raise ValidationError(
                    f"alignment index {tok} out of range for {n} encoder tokens"
                )
            weights[tok] = float(word_weights[word_idx])
            caption_mask[tok] = True
            noun_mask[tok] = bool(noun_flags[word_idx])
    return TokenWeights(
        weights=weights,
        noun_mask=noun_mask,
        caption_mask=caption_mask,
        caption_token_count=int(caption_mask.sum()),
    )


def assemble_token_weights(
    caption: Caption,
    audio_attn: AttentionVector,
    sent_attn: AttentionVector,
    cfg: FusionConfig,
    encoder_token_count: int,
) -> TokenWeights:
    """Build the initial per-token weight vector from both attentions.

    Noun and non-noun words get their group's fusion rule, then the word
    weights are scattered back into encoder-token order (the stack of the
    two groups followed by the reshape to token layout).
    """
    n_words = len(caption.words)
    if len(audio_attn) != n_words or len(sent_attn) != n_words:
        raise ValidationError(
            f"attention lengths ({len(audio_attn)}, {len(sent_attn)}) "
            f"must equal the caption word count {n_words}"
        )
    noun_flags = caption.noun_flags(cfg.noun_threshold)
    pe_args = positional_arguments(caption, audio_attn, cfg)
    word_weights = [
        fuse_token_weight(
            float(sent_attn.values[i]),
            float(audio_attn.values[i]),
            float(pe_args[i]),
            noun_flags[i],
            cfg,
        )
        for i in range(n_words)
    ]
    return scatter_word_weights(caption, word_weights, noun_flags, encoder_token_count)


def modulate(z: LatentConditioning, w: TokenWeights) -> LatentConditioning:
    """Element-wise conditioning modulation: row i of z scaled by weights[i]."""
    if len(w) != z.token_count:
        raise ValidationError(
            f"weight length {len(w)} does not match conditioning token count {z.token_count}"
        )
    scaled = z.array.astype(np.float64) * w.weights[:, None]
    return LatentConditioning(TensorBuffer.from_array(scaled.astype(np.float32)))
