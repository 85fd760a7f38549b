"""Downstream heads (sequence and multiple-choice classification) and the
masked-LM head with its masking procedure."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor
from .tokenizer import CLS, MASK, PAD, SEP, SPECIALS, Vocab


class SeqcParams:
    """Softmax classifier over C labels on the sequence-start vector."""

    def __init__(self, hidden: int, num_labels: int, seed: int = 0):
        if num_labels < 2:
            raise ValueError("sequence classification needs at least 2 labels")
        rng = np.random.default_rng(seed)
        self.num_labels = num_labels
        self.params = {
            "seqc/W_sc": tc.init_param((hidden, num_labels), "xavier_uniform", rng),
            "seqc/b_sc": tc.init_param((num_labels,), "zeros", rng),
        }


class MccParams:
    """Scalar answer scorer ``W_o tanh(W_h x + b_h)``; size does not depend on K."""

    def __init__(self, hidden: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = {
            "mcc/W_h": tc.init_param((hidden, hidden), "xavier_uniform", rng),
            "mcc/b_h": tc.init_param((hidden,), "zeros", rng),
            "mcc/W_o": tc.init_param((1, hidden), "xavier_uniform", rng),
        }


class MlmParams:
    """Linear classifier from hidden states to the subword vocabulary."""

    def __init__(self, hidden: int, vocab_size: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.params = {
            "mlm/W": tc.init_param((hidden, vocab_size), "xavier_uniform", rng),
            "mlm/b": tc.init_param((vocab_size,), "zeros", rng),
        }


def seqc_logits(x_cls: Tensor, params: SeqcParams) -> Tensor:
    return x_cls @ params.params["seqc/W_sc"] + params.params["seqc/b_sc"]


def seqc_forward(x_cls: Tensor, params: SeqcParams) -> Tensor:
    return tc.softmax(seqc_logits(x_cls, params), axis=-1)


def mcc_scores(x_cls: Sequence[Tensor] | Tensor, params: MccParams) -> Tensor:
    """One score per answer; ``x_cls`` stacks the K sequence-start vectors (K x H)."""
    if not isinstance(x_cls, Tensor):
        x_cls = tc.concat_rows([tc.reshape(x, (1, -1)) for x in x_cls])
    p = params.params
    hidden = tc.tanh(x_cls @ tc.transpose(p["mcc/W_h"]) + p["mcc/b_h"])
    return tc.reshape(hidden @ tc.transpose(p["mcc/W_o"]), (x_cls.shape[0],))


def mcc_forward(x_cls: Sequence[Tensor] | Tensor, params: MccParams) -> Tensor:
    scores = mcc_scores(x_cls, params)
    if scores.shape[0] < 2:
        raise ValueError("multiple choice needs at least 2 answers")
    return tc.softmax(scores, axis=-1)


# ---------------------------------------------------------------------------
# Masked language modelling
# ---------------------------------------------------------------------------


@dataclass
class MlmBatch:
    ids: list[int]
    positions: list[int]
    targets: list[int]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mlm_mask(ids: Sequence[int], rate: float = 0.15,
             rng: np.random.Generator | None = None) -> MlmBatch:
    """Replace ``max(1, round(rate * m))`` of the m non-special positions by MASK."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"mask rate must lie in (0, 1], got {rate}")
    if rng is None:
        raise ValueError("mlm_mask needs an rng")
    maskable = [k for k, i in enumerate(ids) if i >= len(SPECIALS)]
    if not maskable:
        raise ValueError("sentence has no maskable positions")
    k = max(1, _round_half_up(rate * len(maskable)))
    chosen = sorted(int(x) for x in rng.choice(maskable, size=k, replace=False))
    masked = list(ids)
    for pos in chosen:
        masked[pos] = MASK
    return MlmBatch(masked, chosen, [ids[pos] for pos in chosen])


def mlm_logits(states: Tensor, params: MlmParams) -> Tensor:
    return states @ params.params["mlm/W"] + params.params["mlm/b"]


def mlm_loss(states_at_masks: Tensor, targets: Sequence[int], params: MlmParams) -> Tensor:
    """Mean cross-entropy over masked positions."""
    return tc.cross_entropy(mlm_logits(states_at_masks, params), targets)


# ---------------------------------------------------------------------------
# Paired inputs
# ---------------------------------------------------------------------------


def pair_encode(text_a: str | Sequence[str], text_b: str | Sequence[str], vocab: Vocab,
                max_len: int) -> tuple[list[int], list[int]]:
    """``[CLS] a [SEP] b [SEP]`` and segment ids (0 through the first SEP, then 1).

    On overflow ``b`` loses pieces from the right first, then ``a``; CLS and
    both SEPs always survive.
    """
    if max_len < 3:
        raise ValueError("max_len must leave room for CLS and two SEPs")
    words_a = text_a.split() if isinstance(text_a, str) else list(text_a)
    words_b = text_b.split() if isinstance(text_b, str) else list(text_b)
    a = [i for w in words_a for i in vocab.encode_word(w)]
    b = [i for w in words_b for i in vocab.encode_word(w)]
    room = max_len - 3
    if len(a) + len(b) > room:
        b = b[:max(0, room - len(a))]
        a = a[:room - len(b)]
    ids = [CLS] + a + [SEP] + b + [SEP]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    return ids, segments


def content_positions(ids: Sequence[int]) -> list[int]:
    """Positions that are not CLS, SEP or PAD."""
    return [k for k, i in enumerate(ids) if i not in (CLS, SEP, PAD)]
