"""Biaffine arc and relation scoring applied directly to encoder outputs.

For dependents ``X`` (N x H) and head candidates ``X'`` ((N+1) x H, row 0 is
the root)::

    Y_arc[i, j]    = x_i W_arc x'_j + b_arc . x'_j
    Y_rel[i, j, r] = x_i W_rel[:, :, r] x'_j + b_rel[:, r] . x'_j

There are no dependent- or head-specific projections between the encoder and
the biaffine products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import DimensionError, Tensor


@dataclass
class ParseScores:
    arc: Tensor  # N x (N+1)
    rel: Tensor  # N x (N+1) x R


class BiaffineParams:
    """Parser weights. The bilinear tensors start at zero by default so that
    the untrained parser scores every arc and label equally; ``init`` picks
    another scheme (e.g. ``"xavier_uniform"``)."""

    def __init__(self, hidden: int, num_rels: int, seed: int = 0, init: str = "zeros"):
        if num_rels < 1:
            raise ValueError("need at least one relation class")
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        self.num_rels = num_rels
        self.params = {
            "parse/W_arc": tc.init_param((hidden, hidden), init, rng),
            "parse/b_arc": tc.init_param((hidden,), "zeros", rng),
            "parse/W_rel": tc.init_param((hidden, hidden, num_rels), init, rng),
            "parse/b_rel": tc.init_param((hidden, num_rels), "zeros", rng),
        }

    @property
    def W_arc(self) -> Tensor:
        return self.params["parse/W_arc"]

    @property
    def b_arc(self) -> Tensor:
        return self.params["parse/b_arc"]

    @property
    def W_rel(self) -> Tensor:
        return self.params["parse/W_rel"]

    @property
    def b_rel(self) -> Tensor:
        return self.params["parse/b_rel"]


def _check_inputs(X: Tensor, Xh: Tensor, H: int) -> int:
    if X.ndim != 2 or Xh.ndim != 2:
        raise DimensionError(f"biaffine: expected matrices, got {X.shape} and {Xh.shape}")
    N = X.shape[0]
    if Xh.shape[0] != N + 1 or X.shape[1] != H or Xh.shape[1] != H:
        raise DimensionError(
            f"biaffine: X {X.shape} and X' {Xh.shape} do not match N x {H} / (N+1) x {H}")
    return N


def score_arcs(X: Tensor, Xh: Tensor, params: BiaffineParams) -> Tensor:
    _check_inputs(X, Xh, params.hidden)
    bilinear = (X @ params.W_arc) @ tc.transpose(Xh)
    head_bias = tc.reshape(Xh @ params.b_arc, (1, Xh.shape[0]))
    return bilinear + head_bias


def score_rels(X: Tensor, Xh: Tensor, params: BiaffineParams) -> Tensor:
    N = _check_inputs(X, Xh, params.hidden)
    H, R = params.hidden, params.num_rels
    left = tc.reshape(X @ tc.reshape(params.W_rel, (H, H * R)), (N, H, R))
    left = tc.transpose(left, (2, 0, 1))                       # R x N x H
    bilinear = tc.transpose(left @ tc.transpose(Xh), (1, 2, 0))  # N x (N+1) x R
    head_bias = tc.reshape(Xh @ params.b_rel, (1, N + 1, R))
    return bilinear + head_bias


def score(X: Tensor, Xh: Tensor, params: BiaffineParams) -> ParseScores:
    return ParseScores(score_arcs(X, Xh, params), score_rels(X, Xh, params))


def parsing_loss(scores: ParseScores, gold_heads: Sequence[int], gold_rels: Sequence[int]) -> Tensor:
    """Arc cross-entropy over the N+1 head candidates plus relation
    cross-entropy read at the gold head column; both averaged over dependents."""
    N = scores.arc.shape[0]
    R = scores.rel.shape[2]
    heads = np.asarray(gold_heads, dtype=np.int64)
    rels = np.asarray(gold_rels, dtype=np.int64)
    if heads.shape != (N,) or rels.shape != (N,):
        raise DimensionError(f"parsing_loss: {N} dependents but {heads.shape[0]} heads / "
                             f"{rels.shape[0]} relations")
    if heads.min() < 0 or heads.max() > N:
        raise IndexError(f"gold head outside [0, {N}]")
    if rels.min() < 0 or rels.max() >= R:
        raise IndexError(f"gold relation outside [0, {R})")
    arc_loss = tc.cross_entropy(scores.arc, heads)
    rel_at_gold = tc.take(scores.rel, (np.arange(N), heads))  # N x R
    rel_loss = tc.cross_entropy(rel_at_gold, rels)
    return arc_loss + rel_loss
