"""Attachment scores, accuracy and masked-token accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .decode import PredictedTree
from .treebank import Sentence, validate_heads


@dataclass
class ParseEval:
    uas: float
    las: float
    tree_rate: float
    n_sentences: int
    n_tokens: int
    attached: int
    labeled: int

    def to_dict(self) -> dict:
        return asdict(self)

    def report(self) -> dict:
        """The evaluation report fields, percentages at one decimal."""
        return {"uas": round(self.uas, 1), "las": round(self.las, 1),
                "tree_rate": round(self.tree_rate, 1),
                "n_sentences": self.n_sentences, "n_tokens": self.n_tokens}


def _pred_arcs(pred) -> tuple[list[int], list[str | int] | None]:
    if isinstance(pred, Sentence):
        return pred.heads, pred.deprels
    if isinstance(pred, PredictedTree):
        return pred.heads, pred.rels
    heads, rels = pred
    return list(heads), (None if rels is None else list(rels))


def uas_las(preds: Sequence, golds: Sequence[Sentence], gold_rels: Sequence[Sequence[int]] | None = None) -> ParseEval:
    """Score predicted trees against gold sentences; every token counts.

    ``preds`` holds :class:`Sentence`, :class:`PredictedTree` or
    ``(heads, rels)`` pairs. Predicted relations are compared with gold deprel
    strings, or with ``gold_rels`` when given as indices.
    """
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predicted vs {len(golds)} gold sentences")
    total = attached = labeled = trees = 0
    for k, (pred, gold) in enumerate(zip(preds, golds)):
        heads, rels = _pred_arcs(pred)
        if len(heads) != len(gold):
            raise ValueError(f"sentence {k + 1}: {len(heads)} predicted vs {len(gold)} gold tokens")
        ref_rels = gold.deprels if gold_rels is None else list(gold_rels[k])
        for i, tok in enumerate(gold.tokens):
            total += 1
            if heads[i] == tok.head:
                attached += 1
                if rels is not None and rels[i] == ref_rels[i]:
                    labeled += 1
        trees += validate_heads(heads).ok
    if total == 0:
        raise ValueError("no tokens to evaluate")
    return ParseEval(100.0 * attached / total, 100.0 * labeled / total,
                     100.0 * trees / len(golds), len(golds), total, attached, labeled)


def accuracy(pred: Sequence, gold: Sequence) -> float:
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predictions vs {len(gold)} labels")
    if not gold:
        raise ValueError("accuracy of an empty set")
    return 100.0 * float(np.mean(np.asarray(pred) == np.asarray(gold)))


def mlm_accuracy(logits, targets: Sequence[int]) -> float:
    """Percent of masked positions whose argmax (first on ties) is the target."""
    logits = np.asarray(getattr(logits, "data", logits))
    if len(targets) == 0:
        raise ValueError("no masked positions")
    if logits.shape[0] != len(targets):
        raise ValueError(f"{logits.shape[0]} logit rows vs {len(targets)} targets")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == np.asarray(targets)))
