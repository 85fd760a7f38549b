"""Layer-wise linear CKA between encoder variants."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import Encoder
from .heads import content_positions
from .tensorcore import no_grad
from .tokenizer import Vocab, encode_words

REPORT_FORMAT = 1


def center_columns(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need a matrix with at least 2 rows, got shape {X.shape}")
    return X - X.mean(axis=0, keepdims=True)


def linear_cka(X1, X2) -> float:
    """||X2^T X1||_F^2 / (||X1^T X1||_F ||X2^T X2||_F) on column-centered inputs.

    Centering is applied here regardless of the caller; it is idempotent.
    """
    X1 = center_columns(X1)
    X2 = center_columns(X2)
    if X1.shape[0] != X2.shape[0]:
        raise ValueError(f"row counts differ: {X1.shape[0]} vs {X2.shape[0]}")
    if not (np.all(np.isfinite(X1)) and np.all(np.isfinite(X2))):
        raise ValueError("representations contain non-finite values")
    cross = np.linalg.norm(X2.T @ X1, "fro") ** 2
    self1 = np.linalg.norm(X1.T @ X1, "fro")
    self2 = np.linalg.norm(X2.T @ X2, "fro")
    if self1 == 0.0 or self2 == 0.0:
        raise ValueError("linear CKA undefined for a zero-variance representation")
    return float(cross / (self1 * self2))


def sentence_repr(states: Sequence, ids: Sequence[int], layer: int) -> np.ndarray:
    """Mean of one layer's subword vectors, leaving out CLS and SEP."""
    keep = content_positions(ids)
    if not keep:
        raise ValueError("sentence has no content subwords")
    if not 0 <= layer < len(states):
        raise IndexError(f"layer {layer} outside [0, {len(states) - 1}]")
    rows = np.asarray(getattr(states[layer], "data", states[layer]))
    return rows[keep].mean(axis=0)


def layer_matrices(encoder: Encoder, vocab: Vocab, sentences: Sequence[Sequence[str]]) -> list[np.ndarray]:
    """Per layer, the |S| x H matrix of sentence representations (eval mode)."""
    per_layer: list[list[np.ndarray]] = [[] for _ in range(encoder.config.layers + 1)]
    with no_grad():
        for words in sentences:
            ids, _ = encode_words(words, vocab)
            states = encoder.encode(ids, train=False)
            for layer in range(len(states)):
                per_layer[layer].append(sentence_repr(states, ids, layer))
    return [np.vstack(rows) for rows in per_layer]


def sentence_set_id(sentences: Sequence[Sequence[str]]) -> str:
    h = hashlib.sha1()
    for words in sentences:
        h.update("\x1f".join(words).encode("utf-8") + b"\x1e")
    return h.hexdigest()[:12]


@dataclass
class Variant:
    tag: str
    encoder: Encoder
    vocab: Vocab


@dataclass
class CkaReport:
    pairs: list[str]
    layers: list[int]
    scores: np.ndarray  # len(layers) x len(pairs)
    sentence_set: str = ""
    n_sentences: int = 0
    provenance: dict = field(default_factory=dict)

    def score(self, pair: str, layer: int) -> float:
        return float(self.scores[self.layers.index(layer), self.pairs.index(pair)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer"] + self.pairs)
        for k, layer in enumerate(self.layers):
            w.writerow([layer] + [repr(float(v)) for v in self.scores[k]])
        return buf.getvalue()

    def to_json(self) -> str:
        records = [{"layer": layer, "pair": pair, "cka": float(self.scores[k, j])}
                   for k, layer in enumerate(self.layers) for j, pair in enumerate(self.pairs)]
        return json.dumps({"format": REPORT_FORMAT, "sentence_set": self.sentence_set,
                           "n_sentences": self.n_sentences, "pairs": self.pairs,
                           "layers": self.layers, "records": records,
                           "provenance": self.provenance}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CkaReport":
        obj = json.loads(text)
        if obj.get("format") != REPORT_FORMAT:
            raise ValueError(f"unsupported CKA report format {obj.get('format')!r}")
        pairs, layers = obj["pairs"], obj["layers"]
        scores = np.full((len(layers), len(pairs)), np.nan)
        for rec in obj["records"]:
            scores[layers.index(rec["layer"]), pairs.index(rec["pair"])] = rec["cka"]
        return cls(pairs, layers, scores, obj["sentence_set"], obj["n_sentences"],
                   obj.get("provenance", {}))


def _check_compatible(a: Variant, b: Variant) -> None:
    if a.vocab.pieces != b.vocab.pieces:
        raise ValueError(f"variants {a.tag} and {b.tag} use different tokenizers")
    ca, cb = a.encoder.config, b.encoder.config
    if (ca.layers, ca.hidden) != (cb.layers, cb.hidden):
        raise ValueError(f"variants {a.tag} and {b.tag} differ in depth or width")


def cka_grid(variants: Sequence[Variant], pairs: Sequence[tuple[str, str]],
             sentences: Sequence[Sequence[str]]) -> CkaReport:
    """Scores for every layer (embeddings included) and every requested pair."""
    if len(sentences) < 2:
        raise ValueError("CKA needs at least 2 sentences")
    by_tag = {v.tag: v for v in variants}
    for a, b in pairs:
        _check_compatible(by_tag[a], by_tag[b])
    mats = {}
    for tag in dict.fromkeys(t for pair in pairs for t in pair):
        v = by_tag[tag]
        mats[tag] = layer_matrices(v.encoder, v.vocab, sentences)
    n_layers = len(next(iter(mats.values())))
    scores = np.array([[linear_cka(mats[a][layer], mats[b][layer]) for a, b in pairs]
                       for layer in range(n_layers)])
    return CkaReport([f"{a}-{b}" for a, b in pairs], list(range(n_layers)), scores,
                     sentence_set_id(sentences), len(sentences))


def layer_report(a: Variant, b: Variant, sentences: Sequence[Sequence[str]]) -> CkaReport:
    return cka_grid([a, b], [(a.tag, b.tag)], sentences)
