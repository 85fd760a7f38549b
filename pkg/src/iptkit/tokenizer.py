"""Byte-level BPE applied word by word.

Words are encoded independently, so no piece ever spans two words and every
subword position maps back to exactly one word through :class:`Alignment`.
Byte pieces are stored as the latin-1 character of the byte; specials use
characters above U+00FF and cannot collide with learned pieces.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

PAD, CLS, SEP, UNK, MASK = range(5)
SPECIALS = ("⟨pad⟩", "⟨cls⟩", "⟨sep⟩", "⟨unk⟩", "⟨mask⟩")
VOCAB_FORMAT = 1
MIN_VOCAB = len(SPECIALS) + 256


def _byte_piece(b: int) -> str:
    return chr(b)


def _word_symbols(word: str) -> list[str]:
    return [_byte_piece(b) for b in word.encode("utf-8")]


@dataclass(frozen=True)
class Alignment:
    """``spans[w] = (start, end)``: subword positions of word ``w``, end exclusive."""

    spans: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.spans)

    def check(self, seq_len: int, offset: int = 1) -> None:
        pos = offset
        for w, (start, end) in enumerate(self.spans):
            if start != pos or end <= start:
                raise ValueError(f"span {w} = [{start}, {end}) breaks the partition at {pos}")
            pos = end
        if pos > seq_len:
            raise ValueError(f"spans reach {pos} beyond sequence length {seq_len}")


@dataclass
class Vocab:
    pieces: list[str]
    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.index = {p: i for i, p in enumerate(self.pieces)}
        if len(self.index) != len(self.pieces):
            raise ValueError("vocabulary pieces are not unique")
        if tuple(self.pieces[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("special pieces must occupy indices 0-4")
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def specials(self) -> dict[str, int]:
        return {"pad": PAD, "cls": CLS, "sep": SEP, "unk": UNK, "mask": MASK}

    def encode_word(self, word: str) -> list[int]:
        ids = self._cache.get(word)
        if ids is None:
            syms = _word_symbols(word)
            while len(syms) > 1:
                best = min(range(len(syms) - 1),
                           key=lambda k: self.ranks.get((syms[k], syms[k + 1]), float("inf")))
                pair = (syms[best], syms[best + 1])
                if pair not in self.ranks:
                    break
                syms = _merge(syms, pair)
            # an empty word still owns one position
            ids = [self.index.get(s, UNK) for s in syms] or [UNK]
            self._cache[word] = ids
        return list(ids)

    def to_json(self) -> str:
        return json.dumps({"format": VOCAB_FORMAT, "specials": list(SPECIALS),
                           "pieces": self.pieces, "merges": [list(m) for m in self.merges]},
                          ensure_ascii=True, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        obj = json.loads(text)
        if obj.get("format") != VOCAB_FORMAT:
            raise ValueError(f"unsupported vocabulary format {obj.get('format')!r}")
        if tuple(obj["specials"]) != SPECIALS:
            raise ValueError("vocabulary specials do not match this tokenizer")
        return cls(list(obj["pieces"]), [tuple(m) for m in obj["merges"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _merge(syms: list[str], pair: tuple[str, str]) -> list[str]:
    out = []
    k = 0
    while k < len(syms):
        if k + 1 < len(syms) and syms[k] == pair[0] and syms[k + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            k += 2
        else:
            out.append(syms[k])
            k += 1
    return out


def train_bpe(corpus: Sequence[Sequence[str]], vocab_size: int = 8000) -> Vocab:
    """Learn merges until the vocabulary holds ``vocab_size`` pieces or no pair is left.

    The most frequent adjacent pair wins; ties go to the lexicographically
    smallest pair.
    """
    if vocab_size < MIN_VOCAB:
        raise ValueError(f"vocab_size must be at least {MIN_VOCAB}")
    freq = Counter(w for sent in corpus for w in sent)
    if not freq:
        raise ValueError("cannot train BPE on an empty corpus")
    pieces = list(SPECIALS) + [_byte_piece(b) for b in range(256)]
    known = set(pieces)
    merges: list[tuple[str, str]] = []
    words = [(_word_symbols(w), n) for w, n in sorted(freq.items())]
    while len(pieces) < vocab_size:
        pairs: Counter = Counter()
        for syms, n in words:
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += n
        if not pairs:
            break
        top = max(pairs.values())
        pair = min(p for p, c in pairs.items() if c == top)
        merges.append(pair)
        joined = pair[0] + pair[1]
        if joined not in known:
            known.add(joined)
            pieces.append(joined)
        words = [(_merge(syms, pair) if len(syms) > 1 else syms, n) for syms, n in words]
    return Vocab(pieces, merges)


def encode_words(words: Sequence[str], vocab: Vocab) -> tuple[list[int], Alignment]:
    """``[CLS] pieces(w_1) ... pieces(w_N) [SEP]`` with one span per word."""
    ids = [CLS]
    spans = []
    for w in words:
        start = len(ids)
        ids.extend(vocab.encode_word(w))
        spans.append((start, len(ids)))
    ids.append(SEP)
    return ids, Alignment(tuple(spans))


def _piece_bytes(i: int, vocab: Vocab) -> bytes:
    return bytes(ord(c) for c in vocab.pieces[i])


def decode(ids: Sequence[int], vocab: Vocab, alignment: Alignment | None = None) -> list[str]:
    """Map ids back to text; specials are dropped.

    With the alignment returned by :func:`encode_words` the result is the
    original word list. Without it, each non-special piece is decoded on its
    own (pieces that split a multi-byte character decode with replacement
    characters).
    """
    if alignment is None:
        return [_piece_bytes(i, vocab).decode("utf-8", errors="replace")
                for i in ids if i >= len(SPECIALS)]
    words = []
    for start, end in alignment.spans:
        raw = b"".join(_piece_bytes(i, vocab) for i in ids[start:end] if i >= len(SPECIALS))
        words.append(raw.decode("utf-8", errors="replace"))
    return words
