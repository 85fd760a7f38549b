"""CoNLL-U reading, writing and tree validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

UNK_RELATION = "<unk>"


class ConlluError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Token:
    id: int
    form: str
    lemma: str = "_"
    upos: str = "_"
    xpos: str = "_"
    feats: str = "_"
    head: int = 0
    deprel: str = "_"
    deps: str = "_"
    misc: str = "_"

    def to_line(self) -> str:
        return "\t".join([str(self.id), self.form, self.lemma, self.upos, self.xpos,
                          self.feats, str(self.head), self.deprel, self.deps, self.misc])


@dataclass
class Sentence:
    tokens: list[Token]
    comments: list[str] = field(default_factory=list)
    # multiword ranges and empty nodes, keyed by how many tokens precede them
    extras: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def text(self) -> str | None:
        for c in self.comments:
            body = c[1:].strip()
            if body.startswith("text") and "=" in body:
                key, _, value = body.partition("=")
                if key.strip() == "text":
                    return value.strip()
        return None

    @property
    def words(self) -> list[str]:
        return [t.form for t in self.tokens]

    @property
    def heads(self) -> list[int]:
        return [t.head for t in self.tokens]

    @property
    def deprels(self) -> list[str]:
        return [t.deprel for t in self.tokens]


@dataclass(frozen=True)
class TreeCheck:
    is_single_root: bool
    is_acyclic: bool
    is_connected: bool

    @property
    def ok(self) -> bool:
        return self.is_single_root and self.is_acyclic and self.is_connected


def _parse_token(cols: list[str], lineno: int) -> Token:
    try:
        tid = int(cols[0])
    except ValueError:
        raise ConlluError(f"bad token id {cols[0]!r}", lineno) from None
    try:
        head = int(cols[6])
    except ValueError:
        raise ConlluError(f"non-integer head {cols[6]!r}", lineno) from None
    return Token(tid, cols[1], cols[2], cols[3], cols[4], cols[5], head, cols[7], cols[8], cols[9])


def parse_conllu(text: str) -> list[Sentence]:
    """Parse a CoNLL-U document.

    Range lines (``3-4``) and empty nodes (``5.1``) are kept in
    ``Sentence.extras`` so they can be written back, but are not tokens.
    """
    sentences: list[Sentence] = []
    tokens: list[Token] = []
    comments: list[str] = []
    extras: list[tuple[int, str]] = []
    start_line = 1

    def flush():
        nonlocal tokens, comments, extras
        if tokens or comments or extras:
            if not tokens:
                raise ConlluError("sentence without tokens", start_line)
            for k, tok in enumerate(tokens, start=1):
                if tok.id != k:
                    raise ConlluError(f"token ids not consecutive (expected {k}, got {tok.id})",
                                      start_line)
            sentences.append(Sentence(tokens, comments, extras))
        tokens, comments, extras = [], [], []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            flush()
            start_line = lineno + 1
            continue
        if line.startswith("#"):
            comments.append(line)
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConlluError(f"expected 10 tab-separated columns, got {len(cols)}", lineno)
        if "-" in cols[0] or "." in cols[0]:
            extras.append((len(tokens), line))
            continue
        tokens.append(_parse_token(cols, lineno))
    flush()
    return sentences


def serialize_conllu(sentences: Iterable[Sentence]) -> str:
    blocks = []
    for s in sentences:
        lines = list(s.comments)
        pending = sorted(s.extras, key=lambda e: e[0])
        k = 0
        for i, tok in enumerate(s.tokens):
            while k < len(pending) and pending[k][0] <= i:
                lines.append(pending[k][1])
                k += 1
            lines.append(tok.to_line())
        lines.extend(line for _, line in pending[k:])
        blocks.append("\n".join(lines) + "\n\n")
    return "".join(blocks)


def validate_heads(heads: Sequence[int]) -> TreeCheck:
    """Check a head vector (1-based heads, 0 = root) for tree-ness."""
    n = len(heads)
    if any(h < 0 or h > n for h in heads):
        return TreeCheck(sum(1 for h in heads if h == 0) == 1, False, False)
    single_root = sum(1 for h in heads if h == 0) == 1
    children: list[list[int]] = [[] for _ in range(n + 1)]
    for dep, h in enumerate(heads, start=1):
        children[h].append(dep)
    reached = {0}
    stack = [0]
    while stack:
        node = stack.pop()
        for c in children[node]:
            if c not in reached:
                reached.add(c)
                stack.append(c)
    connected = len(reached) == n + 1
    acyclic = True
    state = [0] * (n + 1)  # 0 unvisited, 1 on current path, 2 done
    state[0] = 2
    for start in range(1, n + 1):
        path = []
        node = start
        while state[node] == 0:
            state[node] = 1
            path.append(node)
            node = heads[node - 1]
        if state[node] == 1:
            acyclic = False
        for v in path:
            state[v] = 2
    return TreeCheck(single_root, acyclic, connected)


def validate_tree(s: Sentence) -> TreeCheck:
    return validate_heads(s.heads)


def filter_valid(sentences: Iterable[Sentence], strict: bool, source: str = "") -> list[Sentence]:
    """Strict: raise on the first malformed tree. Lenient: warn and drop it."""
    kept = []
    for k, s in enumerate(sentences):
        check = validate_tree(s)
        if check.ok:
            kept.append(s)
            continue
        msg = f"{source}sentence {k + 1} is not a single-rooted tree ({check})"
        if strict:
            raise ConlluError(msg)
        log.warning("skipping %s", msg)
    return kept


def read_treebank(path: str | Path, strict: bool = True) -> list[Sentence]:
    text = Path(path).read_text(encoding="utf-8")
    return filter_valid(parse_conllu(text), strict, source=f"{path}: ")


def write_treebank(path: str | Path, sentences: Iterable[Sentence]) -> None:
    Path(path).write_text(serialize_conllu(sentences), encoding="utf-8")


@dataclass(frozen=True)
class LabelInventory:
    """Sorted relation labels; index ``R`` is reserved for unseen labels."""

    relations: tuple[str, ...]

    @property
    def R(self) -> int:
        return len(self.relations)

    @property
    def num_classes(self) -> int:
        return len(self.relations) + 1

    @property
    def unk_index(self) -> int:
        return len(self.relations)

    def index(self, label: str) -> int:
        return self._lookup.get(label, self.unk_index)

    def label(self, index: int) -> str:
        return self.relations[index] if 0 <= index < self.R else UNK_RELATION

    @property
    def _lookup(self) -> dict[str, int]:
        cached = self.__dict__.get("_cache")
        if cached is None:
            cached = {r: i for i, r in enumerate(self.relations)}
            object.__setattr__(self, "_cache", cached)
        return cached


def build_label_inventory(train: Sequence[Sentence]) -> LabelInventory:
    if not train:
        raise ValueError("cannot build a label inventory from an empty training split")
    return LabelInventory(tuple(sorted({t.deprel for s in train for t in s.tokens})))
