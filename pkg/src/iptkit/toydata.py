"""Synthetic corpora generated from a small deterministic head grammar.

Sentences follow ``NP VERB [NP] [ADV]`` with ``NP = [DET] ADJ{0,2} NOUN``.
Attachments are fixed by the grammar: determiners and adjectives attach to
their noun (``det``, ``amod``), the subject and object nouns to the verb
(``nsubj``, ``obj``), adverbs to the verb (``advmod``), and the verb to the
root. Word classes use disjoint word lists, so gold trees are a deterministic
function of the word sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .treebank import Sentence, Token, serialize_conllu

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]
_CLASS_ENDINGS = {"DET": "e", "ADJ": "ic", "NOUN": "on", "VERB": "ed", "ADV": "ly"}


@dataclass
class Lexicon:
    words: dict[str, list[str]]

    @classmethod
    def generate(cls, rng: np.random.Generator, per_class: int = 12) -> "Lexicon":
        words: dict[str, list[str]] = {}
        taken: set[str] = set()
        for upos, ending in _CLASS_ENDINGS.items():
            n = 4 if upos == "DET" else per_class
            items = []
            while len(items) < n:
                syll = int(rng.integers(1, 3))
                stem = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syll))
                w = stem + ending
                if w not in taken:
                    taken.add(w)
                    items.append(w)
            words[upos] = items
        return cls(words)

    def pick(self, upos: str, rng: np.random.Generator) -> str:
        return str(rng.choice(self.words[upos]))


def _noun_phrase(lex: Lexicon, rng: np.random.Generator) -> list[tuple[str, str]]:
    phrase = []
    if rng.random() < 0.6:
        phrase.append((lex.pick("DET", rng), "DET"))
    for _ in range(int(rng.integers(0, 3))):
        phrase.append((lex.pick("ADJ", rng), "ADJ"))
    phrase.append((lex.pick("NOUN", rng), "NOUN"))
    return phrase


def generate_sentence(lex: Lexicon, rng: np.random.Generator, sent_id: str | None = None) -> Sentence:
    subj = _noun_phrase(lex, rng)
    verb = [(lex.pick("VERB", rng), "VERB")]
    obj = _noun_phrase(lex, rng) if rng.random() < 0.7 else []
    adv = [(lex.pick("ADV", rng), "ADV")] if rng.random() < 0.4 else []
    words = subj + verb + obj + adv
    verb_id = len(subj) + 1
    subj_noun = len(subj)
    obj_noun = verb_id + len(obj)
    tokens = []
    for k, (form, upos) in enumerate(words, start=1):
        if k <= len(subj):
            head, rel = (verb_id, "nsubj") if k == subj_noun else (subj_noun, upos_rel(upos))
        elif k == verb_id:
            head, rel = 0, "root"
        elif obj and k <= obj_noun:
            head, rel = (verb_id, "obj") if k == obj_noun else (obj_noun, upos_rel(upos))
        else:
            head, rel = verb_id, "advmod"
        tokens.append(Token(k, form, form, upos, "_", "_", head, rel, "_", "_"))
    comments = []
    if sent_id is not None:
        comments.append(f"# sent_id = {sent_id}")
    comments.append("# text = " + " ".join(w for w, _ in words))
    return Sentence(tokens, comments)


def upos_rel(upos: str) -> str:
    return {"DET": "det", "ADJ": "amod"}[upos]


def generate_treebank(n: int, seed: int = 0, lexicon: Lexicon | None = None,
                      prefix: str = "toy") -> list[Sentence]:
    rng = np.random.default_rng(seed)
    lex = lexicon or Lexicon.generate(np.random.default_rng(seed))
    return [generate_sentence(lex, rng, f"{prefix}-{k + 1}") for k in range(n)]


def random_attachment_uas(sentences) -> float:
    """Expected UAS (percent) when each word picks a head uniformly among N+1 candidates."""
    tokens = sum(len(s) for s in sentences)
    hits = sum(len(s) / (len(s) + 1) for s in sentences)
    return 100.0 * hits / tokens


# ---------------------------------------------------------------------------
# Toy downstream tasks
# ---------------------------------------------------------------------------


def _subject(s: Sentence) -> str:
    return next(t.form for t in s.tokens if t.deprel == "nsubj")


def _verb(s: Sentence) -> str:
    return next(t.form for t in s.tokens if t.deprel == "root")


def generate_seqc(n: int, seed: int, lexicon: Lexicon) -> list[dict]:
    """Three-way pair task: same sentence (0), subject swapped (1), verb swapped (2)."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        s = generate_sentence(lexicon, rng)
        words = s.words
        label = int(rng.integers(0, 3))
        other = list(words)
        if label:
            target = _subject(s) if label == 1 else _verb(s)
            upos = "NOUN" if label == 1 else "VERB"
            choices = [w for w in lexicon.words[upos] if w != target]
            other[words.index(target)] = str(rng.choice(choices))
        rows.append({"text_a": " ".join(words), "text_b": " ".join(other), "label": label})
    return rows


def generate_mcc(n: int, seed: int, lexicon: Lexicon, k: int = 3) -> list[dict]:
    """Pick the premise's subject noun among ``k`` candidate nouns."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        s = generate_sentence(lexicon, rng)
        subj = _subject(s)
        distractors = [w for w in lexicon.words["NOUN"] if w != subj]
        answers = [subj] + [str(w) for w in rng.choice(distractors, size=k - 1, replace=False)]
        order = rng.permutation(k)
        answers = [answers[i] for i in order]
        rows.append({"premise": " ".join(s.words), "question": "who",
                     "answers": answers, "correct": int(np.flatnonzero(order == 0)[0])})
    return rows


def write_toy_suite(out_dir: str | Path, seed: int = 0, n_train: int = 500, n_dev: int = 100,
                    n_test: int = 100, n_task: int = 300) -> dict[str, Path]:
    """Write treebank splits and both toy task formats; returns the file map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lex = Lexicon.generate(np.random.default_rng(seed))
    files: dict[str, Path] = {}
    splits = {"train": n_train, "dev": n_dev, "test": n_test}
    for k, (split, n) in enumerate(splits.items()):
        sents = generate_treebank(n, seed=seed * 1000 + k + 1, lexicon=lex, prefix=split)
        path = out / f"toy-{split}.conllu"
        path.write_text(serialize_conllu(sents), encoding="utf-8")
        files[f"treebank_{split}"] = path
    task_sizes = {"train": n_task, "dev": max(20, n_task // 5), "test": max(20, n_task // 5)}
    for k, (split, n) in enumerate(task_sizes.items()):
        for name, gen in (("seqc", generate_seqc), ("mcc", generate_mcc)):
            rows = gen(n, seed * 1000 + 10 * (k + 1) + (name == "mcc"), lex)
            path = out / f"{name}-{split}.jsonl"
            path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
            files[f"{name}_{split}"] = path
    return files
