"""Training stages, early stopping, checkpoints and stage sequencing.

A stage trains the encoder together with one task head: dependency parsing
(IPT), masked-LM (ILMT) or a downstream classifier. Sequences chain stages so
that each starts from the encoder the previous one produced; intermediate
heads are discarded before the downstream stage.
"""

from __future__ import annotations

import copy
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .decode import decode_tree
from .encoder import AdapterConfig, Encoder, EncoderConfig, head_dropout, parser_inputs, pool_words
from .heads import (
    MccParams,
    MlmParams,
    SeqcParams,
    mcc_scores,
    mlm_logits,
    mlm_mask,
    pair_encode,
    seqc_logits,
)
from .metrics import ParseEval, accuracy, mlm_accuracy, uas_las
from .parsehead import BiaffineParams, parsing_loss, score
from .tensorcore import Tensor, container
from .tokenizer import Vocab, encode_words
from .treebank import LabelInventory, Sentence

log = logging.getLogger(__name__)

STAGES = ("base", "ipt", "ilmt", "downstream")
INTERMEDIATE = ("ipt", "ilmt")


class CheckpointError(ValueError):
    pass


def fork_seed(master: int, label: str) -> int:
    """Derive a stage seed from the master seed and a stage label."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(label.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# Schedule and early stopping
# ---------------------------------------------------------------------------


@dataclass
class TrainSchedule:
    max_epochs: int = 30
    batch_size: int = 8
    eval_every: int = 250
    patience: int = 10
    lr: float = 1e-5
    mode: str = "standard"
    max_steps: int | None = None

    def __post_init__(self):
        if self.eval_every < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("eval_every, patience and batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.mode not in ("standard", "adapter"):
            raise ValueError(f"mode must be 'standard' or 'adapter', got {self.mode!r}")

    @classmethod
    def for_task(cls, task: str, nli_like: bool = False, **overrides) -> "TrainSchedule":
        """Defaults per task: batches of 32 and U=500/250 for sequence
        classification, batches of 8 and U=250 for parsing, MLM and multiple choice."""
        base = {"batch_size": 32, "eval_every": 500 if nli_like else 250} if task == "seqc" else {}
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


def should_stop(history: Sequence[float], patience: int = 10) -> bool:
    """True iff none of the last ``patience`` losses beats the best loss before them."""
    if len(history) <= patience:
        return False
    best_before = min(history[:-patience])
    return not any(v < best_before for v in history[-patience:])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    stage: str
    encoder_config: dict
    arrays: dict[str, np.ndarray]
    adapter_config: dict | None = None
    vocab: dict | None = None
    rng_state: dict | None = None
    head: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage tag {self.stage!r}")

    @classmethod
    def from_model(cls, stage: str, encoder: Encoder, vocab: Vocab | None = None,
                   head_params: dict[str, Tensor] | None = None, head: dict | None = None,
                   rng: np.random.Generator | None = None, info: dict | None = None) -> "Checkpoint":
        arrays = encoder.state_dict()
        for name, t in (head_params or {}).items():
            arrays[name] = t.data.copy()
        return cls(stage, encoder.config.to_dict(), arrays,
                   None if encoder.adapter_config is None else encoder.adapter_config.to_dict(),
                   None if vocab is None else {"pieces": vocab.pieces, "merges": [list(m) for m in vocab.merges]},
                   None if rng is None else copy.deepcopy(rng.bit_generator.state),
                   dict(head or {}), dict(info or {}))

    def to_bytes(self) -> bytes:
        meta = {"stage": self.stage, "encoder_config": self.encoder_config,
                "adapter_config": self.adapter_config, "vocab": self.vocab,
                "rng_state": self.rng_state, "head": self.head, "info": self.info}
        return container.dumps(self.arrays, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        try:
            arrays, meta = container.loads(blob)
            return cls(meta["stage"], meta["encoder_config"], arrays, meta["adapter_config"],
                       meta["vocab"], meta["rng_state"], meta["head"], meta["info"])
        except container.ContainerError as exc:
            raise CheckpointError(str(exc)) from None
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"checkpoint metadata incomplete: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def build_encoder(self) -> Encoder:
        enc = Encoder(EncoderConfig(**self.encoder_config), seed=0)
        if self.adapter_config is not None:
            enc.inject_adapters(AdapterConfig(**self.adapter_config))
        enc.load_state_dict({n: a for n, a in self.arrays.items() if n.split("/")[0] in ("base", "adapter")})
        return enc

    def build_vocab(self) -> Vocab:
        if self.vocab is None:
            raise CheckpointError("checkpoint carries no vocabulary")
        return Vocab(list(self.vocab["pieces"]), [tuple(m) for m in self.vocab["merges"]])

    def head_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.arrays.items() if n.startswith(prefix + "/")}

    def rng(self) -> np.random.Generator:
        g = np.random.default_rng()
        if self.rng_state is not None:
            g.bit_generator.state = copy.deepcopy(self.rng_state)
        return g


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    ckpt.save(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.load(path)


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


def _final_state(encoder: Encoder, ids, segments, train: bool, rng) -> Tensor:
    state = encoder.encode(ids, segments, train=train, rng=rng)[-1]
    return head_dropout(state, encoder.config.dropout, rng, train)


def _load_head(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    for n, t in params.items():
        if n in arrays:
            t.data = np.array(arrays[n], dtype=np.float64)


class Task:
    """A head plus its train/dev/test examples."""

    kind = ""
    stage = ""
    prefix = ""
    params: dict[str, Tensor]
    train: list
    dev: list
    test: list

    def loss(self, encoder: Encoder, ex, train: bool, rng) -> Tensor:
        raise NotImplementedError

    def evaluate(self, encoder: Encoder, split: str = "test") -> dict[str, float]:
        raise NotImplementedError

    def head_meta(self) -> dict:
        return {"kind": self.kind}

    def dev_loss(self, encoder: Encoder) -> float:
        return self.mean_loss(encoder, self.dev)

    def mean_loss(self, encoder: Encoder, examples) -> float:
        if not examples:
            raise ValueError(f"{self.kind}: empty evaluation split")
        with tc.no_grad():
            return float(np.mean([self.loss(encoder, ex, False, None).item() for ex in examples]))


@dataclass
class ParseExample:
    ids: list[int]
    alignment: Any
    heads: list[int]
    rels: list[int]


class ParseTask(Task):
    kind = "parse"
    stage = "ipt"
    prefix = "parse"

    def __init__(self, vocab: Vocab, labels: LabelInventory, hidden: int, train: Sequence[Sentence],
                 dev: Sequence[Sentence], test: Sequence[Sentence] = (), seed: int = 0,
                 decode_mode: str = "greedy"):
        self.vocab = vocab
        self.labels = labels
        self.decode_mode = decode_mode
        self.head = BiaffineParams(hidden, labels.num_classes, seed=seed)
        self.params = self.head.params
        self.sentences = {"train": list(train), "dev": list(dev), "test": list(test)}
        self.train = [self.example(s) for s in train]
        self.dev = [self.example(s) for s in dev]
        self.test = [self.example(s) for s in test]

    def example(self, s: Sentence) -> ParseExample:
        ids, al = encode_words(s.words, self.vocab)
        return ParseExample(ids, al, s.heads, [self.labels.index(r) for r in s.deprels])

    def scores(self, encoder: Encoder, ids, alignment, train: bool = False, rng=None):
        state = _final_state(encoder, ids, None, train, rng)
        X = pool_words(state, alignment)
        return score(X, parser_inputs(state, X), self.head)

    def loss(self, encoder, ex: ParseExample, train, rng):
        return parsing_loss(self.scores(encoder, ex.ids, ex.alignment, train, rng), ex.heads, ex.rels)

    def predict(self, encoder: Encoder, words: Sequence[str], mode: str | None = None):
        ids, al = encode_words(words, self.vocab)
        with tc.no_grad():
            sc = self.scores(encoder, ids, al)
        return decode_tree(sc.arc, sc.rel, mode or self.decode_mode)

    def evaluate_parse(self, encoder: Encoder, split: str = "test", mode: str | None = None) -> ParseEval:
        examples = getattr(self, split)
        preds = []
        with tc.no_grad():
            for ex in examples:
                sc = self.scores(encoder, ex.ids, ex.alignment)
                preds.append(decode_tree(sc.arc, sc.rel, mode or self.decode_mode))
        return uas_las(preds, self.sentences[split], [ex.rels for ex in examples])

    def evaluate(self, encoder, split="test"):
        ev = self.evaluate_parse(encoder, split)
        return {"uas": ev.uas, "las": ev.las, "tree_rate": ev.tree_rate}

    def head_meta(self):
        return {"kind": self.kind, "relations": list(self.labels.relations)}


@dataclass
class MaskedExample:
    index: int
    ids: list[int]
    fixed: Any = None  # MlmBatch for dev/probe sets


class MlmTask(Task):
    """Masked-token prediction on subword sequences of whole sentences.

    Training sentences are re-masked each time they are drawn; dev sentences
    carry one fixed mask each, seeded by the sentence index.
    """

    kind = "mlm"
    stage = "ilmt"
    prefix = "mlm"

    def __init__(self, vocab: Vocab, hidden: int, train: Sequence[Sequence[str]],
                 dev: Sequence[Sequence[str]], test: Sequence[Sequence[str]] = (),
                 rate: float = 0.15, seed: int = 0):
        if not 0.0 < rate <= 1.0:
            raise ValueError(f"mask rate must lie in (0, 1], got {rate}")
        self.vocab = vocab
        self.rate = rate
        self.seed = seed
        self.head = MlmParams(hidden, len(vocab), seed=seed)
        self.params = self.head.params
        self.train = self._examples(train, fixed=False)
        self.dev = self._examples(dev, fixed=True)
        self.test = self._examples(test, fixed=True)
        self.mask_log: list[tuple[int, list[int]]] | None = None

    def fixed_mask(self, index: int, ids: Sequence[int]):
        return mlm_mask(ids, self.rate, np.random.default_rng([self.seed, index]))

    def _examples(self, sentences, fixed: bool) -> list[MaskedExample]:
        out = []
        for k, words in enumerate(sentences):
            ids, _ = encode_words(words, self.vocab)
            out.append(MaskedExample(k, ids, self.fixed_mask(k, ids) if fixed else None))
        return out

    def probe(self, examples: Sequence[MaskedExample]) -> list[MaskedExample]:
        """Copies of ``examples`` with their fixed masks attached."""
        return [MaskedExample(ex.index, ex.ids, self.fixed_mask(ex.index, ex.ids)) for ex in examples]

    def _batch(self, ex: MaskedExample, train: bool, rng):
        if ex.fixed is not None:
            return ex.fixed
        if not train:
            return self.fixed_mask(ex.index, ex.ids)
        batch = mlm_mask(ex.ids, self.rate, rng)
        if self.mask_log is not None:
            self.mask_log.append((ex.index, batch.positions))
        return batch

    def logits(self, encoder, batch, train=False, rng=None) -> Tensor:
        state = _final_state(encoder, batch.ids, None, train, rng)
        return mlm_logits(tc.take(state, np.asarray(batch.positions)), self.head)

    def loss(self, encoder, ex, train, rng):
        batch = self._batch(ex, train, rng)
        return tc.cross_entropy(self.logits(encoder, batch, train, rng), batch.targets)

    def masked_accuracy(self, encoder: Encoder, examples: Sequence[MaskedExample]) -> float:
        all_logits, all_targets = [], []
        with tc.no_grad():
            for ex in examples:
                batch = self._batch(ex, False, None)
                all_logits.append(self.logits(encoder, batch).data)
                all_targets.extend(batch.targets)
        return mlm_accuracy(np.vstack(all_logits), all_targets)

    def evaluate(self, encoder, split="test"):
        examples = getattr(self, split) or self.dev
        return {"mlm_accuracy": self.masked_accuracy(encoder, examples)}

    def head_meta(self):
        return {"kind": self.kind, "rate": self.rate, "seed": self.seed}


class SeqcTask(Task):
    kind = "seqc"
    stage = "downstream"
    prefix = "seqc"

    def __init__(self, vocab: Vocab, hidden: int, max_len: int, train: Sequence[dict],
                 dev: Sequence[dict], test: Sequence[dict] = (), num_labels: int | None = None,
                 seed: int = 0):
        rows = list(train) + list(dev) + list(test)
        self.num_labels = num_labels or (max(int(r["label"]) for r in rows) + 1)
        self.vocab = vocab
        self.max_len = max_len
        self.head = SeqcParams(hidden, max(2, self.num_labels), seed=seed)
        self.params = self.head.params
        self.train, self.dev, self.test = (self._examples(x) for x in (train, dev, test))

    def _examples(self, rows):
        out = []
        for r in rows:
            ids, seg = pair_encode(r["text_a"], r.get("text_b") or "", self.vocab, self.max_len)
            out.append((ids, seg, int(r["label"])))
        return out

    def logits(self, encoder, ex, train=False, rng=None) -> Tensor:
        ids, seg, _ = ex
        state = _final_state(encoder, ids, seg, train, rng)
        return seqc_logits(state[0:1], self.head)

    def loss(self, encoder, ex, train, rng):
        return tc.cross_entropy(self.logits(encoder, ex, train, rng), [ex[2]])

    def evaluate(self, encoder, split="test"):
        examples = getattr(self, split)
        with tc.no_grad():
            pred = [int(np.argmax(self.logits(encoder, ex).data)) for ex in examples]
        return {"accuracy": accuracy(pred, [ex[2] for ex in examples])}

    def head_meta(self):
        return {"kind": self.kind, "num_labels": self.num_labels}


class MccTask(Task):
    kind = "mcc"
    stage = "downstream"
    prefix = "mcc"

    def __init__(self, vocab: Vocab, hidden: int, max_len: int, train: Sequence[dict],
                 dev: Sequence[dict], test: Sequence[dict] = (), seed: int = 0):
        self.vocab = vocab
        self.max_len = max_len
        self.head = MccParams(hidden, seed=seed)
        self.params = self.head.params
        self.train, self.dev, self.test = (self._examples(x) for x in (train, dev, test))

    def _examples(self, rows):
        out = []
        for r in rows:
            context = r["premise"] + (" " + r["question"] if r.get("question") else "")
            encoded = [pair_encode(context, ans, self.vocab, self.max_len) for ans in r["answers"]]
            if len(encoded) < 2:
                raise ValueError("multiple-choice rows need at least 2 answers")
            out.append((encoded, int(r["correct"])))
        return out

    def scores(self, encoder, ex, train=False, rng=None) -> Tensor:
        encoded, _ = ex
        cls_rows = [_final_state(encoder, ids, seg, train, rng)[0:1] for ids, seg in encoded]
        return mcc_scores(tc.concat_rows(cls_rows), self.head)

    def loss(self, encoder, ex, train, rng):
        s = self.scores(encoder, ex, train, rng)
        return tc.cross_entropy(tc.reshape(s, (1, -1)), [ex[1]])

    def evaluate(self, encoder, split="test"):
        examples = getattr(self, split)
        with tc.no_grad():
            pred = [int(np.argmax(self.scores(encoder, ex).data)) for ex in examples]
        return {"accuracy": accuracy(pred, [ex[1] for ex in examples])}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class StageResult:
    checkpoint: Checkpoint
    history: list[tuple[int, float]]
    best_step: int
    best_dev_loss: float
    final_dev_loss: float
    steps: int
    stopped_early: bool


def _trainable(encoder: Encoder, task: Task, mode: str) -> dict[str, Tensor]:
    if mode == "adapter":
        if encoder.adapter_config is None:
            raise ValueError("adapter mode requires injected adapters")
        names = encoder.adapter_names
    else:
        names = list(encoder.params)
    out = {n: encoder.params[n] for n in names}
    out.update(task.params)
    return out


def train_stage(encoder: Encoder, task: Task, schedule: TrainSchedule, seed: int = 0,
                vocab: Vocab | None = None, stage: str | None = None,
                on_measure: Callable[[int, float], None] | None = None) -> StageResult:
    """Train ``encoder`` and ``task``'s head, keeping the best-dev parameters.

    Dev loss is measured before training, every ``eval_every`` updates and
    after the last update. Training stops after ``max_epochs`` or when
    :func:`should_stop` fires. On return the encoder and head hold the
    parameters of the best measurement.
    """
    if not task.train or not task.dev:
        raise ValueError(f"{task.kind}: train and dev splits must be non-empty")
    rng = np.random.default_rng(seed)
    trainable = _trainable(encoder, task, schedule.mode)
    frozen = [t for n, t in encoder.params.items() if n not in trainable]
    for t in frozen:
        t.requires_grad = False
    for t in trainable.values():
        t.requires_grad = True
    state = tc.AdamState(lr=schedule.lr)

    def snapshot():
        return ({n: t.data.copy() for n, t in encoder.params.items()},
                {n: t.data.copy() for n, t in task.params.items()})

    def measure(step: int) -> float:
        loss = task.dev_loss(encoder)
        if not np.isfinite(loss):
            raise FloatingPointError(f"{task.kind}: dev loss is {loss} at step {step}")
        history.append((step, loss))
        if on_measure is not None:
            on_measure(step, loss)
        log.info("%s step %d dev loss %.4f", task.kind, step, loss)
        return loss

    history: list[tuple[int, float]] = []
    best_loss = measure(0)
    best_step, best = 0, snapshot()
    step = 0
    stopped = False
    try:
        for _epoch in range(schedule.max_epochs):
            order = rng.permutation(len(task.train))
            for lo in range(0, len(order), schedule.batch_size):
                chunk = order[lo:lo + schedule.batch_size]
                total = None
                for k in chunk:
                    loss = task.loss(encoder, task.train[k], True, rng)
                    total = loss if total is None else total + loss
                total = tc.mul_scalar(total, 1.0 / len(chunk))
                if not np.isfinite(total.item()):
                    raise FloatingPointError(
                        f"{task.kind}: training loss is {total.item()} at step {step + 1}")
                tc.backward(total)
                tc.adam_step(trainable, state)
                tc.zero_grads(trainable)
                step += 1
                if step % schedule.eval_every == 0:
                    loss = measure(step)
                    if loss < best_loss:
                        best_loss, best_step, best = loss, step, snapshot()
                    if should_stop([h for _, h in history], schedule.patience):
                        stopped = True
                        break
                if schedule.max_steps is not None and step >= schedule.max_steps:
                    break
            if stopped or (schedule.max_steps is not None and step >= schedule.max_steps):
                break
        if step and history[-1][0] != step:
            loss = measure(step)
            if loss < best_loss:
                best_loss, best_step, best = loss, step, snapshot()
    finally:
        for t in frozen:
            t.requires_grad = True
    final_loss = history[-1][1]
    enc_arrays, head_arrays = best
    for n, arr in enc_arrays.items():
        encoder.params[n].data = arr
    for n, arr in head_arrays.items():
        task.params[n].data = arr
    ckpt = Checkpoint.from_model(stage or task.stage, encoder, vocab, task.params, task.head_meta(),
                                 rng, {"best_step": best_step, "best_dev_loss": best_loss,
                                       "steps": step, "history": [list(h) for h in history]})
    return StageResult(ckpt, history, best_step, best_loss, final_loss, step, stopped)


# ---------------------------------------------------------------------------
# Sequencing
# ---------------------------------------------------------------------------


@dataclass
class StageSpec:
    """One stage of a sequence. ``make_task(hidden, seed)`` builds the task."""

    kind: str
    make_task: Callable[[int, int], Task]
    schedule: TrainSchedule
    task_name: str = ""


def check_sequence(stages: Sequence[StageSpec]) -> None:
    kinds = [s.kind for s in stages]
    if not kinds:
        raise ValueError("empty stage sequence")
    for k in kinds:
        if k not in ("ipt", "ilmt", "downstream"):
            raise ValueError(f"unknown stage kind {k!r}")
    inter = [k for k in kinds if k in INTERMEDIATE]
    if len(inter) > 1:
        raise ValueError(f"at most one intermediate stage allowed, got {kinds}")
    if inter and kinds[0] not in INTERMEDIATE:
        raise ValueError("the intermediate stage must come first")
    if kinds.count("downstream") > 1:
        raise ValueError("at most one downstream stage allowed")


@dataclass
class SequenceResult:
    checkpoint: Checkpoint
    stages: list[StageResult]
    metrics: dict[str, dict[str, float]]
    encoders: dict[str, Checkpoint]


def run_sequence(base: Checkpoint, stages: Sequence[StageSpec], seed: int = 0,
                 eval_split: str = "test", adapter: AdapterConfig | None = None) -> SequenceResult:
    """Run stages in order, each starting from the encoder the previous stage left.

    Stage seeds are forked from ``seed`` by stage kind, so two sequences that
    share a stage kind give it the same seed. Downstream stages always train
    every encoder parameter, adapters included when present. ``adapter`` sets
    the bottleneck injected for an adapter-mode stage; a task with an empty
    ``eval_split`` is evaluated on its dev split instead.
    """
    check_sequence(stages)
    vocab = base.build_vocab() if base.vocab is not None else None
    encoder = base.build_encoder()
    if base.stage != "base":
        log.info("starting sequence from a %s checkpoint", base.stage)
    results, metrics, encoders = [], {}, {}
    for spec in stages:
        stage_seed = fork_seed(seed, spec.kind)
        schedule = spec.schedule
        if spec.kind == "downstream" and schedule.mode != "standard":
            schedule = TrainSchedule(**{**asdict(schedule), "mode": "standard"})
        if schedule.mode == "adapter" and encoder.adapter_config is None:
            encoder.inject_adapters(adapter or AdapterConfig(), seed=fork_seed(seed, "adapters"))
        task = spec.make_task(encoder.config.hidden, stage_seed)
        if vocab is not None and getattr(task, "vocab", None) is not None \
                and task.vocab.pieces != vocab.pieces:
            raise ValueError("stage task uses a different tokenizer than the base checkpoint")
        res = train_stage(encoder, task, schedule, stage_seed, vocab, spec.kind)
        results.append(res)
        metrics[spec.kind] = task.evaluate(encoder, eval_split if getattr(task, eval_split) else "dev")
        encoders[spec.kind] = Checkpoint.from_model(spec.kind, encoder, vocab)
    return SequenceResult(results[-1].checkpoint, results, metrics, encoders)


def initial_checkpoint(config: EncoderConfig, vocab: Vocab, seed: int) -> Checkpoint:
    enc = Encoder(config, seed=fork_seed(seed, "base"))
    return Checkpoint.from_model("base", enc, vocab)


def encoder_diff(a: Checkpoint, b: Checkpoint) -> list[str]:
    """Names whose arrays differ, or that exist in only one checkpoint."""
    names = sorted(set(a.arrays) | set(b.arrays))
    return [n for n in names if n not in a.arrays or n not in b.arrays
            or not np.array_equal(a.arrays[n], b.arrays[n])]


def dumps_report(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float)
