"""Command-line entry point: ``iptkit <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .cka import CkaReport, Variant, cka_grid
from .config import (
    ARMS,
    OUTPUT_ENV,
    ConfigError,
    ExperimentConfig,
    ScheduleOverrides,
    config_from_dict,
    load_config,
    require_files,
)
from .decode import decode_tree
from .encoder import AdapterConfig
from .metrics import uas_las
from .parsehead import BiaffineParams, score
from .pipeline import (
    Checkpoint,
    CheckpointError,
    MccTask,
    MlmTask,
    ParseTask,
    SeqcTask,
    StageSpec,
    TrainSchedule,
    encoder_diff,
    fork_seed,
    initial_checkpoint,
    run_sequence,
)
from .plotting import arm_bars, cka_heatmap
from .tokenizer import Vocab, encode_words, train_bpe
from .toydata import write_toy_suite
from .treebank import (
    ConlluError,
    LabelInventory,
    Token,
    build_label_inventory,
    parse_conllu,
    read_treebank,
    serialize_conllu,
    validate_heads,
)

log = logging.getLogger("iptkit")

REPORT_FORMAT = 1
ARM_COLUMNS = ["arm", "task", "kind", "accuracy", "dev_loss", "intermediate", "intermediate_metric",
               "intermediate_value", "steps", "seed", "config_hash"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Data loading
# ---------------------------------------------------------------------------


def read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows


def read_sentences(path: str) -> list[list[str]]:
    """Word lists from a CoNLL-U file, or one whitespace-split sentence per line."""
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".conllu"):
        return [s.words for s in parse_conllu(text)]
    return [line.split() for line in text.splitlines() if line.strip()]


def _task_texts(rows: list[dict]) -> list[list[str]]:
    out = []
    for r in rows:
        for key in ("text_a", "text_b", "premise", "question"):
            if r.get(key):
                out.append(r[key].split())
        for ans in r.get("answers", []):
            out.append(ans.split())
    return out


class Experiment:
    """Resolved data, tokenizer and base checkpoint for one config."""

    def __init__(self, cfg: ExperimentConfig, need_treebank: bool = True, need_tasks: bool = False):
        self.cfg = cfg
        tb = cfg.treebank
        if need_treebank:
            require_files(tb.train, tb.dev, tb.test)
        if need_tasks:
            if not cfg.tasks:
                raise ConfigError("tasks: at least one downstream task is required")
            for t in cfg.tasks:
                require_files(t.train, t.dev, t.test)
        if cfg.ilmt.train:
            require_files(cfg.ilmt.train)
        if cfg.ilmt.dev:
            require_files(cfg.ilmt.dev)
        self.treebank = {}
        if tb.train:
            # evaluation data is always read leniently: malformed gold trees are skipped with a warning
            self.treebank = {s: read_treebank(getattr(tb, s), strict=tb.strict and s != "test")
                             for s in ("train", "dev", "test") if getattr(tb, s)}
        self.task_rows = {t.name: {s: read_jsonl(getattr(t, s)) for s in ("train", "dev", "test")}
                          for t in (cfg.tasks if need_tasks else [])}
        self.base = self._base()
        self.vocab = self.base.build_vocab()
        self.hash = cfg.config_hash()
        self.adapter = AdapterConfig(size=cfg.adapter_size)

    def _corpus(self) -> list[list[str]]:
        corpus = [s.words for s in self.treebank.get("train", [])]
        if self.cfg.ilmt.train:
            corpus += read_sentences(self.cfg.ilmt.train)
        for rows in self.task_rows.values():
            corpus += _task_texts(rows["train"])
        return corpus

    def _base(self) -> Checkpoint:
        cfg = self.cfg
        if cfg.base_checkpoint:
            require_files(cfg.base_checkpoint)
            ckpt = Checkpoint.load(cfg.base_checkpoint)
            if ckpt.vocab is None:
                raise CheckpointError(f"{cfg.base_checkpoint}: no tokenizer stored")
            return ckpt
        if cfg.tokenizer.path:
            require_files(cfg.tokenizer.path)
            vocab = Vocab.load(cfg.tokenizer.path)
        else:
            corpus = self._corpus()
            if not corpus:
                raise ConfigError("tokenizer: no training text; set treebank.train, ilmt.train or tasks")
            vocab = train_bpe(corpus, cfg.tokenizer.vocab_size)
        return initial_checkpoint(cfg.encoder_config(len(vocab)), vocab, cfg.seed)

    @property
    def max_len(self) -> int:
        return int(self.base.encoder_config["max_len"])

    def schedule(self, task: str, overrides: ScheduleOverrides, mode: str = "standard",
                 nli_like: bool = False) -> TrainSchedule:
        merged = self.cfg.schedule.merged(overrides)
        return TrainSchedule.for_task(task, nli_like=nli_like, mode=mode, **merged.as_kwargs())

    def labels(self) -> LabelInventory:
        return build_label_inventory(self.treebank["train"])

    def ipt_spec(self) -> StageSpec:
        tb, labels, vocab = self.treebank, self.labels(), self.vocab
        decode = self.cfg.decode

        def make(hidden: int, seed: int) -> ParseTask:
            return ParseTask(vocab, labels, hidden, tb["train"], tb["dev"], tb.get("test", ()), seed, decode)
        return StageSpec("ipt", make, self.schedule("parse", self.cfg.ipt.schedule, self.cfg.ipt.mode), "parsing")

    def mlm_sentences(self) -> tuple[list[list[str]], list[list[str]]]:
        ilmt = self.cfg.ilmt
        train = read_sentences(ilmt.train) if ilmt.train else [s.words for s in self.treebank.get("train", [])]
        dev = read_sentences(ilmt.dev) if ilmt.dev else [s.words for s in self.treebank.get("dev", [])]
        if not train or not dev:
            raise ConfigError("ilmt: needs train and dev sentences (ilmt.train/dev or treebank.train/dev)")
        return train, dev

    def ilmt_spec(self, rate: float | None = None) -> StageSpec:
        train, dev = self.mlm_sentences()
        vocab = self.vocab
        rate = self.cfg.ilmt.rate if rate is None else rate

        def make(hidden: int, seed: int) -> MlmTask:
            return MlmTask(vocab, hidden, train, dev, dev, rate=rate, seed=seed)
        return StageSpec("ilmt", make, self.schedule("mlm", self.cfg.ilmt.schedule, self.cfg.ilmt.mode), "mlm")

    def downstream_spec(self, name: str) -> StageSpec:
        t = next(t for t in self.cfg.tasks if t.name == name)
        rows, vocab, max_len = self.task_rows[name], self.vocab, self.max_len

        def make(hidden: int, seed: int):
            if t.kind == "seqc":
                return SeqcTask(vocab, hidden, max_len, rows["train"], rows["dev"], rows["test"], seed=seed)
            return MccTask(vocab, hidden, max_len, rows["train"], rows["dev"], rows["test"], seed=seed)
        return StageSpec("downstream", make, self.schedule(t.kind, t.schedule, nli_like=t.nli_like), name)

    def provenance(self) -> dict:
        return {"format": REPORT_FORMAT, "config_hash": self.hash, "seed": self.cfg.seed,
                "version": __version__}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)
    return path


def _history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "dev_loss"])
    for step, loss in history:
        w.writerow([step, repr(float(loss))])
    return buf.getvalue()


def cmd_train_parser(cfg: ExperimentConfig, args) -> int:
    exp = Experiment(cfg)
    out = cfg.out_dir()
    before = exp.base
    res = run_sequence(exp.base, [exp.ipt_spec()], seed=cfg.seed, adapter=exp.adapter)
    stage = res.stages[0]
    stage.checkpoint.save(out / "parser.ckpt")
    parse_eval = _evaluate_checkpoint(stage.checkpoint, exp.treebank["test"], cfg.decode)
    changed = encoder_diff(before, res.encoders["ipt"])
    base_changed = [n for n in changed if n.startswith("base/")]
    report = {**exp.provenance(), "command": "train-parser", "mode": cfg.ipt.mode, "decode": cfg.decode,
              "test": parse_eval.report(), "best_step": stage.best_step, "steps": stage.steps,
              "best_dev_loss": stage.best_dev_loss, "stopped_early": stage.stopped_early,
              "base_params_changed": len(base_changed),
              "adapter_params": sum(1 for n in stage.checkpoint.arrays if n.startswith("adapter/"))}
    _write(out / "train-parser.json", json.dumps(report, indent=2, sort_keys=True))
    _write(out / "train-parser-history.csv", _history_csv(stage.history))
    print(json.dumps(report["test"], sort_keys=True))
    return 0


def _parser_from_checkpoint(ckpt: Checkpoint):
    if ckpt.head.get("kind") != "parse":
        raise CheckpointError(f"checkpoint has no parsing head (head kind {ckpt.head.get('kind')!r})")
    labels = LabelInventory(tuple(ckpt.head["relations"]))
    enc = ckpt.build_encoder()
    head = BiaffineParams(enc.config.hidden, labels.num_classes)
    for n, arr in ckpt.head_arrays("parse").items():
        head.params[n].data = np.array(arr)
    return enc, head, labels, ckpt.build_vocab()


def predict_trees(ckpt: Checkpoint, sentences, mode: str = "greedy"):
    from .tensorcore import no_grad
    from .encoder import parser_inputs, pool_words

    enc, head, labels, vocab = _parser_from_checkpoint(ckpt)
    out = []
    with no_grad():
        for s in sentences:
            ids, al = encode_words(s.words, vocab)
            state = enc.encode(ids)[-1]
            X = pool_words(state, al)
            sc = score(X, parser_inputs(state, X), head)
            tree = decode_tree(sc.arc, sc.rel, mode)
            out.append((tree, [labels.label(r) for r in tree.rels]))
    return out


def _evaluate_checkpoint(ckpt: Checkpoint, gold, mode: str):
    preds = [(tree.heads, rels) for tree, rels in predict_trees(ckpt, gold, mode)]
    return uas_las(preds, gold)


def cmd_parse(args) -> int:
    require_files(args.checkpoint, args.input)
    ckpt = Checkpoint.load(args.checkpoint)
    sentences = parse_conllu(Path(args.input).read_text(encoding="utf-8"))
    mode = "mst" if args.mst else "greedy"
    result = []
    for s, (tree, rels) in zip(sentences, predict_trees(ckpt, sentences, mode)):
        s = copy.deepcopy(s)
        s.tokens = [Token(**{**t.__dict__, "head": h, "deprel": r}) for t, h, r in zip(s.tokens, tree.heads, rels)]
        result.append(s)
    text = serialize_conllu(result)
    if args.output == "-":
        sys.stdout.write(text)
    else:
        _write(Path(args.output), text)
    n_bad = sum(not validate_heads(s.heads).ok for s in result)
    if n_bad:
        log.warning("%d of %d predicted sentences are not well-formed trees", n_bad, len(result))
    return 0


def _arm_stages(exp: Experiment, arm: str) -> list[StageSpec]:
    if arm == "parsing":
        return [exp.ipt_spec()]
    if arm == "mlm":
        return [exp.ilmt_spec()]
    return []


def run_arms(exp: Experiment, arms: Sequence[str]) -> list[dict]:
    """One row per (arm, downstream task); every arm starts from the same base.

    An arm's intermediate stage is trained once and shared by its tasks.
    """
    rows = []
    cfg = exp.cfg
    for arm in arms:
        start, inter_metric, inter_value = exp.base, "", ""
        inter = _arm_stages(exp, arm)
        if inter:
            res = run_sequence(exp.base, inter, seed=cfg.seed, adapter=exp.adapter)
            start = res.checkpoint
            inter_metric, inter_value = next(iter(res.metrics[inter[0].kind].items()))
        for t in cfg.tasks:
            res = run_sequence(start, [exp.downstream_spec(t.name)], seed=cfg.seed, adapter=exp.adapter)
            down = res.stages[-1]
            rows.append({"arm": arm, "task": t.name, "kind": t.kind,
                         "accuracy": res.metrics["downstream"]["accuracy"],
                         "dev_loss": down.best_dev_loss, "intermediate": arm,
                         "intermediate_metric": inter_metric, "intermediate_value": inter_value,
                         "steps": down.steps, "seed": cfg.seed, "config_hash": exp.hash})
    return rows


def arms_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ARM_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_finetune(cfg: ExperimentConfig, args) -> int:
    arms = args.arms.split(",") if args.arms else list(cfg.arms)
    for a in arms:
        if a not in ARMS:
            raise UsageError(f"unknown arm {a!r}; choose from {', '.join(ARMS)}")
    exp = Experiment(cfg, need_treebank="parsing" in arms, need_tasks=True)
    rows = run_arms(exp, arms)
    out = cfg.out_dir()
    _write(out / "arms.csv", arms_csv(rows))
    _write(out / "arms.json", json.dumps({**exp.provenance(), "command": "finetune", "rows": rows},
                                         indent=2, sort_keys=True))
    arm_bars(rows, out / "arms.png", title=f"seed {cfg.seed}")
    sys.stdout.write(arms_csv(rows))
    return 0


def cmd_mlm_train(cfg: ExperimentConfig, args) -> int:
    rate = cfg.ilmt.rate if args.rate is None else args.rate
    if not 0.0 < rate <= 1.0:
        raise UsageError(f"--rate must lie in (0, 1], got {rate}")
    exp = Experiment(cfg, need_treebank=False)
    spec = exp.ilmt_spec(rate)
    train, _ = exp.mlm_sentences()
    enc = exp.base.build_encoder()
    probe_task = spec.make_task(enc.config.hidden, fork_seed(cfg.seed, "ilmt"))
    probe = probe_task.probe(probe_task.train)
    before = probe_task.masked_accuracy(enc, probe)
    res = run_sequence(exp.base, [spec], seed=cfg.seed, adapter=exp.adapter)
    stage = res.stages[0]
    trained = stage.checkpoint.build_encoder()
    for n, arr in stage.checkpoint.head_arrays("mlm").items():
        probe_task.params[n].data = np.array(arr)
    after = probe_task.masked_accuracy(trained, probe)
    out = cfg.out_dir()
    stage.checkpoint.save(out / "mlm.ckpt")
    report = {**exp.provenance(), "command": "mlm-train", "rate": rate,
              "train_mlm_accuracy_before": before, "train_mlm_accuracy_after": after,
              "dev_mlm_accuracy": res.metrics["ilmt"]["mlm_accuracy"],
              "best_step": stage.best_step, "steps": stage.steps, "n_train": len(train)}
    _write(out / "mlm-train.json", json.dumps(report, indent=2, sort_keys=True))
    _write(out / "mlm-train-history.csv", _history_csv(stage.history))
    print(json.dumps({"before": before, "after": after}, sort_keys=True))
    return 0


def cmd_cka(args) -> int:
    require_files(args.ckpt_a, args.ckpt_b, args.sentences)
    a, b = Checkpoint.load(args.ckpt_a), Checkpoint.load(args.ckpt_b)
    sentences = read_sentences(args.sentences)
    tag_a, tag_b = args.tags.split(",") if args.tags else (a.stage, b.stage)
    if tag_a == tag_b:
        tag_a, tag_b = tag_a + "_a", tag_b + "_b"
    variants = [Variant(tag_a, a.build_encoder(), a.build_vocab()),
                Variant(tag_b, b.build_encoder(), b.build_vocab())]
    report = cka_grid(variants, [(tag_a, tag_b)], sentences)
    report.provenance = {"format": REPORT_FORMAT, "seed": args.seed, "ckpt_a": str(args.ckpt_a),
                         "ckpt_b": str(args.ckpt_b), "version": __version__}
    out = Path(args.out) if args.out else _default_out()
    _write(out / "cka.csv", report.to_csv())
    _write(out / "cka.json", report.to_json())
    cka_heatmap(report, out / "cka.png", title=f"{tag_a} vs {tag_b}")
    sys.stdout.write(report.to_csv())
    return 0


def cmd_eval(args) -> int:
    require_files(args.pred, args.gold)
    pred = parse_conllu(Path(args.pred).read_text(encoding="utf-8"))
    gold = parse_conllu(Path(args.gold).read_text(encoding="utf-8"))
    ev = uas_las(pred, gold)
    print(json.dumps({"format": REPORT_FORMAT, **ev.report()}, sort_keys=True))
    return 0


def cmd_make_toy(args) -> int:
    out = Path(args.out) if args.out else _default_out()
    files = write_toy_suite(out, seed=args.seed, n_train=args.n_train)
    config = {
        "seed": args.seed,
        "treebank": {k: files[f"treebank_{k}"].name for k in ("train", "dev", "test")},
        "tasks": [{"name": "toy-seqc", "kind": "seqc", **{k: files[f"seqc_{k}"].name for k in ("train", "dev", "test")}},
                  {"name": "toy-mcc", "kind": "mcc", **{k: files[f"mcc_{k}"].name for k in ("train", "dev", "test")}}],
        "arms": list(ARMS),
    }
    import yaml

    _write(out / "config.yaml", yaml.safe_dump(config, sort_keys=False))
    for p in sorted(files.values()):
        print(p)
    return 0


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _default_out() -> Path:
    import os

    from .config import DEFAULT_OUTPUT

    return Path(os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iptkit", description="Intermediate parsing training toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment(name: str, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=True, help="YAML or JSON experiment config")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        sp.add_argument("--out", help=f"output folder (overrides config; default ${OUTPUT_ENV} or ./iptkit-out)")
        sp.add_argument("--max-epochs", type=int, help="override schedule.max_epochs")
        sp.add_argument("--lr", type=float, help="override schedule.lr")
        lenient = sp.add_mutually_exclusive_group()
        lenient.add_argument("--strict", dest="strict", action="store_true", default=None,
                             help="reject malformed treebank sentences (default)")
        lenient.add_argument("--lenient", dest="strict", action="store_false",
                             help="skip malformed treebank sentences with a warning")
        return sp

    sp = experiment("train-parser", "train the biaffine parser (intermediate parsing stage)")
    sp.add_argument("--mode", choices=["standard", "adapter"], help="override ipt.mode")
    sp.add_argument("--mst", action="store_true", help="decode test trees with MST")

    sp = sub.add_parser("parse", help="annotate a CoNLL-U file with predicted heads and relations")
    sp.add_argument("checkpoint")
    sp.add_argument("input")
    sp.add_argument("output", nargs="?", default="-", help="output file (default stdout)")
    sp.add_argument("--mst", action="store_true", help="MST decoding (always well-formed trees)")

    sp = experiment("finetune", "run None / Parsing / MLM arms followed by downstream fine-tuning")
    sp.add_argument("--arms", help="comma-separated subset of none,parsing,mlm")

    sp = experiment("mlm-train", "masked-LM intermediate training")
    sp.add_argument("--rate", type=float, help="masking rate in (0, 1]")
    sp.add_argument("--mode", choices=["standard", "adapter"], help="override ilmt.mode")

    sp = sub.add_parser("cka", help="layer-wise linear CKA between two checkpoints")
    sp.add_argument("ckpt_a")
    sp.add_argument("ckpt_b")
    sp.add_argument("sentences", help="CoNLL-U file or one sentence per line")
    sp.add_argument("--tags", help="labels for the two checkpoints, e.g. base,ipt")
    sp.add_argument("--out", help="output folder")
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("eval", help="UAS/LAS of a predicted CoNLL-U file against gold")
    sp.add_argument("pred")
    sp.add_argument("gold")

    sp = sub.add_parser("make-toy", help="write the synthetic treebank and toy tasks plus a config")
    sp.add_argument("--out", help="output folder")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-train", type=int, default=500)
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.output_dir = args.out
    if args.max_epochs is not None:
        cfg.schedule.max_epochs = args.max_epochs
    if args.lr is not None:
        cfg.schedule.lr = args.lr
    if args.strict is not None:
        cfg.treebank.strict = args.strict
    mode = getattr(args, "mode", None)
    if mode:
        if args.command == "train-parser":
            cfg.ipt.mode = mode
        else:
            cfg.ilmt.mode = mode
    if getattr(args, "mst", False):
        cfg.decode = "mst"
    return config_from_dict(cfg.to_dict())


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("train-parser", "finetune", "mlm-train"):
            cfg = resolve_config(args)
            cfg.out_dir().mkdir(parents=True, exist_ok=True)
            handler = {"train-parser": cmd_train_parser, "finetune": cmd_finetune,
                       "mlm-train": cmd_mlm_train}[args.command]
            return handler(cfg, args)
        return {"parse": cmd_parse, "cka": cmd_cka, "eval": cmd_eval, "make-toy": cmd_make_toy}[args.command](args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"iptkit: error: {exc}", file=sys.stderr)
        return 2
    except (ConlluError, CheckpointError, ValueError, FloatingPointError, OSError) as exc:
        print(f"iptkit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
