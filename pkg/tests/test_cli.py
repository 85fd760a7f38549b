import csv
import io
import json

import pytest
import yaml

from iptkit.cka import CkaReport
from iptkit.cli import main
from iptkit.encoder import EncoderConfig
from iptkit.pipeline import Checkpoint, encoder_diff, initial_checkpoint
from iptkit.tokenizer import train_bpe
from iptkit.treebank import parse_conllu, validate_heads


@pytest.fixture(scope="module")
def parser_run(toy_workspace, tmp_path_factory):
    _, config = toy_workspace
    out = tmp_path_factory.mktemp("parser")
    assert main(["train-parser", "--config", str(config), "--out", str(out)]) == 0
    return out


def test_version_and_usage(capsys):
    assert main(["--version"]) == 0
    assert main([]) == 2
    assert main(["frobnicate"]) == 2


def test_make_toy(tmp_path, capsys):
    assert main(["make-toy", "--out", str(tmp_path), "--n-train", "12", "--seed", "3"]) == 0
    cfg = yaml.safe_load((tmp_path / "config.yaml").read_text())
    assert cfg["seed"] == 3 and len(cfg["tasks"]) == 2
    assert len(parse_conllu((tmp_path / "toy-train.conllu").read_text())) == 12


def test_train_parser_outputs(parser_run):
    report = json.loads((parser_run / "train-parser.json").read_text())
    assert report["seed"] == 7 and len(report["config_hash"]) == 12
    assert 0 <= report["test"]["las"] <= report["test"]["uas"] <= 100
    assert report["adapter_params"] == 0
    hist = list(csv.reader(io.StringIO((parser_run / "train-parser-history.csv").read_text())))
    assert hist[0] == ["step", "dev_loss"] and hist[1][0] == "0"
    assert Checkpoint.load(parser_run / "parser.ckpt").stage == "ipt"


def test_train_parser_adapter_mode_keeps_base(toy_workspace, tmp_path, capsys):
    _, config = toy_workspace
    assert main(["train-parser", "--config", str(config), "--out", str(tmp_path), "--mode", "adapter",
                 "--seed", "7"]) == 0
    report = json.loads((tmp_path / "train-parser.json").read_text())
    assert report["mode"] == "adapter" and report["base_params_changed"] == 0
    assert report["adapter_params"] == 2 * 2 * 4
    ckpt = Checkpoint.load(tmp_path / "parser.ckpt")
    base = initial_checkpoint(ckpt.build_encoder().config, ckpt.build_vocab(), 7)
    changed = encoder_diff(base, ckpt)
    assert changed and all(n.startswith(("adapter/", "parse/")) for n in changed)


def test_parse_and_eval(parser_run, toy_workspace, tmp_path, capsys):
    root, _ = toy_workspace
    gold = root / "toy-test.conllu"
    ckpt = parser_run / "parser.ckpt"
    a, b = tmp_path / "a.conllu", tmp_path / "b.conllu"
    assert main(["parse", str(ckpt), str(gold), str(a), "--mst"]) == 0
    assert main(["parse", str(ckpt), str(gold), str(b), "--mst"]) == 0
    assert a.read_bytes() == b.read_bytes()
    pred = parse_conllu(a.read_text())
    assert all(validate_heads(s.heads).ok for s in pred)
    assert [s.words for s in pred] == [s.words for s in parse_conllu(gold.read_text())]
    capsys.readouterr()
    assert main(["eval", str(gold), str(gold)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert (out["uas"], out["las"], out["tree_rate"]) == (100.0, 100.0, 100.0)
    assert main(["parse", str(ckpt), str(gold)]) == 0
    assert capsys.readouterr().out.count("\n\n") == len(pred)


def test_eval_hand_case_and_mismatch(tmp_path, capsys):
    rows = [("1", "2", "det"), ("2", "0", "root"), ("3", "2", "obj"), ("4", "3", "amod")]
    pred = [("1", "2", "det"), ("2", "0", "root"), ("3", "2", "nsubj"), ("4", "1", "amod")]

    def write(path, toks):
        path.write_text("".join(f"{i}\tw{i}\t_\t_\t_\t_\t{h}\t{r}\t_\t_\n" for i, h, r in toks) + "\n")
    write(tmp_path / "g.conllu", rows)
    write(tmp_path / "p.conllu", pred)
    assert main(["eval", str(tmp_path / "p.conllu"), str(tmp_path / "g.conllu")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert (out["uas"], out["las"]) == (75.0, 50.0)
    write(tmp_path / "short.conllu", rows[:3])
    assert main(["eval", str(tmp_path / "short.conllu"), str(tmp_path / "g.conllu")]) == 1


def test_cka_same_checkpoint(parser_run, toy_workspace, tmp_path, capsys):
    root, _ = toy_workspace
    ckpt = str(parser_run / "parser.ckpt")
    assert main(["cka", ckpt, ckpt, str(root / "toy-test.conllu"), "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(io.StringIO((tmp_path / "cka.csv").read_text())))
    assert rows[0][0] == "layer" and len(rows) - 1 == 2 + 1
    assert all(abs(float(r[1]) - 1.0) < 1e-10 for r in rows[1:])
    rep = CkaReport.from_json((tmp_path / "cka.json").read_text())
    assert rep.layers == [0, 1, 2] and rep.n_sentences == 10
    assert (tmp_path / "cka.png").stat().st_size > 0


def test_finetune_none_arm(toy_workspace, tmp_path, capsys):
    _, config = toy_workspace
    assert main(["finetune", "--config", str(config), "--out", str(tmp_path), "--arms", "none"]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "arms.csv").read_text())))
    assert [r["task"] for r in rows] == ["toy-seqc", "toy-mcc"]
    assert all(r["arm"] == "none" and r["intermediate_metric"] == "" for r in rows)
    assert (tmp_path / "arms.png").stat().st_size > 0
    assert json.loads((tmp_path / "arms.json").read_text())["seed"] == 7
    assert main(["finetune", "--config", str(config), "--out", str(tmp_path), "--arms", "none,bert"]) == 2


def test_mlm_train_improves(toy_workspace, tmp_path, capsys):
    _, config = toy_workspace
    assert main(["mlm-train", "--config", str(config), "--out", str(tmp_path),
                 "--max-epochs", "4", "--lr", "0.003"]) == 0
    report = json.loads((tmp_path / "mlm-train.json").read_text())
    assert report["train_mlm_accuracy_after"] > report["train_mlm_accuracy_before"]
    assert main(["mlm-train", "--config", str(config), "--out", str(tmp_path), "--rate", "1.5"]) == 2


def test_config_and_file_errors(toy_workspace, tmp_path, capsys):
    root, config = toy_workspace
    bad = tmp_path / "bad.yaml"
    data = yaml.safe_load(config.read_text())
    data["schedule"]["max_epoch"] = 2
    bad.write_text(yaml.safe_dump(data))
    assert main(["train-parser", "--config", str(bad)]) == 2
    assert "schedule.max_epoch" in capsys.readouterr().err
    missing = tmp_path / "missing.yaml"
    data = yaml.safe_load(config.read_text())
    data["treebank"]["train"] = str(root / "nope.conllu")
    missing.write_text(yaml.safe_dump(data))
    assert main(["train-parser", "--config", str(missing), "--out", str(tmp_path)]) == 2
    assert "nope.conllu" in capsys.readouterr().err
    assert main(["train-parser", "--config", str(tmp_path / "absent.yaml")]) == 2
    assert main(["eval", str(tmp_path / "x"), str(tmp_path / "y")]) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert main(["parse", str(tmp_path / "junk.ckpt"), str(root / "toy-test.conllu")]) == 1


def test_output_dir_from_env(toy_workspace, tmp_path, monkeypatch, capsys):
    root, _ = toy_workspace
    monkeypatch.setenv("IPTKIT_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["make-toy", "--n-train", "5"]) == 0
    assert (tmp_path / "env" / "config.yaml").exists()


def test_parse_rejects_non_parser_checkpoint(toy_workspace, tmp_path, capsys):
    root, _ = toy_workspace
    vocab = train_bpe([["a", "b"]], 262)
    initial_checkpoint(EncoderConfig(vocab_size=len(vocab), layers=1, hidden=8, heads=2, ffn_size=8),
                       vocab, 0).save(tmp_path / "base.ckpt")
    assert main(["parse", str(tmp_path / "base.ckpt"), str(root / "toy-test.conllu")]) == 1
    assert "no parsing head" in capsys.readouterr().err
