import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line and asserts ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_lexicon():
    from iptkit.toydata import Lexicon

    return Lexicon.generate(np.random.default_rng(0))


@pytest.fixture(scope="session")
def toy_small(toy_lexicon):
    """Small treebank splits and a vocabulary trained on them."""
    from iptkit.tokenizer import train_bpe
    from iptkit.toydata import generate_treebank

    train = generate_treebank(40, seed=1, lexicon=toy_lexicon, prefix="train")
    dev = generate_treebank(10, seed=2, lexicon=toy_lexicon, prefix="dev")
    test = generate_treebank(10, seed=3, lexicon=toy_lexicon, prefix="test")
    vocab = train_bpe([s.words for s in train], 8000)
    return {"train": train, "dev": dev, "test": test, "vocab": vocab}


@pytest.fixture
def tiny_config():
    from iptkit.encoder import EncoderConfig

    def make(vocab_size, **kw):
        base = dict(layers=2, hidden=16, heads=2, ffn_size=32, max_len=64, vocab_size=vocab_size)
        base.update(kw)
        return EncoderConfig(**base)
    return make


TINY_ENCODER = {"layers": 2, "hidden": 16, "heads": 2, "ffn_size": 32, "max_len": 64}


@pytest.fixture(scope="session")
def toy_workspace(tmp_path_factory):
    """Toy data files plus a fast config; returns (folder, config path)."""
    import yaml

    from iptkit.toydata import write_toy_suite

    root = tmp_path_factory.mktemp("toy")
    files = write_toy_suite(root, seed=0, n_train=40, n_dev=10, n_test=10, n_task=30)
    config = {
        "seed": 7,
        "encoder": TINY_ENCODER,
        "adapter_size": 4,
        "tokenizer": {"vocab_size": 400},
        "treebank": {k: files[f"treebank_{k}"].name for k in ("train", "dev", "test")},
        "schedule": {"max_epochs": 1, "eval_every": 2, "lr": 1e-3},
        "tasks": [{"name": "toy-seqc", "kind": "seqc",
                   **{k: files[f"seqc_{k}"].name for k in ("train", "dev", "test")}},
                  {"name": "toy-mcc", "kind": "mcc",
                   **{k: files[f"mcc_{k}"].name for k in ("train", "dev", "test")}}],
    }
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return root, path
