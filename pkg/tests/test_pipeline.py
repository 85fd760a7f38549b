import numpy as np
import pytest

from iptkit.encoder import AdapterConfig, Encoder
from iptkit.pipeline import (
    Checkpoint,
    CheckpointError,
    MccTask,
    MlmTask,
    ParseTask,
    SeqcTask,
    StageSpec,
    TrainSchedule,
    check_sequence,
    encoder_diff,
    fork_seed,
    initial_checkpoint,
    load_checkpoint,
    run_sequence,
    save_checkpoint,
    should_stop,
    train_stage,
)
from iptkit.toydata import generate_mcc, generate_seqc
from iptkit.treebank import build_label_inventory


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


def test_should_stop_examples():
    assert not should_stop([float(20 - k) for k in range(11)])
    assert should_stop([1.0] + [2.0] * 10)
    assert should_stop([1.0] + [1.0] * 10)  # ties do not count as improvement
    assert not should_stop([1.0] + [2.0] * 9 + [0.5])
    assert not should_stop([1.0] + [2.0] * 9)
    h = [1.0] + [2.0] * 9 + [0.5] + [0.7] * 9
    assert not should_stop(h)
    assert should_stop(h + [0.6])
    assert should_stop([3.0, 1.0, 2.0, 2.0], patience=2)


def test_should_stop_matches_counter_reference():
    rng = np.random.default_rng(0)
    for _ in range(300):
        h = list(rng.integers(0, 6, size=int(rng.integers(1, 25))).astype(float))
        p = int(rng.integers(1, 6))
        # counter form: measurements since the last strict improvement
        best, since = h[0], 0
        for v in h[1:]:
            if v < best:
                best, since = v, 0
            else:
                since += 1
        assert should_stop(h, p) == (since >= p)


def test_schedule_defaults():
    s = TrainSchedule()
    assert (s.max_epochs, s.batch_size, s.eval_every, s.patience, s.lr) == (30, 8, 250, 10, 1e-5)
    assert TrainSchedule.for_task("seqc").batch_size == 32
    assert TrainSchedule.for_task("seqc", nli_like=True).eval_every == 500
    assert TrainSchedule.for_task("mcc").batch_size == 8
    assert TrainSchedule.for_task("parse", lr=None, max_epochs=3).max_epochs == 3
    with pytest.raises(ValueError):
        TrainSchedule(eval_every=0)
    with pytest.raises(ValueError):
        TrainSchedule(mode="frozen")


def test_fork_seed():
    assert fork_seed(1, "ipt") == fork_seed(1, "ipt")
    assert len({fork_seed(1, "ipt"), fork_seed(1, "ilmt"), fork_seed(2, "ipt")}) == 3


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


@pytest.fixture
def setup(toy_small, tiny_config):
    vocab = toy_small["vocab"]
    labels = build_label_inventory(toy_small["train"])
    config = tiny_config(len(vocab))
    return toy_small, vocab, labels, config


def parse_task(setup, seed=0):
    data, vocab, labels, config = setup
    return ParseTask(vocab, labels, config.hidden, data["train"], data["dev"], data["test"], seed=seed)


FAST = dict(max_epochs=1, batch_size=8, eval_every=2, lr=1e-3)


# ---------------------------------------------------------------------------
# train_stage
# ---------------------------------------------------------------------------


def test_zero_epochs_returns_initial(setup):
    _, vocab, _, config = setup
    enc = Encoder(config, seed=1)
    before = enc.state_dict()
    task = parse_task(setup)
    res = train_stage(enc, task, TrainSchedule(max_epochs=0), seed=0, vocab=vocab)
    assert res.steps == 0 and res.best_step == 0 and len(res.history) == 1
    assert all(np.array_equal(before[n], res.checkpoint.arrays[n]) for n in before)


def test_dev_loss_decreases_and_best_is_kept(setup):
    _, vocab, _, config = setup
    enc = Encoder(config, seed=1)
    task = parse_task(setup)
    res = train_stage(enc, task, TrainSchedule(**{**FAST, "max_epochs": 3}), seed=0, vocab=vocab)
    assert res.history[0][0] == 0 and res.history[-1][0] == res.steps == 15
    assert res.best_dev_loss < res.history[0][1]
    assert res.best_dev_loss <= res.final_dev_loss
    assert task.dev_loss(enc) == pytest.approx(res.best_dev_loss, abs=1e-12)
    assert res.checkpoint.stage == "ipt" and res.checkpoint.info["best_step"] == res.best_step


def test_training_is_deterministic(setup):
    _, vocab, _, config = setup
    runs = []
    for _ in range(2):
        res = train_stage(Encoder(config, seed=1), parse_task(setup), TrainSchedule(**FAST), seed=4, vocab=vocab)
        runs.append(res.checkpoint.to_bytes())
    assert runs[0] == runs[1]


def test_early_stopping_fires(setup):
    _, vocab, _, config = setup
    res = train_stage(Encoder(config, seed=1), parse_task(setup),
                      TrainSchedule(max_epochs=50, eval_every=1, patience=1, lr=0.5, batch_size=40),
                      seed=0, vocab=vocab)
    assert res.stopped_early and res.steps < 50


def test_adapter_mode_touches_only_adapters_and_head(setup):
    _, vocab, _, config = setup
    enc = Encoder(config, seed=1)
    enc.inject_adapters(AdapterConfig(size=4), seed=2)
    start = Checkpoint.from_model("base", enc, vocab)
    res = train_stage(enc, parse_task(setup), TrainSchedule(**FAST, mode="adapter"), seed=0, vocab=vocab)
    changed = encoder_diff(start, res.checkpoint)
    assert changed and all(n.startswith(("adapter/", "parse/")) for n in changed)
    assert any(n.startswith("adapter/") for n in changed)
    assert all(enc.params[n].requires_grad for n in enc.base_names)


def test_adapter_mode_needs_adapters(setup):
    _, vocab, _, config = setup
    with pytest.raises(ValueError):
        train_stage(Encoder(config, seed=1), parse_task(setup), TrainSchedule(mode="adapter"), vocab=vocab)


def test_empty_split_and_nan(setup):
    data, vocab, labels, config = setup
    empty = ParseTask(vocab, labels, config.hidden, data["train"], [])
    with pytest.raises(ValueError):
        train_stage(Encoder(config, seed=1), empty, TrainSchedule(), vocab=vocab)
    enc = Encoder(config, seed=1)
    enc.params["base/emb/tok"].data[:] = np.nan
    with pytest.raises(FloatingPointError):
        train_stage(enc, parse_task(setup), TrainSchedule(**FAST), vocab=vocab)


def test_mlm_masks_dynamic_train_fixed_dev(toy_small, tiny_config):
    vocab = toy_small["vocab"]
    words = [s.words for s in toy_small["train"]]
    task = MlmTask(vocab, 16, words[:20], words[20:30], seed=3)
    dev_masks = [ex.fixed.positions for ex in task.dev]
    task.mask_log = []
    train_stage(Encoder(tiny_config(len(vocab)), seed=1), task,
                TrainSchedule(max_epochs=2, eval_every=5, lr=1e-3), seed=0, vocab=vocab)
    assert [ex.fixed.positions for ex in task.dev] == dev_masks
    by_sentence: dict[int, list] = {}
    for idx, pos in task.mask_log:
        by_sentence.setdefault(idx, []).append(pos)
    assert all(len(v) == 2 for v in by_sentence.values()) and len(by_sentence) == 20
    assert any(v[0] != v[1] for v in by_sentence.values())
    again = MlmTask(vocab, 16, words[:20], words[20:30], seed=3)
    assert [ex.fixed.positions for ex in again.dev] == dev_masks


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(setup, tmp_path):
    _, vocab, _, config = setup
    enc = Encoder(config, seed=1)
    enc.inject_adapters(AdapterConfig(size=4), seed=2)
    task = parse_task(setup)
    res = train_stage(enc, task, TrainSchedule(**FAST), seed=0, vocab=vocab)
    path = tmp_path / "a.ckpt"
    save_checkpoint(res.checkpoint, path)
    loaded = load_checkpoint(path)
    assert loaded.to_bytes() == path.read_bytes() == res.checkpoint.to_bytes()
    assert loaded.rng().bit_generator.state == res.checkpoint.rng().bit_generator.state
    # eval outputs restored bit-exactly
    enc2 = loaded.build_encoder()
    task2 = parse_task(setup, seed=99)
    for n, arr in loaded.head_arrays("parse").items():
        task2.params[n].data = arr
    ex = task.test[0]
    a = task.scores(enc, ex.ids, ex.alignment).arc.data
    b = task2.scores(enc2, ex.ids, ex.alignment).arc.data
    assert np.array_equal(a, b)
    assert loaded.build_vocab().pieces == vocab.pieces


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"IPTK\x00\x00garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        Checkpoint("pretrain", {}, {})


def test_version_mismatch(setup):
    _, vocab, _, config = setup
    blob = bytearray(initial_checkpoint(config, vocab, 0).to_bytes())
    blob[4] = 99
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(bytes(blob))


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------


@pytest.fixture
def seqc_rows(toy_lexicon):
    return generate_seqc(24, 5, toy_lexicon), generate_seqc(8, 6, toy_lexicon), generate_seqc(8, 7, toy_lexicon)


def downstream_spec(vocab, rows, epochs=1):
    tr, dv, te = rows
    return StageSpec("downstream", lambda h, s: SeqcTask(vocab, h, 64, tr, dv, te, num_labels=3, seed=s),
                     TrainSchedule(max_epochs=epochs, batch_size=8, eval_every=2, lr=1e-3), "seqc")


def ipt_spec(setup, mode="standard"):
    data, vocab, labels, _ = setup
    return StageSpec("ipt", lambda h, s: ParseTask(vocab, labels, h, data["train"], data["dev"], seed=s),
                     TrainSchedule(**FAST, mode=mode))


def test_check_sequence():
    dummy = lambda k: StageSpec(k, None, TrainSchedule())  # noqa: E731
    check_sequence([dummy("ipt"), dummy("downstream")])
    for bad in ([], [dummy("ipt"), dummy("ilmt")], [dummy("downstream"), dummy("ipt")],
                [dummy("pretrain")], [dummy("downstream"), dummy("downstream")]):
        with pytest.raises(ValueError):
            check_sequence(bad)


def test_downstream_only_equals_single_stage(setup, seqc_rows):
    _, vocab, _, config = setup
    base = initial_checkpoint(config, vocab, 0)
    spec = downstream_spec(vocab, seqc_rows)
    seq = run_sequence(base, [spec], seed=11)
    seed = fork_seed(11, "downstream")
    direct = train_stage(base.build_encoder(), spec.make_task(config.hidden, seed), spec.schedule,
                         seed, vocab, "downstream")
    assert seq.checkpoint.to_bytes() == direct.checkpoint.to_bytes()
    assert 0 <= seq.metrics["downstream"]["accuracy"] <= 100


def test_ipt_changes_downstream_start_and_drops_head(setup, seqc_rows):
    _, vocab, _, config = setup
    base = initial_checkpoint(config, vocab, 0)
    seq = run_sequence(base, [ipt_spec(setup), downstream_spec(vocab, seqc_rows)], seed=11)
    assert encoder_diff(base, seq.encoders["ipt"])
    assert not any(n.startswith("parse/") for n in seq.checkpoint.arrays)
    assert any(n.startswith("seqc/") for n in seq.checkpoint.arrays)
    assert set(seq.metrics) == {"ipt", "downstream"}


def test_adapter_sequence_unfreezes_downstream(setup, seqc_rows):
    _, vocab, _, config = setup
    base = initial_checkpoint(config, vocab, 0)
    seq = run_sequence(base, [ipt_spec(setup, "adapter"), downstream_spec(vocab, seqc_rows)], seed=3,
                       adapter=AdapterConfig(size=4))
    inter = seq.encoders["ipt"]
    assert all(np.array_equal(base.arrays[n], inter.arrays[n]) for n in base.arrays)
    changed = encoder_diff(inter, seq.encoders["downstream"])
    assert any(n.startswith("base/") for n in changed)
    assert any(n.startswith("adapter/") for n in changed)


def test_sequence_determinism_and_tokenizer_guard(setup, seqc_rows, toy_small):
    _, vocab, _, config = setup
    base = initial_checkpoint(config, vocab, 0)
    a = run_sequence(base, [downstream_spec(vocab, seqc_rows)], seed=2)
    b = run_sequence(base, [downstream_spec(vocab, seqc_rows)], seed=2)
    assert a.metrics == b.metrics and a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    from iptkit.tokenizer import train_bpe
    other = train_bpe([s.words for s in toy_small["train"]], 270)
    with pytest.raises(ValueError):
        run_sequence(base, [downstream_spec(other, seqc_rows)], seed=2)


def test_mcc_task_trains(setup, toy_lexicon):
    _, vocab, _, config = setup
    rows = generate_mcc(12, 1, toy_lexicon), generate_mcc(6, 2, toy_lexicon), generate_mcc(6, 3, toy_lexicon)
    task = MccTask(vocab, config.hidden, 64, *rows, seed=0)
    res = train_stage(Encoder(config, seed=1), task, TrainSchedule(max_epochs=1, eval_every=1, lr=1e-3),
                      vocab=vocab, stage="downstream")
    assert res.steps == 2
    assert 0 <= task.evaluate(Encoder(config, seed=1))["accuracy"] <= 100
