import dataclasses
import json

import numpy as np
import pytest

from mgsa import probe
from mgsa.autodiff import Tensor
from mgsa.attention import MgSaConfig, default_head_assignment
from mgsa.partition import ConfigError
from mgsa.probe import (
    Checkpoint,
    MatrixSpec,
    ProbeTask,
    TrainConfig,
    dump_attention,
    evaluate,
    format_table,
    report_table,
    run_experiment_matrix,
    token_batches,
    train,
    train_config_from_dict,
    train_config_to_dict,
    variant_config,
)
from mgsa.treebank import generate_corpus, split_corpus

SMALL = MgSaConfig(d_model=16, n_heads=4, ffn_dim=32)


@pytest.fixture(scope="module")
def splits():
    return split_corpus(generate_corpus(None, 300, 11))


def small_train(**kw):
    return TrainConfig(**{"model": SMALL, "epochs": 3, "batch_tokens": 256, **kw})


def small_matrix(**kw):
    return MatrixSpec(**{"train": small_train(epochs=2, tasks=("SPC", "Voice")), "corpus_size": 150, **kw})


# ---------------------------------------------------------------- batching and tasks


def test_token_batches_respect_budget_and_cover_everything():
    lengths = list(np.random.default_rng(0).integers(3, 40, size=200))
    batches = token_batches(lengths, 128, np.random.default_rng(1))
    assert sorted(i for b in batches for i in b) == list(range(200))
    assert all(sum(lengths[i] for i in b) <= 128 or len(b) == 1 for b in batches)


def test_token_batches_are_seeded():
    lengths = [5] * 50
    a = token_batches(lengths, 40, np.random.default_rng(3))
    assert a == token_batches(lengths, 40, np.random.default_rng(3))
    assert token_batches(lengths, 40) == [list(range(i, i + 8)) for i in range(0, 48, 8)] + [[48, 49]]
    assert token_batches([50, 3], 40) == [[0], [1]]


def test_probe_task_unknown_labels(splits):
    task = ProbeTask.fit("POS", splits["train"])
    ids, known = task.encode(["NN", "not-a-tag"])
    assert known.tolist() == [True, False] and ids[1] == 0
    with pytest.raises(ConfigError):
        ProbeTask.fit("Mood", splits["train"])


def test_train_config_round_trip():
    config = small_train(optimizer="adam", warmup_steps=4, tasks=("POS",))
    config = dataclasses.replace(config, model=dataclasses.replace(
        SMALL, head_assignment=default_head_assignment(4, "syntactic"), interaction="onlstm"))
    assert train_config_from_dict(json.loads(json.dumps(train_config_to_dict(config)))) == config


@pytest.mark.parametrize("kw", [{"optimizer": "rmsprop"}, {"lr": 0.0}, {"epochs": 0}, {"tasks": ()},
                                {"tasks": ("POS", "POS")}, {"decay": "cosine"}, {"batch_tokens": 0}])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        small_train(**kw)


# ---------------------------------------------------------------- training


def test_training_learns_and_loss_decreases(splits):
    result = train(small_train(epochs=4, batch_tokens=64, tasks=("SPC", "POS")), splits["train"], splits["valid"])
    assert all(b <= a for a, b in zip(result.epoch_loss, result.epoch_loss[1:]))
    assert len(result.history) == 4
    assert result.history[-1]["valid"]["SPC"] > result.history[0]["valid"]["SPC"] + 0.2
    acc = evaluate(result.checkpoint, splits["test"])
    assert set(acc) == {"SPC", "POS"} and acc["SPC"] > 0.8


def test_same_seed_same_result(splits):
    a = train(small_train(epochs=1), splits["train"], splits["valid"])
    b = train(small_train(epochs=1), splits["train"], splits["valid"])
    assert a.epoch_loss == b.epoch_loss
    assert json.dumps(a.checkpoint.to_dict()) == json.dumps(b.checkpoint.to_dict())
    c = train(small_train(epochs=1, seed=2), splits["train"], splits["valid"])
    assert c.epoch_loss != a.epoch_loss


def test_tag_loss_appears_in_decomposition(splits):
    model = dataclasses.replace(SMALL, head_assignment=default_head_assignment(4, "syntactic"), tag_loss_weight=0.001)
    result = train(small_train(model=model, epochs=1, tasks=("POS",)), splits["train"])
    parts = result.epoch_parts[0]
    assert parts["tags"] > 0
    assert abs(parts["total"] - (parts["POS"] + 0.001 * parts["tags"])) < 1e-9


def test_adam_with_warmup_and_step_cap(splits):
    result = train(small_train(optimizer="adam", lr=1e-3, warmup_steps=2, max_steps=3, tasks=("Voice",)),
                   splits["train"])
    assert result.steps == 3 and len(result.epoch_loss) == 1


def test_divergence_is_reported(splits, monkeypatch):
    def explode(*args, **kw):
        raise FloatingPointError("non-finite")
    monkeypatch.setattr(probe, "batch_loss", explode)
    with pytest.raises(probe.TrainingDiverged, match="step 1"):
        train(small_train(epochs=1), splits["train"])


# ---------------------------------------------------------------- evaluation and checkpoints


def test_checkpoint_round_trip(tmp_path, splits):
    result = train(small_train(epochs=1, tasks=("SPC", "POS")), splits["train"])
    path = tmp_path / "ck.json"
    result.checkpoint.save(path)
    loaded = Checkpoint.load(path)
    assert evaluate(loaded, splits["test"]) == evaluate(result.checkpoint, splits["test"])
    with pytest.raises(ConfigError):
        evaluate(loaded, splits["test"], ["Voice"])


class Oracle:
    """Stub model whose logits are one-hot on a chosen label per item."""

    def __init__(self, split, tasks, choose):
        self.levels = {t.name: t.level for t in tasks}
        self.batches = iter(token_batches(split.lengths, 2048))
        self.split, self.tasks, self.choose = split, tasks, choose

    def __call__(self, batch, record_attention=False):
        idx = next(self.batches)
        logits = {}
        for t in self.tasks:
            width = batch.width if t.level == "token" else 1
            z = np.zeros((len(idx), width, t.n_labels))
            for row, i in enumerate(idx):
                picks = self.choose(t, self.split.labels[t.name][i])
                z[row, np.arange(len(picks)), picks] = 1.0
            logits[t.name] = Tensor(z if t.level == "token" else z[:, 0])
        return logits, None


def test_evaluate_perfect_and_majority(splits):
    examples = splits["test"] + [splits["valid"][0]]
    tasks = [ProbeTask.fit(n, splits["train"]) for n in ("Voice", "POS")]
    words = probe.token_vocabulary(splits["train"]).to_list()
    split = probe.encode_split(examples, probe.TagVocabulary.from_list(words), tasks)

    def run(choose):
        return evaluate(Oracle(split, tasks, choose), examples, words=words, task_defs=tasks)

    perfect = run(lambda task, gold: gold)
    assert perfect["Voice"] == 1.0
    tags = [t for ex in examples for t in ex.label("POS")]
    unseen = sum(t not in tasks[1].labels for t in tags)
    assert perfect["POS"] == (len(tags) - unseen) / len(tags)

    voice = [ex.label("Voice") for ex in examples]
    majority = max(sorted(set(voice)), key=voice.count)
    idx = tasks[0].labels.index(majority)
    got = run(lambda task, gold: np.full_like(gold, idx))
    assert got["Voice"] == voice.count(majority) / len(voice)

    with pytest.raises(ValueError):
        evaluate(Oracle(split, tasks, lambda t, g: g), examples)


def test_format_table_alignment():
    text = format_table([("Base", {"A": 0.5, "B": 1.0}), ("Longer name", {"A": 0.25})], ["A", "B"])
    lines = text.splitlines()
    assert lines[0].split() == ["#", "Model", "A", "B", "Avg"]
    assert "50.00" in lines[2] and "75.00" in lines[2]
    assert lines[3].split()[-2:] == ["-", "25.00"]
    assert len({len(l) for l in (lines[0], lines[2])}) == 1


# ---------------------------------------------------------------- matrix


def test_variant_configs():
    spec = MatrixSpec(train=small_train())
    base = variant_config(spec, "base", 3).model
    assert base.mg_layers == frozenset() and variant_config(spec, "base", 3).model_config().seed == 3
    inter = variant_config(spec, "syntactic_interaction", 1).model
    assert inter.interaction.value == "onlstm" and inter.tag_loss_weight == 0
    assert variant_config(spec, "ngram", 1).model.head_assignment == default_head_assignment(4, "ngram")
    over = MatrixSpec(train=small_train(), overrides={"ngram": {"composition": "maxpool"}})
    assert variant_config(over, "ngram", 1).model.composition.value == "maxpool"


def test_empty_matrix_gives_empty_report(tmp_path):
    report = run_experiment_matrix(small_matrix(variants=[]), tmp_path)
    assert report["variants"] == []
    assert (tmp_path / "report.json").exists()


def test_failing_variant_is_isolated(tmp_path, monkeypatch):
    real = probe.train

    def flaky(config, *a, **kw):
        if config.model.interaction.value == "onlstm":
            raise probe.TrainingDiverged("boom")
        return real(config, *a, **kw)

    monkeypatch.setattr(probe, "train", flaky)
    report = run_experiment_matrix(small_matrix(variants=["ngram", "syntactic_interaction"]), tmp_path)
    status = {v["name"]: v["status"] for v in report["variants"]}
    assert status == {"ngram": "ok", "syntactic_interaction": "failed"}
    assert "boom" in report_table(report)


def test_several_seeds_report_mean_min_max(tmp_path):
    report = run_experiment_matrix(small_matrix(variants=["base"], seeds=[1, 2, 3]), tmp_path)
    acc = report["variants"][0]["accuracy"]["SPC"]
    vals = [r["accuracy"]["SPC"] for r in report["variants"][0]["runs"]]
    assert acc == {"mean": sum(vals) / 3, "min": min(vals), "max": max(vals)}
    assert "min-max over seeds 1, 2, 3" in (tmp_path / "report.txt").read_text()


def test_reports_are_byte_identical(tmp_path):
    spec = small_matrix(variants=["base", "syntactic"])
    run_experiment_matrix(spec, tmp_path / "a")
    probe._corpus_cache.clear()
    run_experiment_matrix(spec, tmp_path / "b")
    for name in ("report.json", "report.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    timing = json.loads((tmp_path / "a" / "timing.json").read_text())
    assert timing["base"][0]["cpu_seconds"] > 0


def test_parallel_workers_match_serial(tmp_path):
    spec = small_matrix(variants=["base", "ngram"])
    serial = run_experiment_matrix(spec)
    parallel = run_experiment_matrix(dataclasses.replace(spec, workers=2))
    assert json.dumps(serial, sort_keys=True) == json.dumps(parallel, sort_keys=True)


# ---------------------------------------------------------------- attention dumps


def test_dump_attention_rows_and_columns(splits):
    model = dataclasses.replace(SMALL, head_assignment=default_head_assignment(4, "syntactic"), mg_layers={1, 2})
    result = train(small_train(model=model, epochs=1, tasks=("SPC",)), splits["train"])
    example = splits["test"][0]
    dump = dump_attention(result.checkpoint, example)
    assert dump["tokens"] == list(example.tokens) and len(dump["layers"]) == 3
    for layer in dump["layers"]:
        for head in layer["heads"]:
            w = np.asarray(head["weights"])
            assert w.shape[0] == len(example.tokens)
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
            if "spans" in head:
                assert w.shape[1] == len(head["spans"]) == len(head["tags"])
