import dataclasses
import json

import numpy as np
import pytest

from hetembed.cli import main
from hetembed.hetgraph import HetGraph, save_graph
from hetembed.model import CheckpointError
from hetembed.sampler import MetaPath, sample_all
from hetembed.synthetic import SyntheticConfig, generate_synthetic
from hetembed.trainer import (
    CONFIG_KEYS,
    TrainConfig,
    TrainingDivergedError,
    evaluate,
    export_embeddings,
    format_ablation,
    load_config,
    parse_config_text,
    run_ablation,
    train,
)

SMALL = SyntheticConfig(n_users=8, n_recipes=45, n_ingredients=12, image_dim=6, text_dim=5, nutrient_dim=4, user_dim=3)
FAST = TrainConfig(hidden=8, epochs=3, n_walks=10, p=3)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SMALL, seed=2)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory, data):
    d = tmp_path_factory.mktemp("graph")
    save_graph(data[0], d)
    return d


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    g, labels = data
    res = train(g, labels, FAST)
    path = res.save(tmp_path_factory.mktemp("ckpt") / "model.npz")
    return res, path


# ---------------------------------------------------------------- config


def test_defaults():
    c = TrainConfig()
    assert (c.lr, c.hidden, c.batch_size, c.epochs, c.lam) == (0.005, 128, 4096, 100, 0.1)
    assert (c.metapath, c.p, c.n_walks, c.split) == ("R-U-R", 10, 100, (0.70, 0.15, 0.15))
    assert (c.attack.bound, c.attack.step, c.attack.iters) == (0.02, 0.005, 5)
    assert all(getattr(c.switches, f) for f in ("ns", "na", "ca", "ra", "al"))


def test_config_file_parsing(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nlr = 0.01\nhidden=16  # inline\nna = off\nsplit = 0.6, 0.2, 0.2\n\nmetapath = R-I-R\n")
    c = load_config(f)
    assert (c.lr, c.hidden, c.na, c.split, c.metapath) == (0.01, 16, False, (0.6, 0.2, 0.2), "R-I-R")
    assert c.epochs == 100
    for bad in ("nope = 1", "hidden", "na = maybe", "lam = -1", "metapath = R-U"):
        with pytest.raises(ValueError):
            parse_config_text(bad)


def test_every_field_overridable():
    for key in CONFIG_KEYS:
        assert key in TrainConfig().to_dict()


# ---------------------------------------------------------------- training


def test_training_history_and_provenance(trained):
    res, _ = trained
    rep = res.report
    assert len(rep.history) == FAST.epochs
    for row in rep.history:
        assert all(np.isfinite(row[k]) for k in ("l_sup", "l_adv", "loss"))
        assert row["loss"] == pytest.approx(row["l_sup"] + FAST.lam * row["l_adv"])
    assert rep.to_dict()["config"]["hidden"] == 8
    assert 0 <= rep.best_epoch < FAST.epochs
    assert rep.test.micro_f1 == pytest.approx(rep.test.accuracy)


def test_lambda_zero_matches_al_off(data):
    g, labels = data
    a = train(g, labels, FAST.replace(lam=0.0)).report.to_dict()
    b = train(g, labels, FAST.replace(al=False)).report.to_dict()
    for part in ("train", "val", "test", "history", "best_epoch"):
        assert a[part] == b[part]


def test_same_seeds_identical_json(data):
    g, labels = data
    assert train(g, labels, FAST).report.to_json() == train(g, labels, FAST).report.to_json()


def test_different_model_seed_changes_curve(data):
    g, labels = data
    a = train(g, labels, FAST).report.history
    b = train(g, labels, FAST.replace(model_seed=1)).report.history
    assert a != b


def test_seed_isolation(data):
    g, labels = data
    path = MetaPath.parse("R-U-R")
    s0 = sample_all(g, path, FAST.walk)
    s1 = sample_all(g, path, FAST.replace(sampler_seed=9).walk)
    assert any(s0[v].metapath != s1[v].metapath for v in s0)
    r0 = train(g, labels, FAST.replace(epochs=1))
    r1 = train(g, labels, FAST.replace(epochs=1, sampler_seed=9))
    assert r0.split.assignment == r1.split.assignment
    r2 = train(g, labels, FAST.replace(epochs=1, split_seed=3))
    assert r2.split.assignment != r0.split.assignment
    # the graph is fixed by its own seed only
    assert generate_synthetic(SMALL, seed=2)[0].fingerprint() == g.fingerprint()


def test_training_leaves_attributes_untouched(data):
    g, labels = data
    before = {m: t.matrix.copy() for m, t in g.attributes.items()}
    train(g, labels, FAST.replace(epochs=1))
    for m, x in before.items():
        assert np.array_equal(g.attributes[m].matrix, x)


def test_minibatches_run(data):
    g, labels = data
    rep = train(g, labels, FAST.replace(batch_size=8, epochs=1)).report
    assert len(rep.history) == 1


def test_too_few_training_nodes_per_class():
    g, labels = generate_synthetic(SyntheticConfig(n_users=3, n_recipes=6, n_ingredients=3, n_classes=3, image_dim=2,
                                                   text_dim=2, nutrient_dim=2, user_dim=2), seed=0)
    with pytest.raises(ValueError):
        train(g, labels, FAST)


def test_divergence_is_reported(data):
    g, labels = data
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
        train(g, labels, FAST.replace(lr=1e300, epochs=5))


def test_isolated_labeled_node_dropped_with_warning(caplog):
    g, labels = generate_synthetic(SMALL, seed=4)
    # rebuild with one recipe stripped of every edge
    victim = sorted(labels.labels)[0]
    edges = [(r, a, b) for r, a, b in g.edges() if victim not in (a, b)]
    h = HetGraph({v: g.node_type(v) for v in g.nodes()}, edges, g.attributes, g.node_labels)
    rep = train(h, labels, FAST.replace(epochs=1)).report
    assert victim in rep.dropped


# ---------------------------------------------------------------- evaluate / export


def test_checkpoint_round_trip_bitwise(trained, data):
    res, path = trained
    g, labels = data
    again = evaluate(path, g, labels, res.split, "test")
    assert again == res.report.test
    assert evaluate(path, g, labels, which="val") == res.report.val


def test_evaluate_rejects_mismatched_graph(trained):
    _, path = trained
    other, labels = generate_synthetic(dataclasses.replace(SMALL, image_dim=7), seed=2)
    with pytest.raises(CheckpointError):
        evaluate(path, other, labels)


def test_export_three_nodes_hidden_128(data, tmp_path):
    g, labels = data
    res = train(g, labels, FAST.replace(hidden=128, epochs=1))
    ckpt = res.save(tmp_path / "m.npz")
    ids = ["r0003", "r0001", "r0002"]
    out = export_embeddings(ckpt, g, ids, tmp_path / "e.tsv")
    lines = out.read_text().splitlines()
    assert lines[0].startswith("#")
    rows = [ln.split("\t") for ln in lines[1:]]
    assert [r[0] for r in rows] == sorted(ids)
    assert all(len(r[2].split(",")) == 128 for r in rows)
    assert rows[0][1] == g.node_labels["cuisine"]["r0001"]
    first = out.read_bytes()
    export_embeddings(ckpt, g, ids, out)
    assert out.read_bytes() == first


def test_export_empty_and_unknown(trained, data, tmp_path):
    _, path = trained
    g, _ = data
    out = export_embeddings(path, g, [], tmp_path / "e.tsv")
    assert len(out.read_text().splitlines()) == 1
    with pytest.raises(KeyError):
        export_embeddings(path, g, ["r9999"], tmp_path / "x.tsv")


def test_ablation_grid_and_table(data):
    g, labels = data
    reports = run_ablation(g, labels, FAST.replace(epochs=1))
    assert list(reports) == ["ns", "na", "ca", "ra", "al", "full"]
    assert reports["na"].config["na"] is False and reports["full"].config["na"] is True
    header, f1_row, acc_row = format_ablation(reports).splitlines()
    assert header.split() == ["-NS", "-NA", "-CA", "-RA", "-AL", "full"]
    assert f1_row.split()[0] == "Micro-F1" and len(f1_row.split()) == 7
    assert acc_row.split()[0] == "Acc"
    with pytest.raises(ValueError):
        run_ablation(g, labels, FAST, columns=["xx"])


# ---------------------------------------------------------------- cli


def test_cli_end_to_end(tmp_path, capsys):
    d = tmp_path / "g"
    assert main(["synth", "--recipes", "45", "--users", "8", "--ingredients", "12", "--classes", "3",
                 "--image-dim", "4", "--text-dim", "4", "--seed", "7", "--out", str(d)]) == 0
    for name in ("nodes.tsv", "edges.tsv", "attrs.image.tsv", "attrs.text.tsv", "attrs.nutrient.tsv",
                 "attrs.user.tsv"):
        assert (d / name).exists()
    run = tmp_path / "run"
    cfg = tmp_path / "c.cfg"
    cfg.write_text("hidden = 8\nn_walks = 10\n")
    assert main(["train", "--data", str(d), "--task", "cuisine", "--epochs", "5", "--config", str(cfg),
                 "--out", str(run)]) == 0
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["config"]["hidden"] == 8 and metrics["config"]["epochs"] == 5
    assert len(metrics["history"]) == 5
    assert "Total" in capsys.readouterr().out

    assert main(["eval", "--data", str(d), "--checkpoint", str(run / "checkpoint.npz"),
                 "--json", str(tmp_path / "ev.json")]) == 0
    assert json.loads((tmp_path / "ev.json").read_text()) == metrics["test"]

    assert main(["export", "--data", str(d), "--checkpoint", str(run / "checkpoint.npz"),
                 "--nodes", "r0000,r0001,r0002", "--out", str(tmp_path / "e.tsv")]) == 0
    assert len((tmp_path / "e.tsv").read_text().splitlines()) == 4


def test_cli_ablate_prints_six_columns(data_dir, capsys):
    assert main(["ablate", "--data", str(data_dir), "--epochs", "1", "--hidden", "4", "--n-walks", "5"]) == 0
    out = capsys.readouterr().out
    assert "-NS" in out and "-AL" in out and "full" in out


def test_cli_run_is_deterministic(data_dir, tmp_path):
    args = ["train", "--data", str(data_dir), "--epochs", "2", "--hidden", "4", "--n-walks", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["train"],
        ["train", "--data", "x", "--bogus"],
        ["frobnicate"],
        ["train", "--data", "x", "--lam", "-1"],
        ["train", "--data", "x", "--hidden", "many"],
    ],
)
def test_cli_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_cli_data_errors_exit_2(tmp_path, data_dir, trained):
    assert main(["train", "--data", str(tmp_path / "missing")]) == 2
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "nodes.tsv").write_text("r1\tdish\n")
    assert main(["train", "--data", str(tmp_path / "bad")]) == 2
    _, ckpt = trained
    assert main(["export", "--data", str(data_dir), "--checkpoint", str(ckpt), "--nodes", "r9999",
                 "--out", str(tmp_path / "e.tsv")]) == 2
    assert main(["eval", "--data", str(data_dir), "--checkpoint", str(tmp_path / "none.npz")]) == 2


def test_cli_runtime_error_exit_3(data_dir):
    with np.errstate(all="ignore"):
        assert main(["train", "--data", str(data_dir), "--epochs", "5", "--hidden", "4", "--n-walks", "5",
                     "--lr", "1e300", "--out", "/tmp/hetembed-diverge"]) == 3
