import csv
import json
import math

import numpy as np
import pytest

from dgnn import checkpoint as ckpt
from dgnn import cli, units
from dgnn.config import RunConfig
from dgnn.data import community_stream, load_edge_stream, write_edge_stream, write_labels
from dgnn.evaluation import temporal_split
from dgnn.experiment import TrainingRun, fit_link_prediction

SMALL = ["--d", "4", "--batch-size", "32", "--lr", "0.01"]


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    rows, comm = community_stream(n_nodes=30, n_events=150, seed=7)
    write_edge_stream(root / "edges.tsv", rows)
    write_labels(root / "labels.tsv", [(k, f"c{v}") for k, v in comm.items()])
    return root


@pytest.fixture(scope="module")
def trained(toy):
    out = toy / "model.ckpt"
    assert cli.main(["train", "--data", str(toy / "edges.tsv"), *SMALL, "--epochs", "2", "--out", str(out),
                     "--metrics", str(toy / "metrics.csv"), "--no-timing"]) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- validate -------------------------------------------------------------------------


def test_validate_reports_counts(toy, capsys):
    assert cli.main(["validate", str(toy / "edges.tsv")]) == 0
    out = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert out["events"] == "150" and out["nodes"] == "30" and out["sorted"] == "yes"
    assert 40 < float(out["duration_days"]) < 80


def test_validate_empty_and_single_line(tmp_path, capsys, caplog):
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    assert cli.main(["validate", str(empty)]) == 0
    out = capsys.readouterr().out
    assert "events\t0" in out and "nodes\t0" in out and "duration_days\t0.0" in out
    assert "no events" in caplog.text
    one = tmp_path / "one.tsv"
    one.write_text("a\tb\t1700000000\n")
    assert cli.main(["validate", str(one)]) == 0
    assert "duration_days\t0.0" in capsys.readouterr().out


def test_validate_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("a\tb\t1\nc\td\n")
    assert cli.main(["validate", str(bad)]) == 2
    assert ":2:" in capsys.readouterr().err
    unsorted = tmp_path / "unsorted.tsv"
    unsorted.write_text("a\tb\t9\nb\tc\t1\n")
    assert cli.main(["validate", str(unsorted)]) == 2
    assert cli.main(["validate", "--sort", str(unsorted)]) == 0
    assert "sorted\tno" in capsys.readouterr().out
    assert cli.main(["validate", str(tmp_path / "missing.tsv")]) == 2


# -- train ----------------------------------------------------------------------------


def test_train_writes_metrics_and_checkpoint(toy, trained):
    rows = read_csv(toy / "metrics.csv")
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert list(rows[0]) == ["epoch", "mean_loss", "events_per_sec"]
    assert trained.read_bytes()[:5] == b"DGNN\x01"
    ck = ckpt.load(trained)
    assert ck.run.epochs_done == 2 and ck.run.cfg.d == 4


def test_fixed_seed_rerun_gives_identical_metrics(toy, tmp_path):
    outs = []
    for i in range(2):
        m = tmp_path / f"m{i}.csv"
        cli.main(["train", "--data", str(toy / "edges.tsv"), *SMALL, "--epochs", "2", "--seed", "3",
                  "--out", str(tmp_path / f"c{i}.ckpt"), "--metrics", str(m), "--no-timing"])
        outs.append(m.read_bytes())
    assert outs[0] == outs[1]
    a, b = ckpt.load(tmp_path / "c0.ckpt"), ckpt.load(tmp_path / "c1.ckpt")
    assert a.run.params.flat().tobytes() == b.run.params.flat().tobytes()


def test_lr_zero_keeps_initial_params(toy, tmp_path):
    out = tmp_path / "z.ckpt"
    assert cli.main(["train", "--data", str(toy / "edges.tsv"), "--d", "4", "--lr", "0", "--seed", "2",
                     "--out", str(out), "--metrics", str(tmp_path / "m.csv")]) == 0
    init = TrainingRun.start(RunConfig(d=4, seed=2)).params
    got = ckpt.load(out).run.params
    assert all(got.arrays[k].tobytes() == init.arrays[k].tobytes() for k in init.arrays)


def test_config_file_with_flag_override(toy, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("d = 6\ntau = 3\nepochs = 1\n")
    out = tmp_path / "c.ckpt"
    assert cli.main(["train", "--data", str(toy / "edges.tsv"), "--config", str(cfg), "--d", "3",
                     "--no-attention", "--out", str(out), "--metrics", str(tmp_path / "m.csv")]) == 0
    c = ckpt.load(out).run.cfg
    assert (c.d, c.tau, c.attention) == (3, 3.0, False)
    cfg.write_text("d = 6\nbogus = 1\n")
    assert cli.main(["train", "--data", str(toy / "edges.tsv"), "--config", str(cfg), "--out", str(out)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_blowup_exits_three(toy, tmp_path, capsys):
    code = cli.main(["train", "--data", str(toy / "edges.tsv"), "--d", "4", "--lr", "1e300", "--optimizer", "sgd",
                     "--batch-size", "10", "--out", str(tmp_path / "c.ckpt"), "--metrics", str(tmp_path / "m.csv")])
    assert code == 3
    assert "numeric failure" in capsys.readouterr().err


def test_node_classification_train_and_eval(toy, tmp_path, capsys):
    out = tmp_path / "nc.ckpt"
    base = ["--data", str(toy / "edges.tsv"), "--labels", str(toy / "labels.tsv")]
    assert cli.main(["train", *base, "--task", "node_classification", *SMALL, "--out", str(out),
                     "--metrics", str(tmp_path / "m.csv")]) == 0
    ck = ckpt.load(out)
    assert ck.run.n_classes == 3 and sorted(ck.class_names) == ["c0", "c1", "c2"]
    assert cli.main(["eval", *base, "--checkpoint", str(out), "--out", str(tmp_path / "e.csv")]) == 0
    rows = read_csv(tmp_path / "e.csv")
    assert [r["metric"] for r in rows] == ["f1_micro", "f1_macro"]
    assert cli.main(["train", "--data", str(toy / "edges.tsv"), "--task", "node_classification",
                     "--out", str(out)]) == 2


# -- checkpoint -------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(trained, tmp_path):
    ck = ckpt.load(trained)
    again = tmp_path / "again.ckpt"
    ckpt.save(again, ck)
    assert again.read_bytes() == trained.read_bytes()
    ck2 = ckpt.load(again)
    for a, b in ((ck.run.params, ck2.run.params), (ck.run.best_params, ck2.run.best_params)):
        assert all(a.arrays[k].tobytes() == b.arrays[k].tobytes() for k in a.arrays)
    assert ck2.run.opt_state.step == ck.run.opt_state.step
    assert ck2.features.tobytes() == ck.features.tobytes()


def test_checkpoint_rejects_foreign_files(tmp_path, trained):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(junk)
    junk.write_bytes(trained.read_bytes() + b"\0")
    with pytest.raises(ckpt.CheckpointError, match="trailing"):
        ckpt.load(junk)


def test_header_enumerates_parameters(trained):
    raw = trained.read_bytes()
    n = int.from_bytes(raw[5:9], "little")
    header = json.loads(raw[9 : 9 + n])
    assert header["format_version"] == 1
    assert len(header["param_layout"]) == 41
    assert header["param_count"] == sum(int(np.prod(s)) for s in header["param_layout"].values())


def test_resume_matches_uninterrupted_training(toy, tmp_path):
    data = str(toy / "edges.tsv")
    first = tmp_path / "one.ckpt"
    cli.main(["train", "--data", data, *SMALL, "--epochs", "1", "--out", str(first), "--metrics", str(tmp_path / "a")])
    resumed = tmp_path / "resumed.ckpt"
    assert cli.main(["train", "--data", data, "--resume", str(first), "--epochs", "2", "--out", str(resumed),
                     "--metrics", str(tmp_path / "b"), "--no-timing"]) == 0
    straight = tmp_path / "straight.ckpt"
    cli.main(["train", "--data", data, *SMALL, "--epochs", "2", "--out", str(straight),
              "--metrics", str(tmp_path / "c"), "--no-timing"])
    a, b = ckpt.load(resumed), ckpt.load(straight)
    assert a.run.params.flat().tobytes() == b.run.params.flat().tobytes()
    assert all(a.run.opt_state.m[k].tobytes() == b.run.opt_state.m[k].tobytes() for k in a.run.opt_state.m)
    assert (tmp_path / "b").read_bytes() == (tmp_path / "c").read_bytes()


# -- eval ----------------------------------------------------------------------------------


def test_eval_outputs(toy, trained, tmp_path):
    out, summary, ranks = tmp_path / "e.csv", tmp_path / "s.json", tmp_path / "r.csv"
    assert cli.main(["eval", "--data", str(toy / "edges.tsv"), "--checkpoint", str(trained), "--out", str(out),
                     "--summary", str(summary), "--ranks", str(ranks)]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["metric", "value", "k", "seed", "variant", "tau"]
    assert [(r["metric"], r["k"]) for r in rows] == [("mrr", ""), ("recall", "20"), ("recall", "50"),
                                                     ("unseen_pairs", "")]
    s = json.loads(summary.read_text())
    assert s["pairs"] + s["unseen_pairs"] == 2 * len(temporal_split(load_edge_stream(toy / "edges.tsv").events).test)
    rank_rows = read_csv(ranks)
    assert len(rank_rows) == s["pairs"]
    assert float(rows[0]["value"]) == pytest.approx(np.mean([1 / int(r["rank"]) for r in rank_rows]), abs=1e-15)


def test_eval_matches_brute_force_oracle(toy, trained, tmp_path):
    """Recompute every rank by sorting full similarity lists."""
    out = tmp_path / "e.csv"
    cli.main(["eval", "--data", str(toy / "edges.tsv"), "--checkpoint", str(trained), "--split", "valid",
              "--out", str(out)])
    got = {(r["metric"], r["k"]): float(r["value"]) for r in read_csv(out)}

    ck = ckpt.load(trained)
    stream = load_edge_stream(toy / "edges.tsv")
    split = temporal_split(stream.events)
    from dgnn.experiment import features_after

    feats = features_after(split.train, ck.run.best_params, ck.run.cfg)
    Ps, Pg = ck.run.best_params.arrays["lp.P_s"], ck.run.best_params.arrays["lp.P_g"]

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))

    ranks = []
    for ev in split.valid:
        for q, truth, q_P, c_P in ((ev.src, ev.dst, Ps, Pg), (ev.dst, ev.src, Pg, Ps)):
            if q not in feats or truth not in feats:
                continue
            scored = sorted(((cos(q_P @ feats[q], c_P @ feats[c]), c) for c in feats), reverse=True)
            s_truth = next(s for s, c in scored if c == truth)
            ranks.append(1 + sum(1 for s, _ in scored if s > s_truth))
    assert got[("mrr", "")] == math.fsum(1 / r for r in ranks) / len(ranks)
    assert got[("recall", "20")] == sum(r <= 20 for r in ranks) / len(ranks)


def test_eval_rejects_mismatched_mapping(toy, trained, tmp_path, capsys):
    rows, _ = community_stream(n_nodes=30, n_events=150, seed=8)
    other = tmp_path / "other.tsv"
    write_edge_stream(other, rows)
    assert cli.main(["eval", "--data", str(other), "--checkpoint", str(trained)]) == 2
    assert "incompatible" in capsys.readouterr().err


# -- ablate, sweep, export -------------------------------------------------------------------


def test_ablate_table(toy, tmp_path):
    out = tmp_path / "ablate.csv"
    assert cli.main(["ablate", "--data", str(toy / "edges.tsv"), *SMALL, "--out", str(out)]) == 0
    rows = read_csv(out)
    assert [r["variant"] for r in rows] == ["DGNN", "DGNN-prop", "DGNN-ti", "DGNN-att"]
    assert list(rows[0]) == ["variant", "mrr", "recall@20", "recall@50"]
    assert cli.main(["ablate", "--data", str(toy / "edges.tsv"), "--variants", "nope", "--out", str(out)]) == 2


def test_prop_variant_never_reaches_propagation(toy, monkeypatch):
    calls = {"n": 0}
    real = units.prop_increments

    def counting(*a, **k):
        calls["n"] += 1
        return real(*a, **k)

    monkeypatch.setattr(units, "prop_increments", counting)
    stream = load_edge_stream(toy / "edges.tsv")
    cfg = RunConfig(d=4, batch_size=32, propagation=False)
    cli.train_run(cfg, stream)
    assert calls["n"] == 0
    cli.train_run(cfg.replace(propagation=True), stream)
    assert calls["n"] > 0


def test_sweep_default_grid(toy, tmp_path):
    out = tmp_path / "sweep.csv"
    assert cli.main(["sweep-tau", "--data", str(toy / "edges.tsv"), "--d", "3", "--batch-size", "50",
                     "--out", str(out)]) == 0
    rows = read_csv(out)
    taus = [float(r["tau"]) for r in rows]
    assert taus == [1, 7, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100]
    assert list(rows[0]) == ["tau", "mrr", "recall@20", "recall@50"]


def test_sweep_tau_zero_equals_prop_disabled(toy, tmp_path):
    stream = load_edge_stream(toy / "edges.tsv")
    gaps = [b.t - a.t for a, b in zip(stream.events, stream.events[1:])]
    assert min(gaps) > 0
    out = tmp_path / "sweep.csv"
    cli.main(["sweep-tau", "--data", str(toy / "edges.tsv"), *SMALL, "--taus", "5,0", "--out", str(out)])
    rows = read_csv(out)
    assert [float(r["tau"]) for r in rows] == [0.0, 5.0]
    abl = tmp_path / "abl.csv"
    cli.main(["ablate", "--data", str(toy / "edges.tsv"), *SMALL, "--variants", "prop", "--out", str(abl)])
    prop_row = read_csv(abl)[1]
    assert rows[0]["mrr"] == prop_row["mrr"] and rows[0]["recall@20"] == prop_row["recall@20"]


def test_sweep_parallel_matches_serial(toy, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["sweep-tau", "--data", str(toy / "edges.tsv"), "--d", "3", "--batch-size", "50", "--taus", "1,30"]
    cli.main([*args, "--out", str(a)])
    cli.main([*args, "--jobs", "2", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_export_round_trip(trained, tmp_path):
    out = tmp_path / "emb.txt"
    assert cli.main(["export", "--checkpoint", str(trained), "--out", str(out)]) == 0
    ck = ckpt.load(trained)
    emb = cli.load_embeddings(out)
    assert list(emb) == ck.node_ids
    assert all(len(line.split("\t")[1].split()) == 4 for line in out.read_text().splitlines())
    for i, name in enumerate(ck.node_ids):
        assert emb[name].tobytes() == ck.features[i].tobytes()


def test_resumed_link_run_keeps_history(toy):
    stream = load_edge_stream(toy / "edges.tsv")
    cfg = RunConfig(d=3, batch_size=50, epochs=1)
    run = cli.train_run(cfg, stream)
    split = temporal_split(stream.events)
    fit_link_prediction(run, split, epochs=1)
    assert [r.epoch for r in run.history] == [0, 1] and run.epochs_done == 2
