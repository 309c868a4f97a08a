"""Command line pipeline tests: every command end to end on a small corpus."""
import json

import numpy as np
import pytest

from clusterseq import cli
from clusterseq.data import load_corpus


@pytest.fixture
def workdir(tmp_path):
    rows = []
    t = 0
    for u in range(12):
        for j in range(8):
            rows.append(f"user{u:02d},item{(u + j) % 16:02d},{t}")
            t += 1
    csv_path = tmp_path / "interactions.csv"
    csv_path.write_text("\n".join(rows) + "\n", encoding="utf-8")

    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({
        "embed_dim": 4,
        "batch_size": 4,
        "num_clusters": 2,
        "graph_neighbors": 2,
        "epochs": 1,
        "eval_negatives": 4,
    }), encoding="utf-8")
    return tmp_path, csv_path, cfg_path


def run(argv):
    return cli.main([str(a) for a in argv])


def test_preprocess_command(workdir, capsys):
    tmp, csv_path, cfg_path = workdir
    out = tmp / "prep"
    assert run(["preprocess", "--data", csv_path, "--config", cfg_path,
                "--out", out]) == 0
    assert (out / "corpus.bin").exists()
    assert (out / "corpus_stats.csv").exists()
    assert (out / "effective_config.json").exists()
    assert "wrote" in capsys.readouterr().out
    corpus = load_corpus(out / "corpus.bin")
    assert corpus.user_count == 12
    assert len(corpus.test_users()) == 2


def test_full_pipeline(workdir, capsys):
    tmp, csv_path, cfg_path = workdir
    prep, runs = tmp / "prep", tmp / "runs"
    assert run(["preprocess", "--data", csv_path, "--config", cfg_path,
                "--out", prep]) == 0
    assert run(["train", "--corpus", prep / "corpus.bin", "--config", cfg_path,
                "--out", runs]) == 0
    assert (runs / "model.ckpt").exists()
    assert (runs / "training_log.csv").exists()

    report_dir = tmp / "report"
    assert run(["evaluate", "--corpus", prep / "corpus.bin",
                "--checkpoint", runs / "model.ckpt", "--config", cfg_path,
                "--out", report_dir]) == 0
    captured = capsys.readouterr().out
    assert "mrr=" in captured
    assert (report_dir / "report.csv").exists()
    blob = json.loads((report_dir / "report.json").read_text(encoding="utf-8"))
    assert blob["users"] == 2
    assert blob["negatives"] == 4

    inspect_dir = tmp / "inspect"
    labels_path = tmp / "labels.csv"
    lines = ["user,cluster"] + [f"user{u:02d},{u % 2}" for u in range(12)]
    labels_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    assert run(["inspect-clusters", "--corpus", prep / "corpus.bin",
                "--checkpoint", runs / "model.ckpt", "--config", cfg_path,
                "--labels", labels_path, "--out", inspect_dir]) == 0
    captured = capsys.readouterr().out
    assert "cluster usage:" in captured
    assert "agreement" in captured
    body = (inspect_dir / "assignments.csv").read_text(encoding="utf-8")
    assert body.startswith("user,cluster\n")
    assert "#histogram,0," in body and "#entropy_nats," in body
    users = [l.split(",")[0] for l in body.strip().split("\n")[1:]
             if not l.startswith("#")]
    assert users == [f"user{u:02d}" for u in range(12)]


def test_train_rejects_k_mismatch(workdir, capsys):
    tmp, csv_path, cfg_path = workdir
    prep = tmp / "prep"
    run(["preprocess", "--data", csv_path, "--config", cfg_path, "--out", prep])
    capsys.readouterr()
    code = run(["train", "--corpus", prep / "corpus.bin", "--config", cfg_path,
                "--k", "4", "--out", tmp / "runs"])
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error code=config ")
    assert "\n" not in err


def test_unknown_config_key_rejected(workdir, capsys):
    tmp, csv_path, _ = workdir
    bad = tmp / "bad.json"
    bad.write_text(json.dumps({"embed_dim": 4, "bogus_knob": 1}), encoding="utf-8")
    assert run(["preprocess", "--data", csv_path, "--config", bad,
                "--out", tmp / "prep"]) == 1
    assert capsys.readouterr().err.startswith("error code=config ")


def test_missing_input_errors(workdir, capsys):
    tmp, csv_path, cfg_path = workdir
    assert run(["preprocess", "--data", tmp / "nope.csv", "--out", tmp / "p"]) == 1
    assert capsys.readouterr().err.startswith("error code=io ")

    prep = tmp / "prep"
    run(["preprocess", "--data", csv_path, "--config", cfg_path, "--out", prep])
    capsys.readouterr()
    assert run(["evaluate", "--corpus", prep / "corpus.bin",
                "--checkpoint", tmp / "ghost.ckpt", "--config", cfg_path,
                "--out", tmp / "r"]) == 1
    assert capsys.readouterr().err.startswith("error code=io ")


def test_flag_overrides_config_file(workdir):
    tmp, csv_path, cfg_path = workdir
    out = tmp / "prep"
    assert run(["preprocess", "--data", csv_path, "--config", cfg_path,
                "--seed", "7", "--out", out]) == 0
    echoed = json.loads((out / "effective_config.json").read_text(encoding="utf-8"))
    assert echoed["seed"] == 7
    assert echoed["embed_dim"] == 4  # file value survives where no flag is set


def test_thread_cap_env(workdir, monkeypatch):
    tmp, csv_path, cfg_path = workdir
    monkeypatch.setenv("CLUSTERSEQ_THREADS", "2")
    out = tmp / "prep"
    assert run(["preprocess", "--data", csv_path, "--config", cfg_path,
                "--out", out]) == 0
    echoed = json.loads((out / "effective_config.json").read_text(encoding="utf-8"))
    assert echoed["max_threads"] == 2


def test_sweep_command(workdir, capsys):
    tmp, csv_path, cfg_path = workdir
    out = tmp / "sweep"
    # k=9 exceeds every sequence length, so that point fails and is recorded
    assert run(["sweep", "--data", csv_path, "--config", cfg_path,
                "--axis", "k", "--values", "3,9,3", "--out", out]) == 0
    lines = (out / "sweep.csv").read_text(encoding="utf-8").strip().split("\n")
    header = lines[0].split(",")
    rows = [dict(zip(header, l.split(","))) for l in lines[1:]]
    assert [r["value"] for r in rows] == ["3", "9"]  # duplicate dropped
    assert rows[0]["status"] == "ok"
    assert rows[0]["mrr"] != ""
    assert rows[1]["status"].startswith("error:")
    assert (out / "k_3" / "model.ckpt").exists()


def test_sweep_rejects_bad_axis_and_values(workdir, capsys):
    tmp, csv_path, cfg_path = workdir
    assert run(["sweep", "--data", csv_path, "--axis", "margin",
                "--values", "1", "--out", tmp / "s"]) == 1
    assert capsys.readouterr().err.startswith("error code=config ")
    assert run(["sweep", "--data", csv_path, "--axis", "k",
                "--values", "a,b", "--out", tmp / "s"]) == 1
    assert capsys.readouterr().err.startswith("error code=config ")


def test_synth_command(tmp_path, capsys):
    out = tmp_path / "synth"
    assert run(["synth", "--preset", "contrast", "--seed", "1", "--out", out]) == 0
    assert (out / "interactions.csv").exists()
    assert (out / "labels.csv").exists()
    spec = json.loads((out / "spec.json").read_text(encoding="utf-8"))
    assert spec["preset"] == "contrast"
    assert spec["users"] == 300
    first = (out / "interactions.csv").read_text(encoding="utf-8").split("\n")[0]
    assert len(first.split(",")) == 3
