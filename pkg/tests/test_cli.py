import json
import subprocess
import sys

import pytest

from barbert import cli
from barbert.corpus import read_corpus, read_labels
from barbert.probing import METRICS


@pytest.fixture
def midi_dir(tmp_path, one_note_smf):
    d = tmp_path / "midi"
    assert cli.main(["synth", "--out", str(d), "--songs", "2", "--bars", "2", "--midi", "--seed", "1"]) == 0
    (d / "one.mid").write_bytes(one_note_smf)
    (d / "broken.mid").write_bytes(b"MThd\x00\x00\x00\x06\x00\x01")
    (d / "notes.txt").write_text("not midi")
    return d


def test_tokenize_skips_corrupt_file(tmp_path, midi_dir):
    out = tmp_path / "tok" / "corpus.jsonl"
    assert cli.main(["tokenize", "--in", str(midi_dir), "--out", str(out)]) == 0
    bars = read_corpus(out)
    labels = read_labels(out.with_name("labels.jsonl"))
    assert len(bars) == len(labels) == 2 * 2 + 1
    assert {b.song_id for b in bars} == {"one", "song0000", "song0001"}
    assert [b.ids for b in bars if b.song_id == "one"] == [(0, 22, 418, 33, 222, 539, 477)]
    skipped = [json.loads(line) for line in out.with_name("skipped.jsonl").read_text().splitlines()]
    assert [s["path"] for s in skipped] == ["broken.mid"]
    manifest = json.loads((out.parent / "manifest.json").read_text())
    assert manifest["command"] == "tokenize" and len(manifest["corpus_hash"]) == 64


def test_tokenize_is_deterministic(tmp_path, midi_dir):
    outs = []
    for name, threads in (("a", "1"), ("b", "3")):
        out = tmp_path / name / "corpus.jsonl"
        assert cli.main(["tokenize", "--in", str(midi_dir), "--out", str(out), "--threads", threads]) == 0
        outs.append(out)
    for fname in ("corpus.jsonl", "labels.jsonl", "skipped.jsonl"):
        assert outs[0].with_name(fname).read_bytes() == outs[1].with_name(fname).read_bytes()


def test_tokenize_empty_directory(tmp_path, caplog):
    (tmp_path / "empty").mkdir()
    out = tmp_path / "tok" / "corpus.jsonl"
    assert cli.main(["tokenize", "--in", str(tmp_path / "empty"), "--out", str(out)]) == 0
    assert out.read_text() == ""
    assert any("no .mid" in r.message for r in caplog.records)


def test_workdir_resolves_relative_paths(tmp_path, midi_dir):
    assert cli.main(["tokenize", "--workdir", str(tmp_path), "--in", "midi", "--out", "rel/corpus.jsonl"]) == 0
    assert (tmp_path / "rel" / "corpus.jsonl").exists()


def test_exit_codes(tmp_path):
    assert cli.main(["tokenize", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "c.jsonl")]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--corpus", "c", "--out", "o", "--variant", "bogus"])
    assert exc.value.code == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nonsense")
    (tmp_path / "c.jsonl").write_text("")
    (tmp_path / "l.jsonl").write_text("")
    rc = cli.main(["probe", "--ckpt", str(bad), "--corpus", str(tmp_path / "c.jsonl"),
                   "--labels", str(tmp_path / "l.jsonl"), "--out", str(tmp_path / "r")])
    assert rc == 2
    assert cli.main(["train", "--corpus", str(tmp_path / "c.jsonl"), "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[model]\nwidth = 3\n")
    (tmp_path / "c.jsonl").write_text("")
    rc = cli.main(["train", "--corpus", str(tmp_path / "c.jsonl"), "--out", str(tmp_path / "o"), "--config", str(cfg)])
    assert rc == 1


TINY_TOML = """
[model]
num_layers = 1
hidden_size = 8
num_heads = 2
ffn_size = 16
max_seq_len = 160

[train]
batch_size = 4
learning_rate = 0.001
"""


def test_train_probe_report_round(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path / "data"), "--songs", "6", "--bars", "3", "--seed", "2"]) == 0
    (tmp_path / "tiny.toml").write_text(TINY_TOML)
    common = ["--workdir", str(tmp_path), "--config", "tiny.toml", "--corpus", "data/corpus.jsonl"]
    assert cli.main(["train", *common, "--variant", "aug", "--steps", "3", "--out", "aug"]) == 0
    assert cli.main(["train", *common, "--steps", "0", "--out", "rand"]) == 0
    for name in ("aug", "rand"):
        assert (tmp_path / name / "model.ckpt").exists() and (tmp_path / name / "manifest.json").exists()
    probe = ["probe", "--workdir", str(tmp_path), "--corpus", "data/corpus.jsonl", "--labels", "data/labels.jsonl",
             "--splits", "2", "--k", "3"]
    assert cli.main([*probe, "--ckpt", "aug", "--out", "rep_aug"]) == 0
    assert cli.main([*probe, "--ckpt", "rand", "--out", "rep_rand"]) == 0
    grid = (tmp_path / "rep_aug" / "grid.csv").read_text().splitlines()
    assert grid[0].startswith("#") and grid[1] == "model,layer," + ",".join(METRICS)
    assert len(grid) == 2 + 2 and grid[2].startswith("BERT-aug,0,")
    capsys.readouterr()
    assert cli.main(["report", "--workdir", str(tmp_path), "rep_aug", "rep_rand", "--out", "cmp"]) == 0
    text = capsys.readouterr().out
    assert "BERT-aug" in text and "random-init" in text and "C (↑)" in text and "MV (↓)" in text
    assert text == (tmp_path / "cmp" / "comparison.txt").read_text()


def test_report_single_dir_passes_through(tmp_path):
    from barbert.probing import ProbeReport, read_last_layer, write_report
    import numpy as np

    grid = np.arange(14, dtype=float).reshape(2, 7)
    write_report(tmp_path / "r", [ProbeReport("BERT", grid, np.zeros_like(grid))])
    assert cli.main(["report", str(tmp_path / "r"), "--out", str(tmp_path / "o")]) == 0
    rows, _ = read_last_layer(tmp_path / "o" / "comparison.csv")
    assert rows["BERT"].tolist() == grid[-1].tolist()


def test_report_mixed_depth_is_data_error(tmp_path):
    from barbert.probing import ProbeReport, write_report
    import numpy as np

    write_report(tmp_path / "a", [ProbeReport("x", np.zeros((2, 7)), np.zeros((2, 7)))])
    write_report(tmp_path / "b", [ProbeReport("y", np.zeros((3, 7)), np.zeros((3, 7)))])
    assert cli.main(["report", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "o")]) == 2


def test_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("BARBERT_WORKDIR", str(tmp_path))
    assert cli.main(["synth", "--out", "d", "--songs", "1", "--bars", "1"]) == 0
    assert (tmp_path / "d" / "corpus.jsonl").exists()


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "barbert.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "{tokenize,train,probe,report}" in res.stdout and "synth" not in res.stdout
