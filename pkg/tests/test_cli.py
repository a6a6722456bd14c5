import hashlib
import json
from pathlib import Path

import pytest

from metaforge.cli import build_parser, load_run_config, main
from metaforge.dataio import save_task_dataset
from metaforge.evalkit import make_synthetic_family, synthetic_records

import numpy as np

CFG8 = {"maml": {"epochs": 2, "inner_optimizer": "sgd"},
        "net": {"d_model": 8, "n_heads": 2, "n_layers": 1, "ff_dim": 16,
                "max_len": 64}}


@pytest.fixture(scope="module")
def family_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("family")
    dirs = []
    for t in make_synthetic_family(3, seed=40, n_per_task=48):
        d = root / t.task
        save_task_dataset(t, d)
        dirs.append(str(d))
    return dirs


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(CFG8), encoding="utf-8")
    return str(p)


def _dir_digest(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(path.rglob("*")):
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# help and parsing
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("cmd", [[], ["ingest"], ["train"], ["eval"], ["encode"],
                                 ["report"]])
def test_help_exits_zero(cmd):
    with pytest.raises(SystemExit) as exc:
        main(cmd + ["--help"])
    assert exc.value.code == 0


def test_help_documents_flags(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    out = capsys.readouterr().out
    for flag in ("--protocol", "--encoder", "--exclude-task", "--pooled",
                 "--config", "--seed", "--deterministic"):
        assert flag in out


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------

def test_encode_worked_example(capsys):
    rc = main(["encode", "--seq", "SSGGSSILDRAVIEHNLLSAS", "--mut", "R10A"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "[CLS] S S G G S S I L D [SEP] R [SEP] A [SEP] A V I E H N L L S A S" in out


def test_encode_standard_shows_unk_digits(capsys):
    rc = main(["encode", "--seq", "SSGGSSILDRAVIEHNLLSAS", "--mut", "R10A",
               "--mode", "standard"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "[SEP] R [UNK] [UNK] A" in out


def test_encode_both_prints_both(capsys):
    rc = main(["encode", "--seq", "MKT", "--mut", "M1K", "--mode", "both"])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.count("ids:") == 2
    assert "enhanced:" in out and "standard:" in out


def test_encode_position_mismatch_exits_5(capsys):
    rc = main(["encode", "--seq", "SSGG", "--mut", "R10A"])
    assert rc == 5
    assert "position" in capsys.readouterr().err


def test_encode_wrong_residue_exits_5():
    assert main(["encode", "--seq", "SSGG", "--mut", "R2A"]) == 5


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

@pytest.fixture()
def raw_csv(tmp_path):
    rng = np.random.default_rng(0)
    recs = synthetic_records("raw", 40, rng, (1.0, 0.75, 0.5))
    p = tmp_path / "raw.csv"
    lines = ["sequence,mutation,target,source"]
    lines += [f"{r.sequence},{r.mutations[0]},{r.target!r},{r.source}" for r in recs]
    lines.append("NOTVALID!,A1B,1.0,s")
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def test_ingest_counts_and_determinism(raw_csv, tmp_path, capsys):
    out1, out2 = tmp_path / "d1", tmp_path / "d2"
    assert main(["ingest", str(raw_csv), "--task", "raw", "--out", str(out1),
                 "--seed", "1"]) == 0
    text = capsys.readouterr().out
    assert "accepted 40" in text and "rejected 1" in text
    assert main(["ingest", str(raw_csv), "--task", "raw", "--out", str(out2),
                 "--seed", "1"]) == 0
    assert _dir_digest(out1) == _dir_digest(out2)


def test_ingest_missing_column_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("sequence,mutation,source\nMKT,M1K,s\n", encoding="utf-8")
    rc = main(["ingest", str(p), "--task", "t", "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "target" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# run config merging
# ---------------------------------------------------------------------------

def _train_args(extra):
    return build_parser().parse_args(["train"] + extra)


def test_config_precedence_flag_over_file(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 5, "trials": 2, "maml": {"epochs": 3}}),
                 encoding="utf-8")
    cfg = load_run_config(_train_args(["--config", str(f), "--seed", "9"]))
    assert cfg.seed == 9
    assert cfg.trials == 2
    assert cfg.maml.epochs == 3
    assert cfg.maml.seed == 9


def test_config_defaults_match_training_table():
    cfg = load_run_config(_train_args([]))
    assert cfg.maml.inner_lr == 0.01
    assert cfg.maml.meta_lr == 0.001
    assert cfg.maml.support_size == 8
    assert cfg.maml.query_size == 8
    assert cfg.maml.meta_batch == 4
    assert cfg.maml.epochs == 50
    assert cfg.maml.inner_steps == 5
    assert cfg.maml.clip_max_norm == 1.0
    assert cfg.maml.inner_optimizer == "adam"


def test_env_seed_fallback(monkeypatch):
    monkeypatch.setenv("METAFORGE_SEED", "77")
    cfg = load_run_config(_train_args([]))
    assert cfg.seed == 77
    assert cfg.maml.seed == 77


def test_unknown_top_level_key_rejected(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"nonsense": 1}), encoding="utf-8")
    rc = main(["train", "--config", str(f), "--data", "x", "--pooled"])
    assert rc == 2


def test_unknown_nested_key_rejected(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"maml": {"warmup": 10}}), encoding="utf-8")
    rc = main(["train", "--config", str(f), "--data", "x", "--pooled"])
    assert rc == 2


def test_config_hash_ignores_out_dir():
    c1 = load_run_config(_train_args(["--out", "a"]))
    c2 = load_run_config(_train_args(["--out", "b"]))
    assert c1.config_hash == c2.config_hash


# ---------------------------------------------------------------------------
# train / eval / report round trip
# ---------------------------------------------------------------------------

def _train(dirs, cfg_file, out, extra):
    args = ["train", "--config", cfg_file, "--out", str(out), "--deterministic"]
    for d in dirs:
        args += ["--data", d]
    return main(args + extra)


def test_train_requires_target_semantics(family_dirs, cfg_file, tmp_path):
    assert _train(family_dirs, cfg_file, tmp_path / "x",
                  ["--protocol", "maml"]) == 2
    assert _train(family_dirs, cfg_file, tmp_path / "y",
                  ["--protocol", "finetune"]) == 2


def test_train_cross_task_writes_everything(family_dirs, cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    rc = _train(family_dirs, cfg_file, out,
                ["--protocol", "maml", "--exclude-task", "synth2", "--seed", "3"])
    assert rc == 0
    for name in ("checkpoint.mfck", "train_log.jsonl", "run_report.json",
                 "run_config.json"):
        assert (out / name).exists()
    payload = json.loads((out / "run_report.json").read_text())
    assert len(payload) == 1
    assert payload[0]["protocol"] == "cross_task"
    assert payload[0]["task"] == "synth2"
    assert "nmse_mean" in capsys.readouterr().out or payload[0]["nmse_mean"] >= 0


def test_train_deterministic_bit_identical(family_dirs, cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _train(family_dirs, cfg_file, out,
                      ["--protocol", "maml", "--exclude-task", "synth1",
                       "--seed", "3"]) == 0
    assert (a / "checkpoint.mfck").read_bytes() == (b / "checkpoint.mfck").read_bytes()
    assert (a / "run_report.json").read_bytes() == (b / "run_report.json").read_bytes()
    assert (a / "train_log.jsonl").read_bytes() == (b / "train_log.jsonl").read_bytes()


def test_train_pooled_reports_every_task(family_dirs, cfg_file, tmp_path):
    out = tmp_path / "pooled"
    rc = _train(family_dirs, cfg_file, out, ["--protocol", "maml", "--pooled"])
    assert rc == 0
    payload = json.loads((out / "run_report.json").read_text())
    assert sorted(r["task"] for r in payload) == ["synth0", "synth1", "synth2"]
    assert {r["protocol"] for r in payload} == {"pooled_meta"}


def test_train_finetune_baseline(family_dirs, cfg_file, tmp_path):
    out = tmp_path / "ft"
    rc = _train(family_dirs, cfg_file, out,
                ["--protocol", "finetune", "--task", "synth0"])
    assert rc == 0
    payload = json.loads((out / "run_report.json").read_text())
    assert payload[0]["protocol"] == "finetune"


def test_train_undersized_task_exits_3(cfg_file, tmp_path, capsys):
    dirs = []
    for t in make_synthetic_family(3, seed=41, n_per_task=18):
        d = tmp_path / t.task
        save_task_dataset(t, d)
        dirs.append(str(d))
    rc = _train(dirs, cfg_file, tmp_path / "run",
                ["--protocol", "maml", "--exclude-task", "synth2"])
    assert rc == 3
    assert "synth" in capsys.readouterr().err


def test_eval_roundtrip_and_corrupt_checkpoint(family_dirs, cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert _train(family_dirs, cfg_file, out,
                  ["--protocol", "maml", "--exclude-task", "synth2",
                   "--seed", "3"]) == 0
    ev = tmp_path / "eval"
    rc = main(["eval", "--checkpoint", str(out / "checkpoint.mfck"),
               "--data", family_dirs[2], "--task", "synth2", "--trials", "2",
               "--out", str(ev), "--deterministic"])
    assert rc == 0
    payload = json.loads((ev / "run_report.json").read_text())
    assert len(payload[0]["trial_nmse"]) == 2
    assert len(payload[0]["seeds"]) == 2
    assert payload[0]["seeds"][1] == payload[0]["seeds"][0] + 1
    capsys.readouterr()

    bad = tmp_path / "bad.mfck"
    bad.write_bytes(b"XXXX" + (out / "checkpoint.mfck").read_bytes()[4:])
    rc = main(["eval", "--checkpoint", str(bad), "--data", family_dirs[2],
               "--task", "synth2", "--out", str(tmp_path / "e2")])
    assert rc == 4


def test_report_files_and_figures(family_dirs, cfg_file, tmp_path):
    run = tmp_path / "run"
    assert _train(family_dirs, cfg_file, run,
                  ["--protocol", "maml", "--exclude-task", "synth0"]) == 0
    rep = tmp_path / "rep"
    rc = main(["report", "--runs", str(run), "--out", str(rep)])
    assert rc == 0
    for name in ("report.json", "report.csv", "report.txt",
                 "nmse_comparison.png", "training_curves.png"):
        assert (rep / name).exists(), name
    assert (rep / "nmse_comparison.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    header = (rep / "report.csv").read_text().splitlines()[0]
    assert header.split(",")[:3] == ["task", "method", "encoder_mode"]


def test_report_missing_run_exits_2(tmp_path):
    rc = main(["report", "--runs", str(tmp_path / "nothing"), "--out",
               str(tmp_path / "rep")])
    assert rc == 2
