import json
from pathlib import Path

import pytest

from tsdnet import cli, training
from tsdnet.corpus import read_jsonl

TINY_INI = """
[corpus]
n_categories = 4
clips_per_category = 10
duration = 4.0
min_events = 1
max_events = 2
n_train = 8
n_validation = 4
n_test = 4

[model]
n_classes = 4
ref_frames = 32
cond_channels = 4, 4, 8, 8
det_channels = 4, 4, 4, 4
gru_hidden = 4
fc_hidden = 8
fusion_dim = 8

[pretrain]
epochs = 2
batch_size = 8

[training]
epochs = 2
batch_size = 8

[finetune]
epochs = 1
batch_size = 8
"""


@pytest.fixture()
def env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ROOT_ENV, str(tmp_path / "exp"))
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY_INI)
    return tmp_path, str(cfg)


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _latest(root: Path, command: str) -> Path:
    return sorted(p for p in root.iterdir() if p.name.split("-", 2)[-1].startswith(command))[-1]


@pytest.fixture()
def built(env):
    tmp, cfg = env
    data = tmp / "data"
    assert _run("build-dataset", "--config", cfg, "--seed", 3, "--out", data) == 0
    return tmp, cfg, data


def test_build_dataset_is_reproducible(built):
    tmp, cfg, data = built
    again = tmp / "again"
    assert _run("build-dataset", "--config", cfg, "--seed", 3, "--out", again) == 0
    for name in ("train.jsonl", "validation.jsonl", "test.jsonl", "build_report.json"):
        assert (data / name).read_bytes() == (again / name).read_bytes()
    run = _latest(tmp / "exp", "build-dataset")
    info = json.loads((run / "run.json").read_text())
    assert info["seed"] == 3 and info["version"] and info["manifest_hashes"]
    assert (run / "config.ini").read_text().count("[") >= 8


def test_weak_build_balanced(env):
    tmp, cfg = env
    assert _run("build-dataset", "--config", cfg, "--mode", "weak", "--out", tmp / "w") == 0
    rep = json.loads((tmp / "w" / "build_report.json").read_text())
    for row in rep["splits"].values():
        assert row["positives"] == row["negatives"]


def test_full_pipeline(built):
    tmp, cfg, data = built
    exp = tmp / "exp"
    assert _run("pretrain", "--config", cfg, "--data", data) == 0
    pre = _latest(exp, "pretrain") / "checkpoints" / "best.npz"
    assert pre.is_file()
    assert _run("train", "--config", cfg, "--data", data, "--init", pre, "--mixup", "off") == 0
    trained = _latest(exp, "train") / "checkpoints" / "best.npz"
    log = read_jsonl(_latest(exp, "train") / "train_log.jsonl")
    assert all(r["mix_rate"] == 0.0 for r in log if "step" in r)
    assert _run("finetune", "--config", cfg, "--data", data, "--init", trained) == 0
    ft_log = [r for r in read_jsonl(_latest(exp, "finetune") / "train_log.jsonl") if "step" in r]
    assert ft_log and all(r["l_total"] == r["l_sed"] + r["l_cls"] and r["lr"] == 1e-4 for r in ft_log)
    tuned = _latest(exp, "finetune") / "checkpoints" / "best.npz"
    assert _run("evaluate", "--config", cfg, "--checkpoint", tuned, "--data", data, "--segment-length", 0.5) == 0
    rep = json.loads((_latest(exp, "evaluate") / "report.json").read_text())
    assert rep["segment_length"] == 0.5 and 0.0 <= rep["macro_F"] <= 1.0
    assert (_latest(exp, "evaluate") / "report.txt").read_text().startswith("category")
    # the train stage cannot consume a pretrain-only checkpoint as a finetune init
    assert _run("finetune", "--config", cfg, "--data", data, "--init", pre) == cli.EXIT_CONFIG
    # checkpoint under a different fusion is refused
    assert _run("evaluate", "--config", cfg, "--fusion", "concat", "--checkpoint", tuned, "--data", data) == 2
    assert _run("report", "--root", exp) == 0


def test_finetune_without_checkpoint_is_hard_error(built, capsys):
    tmp, cfg, data = built
    assert _run("finetune", "--config", cfg, "--data", data) == cli.EXIT_CONFIG
    assert "run `tsdnet train` first" in capsys.readouterr().err
    assert _run("train", "--config", cfg, "--data", data) == cli.EXIT_CONFIG


def test_exit_codes(env, tmp_path):
    _, cfg = env
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nfusoin = concat\n")
    assert _run("build-dataset", "--config", bad) == cli.EXIT_CONFIG
    assert _run("build-dataset", "--config", tmp_path / "missing.ini") == cli.EXIT_CONFIG
    assert _run("train", "--config", cfg, "--data", tmp_path / "nowhere", "--init", "x") == cli.EXIT_DATA
    assert _run("build-dataset", "--config", cfg, "--mixup", "sometimes") == cli.EXIT_CONFIG


def test_divergence_exit_code(built, monkeypatch):
    tmp, cfg, data = built
    assert _run("pretrain", "--config", cfg, "--data", data) == 0
    pre = _latest(tmp / "exp", "pretrain") / "checkpoints" / "best.npz"
    monkeypatch.setattr(training, "frame_bce", lambda probs, p: (probs * float("nan")).sum(-1))
    assert _run("train", "--config", cfg, "--data", data, "--init", pre) == cli.EXIT_DIVERGED


def test_fusion_flag_changes_config_hash(env):
    _, cfg = env
    parser = cli.build_parser()
    a = cli.resolve_config(parser.parse_args(["train", "--data", "d", "--config", cfg, "--fusion", "concat"]))
    b = cli.resolve_config(parser.parse_args(["train", "--data", "d", "--config", cfg, "--fusion", "multiply"]))
    assert a.hash() != b.hash()


def test_open_domain(built):
    tmp, cfg, data = built
    cats = sorted(json.loads(l)["category"] for l in open(data / "bank" / "bank.jsonl"))
    held = sorted(set(cats))[:1]
    assert _run("open-domain", "--config", cfg, "--data", data, "--held-out", "nonexistent") == cli.EXIT_CONFIG
    assert _run("open-domain", "--config", cfg, "--data", data, "--held-out", ",".join(held)) == 0
    run = _latest(tmp / "exp", "open-domain")
    split = json.loads((run / "open_domain_split.json").read_text())
    assert split["verification"] == {"train": 0, "validation": 0}
    scapes = {r["scape_id"]: r for r in read_jsonl(data / "soundscapes_train.jsonl")}
    recs = {r["sample_id"]: r for r in read_jsonl(data / "train.jsonl")}
    for sid in split["train"]:
        r = recs[sid]
        assert r["target_category"] not in held
        assert not any(a[0] in held for a in scapes[r["soundscape_id"]]["annotations"])
    test = {r["sample_id"]: r for r in read_jsonl(data / "test.jsonl")}
    assert split["evaluation"] and all(test[s]["target_category"] in held for s in split["evaluation"])
    rep = json.loads((run / "report.json").read_text())
    assert set(rep["per_category"]) <= set(held) and "chance_level" in rep
