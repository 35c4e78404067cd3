"""Acceptance criteria, one test per criterion.

Each test prints a PASS/FAIL line as soon as it finishes; the lines are repeated in the session
summary. Criteria 6 to 9 train desk-scale models through the command line (configs/desk.ini) and
account for nearly all of the runtime.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from gradcheck import ELEMENTARY_CASES, check, tiny_model_case
from test_metrics import brute_counts, random_case
from tsdnet import cli
from tsdnet.config import MixupConfig, dump_config, load_config
from tsdnet.corpus import ClipBank, Dataset, read_jsonl
from tsdnet.metrics import f_measure, segment_tabulate
from tsdnet.model import linear_softmax_pool
from tsdnet.training import mixup_pair, mixup_ratio

DESK_INI = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
HELD_OUT = "noise_994,pulse_1810"


def verdict(number: int, title: str, failures: list, detail: str) -> None:
    status = "PASS" if not failures else "FAIL"
    line = f"criterion {number} {status}: {title} | {detail}"
    if failures:
        line += " | " + "; ".join(failures)
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    assert not failures, line


def desk_config(**sections) -> str:
    """desk.ini with per-section overrides, as INI text."""
    cfg = load_config(DESK_INI.read_text())
    for name, changes in sections.items():
        cfg = cfg.replace(name, **changes)
    return dump_config(cfg)


def tree_digest(root: Path) -> dict:
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def checkpoint_arrays(path) -> dict:
    with np.load(path) as data:
        return {k: data[k].copy() for k in data.files}


def same_arrays(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]) for k in a)


def without_paths(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "checkpoint"}


class Desk:
    """Runs ``tsdnet`` commands in-process and hands back each command's run directory."""

    def __init__(self, root: Path):
        self.root = root
        self.exp = root / "exp"
        self.exp.mkdir()
        self.timings = {}

    def config(self, name: str, **sections) -> Path:
        path = self.root / f"{name}.ini"
        path.write_text(desk_config(**sections))
        return path

    def runs(self) -> set:
        return {p for p in self.exp.iterdir() if (p / "run.json").is_file()}

    def run(self, *argv, label=None) -> Path:
        before = self.runs()
        t0 = time.perf_counter()
        code = cli.main([str(a) for a in argv])
        elapsed = time.perf_counter() - t0
        assert code == cli.EXIT_OK, f"tsdnet {' '.join(map(str, argv))} exited with {code}"
        (new,) = self.runs() - before
        self.timings[label or new.name] = elapsed
        return new


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv(cli.ROOT_ENV, str(root / "exp"))
        yield Desk(root)


@pytest.fixture(scope="session")
def learned(desk):
    """Build, pretrain, and train the three detection variants of the desk protocol."""
    cfg = DESK_INI
    strong, weak = desk.root / "strong", desk.root / "weak"
    desk.run("build-dataset", "--config", cfg, "--seed", 0, "--mode", "strong", "--out", strong, label="build strong")
    desk.run("build-dataset", "--config", cfg, "--seed", 0, "--mode", "weak", "--out", weak, label="build weak")
    pre = desk.run("pretrain", "--config", cfg, "--seed", 0, "--data", strong, label="pretrain")
    init = pre / "checkpoints" / "best.npz"
    runs = {
        "strong": desk.run("train", "--config", cfg, "--seed", 0, "--data", strong, "--init", init,
                           "--mixup", "linear", label="train strong"),
        "strong, mixup off": desk.run("train", "--config", cfg, "--seed", 0, "--data", strong, "--init", init,
                                      "--mixup", "off", label="train strong, mixup off"),
        "weak": desk.run("train", "--config", cfg, "--seed", 0, "--data", weak, "--init", init,
                         label="train weak"),
    }
    scores = {}
    for name, run in runs.items():
        data = weak if name == "weak" else strong
        ev = desk.run("evaluate", "--config", cfg, "--data", data, "--split", "validation",
                      "--checkpoint", run / "checkpoints" / "best.npz", label=f"evaluate {name}")
        scores[name] = json.loads((ev / "report.json").read_text())
    return {"strong_data": strong, "weak_data": weak, "pretrain": pre, "runs": runs, "scores": scores}


# ------------------------------------------------------------------ criteria


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst, failures, n = 0.0, [], 0
    for name, build in sorted(ELEMENTARY_CASES.items()):
        for seed in range(20):
            fn, leaves = build(seed)
            err = check(fn, leaves, seed=seed)
            worst, n = max(worst, err), n + 1
            if not err < 1e-4:
                failures.append(f"{name} seed {seed}: {err:.2e}")
    for fusion in ("concat", "multiply"):
        for mode in ("strong", "weak"):
            for seed in range(5):
                fn, leaves, k = tiny_model_case(seed, fusion, mode)
                err = check(fn, leaves, n_entries=k, seed=seed)
                worst, n = max(worst, err), n + 1
                if not err < 1e-4:
                    failures.append(f"tiny model {fusion}/{mode} seed {seed}: {err:.2e}")
    elapsed = time.perf_counter() - t0
    if elapsed >= 120:
        failures.append(f"runtime {elapsed:.0f} s")
    verdict(1, "gradient suite", failures, f"{n} checks, worst relative error {worst:.1e}, {elapsed:.0f} s")


def test_criterion_2_pooling_invariants():
    failures = []
    pool = lambda v: linear_softmax_pool(torch.as_tensor(v, dtype=torch.float64)).item()
    for values, want in (([0.5, 0.5], 0.5), ([1.0, 0.0], 1.0), ([0.2, 0.8], 0.68)):
        if abs(pool(values) - want) > 1e-9:
            failures.append(f"{values} -> {pool(values)!r}, want {want}")
    rng = np.random.default_rng(0)
    for _ in range(500):
        p = rng.uniform(0.0, 1.0, int(rng.integers(1, 60)))
        out = pool(p)
        if not p.min() - 1e-12 <= out <= p.max() + 1e-12:
            failures.append(f"bound violated: {out} outside [{p.min()}, {p.max()}]")
        if abs(pool(rng.permutation(p)) - out) > 1e-12:
            failures.append("permutation changed the pooled value")
        c = float(rng.uniform(0.01, 1.0))
        if abs(pool(np.full(len(p), c)) - c) > 1e-12:
            failures.append(f"constant {c} not preserved")
    verdict(2, "pooling invariants", failures[:5], "worked values, 500 random vectors")


def test_criterion_3_metric_oracle():
    failures = []
    rng = np.random.default_rng(0)
    for i in range(1000):
        pred, ref, duration, seg = random_case(rng)
        got = segment_tabulate([(a / 1000, b / 1000) for a, b in pred], [(a / 1000, b / 1000) for a, b in ref],
                               duration / 1000, seg / 1000, category="x").counts["x"]
        want = brute_counts(pred, ref, duration, seg)
        if tuple(got) != want:
            failures.append(f"case {i}: {got} != {want}")
    hand = segment_tabulate([(3.0, 6.0)], [(2.0, 5.0)], 10.0, 1.0, category="x")
    _, macro = f_measure(hand)
    if hand.counts["x"] != [2, 1, 1] or macro != 2 / 3:
        failures.append(f"hand case {hand.counts['x']} F={macro}")
    verdict(3, "metric oracle", failures[:5], "1000 random cases + hand case")


def _dataset_failures(data: Path, mode: str) -> list:
    failures = []
    bank = ClipBank.from_manifest(data / "bank" / "bank.jsonl")
    category = {entry.clip_id: entry.category for entry in bank.entries}
    used = {}
    for split in ("train", "validation", "test"):
        ds = Dataset.open(data, split)
        clips = used.setdefault(split, set())
        for r in ds.records:
            present = {a[0] for a in ds.scapes[r["soundscape_id"]]["annotations"]}
            ref_cat = category[r["reference_id"]]
            if (ref_cat in present) != (r["polarity"] == "positive"):
                failures.append(f"{mode} {r['sample_id']}: reference {ref_cat} vs mixture {sorted(present)}")
            if r["polarity"] == "negative" and "frame_labels_path" in r and ds.frame_labels(r, 500).sum() != 0:
                failures.append(f"{mode} {r['sample_id']}: negative with active frames")
            clips.add(r["reference_id"])
        for s in ds.scapes.values():
            clips.update(s["ingredients"])
        n_pos = sum(r["polarity"] == "positive" for r in ds.records)
        if mode == "weak" and n_pos != len(ds.records) - n_pos:
            failures.append(f"weak {split}: {n_pos} positives vs {len(ds.records) - n_pos} negatives")
        if mode == "strong+" and n_pos == len(ds.records):
            failures.append(f"strong+ {split}: no negatives")
    for a, b in (("train", "validation"), ("train", "test"), ("validation", "test")):
        if used[a] & used[b]:
            failures.append(f"{mode}: {len(used[a] & used[b])} clip ids shared by {a} and {b}")
    return failures


def test_criterion_4_dataset_invariants(desk):
    ini = desk.config("c4", corpus={"n_train": 300, "n_validation": 100, "n_test": 100})
    failures, times = [], []
    for mode in ("strong+", "weak"):
        out, again = desk.root / f"c4-{mode}", desk.root / f"c4-{mode}-again"
        for target in (out, again):
            t0 = time.perf_counter()
            desk.run("build-dataset", "--config", ini, "--seed", 4, "--mode", mode, "--out", target)
            times.append(time.perf_counter() - t0)
        n_scapes = sum(len(read_jsonl(out / f"soundscapes_{s}.jsonl")) for s in ("train", "validation", "test"))
        if n_scapes != 500:
            failures.append(f"{mode}: {n_scapes} soundscapes")
        a, b = tree_digest(out), tree_digest(again)
        if a != b:
            failures.append(f"{mode}: rebuild differs in {sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))[:3]}")
        failures += _dataset_failures(out, mode)[:5]
    if max(times) >= 300:
        failures.append(f"slowest build {max(times):.0f} s")
    verdict(4, "dataset invariants", failures, f"strong+ and weak 500-soundscape builds, "
            f"slowest {max(times):.0f} s, byte-identical rebuilds checked")


def test_criterion_5_mixup_identities():
    failures = []
    rng = np.random.default_rng(5)

    def triple():
        return (torch.as_tensor(rng.normal(size=(3, 20, 8))), torch.as_tensor(rng.normal(size=(3, 16, 6))),
                torch.as_tensor(rng.uniform(size=(3, 20))))

    for _ in range(200):
        s1, s2 = triple(), triple()
        for weight, src in ((1.0, s1), (0.0, s2)):
            if not all(torch.equal(o, x) for o, x in zip(mixup_pair(s1, s2, weight), src)):
                failures.append(f"endpoint {weight} not bitwise")
        weight = float(rng.uniform())
        a, b = mixup_pair(s1, s2, weight), mixup_pair(s2, s1, 1.0 - weight)
        if not all(torch.equal(x, y) for x, y in zip(a, b)):
            failures.append(f"swap symmetry broken at {weight!r}")
        y = a[2]
        lo, hi = torch.minimum(s1[2], s2[2]), torch.maximum(s1[2], s2[2])
        if not bool(((y >= lo - 1e-12) & (y <= hi + 1e-12)).all()):
            failures.append(f"labels leave the convex hull at {weight!r}")
    cfg = MixupConfig()
    for total in (2, 10, 1000, 123456):
        got = (mixup_ratio(0, total, cfg), mixup_ratio(total, total, cfg))
        if got != (0.3, 0.0):
            failures.append(f"schedule endpoints {got} for T={total}")
        if total % 2 == 0 and mixup_ratio(total // 2, total, cfg) != 0.15:
            failures.append(f"midpoint {mixup_ratio(total // 2, total, cfg)!r} for T={total}")
    verdict(5, "mixup identities", sorted(set(failures))[:5], "200 random triples, 4 schedule lengths")


def test_criterion_6_desk_learning(desk, learned):
    sc = learned["scores"]
    f = {k: v["macro_F"] for k, v in sc.items()}
    chance = {k: v["chance_level"] for k, v in sc.items()}
    n_train = len(read_jsonl(learned["strong_data"] / "train.jsonl"))
    train_time = sum(v for k, v in desk.timings.items() if k.startswith("train "))
    failures = []
    if n_train < 600:
        failures.append(f"only {n_train} strong training samples")
    if f["strong"] < 0.70:
        failures.append(f"strong F {f['strong']:.3f} < 0.70")
    if f["weak"] < 0.50:
        failures.append(f"weak F {f['weak']:.3f} < 0.50")
    if not f["strong"] > f["weak"]:
        failures.append(f"strong {f['strong']:.3f} not above weak {f['weak']:.3f}")
    if f["strong"] < f["strong, mixup off"] - 0.02:
        failures.append(f"mixup on {f['strong']:.3f} < off {f['strong, mixup off']:.3f} - 0.02")
    if train_time >= 1800:
        failures.append(f"training took {train_time:.0f} s")
    detail = ", ".join(f"{k} F {f[k]:.3f} (chance {chance[k]:.3f})" for k in f)
    verdict(6, "desk-scale learning", failures,
            f"{detail}; {n_train} strong training samples; training {train_time:.0f} s")


def test_criterion_7_joint_finetuning(desk, learned):
    strong = learned["strong_data"]
    ft = desk.run("finetune", "--config", DESK_INI, "--seed", 0, "--data", strong,
                  "--init", learned["runs"]["strong"] / "checkpoints" / "best.npz", label="finetune")
    steps = [r for r in read_jsonl(ft / "train_log.jsonl") if "step" in r]
    failures = []
    epochs = sorted({r["epoch"] for r in steps})
    if epochs != list(range(30)):
        failures.append(f"epochs logged {epochs[:3]}..{epochs[-1:]} ({len(epochs)})")
    lrs = {r["lr"] for r in steps}
    if lrs != {1e-4}:
        failures.append(f"learning rates {sorted(lrs)}")
    bad = [r["step"] for r in steps if r["stage"] != "joint-finetune" or r["l_total"] != r["l_sed"] + r["l_cls"]]
    if bad:
        failures.append(f"{len(bad)} steps break l_total == l_sed + l_cls (first {bad[0]})")
    ev = desk.run("evaluate", "--config", DESK_INI, "--data", strong, "--split", "validation",
                  "--checkpoint", ft / "checkpoints" / "best.npz", label="evaluate finetune")
    after = json.loads((ev / "report.json").read_text())["macro_F"]
    before = learned["scores"]["strong"]["macro_F"]
    if after < before - 0.02:
        failures.append(f"F after {after:.3f} < before {before:.3f} - 0.02")
    verdict(7, "joint fine-tuning", failures,
            f"{len(steps)} steps over {len(epochs)} epochs, F {before:.3f} -> {after:.3f}")


def test_criterion_8_open_domain(desk):
    ini = desk.config("c8", corpus={"n_train": 1000, "n_validation": 150, "n_test": 150})
    data = desk.root / "open"
    desk.run("build-dataset", "--config", ini, "--seed", 8, "--mode", "strong", "--out", data)
    run = desk.run("open-domain", "--config", ini, "--seed", 0, "--data", data, "--held-out", HELD_OUT,
                   label="open-domain")
    split = json.loads((run / "open_domain_split.json").read_text())
    report = json.loads((run / "report.json").read_text())
    held = set(HELD_OUT.split(","))
    failures = []
    # Independent recount of held-out occurrences in the filtered training and validation sets.
    bank = ClipBank.from_manifest(data / "bank" / "bank.jsonl")
    category = {entry.clip_id: entry.category for entry in bank.entries}
    kept = 0
    for name in ("train", "validation"):
        ds = Dataset.open(data, name)
        keep = set(split[name])
        for r in ds.records:
            if r["sample_id"] not in keep:
                continue
            kept += 1
            scape = ds.scapes[r["soundscape_id"]]
            seen = {r["target_category"], category[r["reference_id"]]}
            seen |= {a[0] for a in scape["annotations"]} | {category[c] for c in scape["ingredients"]}
            if seen & held:
                failures.append(f"{r['sample_id']} carries {sorted(seen & held)}")
    if any(split["verification"].values()):
        failures.append(f"verification counts {split['verification']}")
    test = Dataset.open(data, "test")
    targets = {r["target_category"] for r in test.records if r["sample_id"] in set(split["evaluation"])}
    if targets != held:
        failures.append(f"evaluation targets {sorted(targets)}")
    f, chance = report["macro_F"], report["chance_level"]
    if not f >= chance + 0.15:
        failures.append(f"held-out F {f:.3f} < chance {chance:.3f} + 0.15")
    per = ", ".join(f"{k} {v['F']:.3f} (frame AUC {report['frame_auc'][k]:.3f})"
                    for k, v in sorted(report["per_category"].items()))
    verdict(8, "open-domain", failures[:5], f"held out {HELD_OUT}; {kept} filtered training/validation samples; "
            f"F {f:.3f} ({per}) vs chance {chance:.3f}")


def test_criterion_9_determinism(desk, learned):
    failures = []
    strong = learned["strong_data"]
    again = desk.root / "strong-again"
    desk.run("build-dataset", "--config", DESK_INI, "--seed", 0, "--mode", "strong", "--out", again)
    a, b = tree_digest(strong), tree_digest(again)
    if a != b:
        failures.append(f"dataset differs in {sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))[:3]}")

    def compare(first: Path, second: Path, what: str):
        for name in ("train_log.jsonl",):
            if (first / name).read_bytes() != (second / name).read_bytes():
                failures.append(f"{what}: {name} differs")
        ra = json.loads((first / "report.json").read_text())
        rb = json.loads((second / "report.json").read_text())
        if without_paths(ra) != without_paths(rb):
            failures.append(f"{what}: report differs")
        if not same_arrays(checkpoint_arrays(first / "checkpoints" / "best.npz"),
                           checkpoint_arrays(second / "checkpoints" / "best.npz")):
            failures.append(f"{what}: checkpoint arrays differ")
        info_a, info_b = (json.loads((d / "run.json").read_text()) for d in (first, second))
        for info in (info_a, info_b):
            info.pop("started")
        if info_a != info_b:
            failures.append(f"{what}: run.json differs beyond its timestamp")

    pre = desk.run("pretrain", "--config", DESK_INI, "--seed", 0, "--data", strong)
    compare(learned["pretrain"], pre, "pretrain")
    init = learned["pretrain"] / "checkpoints" / "best.npz"
    tr = desk.run("train", "--config", DESK_INI, "--seed", 0, "--data", strong, "--init", init, "--mixup", "linear")
    compare(learned["runs"]["strong"], tr, "train")
    ckpt = learned["runs"]["strong"] / "checkpoints" / "best.npz"
    reports = []
    for _ in range(2):
        ev = desk.run("evaluate", "--config", DESK_INI, "--data", strong, "--split", "validation",
                      "--checkpoint", ckpt)
        reports.append((ev / "report.json").read_bytes())
    if reports[0] != reports[1] or json.loads(reports[0]) != learned["scores"]["strong"]:
        failures.append("evaluate reports differ")
    verdict(9, "determinism", failures, "build-dataset, pretrain, train and evaluate re-run with identical "
            f"seed and config (F {json.loads(reports[0])['macro_F']:.3f})")
