"""Command-line entry points: dataset builds, the three training stages, evaluation,
the open-domain protocol and run summaries.

Every command writes into a fresh timestamped directory under ``$TSDNET_EXPERIMENT_ROOT``
(default ``./experiments``) holding the resolved config, seed, version and manifest hashes.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path


from . import __version__
from .config import ConfigError, ExperimentConfig, MixupConfig, dump_config, load_config
from .corpus import ClipBank, CorpusError, Dataset, build_dataset, synth_toy_bank
from .data import FeatureExtractor, load_bank_tensors, load_tensors
from .features import WavFormatError
from .metrics import (chance_level, evaluate_dataset, evaluate_tensors, format_report, frame_auc,
                      write_report)
from .model import CheckpointMismatchError, TSDNet, load_checkpoint, make_predictor, read_checkpoint_meta
from .training import StageError, Trainer, TrainingDivergedError

log = logging.getLogger("tsdnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
ROOT_ENV = "TSDNET_EXPERIMENT_ROOT"


# ----------------------------------------------------------------- plumbing


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_hashes(data_dir) -> dict:
    d = Path(data_dir)
    return {p.name: file_sha256(p) for p in sorted(d.glob("*.jsonl"))} if d.is_dir() else {}


def experiment_root() -> Path:
    return Path(os.environ.get(ROOT_ENV, "experiments"))


def new_run_dir(command: str, root: Path | None = None) -> Path:
    root = root or experiment_root()
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for k in range(1000):
        d = root / f"{stamp}-{command}" if k == 0 else root / f"{stamp}-{command}-{k}"
        try:
            d.mkdir(parents=True)
            return d
        except FileExistsError:
            continue
    raise RuntimeError("could not allocate an experiment directory")


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = load_config(path.read_text(), cfg)
    if getattr(args, "seed", None) is not None:
        for section in ("pretrain", "training", "finetune"):
            cfg = cfg.replace(section, seed=args.seed)
    if getattr(args, "fusion", None):
        cfg = cfg.replace("model", fusion=args.fusion)
    if getattr(args, "mixup", None):
        mix = MixupConfig.parse(args.mixup)
        cfg = cfg.replace("training", mixup=mix).replace("finetune", mixup=mix)
    if getattr(args, "segment_length", None) is not None:
        if args.segment_length <= 0:
            raise ConfigError("--segment-length must be positive")
        cfg = cfg.replace("evaluation", segment_length=args.segment_length)
    return cfg


def seed_of(cfg: ExperimentConfig) -> int:
    return cfg.training.seed


def write_run_info(run_dir: Path, command: str, cfg: ExperimentConfig, argv, data_dirs=(), **extra) -> None:
    (run_dir / "config.ini").write_text(dump_config(cfg))
    info = {"command": command, "argv": list(argv), "seed": seed_of(cfg), "config_hash": cfg.hash(),
            "version": version_string(), "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "manifest_hashes": {str(d): manifest_hashes(d) for d in data_dirs}}
    info.update(extra)
    (run_dir / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def extractor_for(cfg: ExperimentConfig) -> FeatureExtractor:
    cache = experiment_root() / "feature_cache"
    return FeatureExtractor(cfg.mixture, cfg.reference, cache_dir=cache)


def open_bank(args, data_dir: Path | None) -> ClipBank:
    path = Path(args.bank) if getattr(args, "bank", None) else (data_dir / "bank" / "bank.jsonl" if data_dir else None)
    if path is None or not path.is_file():
        raise CorpusError(f"clip bank manifest not found: {path} (pass --bank)")
    return ClipBank.from_manifest(path)


def require_data(args) -> Path:
    d = Path(args.data)
    if not (d / "train.jsonl").is_file():
        raise CorpusError(f"{d} holds no train.jsonl manifest; run build-dataset first")
    return d


def supervision_of(ds: Dataset) -> str:
    return "weak" if ds.mode == "weak" else "strong"


def load_conditional_init(path, cfg: ExperimentConfig, seed: int, stages: tuple) -> tuple[TSDNet, dict]:
    """A fresh model under ``cfg.model`` carrying the conditional (and, for later stages,
    detection) weights of an earlier checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise StageError(f"checkpoint not found: {path}")
    meta = read_checkpoint_meta(path)
    stage = meta.get("extra", {}).get("stage")
    if stage not in stages:
        raise StageError(f"{path} comes from stage {stage!r}; expected one of {list(stages)}")
    if stage == "pretrain-conditional":
        src, _ = load_checkpoint(path, allow_mismatch=True)
        model = TSDNet(cfg.model, seed=seed)
        try:
            model.conditional.load_state_dict(src.conditional.state_dict())
        except RuntimeError as exc:
            raise CheckpointMismatchError(f"conditional network in {path} does not fit [model]: {exc}") from exc
        return model, meta
    model, meta = load_checkpoint(path, cfg.model)
    return model, meta


def _categories(meta) -> list:
    cats = meta.get("extra", {}).get("categories")
    if not cats:
        raise StageError("checkpoint carries no category list")
    return list(cats)


# ----------------------------------------------------------------- commands


def cmd_build_dataset(args, cfg, run_dir) -> dict:
    c = cfg.corpus
    out = Path(args.out) if args.out else run_dir / "dataset"
    if args.bank:
        bank = ClipBank.from_manifest(args.bank)
    else:
        bank = synth_toy_bank(seed_of(cfg), c.n_categories, c.clips_per_category, c.sample_rate, c.split_fractions)
        bank.write(out / "bank")
    sizes = {"train": c.n_train, "validation": c.n_validation, "test": c.n_test}
    build_dataset(bank, args.mode, sizes, seed_of(cfg), out, c.duration, (c.min_events, c.max_events),
                  (c.snr_low, c.snr_high), c.sample_rate, c.background_rms, cfg.mixture.frames_per_second)
    report = json.loads((out / "build_report.json").read_text())
    write_run_info(run_dir, "build-dataset", cfg, args.argv, [out], dataset=str(out), mode=args.mode)
    print(json.dumps(report, indent=2, sort_keys=True))
    print(f"dataset: {out}")
    return {"dataset": str(out), "report": report}


def cmd_pretrain(args, cfg, run_dir) -> dict:
    data = require_data(args) if args.data else None
    bank = open_bank(args, data)
    cats = bank.categories
    ext = extractor_for(cfg)
    x, y = load_bank_tensors(bank, "train", ext, cfg.model.ref_frames, cats)
    xv, yv = load_bank_tensors(bank, "validation", ext, cfg.model.ref_frames, cats)
    write_run_info(run_dir, "pretrain", cfg, args.argv, [data] if data else [], categories=cats)
    model = TSDNet(cfg.model, seed=seed_of(cfg))
    tr = Trainer(model, cfg.pretrain, run_dir / "train_log.jsonl", run_dir / "checkpoints", cats)
    try:
        tr.pretrain_conditional(x, y, xv, yv)
    finally:
        tr.close()
    acc = tr.classification_accuracy(xv, yv)
    result = {"validation_accuracy": acc, "checkpoint": str(run_dir / "checkpoints" / "best.npz")}
    write_report(run_dir / "report.json", result)
    print(f"validation accuracy {acc:.3f}")
    print(f"checkpoint: {result['checkpoint']}")
    return result


def _train_stage(args, cfg, run_dir, command, stage_cfg, stages) -> dict:
    data = require_data(args)
    if not args.init:
        hint = "run `tsdnet pretrain` first" if command == "train" else "run `tsdnet train` first"
        raise StageError(f"{command} needs --init <checkpoint>; {hint}")
    model, meta = load_conditional_init(args.init, cfg, seed_of(cfg), stages)
    cats = _categories(meta)
    ext = extractor_for(cfg)
    tr_ds, va_ds = Dataset.open(data, "train"), Dataset.open(data, "validation")
    stage_cfg = dataclasses.replace(stage_cfg, supervision=supervision_of(tr_ds))
    train = load_tensors(tr_ds, ext, cfg.model.ref_frames, cats)
    val = load_tensors(va_ds, ext, cfg.model.ref_frames, cats)
    write_run_info(run_dir, command, cfg, args.argv, [data], init=str(args.init),
                   init_sha256=file_sha256(args.init), supervision=stage_cfg.supervision)
    ev = cfg.evaluation
    tr = Trainer(model, stage_cfg, run_dir / "train_log.jsonl", run_dir / "checkpoints", cats,
                 cfg.mixture.frames_per_second,
                 {"segment_length": ev.segment_length, "threshold": ev.threshold, "median_window": ev.median_window})
    try:
        tr.train_detection(train, val)
    finally:
        tr.close()
    result = {"stage": stage_cfg.stage, "supervision": stage_cfg.supervision, "best_selection_metric": tr.best_metric,
              "checkpoint": str(run_dir / "checkpoints" / "best.npz")}
    write_report(run_dir / "report.json", result)
    print(f"best validation {'segment' if stage_cfg.supervision == 'strong' else 'clip'} F {tr.best_metric:.4f}")
    print(f"checkpoint: {result['checkpoint']}")
    return result


def cmd_train(args, cfg, run_dir) -> dict:
    return _train_stage(args, cfg, run_dir, "train", cfg.training, ("pretrain-conditional",))


def cmd_finetune(args, cfg, run_dir) -> dict:
    return _train_stage(args, cfg, run_dir, "finetune", cfg.finetune, ("train-detection", "joint-finetune"))


def cmd_evaluate(args, cfg, run_dir) -> dict:
    data = require_data(args)
    path = Path(args.checkpoint)
    if not path.is_file():
        raise StageError(f"checkpoint not found: {path}")
    explicit = bool(args.config or args.fusion)
    model, meta = load_checkpoint(path, cfg.model if explicit else None)
    ds = Dataset.open(data, args.split)
    ev = cfg.evaluation
    report = evaluate_dataset(model, ds, extractor_for(cfg), ev.segment_length, ev.threshold, ev.median_window,
                              checkpoint_hash=file_sha256(path)[:16])
    write_run_info(run_dir, "evaluate", cfg, args.argv, [data], checkpoint=str(path))
    write_report(run_dir / "report.json", report)
    (run_dir / "report.txt").write_text(format_report(report) + "\n")
    print(format_report(report))
    return report


def open_domain_split(data: Path, held_out: list) -> dict:
    """Strict exclusion: drop every train/validation sample whose soundscape contains a
    held-out category or whose target is one; evaluate on test samples targeting one."""
    out = {"held_out": sorted(held_out)}
    held = set(held_out)
    for split in ("train", "validation"):
        ds = Dataset.open(data, split)
        tainted = {sid for sid, s in ds.scapes.items() if any(a[0] in held for a in s["annotations"])}
        keep = [r["sample_id"] for r in ds.records
                if r["soundscape_id"] not in tainted and r["target_category"] not in held]
        out[split] = keep
    test = Dataset.open(data, "test")
    out["evaluation"] = [r["sample_id"] for r in test.records if r["target_category"] in held]
    return out


def verify_open_domain(data: Path, split: dict, bank: ClipBank) -> dict:
    """Count held-out occurrences in the filtered training manifests (must be zero)."""
    held = set(split["held_out"])
    clip_category = {entry.clip_id: entry.category for entry in bank.entries}
    counts = {}
    for name in ("train", "validation"):
        ds = Dataset.open(data, name)
        keep = set(split[name])
        n = 0
        for r in ds.records:
            if r["sample_id"] not in keep:
                continue
            n += r["target_category"] in held
            n += sum(a[0] in held for a in ds.scapes[r["soundscape_id"]]["annotations"])
            n += clip_category.get(r["reference_id"]) in held
        counts[name] = n
    return counts


def _subset(ds: Dataset, ids) -> Dataset:
    keep = set(ids)
    return Dataset(ds.root, ds.split, [r for r in ds.records if r["sample_id"] in keep], ds.scapes)


def cmd_open_domain(args, cfg, run_dir) -> dict:
    data = require_data(args)
    held = [h for h in (args.held_out or "").replace(",", " ").split() if h]
    if not held:
        raise ConfigError("--held-out needs at least one category name")
    bank = open_bank(args, data)
    unknown = [h for h in held if h not in bank.categories]
    if unknown:
        raise ConfigError(f"unknown held-out categories {unknown}; bank has {bank.categories}")
    seen = [c for c in bank.categories if c not in held]
    # Classification pretraining draws on the clip bank; by default it sees every bank category,
    # since only the detection training data must be free of the held-out ones.
    cond_cats = bank.categories if args.pretrain_scope == "all" else seen
    split = open_domain_split(data, held)
    violations = verify_open_domain(data, split, bank)
    split["verification"] = violations
    if any(violations.values()):
        raise CorpusError(f"open-domain filter leaked held-out categories: {violations}")
    (run_dir / "open_domain_split.json").write_text(json.dumps(split, indent=2, sort_keys=True) + "\n")
    write_run_info(run_dir, "open-domain", cfg, args.argv, [data], held_out=sorted(held), seen=seen,
                   pretrain_categories=cond_cats)

    ext = extractor_for(cfg)
    rf = cfg.model.ref_frames
    train = load_tensors(_subset(Dataset.open(data, "train"), split["train"]), ext, rf, cond_cats)
    val = load_tensors(_subset(Dataset.open(data, "validation"), split["validation"]), ext, rf, cond_cats)
    test_ds = _subset(Dataset.open(data, "test"), split["evaluation"])
    if not len(train) or not test_ds.records:
        raise CorpusError("open-domain split left an empty training or evaluation set")
    x, y = load_bank_tensors(bank, "train", ext, rf, cond_cats)
    xv, yv = load_bank_tensors(bank, "validation", ext, rf, cond_cats)

    model = TSDNet(cfg.model, seed=seed_of(cfg))
    ev = cfg.evaluation
    eval_kw = {"segment_length": ev.segment_length, "threshold": ev.threshold, "median_window": ev.median_window}
    with open(run_dir / "train_log.jsonl", "w") as fh:
        for name, stage_cfg in (("pretrain", cfg.pretrain), ("train", cfg.training)):
            tr = Trainer(model, stage_cfg, run_dir / f"{name}_log.jsonl", run_dir / "checkpoints" / name, cond_cats,
                         cfg.mixture.frames_per_second, eval_kw)
            try:
                if name == "pretrain":
                    tr.pretrain_conditional(x, y, xv, yv)
                else:
                    tr.train_detection(train, val)
            finally:
                tr.close()
            fh.write((run_dir / f"{name}_log.jsonl").read_text())

    test = load_tensors(test_ds, ext, rf, cond_cats)
    predict = make_predictor(model, "strong")
    report = evaluate_tensors(predict, test, cfg.mixture.frames_per_second, **eval_kw)
    probs = predict(test.mix, test.ref)[0]
    targets = [r["target_category"] for r in test.records]
    report["frame_auc"] = {c: frame_auc(probs[[i for i, t in enumerate(targets) if t == c]],
                                        test.frame_labels[[i for i, t in enumerate(targets) if t == c]])
                           for c in sorted(set(targets))}
    report["chance_level"] = chance_level(test, cfg.mixture.frames_per_second, ev.segment_length, ev.threshold,
                                          ev.median_window, seed=seed_of(cfg))
    report["held_out"] = sorted(held)
    report["n_train_samples"] = len(train)
    report.pop("clip_level")
    write_report(run_dir / "report.json", report)
    (run_dir / "report.txt").write_text(format_report(report) + "\n")
    print(format_report(report))
    return report


def cmd_report(args, cfg, run_dir) -> dict:
    root = Path(args.root) if args.root else experiment_root()
    rows = []
    for d in sorted(p for p in root.iterdir() if (p / "run.json").is_file()):
        info = json.loads((d / "run.json").read_text())
        rep = json.loads((d / "report.json").read_text()) if (d / "report.json").is_file() else {}
        score = rep.get("macro_F", rep.get("best_selection_metric", rep.get("validation_accuracy")))
        rows.append({"run": d.name, "command": info.get("command"), "seed": info.get("seed"),
                     "config_hash": info.get("config_hash"), "score": score})
    print(f"{'run':<40}{'command':<15}{'seed':>6}  {'config':<18}{'score':>8}")
    for r in rows:
        score = f"{r['score']:.4f}" if isinstance(r["score"], (int, float)) else "-"
        print(f"{r['run']:<40}{r['command'] or '-':<15}{r['seed'] if r['seed'] is not None else '-':>6}  "
              f"{r['config_hash'] or '-':<18}{score:>8}")
    return {"runs": rows}


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "open-domain": cmd_open_domain,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file layered over the defaults")
    common.add_argument("--seed", type=int, help="seed for synthesis, initialisation and batching")
    common.add_argument("--fusion", choices=["concat", "multiply"])
    common.add_argument("--mixup", help="off | fixed:<r> | linear")
    common.add_argument("--segment-length", type=float, dest="segment_length")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tsdnet", description="Target sound detection experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-dataset", parents=[common], help="synthesize soundscapes and write manifests")
    b.add_argument("--mode", choices=["strong", "strong+", "weak"], default="strong")
    b.add_argument("--bank", help="bank.jsonl of {clip_path, category, split}; default: synthetic toy bank")
    b.add_argument("--out", help="dataset directory (default: <run dir>/dataset)")

    pr = sub.add_parser("pretrain", parents=[common], help="classification pretraining of the conditional net")
    pr.add_argument("--data", help="dataset directory (its bank/ is used unless --bank)")
    pr.add_argument("--bank")

    for name, hint in (("train", "pretrain"), ("finetune", "train")):
        t = sub.add_parser(name, parents=[common], help=f"{'detection training' if name == 'train' else 'joint fine-tuning'}")
        t.add_argument("--data", required=True)
        t.add_argument("--init", help=f"checkpoint from the {hint} stage")

    ev = sub.add_parser("evaluate", parents=[common], help="segment-based F on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=["train", "validation", "test"])

    o = sub.add_parser("open-domain", parents=[common], help="train without held-out categories, test on them")
    o.add_argument("--data", required=True)
    o.add_argument("--held-out", dest="held_out", required=True, help="comma-separated category names")
    o.add_argument("--bank")
    o.add_argument("--pretrain-scope", dest="pretrain_scope", choices=["all", "seen"], default="all",
                   help="bank categories used for conditional pretraining (default: all)")

    r = sub.add_parser("report", parents=[common], help="summarise runs under the experiment root")
    r.add_argument("--root")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        run_dir = None if args.command == "report" else new_run_dir(args.command)
        if run_dir:
            print(f"experiment: {run_dir}")
        COMMANDS[args.command](args, cfg, run_dir)
    except (ConfigError, StageError, CheckpointMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CorpusError, WavFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
