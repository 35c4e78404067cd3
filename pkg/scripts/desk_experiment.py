"""Desk-scale run of the full protocol: build strong and weak corpora, pretrain, train strong
(mixup on and off) and weak, fine-tune the strong model, then print validation F per variant next
to its chance level.

    python3 scripts/desk_experiment.py --root /tmp/desk [--config configs/desk.ini] [--seed 0]
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

from tsdnet import cli

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"


def runs(exp: Path) -> set:
    return {p for p in exp.iterdir() if (p / "run.json").is_file()} if exp.is_dir() else set()


def run(exp: Path, *argv) -> Path:
    before = runs(exp)
    t0 = time.perf_counter()
    code = cli.main([str(a) for a in argv])
    if code != cli.EXIT_OK:
        sys.exit(f"tsdnet {argv[0]} failed with exit code {code}")
    (new,) = runs(exp) - before
    print(f"[{argv[0]} {time.perf_counter() - t0:.0f} s]")
    return new


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--root", required=True, type=Path)
    ap.add_argument("--config", default=DEFAULT_CONFIG, type=Path)
    ap.add_argument("--seed", default=0, type=int)
    args = ap.parse_args()
    exp = args.root / "experiments"
    os.environ[cli.ROOT_ENV] = str(exp)
    common = ("--config", args.config, "--seed", args.seed)

    data = {mode: args.root / mode for mode in ("strong", "weak")}
    for mode, out in data.items():
        run(exp, "build-dataset", *common, "--mode", mode, "--out", out)
    pre = run(exp, "pretrain", *common, "--data", data["strong"])
    init = pre / "checkpoints" / "best.npz"

    variants = {
        "strong": ("strong", "linear", init),
        "strong, mixup off": ("strong", "off", init),
        "weak": ("weak", "linear", init),
    }
    trained = {}
    for name, (mode, mixup, ckpt) in variants.items():
        trained[name] = run(exp, "train", *common, "--data", data[mode], "--init", ckpt, "--mixup", mixup)
    trained["strong, fine-tuned"] = run(exp, "finetune", *common, "--data", data["strong"],
                                        "--init", trained["strong"] / "checkpoints" / "best.npz")

    rows = []
    for name, rdir in trained.items():
        mode = "weak" if name == "weak" else "strong"
        ev = run(exp, "evaluate", *common, "--data", data[mode], "--split", "validation",
                 "--checkpoint", rdir / "checkpoints" / "best.npz")
        rep = json.loads((ev / "report.json").read_text())
        rows.append((name, rep["macro_F"], rep["chance_level"]))

    print(f"\n{'variant':<22}{'validation F':>14}{'chance':>10}")
    for name, f, chance in rows:
        print(f"{name:<22}{f:>14.3f}{chance:>10.3f}")


if __name__ == "__main__":
    main()
