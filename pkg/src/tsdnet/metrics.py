"""Segment-based F-measure with macro averaging, post-processing, dataset evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter
from scipy.stats import rankdata

_EDGE = 1e-9


def binarize(frame_probs, threshold: float = 0.5, median_window: int = 5, fps: float = 50.0) -> list:
    """Median-filter, threshold, and turn maximal runs into ``(onset, offset)`` seconds."""
    p = np.asarray(frame_probs, dtype=np.float64)
    if median_window % 2 != 1:
        raise ValueError("median_window must be odd")
    if median_window > 1:
        p = median_filter(p, size=median_window, mode="nearest")
    active = np.concatenate([[0], (p > threshold).astype(np.int8), [0]])
    d = np.diff(active)
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    return [(start / fps, end / fps) for start, end in zip(starts, ends)]


def runs_to_events(labels, fps: float) -> list:
    return binarize(labels, threshold=0.5, median_window=1, fps=fps)


def _segment_activity(events, n_segments: int, segment_length: float, duration: float) -> np.ndarray:
    act = np.zeros(n_segments, dtype=bool)
    for on, off in events:
        first = max(0, int(math.floor(on / segment_length)))
        last = min(n_segments - 1, int(math.ceil(off / segment_length)) - 1)
        for j in range(first, last + 1):
            lo, hi = j * segment_length, min((j + 1) * segment_length, duration)
            if on < hi - _EDGE and off > lo + _EDGE:
                act[j] = True
    return act


@dataclass
class SegmentCounts:
    counts: dict = field(default_factory=dict)   # category -> [tp, fp, fn]
    segment_length: float = 1.0

    def add(self, category: str, tp: int, fp: int, fn: int) -> None:
        c = self.counts.setdefault(category, [0, 0, 0])
        c[0] += int(tp)
        c[1] += int(fp)
        c[2] += int(fn)

    def __add__(self, other: "SegmentCounts") -> "SegmentCounts":
        if other.segment_length != self.segment_length:
            raise ValueError("cannot add counts at different segment lengths")
        out = SegmentCounts({}, self.segment_length)
        for src in (self, other):
            for cat, (tp, fp, fn) in src.counts.items():
                out.add(cat, tp, fp, fn)
        return out


def _as_triples(events, default_category):
    out = []
    for ev in events:
        if hasattr(ev, "category"):
            out.append((ev.category, ev.onset, ev.offset))
        elif len(ev) == 3:
            out.append(tuple(ev))
        else:
            out.append((default_category, ev[0], ev[1]))
    return out


def segment_tabulate(pred, ref, duration: float, segment_length: float = 1.0,
                     category: str | None = None) -> SegmentCounts:
    """Per-category segment TP/FP/FN over ``ceil(duration / segment_length)`` segments.

    ``pred`` and ``ref`` hold ``EventAnnotation``s, ``(category, onset, offset)`` triples, or
    ``(onset, offset)`` pairs that belong to ``category``. With ``category`` set, a row is
    emitted for it even when both sides are empty.
    """
    if segment_length <= 0:
        raise ValueError("segment_length must be positive")
    n = max(1, int(math.ceil(duration / segment_length - 1e-9)))
    pred, ref = _as_triples(pred, category), _as_triples(ref, category)
    cats = sorted({c for c, _, _ in pred} | {c for c, _, _ in ref} | ({category} if category else set()))
    out = SegmentCounts({}, segment_length)
    for cat in cats:
        p = _segment_activity([(a, b) for c, a, b in pred if c == cat], n, segment_length, duration)
        r = _segment_activity([(a, b) for c, a, b in ref if c == cat], n, segment_length, duration)
        out.add(cat, np.sum(p & r), np.sum(p & ~r), np.sum(~p & r))
    return out


def f_measure(counts: SegmentCounts) -> tuple[dict, float]:
    """Per-category F = 2tp / (2tp + fp + fn) (0 if undefined) and the macro mean.

    The macro mean only covers categories with at least one active reference segment.
    """
    per = {}
    for cat, (tp, fp, fn) in counts.counts.items():
        den = 2 * tp + fp + fn
        per[cat] = 2 * tp / den if den else 0.0
    present = [cat for cat, (tp, fp, fn) in counts.counts.items() if tp + fn > 0]
    macro = float(np.mean([per[c] for c in present])) if present else 0.0
    return per, macro


def binary_f(pred, truth) -> float:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    tp = np.sum(pred & truth)
    den = 2 * tp + np.sum(pred & ~truth) + np.sum(~pred & truth)
    return float(2 * tp / den) if den else 0.0


# ---------------------------------------------------------------- datasets


def evaluate_tensors(predict, tensors, fps: float = 50.0, segment_length: float = 1.0,
                     threshold: float = 0.5, median_window: int = 5, batch_size: int = 64,
                     reference_events=None) -> dict:
    """Score ``predict(mix, ref) -> (frame_probs, clip_probs | None)`` on a ``TensorSet``.

    Counts are pooled per target category across the split. ``reference_events(rec)`` may
    supply exact reference intervals; by default they are recovered from the frame labels.
    """
    counts = SegmentCounts({}, segment_length)
    clip_pred, clip_true = [], []
    for start in range(0, len(tensors), batch_size):
        sl = slice(start, start + batch_size)
        probs, clip = predict(tensors.mix[sl], tensors.ref[sl])
        probs = np.asarray(probs)
        for k, rec in enumerate(tensors.records[sl]):
            i = start + k
            cat = rec["target_category"]
            pred = binarize(probs[k], threshold, median_window, fps)
            if reference_events is not None:
                ref = reference_events(rec)
            else:
                ref = runs_to_events(tensors.frame_labels[i], fps)
            counts += segment_tabulate(pred, ref, rec["duration"], segment_length, category=cat)
            if clip is None:
                clip_pred.append(float(linear_softmax_np(probs[k])))
            else:
                clip_pred.append(float(np.asarray(clip)[k]))
            clip_true.append(float(tensors.clip_labels[i]))
    per, macro = f_measure(counts)
    cp = np.asarray(clip_pred) > threshold
    ct = np.asarray(clip_true) > 0.5
    return {
        "segment_length": segment_length,
        "per_category": {c: {"tp": tp, "fp": fp, "fn": fn, "F": per[c]}
                         for c, (tp, fp, fn) in sorted(counts.counts.items())},
        "macro_F": macro,
        "clip_level": {"accuracy": float(np.mean(cp == ct)) if len(ct) else 0.0,
                       "F": binary_f(cp, ct)},
        "n_samples": len(tensors),
    }


def linear_softmax_np(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    s = p.sum()
    return float((p * p).sum() / s) if s > 0 else 0.0


def frame_auc(scores, labels) -> float:
    """Threshold-free frame ranking quality: P(score of an active frame > score of an inactive one)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def random_predictor(seed: int = 0):
    """Uniform iid frame probabilities; the chance-level model."""
    rng = np.random.default_rng(seed)

    def predict(mix, ref):
        return rng.uniform(size=mix.shape[:2]), None
    return predict


def chance_level(tensors, fps: float = 50.0, segment_length: float = 1.0, threshold: float = 0.5,
                 median_window: int = 5, n_sims: int = 2000, seed: int = 0) -> float:
    """Monte-Carlo macro F of a random-probability predictor, from label priors alone.

    Per category, the reference prior q is the fraction of active reference segments; the
    prediction rate r is simulated by post-processing uniform noise over one segment's frames.
    Segments are then drawn as independent Bernoulli(q) / Bernoulli(r) pairs.
    """
    rng = np.random.default_rng(seed)
    seg_frames = int(round(segment_length * fps))
    noise = rng.uniform(size=(n_sims, seg_frames + 2 * median_window))
    if median_window > 1:
        noise = median_filter(noise, size=(1, median_window), mode="nearest")
    r = float(np.mean((noise[:, median_window:median_window + seg_frames] > threshold).any(axis=1)))

    seg = {}
    for i, rec in enumerate(tensors.records):
        n = max(1, int(math.ceil(rec["duration"] / segment_length - 1e-9)))
        act = _segment_activity(runs_to_events(tensors.frame_labels[i], fps), n, segment_length,
                                rec["duration"])
        a = seg.setdefault(rec["target_category"], [0, 0])
        a[0] += int(act.sum())
        a[1] += n
    scores = []
    for cat, (active, total) in sorted(seg.items()):
        if active == 0:
            continue
        q = active / total
        ref = rng.uniform(size=(n_sims, total)) < q
        pred = rng.uniform(size=(n_sims, total)) < r
        tp = (ref & pred).sum(1)
        fp = (~ref & pred).sum(1)
        fn = (ref & ~pred).sum(1)
        den = 2 * tp + fp + fn
        scores.append(float(np.mean(np.where(den > 0, 2 * tp / np.maximum(den, 1), 0.0))))
    return float(np.mean(scores)) if scores else 0.0


def format_report(report: dict) -> str:
    lines = [f"{'category':<16}{'tp':>7}{'fp':>7}{'fn':>7}{'F':>8}"]
    for cat, row in report["per_category"].items():
        lines.append(f"{cat:<16}{row['tp']:>7}{row['fp']:>7}{row['fn']:>7}{row['F']:>8.3f}")
    lines.append(f"{'macro F':<37}{report['macro_F']:>8.3f}")
    if "chance_level" in report:
        lines.append(f"{'chance level':<37}{report['chance_level']:>8.3f}")
    for cat, auc in report.get("frame_auc", {}).items():
        lines.append(f"{'frame AUC ' + cat:<37}{auc:>8.3f}")
    if "clip_level" in report:
        cl = report["clip_level"]
        lines.append(f"clip accuracy {cl['accuracy']:.3f}  clip F {cl['F']:.3f}")
    return "\n".join(lines)


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def evaluate_dataset(model, dataset, extractor, segment_length: float = 1.0, threshold: float = 0.5,
                     median_window: int = 5, mode: str | None = None, ref_frames: int | None = None,
                     checkpoint_hash: str = "") -> dict:
    """Run a ``TSDNet`` (or a ``predict`` callable) over a written split and score it.

    Reference intervals come from the soundscape annotations when available.
    """
    from .data import load_tensors
    from .model import TSDNet, make_predictor

    mode = mode or ("weak" if dataset.mode == "weak" else "strong")
    if isinstance(model, TSDNet):
        ref_frames = ref_frames or model.cfg.ref_frames
        predict = make_predictor(model, mode)
    else:
        predict = model
    tensors = load_tensors(dataset, extractor, ref_frames or 400)

    def reference_events(rec):
        if rec["soundscape_id"] in dataset.scapes:
            return [(a.onset, a.offset) for a in dataset.annotations(rec["soundscape_id"])
                    if a.category == rec["target_category"]]
        return runs_to_events(dataset.frame_labels(rec, tensors.mix.shape[1]), rec["fps"])

    fps = tensors.records[0]["fps"] if len(tensors) else 50.0
    report = evaluate_tensors(predict, tensors, fps, segment_length, threshold, median_window,
                              reference_events=reference_events)
    report["chance_level"] = chance_level(tensors, fps, segment_length, threshold, median_window)
    report["dataset"] = f"{dataset.root.name}/{dataset.split}"
    report["checkpoint_hash"] = checkpoint_hash
    if mode != "weak":
        report.pop("clip_level")
    return report
