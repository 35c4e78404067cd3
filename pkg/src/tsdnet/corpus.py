"""Clip banks, soundscape synthesis and TSD sample/manifest generation."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .features import AudioClip, load_wav, write_wav

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
MODES = ("strong", "strong+", "weak")
_EDGE = 1e-9


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class EventAnnotation:
    category: str
    onset: float
    offset: float

    def __post_init__(self):
        if not (0.0 <= self.onset < self.offset):
            raise ValueError(f"bad event extent [{self.onset}, {self.offset})")


@dataclass
class Soundscape:
    scape_id: str
    mixture: AudioClip
    duration: float
    annotations: list
    background_id: str
    ingredients: list = field(default_factory=list)

    @property
    def categories(self) -> set:
        return {a.category for a in self.annotations}


@dataclass
class TsdSample:
    sample_id: str
    mixture_ref: str
    reference_ref: str
    target_category: str
    polarity: str
    frame_labels: Optional[np.ndarray] = None
    clip_label: Optional[int] = None


@dataclass(frozen=True)
class ClipEntry:
    clip_id: str
    category: str
    duration: float
    split: str
    path: Optional[str] = None


@dataclass
class ClipBank:
    entries: list
    _audio: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = [entry.clip_id for entry in self.entries]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate clip ids in bank")

    @property
    def categories(self) -> list:
        return sorted({entry.category for entry in self.entries})

    def select(self, split: str | None = None, category: str | None = None) -> list:
        return [entry for entry in self.entries
                if (split is None or entry.split == split) and (category is None or entry.category == category)]

    def audio(self, clip_id: str) -> AudioClip:
        if clip_id not in self._audio:
            entry = next(entry for entry in self.entries if entry.clip_id == clip_id)
            if entry.path is None:
                raise CorpusError(f"clip {clip_id} has neither audio in memory nor a path")
            self._audio[clip_id] = load_wav(entry.path)
        return self._audio[clip_id]

    def check(self, splits=SPLITS) -> None:
        """Every category needs >= 2 clips in each used split so a distinct reference exists."""
        deficient = []
        for split in splits:
            for cat in self.categories:
                n = len(self.select(split, cat))
                if n < 2:
                    deficient.append(f"{cat} ({split}: {n} clips)")
        if deficient:
            raise CorpusError("bank infeasible, deficient categories: " + ", ".join(deficient))

    def write(self, root) -> Path:
        """Write every clip as wav plus a ``bank.jsonl`` ingestion manifest under ``root``."""
        root = Path(root)
        (root / "clips").mkdir(parents=True, exist_ok=True)
        lines = []
        new_entries = []
        for entry in self.entries:
            rel = f"clips/{entry.clip_id}.wav"
            write_wav(root / rel, self.audio(entry.clip_id))
            lines.append(json.dumps({"clip_path": rel, "category": entry.category, "split": entry.split},
                                    sort_keys=True))
            new_entries.append(ClipEntry(entry.clip_id, entry.category, entry.duration, entry.split, str(root / rel)))
        (root / "bank.jsonl").write_text("\n".join(lines) + "\n")
        self.entries = new_entries
        self._audio.clear()  # reload the quantized audio, as an ingested bank would
        return root / "bank.jsonl"

    @classmethod
    def from_manifest(cls, path) -> "ClipBank":
        """Ingest ``{clip_path, category, split}`` records; relative paths resolve against the manifest."""
        path = Path(path)
        entries, audio = [], {}
        for rec in read_jsonl(path):
            p = Path(rec["clip_path"])
            if not p.is_absolute():
                p = path.parent / p
            clip = load_wav(p)
            audio[p.stem] = clip
            entries.append(ClipEntry(p.stem, rec["category"], clip.duration, rec["split"], str(p)))
        return cls(entries, audio)


# ----------------------------------------------------------------- toy bank

_FAMILIES = ("tone", "chirp", "noise", "pulse")


def _category_plan(n_categories: int, lo=300.0, hi=6000.0):
    freqs = np.geomspace(lo, hi, n_categories)
    return [(f"{_FAMILIES[k % 4]}_{int(round(f))}", _FAMILIES[k % 4], float(f)) for k, f in enumerate(freqs)]


def _render_family(family: str, f0: float, dur: float, sr: int, rng: np.random.Generator) -> np.ndarray:
    n = int(round(dur * sr))
    t = np.arange(n) / sr
    if family == "tone":
        vib = 1.0 + 0.005 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
        x = np.sin(2 * np.pi * np.cumsum(f0 * vib) / sr + rng.uniform(0, 2 * np.pi))
    elif family == "chirp":
        rate = rng.uniform(1.5, 3.0)
        inst = f0 * (1.0 + 0.08 * np.sin(2 * np.pi * rate * t))
        x = np.sin(2 * np.pi * np.cumsum(inst) / sr)
    elif family == "noise":
        spectrum = np.fft.rfft(rng.standard_normal(n))
        hz = np.fft.rfftfreq(n, 1 / sr)
        spectrum[np.abs(hz - f0) > 0.08 * f0] = 0
        x = np.fft.irfft(spectrum, n)
        x *= 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(4, 8) * t)
    elif family == "pulse":
        rate = rng.uniform(4, 7)
        gate = (np.sin(2 * np.pi * rate * t) > 0).astype(float)
        x = np.sin(2 * np.pi * f0 * t) * (0.15 + 0.85 * gate)
    else:
        raise ValueError(family)
    fade = min(n // 2, int(0.01 * sr))
    ramp = np.linspace(0, 1, fade)
    x[:fade] *= ramp
    x[n - fade:] *= ramp[::-1]
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12) * 0.1


def band_energy_classify(clip: AudioClip, centres: list) -> int:
    """Index of the ``centres`` band (+/-15%) holding the most energy per Hz."""
    spectrum = np.abs(np.fft.rfft(clip.samples)) ** 2
    hz = np.fft.rfftfreq(len(clip.samples), 1 / clip.sample_rate)
    scores = [spectrum[(hz >= 0.85 * f) & (hz <= 1.15 * f)].sum() / (0.3 * f) for f in centres]
    return int(np.argmax(scores))


def synth_toy_bank(rng_seed: int, n_categories: int, clips_per_category: int,
                   sample_rate: int = 22050, split_fractions=(0.6, 0.2, 0.2),
                   min_accuracy: float = 0.95) -> ClipBank:
    """Synthetic stand-in for a real clip bank: one signal family per category, 1-4 s clips.

    Separability is checked with a band-energy classifier before returning.
    """
    if n_categories < 2:
        raise CorpusError("need at least 2 categories")
    plan = _category_plan(n_categories)
    n_train = int(round(split_fractions[0] * clips_per_category))
    n_val = int(round(split_fractions[1] * clips_per_category))
    entries, audio = [], {}
    for k, (name, family, f0) in enumerate(plan):
        for i in range(clips_per_category):
            rng = np.random.default_rng([rng_seed, k, i])
            f = f0 * (1.0 + rng.uniform(-0.03, 0.03))
            dur = float(np.round(rng.uniform(1.0, 4.0) * sample_rate) / sample_rate)
            clip_id = f"{name}-{i:03d}"
            split = "train" if i < n_train else "validation" if i < n_train + n_val else "test"
            audio[clip_id] = AudioClip(_render_family(family, f, dur, sample_rate, rng), sample_rate, clip_id)
            entries.append(ClipEntry(clip_id, name, dur, split))
    bank = ClipBank(entries, audio)
    centres = [f for _, _, f in plan]
    hits = sum(band_energy_classify(audio[entry.clip_id], centres) == [p[0] for p in plan].index(entry.category)
               for entry in entries)
    acc = hits / len(entries)
    if acc < min_accuracy:
        raise CorpusError(f"toy bank not separable: band-energy accuracy {acc:.3f}")
    bank.oracle_accuracy = acc
    return bank


# ------------------------------------------------------------- soundscapes


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    k = np.arange(len(spectrum), dtype=np.float64)
    k[0] = 1.0
    x = np.fft.irfft(spectrum / np.sqrt(k), n)
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)


def _rms(x):
    return float(np.sqrt(np.mean(x ** 2))) if len(x) else 0.0


def synthesize_soundscape(bank: ClipBank, rng_seed, duration: float = 10.0, n_events=(1, 9),
                          split: str | None = None, snr_range=(-5.0, 20.0), sample_rate: int = 22050,
                          background_rms: float = 0.05, scape_id: str = "scape",
                          events: list | None = None) -> Soundscape:
    """Mix event clips onto pink noise.

    ``events`` optionally pins placements as ``(clip_id, onset_seconds, snr_db)`` tuples;
    otherwise k ~ U{n_events}, clips, onsets and SNRs are drawn from ``rng_seed``.
    """
    if not bank.entries:
        raise CorpusError("empty clip bank")
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(rng_seed)
    n = int(round(duration * sample_rate))
    background = pink_noise(n, rng) * background_rms
    mix = background.copy()
    pool = bank.select(split) if split else bank.entries
    if events is None:
        k = int(rng.integers(n_events[0], n_events[1] + 1))
        events = []
        for _ in range(k):
            entry = pool[int(rng.integers(len(pool)))]
            ev_len = min(int(round(entry.duration * sample_rate)), n)
            onset = int(rng.integers(0, n - ev_len + 1)) / sample_rate
            events.append((entry.clip_id, onset, float(rng.uniform(*snr_range))))

    annotations, ingredients = [], []
    for clip_id, onset_s, snr in events:
        entry = next(entry for entry in bank.entries if entry.clip_id == clip_id)
        src = bank.audio(clip_id)
        if src.sample_rate != sample_rate:
            from .features import resample
            src = resample(src, sample_rate)
        start = int(round(onset_s * sample_rate))
        if start >= n:
            continue
        x = src.samples[: n - start]  # trimmed when it would overrun the scape
        gain = background_rms * 10 ** (snr / 20.0) / (_rms(x) + 1e-12)
        mix[start:start + len(x)] += gain * x
        annotations.append(EventAnnotation(entry.category, start / sample_rate, (start + len(x)) / sample_rate))
        ingredients.append(clip_id)

    peak = np.max(np.abs(mix))
    if peak > 0.99:
        mix *= 0.99 / peak
    order = sorted(range(len(annotations)), key=lambda i: (annotations[i].onset, annotations[i].category))
    return Soundscape(scape_id, AudioClip(mix, sample_rate, scape_id), duration,
                      [annotations[i] for i in order], "pink", [ingredients[i] for i in order])


# --------------------------------------------------------------- labelling


def frame_labels(annotations, target: str, fps: float, t: int) -> np.ndarray:
    """Frame i is 1 iff [i/fps, (i+1)/fps) overlaps a ``target`` event with positive measure."""
    out = np.zeros(t, dtype=np.int8)
    idx = np.arange(t)
    for a in annotations:
        if a.category != target:
            continue
        on, off = a.onset * fps, a.offset * fps
        out[(idx < off - _EDGE) & (idx + 1 > on + _EDGE)] = 1
    return out


def runs_to_text(labels: np.ndarray) -> str:
    """Run-length form ``start:end,start:end`` with half-open frame ranges."""
    x = np.concatenate([[0], np.asarray(labels, dtype=np.int8), [0]])
    d = np.diff(x)
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    return ",".join(f"{start}:{end}" for start, end in zip(starts, ends))


def text_to_runs(text: str, t: int) -> np.ndarray:
    out = np.zeros(t, dtype=np.int8)
    for part in filter(None, text.strip().split(",")):
        start, end = (int(v) for v in part.split(":"))
        out[start:end] = 1
    return out


def _n_frames(duration: float, fps: float) -> int:
    return max(1, int(np.floor(duration * fps + 1e-9)))


def make_positive_samples(scape: Soundscape, bank: ClipBank, rng_seed, fps: float = 50.0,
                          split: str | None = None) -> list:
    """One positive per distinct category in the scape; repeats of a category share one label vector."""
    rng = np.random.default_rng(rng_seed)
    t = _n_frames(scape.duration, fps)
    used = set(scape.ingredients)
    samples = []
    for cat in sorted(scape.categories):
        candidates = [entry for entry in bank.select(split, cat) if entry.clip_id not in used]
        if not candidates:
            log.warning("no eligible reference for %s in %s; sample skipped", cat, scape.scape_id)
            continue
        ref = candidates[int(rng.integers(len(candidates)))]
        samples.append(TsdSample(f"{scape.scape_id}-{cat}-pos", scape.scape_id, ref.clip_id, cat, "positive",
                                 frame_labels=frame_labels(scape.annotations, cat, fps, t), clip_label=1))
    return samples


def make_negative_sample(scape: Soundscape, bank: ClipBank, rng_seed, fps: float = 50.0,
                         split: str | None = None, suffix: str = "neg") -> TsdSample:
    rng = np.random.default_rng(rng_seed)
    absent = [c for c in bank.categories if c not in scape.categories]
    if not absent:
        raise CorpusError(f"every bank category occurs in {scape.scape_id}; no negative possible")
    cat = absent[int(rng.integers(len(absent)))]
    candidates = bank.select(split, cat)
    if not candidates:
        raise CorpusError(f"no reference clip for category {cat}")
    ref = candidates[int(rng.integers(len(candidates)))]
    t = _n_frames(scape.duration, fps)
    return TsdSample(f"{scape.scape_id}-{cat}-{suffix}", scape.scape_id, ref.clip_id, cat, "negative",
                     frame_labels=np.zeros(t, dtype=np.int8), clip_label=0)


# ----------------------------------------------------------------- dataset


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path, records) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    Path(path).write_text(text)


def _relpath(path, root: Path) -> str:
    p = Path(path).resolve()
    try:
        return p.relative_to(root.resolve()).as_posix()
    except ValueError:
        return os.path.relpath(p, root.resolve())


def build_dataset(bank: ClipBank, mode: str, sizes: dict, rng_seed: int, out_dir,
                  duration: float = 10.0, n_events=(1, 9), snr_range=(-5.0, 20.0),
                  sample_rate: int = 22050, background_rms: float = 0.05, fps: float = 50.0) -> dict:
    """Synthesize soundscapes per split and write TSD manifests.

    Layout under ``out_dir``: ``audio/<split>/*.wav``, ``labels/<split>/*.txt``,
    ``<split>.jsonl`` (samples), ``soundscapes_<split>.jsonl`` and ``build_report.json``.
    Bank clips must have paths (``ClipBank.write``) so manifests can reference them.
    Returns ``{split: [record, ...]}``.
    """
    if mode not in MODES:
        raise CorpusError(f"mode must be one of {MODES}, got {mode!r}")
    splits = [s for s in SPLITS if sizes.get(s, 0) > 0]
    bank.check(splits)
    if any(entry.path is None for entry in bank.entries):
        raise CorpusError("bank clips must be written to disk before building a dataset")
    out = Path(out_dir)
    manifests, report = {}, {"mode": mode, "seed": rng_seed, "splits": {}}
    for si, split in enumerate(SPLITS):
        if split not in splits:
            continue
        (out / "audio" / split).mkdir(parents=True, exist_ok=True)
        (out / "labels" / split).mkdir(parents=True, exist_ok=True)
        scapes, samples, scape_records = [], [], []
        skipped_neg = 0
        for i in range(sizes[split]):
            sid = f"{split}-{i:05d}"
            ss = np.random.SeedSequence([rng_seed, si, i])
            mix_seed, pos_seed, neg_seed = ss.spawn(3)
            scape = synthesize_soundscape(bank, mix_seed, duration, n_events, split, snr_range,
                                          sample_rate, background_rms, scape_id=sid)
            wav = out / "audio" / split / f"{sid}.wav"
            write_wav(wav, scape.mixture)
            scapes.append(scape)
            scape_records.append({
                "scape_id": sid, "mixture_path": _relpath(wav, out), "duration": duration,
                "background_id": scape.background_id, "ingredients": scape.ingredients,
                "annotations": [[a.category, a.onset, a.offset] for a in scape.annotations]})
            samples.extend(make_positive_samples(scape, bank, pos_seed, fps, split))
            if mode == "strong+":
                try:
                    samples.append(make_negative_sample(scape, bank, neg_seed, fps, split))
                except CorpusError as exc:
                    skipped_neg += 1
                    log.warning("%s", exc)
        n_pos = len(samples)
        if mode == "weak":
            rng = np.random.default_rng([rng_seed, si, 1_000_003])
            eligible = [s for s in scapes if set(bank.categories) - s.categories]
            if n_pos and not eligible:
                raise CorpusError(f"{split}: no soundscape admits a negative sample")
            for j in range(n_pos):
                scape = eligible[int(rng.integers(len(eligible)))]
                samples.append(make_negative_sample(scape, bank, rng.integers(2**63), fps, split,
                                                    suffix=f"neg{j:05d}"))
        by_id = {s.scape_id: s for s in scapes}
        records = []
        for s in samples:
            ref_entry = next(entry for entry in bank.entries if entry.clip_id == s.reference_ref)
            rec = {"sample_id": s.sample_id, "split": split, "soundscape_id": s.mixture_ref,
                   "mixture_path": _relpath(out / "audio" / split / f"{s.mixture_ref}.wav", out),
                   "reference_path": _relpath(ref_entry.path, out), "reference_id": s.reference_ref,
                   "target_category": s.target_category, "polarity": s.polarity, "mode": mode,
                   "fps": fps, "duration": by_id[s.mixture_ref].duration}
            if mode == "weak":
                rec["clip_label"] = int(s.clip_label)
            else:
                lab = out / "labels" / split / f"{s.sample_id}.txt"
                lab.write_text(runs_to_text(s.frame_labels) + "\n")
                rec["frame_labels_path"] = _relpath(lab, out)
            records.append(rec)
        write_jsonl(out / f"{split}.jsonl", records)
        write_jsonl(out / f"soundscapes_{split}.jsonl", scape_records)
        manifests[split] = records
        n_neg = sum(r["polarity"] == "negative" for r in records)
        report["splits"][split] = {"soundscapes": len(scapes), "samples": len(records),
                                   "positives": len(records) - n_neg, "negatives": n_neg,
                                   "skipped_negatives": skipped_neg}
    (out / "build_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return manifests


@dataclass
class Dataset:
    """A written split: sample records plus soundscape annotations, paths resolved."""

    root: Path
    split: str
    records: list
    scapes: dict

    @classmethod
    def open(cls, root, split: str) -> "Dataset":
        root = Path(root)
        records = read_jsonl(root / f"{split}.jsonl")
        scape_path = root / f"soundscapes_{split}.jsonl"
        scapes = {r["scape_id"]: r for r in read_jsonl(scape_path)} if scape_path.exists() else {}
        return cls(root, split, records, scapes)

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    @property
    def mode(self) -> str:
        return self.records[0]["mode"] if self.records else "strong"

    def annotations(self, scape_id: str) -> list:
        return [EventAnnotation(c, on, off) for c, on, off in self.scapes[scape_id]["annotations"]]

    def frame_labels(self, rec: dict, t: int) -> np.ndarray:
        if "frame_labels_path" in rec:
            return text_to_runs(self.path(rec["frame_labels_path"]).read_text(), t)
        if rec["soundscape_id"] in self.scapes:
            return frame_labels(self.annotations(rec["soundscape_id"]), rec["target_category"], rec["fps"], t)
        raise CorpusError(f"no frame-level labels for {rec['sample_id']}")

    def clip_label(self, rec: dict) -> int:
        if "clip_label" in rec:
            return int(rec["clip_label"])
        return int(rec["polarity"] == "positive")
