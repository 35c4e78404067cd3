"""Feature tensors for manifests: mixture log-mels, fixed-length reference features, labels."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import ClipBank, Dataset
from .features import (FeatureCache, MixtureFeatureConfig, ReferenceFeatureConfig, load_wav,
                       mixture_features, reference_features)


def _cfg_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:12]


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Crop to the first ``n`` frames, or tile the clip until it reaches ``n``."""
    if len(x) >= n:
        return x[:n]
    reps = -(-n // len(x))
    return np.concatenate([x] * reps, axis=0)[:n]


class FeatureExtractor:
    """Computes (and optionally caches) features for wav paths."""

    def __init__(self, mixture_cfg=MixtureFeatureConfig(), reference_cfg=ReferenceFeatureConfig(),
                 cache_dir=None):
        self.mixture_cfg = mixture_cfg
        self.reference_cfg = reference_cfg
        self._mix_hash = "mix-" + _cfg_hash(mixture_cfg)
        self._ref_hash = "ref-" + _cfg_hash(reference_cfg)
        self.cache = FeatureCache(Path(cache_dir)) if cache_dir else None
        self._memory = {}

    def _get(self, key, cfg_hash, compute):
        if self.cache is not None:
            return self.cache.get(key, cfg_hash, compute)
        k = (key, cfg_hash)
        if k not in self._memory:
            self._memory[k] = np.asarray(compute(), dtype=np.float32)
        return self._memory[k]

    @staticmethod
    def _key(path) -> str:
        p = Path(path).resolve()
        return hashlib.sha1(str(p).encode()).hexdigest()[:16] + "-" + p.stem

    def mixture(self, path) -> np.ndarray:
        return self._get(self._key(path), self._mix_hash,
                         lambda: mixture_features(load_wav(path), self.mixture_cfg).values)

    def reference(self, path) -> np.ndarray:
        return self._get(self._key(path), self._ref_hash,
                         lambda: reference_features(load_wav(path), self.reference_cfg).values)


@dataclass
class TensorSet:
    """Stacked arrays for one split."""

    mix: np.ndarray          # n, t, n_mels
    ref: np.ndarray          # n, ref_frames, ref_features
    frame_labels: np.ndarray  # n, t (zeros when unknown)
    clip_labels: np.ndarray   # n
    ref_class: np.ndarray     # n, index into categories (-1 if unknown)
    records: list

    def __len__(self):
        return len(self.records)

    def subset(self, idx) -> "TensorSet":
        idx = np.asarray(idx)
        return TensorSet(self.mix[idx], self.ref[idx], self.frame_labels[idx], self.clip_labels[idx],
                         self.ref_class[idx], [self.records[i] for i in idx])


def load_tensors(ds: Dataset, extractor: FeatureExtractor, ref_frames: int,
                 categories: list | None = None) -> TensorSet:
    mixes, refs, frames, clips, classes = [], [], [], [], []
    index = {c: i for i, c in enumerate(categories or [])}
    for rec in ds.records:
        m = extractor.mixture(ds.path(rec["mixture_path"]))
        r = extractor.reference(ds.path(rec["reference_path"]))
        mixes.append(m)
        refs.append(fit_length(r, ref_frames))
        try:
            frames.append(ds.frame_labels(rec, len(m)))
        except ValueError:
            frames.append(np.zeros(len(m), dtype=np.int8))
        clips.append(ds.clip_label(rec))
        classes.append(index.get(rec["target_category"], -1))
    t = min(len(m) for m in mixes)
    return TensorSet(np.stack([m[:t] for m in mixes]), np.stack(refs),
                     np.stack([f[:t] for f in frames]).astype(np.float32),
                     np.asarray(clips, dtype=np.float32), np.asarray(classes, dtype=np.int64),
                     list(ds.records))


def load_bank_tensors(bank: ClipBank, split: str, extractor: FeatureExtractor, ref_frames: int,
                      categories: list) -> tuple[np.ndarray, np.ndarray]:
    """Reference features and class indices for every bank clip of ``split`` in ``categories``."""
    index = {c: i for i, c in enumerate(categories)}
    xs, ys = [], []
    for entry in bank.select(split):
        if entry.category not in index:
            continue
        xs.append(fit_length(extractor.reference(entry.path), ref_frames))
        ys.append(index[entry.category])
    return np.stack(xs), np.asarray(ys, dtype=np.int64)
