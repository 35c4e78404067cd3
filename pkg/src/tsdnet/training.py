"""Losses, Mixup-TSD, and the three training stages."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import MixupConfig, TrainConfig
from .metrics import evaluate_tensors
from .model import PROB_EPS, TSDNet, check_finite_grads, make_predictor, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


class StageError(ValueError):
    pass


# ------------------------------------------------------------------- losses


def frame_bce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Summed frame binary cross-entropy along the last axis; soft targets allowed."""
    q = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(labels * torch.log(q) + (1.0 - labels) * torch.log1p(-q)).sum(-1)


def clip_bce(clip_prob: torch.Tensor, clip_label: torch.Tensor) -> torch.Tensor:
    q = clip_prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(clip_label * torch.log(q) + (1.0 - clip_label) * torch.log1p(-q))


def soft_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against a class-probability target (one-hot or mixup-blended)."""
    return -(target * F.log_softmax(logits, dim=-1)).sum(-1)


@dataclass
class LossBreakdown:
    l_sed: float
    l_cls: float
    l_total: float


# -------------------------------------------------------------------- mixup


def mixup_ratio(step: int, total_steps: int, cfg: MixupConfig = MixupConfig()) -> float:
    """Linear schedule from ``rate_start`` at step 0 to ``rate_end`` at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"need 0 <= step <= total_steps and total_steps >= 1, got {step}/{total_steps}")
    return cfg.rate_start + (cfg.rate_end - cfg.rate_start) * step / total_steps


def _crop_time(a, b, axis):
    n = min(a.shape[axis], b.shape[axis])
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(0, n)
    return a[tuple(idx)], b[tuple(idx)]


def mixup_pair(s1: tuple, s2: tuple, weight: float, time_axis: int = -2):
    """Blend ``(X, R, y)`` triples: ``weight * s1 + (1 - weight) * s2`` per member.

    X (mixture features) and R (reference features) are cropped to a common frame count along
    ``time_axis``; frame-level y is cropped with X along its last axis.
    """
    if not 0.0 <= weight <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    # Derive the smaller weight from the larger one: 1 - w is exact for w >= 0.5, so
    # (s1, s2, weight) and (s2, s1, 1 - weight) end up with the same weight pair, bit for bit.
    if weight < 0.5:
        rest = 1.0 - weight
        weight = 1.0 - rest
    else:
        rest = 1.0 - weight
    out = []
    for k, (a, b) in enumerate(zip(s1, s2)):
        if k < 2:
            a, b = _crop_time(a, b, time_axis)
        elif a.ndim and b.ndim and a.shape[-1] != b.shape[-1]:
            a, b = _crop_time(a, b, -1)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch after alignment: {tuple(a.shape)} vs {tuple(b.shape)}")
        if weight == 1.0:
            out.append(a.clone() if torch.is_tensor(a) else np.array(a, copy=True))
        elif weight == 0.0:
            out.append(b.clone() if torch.is_tensor(b) else np.array(b, copy=True))
        else:
            out.append(weight * a + rest * b)
    return tuple(out)


# -------------------------------------------------------------------- loops


class Trainer:
    """Shared batching, optimisation and logging for all stages."""

    def __init__(self, model: TSDNet, cfg: TrainConfig, log_path=None, checkpoint_dir=None,
                 categories: list | None = None, fps: float = 50.0, eval_kwargs: dict | None = None):
        self.model = model
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.categories = list(categories or [])
        self.fps = fps
        self.eval_kwargs = eval_kwargs or {}
        self.records = []
        self._log_fh = open(self.log_path, "w") if self.log_path else None

    def close(self):
        if self._log_fh:
            self._log_fh.close()
            self._log_fh = None

    def _log(self, rec: dict) -> None:
        self.records.append(rec)
        if self._log_fh:
            self._log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._log_fh.flush()

    def _optimizer(self):
        params = [p for p in self.model.parameters() if p.requires_grad]
        return torch.optim.Adam(params, lr=self.cfg.learning_rate, betas=tuple(self.cfg.adam_betas),
                                eps=self.cfg.adam_eps)

    def _step(self, opt, loss) -> None:
        opt.zero_grad(set_to_none=True)
        loss.backward()
        check_finite_grads(self.model)
        params = [p for p in self.model.parameters() if p.requires_grad]
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
        opt.step()

    def _batches(self, n: int):
        order = self.rng.permutation(n)
        bs = self.cfg.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    def _check(self, *values):
        for v in values:
            if not math.isfinite(v):
                raise TrainingDivergedError(f"non-finite loss at step {len(self.records)}")

    def _save(self, name, opt, extra):
        if self.checkpoint_dir:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(self.checkpoint_dir / name, self.model, opt, extra)

    # ------------------------------------------------------------ pretrain

    def pretrain_conditional(self, x: np.ndarray, y: np.ndarray, x_val=None, y_val=None) -> TSDNet:
        """Classification pretraining of the conditional network on reference clips."""
        if self.cfg.stage != "pretrain-conditional":
            raise StageError(f"stage {self.cfg.stage!r} cannot run conditional pretraining")
        if len(self.categories) > self.model.cfg.n_classes or (len(y) and y.max() >= self.model.cfg.n_classes):
            raise StageError(f"{len(self.categories)} categories but the classification head has "
                             f"{self.model.cfg.n_classes} outputs")
        model = self.model
        model.freeze_conditional(False)
        for p in model.detection.parameters():
            p.requires_grad_(False)
        opt = self._optimizer()
        torch.manual_seed(self.cfg.seed)
        step, best, best_state = 0, -math.inf, None
        x_t, y_t = torch.as_tensor(x), torch.as_tensor(y)
        for epoch in range(self.cfg.epochs):
            model.train()
            correct = 0
            for idx in self._batches(len(x)):
                idx_t = torch.as_tensor(idx)
                _, logits = model.conditional(x_t[idx_t])
                loss = F.cross_entropy(logits, y_t[idx_t])
                self._step(opt, loss)
                value = loss.item()
                self._check(value)
                correct += int((logits.argmax(1) == y_t[idx_t]).sum())
                self._log({"step": step, "epoch": epoch, "stage": self.cfg.stage, "l_cls": value,
                           "l_total": value, "lr": self.cfg.learning_rate})
                step += 1
            metric = correct / len(x)
            if x_val is not None and len(x_val):
                metric = self.classification_accuracy(x_val, y_val)
            self._log({"epoch": epoch, "stage": self.cfg.stage, "train_accuracy": correct / len(x),
                       "selection_metric": metric})
            if metric > best:
                best, best_state = metric, copy.deepcopy(model.state_dict())
        model.load_state_dict(best_state)
        for p in model.detection.parameters():
            p.requires_grad_(True)
        self._save("best.npz", None, {"stage": self.cfg.stage, "categories": self.categories,
                                      "selection_metric": best})
        return model

    def classification_accuracy(self, x, y) -> float:
        self.model.eval()
        with torch.no_grad():
            logits = torch.cat([self.model.conditional(torch.as_tensor(x[i:i + 64]))[1]
                                for i in range(0, len(x), 64)])
        return float((logits.argmax(1).numpy() == np.asarray(y)).mean())

    # ----------------------------------------------------------- detection

    def _validate(self, val, mode) -> float:
        rep = evaluate_tensors(make_predictor(self.model, mode), val, self.fps, **self.eval_kwargs)
        return rep["macro_F"] if mode == "strong" else rep["clip_level"]["F"]

    def train_detection(self, train, val=None) -> TSDNet:
        """Detection training with the conditional network frozen (stage train-detection)
        or jointly with the classification loss (stage joint-finetune)."""
        joint = self.cfg.stage == "joint-finetune"
        if self.cfg.stage not in ("train-detection", "joint-finetune"):
            raise StageError(f"stage {self.cfg.stage!r} cannot train the detection network")
        mode = self.cfg.supervision
        if train.records and mode == "strong" and train.records[0]["mode"] == "weak":
            raise StageError("weak manifest cannot drive strong supervision")
        if train.records and mode == "weak" and train.records[0]["mode"] != "weak":
            raise StageError(f"{train.records[0]['mode']} manifest given but supervision is weak")
        if joint and (train.ref_class < 0).any():
            missing = sorted({r["target_category"] for r, c in zip(train.records, train.ref_class) if c < 0})
            raise StageError(f"reference categories absent from the classification head: {missing}")

        model = self.model
        model.freeze_conditional(not joint)
        opt = self._optimizer()
        torch.manual_seed(self.cfg.seed)
        n_classes = model.cfg.n_classes
        batches_per_epoch = math.ceil(len(train) / self.cfg.batch_size)
        total = max(1, self.cfg.epochs * batches_per_epoch)
        step, best, best_state = 0, -math.inf, None
        for epoch in range(self.cfg.epochs):
            model.train()
            for idx in self._batches(len(train)):
                mix = torch.as_tensor(train.mix[idx])
                ref = torch.as_tensor(train.ref[idx])
                y = torch.as_tensor(train.frame_labels[idx] if mode == "strong" else train.clip_labels[idx])
                cls = F.one_hot(torch.as_tensor(np.maximum(train.ref_class[idx], 0)), n_classes).float()
                rate = mixup_ratio(step, total, self.cfg.mixup)
                weight = None
                if len(idx) > 1 and self.rng.random() < rate:
                    weight = float(self.rng.beta(self.cfg.mixup.beta_a, self.cfg.mixup.beta_b))
                    perm = torch.as_tensor(self.rng.permutation(len(idx)))
                    mix, ref, y = mixup_pair((mix, ref, y), (mix[perm], ref[perm], y[perm]), weight)
                    cls = weight * cls + (1.0 - weight) * cls[perm]
                out, logits = model(mix, ref, mode)
                if mode == "strong":
                    l_sed = frame_bce(out.frame_probs, y).mean()
                else:
                    l_sed = clip_bce(out.clip_prob, y).mean()
                if joint:
                    l_cls = soft_cross_entropy(logits, cls).mean()
                    loss = l_sed + l_cls
                else:
                    l_cls, loss = None, l_sed
                self._step(opt, loss)
                bd = LossBreakdown(l_sed.item(), l_cls.item() if joint else 0.0, 0.0)
                bd.l_total = bd.l_sed + bd.l_cls
                self._check(bd.l_sed, bd.l_cls)
                rec = {"step": step, "epoch": epoch, "stage": self.cfg.stage, "mix_rate": rate,
                       "l_sed": bd.l_sed, "l_total": bd.l_total, "lr": self.cfg.learning_rate}
                if joint:
                    rec["l_cls"] = bd.l_cls
                if weight is not None:
                    rec["mix_weight"] = weight
                self._log(rec)
                step += 1
            metric = self._validate(val, mode) if val is not None and len(val) else -float(bd.l_total)
            self._log({"epoch": epoch, "stage": self.cfg.stage, "selection_metric": metric})
            extra = {"stage": self.cfg.stage, "epoch": epoch, "categories": self.categories,
                     "supervision": mode, "selection_metric": metric}
            self._save(f"epoch{epoch:03d}.npz", opt, extra)
            if metric > best:
                best, best_state = metric, copy.deepcopy(model.state_dict())
                self._save("best.npz", opt, extra)
        model.load_state_dict(best_state)
        model.freeze_conditional(False)
        self.best_metric = best
        return model


def pretrain_conditional(model: TSDNet, x, y, cfg: TrainConfig, categories, x_val=None, y_val=None,
                         **kwargs) -> TSDNet:
    tr = Trainer(model, cfg, categories=categories, **kwargs)
    try:
        return tr.pretrain_conditional(x, y, x_val, y_val)
    finally:
        tr.close()


def train_detection(model: TSDNet, train, val, cfg: TrainConfig, **kwargs) -> TSDNet:
    if cfg.stage != "train-detection":
        raise StageError(f"expected stage train-detection, got {cfg.stage!r}")
    tr = Trainer(model, cfg, **kwargs)
    try:
        return tr.train_detection(train, val)
    finally:
        tr.close()


def joint_finetune(model: TSDNet, train, val, cfg: TrainConfig, **kwargs) -> TSDNet:
    if cfg.stage != "joint-finetune":
        raise StageError(f"expected stage joint-finetune, got {cfg.stage!r}")
    tr = Trainer(model, cfg, **kwargs)
    try:
        return tr.train_detection(train, val)
    finally:
        tr.close()
