"""TSDNet: conditional network, fusion, and strong/weak detection heads."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .config import ModelConfig, as_dict, config_hash

CHECKPOINT_VERSION = 1
PROB_EPS = 1e-7


class InputTooShortError(ValueError):
    pass


class CheckpointMismatchError(RuntimeError):
    pass


def linear_softmax_pool(probs: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """sum(p^2) / sum(p) along ``dim``; an all-zero vector pools to 0."""
    num = (probs * probs).sum(dim)
    den = probs.sum(dim)
    safe = torch.where(den > 0, den, torch.ones_like(den))
    return torch.where(den > 0, num / safe, torch.zeros_like(den))


def fuse_concat(embedding: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
    """Append ``embedding`` (b, k) to every frame of ``frames`` (b, t, d) -> (b, t, d + k)."""
    return torch.cat([frames, embedding.unsqueeze(1).expand(-1, frames.shape[1], -1)], dim=-1)


def fuse_multiply(embedding: torch.Tensor, frames: torch.Tensor, proj_time: nn.Conv1d,
                  proj_embed: nn.Conv1d) -> torch.Tensor:
    """proj_time(frames) * proj_embed(embedding), both 1x1 convolutions; result (b, t, d')."""
    ft = proj_time(frames.transpose(1, 2))            # b, d', t
    fe = proj_embed(embedding.unsqueeze(-1))                  # b, d', 1
    return (ft * fe).transpose(1, 2)


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in) / math.sqrt(2.0)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GRU):
            for name, p in m.named_parameters():
                if "weight_hh" in name:
                    for chunk in p.data.chunk(3, 0):
                        nn.init.orthogonal_(chunk)
                elif "weight_ih" in name:
                    for chunk in p.data.chunk(3, 0):
                        nn.init.xavier_uniform_(chunk)
                else:
                    nn.init.zeros_(p)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, momentum):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout, momentum=momentum)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout, momentum=momentum)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        return F.avg_pool2d(x, 2)


class ConditionalNet(nn.Module):
    """VGG-style encoder over reference log-mel+MFCC: returns (embedding, class logits)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.input_norm = nn.BatchNorm1d(cfg.ref_features, momentum=cfg.bn_momentum)
        chans = (1,) + tuple(cfg.cond_channels)
        self.blocks = nn.ModuleList(ConvBlock(a, b, cfg.bn_momentum) for a, b in zip(chans[:-1], chans[1:]))
        self.embed = nn.Linear(chans[-1], cfg.embed_dim)
        self.classifier = nn.Linear(chans[-1], cfg.n_classes)

    def forward(self, ref: torch.Tensor):
        t, f = ref.shape[1], ref.shape[2]
        if t < 16 or f < 16:
            raise InputTooShortError(
                f"reference needs >= 16 frames and >= 16 features for 4 halvings, got {t} x {f}")
        x = self.input_norm(ref.transpose(1, 2)).transpose(1, 2).unsqueeze(1)
        for block in self.blocks:
            x = block(x)
        pooled = x.amax(dim=(2, 3)) + x.mean(dim=(2, 3))
        return self.embed(pooled), self.classifier(pooled)


@dataclass
class DetectionOutput:
    frame_probs: torch.Tensor               # (b, t)
    clip_prob: Optional[torch.Tensor] = None  # (b,) in weak mode


class DetectionNet(nn.Module):
    """4 conv layers -> Bi-GRU -> 2 fully-connected layers -> sigmoid per frame."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.input_norm = nn.BatchNorm1d(cfg.n_mels, momentum=cfg.bn_momentum)
        width = cfg.n_mels + (cfg.embed_dim if cfg.fusion == "concat" else 0)
        chans = (1,) + tuple(cfg.det_channels)
        self.convs = nn.ModuleList()
        self.bns = nn.ModuleList()
        for a, b, fp in zip(chans[:-1], chans[1:], cfg.freq_pool):
            self.convs.append(nn.Conv2d(a, b, 3, padding=1, bias=False))
            self.bns.append(nn.BatchNorm2d(b, momentum=cfg.bn_momentum))
            width //= fp
        if width < 1:
            raise ValueError(f"{cfg.n_mels} mel bins cannot be pooled by {cfg.freq_pool}")
        conv_dim = chans[-1] * width
        if cfg.fusion == "multiply":
            self.proj_time = nn.Conv1d(conv_dim, cfg.fusion_dim, 1)
            self.proj_embed = nn.Conv1d(cfg.embed_dim, cfg.fusion_dim, 1)
            rnn_in = cfg.fusion_dim
        else:
            rnn_in = conv_dim
        self.gru = nn.GRU(rnn_in, cfg.gru_hidden, batch_first=True, bidirectional=True)
        self.fc1 = nn.Linear(2 * cfg.gru_hidden, cfg.fc_hidden)
        self.fc2 = nn.Linear(cfg.fc_hidden, 1)

    @property
    def min_frames(self) -> int:
        return self.cfg.total_time_pool

    def forward(self, mix: torch.Tensor, embedding: torch.Tensor, mode: str = "strong") -> DetectionOutput:
        b, t, f = mix.shape
        if f != self.cfg.n_mels:
            raise ValueError(f"expected {self.cfg.n_mels} mel bins, got {f}")
        if t < self.min_frames:
            raise InputTooShortError(f"mixture needs >= {self.min_frames} frames, got {t}")
        x = self.input_norm(mix.transpose(1, 2)).transpose(1, 2)
        if self.cfg.fusion == "concat":
            x = fuse_concat(embedding, x)
        x = x.unsqueeze(1)
        slope = self.cfg.leaky_slope
        for conv, bn, tp, fp in zip(self.convs, self.bns, self.cfg.time_pool, self.cfg.freq_pool):
            x = F.leaky_relu(bn(conv(x)), slope)
            if tp > 1 or fp > 1:
                x = F.max_pool2d(x, (tp, fp))
        x = x.permute(0, 2, 1, 3).flatten(2)          # b, t', c * f'
        if self.cfg.fusion == "multiply":
            x = fuse_multiply(embedding, x, self.proj_time, self.proj_embed)
        x, _ = self.gru(x)
        x = F.leaky_relu(self.fc1(x), slope)
        logits = self.fc2(x).squeeze(-1)               # b, t'
        if logits.shape[1] != t:
            logits = F.interpolate(logits.unsqueeze(1), size=t, mode="nearest").squeeze(1)
        probs = torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)
        out = DetectionOutput(probs)
        if mode == "weak":
            out.clip_prob = linear_softmax_pool(probs, dim=1)
        elif mode != "strong":
            raise ValueError(f"mode must be strong or weak, got {mode!r}")
        return out


class TSDNet(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.conditional = ConditionalNet(cfg)
        self.detection = DetectionNet(cfg)
        _init_weights(self)
        torch.random.set_rng_state(gen_state)

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg)

    def forward(self, mix: torch.Tensor, ref: torch.Tensor, mode: str = "strong"):
        embedding, class_logits = self.conditional(ref)
        return self.detection(mix, embedding, mode), class_logits

    def freeze_conditional(self, frozen: bool = True) -> None:
        for p in self.conditional.parameters():
            p.requires_grad_(not frozen)
        self.train(self.training)

    def train(self, mode: bool = True):
        super().train(mode)
        # A frozen conditional network also keeps its batch-norm statistics fixed.
        if mode and not any(p.requires_grad for p in self.conditional.parameters()):
            self.conditional.eval()
        return self


def check_finite_grads(model: nn.Module) -> None:
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name}")


# ------------------------------------------------------------------- checkpoint


def save_checkpoint(path, model: TSDNet, optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> None:
    """npz container: parameters and buffers as float32 arrays, optimizer moments, json metadata."""
    arrays = {}
    for name, t in model.state_dict().items():
        a = t.detach().cpu().numpy()
        arrays[f"state/{name}"] = a.astype(np.float32) if a.dtype.kind == "f" else a
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p, {})
                for k, v in st.items():
                    arr = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
                    arrays[f"optim/{names[id(p)]}/{k}"] = arr.astype(np.float32)
    meta = {"version": CHECKPOINT_VERSION, "config_hash": model.config_hash,
            "model_config": as_dict(model.cfg), "extra": extra or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint_meta(path) -> dict:
    with np.load(path) as data:
        return json.loads(bytes(data["__meta__"]).decode())


def load_checkpoint(path, cfg: ModelConfig | None = None,
                    allow_mismatch: bool = False) -> tuple[TSDNet, dict]:
    """Rebuild a model; refuses a config-hash mismatch unless ``allow_mismatch``."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(f"unsupported checkpoint version {meta.get('version')}")
        if cfg is None:
            cfg = _model_config_from_dict(meta["model_config"])
        elif config_hash(cfg) != meta["config_hash"] and not allow_mismatch:
            raise CheckpointMismatchError(
                f"checkpoint config hash {meta['config_hash']} != requested {config_hash(cfg)}")
        model = TSDNet(cfg)
        state = {k[len("state/"):]: torch.from_numpy(np.array(data[k]))
                 for k in data.files if k.startswith("state/")}
    if allow_mismatch:
        own = model.state_dict()
        state = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
    model.load_state_dict(state, strict=not allow_mismatch)
    return model, meta


def load_optimizer_moments(path, model: TSDNet, optimizer: torch.optim.Optimizer) -> None:
    params = dict(model.named_parameters())
    with np.load(path) as data:
        for k in data.files:
            if k.startswith("optim/"):
                _, pname, key = k.split("/", 2)
                optimizer.state[params[pname]][key] = torch.from_numpy(np.array(data[k]))


def _model_config_from_dict(d: dict) -> ModelConfig:
    fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return ModelConfig(**fixed)


def make_predictor(model: TSDNet, mode: str = "strong", batch_size: int = 64):
    """numpy-in/numpy-out inference closure in evaluation mode."""

    def predict(mix, ref):
        was_training = model.training
        model.eval()
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            out, _ = model(torch.as_tensor(np.asarray(mix), dtype=dtype),
                           torch.as_tensor(np.asarray(ref), dtype=dtype), mode)
        model.train(was_training)
        clip = None if out.clip_prob is None else out.clip_prob.numpy()
        return out.frame_probs.numpy(), clip
    return predict
