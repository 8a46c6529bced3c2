"""Training loop, Adam, plateau learning-rate halving and checkpoints."""

from __future__ import annotations

import csv
import logging
import os
import shutil
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import fileio
from .autodiff import Tensor, no_grad, serialize
from .decoder import HEADS, DecoderConfig, MaskPair
from .encoder import EncoderConfig
from .losses import LossWeights, mixture_loss
from .metrics import binarize, dsc
from .model import ModelConfig, init_params, model_forward
from .synthetic import augment
from .vit import VitConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_dsc_bolus", "val_dsc_pharynx", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 2
    patience: int = 20
    min_delta: float = 1e-4
    max_epochs: int = 150
    seed: int = 0
    snippet_length: int = 5
    augment: bool = True
    loss_bce: float = 1 / 3
    loss_dice: float = 1 / 3
    loss_hd: float = 1 / 3
    # desk-scale widths; the encoder/transformer/decoder modules default wider
    enc_channels: tuple = (8, 16, 32, 64)
    enc_blocks: tuple = (1, 1, 1, 1)
    vit_dim: int = 64
    vit_layers: int = 2
    vit_heads: int = 4
    vit_mlp: int = 128
    dec_channels: tuple = (32, 16, 8, 8)
    final_upsample: str = "bilinear"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.snippet_length < 1 or self.snippet_length % 2 == 0:
            raise ValueError("snippet_length must be odd and >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        self.loss_weights()
        self.model_config((64, 64))

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_bce, self.loss_dice, self.loss_hd)

    def model_config(self, image_size) -> ModelConfig:
        return ModelConfig(
            snippet_length=self.snippet_length,
            image_size=tuple(image_size),
            encoder=EncoderConfig(stage_channels=self.enc_channels, blocks_per_stage=self.enc_blocks),
            vit=VitConfig(self.vit_dim, self.vit_layers, self.vit_heads, self.vit_mlp),
            decoder=DecoderConfig(stage_channels=self.dec_channels, final_upsample=self.final_upsample),
        )

    # ------------------------------------------------------------- key=value
    def to_items(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out[f.name] = v
        return out

    @classmethod
    def from_items(cls, items: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(items) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        updates = {}
        for key, raw in items.items():
            current = getattr(base, key)
            raw = str(raw).strip()
            try:
                if isinstance(current, bool):
                    if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    updates[key] = raw.lower() in ("true", "1", "yes")
                elif isinstance(current, tuple):
                    updates[key] = tuple(int(x) for x in raw.split(","))
                elif isinstance(current, int):
                    updates[key] = int(raw)
                elif isinstance(current, float):
                    updates[key] = float(raw)
                else:
                    updates[key] = raw
            except ValueError:
                raise ValueError(f"invalid value for {key}: {raw!r}") from None
        return replace(base, **updates)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_items(fileio.read_keyvalue(path))


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2**t) / (1 - b1**t)
        step = np.float32(self.lr * corr)
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= step * m / (np.sqrt(v) + np.float32(self.eps))


class PlateauHalving:
    """Halve the rate after ``patience`` epochs without a ``min_delta`` improvement."""

    def __init__(self, patience: int = 20, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.stale = 0

    def update(self, val_loss: float, lr: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.stale = 0
            return lr
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            return lr / 2
        return lr


class Predictor:
    """Inference wrapper: FrameStack (or frames) -> MaskPair of numpy probabilities."""

    def __init__(self, params: dict, config: ModelConfig):
        self.params = params
        self.config = config

    def __call__(self, stack) -> MaskPair:
        with no_grad():
            out = model_forward(stack, self.params, self.config)
        return MaskPair(out.bolus.data, out.pharynx.data)

    def predict_batch(self, stacks) -> np.ndarray:
        """``(B, 2, H, W)`` probabilities for a list of FrameStacks."""
        frames = np.stack([s.frames for s in stacks])
        with no_grad():
            out = model_forward(frames, self.params, self.config)
        return out.as_array()


# ---------------------------------------------------------------- checkpoints
def save_checkpoint(path, params: dict, optimizer: Adam, config: TrainConfig, state: dict) -> None:
    tmp = f"{path}.partial"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    for sub in ("params", "adam_m", "adam_v"):
        os.makedirs(os.path.join(tmp, sub))
    for name, p in params.items():
        serialize.save(os.path.join(tmp, "params", f"{name}.vtt1"), p.data)
        serialize.save(os.path.join(tmp, "adam_m", f"{name}.vtt1"), optimizer.m[name])
        serialize.save(os.path.join(tmp, "adam_v", f"{name}.vtt1"), optimizer.v[name])
    meta = {"format_version": CHECKPOINT_VERSION, "adam_step": optimizer.step_count}
    meta.update({k: (repr(v) if isinstance(v, float) else v) for k, v in state.items()})
    meta.update({f"config.{k}": v for k, v in config.to_items().items()})
    fileio.write_keyvalue(os.path.join(tmp, "checkpoint.txt"), meta)
    if os.path.exists(path):
        shutil.rmtree(path)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    params: dict
    config: TrainConfig
    model_config: ModelConfig
    state: dict
    adam_step: int
    adam_m: dict
    adam_v: dict


def load_checkpoint(path) -> Checkpoint:
    meta_path = os.path.join(path, "checkpoint.txt")
    if not os.path.isfile(meta_path):
        raise FileNotFoundError(f"no checkpoint at {path}")
    meta = fileio.read_keyvalue(meta_path)
    version = int(meta.get("format_version", -1))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})")
    config = TrainConfig.from_items({k[7:]: v for k, v in meta.items() if k.startswith("config.")})
    image_size = (int(meta["image_height"]), int(meta["image_width"]))
    model_config = config.model_config(image_size)
    expected = init_params(model_config, 0).keys()
    params, m, v = {}, {}, {}
    for name in expected:
        params[name] = Tensor(serialize.load(os.path.join(path, "params", f"{name}.vtt1")), requires_grad=True)
        m[name] = serialize.load(os.path.join(path, "adam_m", f"{name}.vtt1"))
        v[name] = serialize.load(os.path.join(path, "adam_v", f"{name}.vtt1"))
    state = {
        "epoch": int(meta["epoch"]),
        "lr": float(meta["lr"]),
        "best_val_loss": float(meta["best_val_loss"]),
        "stale": int(meta["stale"]),
        "image_height": image_size[0],
        "image_width": image_size[1],
    }
    return Checkpoint(params, config, model_config, state, int(meta["adam_step"]), m, v)


# ---------------------------------------------------------------- training
def _batch_arrays(stacks):
    frames = np.stack([s.frames for s in stacks]).astype(np.float32)
    targets = np.stack([[np.asarray(s.target.bolus), np.asarray(s.target.pharynx)] for s in stacks]).astype(
        np.float32
    )
    return frames, targets


def validate(params, model_config: ModelConfig, stacks, weights: LossWeights, batch: int = 10) -> tuple:
    """Mean validation loss and mean per-head DSC over ``stacks``."""
    if not stacks:
        return float("nan"), (float("nan"), float("nan"))
    total, scores = 0.0, {h: [] for h in HEADS}
    with no_grad():
        for lo in range(0, len(stacks), batch):
            chunk = stacks[lo : lo + batch]
            frames, targets = _batch_arrays(chunk)
            out = model_forward(frames, params, model_config)
            total += mixture_loss(out, targets, weights).item() * len(chunk)
            probs = out.as_array()
            for k in range(len(chunk)):
                for h, head in enumerate(HEADS):
                    scores[head].append(dsc(binarize(probs[k, h]), targets[k, h] > 0.5))
    return total / len(stacks), tuple(float(np.mean(scores[h])) for h in HEADS)


def train_step(params, optimizer: Adam, model_config: ModelConfig, frames, targets, weights) -> float:
    optimizer.zero_grad()
    out = model_forward(frames, params, model_config)
    loss = mixture_loss(out, targets, weights)
    loss.backward()
    optimizer.step()
    return loss.item()


def train(
    dataset,
    config: TrainConfig,
    out_dir,
    resume: str | None = None,
    epochs: int | None = None,
    progress=None,
) -> dict:
    """Train on ``dataset`` ('train'/'val' splits) and write logs and checkpoints to ``out_dir``.

    Writes ``train_log.csv``, ``best/`` and ``last/`` checkpoints. With
    ``resume`` the run continues from that checkpoint's epoch, optimizer
    and schedule state. ``epochs`` caps how many epochs this call runs.
    """
    os.makedirs(out_dir, exist_ok=True)
    t = config.snippet_length
    train_stacks = dataset.snippets("train", t)
    val_stacks = dataset.snippets("val", t)
    if not train_stacks:
        raise ValueError("training split is empty")
    image_size = train_stacks[0].frames.shape[-2:]
    model_config = config.model_config(image_size)
    weights = config.loss_weights()

    if resume:
        ckpt = load_checkpoint(resume)
        if ckpt.config != config:
            raise ValueError("resume checkpoint was trained with a different config")
        params = ckpt.params
        optimizer = Adam(params, ckpt.state["lr"], config.beta1, config.beta2, config.adam_eps)
        optimizer.step_count, optimizer.m, optimizer.v = ckpt.adam_step, ckpt.adam_m, ckpt.adam_v
        scheduler = PlateauHalving(config.patience, config.min_delta)
        scheduler.best, scheduler.stale = ckpt.state["best_val_loss"], ckpt.state["stale"]
        start = ckpt.state["epoch"] + 1
    else:
        params = init_params(model_config, config.seed)
        optimizer = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
        scheduler = PlateauHalving(config.patience, config.min_delta)
        start = 1
        with open(os.path.join(out_dir, "train_log.csv"), "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)

    stop = config.max_epochs if epochs is None else min(config.max_epochs, start - 1 + epochs)
    bs = config.batch_size
    history = []
    for epoch in range(start, stop + 1):
        tic = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch, 0]).permutation(len(train_stacks))
        losses = []
        for b in range(len(order) // bs):
            idx = order[b * bs : (b + 1) * bs]
            chunk = [train_stacks[i] for i in idx]
            if config.augment:
                chunk = [augment(s, np.random.default_rng([config.seed, epoch, 1, int(i)])) for s, i in zip(chunk, idx)]
            frames, targets = _batch_arrays(chunk)
            losses.append(train_step(params, optimizer, model_config, frames, targets, weights))
        train_loss = float(np.mean(losses))
        val_loss, val_dsc = validate(params, model_config, val_stacks, weights)
        lr_used = optimizer.lr
        improved = val_loss < scheduler.best - scheduler.min_delta
        optimizer.lr = scheduler.update(val_loss, optimizer.lr)
        row = (epoch, train_loss, val_loss, val_dsc[0], val_dsc[1], lr_used)
        history.append(dict(zip(LOG_COLUMNS, row)))
        with open(os.path.join(out_dir, "train_log.csv"), "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([epoch] + [f"{v:.9g}" for v in row[1:]])
        state = {
            "epoch": epoch,
            "lr": optimizer.lr,
            "best_val_loss": scheduler.best,
            "stale": scheduler.stale,
            "image_height": image_size[0],
            "image_width": image_size[1],
            "val_loss": val_loss,
        }
        save_checkpoint(os.path.join(out_dir, "last"), params, optimizer, config, state)
        if improved or not os.path.exists(os.path.join(out_dir, "best")):
            save_checkpoint(os.path.join(out_dir, "best"), params, optimizer, config, state)
        msg = (
            f"epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} "
            f"dsc {val_dsc[0]:.3f}/{val_dsc[1]:.3f} lr {lr_used:.2e} ({time.perf_counter() - tic:.1f}s)"
        )
        log.info(msg)
        if progress:
            progress(msg)
    return {"history": history, "params": params, "model_config": model_config}


OVERFIT_LR = 2e-2


def overfit_one(stack, config: TrainConfig, steps: int = 300, target: float = 0.05, lr: float = OVERFIT_LR) -> list:
    """Fit a single unaugmented sample; returns the loss after every step until ``target``.

    Uses its own, larger learning rate: with one sample there is no noise to
    average out and Adam moves each weight by at most ``lr`` per step.
    """
    model_config = config.model_config(stack.frames.shape[-2:])
    params = init_params(model_config, config.seed)
    optimizer = Adam(params, lr, config.beta1, config.beta2, config.adam_eps)
    frames, targets = _batch_arrays([stack])
    losses = []
    for _ in range(steps):
        losses.append(train_step(params, optimizer, model_config, frames, targets, config.loss_weights()))
        if losses[-1] < target:
            break
    return losses
