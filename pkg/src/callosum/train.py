"""Supervised fine-tuning: augmentation, two-channel BCE, SGD with warmup + cosine decay."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import AXON, MYELIN, read_label, read_patch
from .evaluate import IoUReport
from .infer import plan_tiles, predict_image, as_tile_fn
from .model import SegModel, save_snapshot, to_class_mask

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
BASE_LR_CANDIDATES = (0.05, 0.02, 0.01, 0.005)


class TrainingDiverged(RuntimeError):
    pass


@dataclasses.dataclass
class TrainConfig:
    total_steps: int = 200_000
    batch_size: int = 2
    base_lr: float = 0.01
    warmup_steps: int | None = None
    min_lr: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    threshold: float = 0.5
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    intensity_jitter: float = 0.1
    seed: int = 0
    checkpoint_every: int = 1000
    stop_at_miou: float | None = None

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = self.total_steps // 100
        self.validate()

    def validate(self):
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")
        if self.warmup_steps < 0 or (self.total_steps > 0 and self.warmup_steps >= self.total_steps):
            raise ValueError(f"warmup_steps {self.warmup_steps} must be < total_steps {self.total_steps}")
        if not self.base_lr > self.min_lr >= 0:
            raise ValueError("need base_lr > min_lr >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(cfg: TrainConfig, step):
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    w, total = cfg.warmup_steps, cfg.total_steps
    if w > 0 and step <= w:
        return cfg.base_lr * step / w
    progress = (step - w) / (total - w) if total > w else 1.0
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def target_channels(mask):
    """``(..., H, W)`` class mask -> ``(..., 2, H, W)`` binary axon/myelin targets."""
    mask = torch.as_tensor(np.asarray(mask))
    return torch.stack([(mask == AXON), (mask == MYELIN)], dim=-3).to(torch.float32)


def bce_loss(pred, target, eps=BCE_EPS):
    """Mean binary cross-entropy over every pixel of both channels (probabilities clamped to [eps, 1-eps])."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def bce_loss_logits(logits, target):
    # same loss evaluated from logits; stays informative where float32 sigmoid saturates
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


# -- augmentation ------------------------------------------------------------


def augment(image, mask, cfg: TrainConfig, rng):
    """Random flips / 90-degree rotations on both arrays, intensity jitter on the image only."""
    if cfg.hflip and rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if cfg.vflip and rng.random() < 0.5:
        image, mask = image[::-1], mask[::-1]
    if cfg.rot90:
        k = int(rng.integers(4))
        image, mask = np.rot90(image, k), np.rot90(mask, k)
    if cfg.intensity_jitter > 0:
        j = cfg.intensity_jitter
        contrast = rng.uniform(1 - j, 1 + j)
        brightness = rng.uniform(-j, j) * 255.0
        f = image.astype(np.float32)
        f = (f - f.mean()) * contrast + f.mean() + brightness
        image = np.clip(np.rint(f), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def _fit(image, mask, size, rng):
    h, w = image.shape
    if h < size or w < size:
        ph, pw = max(0, size - h), max(0, size - w)
        image = np.pad(image, ((0, ph), (0, pw)), mode="reflect")
        mask = np.pad(mask, ((0, ph), (0, pw)), mode="reflect")
        h, w = image.shape
    y = int(rng.integers(h - size + 1))
    x = int(rng.integers(w - size + 1))
    return image[y:y + size, x:x + size], mask[y:y + size, x:x + size]


def sample_batch(dataset, cfg: TrainConfig, size, rng):
    idx = rng.integers(len(dataset), size=cfg.batch_size)
    images, masks = [], []
    for i in idx:
        img, msk = _fit(*dataset[int(i)], size, rng)
        img, msk = augment(img, msk, cfg, rng)
        images.append(img)
        masks.append(msk)
    x = torch.from_numpy(np.stack(images)[:, None].astype(np.float32) / 255.0)
    return x, target_channels(np.stack(masks)), [int(i) for i in idx]


# -- evaluation / state ------------------------------------------------------


def evaluate_model(model, dataset, threshold=0.5, stride_px=None):
    """Micro-averaged IoU report of tiled predictions over ``(image, mask)`` pairs."""
    was_training = model.training
    tile_fn = as_tile_fn(model)
    report = IoUReport()
    for image, mask in dataset:
        plan = plan_tiles(image.shape[1], image.shape[0], model.cfg.input_px, stride_px)
        probs = predict_image(tile_fn, image, plan)
        report.add(to_class_mask(probs, threshold), mask)
    model.train(was_training)
    return report


@dataclasses.dataclass
class TrainState:
    step: int = 0
    model_state: dict | None = None
    optimizer_state: dict | None = None
    best_miou: float = -1.0
    best_step: int = -1
    best_model_state: dict | None = None
    rng_state: dict | None = None
    last_loss: float | None = None
    evaluations: list = dataclasses.field(default_factory=list)
    reached_target_step: int | None = None

    def save(self, path, cfg=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = dataclasses.asdict(self)
        payload["train_config"] = dataclasses.asdict(cfg) if cfg else None
        tmp = path.with_name(f".{path.name}.tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path):
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
        payload.pop("train_config", None)
        return cls(**payload)


def make_optimizer(params, cfg: TrainConfig):
    return torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _clone_state(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train_loop(model: SegModel, train_set, val_set, cfg: TrainConfig, state: TrainState | None = None,
               log=None, out_dir=None, on_evaluate=None, max_updates=None):
    """Run SGD until ``cfg.total_steps`` updates have been made (resuming from ``state``).

    Validation mIoU is computed every ``checkpoint_every`` updates and after
    the last one; the best model is kept in ``state.best_model_state``.
    ``log`` receives one ``step<TAB>lr<TAB>loss<TAB>val_miou_or_dash`` line
    per update. With ``cfg.stop_at_miou`` set, training stops at the first
    evaluation reaching it; ``max_updates`` caps the updates made by this call
    without changing the schedule.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    cfg.validate()
    state = copy.deepcopy(state) if state is not None else TrainState()
    if state.model_state is not None:
        model.load_state_dict(state.model_state)
    rng = np.random.default_rng(cfg.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    opt = make_optimizer(model.parameters(), cfg)
    if state.optimizer_state is not None:
        opt.load_state_dict(state.optimizer_state)
    size = model.cfg.input_px
    dtype = next(model.parameters()).dtype
    out_dir = Path(out_dir) if out_dir else None

    stop = cfg.total_steps if max_updates is None else min(cfg.total_steps, state.step + max_updates)
    model.train()
    while state.step < stop:
        lr = lr_at(cfg, state.step)
        for group in opt.param_groups:
            group["lr"] = lr
        x, t, ids = sample_batch(train_set, cfg, size, rng)
        loss = bce_loss_logits(model.logits(x.to(dtype)), t)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss.item()} at step {state.step} (lr={lr:.3g}, batch={ids})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        state.step += 1
        state.last_loss = float(loss.item())

        val = None
        if cfg.checkpoint_every and (state.step % cfg.checkpoint_every == 0 or state.step == cfg.total_steps):
            val = evaluate_model(model, val_set, cfg.threshold).miou
            state.evaluations.append((state.step, val))
            if val > state.best_miou:
                state.best_miou, state.best_step = val, state.step
                state.best_model_state = _clone_state(model)
                if out_dir is not None:
                    save_snapshot(model, out_dir / "best.pt", {"step": state.step, "val_miou": val})
            if on_evaluate is not None:
                on_evaluate(state.step, val)
        if log is not None:
            log.write(f"{state.step}\t{lr:.10g}\t{state.last_loss:.10g}\t{'-' if val is None else f'{val:.6f}'}\n")
        if val is not None and cfg.stop_at_miou is not None and val >= cfg.stop_at_miou:
            if state.reached_target_step is None:
                state.reached_target_step = state.step
            break
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            _snapshot_state(state, model, opt, rng).save(out_dir / "state.pt", cfg)

    return _snapshot_state(state, model, opt, rng)


def _snapshot_state(state, model, opt, rng):
    state.model_state = _clone_state(model)
    state.optimizer_state = copy.deepcopy(opt.state_dict())
    state.rng_state = copy.deepcopy(rng.bit_generator.state)
    return state


def select_base_lr(make_model, train_set, val_set, cfg: TrainConfig, candidates=BASE_LR_CANDIDATES):
    """Short runs per candidate learning rate; returns ``(best_lr, {lr: val_miou})``."""
    scores = {}
    for lr in candidates:
        trial = dataclasses.replace(cfg, base_lr=lr, min_lr=min(cfg.min_lr, lr / 10))
        st = train_loop(make_model(), train_set, val_set, trial)
        scores[lr] = max((m for _, m in st.evaluations), default=-1.0)
    return max(scores, key=scores.get), scores


def load_split(manifest, split):
    """``(image, mask)`` pairs for the annotated patches of one split."""
    out = []
    for ix, iy in manifest.split_coords(split):
        e = manifest.entries[(ix, iy)]
        if e.annotated and e.label_path is not None:
            out.append((read_patch(manifest, ix, iy), read_label(manifest, ix, iy)))
    return out
