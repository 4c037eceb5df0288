"""SGD with momentum and weight decay, the warmup + cosine learning-rate
schedule, and the staged training protocols for both model families.

A stage plan partitions parameter names into a trainable set and a frozen
set by glob patterns; the partition is validated up front and frozen
parameters are never touched, so they stay bitwise stable for the whole
stage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from pathlib import Path

import numpy as np

from . import tensor as T
from .egoaco import EgoAcoModel, multitask_loss
from .tensor import Tensor
from .videodata import (AugmentConfig, SamplerConfig, augment, flip_verb_label,
                        sample_frames, vocab_from_manifest)

MOMENTUM = 0.9
WEIGHT_DECAY = 5e-4


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class LrSchedule:
    base_lr: float
    warmup_epochs: int
    total_epochs: int

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(
                f"need 0 <= warmup ({self.warmup_epochs}) < total ({self.total_epochs})"
            )


def lr_at(epoch: int, s: LrSchedule) -> float:
    """Linear warmup to base_lr, then a cosine decay to zero.

    Warmup epoch e (0-based) runs at base_lr * (e+1) / warmup, so the last
    warmup epoch hits base_lr exactly and epoch 0 is already nonzero.
    """
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs})")
    w = s.warmup_epochs
    if epoch < w:
        return s.base_lr * (epoch + 1) / w
    return 0.5 * s.base_lr * (1.0 + math.cos(math.pi * (epoch - w) / (s.total_epochs - w)))


def default_warmup(total_epochs: int) -> int:
    """Warmup sized at one sixth of the stage, floored at one epoch
    (zero for single-epoch stages, which cannot fit any warmup)."""
    return min(max(1, round(total_epochs / 6)), total_epochs - 1)


@dataclass
class StagePlan:
    name: str
    trainable: tuple          # glob patterns over dotted parameter names
    frozen: tuple
    schedule: LrSchedule

    def split_parameters(self, params: dict) -> tuple:
        """Partition params; every name must match exactly one side."""
        train, freeze, errors = [], [], []
        for name in params:
            in_train = any(fnmatchcase(name, p) for p in self.trainable)
            in_frozen = any(fnmatchcase(name, p) for p in self.frozen)
            if in_train and in_frozen:
                errors.append(f"{name}: matches both trainable and frozen patterns")
            elif not in_train and not in_frozen:
                errors.append(f"{name}: matches no pattern")
            elif in_train:
                train.append(name)
            else:
                freeze.append(name)
        if errors:
            raise ValueError(f"stage {self.name!r} plan does not cover the model:\n  "
                             + "\n  ".join(errors))
        return train, freeze


class SgdOptimizer:
    """Momentum SGD; decay-flagged parameters get L2 weight decay folded
    into the gradient, biases and affine-norm parameters are exempt."""

    def __init__(self, params: dict, trainable_names, momentum: float = MOMENTUM,
                 weight_decay: float = WEIGHT_DECAY):
        self.params = params
        self.trainable = list(trainable_names)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(params[n].data) for n in self.trainable}

    def zero_grad(self):
        for name in self.trainable:
            self.params[name].zero_grad()

    def step(self, lr: float):
        for name in self.trainable:
            p = self.params[name]
            g = p.grad
            if self.weight_decay and getattr(p, "decay", True):
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype, copy=False)


def sgd_step(params: dict, state: SgdOptimizer, lr: float):
    """Apply one update from the gradients currently stored on the params."""
    state.step(lr)


def top1_correct(scores: np.ndarray, labels: np.ndarray) -> int:
    return int((scores.argmax(axis=1) == labels).sum())


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    lr: float
    loss: float
    verb_acc: float
    noun_acc: float
    action_acc: float

    def to_json(self) -> str:
        return json.dumps({
            "stage": self.stage, "epoch": self.epoch, "lr": self.lr,
            "loss": self.loss, "verb_acc": self.verb_acc,
            "noun_acc": self.noun_acc, "action_acc": self.action_acc,
        })


@dataclass
class TrainSettings:
    batch_size: int = 8
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    augment_enabled: bool = True
    verbs: tuple = ("left", "right", "up", "down", "static")
    log_path: object = None
    stop_at_full_action_acc: bool = False


def _batch_arrays(clips, settings: TrainSettings, rng, vocab, dtype):
    """Sample, augment, and stack one batch; flips retarget verb labels."""
    frames_list, verbs, nouns, actions = [], [], [], []
    for clip in clips:
        frames = sample_frames(clip, settings.sampler, rng)
        verb, noun, action = clip.verb_label, clip.noun_label, clip.action_label
        if settings.augment_enabled:
            frames, params = augment(frames, rng, settings.augment)
            if params.hflip:
                flipped = flip_verb_label(verb, settings.verbs)
                if flipped != verb:
                    verb = flipped
                    action = vocab[(verb, noun)]
        frames_list.append(frames.astype(dtype, copy=False))
        verbs.append(verb)
        nouns.append(noun)
        actions.append(action)
    batch = Tensor(np.stack(frames_list))
    return batch, (np.asarray(verbs), np.asarray(nouns), np.asarray(actions))


def run_stage(model, clips, plan: StagePlan, rng: np.random.Generator,
              settings: TrainSettings) -> list:
    """Train one stage; returns per-epoch records.

    Frozen parameters are never updated (no gradient application, no decay,
    no momentum), so their bytes are identical before and after.
    """
    params = model.parameters()
    trainable, _ = plan.split_parameters(params)
    opt = SgdOptimizer(params, trainable)
    vocab = {(c.verb_label, c.noun_label): c.action_label for c in clips}
    dtype = next(iter(params.values())).data.dtype
    log_fh = open(settings.log_path, "a") if settings.log_path else None
    records = []
    try:
        for epoch in range(plan.schedule.total_epochs):
            lr = lr_at(epoch, plan.schedule)
            order = rng.permutation(len(clips))
            losses = []
            hits = np.zeros(3, dtype=np.int64)
            total = 0
            for start in range(0, len(order), settings.batch_size):
                batch_clips = [clips[i] for i in order[start:start + settings.batch_size]]
                batch, labels = _batch_arrays(batch_clips, settings, rng, vocab, dtype)
                scores = model.forward(batch, training=True, rng=rng)
                loss = multitask_loss(scores, labels)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise NonFiniteLossError(
                        f"non-finite loss at stage {plan.name!r} epoch {epoch}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                losses.append(loss_val)
                for k, s in enumerate(scores):
                    hits[k] += top1_correct(s.data, labels[k])
                total += len(batch_clips)
            rec = EpochRecord(
                stage=plan.name, epoch=epoch, lr=lr, loss=float(np.mean(losses)),
                verb_acc=100.0 * hits[0] / total, noun_acc=100.0 * hits[1] / total,
                action_acc=100.0 * hits[2] / total,
            )
            records.append(rec)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
            if settings.stop_at_full_action_acc and rec.action_acc >= 100.0:
                break
    finally:
        if log_fh:
            log_fh.close()
    return records


def single_stage_plan(epochs: int, base_lr: float = 0.01,
                      warmup: int | None = None) -> StagePlan:
    """Everything trainable; the whole-network recipe."""
    return StagePlan(
        name="full",
        trainable=("*",),
        frozen=(),
        schedule=LrSchedule(base_lr, default_warmup(epochs) if warmup is None else warmup,
                            epochs),
    )


def egoaco_stage_plans(model: EgoAcoModel, stage_epochs=(60, 60, 30),
                       stage_lrs=(0.01, 0.01, 1e-4)) -> list:
    """The three-stage freezing protocol.

    Stage 1 trains the aggregation and classifier layers over a frozen
    backbone; stage 2 adds the three cloned top blocks; stage 3 adds the
    last trunk block. The trunk stem (and any earlier trunk block) is
    never trainable.
    """
    last_trunk = len(model.trunk_blocks) - 1
    aggregation = ("lsta.*", "ctx_attn.*", "obj_attn.*", "classifier.*")
    tops = tuple(f"{k}.*" for k in model.HEAD_KEYS)
    trunk_last = (f"trunk.blocks.{last_trunk}.*",) if last_trunk >= 0 else ()
    plans = [
        StagePlan("stage1", aggregation, ("trunk.*",) + tops,
                  LrSchedule(stage_lrs[0], default_warmup(stage_epochs[0]), stage_epochs[0])),
        StagePlan("stage2", aggregation + tops, ("trunk.*",),
                  LrSchedule(stage_lrs[1], default_warmup(stage_epochs[1]), stage_epochs[1])),
        StagePlan("stage3", aggregation + tops + trunk_last,
                  ("trunk.stem.*",) + tuple(f"trunk.blocks.{i}.*" for i in range(last_trunk)),
                  LrSchedule(stage_lrs[2], default_warmup(stage_epochs[2]), stage_epochs[2])),
    ]
    return plans


def three_stage_protocol(model: EgoAcoModel, clips, rng: np.random.Generator,
                         settings: TrainSettings, stage_epochs=(60, 60, 30),
                         stage_lrs=(0.01, 0.01, 1e-4), on_stage_end=None) -> list:
    """Run the three stages in order; returns the concatenated epoch records.

    The final model state is whatever the last epoch of stage 3 left in
    place. ``on_stage_end(stage_name, model)`` is called after each stage
    (checkpoint hook).
    """
    records = []
    for plan in egoaco_stage_plans(model, stage_epochs, stage_lrs):
        records.extend(run_stage(model, clips, plan, rng, settings))
        if on_stage_end is not None:
            on_stage_end(plan.name, model)
    return records
