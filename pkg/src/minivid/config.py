"""Run configuration: one YAML file per run, fully validated before any
compute. Unknown keys are rejected and every validation error is reported
in a single pass.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

FAMILIES = ("gsn", "egoaco", "gsn+egoaco")
SAMPLER_MODES = ("random_per_segment", "center_per_segment")
DTYPES = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class BackboneSection:
    stem_channels: int = 8
    block_channels: list = field(default_factory=lambda: [8, 16, 16])
    use_gsm: bool = True


@dataclass
class EgoacoSection:
    memory_size: int = 16
    pooling_classes: int = 8


@dataclass
class SamplerSection:
    num_frames: int = 16
    mode: str = "random_per_segment"


@dataclass
class TrainSection:
    batch_size: int = 8
    base_lr: float = 0.01
    epochs: int = 60
    warmup_epochs: int | None = None     # default: epochs / 6, floored at 1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout: float = 0.5
    stage_epochs: list = field(default_factory=lambda: [60, 60, 30])
    stage3_lr: float = 1e-4


@dataclass
class EvalSection:
    two_clip: bool = True
    fully_conv: bool = False
    short_side: int | None = None        # default: the clip's own short side


@dataclass
class RunConfig:
    family: str = "gsn"
    seed: int = 0
    dtype: str = "float64"
    manifest: str = ""
    out_dir: str = ""
    backbone: BackboneSection = field(default_factory=BackboneSection)
    egoaco: EgoacoSection = field(default_factory=EgoacoSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def numpy_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "backbone": BackboneSection,
    "egoaco": EgoacoSection,
    "sampler": SamplerSection,
    "train": TrainSection,
    "eval": EvalSection,
}
_SCALARS = ("family", "seed", "dtype", "manifest", "out_dir")


def _fill_section(cls, raw, prefix, errors):
    section = cls()
    if raw is None:
        return section
    if not isinstance(raw, dict):
        errors.append(f"{prefix}: expected a mapping, got {type(raw).__name__}")
        return section
    known = set(vars(section))
    for key, value in raw.items():
        if key not in known:
            errors.append(f"{prefix}.{key}: unknown key")
            continue
        setattr(section, key, value)
    return section


def parse_config(raw: dict) -> RunConfig:
    """Build and validate a RunConfig from a parsed YAML mapping."""
    errors: list[str] = []
    cfg = RunConfig()
    if not isinstance(raw, dict):
        raise ConfigError([f"top level must be a mapping, got {type(raw).__name__}"])
    for key, value in raw.items():
        if key in _SCALARS:
            setattr(cfg, key, value)
        elif key in _SECTIONS:
            setattr(cfg, key, _fill_section(_SECTIONS[key], value, key, errors))
        else:
            errors.append(f"{key}: unknown key")

    if cfg.family not in FAMILIES:
        errors.append(f"family: must be one of {FAMILIES}, got {cfg.family!r}")
    if not isinstance(cfg.seed, int):
        errors.append(f"seed: must be an integer, got {cfg.seed!r}")
    if cfg.dtype not in DTYPES:
        errors.append(f"dtype: must be one of {sorted(DTYPES)}, got {cfg.dtype!r}")

    bb = cfg.backbone
    if not isinstance(bb.stem_channels, int) or bb.stem_channels < 2:
        errors.append(f"backbone.stem_channels: need an integer >= 2, got {bb.stem_channels!r}")
    elif bb.stem_channels % 2:
        errors.append(f"backbone.stem_channels: must be even, got {bb.stem_channels}")
    if not isinstance(bb.block_channels, list) or not bb.block_channels:
        errors.append("backbone.block_channels: need a non-empty list")
    else:
        for i, ch in enumerate(bb.block_channels):
            if not isinstance(ch, int) or ch < 2 or ch % 2:
                errors.append(f"backbone.block_channels[{i}]: must be an even integer >= 2, got {ch!r}")

    ego = cfg.egoaco
    for key in ("memory_size", "pooling_classes"):
        v = getattr(ego, key)
        if not isinstance(v, int) or v < 1:
            errors.append(f"egoaco.{key}: need a positive integer, got {v!r}")

    sam = cfg.sampler
    if not isinstance(sam.num_frames, int) or sam.num_frames < 1:
        errors.append(f"sampler.num_frames: need a positive integer, got {sam.num_frames!r}")
    if sam.mode not in SAMPLER_MODES:
        errors.append(f"sampler.mode: must be one of {SAMPLER_MODES}, got {sam.mode!r}")

    tr = cfg.train
    if not isinstance(tr.batch_size, int) or tr.batch_size < 1:
        errors.append(f"train.batch_size: need a positive integer, got {tr.batch_size!r}")
    if not isinstance(tr.epochs, int) or tr.epochs < 1:
        errors.append(f"train.epochs: need a positive integer, got {tr.epochs!r}")
    if tr.warmup_epochs is not None and (
        not isinstance(tr.warmup_epochs, int)
        or not (isinstance(tr.epochs, int) and 0 <= tr.warmup_epochs < tr.epochs)
    ):
        errors.append(
            f"train.warmup_epochs: need 0 <= warmup < epochs, got {tr.warmup_epochs!r}"
        )
    for key in ("base_lr", "momentum", "weight_decay", "dropout", "stage3_lr"):
        v = getattr(tr, key)
        if not isinstance(v, (int, float)) or v < 0:
            errors.append(f"train.{key}: need a non-negative number, got {v!r}")
    if isinstance(tr.dropout, (int, float)) and not 0 <= tr.dropout < 1:
        errors.append(f"train.dropout: must be in [0, 1), got {tr.dropout!r}")
    if (not isinstance(tr.stage_epochs, list) or len(tr.stage_epochs) != 3
            or not all(isinstance(e, int) and e >= 1 for e in tr.stage_epochs)):
        errors.append(f"train.stage_epochs: need three positive integers, got {tr.stage_epochs!r}")

    ev = cfg.eval
    if ev.short_side is not None and (not isinstance(ev.short_side, int) or ev.short_side < 1):
        errors.append(f"eval.short_side: need a positive integer, got {ev.short_side!r}")
    for key in ("two_clip", "fully_conv"):
        if not isinstance(getattr(ev, key), bool):
            errors.append(f"eval.{key}: must be true or false")

    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    if raw is None:
        raw = {}
    return parse_config(raw)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def family_defaults(family: str) -> dict:
    """Per-family preset overrides (frame counts and test protocol)."""
    if family == "gsn":
        return {"sampler": {"num_frames": 16}, "eval": {"fully_conv": True, "two_clip": True}}
    return {"sampler": {"num_frames": 20}, "eval": {"fully_conv": False, "two_clip": True}}
