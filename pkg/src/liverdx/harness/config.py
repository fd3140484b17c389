"""Run configuration: one YAML (or JSON) file holding model, loss, optimizer and run settings."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from liverdx.errors import ConfigError
from liverdx.inference import DetectionThresholds
from liverdx.optim import SamConfig
from liverdx.segmenter import ModelConfig
from liverdx.training import LossConfig

RUN_ROOT_ENV = "LIVERDX_RUN_ROOT"
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class AblationFlags:
    ifm: bool = True  # False -> 3-phase early concatenation, delayed phase dropped
    symmetric_contrast: bool = False
    sam: bool = True
    focal: bool = True  # False -> weighted cross-entropy
    inference: str = "livermax"  # or "pixelcount"


@dataclass
class RunConfig:
    dataset: str = "data"
    run_name: str = "run"
    run_dir: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sam: SamConfig = field(default_factory=SamConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    thresholds: DetectionThresholds = field(default_factory=DetectionThresholds)
    batch_size: int = 2
    steps: int = 2000
    epochs: int | None = None
    lr_schedule: str = "constant"  # or "cosine": decay from sam.lr towards 0 over the run
    seed: int = 0
    checkpoint_every: int = 500
    train_split: str = "train"
    eval_split: str = "val"
    cache_cases: bool = True
    background: str = "noisy_or"
    iou_threshold: float = 0.3
    auc2_mode: str = "mean"
    pixelcount_baseline: bool = True

    def validate(self, check_paths=False):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.steps < 0 or (self.epochs is not None and self.epochs < 1):
            raise ConfigError("steps must be nonnegative and epochs positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}; expected one of {LR_SCHEDULES}")
        if self.flags.inference not in ("livermax", "pixelcount"):
            raise ConfigError(f"unknown inference mode {self.flags.inference!r}")
        self.model.validate()
        self.loss.validate()
        self.sam.validate()
        if check_paths and not (Path(self.dataset) / "index.json").exists():
            raise ConfigError(f"dataset path {self.dataset!r} has no index.json")
        return self

    def resolved(self):
        """Copy with the ablation flags folded into the component configs."""
        f = self.flags
        model = replace(self.model, fusion="ifm" if f.ifm else "early")
        loss = replace(self.loss, symmetric_contrast=f.symmetric_contrast, use_focal=f.focal)
        sam = replace(self.sam, enabled=f.sam)
        return replace(self, model=model, loss=loss, sam=sam)

    def with_flags(self, **flags):
        return replace(self, flags=replace(self.flags, **flags))

    def run_path(self):
        if self.run_dir:
            return Path(self.run_dir)
        return Path(os.environ.get(RUN_ROOT_ENV, "runs")) / self.run_name

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["loss"] = self.loss.to_dict()
        d["sam"] = self.sam.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sub = {"model": ModelConfig, "loss": LossConfig, "sam": SamConfig,
               "flags": AblationFlags, "thresholds": DetectionThresholds}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run configuration keys {sorted(unknown)}")
        for key, typ in sub.items():
            if key in d and isinstance(d[key], dict):
                allowed = {f.name for f in fields(typ)}
                bad = set(d[key]) - allowed
                if bad:
                    raise ConfigError(f"unknown keys {sorted(bad)} in {key!r}")
                vals = dict(d[key])
                for k, v in vals.items():
                    if isinstance(v, list):
                        vals[k] = tuple(v)
                d[key] = typ(**vals)
        return cls(**d)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file {path} does not exist")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("run configuration must be a mapping")
    return RunConfig.from_dict(data).validate()


def save_run_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
