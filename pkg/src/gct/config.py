"""Experiment configuration, hyperparameter presets and seed derivation."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

SCHEMA_VERSION = 1
METHODS = ("suponly", "mt", "mt_flawgated", "gct")
TASKS = ("synth_seg", "synth_denoise")
DETERMINISTIC_ENV = "GCT_DETERMINISTIC"

# Flaw detector used at desk scale: the reference stack has an output stride
# of 32, which collapses a 32x32 input to a single pixel.
DESK_FLAW_WIDTHS = (16, 32, 32, 64, 64, 128, 128, 1)
DESK_FLAW_STRIDES = (2, 1, 1, 2, 1, 1, 1, 1)

PRESETS = {
    "seg_preset": {
        "lambda_fc": 1.0, "lambda_dc": 100.0, "eta_dc": 3, "xi": 0.6,
        "mu": 0.5, "nu": 1,
        "lambda_mt": 1.0, "eta_mt": 3, "alpha_mt": 0.99,
    },
    "denoise_preset": {
        "lambda_fc": 0.1, "lambda_dc": 1.0, "eta_dc": 5, "xi": 0.6,
        "mu": None, "nu": 10,
        "lambda_mt": 1.0, "eta_mt": 5, "alpha_mt": 0.99,
    },
}
# Desk-scale segmentation: the seg_preset weight lambda_dc=100 drives both
# from-scratch task models into a constant background prediction on the
# synthetic task, so the desk experiments use lambda_dc=1. At lambda_fc=1 the
# fc term outweighs the supervised loss and costs accuracy, so it drops to 0.1.
PRESETS["seg_desk"] = {**PRESETS["seg_preset"], "lambda_dc": 1.0, "lambda_fc": 0.1}
# Desk-scale denoising: at sigma=0.1 with 256 images, 32 labeled images already
# match full supervision, which leaves nothing for unlabeled data to add. This
# regime (64 images, sigma=0.2, 120 full epochs) has a real labeled-data gap.
# lambda_fc=0.1 lets the fc term outweigh the supervised loss there and is
# unstable, so it drops to 0.01.
PRESETS["denoise_desk"] = {**PRESETS["denoise_preset"], "lambda_fc": 0.01,
                           "n_train": 64, "noise_sigma": 0.2, "epochs_full": 120}
TASK_PRESET = {"synth_seg": "seg_preset", "synth_denoise": "denoise_preset"}

SEED_COMPONENTS = ("model1", "model2", "flaw", "batches", "augment")


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dict(PRESETS[name])


def derive_seed(seed: int, component: str) -> int:
    """Independent per-component seed: first word of SeedSequence([seed, index of component])."""
    if component not in SEED_COMPONENTS:
        raise ConfigError(f"unknown seed component {component!r}")
    idx = SEED_COMPONENTS.index(component)
    return int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    method: str = "gct"
    task: str = "synth_seg"
    ratio: str = "1/8"
    seed: int = 1
    split_seed: int = 0
    data_seed: int = 0
    split_manifest: str | None = None
    # data
    n_train: int = 256
    n_val: int = 128
    image_size: int = 32
    classes: int = 4
    noise_sigma: float = 0.1
    augment: list = field(default_factory=lambda: ["hflip"])
    # GCT
    lambda_dc: float = 100.0
    lambda_fc: float = 1.0
    xi: float = 0.6
    eta_dc: int = 3
    mu: float | None = 0.5
    nu: int = 1
    flaw_arch: str = "desk"  # "desk" or "reference"
    flaw_norm: str = "minmax"  # "minmax" or "none"
    # Mean Teacher
    lambda_mt: float = 1.0
    eta_mt: int = 3
    alpha_mt: float = 0.99
    # optimisation and budget
    epochs_full: int = 30
    batch_size: int = 16
    labeled_per_batch: int = 8
    budget: str = "matched"  # "matched" or "epochs"
    lr_task: float = 3e-3
    lr_flaw: float = 1e-4
    eval_model: str = "auto"  # "1"/"2" for gct, "student"/"teacher" for mt, auto = 1 / teacher
    # output
    output_dir: str = "runs"
    run_id: str | None = None
    checkpoint_every: int = 0
    overrides: list = field(default_factory=list)

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {self.schema_version}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        from .data import parse_ratio

        parse_ratio(self.ratio)
        self.ratio = str(self.ratio)
        if not 0.0 <= self.xi <= 1.0:
            raise ConfigError(f"xi must lie in [0, 1], got {self.xi}")
        for name in ("lambda_dc", "lambda_fc", "lambda_mt"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("eta_dc", "eta_mt", "nu"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v}")
        if self.mu is not None and not self.mu > 0:
            raise ConfigError(f"mu must be > 0, got {self.mu}")
        if not 0.0 <= self.alpha_mt < 1.0:
            raise ConfigError(f"alpha_mt must lie in [0, 1), got {self.alpha_mt}")
        if self.task == "synth_seg" and self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.noise_sigma <= 0:
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if self.n_train < 2 or self.n_val < 1 or self.image_size < 16:
            raise ConfigError("need n_train >= 2, n_val >= 1 and image_size >= 16")
        if self.epochs_full < 1:
            raise ConfigError(f"epochs_full must be >= 1, got {self.epochs_full}")
        if not 1 <= self.labeled_per_batch < self.batch_size:
            raise ConfigError("labeled_per_batch must satisfy 1 <= labeled_per_batch < batch_size")
        if self.budget not in ("epochs", "matched"):
            raise ConfigError(f"budget must be 'matched' or 'epochs', got {self.budget!r}")
        if self.flaw_arch not in ("desk", "reference"):
            raise ConfigError(f"flaw_arch must be 'desk' or 'reference', got {self.flaw_arch!r}")
        if self.flaw_norm not in ("minmax", "none"):
            raise ConfigError(f"flaw_norm must be 'minmax' or 'none', got {self.flaw_norm!r}")
        if self.lr_task <= 0 or self.lr_flaw <= 0:
            raise ConfigError("learning rates must be > 0")
        allowed_eval = {"auto", "1", "2", "student", "teacher"}
        if str(self.eval_model) not in allowed_eval:
            raise ConfigError(f"eval_model must be one of {sorted(allowed_eval)}")
        for op in self.augment:
            name = op if isinstance(op, str) else op[0]
            if name not in ("hflip", "random_crop"):
                raise ConfigError(f"unknown augmentation {name!r}")
        return self

    # ---------------------------------------------------------- derived values

    @property
    def deterministic(self) -> bool:
        return os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0", "false", "False")

    def seed_for(self, component: str) -> int:
        return derive_seed(self.seed, component)

    def pipeline_mu(self, out_channels: int) -> float:
        return self.mu if self.mu is not None else 1.0 / out_channels

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)


def build_config(task="synth_seg", file_values=None, overrides=None) -> ExperimentConfig:
    """Layer defaults < task preset < config file < explicit overrides, then validate."""
    values = {"task": task}
    if file_values:
        values.update(file_values)
    task = values["task"]
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    merged = load_preset(TASK_PRESET[task])
    merged.update(values)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    merged.update(overrides)
    merged["overrides"] = sorted(set(merged.get("overrides", [])) | set(overrides))
    return ExperimentConfig.from_dict(merged).validate()
