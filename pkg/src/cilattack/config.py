"""Experiment configuration: dot-path key/value files with defaults.

Config files are plain text, one ``section.key = value`` per line, ``#``
comments allowed. Every omitted key resolves to a documented default and the
fully-resolved set is embedded (with its digest) in every emitted report.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

from .augment import AugmentParams
from .backbones import BackboneConfig
from .cil import METHODS, TaskSchedule, TrainerConfig
from .data import folder_class_names
from .filtering import FilterConfig
from .perturb import OptimizerConfig


class ConfigError(Exception):
    pass


ABLATION_MODES = ("none", "scm_only", "fam_only", "no_module")

DEFAULTS = {
    "data.cil_dir": "",
    "data.pood_dir": "",
    "data.anchor_dir": "",
    "schedule.initial_classes": "10",
    "schedule.classes_per_task": "10",
    "schedule.total_classes": "30",
    "cil.method": "replay",
    "trainer.epochs_per_task": "15",
    "trainer.learning_rate": "0.001",
    "trainer.batch_size": "64",
    "trainer.buffer_size": "200",
    "trainer.distill_temperature": "2.0",
    "trainer.distill_weight": "1.0",
    "trainer.augment_train": "true",
    "backbone.provider": "mock-linear",
    "backbone.model_id": "ViT-B-32",
    "backbone.embed_dim": "512",
    "backbone.prompt_template": "a photo of a {label}",
    "backbone.weights_path": "",
    "backbone.input_hw": "32",
    "backbone.text_cache": "",
    "attack.target_class": "",
    "attack.epsilon": str(32.0 / 255.0),
    "attack.sigma": "0.7",
    "attack.lr": "0.01",
    "attack.weight_decay": "1e-5",
    "attack.batch": "256",
    "attack.epochs": "50",
    "attack.loss_weight_clip": "1.0",
    "attack.loss_weight_surr": "1.0",
    "attack.reference_count": "16",
    "attack.aug.rotation_deg": "-15,15",
    "attack.aug.scale": "0.8,1.2",
    "attack.aug.translate_frac": "-0.1,0.1",
    "attack.aug.patch_count": "0,2",
    "attack.aug.patch_size_frac": "0.05,0.15",
    "seeds": "0,1,2",
    "output_dir": "runs",
    "ablation": "none",
}

_REQUIRED = ("data.cil_dir", "data.pood_dir", "attack.target_class")


@dataclass
class ExperimentConfig:
    cil_dir: str
    pood_dir: str
    anchor_dir: str
    schedule: TaskSchedule
    method: str
    trainer: TrainerConfig
    backbone: BackboneConfig
    target_class: str
    epsilon: float
    sigma: float
    filter_cfg: FilterConfig
    aug_params: AugmentParams
    opt_cfg: OptimizerConfig
    seeds: list
    output_dir: str
    ablation: str
    resolved: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        canon = "\n".join(f"{k}={self.resolved[k]}" for k in sorted(self.resolved))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def _as_float(kv, key, lo=None, hi=None, lo_open=False, hi_open=False):
    try:
        v = float(kv[key])
    except ValueError:
        raise ConfigError(f"{key}: not a number: {kv[key]!r}")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(f"{key}: value {v} below allowed range")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(f"{key}: value {v} above allowed range")
    return v


def _as_int(kv, key, lo=None):
    try:
        v = int(kv[key])
    except ValueError:
        raise ConfigError(f"{key}: not an integer: {kv[key]!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{key}: value {v} below {lo}")
    return v


def _as_bool(kv, key):
    v = kv[key].lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {kv[key]!r}")


def _as_pair(kv, key):
    parts = kv[key].split(",")
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected 'lo,hi', got {kv[key]!r}")
    try:
        return (float(parts[0]), float(parts[1]))
    except ValueError:
        raise ConfigError(f"{key}: not numeric: {kv[key]!r}")


def resolve_config(kv: dict, check_datasets: bool = True) -> ExperimentConfig:
    unknown = set(kv) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(DEFAULTS)
    merged.update(kv)
    for key in _REQUIRED:
        if not merged[key]:
            raise ConfigError(f"missing required key: {key}")

    schedule = TaskSchedule(
        _as_int(merged, "schedule.initial_classes", 1),
        _as_int(merged, "schedule.classes_per_task", 1),
        _as_int(merged, "schedule.total_classes", 1))
    method = merged["cil.method"]
    if method not in METHODS:
        raise ConfigError(f"cil.method: unknown method {method!r}; expected one of {METHODS}")
    ablation = merged["ablation"]
    if ablation not in ABLATION_MODES:
        raise ConfigError(
            f"ablation: unknown mode {ablation!r}; expected one of {ABLATION_MODES}")

    trainer = TrainerConfig(
        epochs_per_task=_as_int(merged, "trainer.epochs_per_task", 1),
        learning_rate=_as_float(merged, "trainer.learning_rate", 0, lo_open=True),
        batch_size=_as_int(merged, "trainer.batch_size", 1),
        buffer_size=_as_int(merged, "trainer.buffer_size", 0),
        distill_temperature=_as_float(merged, "trainer.distill_temperature", 0, lo_open=True),
        distill_weight=_as_float(merged, "trainer.distill_weight", 0),
        augment_train=_as_bool(merged, "trainer.augment_train"))

    backbone = BackboneConfig(
        provider=merged["backbone.provider"],
        model_id=merged["backbone.model_id"],
        embed_dim=_as_int(merged, "backbone.embed_dim", 1),
        prompt_template=merged["backbone.prompt_template"],
        weights_path=merged["backbone.weights_path"] or None,
        input_hw=_as_int(merged, "backbone.input_hw", 1),
        text_cache=merged["backbone.text_cache"] or None)

    epsilon = _as_float(merged, "attack.epsilon", 0, 1, lo_open=True)
    sigma = _as_float(merged, "attack.sigma", 0, 1, lo_open=True, hi_open=True)
    filter_cfg = FilterConfig(sigma=sigma,
                              reference_count=_as_int(merged, "attack.reference_count", 1))
    pc = _as_pair(merged, "attack.aug.patch_count")
    aug_params = AugmentParams(
        rotation_deg=_as_pair(merged, "attack.aug.rotation_deg"),
        scale=_as_pair(merged, "attack.aug.scale"),
        translate_frac=_as_pair(merged, "attack.aug.translate_frac"),
        patch_count=(int(pc[0]), int(pc[1])),
        patch_size_frac=_as_pair(merged, "attack.aug.patch_size_frac"))
    opt_cfg = OptimizerConfig(
        learning_rate=_as_float(merged, "attack.lr", 0, lo_open=True),
        weight_decay=_as_float(merged, "attack.weight_decay", 0),
        batch_size=_as_int(merged, "attack.batch", 1),
        epochs=_as_int(merged, "attack.epochs", 1),
        loss_weights=(_as_float(merged, "attack.loss_weight_clip", 0),
                      _as_float(merged, "attack.loss_weight_surr", 0)),
        epsilon=epsilon)

    try:
        seeds = [int(s) for s in merged["seeds"].split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"seeds: not a comma-separated integer list: {merged['seeds']!r}")
    if not seeds:
        raise ConfigError("seeds: at least one seed required")

    cfg = ExperimentConfig(
        cil_dir=merged["data.cil_dir"], pood_dir=merged["data.pood_dir"],
        anchor_dir=merged["data.anchor_dir"],
        schedule=schedule, method=method, trainer=trainer, backbone=backbone,
        target_class=merged["attack.target_class"], epsilon=epsilon, sigma=sigma,
        filter_cfg=filter_cfg, aug_params=aug_params, opt_cfg=opt_cfg,
        seeds=seeds, output_dir=merged["output_dir"], ablation=ablation,
        resolved=merged)

    if check_datasets:
        _check_dataset_disjointness(cfg)
    return cfg


def _check_dataset_disjointness(cfg: ExperimentConfig) -> None:
    cil_classes = set(folder_class_names(cfg.cil_dir))
    pood_classes = set(folder_class_names(cfg.pood_dir))
    overlap = cil_classes & pood_classes
    if overlap:
        raise ConfigError(
            f"data.pood_dir: POOD classes overlap CIL classes: {sorted(overlap)}")
    if cfg.target_class not in cil_classes:
        raise ConfigError(
            f"attack.target_class: {cfg.target_class!r} is not a CIL class")


def validate_config(path: str, overrides: dict | None = None,
                    check_datasets: bool = True) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        kv = parse_config_text(f.read())
    if overrides:
        kv.update(overrides)
    return resolve_config(kv, check_datasets=check_datasets)
