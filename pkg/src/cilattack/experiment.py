"""End-to-end orchestration: train the checkpoint series, craft against the
first checkpoint, evaluate across the whole series, emit reports.

The crafting path only ever receives the first checkpoint and the class name
lists; later checkpoints and CIL training images never cross into it.
"""

from __future__ import annotations

import dataclasses
import os
import traceback

import numpy as np
import torch
from PIL import Image

from .backbones import Backbone, cache_store
from .cil import ModelSeries, split_tasks, train_sequence
from .config import ExperimentConfig
from .data import LabelSpace, load_image_folder
from .metrics import AttackReport, emit_report, non_target_test_images, sasr
from .perturb import craft, save_perturbation
from .augment import AugmentParams


class ExperimentError(Exception):
    pass


FAILURE_MARKER = "FAILED"


def ablation_craft_args(cfg: ExperimentConfig, mode: str) -> dict:
    """Map an ablation mode onto craft arguments.

    full ("none"): both losses, filtering, augmentation.
    scm_only:      both losses, no filtering, no augmentation.
    fam_only:      surrogate loss only, filtering + augmentation.
    no_module:     surrogate loss only.

    All four modes share the per-class surrogate loss so each module's
    marginal contribution is isolated; plain cross-entropy crafting stays
    available through craft(surrogate_loss="ce") for baselines.
    """
    w_clip, w_surr = cfg.opt_cfg.loss_weights
    identity = AugmentParams.identity()
    table = {
        "none": dict(loss_weights=(w_clip, w_surr), surrogate_loss="bce",
                     use_filter=True, aug_params=cfg.aug_params),
        "scm_only": dict(loss_weights=(w_clip, w_surr), surrogate_loss="bce",
                         use_filter=False, aug_params=identity),
        "fam_only": dict(loss_weights=(0.0, w_surr), surrogate_loss="bce",
                         use_filter=True, aug_params=cfg.aug_params),
        "no_module": dict(loss_weights=(0.0, w_surr), surrogate_loss="bce",
                          use_filter=False, aug_params=identity),
    }
    if mode not in table:
        raise ExperimentError(f"unknown ablation mode {mode!r}")
    return table[mode]


def build_text_cache_from_anchors(anchor_dir: str, backbone: Backbone,
                                  out_path: str) -> str:
    """Derive text embeddings from canonical per-class anchor images.

    Desk-scale stand-in for a pretrained joint embedding space: each class
    name maps to the image embedding of its anchor, so text and image vectors
    share one space. Anchor files are ``<label>.png`` in one directory.
    """
    entries = []
    for fname in sorted(os.listdir(anchor_dir)):
        if not fname.endswith(".png"):
            continue
        label = fname[:-4]
        arr = np.asarray(Image.open(os.path.join(anchor_dir, fname)).convert("RGB"),
                         dtype=np.float32) / 255.0
        img = torch.from_numpy(arr).permute(2, 0, 1)
        with torch.no_grad():
            vec = backbone.encode_image_batch(img.unsqueeze(0))[0]
        entries.append((label, vec.numpy()))
    if not entries:
        raise ExperimentError(f"no anchor images (*.png) found in {anchor_dir}")
    cache_store(out_path, entries)
    return out_path


def make_backbone(cfg: ExperimentConfig, workdir: str) -> Backbone:
    bb_cfg = cfg.backbone
    if cfg.anchor_dir and not bb_cfg.text_cache:
        plain = Backbone(bb_cfg)
        cache_path = os.path.join(workdir, "text_cache.saec")
        build_text_cache_from_anchors(cfg.anchor_dir, plain, cache_path)
        bb_cfg = dataclasses.replace(bb_cfg, text_cache=cache_path)
    return Backbone(bb_cfg)


def build_label_space(series: ModelSeries, target_class: str,
                      pood_class_names) -> LabelSpace:
    names = series.class_names
    if target_class not in names:
        raise ExperimentError(f"target class {target_class!r} not in the CIL label set")
    target_index = names.index(target_class)
    n_head = series.schedule.initial_classes
    if target_index >= n_head:
        raise ExperimentError(
            f"target class {target_class!r} is not in the initial task")
    return LabelSpace(
        target=target_class,
        non_target=[n for n in names if n != target_class],
        pood=list(pood_class_names),
        target_index=target_index,
        non_target_indices=[i for i in range(n_head) if i != target_index])


def run_single(cfg: ExperimentConfig, seed: int, mode: str, out_dir: str,
               series: ModelSeries | None = None, plot: bool = False) -> AttackReport:
    """One (seed, ablation-mode) job: train (if needed), craft, evaluate, emit."""
    os.makedirs(out_dir, exist_ok=True)
    try:
        cil_pair = load_image_folder(cfg.cil_dir)
        pood_pair = load_image_folder(cfg.pood_dir)
        if series is None:
            tasks = split_tasks(cil_pair, cfg.schedule, seed,
                                pin_first=[cfg.target_class])
            trainer = dataclasses.replace(cfg.trainer, seed=seed)
            series = train_sequence(tasks, cfg.method, trainer)

        backbone = make_backbone(cfg, out_dir)
        label_space = build_label_space(series, cfg.target_class,
                                        pood_pair.train.class_names)
        args = ablation_craft_args(cfg, mode)
        opt_cfg = dataclasses.replace(cfg.opt_cfg, seed=seed,
                                      loss_weights=args["loss_weights"])
        pood = pood_pair.train
        pert, state = craft(
            pood.images, pood.targets, pood.class_names, label_space,
            backbone, series.checkpoints[0], cfg.filter_cfg, args["aug_params"],
            opt_cfg, surrogate_loss=args["surrogate_loss"],
            use_filter=args["use_filter"])

        x_test = _evaluation_pool(cil_pair, series, label_space)
        value, per_task = sasr(series, x_test, pert, label_space.target_index)
        learned = [series.schedule.classes_through(i)
                   for i in range(series.schedule.task_count)]
        report = AttackReport(
            target_class=cfg.target_class, asr_per_task=per_task, sasr=value,
            clean_acc_per_task=list(series.clean_acc), config_digest=cfg.digest,
            seed=seed, learned_classes=learned, method=series.method,
            extras={"ablation": mode, "epsilon": f"{opt_cfg.epsilon:.6f}",
                    "sigma": f"{cfg.sigma:.6f}",
                    "retained_steps": str(len(state.loss_history))})
        emit_report(report, out_dir, plot=plot)
        save_perturbation(pert, os.path.join(out_dir, "perturbation.saep"),
                          metadata={"target_class": cfg.target_class,
                                    "config_digest": cfg.digest,
                                    "seed": seed,
                                    "final_loss": f"{state.loss_history[-1].total:.6f}"
                                    if state.loss_history else "nan"})
        return report
    except Exception as e:
        with open(os.path.join(out_dir, FAILURE_MARKER), "w") as f:
            f.write(f"{type(e).__name__}: {e}\n\n{traceback.format_exc()}")
        raise


def _evaluation_pool(cil_pair, series: ModelSeries, label_space: LabelSpace):
    """Fixed test pool known to every checkpoint: initial-task classes, target excluded."""
    names = series.class_names
    name_to_global = {n: i for i, n in enumerate(names)}
    test = cil_pair.test
    keep, tgts = [], []
    initial = series.schedule.initial_classes
    for i in range(len(test)):
        name = test.name_of(int(test.targets[i]))
        gid = name_to_global.get(name)
        if gid is not None and gid < initial and gid != label_space.target_index:
            keep.append(i)
    return test.images[torch.tensor(keep, dtype=torch.long)]


def run_experiment(cfg: ExperimentConfig, plot: bool = False) -> list[AttackReport]:
    """Full protocol: one report per seed, in the configured ablation mode."""
    reports = []
    for seed in cfg.seeds:
        series = _trained_series(cfg, seed)
        out_dir = os.path.join(cfg.output_dir, f"{cfg.ablation}_seed{seed}")
        reports.append(run_single(cfg, seed, cfg.ablation, out_dir,
                                  series=series, plot=plot))
    _write_summary(cfg, reports)
    return reports


def run_ablation_matrix(cfg: ExperimentConfig, plot: bool = False) -> list[AttackReport]:
    from .config import ABLATION_MODES
    reports = []
    for seed in cfg.seeds:
        series = _trained_series(cfg, seed)
        for mode in ABLATION_MODES:
            out_dir = os.path.join(cfg.output_dir, f"{mode}_seed{seed}")
            reports.append(run_single(cfg, seed, mode, out_dir,
                                      series=series, plot=plot))
    _write_summary(cfg, reports)
    return reports


def run_sweep(cfg: ExperimentConfig, key: str, values, plot: bool = False) -> list[AttackReport]:
    """Grid over attack.epsilon or attack.sigma; one curve per grid point."""
    reports = []
    for v in values:
        if key == "epsilon":
            sub = dataclasses.replace(
                cfg, epsilon=v,
                opt_cfg=dataclasses.replace(cfg.opt_cfg, epsilon=v),
                output_dir=os.path.join(cfg.output_dir, f"eps_{v:.6f}"))
        elif key == "sigma":
            sub = dataclasses.replace(
                cfg, sigma=v,
                filter_cfg=dataclasses.replace(cfg.filter_cfg, sigma=v),
                output_dir=os.path.join(cfg.output_dir, f"sigma_{v:.6f}"))
        else:
            raise ExperimentError(f"sweep key must be 'epsilon' or 'sigma', got {key!r}")
        sub.resolved = dict(cfg.resolved)
        sub.resolved[f"attack.{key}"] = repr(v)
        reports.extend(run_experiment(sub, plot=plot))
    return reports


_SERIES_CACHE: dict = {}


def _trained_series(cfg: ExperimentConfig, seed: int) -> ModelSeries:
    key = (os.path.abspath(cfg.cil_dir), cfg.method, cfg.target_class,
           cfg.schedule.initial_classes, cfg.schedule.classes_per_task,
           cfg.schedule.total_classes,
           dataclasses.astuple(dataclasses.replace(cfg.trainer, seed=seed)), seed)
    if key not in _SERIES_CACHE:
        cil_pair = load_image_folder(cfg.cil_dir)
        tasks = split_tasks(cil_pair, cfg.schedule, seed, pin_first=[cfg.target_class])
        trainer = dataclasses.replace(cfg.trainer, seed=seed)
        _SERIES_CACHE[key] = train_sequence(tasks, cfg.method, trainer)
    return _SERIES_CACHE[key]


def _write_summary(cfg: ExperimentConfig, reports) -> None:
    os.makedirs(cfg.output_dir, exist_ok=True)
    by_mode: dict[str, list] = {}
    for r in reports:
        by_mode.setdefault(r.extras.get("ablation", "none"), []).append(r)
    lines = [f"config_digest: {cfg.digest}"]
    for mode in sorted(by_mode):
        vals = [r.sasr for r in by_mode[mode]]
        per_seed = ", ".join(f"seed {r.seed}: {r.sasr:.6f}" for r in by_mode[mode])
        lines.append(f"{mode}: mean_sasr {sum(vals) / len(vals):.6f} ({per_seed})")
    lines.append("resolved_config:")
    for k in sorted(cfg.resolved):
        lines.append(f"  {k} = {cfg.resolved[k]}")
    with open(os.path.join(cfg.output_dir, "summary.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
