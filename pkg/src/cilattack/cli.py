"""Command-line entry point.

Subcommands: train-cil, craft, evaluate, report, run, sweep, ablate. One
config file drives everything; any key can be overridden on the command line
with ``--section.key=value``. Exit codes: 0 success, 2 config error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import cil, metrics
from .config import ConfigError, validate_config
from .experiment import (build_label_space, make_backbone,
                         run_ablation_matrix, run_experiment, run_single,
                         run_sweep)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DEFAULT_EPS_SWEEP = [8.0 / 255, 16.0 / 255, 24.0 / 255, 32.0 / 255]


def _split_overrides(extra):
    overrides = {}
    for tok in extra:
        if not (tok.startswith("--") and "=" in tok):
            raise ConfigError(f"unrecognized argument {tok!r} (expected --key=value)")
        k, _, v = tok[2:].partition("=")
        overrides[k] = v
    return overrides


def _load_cfg(args, extra, check_datasets=True):
    return validate_config(args.config, overrides=_split_overrides(extra),
                           check_datasets=check_datasets)


def cmd_train_cil(args, extra):
    cfg = _load_cfg(args, extra)
    from .data import load_image_folder
    for seed in cfg.seeds:
        pair = load_image_folder(cfg.cil_dir)
        tasks = cil.split_tasks(pair, cfg.schedule, seed, pin_first=[cfg.target_class])
        trainer = dataclasses.replace(cfg.trainer, seed=seed)
        series = cil.train_sequence(tasks, cfg.method, trainer)
        out = os.path.join(cfg.output_dir, f"series_seed{seed}")
        cil.save_series(out, series)
        accs = ", ".join(f"{a:.4f}" for a in series.clean_acc)
        print(f"seed {seed}: saved {series.schedule.task_count} checkpoints "
              f"to {out} (clean acc: {accs})")
    return EXIT_OK


def cmd_craft(args, extra):
    cfg = _load_cfg(args, extra)
    from .data import load_image_folder
    from .perturb import craft, save_perturbation
    from .experiment import ablation_craft_args
    for seed in cfg.seeds:
        series = cil.load_series(os.path.join(cfg.output_dir, f"series_seed{seed}"))
        pood = load_image_folder(cfg.pood_dir).train
        out_dir = os.path.join(cfg.output_dir, f"{cfg.ablation}_seed{seed}")
        os.makedirs(out_dir, exist_ok=True)
        backbone = make_backbone(cfg, out_dir)
        label_space = build_label_space(series, cfg.target_class, pood.class_names)
        a = ablation_craft_args(cfg, cfg.ablation)
        opt_cfg = dataclasses.replace(cfg.opt_cfg, seed=seed,
                                      loss_weights=a["loss_weights"])
        pert, state = craft(pood.images, pood.targets, pood.class_names,
                            label_space, backbone, series.checkpoints[0],
                            cfg.filter_cfg, a["aug_params"], opt_cfg,
                            surrogate_loss=a["surrogate_loss"],
                            use_filter=a["use_filter"],
                            checkpoint_path=os.path.join(out_dir, "craft_ckpt.pt"))
        path = os.path.join(out_dir, "perturbation.saep")
        save_perturbation(pert, path, metadata={
            "target_class": cfg.target_class, "config_digest": cfg.digest,
            "seed": seed})
        print(f"seed {seed}: crafted perturbation -> {path} "
              f"({len(state.loss_history)} steps)")
    return EXIT_OK


def cmd_evaluate(args, extra):
    cfg = _load_cfg(args, extra)
    from .data import load_image_folder
    from .perturb import load_perturbation
    from .experiment import _evaluation_pool
    cil_pair = load_image_folder(cfg.cil_dir)
    for seed in cfg.seeds:
        series = cil.load_series(os.path.join(cfg.output_dir, f"series_seed{seed}"))
        out_dir = os.path.join(cfg.output_dir, f"{cfg.ablation}_seed{seed}")
        pert = load_perturbation(os.path.join(out_dir, "perturbation.saep"))
        label_space = build_label_space(series, cfg.target_class, [])
        x_test = _evaluation_pool(cil_pair, series, label_space)
        value, per_task = metrics.sasr(series, x_test, pert, label_space.target_index)
        learned = [series.schedule.classes_through(i)
                   for i in range(series.schedule.task_count)]
        report = metrics.AttackReport(
            target_class=cfg.target_class, asr_per_task=per_task, sasr=value,
            clean_acc_per_task=list(series.clean_acc), config_digest=cfg.digest,
            seed=seed, learned_classes=learned, method=series.method,
            extras={"ablation": cfg.ablation})
        metrics.emit_report(report, out_dir, plot=args.plot)
        print(f"seed {seed}: sasr {value:.6f} "
              f"(asr per task: {', '.join(f'{a:.4f}' for a in per_task)})")
    return EXIT_OK


def cmd_report(args, extra):
    report = metrics.parse_report(args.report_file)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.report_file))
    paths = metrics.emit_report(report, out_dir, plot=True)
    print(f"re-emitted report: {paths}")
    return EXIT_OK


def cmd_run(args, extra):
    cfg = _load_cfg(args, extra)
    reports = run_experiment(cfg, plot=args.plot)
    for r in reports:
        print(f"[{r.extras.get('ablation', 'none')}] seed {r.seed}: sasr {r.sasr:.6f}")
    return EXIT_OK


def cmd_ablate(args, extra):
    cfg = _load_cfg(args, extra)
    reports = run_ablation_matrix(cfg, plot=args.plot)
    for r in reports:
        print(f"[{r.extras.get('ablation')}] seed {r.seed}: sasr {r.sasr:.6f}")
    return EXIT_OK


def cmd_sweep(args, extra):
    cfg = _load_cfg(args, extra)
    if args.values:
        values = [float(v) for v in args.values.split(",")]
    elif args.key == "epsilon":
        values = DEFAULT_EPS_SWEEP
    else:
        values = [0.5, 0.6, 0.7, 0.8]
    reports = run_sweep(cfg, args.key, values, plot=args.plot)
    for r in reports:
        print(f"[{args.key} sweep] seed {r.seed}: sasr {r.sasr:.6f} "
              f"(eps {r.extras.get('epsilon')}, sigma {r.extras.get('sigma')})")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="cilattack",
                                description="Craft and evaluate update-resistant "
                                            "universal targeted perturbations")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        if name != "report":
            sp.add_argument("--config", required=True, help="config file path")
            sp.add_argument("--plot", action="store_true", help="render curve plots")
        return sp

    add("train-cil", cmd_train_cil, help="train the incremental checkpoint series")
    add("craft", cmd_craft, help="craft a perturbation against the first checkpoint")
    add("evaluate", cmd_evaluate, help="evaluate a crafted perturbation over the series")
    add("run", cmd_run, help="end-to-end: train, craft, evaluate, report")
    add("ablate", cmd_ablate, help="run the full ablation matrix per seed")
    sp = add("sweep", cmd_sweep, help="grid over epsilon or sigma")
    sp.add_argument("--key", choices=("epsilon", "sigma"), default="epsilon")
    sp.add_argument("--values", help="comma-separated grid values")
    sp = sub.add_parser("report", help="re-emit report files (with plot)")
    sp.set_defaults(fn=cmd_report)
    sp.add_argument("report_file")
    sp.add_argument("--out", help="output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.fn(args, extra)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
