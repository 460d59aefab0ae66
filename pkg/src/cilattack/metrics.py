"""Attack success metrics and report emission.

ASR is the fraction of perturbed test inputs a checkpoint classifies as the
target class. The sustained rate averages the per-example success indicator
over every checkpoint in the series; with a fixed test set it equals the mean
of the per-task ASR values, which is asserted. Test sets exclude images whose
true label is the target class so the metric measures misclassification.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import torch

from .perturb import Perturbation, apply_perturbation


class MetricsError(Exception):
    pass


@dataclass
class AttackReport:
    target_class: str
    asr_per_task: list
    sasr: float
    clean_acc_per_task: list
    config_digest: str
    seed: int
    learned_classes: list = field(default_factory=list)
    method: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.asr_per_task) != len(self.clean_acc_per_task):
            raise MetricsError("asr_per_task and clean_acc_per_task lengths differ")
        if not self.learned_classes:
            self.learned_classes = list(range(1, len(self.asr_per_task) + 1))


def _hit_count(model, images: torch.Tensor, p: Perturbation, y_t: int) -> int:
    model.eval()
    hits = 0
    with torch.no_grad():
        for off in range(0, images.shape[0], 512):
            x = apply_perturbation(images[off:off + 512], p)
            hits += int((model(x).argmax(dim=-1) == y_t).sum())
    return hits


def asr(model, x_test: torch.Tensor, p: Perturbation, y_t: int) -> float:
    if x_test.shape[0] == 0:
        raise MetricsError("empty test set")
    return _hit_count(model, x_test, p, y_t) / x_test.shape[0]


def sasr(series, x_test: torch.Tensor, p: Perturbation, y_t: int,
         exclude_initial: bool = False) -> tuple[float, list]:
    """Mean success indicator over (checkpoints x examples).

    Returns (sasr, asr_per_task); ``exclude_initial`` drops the first
    checkpoint from the average but not from the per-task list.
    """
    models = series.checkpoints if hasattr(series, "checkpoints") else list(series)
    if not models:
        raise MetricsError("empty model series")
    if x_test.shape[0] == 0:
        raise MetricsError("empty test set")
    c = x_test.shape[0]
    hits = [_hit_count(m, x_test, p, y_t) for m in models]
    scored = hits[1:] if exclude_initial else hits
    if not scored:
        raise MetricsError("nothing to score after excluding the initial checkpoint")
    value = sum(scored) / (len(scored) * c)
    return value, [h / c for h in hits]


def non_target_test_images(testset, y_t: int) -> torch.Tensor:
    """Evaluation pool: test images whose true label is not the target."""
    keep = testset.targets != y_t
    return testset.images[torch.nonzero(keep).flatten()]


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

CURVE_HEADER = "learned_classes,asr,clean_acc"


def emit_report(report: AttackReport, out_dir: str, plot: bool = False) -> dict:
    """Write report.txt, curve.csv and optionally curve.png; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.txt")
    curve_path = os.path.join(out_dir, "curve.csv")

    lines = [
        f"target_class: {report.target_class}",
        f"method: {report.method}",
        f"seed: {report.seed}",
        f"config_digest: {report.config_digest}",
        f"sasr: {report.sasr:.6f}",
        "asr_per_task: " + ",".join(f"{a:.6f}" for a in report.asr_per_task),
        "clean_acc_per_task: " + ",".join(f"{a:.6f}" for a in report.clean_acc_per_task),
        "learned_classes: " + ",".join(str(c) for c in report.learned_classes),
    ]
    for k in sorted(report.extras):
        lines.append(f"extra.{k}: {report.extras[k]}")
    with open(report_path, "w") as f:
        f.write("\n".join(lines) + "\n")

    with open(curve_path, "w") as f:
        f.write(CURVE_HEADER + "\n")
        for lc, a, ca in zip(report.learned_classes, report.asr_per_task,
                             report.clean_acc_per_task):
            f.write(f"{lc},{a:.6f},{ca:.6f}\n")

    paths = {"report": report_path, "curve": curve_path}
    if plot:
        paths["plot"] = _plot_curve(report, os.path.join(out_dir, "curve.png"))
    return paths


def _plot_curve(report: AttackReport, path: str) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(report.learned_classes, [a * 100 for a in report.asr_per_task],
            marker="o", label="ASR")
    ax.plot(report.learned_classes, [a * 100 for a in report.clean_acc_per_task],
            marker="s", linestyle="--", label="clean acc")
    ax.set_xlabel("learned classes")
    ax.set_ylabel("%")
    ax.set_title(f"target: {report.target_class}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def parse_report(path: str) -> AttackReport:
    kv = {}
    extras = {}
    with open(path) as f:
        for line in f:
            k, _, v = line.rstrip("\n").partition(": ")
            if k.startswith("extra."):
                extras[k[len("extra."):]] = v
            else:
                kv[k] = v
    return AttackReport(
        target_class=kv["target_class"],
        asr_per_task=[float(a) for a in kv["asr_per_task"].split(",")],
        sasr=float(kv["sasr"]),
        clean_acc_per_task=[float(a) for a in kv["clean_acc_per_task"].split(",")],
        config_digest=kv["config_digest"],
        seed=int(kv["seed"]),
        learned_classes=[int(c) for c in kv["learned_classes"].split(",")],
        method=kv.get("method", ""),
        extras=extras,
    )


def parse_curve(path: str) -> list[tuple[int, float, float]]:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != CURVE_HEADER:
            raise MetricsError(f"{path}: unexpected curve header {header!r}")
        for line in f:
            lc, a, ca = line.strip().split(",")
            rows.append((int(lc), float(a), float(ca)))
    return rows
