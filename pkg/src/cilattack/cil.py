"""Desk-scale class-incremental training harness.

Trains an ordered series of checkpoints f_1..f_M over a class-split task
schedule with one of three strategies: plain finetuning, exemplar replay, or
soft-target distillation from the previous checkpoint. Checkpoints are
immutable once emitted; the attacker only ever touches the first one.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .augment import AugmentParams, augment
from .data import ImageSet, TrainTestPair
from .models import SmallConvNet

METHODS = ("finetune", "replay", "distill")


class ScheduleError(ValueError):
    pass


class TrainingError(Exception):
    pass


@dataclass
class TaskSchedule:
    initial_classes: int
    classes_per_task: int
    total_classes: int

    def __post_init__(self):
        if self.initial_classes <= 0 or self.classes_per_task <= 0 or self.total_classes <= 0:
            raise ScheduleError("schedule fields must be positive")
        rem = self.total_classes - self.initial_classes
        if rem < 0 or rem % self.classes_per_task != 0:
            raise ScheduleError(
                f"infeasible schedule: initial={self.initial_classes} "
                f"+ k*{self.classes_per_task} never reaches {self.total_classes}")

    @property
    def task_count(self) -> int:
        return 1 + (self.total_classes - self.initial_classes) // self.classes_per_task

    def classes_of_task(self, i: int) -> range:
        """Global class ids introduced by task i (0-based)."""
        if i == 0:
            return range(0, self.initial_classes)
        start = self.initial_classes + (i - 1) * self.classes_per_task
        return range(start, start + self.classes_per_task)

    def classes_through(self, i: int) -> int:
        return self.initial_classes + i * self.classes_per_task


@dataclass
class TrainerConfig:
    epochs_per_task: int = 15
    learning_rate: float = 1e-3
    batch_size: int = 64
    buffer_size: int = 200          # replay exemplar budget (total)
    distill_temperature: float = 2.0
    distill_weight: float = 1.0
    augment_train: bool = True      # random small affine per training batch
    seed: int = 0

    def __post_init__(self):
        if self.buffer_size < 0:
            raise ValueError("buffer_size must be >= 0")
        if self.distill_temperature <= 0:
            raise ValueError("distill_temperature must be positive")


@dataclass
class TaskData:
    train: ImageSet
    test: ImageSet
    class_ids: list


@dataclass
class ModelSeries:
    checkpoints: list
    schedule: TaskSchedule
    method: str
    clean_acc: list
    class_names: list = field(default_factory=list)


def split_tasks(dataset: TrainTestPair, schedule: TaskSchedule, seed: int,
                pin_first=None) -> list[TaskData]:
    """Relabel classes into a seed-fixed global order and slice them into tasks.

    ``pin_first`` forces the named classes into the initial task (the attack
    targets a first-task class, which the surrogate must know about).
    """
    n_classes = len(dataset.train.class_names)
    if n_classes < schedule.total_classes:
        raise ScheduleError(
            f"dataset has {n_classes} classes, schedule needs {schedule.total_classes}")
    g = torch.Generator().manual_seed(seed)
    order = list(torch.randperm(n_classes, generator=g)[: schedule.total_classes])
    for name in (pin_first or []):
        if name not in dataset.train.class_names:
            raise ScheduleError(f"pinned class {name!r} not in dataset")
        old_id = dataset.train.class_names.index(name)
        if old_id not in [int(o) for o in order]:
            order[schedule.initial_classes - 1] = torch.tensor(old_id)
        else:
            pos = [int(o) for o in order].index(old_id)
            if pos >= schedule.initial_classes:
                swap = schedule.initial_classes - 1
                order[pos], order[swap] = order[swap], order[pos]
    old_to_new = {int(old): new for new, old in enumerate(order)}
    names = [dataset.train.class_names[int(old)] for old in order]

    def relabel(ds: ImageSet) -> ImageSet:
        keep = torch.tensor([int(t) in old_to_new for t in ds.targets])
        idx = torch.nonzero(keep).flatten()
        tgts = torch.tensor([old_to_new[int(ds.targets[i])] for i in idx], dtype=torch.long)
        return ImageSet(ds.images[idx], tgts, names)

    train, test = relabel(dataset.train), relabel(dataset.test)
    tasks = []
    for i in range(schedule.task_count):
        ids = list(schedule.classes_of_task(i))
        tasks.append(TaskData(train.select_classes(ids), test.select_classes(ids), ids))
    return tasks


# train-time augmentation: small pose changes, mirroring natural viewpoint
# variation; keeps each checkpoint from latching onto pixel-exact features
_TRAIN_AUG = AugmentParams(rotation_deg=(-12.0, 12.0), scale=(0.9, 1.1),
                           translate_frac=(-0.06, 0.06), patch_count=(0, 0),
                           patch_size_frac=(0.0, 0.0))


def _train_epochs(model, images, targets, cfg, g, teacher=None, n_old=0):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    model.train()
    for _ in range(cfg.epochs_per_task):
        perm = torch.randperm(images.shape[0], generator=g)
        for off in range(0, images.shape[0], cfg.batch_size):
            idx = perm[off:off + cfg.batch_size]
            x, y = images[idx], targets[idx]
            if cfg.augment_train:
                x = augment(x, _TRAIN_AUG, g)
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if teacher is not None and n_old > 0:
                with torch.no_grad():
                    t_logits = teacher(x)
                T = cfg.distill_temperature
                kd = F.kl_div(
                    F.log_softmax(logits[:, :n_old] / T, dim=-1),
                    F.log_softmax(t_logits[:, :n_old] / T, dim=-1),
                    log_target=True, reduction="batchmean") * T * T
                loss = loss + cfg.distill_weight * kd
            if not torch.isfinite(loss):
                raise TrainingError("training loss went non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()


class _ReplayBuffer:
    """Fixed-size exemplar store, evenly split across completed-task classes."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.by_class: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def absorb(self, task: TaskData, g: torch.Generator):
        for cid in task.class_ids:
            idx = torch.nonzero(task.train.targets == cid).flatten()
            perm = torch.randperm(idx.numel(), generator=g)
            self.by_class[cid] = (task.train.images[idx[perm]],
                                  task.train.targets[idx[perm]])
        self._shrink()

    def _shrink(self):
        if self.capacity == 0:
            self.by_class = {}
            return
        if not self.by_class:
            return
        n = len(self.by_class)
        base, rem = divmod(self.capacity, n)
        for rank, cid in enumerate(sorted(self.by_class)):
            quota = base + (1 if rank < rem else 0)
            imgs, tgts = self.by_class[cid]
            self.by_class[cid] = (imgs[:quota], tgts[:quota])

    def tensors(self):
        total = len(self)
        if total == 0:
            return None
        imgs = torch.cat([self.by_class[c][0] for c in sorted(self.by_class)])
        tgts = torch.cat([self.by_class[c][1] for c in sorted(self.by_class)])
        return imgs, tgts

    def __len__(self):
        return sum(v[0].shape[0] for v in self.by_class.values())


def train_sequence(tasks: list[TaskData], method: str, cfg: TrainerConfig,
                   model_factory=None) -> ModelSeries:
    if method not in METHODS:
        raise ValueError(f"unknown CIL method {method!r}; expected one of {METHODS}")
    if not tasks:
        raise ValueError("no tasks to train on")
    factory = model_factory or (lambda n: SmallConvNet(n))
    schedule = _infer_schedule(tasks)
    torch.manual_seed(cfg.seed)
    g = torch.Generator().manual_seed(cfg.seed)
    g_buf = torch.Generator().manual_seed(cfg.seed + 1)

    model = factory(len(tasks[0].class_ids))
    buffer = _ReplayBuffer(cfg.buffer_size)
    checkpoints, accs = [], []
    seen_test_images, seen_test_targets = [], []
    prev = None

    for i, task in enumerate(tasks):
        n_seen = max(task.class_ids) + 1
        model.expand_head(n_seen)
        imgs, tgts = task.train.images, task.train.targets
        teacher, n_old = None, 0
        if method == "replay" and i > 0:
            stored = buffer.tensors()
            if stored is not None:
                imgs = torch.cat([imgs, stored[0]])
                tgts = torch.cat([tgts, stored[1]])
        elif method == "distill" and i > 0:
            teacher, n_old = prev, prev.num_classes
        _train_epochs(model, imgs, tgts, cfg, g, teacher=teacher, n_old=n_old)
        if method == "replay":
            buffer.absorb(task, g_buf)
            assert len(buffer) <= cfg.buffer_size

        ckpt = copy.deepcopy(model)
        ckpt.eval()
        for prm in ckpt.parameters():
            prm.requires_grad_(False)
        checkpoints.append(ckpt)
        prev = ckpt

        seen_test_images.append(task.test.images)
        seen_test_targets.append(task.test.targets)
        seen = ImageSet(torch.cat(seen_test_images), torch.cat(seen_test_targets),
                        task.test.class_names)
        accs.append(clean_accuracy(ckpt, seen))

    return ModelSeries(checkpoints, schedule, method, accs,
                       class_names=list(tasks[0].train.class_names))


def _infer_schedule(tasks) -> TaskSchedule:
    initial = len(tasks[0].class_ids)
    per = len(tasks[1].class_ids) if len(tasks) > 1 else initial
    total = max(tasks[-1].class_ids) + 1
    return TaskSchedule(initial, per if len(tasks) > 1 else per, total)


def clean_accuracy(model, testset: ImageSet) -> float:
    if len(testset) == 0:
        raise ValueError("empty test set")
    n_classes = model.num_classes
    if int(testset.targets.max()) >= n_classes:
        raise ValueError("test set contains labels the model has not seen")
    model.eval()
    correct = 0
    with torch.no_grad():
        for off in range(0, len(testset), 512):
            x = testset.images[off:off + 512]
            y = testset.targets[off:off + 512]
            correct += int((model(x).argmax(dim=-1) == y).sum())
    return correct / len(testset)


# ---------------------------------------------------------------------------
# classifier checkpoint files
# ---------------------------------------------------------------------------

MODEL_CKPT_VERSION = 1


class ModelFormatError(Exception):
    pass


def save_classifier(path: str, model: SmallConvNet, classes_seen) -> None:
    torch.save({
        "format_version": MODEL_CKPT_VERSION,
        "arch": model.arch_name,
        "num_classes": model.num_classes,
        "state_dict": model.state_dict(),
        "classes_seen": list(classes_seen),
    }, path)


def load_classifier(path: str) -> tuple[SmallConvNet, list[str]]:
    try:
        blob = torch.load(path, weights_only=False)
    except Exception as e:
        raise ModelFormatError(f"{path}: unreadable checkpoint: {e}") from e
    if blob.get("format_version") != MODEL_CKPT_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {blob.get('format_version')}")
    if blob.get("arch") != SmallConvNet.arch_name:
        raise ModelFormatError(f"{path}: unknown architecture {blob.get('arch')!r}")
    model = SmallConvNet(blob["num_classes"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob["classes_seen"]


def save_series(dirpath: str, series: ModelSeries) -> None:
    import os
    os.makedirs(dirpath, exist_ok=True)
    for i, ckpt in enumerate(series.checkpoints):
        n_seen = series.schedule.classes_through(i)
        save_classifier(os.path.join(dirpath, f"task_{i + 1:02d}.pt"),
                        ckpt, series.class_names[:n_seen])
    with open(os.path.join(dirpath, "series.txt"), "w") as f:
        f.write(f"method: {series.method}\n")
        f.write(f"initial_classes: {series.schedule.initial_classes}\n")
        f.write(f"classes_per_task: {series.schedule.classes_per_task}\n")
        f.write(f"total_classes: {series.schedule.total_classes}\n")
        f.write("clean_acc: " + ",".join(f"{a:.6f}" for a in series.clean_acc) + "\n")
        f.write("class_names: " + ",".join(series.class_names) + "\n")


def load_series(dirpath: str) -> ModelSeries:
    import os
    meta = {}
    with open(os.path.join(dirpath, "series.txt")) as f:
        for line in f:
            k, _, v = line.partition(":")
            meta[k.strip()] = v.strip()
    schedule = TaskSchedule(int(meta["initial_classes"]), int(meta["classes_per_task"]),
                            int(meta["total_classes"]))
    checkpoints = []
    for i in range(schedule.task_count):
        model, _ = load_classifier(os.path.join(dirpath, f"task_{i + 1:02d}.pt"))
        checkpoints.append(model)
    return ModelSeries(
        checkpoints, schedule, meta["method"],
        [float(a) for a in meta["clean_acc"].split(",")],
        class_names=meta["class_names"].split(","))
