"""Desk-scale image datasets.

Datasets live in memory as float tensors in [0, 1] with global integer labels.
On disk a dataset is a root directory with one subdirectory per class plus an
``index.txt`` that pins the class-name -> global-label mapping and the
train/test split, so runs are reproducible across machines.

Also provides a synthetic generator: each class name deterministically maps to
a fixed template pattern, and images are noisy renditions of that template.
A small CNN learns these classes quickly, which keeps the full pipeline
runnable on a laptop CPU.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .augment import AugmentParams, augment


class DatasetError(Exception):
    pass


@dataclass
class ImageSet:
    """A labelled batch of images: ``images`` is (N, 3, H, W) in [0, 1]."""

    images: torch.Tensor
    targets: torch.Tensor          # (N,) long, global class ids
    class_names: list[str]         # index == global class id

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "ImageSet":
        idx = torch.as_tensor(idx)
        return ImageSet(self.images[idx], self.targets[idx], self.class_names)

    def select_classes(self, class_ids) -> "ImageSet":
        mask = torch.zeros(len(self), dtype=torch.bool)
        for c in class_ids:
            mask |= self.targets == c
        return self.subset(torch.nonzero(mask).flatten())

    def name_of(self, class_id: int) -> str:
        return self.class_names[class_id]


@dataclass
class TrainTestPair:
    train: ImageSet
    test: ImageSet


@dataclass
class LabelSpace:
    """Target / non-target CIL labels plus the POOD label pool.

    ``target_index`` and ``non_target_indices`` address the surrogate's logit
    head; the name lists feed the text encoder.
    """

    target: str
    non_target: list[str]
    pood: list[str]
    target_index: int
    non_target_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.target in self.non_target:
            raise ValueError("target class listed among non-target classes")
        overlap = set(self.pood) & ({self.target} | set(self.non_target))
        if overlap:
            raise ValueError(f"POOD labels overlap CIL labels: {sorted(overlap)}")


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _label_seed(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def class_template(label: str, hw: int = 32) -> torch.Tensor:
    """Fixed per-class pattern, derived only from the class name.

    Low-frequency (a coarse random grid upsampled bilinearly) so mild affine
    transforms preserve most of the class evidence, as with natural images.
    """
    g = torch.Generator().manual_seed(_label_seed(label))
    coarse = torch.randn(1, 3, 6, 6, generator=g)
    t = torch.nn.functional.interpolate(coarse, size=(hw, hw), mode="bilinear",
                                        align_corners=False)[0]
    return t / t.abs().max()


def anchor_image(label: str, hw: int = 32, signal: float = 0.35) -> torch.Tensor:
    """Noise-free canonical rendition of a class (used as a semantic anchor)."""
    return torch.clamp(0.5 + signal * class_template(label, hw), 0.0, 1.0)


# Every rendition gets an independent small pose change, like object photos
# taken from slightly different viewpoints.
POSE_JITTER = AugmentParams(rotation_deg=(-12.0, 12.0), scale=(0.9, 1.1),
                            translate_frac=(-0.06, 0.06), patch_count=(0, 0),
                            patch_size_frac=(0.0, 0.0))


def _posed_templates(label: str, n: int, hw: int, g: torch.Generator) -> torch.Tensor:
    tpl = class_template(label, hw)
    batch = tpl.unsqueeze(0).expand(n, -1, -1, -1)
    # augment() works on [0, 1] pixels; the template lives in [-1, 1], and the
    # affine warp commutes with the affine rescaling (border padding included)
    return augment((batch + 1.0) / 2.0, POSE_JITTER, g) * 2.0 - 1.0


def make_synthetic(labels, n_per_class: int, hw: int = 32, signal: float = 0.35,
                   noise: float = 0.15, seed: int = 0) -> ImageSet:
    labels = list(labels)
    g = torch.Generator().manual_seed(seed)
    images, targets = [], []
    for cid, label in enumerate(labels):
        posed = _posed_templates(label, n_per_class, hw, g)
        noise_draw = torch.randn(n_per_class, 3, hw, hw, generator=g)
        imgs = torch.clamp(0.5 + signal * posed + noise * noise_draw, 0.0, 1.0)
        images.append(imgs)
        targets.append(torch.full((n_per_class,), cid, dtype=torch.long))
    return ImageSet(torch.cat(images), torch.cat(targets), labels)


def make_synthetic_pair(labels, n_train: int, n_test: int, hw: int = 32,
                        signal: float = 0.35, noise: float = 0.15,
                        seed: int = 0) -> TrainTestPair:
    return TrainTestPair(
        train=make_synthetic(labels, n_train, hw, signal, noise, seed),
        test=make_synthetic(labels, n_test, hw, signal, noise, seed + 10_000),
    )


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

INDEX_NAME = "index.txt"


def save_image_folder(root: str, pair: TrainTestPair) -> None:
    """Write a class-per-subdirectory dataset with a pinned index file."""
    os.makedirs(root, exist_ok=True)
    lines = []
    for cid, name in enumerate(pair.train.class_names):
        lines.append(f"class {name} {cid}")
    counters: dict[str, int] = {}
    for split_name, dset in (("train", pair.train), ("test", pair.test)):
        for i in range(len(dset)):
            cname = dset.name_of(int(dset.targets[i]))
            os.makedirs(os.path.join(root, cname), exist_ok=True)
            k = counters.get(cname, 0)
            counters[cname] = k + 1
            fname = f"{k:05d}.png"
            arr = (dset.images[i].permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
            Image.fromarray(arr).save(os.path.join(root, cname, fname))
            lines.append(f"file {cname}/{fname} {split_name}")
    with open(os.path.join(root, INDEX_NAME), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_image_folder(root: str) -> TrainTestPair:
    index_path = os.path.join(root, INDEX_NAME)
    if not os.path.isfile(index_path):
        raise DatasetError(f"missing index file: {index_path}")
    class_ids: dict[str, int] = {}
    files: list[tuple[str, str]] = []
    with open(index_path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "class" and len(parts) == 3:
                class_ids[parts[1]] = int(parts[2])
            elif parts[0] == "file" and len(parts) == 3:
                files.append((parts[1], parts[2]))
            else:
                raise DatasetError(f"{index_path}:{lineno}: bad index line: {line!r}")
    names = [None] * len(class_ids)
    for name, cid in class_ids.items():
        if not (0 <= cid < len(class_ids)) or names[cid] is not None:
            raise DatasetError(f"non-contiguous class ids in {index_path}")
        names[cid] = name
    splits = {"train": ([], []), "test": ([], [])}
    for rel, split in files:
        if split not in splits:
            raise DatasetError(f"unknown split {split!r} in {index_path}")
        cname = rel.split("/", 1)[0]
        if cname not in class_ids:
            raise DatasetError(f"file {rel} references unknown class {cname!r}")
        arr = np.asarray(Image.open(os.path.join(root, rel)).convert("RGB"), dtype=np.float32) / 255.0
        splits[split][0].append(torch.from_numpy(arr).permute(2, 0, 1))
        splits[split][1].append(class_ids[cname])

    def build(key):
        imgs, tgts = splits[key]
        if not imgs:
            raise DatasetError(f"dataset {root} has no {key} images")
        return ImageSet(torch.stack(imgs), torch.tensor(tgts, dtype=torch.long), list(names))

    return TrainTestPair(build("train"), build("test"))


def folder_class_names(root: str) -> list[str]:
    """Class names pinned by a dataset's index file, in global-id order."""
    index_path = os.path.join(root, INDEX_NAME)
    if not os.path.isfile(index_path):
        raise DatasetError(f"missing index file: {index_path}")
    pairs = []
    with open(index_path) as f:
        for line in f:
            parts = line.split()
            if parts and parts[0] == "class":
                pairs.append((int(parts[2]), parts[1]))
    return [name for _, name in sorted(pairs)]
