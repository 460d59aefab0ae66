"""Randomized geometric augmentation: affine (rotation, scale, translation)
plus gray occluding patches.

The warp goes through a sampled coordinate grid with bilinear interpolation
and edge-replicating borders, so it is differentiable with respect to the
input pixels and never produces out-of-range values. All randomness comes
from the caller-supplied generator: same seed + params -> bit-identical
output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


class AugmentParamError(ValueError):
    pass


def _check_range(name, r, lo=None, hi=None):
    a, b = float(r[0]), float(r[1])
    if a > b:
        raise AugmentParamError(f"{name} range not well-ordered: {r}")
    if lo is not None and a < lo:
        raise AugmentParamError(f"{name} range below {lo}: {r}")
    if hi is not None and b > hi:
        raise AugmentParamError(f"{name} range above {hi}: {r}")
    return (a, b)


@dataclass
class AugmentParams:
    rotation_deg: tuple = (-15.0, 15.0)
    scale: tuple = (0.8, 1.2)
    translate_frac: tuple = (-0.1, 0.1)
    patch_count: tuple = (0, 2)
    patch_size_frac: tuple = (0.05, 0.15)
    seed: int = 0
    patch_fill: float = 0.5

    def __post_init__(self):
        self.rotation_deg = _check_range("rotation_deg", self.rotation_deg)
        self.scale = _check_range("scale", self.scale)
        if self.scale[0] <= 0:
            raise AugmentParamError(f"scale range must be positive: {self.scale}")
        self.translate_frac = _check_range("translate_frac", self.translate_frac, -0.5, 0.5)
        pc = (int(self.patch_count[0]), int(self.patch_count[1]))
        if pc[0] > pc[1] or pc[0] < 0:
            raise AugmentParamError(f"patch_count range invalid: {self.patch_count}")
        self.patch_count = pc
        self.patch_size_frac = _check_range("patch_size_frac", self.patch_size_frac, 0.0, 1.0)

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentParams":
        return cls(rotation_deg=(0.0, 0.0), scale=(1.0, 1.0), translate_frac=(0.0, 0.0),
                   patch_count=(0, 0), patch_size_frac=(0.0, 0.0), seed=seed)


def _uniform(lo, hi, n, g):
    return torch.rand(n, generator=g) * (hi - lo) + lo


def augment(batch: torch.Tensor, params: AugmentParams,
            generator: torch.Generator) -> torch.Tensor:
    """Per-image independent random affine + 0..k gray patches.

    Output has the same shape as the input and pixels stay in [0, 1].
    """
    single = batch.dim() == 3
    x = batch.unsqueeze(0) if single else batch
    n, _, h, w = x.shape
    g = generator

    rot = _uniform(*params.rotation_deg, n, g) * math.pi / 180.0
    scale = _uniform(*params.scale, n, g)
    tx = _uniform(*params.translate_frac, n, g) * 2.0   # normalized coords
    ty = _uniform(*params.translate_frac, n, g) * 2.0

    is_identity = (rot == 0).all() and (scale == 1).all() and (tx == 0).all() and (ty == 0).all()
    if is_identity:
        out = x.clone()
    else:
        # grid_sample maps output coords to input coords: invert rotate/scale/shift
        cos, sin = torch.cos(rot) / scale, torch.sin(rot) / scale
        theta = torch.zeros(n, 2, 3, dtype=x.dtype)
        theta[:, 0, 0] = cos
        theta[:, 0, 1] = sin
        theta[:, 1, 0] = -sin
        theta[:, 1, 1] = cos
        theta[:, 0, 2] = -(cos * tx + sin * ty)
        theta[:, 1, 2] = -(-sin * tx + cos * ty)
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border",
                            align_corners=False)

    lo_c, hi_c = params.patch_count
    if hi_c > 0:
        counts = torch.randint(lo_c, hi_c + 1, (n,), generator=g)
        for i in range(n):
            for _ in range(int(counts[i])):
                frac = float(_uniform(*params.patch_size_frac, 1, g))
                side = max(1, int(round(frac * min(h, w))))
                y0 = int(torch.randint(0, max(1, h - side + 1), (1,), generator=g))
                x0 = int(torch.randint(0, max(1, w - side + 1), (1,), generator=g))
                out[i, :, y0:y0 + side, x0:x0 + side] = params.patch_fill

    out = out.clamp(0.0, 1.0)
    return out.squeeze(0) if single else out
