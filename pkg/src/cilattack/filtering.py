"""Latent-space filtering of the public out-of-distribution (POOD) pool.

A reference embedding averages the surrogate's penultimate features over a
few typical target-class-like examples. Each POOD candidate is scored by the
cosine similarity of its features to that reference, affinely normalized into
[0, 1]; candidates scoring above the threshold carry confusing target-class
semantics and are dropped before optimization starts.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbones import surrogate_feature_batch


class EmptyPoolError(Exception):
    """Every candidate was filtered out; includes the score distribution."""


class DegenerateReferenceError(ValueError):
    pass


@dataclass
class ReferenceEmbedding:
    vector: torch.Tensor
    source_count: int

    def __post_init__(self):
        if self.source_count <= 0:
            raise ValueError("source_count must be positive")


@dataclass
class FilterConfig:
    sigma: float = 0.7
    reference_count: int = 16

    def __post_init__(self):
        if not (0.0 < self.sigma < 1.0):
            raise ValueError(f"sigma must lie in (0, 1), got {self.sigma}")
        if self.reference_count <= 0:
            raise ValueError("reference_count must be positive")


def reference_embedding(images: torch.Tensor, surrogate) -> ReferenceEmbedding:
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.shape[0] == 0:
        raise ValueError("reference image set is empty")
    with torch.no_grad():
        feats = surrogate_feature_batch(surrogate, images)
    return ReferenceEmbedding(feats.mean(dim=0), int(images.shape[0]))


def filter_scores(images: torch.Tensor, ref: ReferenceEmbedding, surrogate) -> torch.Tensor:
    """(N,) scores in [0, 1]: (cos(features, reference) + 1) / 2."""
    if float(ref.vector.norm()) <= 1e-12:
        raise DegenerateReferenceError("reference embedding has near-zero norm")
    if images.dim() == 3:
        images = images.unsqueeze(0)
    with torch.no_grad():
        feats = surrogate_feature_batch(surrogate, images)
    cos = F.cosine_similarity(feats, ref.vector.unsqueeze(0), dim=-1)
    return ((cos + 1.0) / 2.0).clamp(0.0, 1.0)


def filter_score(image: torch.Tensor, ref: ReferenceEmbedding, surrogate) -> float:
    return float(filter_scores(image, ref, surrogate)[0])


def build_filter_mask(images: torch.Tensor, ref: ReferenceEmbedding,
                      cfg: FilterConfig, surrogate) -> torch.Tensor:
    """Boolean mask over the pool; True = retained (score <= sigma).

    Computed once before optimization: the surrogate and the pool are fixed.
    """
    scores = filter_scores(images, ref, surrogate)
    mask = scores <= cfg.sigma
    if not mask.any():
        qs = torch.quantile(scores, torch.tensor([0.0, 0.25, 0.5, 0.75, 1.0]))
        raise EmptyPoolError(
            f"all {len(scores)} examples filtered out at sigma={cfg.sigma}; "
            f"score quantiles min/q25/med/q75/max = "
            f"{', '.join(f'{float(q):.4f}' for q in qs)}")
    return mask


def select_reference_images(pood_images: torch.Tensor, pood_targets: torch.Tensor,
                            pood_class_names, target_label: str, backbone,
                            count: int) -> torch.Tensor:
    """Pick reference images from the POOD classes textually closest to the target.

    Classes are ranked by cosine similarity between their text embeddings and
    the target label's; images are taken from the closest classes until
    ``count`` is reached.
    """
    names = list(pood_class_names)
    vecs = backbone.encode_text_batch([target_label] + names)
    target_vec, class_vecs = vecs[0], vecs[1:]
    sims = class_vecs @ target_vec
    order = torch.argsort(sims, descending=True)
    picked = []
    for rank in order:
        cid = int(rank)
        idx = torch.nonzero(pood_targets == cid).flatten()
        for i in idx:
            picked.append(pood_images[i])
            if len(picked) >= count:
                return torch.stack(picked)
    if not picked:
        raise ValueError("POOD pool has no images to draw references from")
    return torch.stack(picked)
