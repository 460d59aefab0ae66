"""Directional embeddings and the two losses driving perturbation updates.

The positive/negative similarity pair compares the adversarial direction in
embedding space against the target and non-target text directions. Raw
cosines live in [-1, 1]; they are affinely mapped through (c + 1) / 2 into
[0, 1] before entering the contrastive log-ratio, so the ratio is always
defined. All operations are pure and accept either embedding dataclasses or
raw tensors; batched adversarial directions (N, d) are supported throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class DimensionMismatchError(ValueError):
    pass


class DegenerateDirectionError(ValueError):
    """A direction vector has (near-)zero norm; cosines are undefined."""


class DegenerateSimilarityError(ValueError):
    """Both similarities are zero; the contrastive ratio is undefined."""


_NORM_FLOOR = 1e-12


def _vec(x) -> torch.Tensor:
    return x.vector if hasattr(x, "vector") else torch.as_tensor(x)


def _check_same_dim(*vs):
    dims = {v.shape[-1] for v in vs}
    if len(dims) != 1:
        raise DimensionMismatchError(f"mixed embedding dimensions: {sorted(dims)}")


@dataclass
class DirectionBundle:
    d_t: torch.Tensor      # toward the target class text
    d_nt: torch.Tensor     # toward the mean non-target class text
    d_adv: torch.Tensor    # image-space adversarial direction, (d,) or (N, d)

    def __post_init__(self):
        self.d_t, self.d_nt, self.d_adv = _vec(self.d_t), _vec(self.d_nt), _vec(self.d_adv)
        _check_same_dim(self.d_t, self.d_nt, self.d_adv)


@dataclass
class SimilarityPair:
    sim_pos: torch.Tensor
    sim_neg: torch.Tensor


@dataclass
class LossBreakdown:
    l_clip: float
    l_surr: float
    total: float
    weight_clip: float
    weight_surr: float


def direction_target(e_t, e_p) -> torch.Tensor:
    e_t, e_p = _vec(e_t), _vec(e_p)
    _check_same_dim(e_t, e_p)
    return e_t - e_p


def direction_nontarget(non_target_embeddings, e_p) -> torch.Tensor:
    vecs = [_vec(e) for e in non_target_embeddings]
    if not vecs:
        raise ValueError("non-target embedding set is empty")
    e_p = _vec(e_p)
    _check_same_dim(*vecs, e_p)
    return torch.stack(vecs).mean(dim=0) - e_p


def direction_adversarial(e_pert_aug, e_clean, e_clean_aug) -> torch.Tensor:
    a, b, c = _vec(e_pert_aug), _vec(e_clean), _vec(e_clean_aug)
    _check_same_dim(a, b, c)
    return a - b - c


def similarity_pair(db: DirectionBundle) -> SimilarityPair:
    """Map raw cosines of (d_adv, d_t) and (d_adv, d_nt) through (c+1)/2."""
    adv = db.d_adv if db.d_adv.dim() > 1 else db.d_adv.unsqueeze(0)
    with torch.no_grad():
        norms = [adv.norm(dim=-1).min(), db.d_t.norm(), db.d_nt.norm()]
        if min(float(n) for n in norms) <= _NORM_FLOOR:
            raise DegenerateDirectionError("near-zero direction vector")
    c_pos = F.cosine_similarity(adv, db.d_t.unsqueeze(0), dim=-1)
    c_neg = F.cosine_similarity(adv, db.d_nt.unsqueeze(0), dim=-1)
    sim_pos = ((c_pos + 1.0) / 2.0).clamp(0.0, 1.0)
    sim_neg = ((c_neg + 1.0) / 2.0).clamp(0.0, 1.0)
    if db.d_adv.dim() == 1:
        sim_pos, sim_neg = sim_pos.squeeze(0), sim_neg.squeeze(0)
    return SimilarityPair(sim_pos, sim_neg)


def loss_clip(sp: SimilarityPair) -> torch.Tensor:
    """Contrastive log-ratio: -log(sim_pos / (sim_pos + sim_neg))."""
    pos, neg = torch.as_tensor(sp.sim_pos), torch.as_tensor(sp.sim_neg)
    denom = pos + neg
    if (denom <= 0).any():
        raise DegenerateSimilarityError("sim_pos + sim_neg must be positive")
    return -torch.log(pos / denom)


def loss_surrogate(logits: torch.Tensor, y_t: int, non_target_indices) -> torch.Tensor:
    """Per-class binary cross-entropy: pull p(target) to 1, every p(non-target) to 0.

    Probabilities are elementwise sigmoids of the logits; computed in log-space
    for stability. Accepts (C,) or (N, C) logits; returns a scalar or (N,).
    """
    logits = torch.as_tensor(logits)
    squeeze = logits.dim() == 1
    if squeeze:
        logits = logits.unsqueeze(0)
    n_classes = logits.shape[-1]
    nt = list(non_target_indices)
    for idx in [y_t] + nt:
        if not (0 <= idx < n_classes):
            raise IndexError(f"class index {idx} out of range for {n_classes} logits")
    if y_t in nt:
        raise ValueError("target index must not appear among non-target indices")
    loss = -F.logsigmoid(logits[:, y_t])
    if nt:
        loss = loss - F.logsigmoid(-logits[:, nt]).sum(dim=-1)
    return loss.squeeze(0) if squeeze else loss


def total_loss(l_clip, l_surr, weights=(1.0, 1.0)) -> LossBreakdown:
    w_clip, w_surr = float(weights[0]), float(weights[1])
    if w_clip <= 0 or w_surr <= 0:
        raise ValueError("loss weights must be positive")
    lc, ls = float(l_clip), float(l_surr)
    return LossBreakdown(lc, ls, w_clip * lc + w_surr * ls, w_clip, w_surr)
