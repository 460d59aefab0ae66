"""Universal perturbation crafting under an l-infinity budget.

The crafting loop walks the retained POOD pool class by class. For each batch
it augments the clean and perturbed images with independent random draws,
forms the target / non-target / adversarial embedding directions, combines
the contrastive embedding loss with the surrogate loss, takes one Adam step
on the shared perturbation and projects back onto the epsilon ball. The
budget invariant max|delta| <= epsilon holds after every step, not just at
return.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import AugmentParams, augment
from .data import LabelSpace
from .filtering import (FilterConfig, build_filter_mask, reference_embedding,
                        select_reference_images)
from .semantics import (DirectionBundle, LossBreakdown, direction_adversarial,
                        direction_nontarget, direction_target, loss_clip,
                        loss_surrogate, similarity_pair)


class PerturbationError(Exception):
    pass


class NonFiniteLossError(PerturbationError):
    """Loss went NaN/inf; the run aborts, preserving the last checkpoint."""


class PerturbationFormatError(Exception):
    pass


PERT_MAGIC = b"SAEP"
PERT_VERSION = 1


@dataclass
class Perturbation:
    """Additive image perturbation, (C, H, W), with its l-inf budget."""

    tensor: torch.Tensor
    epsilon: float

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise PerturbationError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not torch.isfinite(self.tensor).all():
            raise PerturbationError("perturbation contains non-finite entries")

    def budget_ok(self) -> bool:
        return bool(self.tensor.abs().max() <= self.epsilon)


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    weight_decay: float = 1e-5
    batch_size: int = 256
    epochs: int = 50
    seed: int = 0
    loss_weights: tuple = (1.0, 1.0)   # (contrastive, surrogate)
    epsilon: float = 32.0 / 255.0      # l-inf budget the step projects onto

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if any(w < 0 for w in self.loss_weights):
            raise ValueError("loss weights must be nonnegative")
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")


@dataclass
class CraftRunState:
    epoch: int = 0
    class_cursor: int = 0
    loss_history: list = field(default_factory=list)
    checkpoint_path: str = ""


def init_perturbation(shape, epsilon: float, generator: torch.Generator) -> Perturbation:
    """Standard Gaussian draw immediately clamped to [-eps, eps].

    At the default budget most entries saturate at +-eps; that follows the
    literal init-then-clamp recipe and is intentional.
    """
    if epsilon <= 0:
        raise PerturbationError(f"epsilon must be positive, got {epsilon}")
    t = torch.randn(*shape, generator=generator).clamp_(-epsilon, epsilon)
    return Perturbation(t, epsilon)


def clamp_budget(p: Perturbation) -> Perturbation:
    return Perturbation(p.tensor.clamp(-p.epsilon, p.epsilon), p.epsilon)


def apply_perturbation(x: torch.Tensor, p: Perturbation) -> torch.Tensor:
    """clip(x + delta, 0, 1); the valid-pixel clamp lives here, not on delta."""
    t = p.tensor
    if x.dim() == 4:
        t = t.unsqueeze(0)
    if x.shape[-3:] != p.tensor.shape:
        raise PerturbationError(
            f"shape mismatch: images {tuple(x.shape)} vs perturbation {tuple(p.tensor.shape)}")
    return (x + t).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# perturbation file: magic SAEP, v1, H W C u32, epsilon f32, HWC float32 data
# ---------------------------------------------------------------------------

def save_perturbation(p: Perturbation, path: str, metadata: dict | None = None) -> None:
    c, h, w = p.tensor.shape
    hwc = p.tensor.detach().permute(1, 2, 0).contiguous().numpy().astype("<f4")
    with open(path, "wb") as f:
        f.write(PERT_MAGIC)
        f.write(struct.pack("<HIIIf", PERT_VERSION, h, w, c, p.epsilon))
        f.write(hwc.tobytes())
    if metadata is not None:
        with open(path + ".meta", "w") as f:
            for k in sorted(metadata):
                f.write(f"{k}: {metadata[k]}\n")


def load_perturbation(path: str) -> Perturbation:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != PERT_MAGIC:
        raise PerturbationFormatError(f"{path}: bad magic bytes {blob[:4]!r}")
    try:
        version, h, w, c, eps = struct.unpack_from("<HIIIf", blob, 4)
    except struct.error as e:
        raise PerturbationFormatError(f"{path}: truncated header") from e
    if version != PERT_VERSION:
        raise PerturbationFormatError(f"{path}: unsupported version {version}")
    need = h * w * c
    data = np.frombuffer(blob, dtype="<f4", offset=22)
    if data.shape[0] != need:
        raise PerturbationFormatError(
            f"{path}: expected {need} values, found {data.shape[0]}")
    t = torch.from_numpy(data.copy()).reshape(h, w, c).permute(2, 0, 1).contiguous()
    return Perturbation(t, float(eps))


# ---------------------------------------------------------------------------
# crafting
# ---------------------------------------------------------------------------

def _surrogate_logits(surrogate, x):
    return surrogate(x)


def craft(pood_images: torch.Tensor, pood_targets: torch.Tensor, pood_class_names,
          label_space: LabelSpace, backbone, surrogate,
          filter_cfg: FilterConfig, aug_params: AugmentParams,
          opt_cfg: OptimizerConfig, *,
          surrogate_loss: str = "bce", use_filter: bool = True,
          checkpoint_path: str | None = None, resume_from: str | None = None,
          step_callback=None) -> tuple[Perturbation, CraftRunState]:
    """Optimize a universal perturbation against the initial checkpoint.

    ``surrogate_loss`` selects per-class BCE (default) or plain targeted
    cross-entropy (the no-module ablation). A zero weight in
    ``opt_cfg.loss_weights`` disables the corresponding term entirely.
    """
    pood_labelset = {pood_class_names[int(t)] for t in torch.unique(pood_targets)}
    cil_labels = {label_space.target} | set(label_space.non_target)
    if pood_labelset & cil_labels:
        raise PerturbationError(
            f"POOD labels overlap CIL labels: {sorted(pood_labelset & cil_labels)}")
    if surrogate_loss not in ("bce", "ce"):
        raise ValueError(f"surrogate_loss must be 'bce' or 'ce', got {surrogate_loss!r}")
    w_clip, w_surr = (float(w) for w in opt_cfg.loss_weights)
    if w_clip == 0 and w_surr == 0:
        raise ValueError("at least one loss weight must be positive")

    surrogate.eval()
    for prm in surrogate.parameters():
        prm.requires_grad_(False)

    g = torch.Generator().manual_seed(opt_cfg.seed)

    # one-shot filter gate: the surrogate and the pool are fixed
    if use_filter:
        refs = select_reference_images(pood_images, pood_targets, pood_class_names,
                                       label_space.target, backbone,
                                       filter_cfg.reference_count)
        e_c = reference_embedding(refs, surrogate)
        mask = build_filter_mask(pood_images, e_c, filter_cfg, surrogate)
    else:
        mask = torch.ones(pood_images.shape[0], dtype=torch.bool)
    retained = torch.nonzero(mask).flatten()
    if retained.numel() == 0:
        raise PerturbationError("retained POOD pool is empty")

    # precompute text directions per POOD class
    class_ids = sorted(int(c) for c in torch.unique(pood_targets[retained]))
    need_clip = w_clip > 0
    if need_clip:
        e_t = backbone.encode_text_batch([label_space.target])[0]
        e_nts = backbone.encode_text_batch(label_space.non_target)
        directions = {}
        for cid in class_ids:
            e_p = backbone.encode_text_batch([pood_class_names[cid]])[0]
            directions[cid] = (direction_target(e_t, e_p),
                               direction_nontarget(list(e_nts), e_p))

    eps = float(opt_cfg.epsilon)
    if resume_from is not None:
        delta, opt, state, g, eps = _load_craft_checkpoint(resume_from, opt_cfg)
        state.checkpoint_path = checkpoint_path or state.checkpoint_path
    else:
        state = CraftRunState(checkpoint_path=checkpoint_path or "")
        img_shape = tuple(pood_images.shape[1:])
        pert = init_perturbation(img_shape, eps, g)
        delta = pert.tensor.clone().requires_grad_(True)
        opt = torch.optim.Adam([delta], lr=opt_cfg.learning_rate,
                               weight_decay=opt_cfg.weight_decay,
                               betas=(0.9, 0.999), eps=1e-8)

    start_epoch = state.epoch
    for epoch in range(start_epoch, opt_cfg.epochs):
        for cursor, cid in enumerate(class_ids):
            idx = retained[pood_targets[retained] == cid]
            perm = torch.randperm(idx.numel(), generator=g)
            idx = idx[perm]
            for off in range(0, idx.numel(), opt_cfg.batch_size):
                batch_idx = idx[off:off + opt_cfg.batch_size]
                x = pood_images[batch_idx]

                x_hat = augment(x, aug_params, g)
                x_pert = (x + delta.unsqueeze(0)).clamp(0.0, 1.0)
                x_prime = augment(x_pert, aug_params, g)

                if need_clip:
                    e_prime = backbone.encode_image_batch(x_prime)
                    with torch.no_grad():
                        e_clean = backbone.encode_image_batch(x)
                        e_clean_hat = backbone.encode_image_batch(x_hat)
                    d_adv = direction_adversarial(e_prime, e_clean, e_clean_hat)
                    d_t, d_nt = directions[cid]
                    sp = similarity_pair(DirectionBundle(d_t, d_nt, d_adv))
                    l_clip_t = loss_clip(sp).mean()
                else:
                    l_clip_t = torch.zeros((), dtype=delta.dtype)

                if w_surr > 0:
                    logits = _surrogate_logits(surrogate, x_prime)
                    if surrogate_loss == "bce":
                        l_surr_t = loss_surrogate(
                            logits, label_space.target_index,
                            label_space.non_target_indices).mean()
                    else:
                        tgt = torch.full((logits.shape[0],), label_space.target_index,
                                         dtype=torch.long)
                        l_surr_t = torch.nn.functional.cross_entropy(logits, tgt)
                else:
                    l_surr_t = torch.zeros((), dtype=delta.dtype)

                total = w_clip * l_clip_t + w_surr * l_surr_t
                if not torch.isfinite(total):
                    if checkpoint_path:
                        _save_craft_checkpoint(checkpoint_path, delta, opt, state, g, eps)
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch}, class {cid}: "
                        f"l_clip={float(l_clip_t)}, l_surr={float(l_surr_t)}")

                opt.zero_grad()
                total.backward()
                opt.step()
                with torch.no_grad():
                    delta.clamp_(-eps, eps)
                # budget invariant at tensor precision
                assert bool(delta.abs().max() <= torch.tensor(eps, dtype=delta.dtype))

                state.loss_history.append(LossBreakdown(
                    float(l_clip_t.detach()), float(l_surr_t.detach()),
                    float(total.detach()), w_clip, w_surr))
                state.class_cursor = cursor
                if step_callback is not None:
                    step_callback(state, delta.detach())
        state.epoch = epoch + 1
        if checkpoint_path:
            _save_craft_checkpoint(checkpoint_path, delta, opt, state, g, eps)

    return Perturbation(delta.detach().clone(), eps), state


CKPT_VERSION = 1


def _save_craft_checkpoint(path, delta, opt, state, g, eps):
    torch.save({
        "format_version": CKPT_VERSION,
        "delta": delta.detach().clone(),
        "epsilon": eps,
        "optimizer": opt.state_dict(),
        "epoch": state.epoch,
        "class_cursor": state.class_cursor,
        "loss_history": [(lb.l_clip, lb.l_surr, lb.total, lb.weight_clip, lb.weight_surr)
                         for lb in state.loss_history],
        "rng_state": g.get_state(),
    }, path)


def _load_craft_checkpoint(path, opt_cfg):
    try:
        blob = torch.load(path, weights_only=False)
    except Exception as e:
        raise PerturbationFormatError(f"{path}: unreadable checkpoint: {e}") from e
    if blob.get("format_version") != CKPT_VERSION:
        raise PerturbationFormatError(
            f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    delta = blob["delta"].clone().requires_grad_(True)
    opt = torch.optim.Adam([delta], lr=opt_cfg.learning_rate,
                           weight_decay=opt_cfg.weight_decay,
                           betas=(0.9, 0.999), eps=1e-8)
    opt.load_state_dict(blob["optimizer"])
    state = CraftRunState(
        epoch=blob["epoch"], class_cursor=blob["class_cursor"],
        loss_history=[LossBreakdown(*row) for row in blob["loss_history"]],
        checkpoint_path=path)
    g = torch.Generator()
    g.set_state(blob["rng_state"])
    return delta, opt, state, g, float(blob["epsilon"])


def checkpoint_save(path: str, perturbation: Perturbation, state: CraftRunState) -> None:
    """Standalone save of a finished (or aborted) run's state + perturbation."""
    torch.save({
        "format_version": CKPT_VERSION,
        "delta": perturbation.tensor.detach().clone(),
        "epsilon": perturbation.epsilon,
        "optimizer": None,
        "epoch": state.epoch,
        "class_cursor": state.class_cursor,
        "loss_history": [(lb.l_clip, lb.l_surr, lb.total, lb.weight_clip, lb.weight_surr)
                         for lb in state.loss_history],
        "rng_state": torch.Generator().get_state(),
    }, path)


def checkpoint_load(path: str) -> tuple[CraftRunState, Perturbation]:
    try:
        blob = torch.load(path, weights_only=False)
    except Exception as e:
        raise PerturbationFormatError(f"{path}: unreadable checkpoint: {e}") from e
    if blob.get("format_version") != CKPT_VERSION:
        raise PerturbationFormatError(
            f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    state = CraftRunState(
        epoch=blob["epoch"], class_cursor=blob["class_cursor"],
        loss_history=[LossBreakdown(*row) for row in blob["loss_history"]],
        checkpoint_path=path)
    return state, Perturbation(blob["delta"], float(blob["epsilon"]))
