"""Oracle tests for directional embeddings and the two crafting losses.

Frozen expected values are hand-derived from the closed forms:
loss_clip = -log(sim_pos / (sim_pos + sim_neg)) with sims = (cos + 1) / 2.
"""

import math

import pytest
import torch

from cilattack.semantics import (
    DegenerateDirectionError,
    DegenerateSimilarityError,
    DimensionMismatchError,
    DirectionBundle,
    SimilarityPair,
    direction_adversarial,
    direction_nontarget,
    direction_target,
    loss_clip,
    loss_surrogate,
    similarity_pair,
    total_loss,
)

LN2 = math.log(2.0)


def test_direction_target_elementwise():
    e_t = torch.tensor([1.0, 2.0, 3.0])
    e_p = torch.tensor([0.5, -1.0, 4.0])
    got = direction_target(e_t, e_p)
    assert torch.equal(got, torch.tensor([0.5, 3.0, -1.0]))


def test_direction_nontarget_is_mean_minus_pood():
    vecs = [torch.tensor([2.0, 0.0]), torch.tensor([0.0, 2.0])]
    e_p = torch.tensor([1.0, 1.0])
    got = direction_nontarget(vecs, e_p)
    assert torch.equal(got, torch.tensor([0.0, 0.0]))


def test_direction_nontarget_empty_set_rejected():
    with pytest.raises(ValueError):
        direction_nontarget([], torch.zeros(3))


def test_direction_adversarial_elementwise():
    a = torch.tensor([3.0, 3.0])
    b = torch.tensor([1.0, 0.0])
    c = torch.tensor([0.0, 1.0])
    assert torch.equal(direction_adversarial(a, b, c), torch.tensor([2.0, 2.0]))


def test_dimension_mismatch_raises():
    with pytest.raises(DimensionMismatchError):
        direction_target(torch.zeros(3), torch.zeros(4))
    with pytest.raises(DimensionMismatchError):
        DirectionBundle(torch.zeros(3), torch.zeros(3), torch.zeros(2, 4))


def test_similarity_pair_aligned_and_orthogonal():
    # d_adv aligned with d_t and orthogonal to d_nt:
    # cos_pos = 1 -> sim_pos = 1; cos_neg = 0 -> sim_neg = 0.5
    sp = similarity_pair(DirectionBundle(
        d_t=torch.tensor([1.0, 0.0]),
        d_nt=torch.tensor([0.0, 1.0]),
        d_adv=torch.tensor([2.0, 0.0])))
    assert abs(float(sp.sim_pos) - 1.0) < 1e-6
    assert abs(float(sp.sim_neg) - 0.5) < 1e-6
    # loss_clip = -log(1 / 1.5) = log(3/2)
    assert abs(float(loss_clip(sp)) - math.log(1.5)) < 1e-6


def test_similarity_pair_antipodal_gives_zero():
    sp = similarity_pair(DirectionBundle(
        d_t=torch.tensor([1.0, 0.0]),
        d_nt=torch.tensor([1.0, 0.0]),
        d_adv=torch.tensor([-1.0, 0.0])))
    assert abs(float(sp.sim_pos)) < 1e-6
    assert abs(float(sp.sim_neg)) < 1e-6


def test_similarity_pair_batched_shape():
    sp = similarity_pair(DirectionBundle(
        d_t=torch.tensor([1.0, 0.0]),
        d_nt=torch.tensor([0.0, 1.0]),
        d_adv=torch.eye(2) * 3.0))
    assert sp.sim_pos.shape == (2,)
    assert abs(float(sp.sim_pos[0]) - 1.0) < 1e-6
    assert abs(float(sp.sim_pos[1]) - 0.5) < 1e-6


def test_degenerate_direction_rejected():
    with pytest.raises(DegenerateDirectionError):
        similarity_pair(DirectionBundle(
            torch.zeros(3), torch.ones(3), torch.ones(3)))


def test_loss_clip_balanced_is_ln2():
    val = loss_clip(SimilarityPair(torch.tensor(0.4, dtype=torch.float64),
                                   torch.tensor(0.4, dtype=torch.float64)))
    assert abs(float(val) - LN2) < 1e-9


def test_loss_clip_pure_positive_is_zero():
    val = loss_clip(SimilarityPair(torch.tensor(0.8), torch.tensor(0.0)))
    assert abs(float(val)) < 1e-9


def test_loss_clip_frozen_value():
    # sim_pos = 0.75, sim_neg = 0.25 -> -log(0.75) = 0.287682...
    val = loss_clip(SimilarityPair(torch.tensor(0.75), torch.tensor(0.25)))
    assert abs(float(val) - 0.2876820724517809) < 1e-7


def test_loss_clip_degenerate_ratio_rejected():
    with pytest.raises(DegenerateSimilarityError):
        loss_clip(SimilarityPair(torch.tensor(0.0), torch.tensor(0.0)))


def test_loss_surrogate_zero_logits_frozen():
    # every sigmoid is 0.5: loss = 3 * ln 2 for 1 target + 2 non-targets
    logits = torch.zeros(3)
    val = loss_surrogate(logits, 0, [1, 2])
    assert abs(float(val) - 3 * LN2) < 1e-7


def test_loss_surrogate_perfect_prediction_near_zero():
    logits = torch.tensor([40.0, -40.0, -40.0])
    assert float(loss_surrogate(logits, 0, [1, 2])) < 1e-9


def test_loss_surrogate_matches_elementwise_bce_oracle():
    g = torch.Generator().manual_seed(7)
    logits = torch.randn(5, 6, generator=g)
    got = loss_surrogate(logits, 2, [0, 1, 3, 4])
    p = torch.sigmoid(logits)
    want = -torch.log(p[:, 2])
    for j in (0, 1, 3, 4):
        want = want - torch.log(1.0 - p[:, j])
    assert torch.allclose(got, want, atol=1e-5)


def test_loss_surrogate_index_validation():
    logits = torch.zeros(4)
    with pytest.raises(IndexError):
        loss_surrogate(logits, 9, [0])
    with pytest.raises(ValueError):
        loss_surrogate(logits, 1, [1, 2])


def test_total_loss_weighted_sum():
    lb = total_loss(0.5, 2.0, weights=(2.0, 0.25))
    assert abs(lb.total - (2.0 * 0.5 + 0.25 * 2.0)) < 1e-12
    assert lb.l_clip == 0.5 and lb.l_surr == 2.0


def test_total_loss_rejects_nonpositive_weights():
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, weights=(0.0, 1.0))
