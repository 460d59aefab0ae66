import pytest
import torch

from cilattack.backbones import Backbone, BackboneConfig
from cilattack.data import make_synthetic
from cilattack.filtering import (
    DegenerateReferenceError,
    EmptyPoolError,
    FilterConfig,
    ReferenceEmbedding,
    build_filter_mask,
    filter_score,
    filter_scores,
    reference_embedding,
    select_reference_images,
)


class _FlattenFeatures(torch.nn.Module):
    """Stub surrogate whose penultimate features are just the flattened pixels."""

    def features(self, x):
        return x.flatten(1)

    def forward(self, x):
        return self.features(x)


def _img_from(vec):
    # 1-channel 1xN "image" carrying an exact feature vector
    return torch.as_tensor(vec, dtype=torch.float32).view(1, 1, -1)


def test_filter_score_self_orthogonal_antipodal():
    model = _FlattenFeatures()
    ref_img = _img_from([1.0, 0.0, 0.0, 0.0])
    ref = reference_embedding(ref_img, model)
    assert filter_score(ref_img, ref, model) == pytest.approx(1.0, abs=1e-7)
    assert filter_score(_img_from([0.0, 1.0, 0.0, 0.0]), ref, model) == pytest.approx(0.5, abs=1e-7)
    assert filter_score(_img_from([-1.0, 0.0, 0.0, 0.0]), ref, model) == pytest.approx(0.0, abs=1e-7)


def test_reference_embedding_is_feature_mean():
    model = _FlattenFeatures()
    imgs = torch.stack([_img_from([2.0, 0.0]), _img_from([0.0, 4.0])])
    ref = reference_embedding(imgs, model)
    assert torch.equal(ref.vector, torch.tensor([1.0, 2.0]))
    assert ref.source_count == 2


def test_reference_embedding_empty_rejected():
    with pytest.raises(ValueError):
        reference_embedding(torch.zeros(0, 1, 1, 4), _FlattenFeatures())


def test_degenerate_reference_rejected():
    ref = ReferenceEmbedding(torch.zeros(4), 1)
    with pytest.raises(DegenerateReferenceError):
        filter_scores(torch.rand(2, 1, 1, 4), ref, _FlattenFeatures())


def test_scores_bounded():
    model = _FlattenFeatures()
    g = torch.Generator().manual_seed(0)
    pool = torch.randn(64, 1, 1, 8, generator=g)
    ref = reference_embedding(pool[:4], model)
    s = filter_scores(pool, ref, model)
    assert float(s.min()) >= 0.0 and float(s.max()) <= 1.0


def test_retained_set_monotone_in_sigma():
    model = _FlattenFeatures()
    g = torch.Generator().manual_seed(1)
    pool = torch.randn(200, 1, 1, 8, generator=g)
    ref = reference_embedding(pool[:8], model)
    sizes = []
    for sigma in (0.3, 0.5, 0.7, 0.9):
        mask = build_filter_mask(pool, ref, FilterConfig(sigma=sigma), model)
        sizes.append(int(mask.sum()))
    assert sizes == sorted(sizes)


def test_retain_rule_is_leq_sigma():
    model = _FlattenFeatures()
    ref = reference_embedding(_img_from([1.0, 0.0]), model)
    pool = torch.stack([_img_from([1.0, 0.0]),      # score 1.0 -> dropped
                        _img_from([0.0, 1.0]),      # score 0.5 -> retained (== sigma)
                        _img_from([-1.0, 0.0])])    # score 0.0 -> retained
    mask = build_filter_mask(pool, ref, FilterConfig(sigma=0.5), model)
    assert mask.tolist() == [False, True, True]


def test_empty_pool_error_reports_quantiles():
    model = _FlattenFeatures()
    ref = reference_embedding(_img_from([1.0, 0.0]), model)
    pool = _img_from([1.0, 0.0]).unsqueeze(0).repeat(3, 1, 1, 1)
    with pytest.raises(EmptyPoolError) as e:
        build_filter_mask(pool, ref, FilterConfig(sigma=0.4), model)
    assert "quantiles" in str(e.value)


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(sigma=0.0)
    with pytest.raises(ValueError):
        FilterConfig(sigma=1.0)
    with pytest.raises(ValueError):
        FilterConfig(reference_count=0)


def test_select_reference_images_count_and_determinism():
    pood = make_synthetic(["pa", "pb", "pc"], 6, hw=16, seed=3)
    bb = Backbone(BackboneConfig(provider="mock", embed_dim=32))
    refs1 = select_reference_images(pood.images, pood.targets, pood.class_names,
                                    "target", bb, 8)
    refs2 = select_reference_images(pood.images, pood.targets, pood.class_names,
                                    "target", bb, 8)
    assert refs1.shape[0] == 8
    assert torch.equal(refs1, refs2)
