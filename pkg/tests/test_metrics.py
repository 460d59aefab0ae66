import pytest
import torch

from cilattack.cil import TaskSchedule
from cilattack.data import ImageSet
from cilattack.metrics import (
    AttackReport,
    MetricsError,
    asr,
    emit_report,
    non_target_test_images,
    parse_curve,
    parse_report,
    sasr,
)
from cilattack.perturb import Perturbation


class _ScriptedModel(torch.nn.Module):
    """Predicts the label scripted for each example's index.

    Example i encodes its index in pixel [0,0,0] as i / 255, so outcome
    matrices can be written down directly in tests.
    """

    def __init__(self, predictions):
        super().__init__()
        self.predictions = list(predictions)
        self.n = max(self.predictions) + 2

    def forward(self, x):
        idx = (x[:, 0, 0, 0] * 255.0).round().long()
        out = torch.zeros(x.shape[0], self.n)
        for row, i in enumerate(idx.tolist()):
            out[row, self.predictions[i]] = 1.0
        return out


def _indexed_images(n):
    x = torch.zeros(n, 3, 2, 2)
    x[:, 0, 0, 0] = torch.arange(n) / 255.0
    return x


_NOOP = Perturbation(torch.zeros(3, 2, 2), 0.5)


def test_asr_fraction_oracle():
    model = _ScriptedModel([7, 0, 7, 7])
    assert asr(model, _indexed_images(4), _NOOP, 7) == pytest.approx(0.75)


def test_asr_empty_test_set():
    with pytest.raises(MetricsError):
        asr(_ScriptedModel([0]), torch.zeros(0, 3, 2, 2), _NOOP, 0)


def test_asr_permutation_invariant():
    model = _ScriptedModel([1, 0, 1, 0, 1, 0])
    x = _indexed_images(6)
    perm = torch.randperm(6, generator=torch.Generator().manual_seed(0))
    assert asr(model, x, _NOOP, 1) == asr(model, x[perm], _NOOP, 1)


def test_sasr_two_by_two_outcome():
    # outcomes [[hit, miss], [hit, hit]] -> 3/4
    models = [_ScriptedModel([9, 0]), _ScriptedModel([9, 9])]
    val, per = sasr(models, _indexed_images(2), _NOOP, 9)
    assert val == pytest.approx(0.75)
    assert per == [0.5, 1.0]


def test_sasr_all_miss_is_zero():
    models = [_ScriptedModel([0, 0]), _ScriptedModel([1, 1])]
    val, _ = sasr(models, _indexed_images(2), _NOOP, 5)
    assert val == 0.0


def test_sasr_matches_double_loop_oracle():
    g = torch.Generator().manual_seed(13)
    y_t = 3
    outcome = torch.randint(0, 5, (5, 40), generator=g)   # 5 models x 40 examples
    models = [_ScriptedModel(row.tolist()) for row in outcome]
    x = _indexed_images(40)
    val, per = sasr(models, x, _NOOP, y_t)
    hits = 0
    for i in range(5):
        for j in range(40):
            hits += int(int(outcome[i, j]) == y_t)
    assert val == pytest.approx(hits / (5 * 40), abs=1e-12)
    assert val == pytest.approx(sum(per) / len(per), abs=1e-12)


def test_sasr_exclude_initial():
    models = [_ScriptedModel([9, 9]), _ScriptedModel([0, 0])]
    val, per = sasr(models, _indexed_images(2), _NOOP, 9, exclude_initial=True)
    assert val == 0.0
    assert per == [1.0, 0.0]   # per-task list still covers every checkpoint


def test_sasr_empty_series():
    with pytest.raises(MetricsError):
        sasr([], _indexed_images(2), _NOOP, 0)


def test_non_target_test_images_excludes_target():
    images = torch.rand(6, 3, 2, 2)
    ds = ImageSet(images, torch.tensor([0, 1, 2, 1, 1, 0]), ["a", "b", "c"])
    out = non_target_test_images(ds, 1)
    assert out.shape[0] == 3


# -- report files ------------------------------------------------------------

def _report():
    return AttackReport(
        target_class="wolf", asr_per_task=[0.9, 0.5, 0.25],
        sasr=0.55, clean_acc_per_task=[0.97, 0.93, 0.88],
        config_digest="abcd1234", seed=1, learned_classes=[10, 20, 30],
        method="replay", extras={"ablation": "none", "epsilon": "0.125490"})


def test_report_requires_matching_lengths():
    with pytest.raises(MetricsError):
        AttackReport("t", [0.5], 0.5, [0.9, 0.8], "d", 0)


def test_emit_parse_round_trip(tmp_path):
    r = _report()
    paths = emit_report(r, str(tmp_path))
    back = parse_report(paths["report"])
    assert back.target_class == r.target_class
    assert back.sasr == pytest.approx(r.sasr, abs=1e-6)
    assert back.asr_per_task == pytest.approx(r.asr_per_task, abs=1e-6)
    assert back.clean_acc_per_task == pytest.approx(r.clean_acc_per_task, abs=1e-6)
    assert back.learned_classes == r.learned_classes
    assert back.seed == r.seed and back.method == "replay"
    assert back.extras["ablation"] == "none"


def test_reemit_is_byte_identical(tmp_path):
    r = _report()
    p1 = emit_report(r, str(tmp_path / "a"))
    p2 = emit_report(parse_report(p1["report"]), str(tmp_path / "b"))
    assert open(p1["report"], "rb").read() == open(p2["report"], "rb").read()
    assert open(p1["curve"], "rb").read() == open(p2["curve"], "rb").read()


def test_curve_file_shape_and_header(tmp_path):
    paths = emit_report(_report(), str(tmp_path))
    lines = open(paths["curve"]).read().splitlines()
    assert lines[0] == "learned_classes,asr,clean_acc"
    assert len(lines) == 4    # header + one row per task
    rows = parse_curve(paths["curve"])
    assert rows[0][0] == 10
    assert rows[0][1] == pytest.approx(0.9, abs=1e-6)


def test_parse_curve_rejects_bad_header(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("wrong,header\n1,2\n")
    with pytest.raises(MetricsError):
        parse_curve(str(path))


def test_plot_emission(tmp_path):
    paths = emit_report(_report(), str(tmp_path), plot=True)
    assert "plot" in paths
    import os
    assert os.path.getsize(paths["plot"]) > 0
