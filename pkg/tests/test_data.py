import pytest
import torch

from cilattack.data import (
    DatasetError,
    ImageSet,
    LabelSpace,
    anchor_image,
    class_template,
    folder_class_names,
    load_image_folder,
    make_synthetic,
    make_synthetic_pair,
    save_image_folder,
)


def test_template_deterministic_and_normalized():
    a = class_template("wolf")
    b = class_template("wolf")
    assert torch.equal(a, b)
    assert a.shape == (3, 32, 32)
    assert abs(float(a.abs().max()) - 1.0) < 1e-6
    assert not torch.equal(a, class_template("fox"))


def test_anchor_image_is_noise_free_template():
    a = anchor_image("wolf")
    want = torch.clamp(0.5 + 0.35 * class_template("wolf"), 0.0, 1.0)
    assert torch.equal(a, want)


def test_synthetic_shapes_range_and_determinism():
    ds = make_synthetic(["a", "b"], 5, hw=16, seed=3)
    assert ds.images.shape == (10, 3, 16, 16)
    assert float(ds.images.min()) >= 0.0 and float(ds.images.max()) <= 1.0
    assert ds.targets.tolist() == [0] * 5 + [1] * 5
    again = make_synthetic(["a", "b"], 5, hw=16, seed=3)
    assert torch.equal(ds.images, again.images)


def test_synthetic_pair_train_test_differ():
    pair = make_synthetic_pair(["a", "b"], 4, 4, hw=16, seed=0)
    assert not torch.equal(pair.train.images, pair.test.images)


def test_imageset_select_classes_and_subset():
    ds = make_synthetic(["a", "b", "c"], 3, hw=8, seed=0)
    sub = ds.select_classes([0, 2])
    assert sorted(set(sub.targets.tolist())) == [0, 2]
    assert len(sub) == 6
    assert ds.name_of(1) == "b"


def test_label_space_validation():
    with pytest.raises(ValueError):
        LabelSpace("t", ["t", "u"], ["p"], 0)
    with pytest.raises(ValueError):
        LabelSpace("t", ["u"], ["u"], 0)
    ls = LabelSpace("t", ["u"], ["p"], 0, [1])
    assert ls.target_index == 0


def test_folder_round_trip_within_quantization(tmp_path):
    pair = make_synthetic_pair(["ant", "bee"], 3, 2, hw=8, seed=1)
    root = str(tmp_path / "ds")
    save_image_folder(root, pair)
    back = load_image_folder(root)
    assert back.train.class_names == ["ant", "bee"]
    assert back.train.targets.tolist() == pair.train.targets.tolist()
    # PNG stores 8-bit pixels: loaded values are round(x*255)/255
    want = (pair.train.images * 255.0).round() / 255.0
    assert torch.allclose(back.train.images, want, atol=1e-6)


def test_folder_class_names_order(tmp_path):
    pair = make_synthetic_pair(["zebra", "ant"], 2, 1, hw=8, seed=0)
    root = str(tmp_path / "ds")
    save_image_folder(root, pair)
    assert folder_class_names(root) == ["zebra", "ant"]


def test_missing_index_rejected(tmp_path):
    with pytest.raises(DatasetError):
        load_image_folder(str(tmp_path / "nope"))
    with pytest.raises(DatasetError):
        folder_class_names(str(tmp_path / "nope"))


def test_malformed_index_line_rejected(tmp_path):
    root = tmp_path / "ds"
    root.mkdir()
    (root / "index.txt").write_text("class a 0\nbogus line here extra\n")
    with pytest.raises(DatasetError):
        load_image_folder(str(root))


def test_noncontiguous_class_ids_rejected(tmp_path):
    root = tmp_path / "ds"
    root.mkdir()
    (root / "index.txt").write_text("class a 0\nclass b 5\n")
    with pytest.raises(DatasetError):
        load_image_folder(str(root))
