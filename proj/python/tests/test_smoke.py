import json
import math

import numpy as np
import pytest

import patchforge as pf


def test_parameter_counts():
    net = pf.Network.multiclass(0)
    assert net.param_count == 295107
    assert net.branch_param_count == 143328
    assert net.class_names == ["lesion", "normal-interior", "normal-boundary"]
    assert pf.Network.binary(0).class_names == ["lesion", "non-lesion"]


def test_forward_is_a_distribution():
    net = pf.Network.multiclass(3)
    rng = np.random.default_rng(0)
    p = net.forward(rng.normal(size=(32, 32, 1)), rng.normal(size=(32, 32, 1)))
    assert p.shape == (3,)
    assert abs(p.sum() - 1.0) < 1e-6
    with pytest.raises(pf.DimensionError):
        net.forward(np.zeros((31, 32, 1)), np.zeros((32, 32, 1)))


def test_conv2d_against_numpy():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 7, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    got = pf.conv2d(x, w, b, pad=1, stride=1)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    want = np.zeros((6, 7, 4))
    for i in range(6):
        for j in range(7):
            want[i, j] = np.tensordot(xp[i:i + 3, j:j + 3, :], w, axes=3) + b
    assert np.abs(got - want).max() < 1e-10


def test_softmax_and_fusion():
    p = pf.softmax(np.array([1.0, 2.0, 3.0]))
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(p, e / e.sum(), atol=1e-12)
    assert np.allclose(pf.softmax(np.array([1.0, 2.0, 3.0]) + 500.0), p, atol=1e-12)
    lesion, other = pf.fuse_non_lesion([0.6, 0.3, 0.1])
    assert lesion == pytest.approx(0.6) and other == pytest.approx(0.4)
    with pytest.raises(pf.DomainError):
        pf.fuse_non_lesion([0.5, 0.6, 0.1])


def test_learning_rate_schedule():
    assert pf.lr_at_epoch(30) == 1e-4
    assert pf.lr_at_epoch(31) == 1e-5
    assert pf.lr_at_epoch(50) == 1e-6


def test_connected_components():
    m = np.zeros((5, 6), dtype=np.uint8)
    m[0, 0] = m[1, 1] = 1  # diagonal neighbours join
    m[3:5, 4:6] = 1
    labels = pf.connected_components(m)
    assert labels.max() == 2
    assert labels[0, 0] == labels[1, 1] == 1
    assert (labels[3:5, 4:6] == 2).all()


def test_phantom_case_and_patches():
    case = pf.generate_case(5, overrides={"phantom.width": "96", "phantom.height": "96",
                                          "phantom.max_lesions": "2", "phantom.max_lesion_radius": "8"})
    again = pf.generate_case(5, overrides={"phantom.width": "96", "phantom.height": "96",
                                           "phantom.max_lesions": "2", "phantom.max_lesion_radius": "8"})
    assert case["image"].shape == (96, 96)
    assert np.array_equal(case["image"], again["image"])
    assert case["liver"].any()
    for lesion in case["lesions"]:
        assert not (lesion & ~case["liver"]).any()
    ys, xs = np.nonzero(case["lesions"][0])
    assert pf.label_pixel(case, int(xs[0]), int(ys[0])) == "lesion"
    small, large = pf.extract_patch_pair(case, 48, 48, 100.0)
    assert small.shape == (32, 32, 1) and large.shape == (32, 32, 1)

    net = pf.Network.multiclass(1)
    prob, evaluated = net.probability_map(case, stride=8)
    assert prob.shape == (96, 96)
    assert np.array_equal(evaluated, case["liver"])
    assert ((prob >= 0) & (prob <= 1)).all()


def test_config_round_trip_and_errors():
    text = pf.effective_config("seed = 4\n[train]\nepochs = 3\n", {"detect.threshold": "0.25"})
    assert pf.effective_config(text) == text
    assert "epochs = 3" in text and "threshold = 0.25" in text
    with pytest.raises(pf.ConfigError):
        pf.effective_config("[train]\nepocs = 3\n")
    keys = dict(pf.config_keys())
    assert "train.base_lr" in keys and "eval.cutoff_mm" in keys


def test_tiny_cross_validation(tmp_path):
    overrides = {"phantom.cases": "4", "phantom.patients": "2", "phantom.width": "80", "phantom.height": "80",
                 "phantom.max_lesions": "2", "phantom.max_lesion_radius": "7", "extract.target_per_class": "20",
                 "train.epochs": "1", "train.batch_size": "8", "detect.stride": "6", "eval.folds": "2"}
    manifest = pf.generate_dataset(str(tmp_path / "ds"), overrides=overrides)
    assert len(pf.load_cases(str(manifest))) == 4
    lines = []
    result = pf.cross_validate(str(manifest), overrides=overrides, log=lines.append)
    assert result["report"]["overall"]["cases"] == 4
    assert lines
    again = pf.cross_validate(str(manifest), overrides=dict(overrides, workers="2"))
    assert json.dumps(again["report"], sort_keys=True) == json.dumps(result["report"], sort_keys=True)


def test_missing_files_raise_io_errors(tmp_path):
    with pytest.raises(pf.IoError):
        pf.Network.load(str(tmp_path / "missing.pfck"))
    with pytest.raises(pf.IoError):
        pf.load_cases(str(tmp_path / "missing.json"))


def test_equivalent_diameter():
    assert pf.equivalent_diameter_mm(100) == pytest.approx(2 * math.sqrt(100 / math.pi) * 0.71)
