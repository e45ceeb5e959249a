import pathlib
import sys

import numpy as np
import pytest

ROOT = pathlib.Path(__file__).resolve().parents[2] / "production"
sys.path.insert(0, str(ROOT))
import autodiff as ad  # type: ignore  # noqa: E402
import models  # type: ignore  # noqa: E402
from autodiff import Tensor  # type: ignore  # noqa: E402
from models import Ensemble, ModelSpec  # type: ignore  # noqa: E402

SMALL_FCN = ModelSpec(kind="fcn", channels=2, filters=4)
SMALL_RESNET = ModelSpec(kind="resnet", channels=2, filters=4, resnet_blocks=3)


@pytest.fixture
def batch(rng):
    return rng.normal(size=(3, 192, 2))


def test_fcn_feature_lengths(batch):
    model = models.build_fcn(SMALL_FCN, seed=1)
    h = Tensor(batch)
    lengths = []
    for idx in range(1, 5):
        h = ad.conv1d(h, model.params[f"conv{idx}.kernel"], model.params[f"conv{idx}.bias"])
        h = ad.max_pool(ad.elu(h))
        lengths.append(h.shape[1])
    assert lengths == [96, 48, 24, 12]
    assert model._fcn_features(Tensor(batch)).shape == (3, 4)


def test_fcn_zero_input_is_uniform():
    model = models.build_fcn(SMALL_FCN, seed=2)
    probs = models.predict(model, np.zeros((2, 192, 2)))
    np.testing.assert_allclose(probs, 0.5, atol=1e-12)


@pytest.mark.parametrize(
    "spec",
    [
        SMALL_FCN,
        ModelSpec(kind="fcn", channels=15, filters=128),
        SMALL_RESNET,
        ModelSpec(kind="resnet", channels=8, filters=128, num_classes=3),
        ModelSpec(kind="lstm_final", channels=3),
        ModelSpec(kind="lstm_joint", channels=3),
    ],
)
def test_parameter_count_matches_closed_form(spec):
    model = models.build_model(spec)
    assert models.parameter_count(model) == models.expected_parameter_count(spec)


def test_default_fcn_parameter_count():
    spec = ModelSpec(kind="fcn", channels=8)
    expected = 2 * 8 + (8 * 8 * 128 + 128) + (5 * 128 * 128 + 128) * 2 + (3 * 128 * 128 + 128) + (128 * 2 + 2)
    assert models.expected_parameter_count(spec) == expected


def _zero_residual_branches(model):
    for name, param in model.params.items():
        if ".conv_a." in name or ".conv_b." in name:
            param.data = np.zeros_like(param.data)


def test_resnet_zero_branches_reduce_to_skip_path(batch):
    model = models.build_resnet(SMALL_RESNET, seed=3)
    _zero_residual_branches(model)
    p = model.params
    h = ad.input_batchnorm(Tensor(batch), p["bn.gamma"], p["bn.beta"], model.bn_state, "eval")
    h = ad.conv1d(h, p["stem.kernel"], p["stem.bias"])
    for block in (2, 3):
        h = ad.conv1d(ad.max_pool(h), p[f"block{block}.proj.kernel"], p[f"block{block}.proj.bias"])
    expected = ad.dense(ad.global_average_pool(ad.elu(h)), p["head.weight"], p["head.bias"])
    np.testing.assert_array_equal(model.forward(batch).data, expected.data)


def test_resnet_stem_receives_gradient_with_zero_branches(batch):
    model = models.build_resnet(SMALL_RESNET, seed=4)
    _zero_residual_branches(model)
    ad.crossentropy_loss(model.forward(batch), np.array([0, 1, 0])).backward()
    assert np.linalg.norm(model.params["stem.kernel"].grad) > 0


def test_resnet_output_rows_on_simplex(batch):
    probs = models.predict(models.build_resnet(SMALL_RESNET), batch)
    assert probs.shape == (3, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_lstm_zero_input_is_uniform():
    model = models.build_lstm(ModelSpec(kind="lstm_final", channels=2), joint=False, seed=5)
    probs = models.predict(model, np.zeros((1, 192, 2)))
    np.testing.assert_allclose(probs, 0.5, atol=1e-12)


def test_lstm_joint_predicts_every_next_step(rng):
    spec = ModelSpec(kind="lstm_joint", channels=2, input_domain="frequency")
    model = models.build_lstm(spec, joint=True)
    logits, prediction = model.forward(rng.normal(size=(1, 129, 2)), return_prediction=True)
    assert logits.shape == (1, 2)
    assert prediction.shape == (1, 128, 2)
    assert model.params["lstm.b"].data[256:512].tolist() == [1.0] * 256


def test_time_and_frequency_share_topology():
    time_model = models.build_fcn(SMALL_FCN)
    freq_spec = ModelSpec(kind="fcn", input_domain="frequency", channels=2, filters=4)
    freq_model = models.build_fcn(freq_spec)
    assert freq_spec.input_length == 129 and SMALL_FCN.input_length == 192
    assert {n: p.shape for n, p in time_model.params.items()} == {n: p.shape for n, p in freq_model.params.items()}


def test_predict_is_deterministic_and_shape_checked(batch):
    model = models.build_fcn(SMALL_FCN, seed=6)
    np.testing.assert_array_equal(models.predict(model, batch), models.predict(model, batch))
    with pytest.raises(models.ShapeError):
        models.predict(model, batch[:, :100])


def test_predict_matches_train_mode_with_matching_stats(batch):
    spec = ModelSpec(kind="fcn", channels=2, filters=4, dropout=0.0)
    model = models.build_fcn(spec, seed=7)
    model.bn_state.running_mean = batch.mean(axis=(0, 1))
    model.bn_state.running_var = batch.var(axis=(0, 1))
    state_before = (model.bn_state.running_mean.copy(), model.bn_state.running_var.copy())
    train_logits = model.forward(batch, mode="train").data
    model.bn_state.running_mean, model.bn_state.running_var = state_before
    np.testing.assert_allclose(model.forward(batch, mode="eval").data, train_logits, atol=1e-12)


def test_ensemble_of_identical_members(batch):
    member = models.build_fcn(SMALL_FCN, seed=8)
    single = models.predict(member, batch)
    averaged = models.ensemble_predict(Ensemble([member] * 5), batch)
    np.testing.assert_allclose(averaged, single, atol=1e-15)
    assert np.array_equal(averaged.argmax(axis=1), single.argmax(axis=1))


def test_ensemble_averages_member_scores(monkeypatch, batch):
    members = [models.build_fcn(SMALL_FCN, seed=s) for s in (0, 1)]
    scores = {0: np.array([[0.8, 0.2]]), 1: np.array([[0.6, 0.4]])}
    monkeypatch.setattr(models, "predict", lambda model, data: scores[model.init_seed])
    np.testing.assert_allclose(models.ensemble_predict(members, batch[:1]), [[0.7, 0.3]])


def test_ensemble_rejects_mixed_specs():
    with pytest.raises(models.ConfigError):
        Ensemble([models.build_fcn(SMALL_FCN), models.build_resnet(SMALL_RESNET)])
    with pytest.raises(models.ConfigError):
        Ensemble([])


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "transformer"},
        {"kind": "fcn", "kernel_sizes": (0, 5, 5, 3)},
        {"kind": "fcn", "num_classes": 4},
        {"kind": "fcn", "activation": "tanh"},
        {"kind": "fcn", "kernel_sizes": (3,) * 9},
        {"kind": "resnet", "block_kernels": (3,)},
        {"kind": "lstm_final", "hidden": 64},
        {"kind": "fcn", "dropout": 1.0},
    ],
)
def test_invalid_specs(kwargs):
    with pytest.raises(models.ConfigError):
        models.build_model(ModelSpec(**kwargs))


def test_builder_kind_mismatch():
    with pytest.raises(models.ConfigError):
        models.build_resnet(SMALL_FCN)
    with pytest.raises(models.ConfigError):
        models.build_lstm(ModelSpec(kind="lstm_final"), joint=True)


def test_save_and_load_model(tmp_path, batch):
    model = models.build_fcn(SMALL_FCN, seed=9)
    model.bn_state.running_mean = np.array([0.1, -0.2])
    model.training_log = {"loss": [0.7, 0.5]}
    ckpt, sidecar = models.save_model(model, tmp_path / "fold0" / "member0")
    assert ckpt.suffix == ".ckpt" and sidecar.suffix == ".spec"
    assert "spec.kernel_sizes = 8,5,5,3" in sidecar.read_text()
    loaded = models.load_model(tmp_path / "fold0" / "member0")
    assert loaded.spec == model.spec
    assert loaded.training_log == {"loss": [0.7, 0.5]}
    np.testing.assert_array_equal(models.predict(loaded, batch), models.predict(model, batch))


def test_load_model_errors(tmp_path):
    with pytest.raises(models.ModelError):
        models.load_model(tmp_path / "missing")
    models.save_model(models.build_fcn(SMALL_FCN), tmp_path / "m")
    sidecar = tmp_path / "m.spec"
    sidecar.write_text(sidecar.read_text().replace("spec.filters = 4", "spec.filters = 6"))
    with pytest.raises(models.ModelError):
        models.load_model(tmp_path / "m")
    sidecar.write_text(sidecar.read_text().replace("spec.kind = fcn", "spec.kind = resnet"))
    with pytest.raises(models.ModelError):
        models.load_model(tmp_path / "m")
