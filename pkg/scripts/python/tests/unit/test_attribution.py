import pathlib
import re
import sys

import numpy as np
import pandas as pd
import pytest

ROOT = pathlib.Path(__file__).resolve().parents[2] / "production"
sys.path.insert(0, str(ROOT))
import attribution as at  # type: ignore  # noqa: E402
import autodiff as ad  # type: ignore  # noqa: E402
import models  # type: ignore  # noqa: E402
from attribution import AttributionMap, IgConfig  # type: ignore  # noqa: E402
from autodiff import AdamConfig, Tensor  # type: ignore  # noqa: E402
from models import ModelSpec  # type: ignore  # noqa: E402

LENGTH, CHANNELS = 12, 2


def linear_model(weight):
    """Zero-bias linear scorer over the flattened window."""
    bias = Tensor(np.zeros(weight.shape[1]))

    def score(x):
        return ad.dense(x.reshape(x.shape[0], -1), Tensor(weight), bias)

    return score


def relu_net(w1, w2):
    b1, b2 = Tensor(np.zeros(w1.shape[1])), Tensor(np.zeros(w2.shape[1]))

    def score(x):
        hidden = ad.relu(ad.dense(x.reshape(x.shape[0], -1), Tensor(w1), b1))
        return ad.dense(hidden, Tensor(w2), b2)

    return score


@pytest.fixture
def window(rng):
    return rng.normal(size=(LENGTH, CHANNELS))


@pytest.fixture
def small_fcn():
    return models.build_fcn(ModelSpec(kind="fcn", channels=2, filters=4), seed=11)


def test_linear_model_methods_agree(rng, window):
    weight = rng.normal(size=(LENGTH * CHANNELS, 2))
    model = linear_model(weight)
    expected = weight[:, 1].reshape(LENGTH, CHANNELS) * window
    gxi = at.grad_x_input(model, window, 1)
    ig = at.integrated_gradients(model, window, 1, IgConfig(steps=8))
    lrp = at.epsilon_lrp(model, window, 1, eps=0.0)
    for amap in (gxi, ig, lrp):
        np.testing.assert_allclose(amap.scores, expected, atol=1e-10)
    assert (gxi.method, ig.method, lrp.method) == at.METHODS
    np.testing.assert_allclose(at.epsilon_lrp(model, window, 1).scores, expected, rtol=1e-3, atol=1e-8)


def test_lrp_equals_grad_x_input_for_zero_bias_relu_net(rng, window):
    model = relu_net(rng.normal(size=(LENGTH * CHANNELS, 16)), rng.normal(size=(16, 2)))
    gxi = at.grad_x_input(model, window, 0)
    lrp = at.epsilon_lrp(model, window, 0)
    np.testing.assert_allclose(lrp.scores, gxi.scores, rtol=1e-4, atol=1e-6)
    logit = model(Tensor(window[None])).data[0, 0]
    assert lrp.scores.sum() == pytest.approx(logit, rel=1e-4)


def test_integrated_gradients_completeness(small_fcn, rng):
    window = rng.normal(size=(192, 2))
    logits = small_fcn.forward(window[None]).data[0]
    baseline_logits = small_fcn.forward(np.zeros((1, 192, 2))).data[0]
    ig = at.integrated_gradients(small_fcn, window, 1)
    assert ig.scores.sum() == pytest.approx(logits[1] - baseline_logits[1], rel=1e-2, abs=1e-4)


def briefly_trained_fcn(rng):
    model = models.build_fcn(ModelSpec(kind="fcn", channels=2, filters=4), seed=5)
    x = rng.normal(size=(16, 192, 2))
    y = (x[:, :, 0].mean(axis=1) > 0).astype(np.int64)
    for _ in range(5):
        model.zero_grad()
        ad.crossentropy_loss(model.forward(x, mode="train", rng=np.random.default_rng(0)), y).backward()
        ad.adam_step(model.parameters(), AdamConfig(lr=0.01))
    return model


def test_integrated_gradients_completeness_after_training(rng):
    model = briefly_trained_fcn(rng)
    assert model.bn_state.running_mean.any()
    window = rng.normal(size=(192, 2))
    logits = model.forward(window[None]).data[0]
    baseline_logits = model.forward(np.zeros((1, 192, 2))).data[0]
    for target in (0, 1):
        ig = at.integrated_gradients(model, window, target)
        assert ig.scores.sum() == pytest.approx(logits[target] - baseline_logits[target], rel=1e-2, abs=1e-4)


def test_integrated_gradients_converges_in_steps(small_fcn, rng):
    window = 2.0 * rng.normal(size=(192, 2))
    coarse = at.integrated_gradients(small_fcn, window, 1, IgConfig(steps=256)).scores.sum()
    fine = at.integrated_gradients(small_fcn, window, 1, IgConfig(steps=512)).scores.sum()
    assert abs(fine - coarse) < 0.005 * abs(fine) + 1e-6


def test_integrated_gradients_with_baseline(rng, window):
    weight = rng.normal(size=(LENGTH * CHANNELS, 2))
    baseline = np.full_like(window, 0.5)
    ig = at.integrated_gradients(linear_model(weight), window, 0, IgConfig(steps=4, baseline=baseline))
    np.testing.assert_allclose(ig.scores, weight[:, 0].reshape(LENGTH, CHANNELS) * (window - baseline), atol=1e-10)
    with pytest.raises(at.ShapeError):
        at.integrated_gradients(linear_model(weight), window, 0, IgConfig(baseline=np.zeros(3)))
    with pytest.raises(ValueError):
        IgConfig(steps=1)


def test_lrp_runs_through_fcn_layers(small_fcn, rng):
    window = rng.normal(size=(192, 2))
    amap = at.attribute(small_fcn, window, 0, method=at.EPSILON_LRP)
    assert amap.scores.shape == (192, 2)
    assert np.all(np.isfinite(amap.scores))
    assert np.any(amap.scores != 0)


def test_lrp_rank_agrees_with_grad_x_input_on_elu_fcn(small_fcn, rng):
    assert small_fcn.spec.activation == "elu"
    for _ in range(5):
        window = rng.normal(size=(192, 2))
        gxi = at.grad_x_input(small_fcn, window, 1)
        lrp = at.epsilon_lrp(small_fcn, window, 1)
        assert at.method_agreement(gxi, lrp) > 0.9


def test_lrp_rejects_unknown_layers(rng, window):
    weight = rng.normal(size=(LENGTH * CHANNELS, 2))

    def with_softmax(x):
        return ad.softmax(linear_model(weight)(x))

    with pytest.raises(at.UnsupportedLayerError):
        at.epsilon_lrp(with_softmax, window, 0)


def test_model_window_shape_is_checked(small_fcn, window):
    with pytest.raises(at.ShapeError):
        at.grad_x_input(small_fcn, window, 0)
    with pytest.raises(at.ShapeError):
        at.grad_x_input(small_fcn, np.zeros(192), 0)


def test_invalid_target_and_method(small_fcn, rng):
    window = rng.normal(size=(192, 2))
    with pytest.raises(at.ShapeError):
        at.grad_x_input(small_fcn, window, 2)
    with pytest.raises(at.AttributionError):
        at.attribute(small_fcn, window, 0, method="occlusion")
    with pytest.raises(at.AttributionError):
        at.attribute(object(), window, 0)


def test_attribute_dispatch(small_fcn, rng):
    window = rng.normal(size=(192, 2))
    direct = at.integrated_gradients(small_fcn, window, 1, IgConfig(steps=4))
    routed = at.attribute(small_fcn, window, 1, method=at.INTEGRATED_GRADIENTS, ig_config=IgConfig(steps=4))
    np.testing.assert_array_equal(direct.scores, routed.scores)


def test_normalize_channels():
    amap = AttributionMap(np.array([[2.0, -4.0], [1.0, 0.0]]), 1, at.GRAD_X_INPUT)
    normalized = at.normalize_channels(amap)
    np.testing.assert_allclose(normalized.scores, [[0.5, -1.0], [0.25, 0.0]])
    assert normalized.normalization == 0.25
    zero = AttributionMap(np.zeros((3, 2)), 0, at.GRAD_X_INPUT)
    assert at.normalize_channels(zero) is zero


def test_method_agreement(rng):
    scores = rng.normal(size=(10, 2))
    a = AttributionMap(scores, 0, at.GRAD_X_INPUT)
    b = AttributionMap(scores * 3.0 + 1.0, 0, at.EPSILON_LRP)
    assert at.method_agreement(a, b) == pytest.approx(1.0)
    with pytest.raises(at.ShapeError):
        at.method_agreement(a, AttributionMap(scores[:5], 0, at.EPSILON_LRP))


def test_export_scores_csv(tmp_path):
    amap = AttributionMap(np.arange(6.0).reshape(3, 2), 1, at.GRAD_X_INPUT)
    frame = pd.read_csv(at.export_scores_csv(amap, tmp_path / "out" / "scores.csv", ["V1", "V2"]))
    assert list(frame.columns) == ["time", "channel", "score"]
    assert frame["channel"].tolist() == ["V1", "V2"] * 3
    assert frame.loc[(frame.time == 2) & (frame.channel == "V1"), "score"].item() == 4.0


def test_score_color_extremes():
    assert at.score_color(1.0) == "#ff0000"
    assert at.score_color(-1.0) == "#0000ff"


def _element(svg, element_id):
    match = re.search(rf'<g id="{re.escape(element_id)}">(.*?)</g>', svg, re.S)
    assert match is not None, element_id
    return match.group(1)


def test_render_figure_colors_the_peak(tmp_path, rng):
    window = rng.normal(size=(20, 2))
    scores = rng.uniform(-0.5, 0.5, size=(20, 2))
    scores[5, 0] = 1.0
    amap = AttributionMap(scores, 1, at.GRAD_X_INPUT)
    path = at.render_figure(window, amap, ["I", "II"], tmp_path / "fig.svg", title="record")
    svg = path.read_text()
    assert "#ff0000" in _element(svg, "attr-I-5")
    assert 'id="attr-II-19"' in svg


def test_render_figure_context_channels_and_zero_map(tmp_path, rng):
    window = rng.normal(size=(20, 3))
    scores = np.ones((20, 3))
    amap = AttributionMap(scores, 0, at.GRAD_X_INPUT)
    path = at.render_figure(window, amap, ["I", "II", "III"], tmp_path / "ctx.svg", used_channels=[True, True, False])
    svg = path.read_text()
    assert 'id="attr-II-0"' in svg and "attr-III-" not in svg
    empty = at.render_figure(window, None, ["I", "II", "III"], tmp_path / "none.svg").read_text()
    assert "attr-" not in empty


def test_render_figure_is_reproducible(tmp_path, rng):
    window = rng.normal(size=(15, 1))
    amap = AttributionMap(rng.uniform(-1, 1, size=(15, 1)), 0, at.GRAD_X_INPUT)
    a = at.render_figure(window, amap, ["V1"], tmp_path / "a.svg").read_bytes()
    b = at.render_figure(window, amap, ["V1"], tmp_path / "b.svg").read_bytes()
    assert a == b


def test_render_figure_shape_errors(tmp_path, rng):
    window = rng.normal(size=(10, 2))
    with pytest.raises(at.ShapeError):
        at.render_figure(window, None, ["I"], tmp_path / "x.svg")
    with pytest.raises(at.ShapeError):
        at.render_figure(window, AttributionMap(np.zeros((10, 3)), 0, "m"), ["I", "II"], tmp_path / "x.svg")
    with pytest.raises(at.ShapeError):
        at.render_figure(window, None, ["I", "II"], tmp_path / "x.svg", used_channels=[True])
