"""Per-channel relevance maps for a single model's decision and SVG figures.

Methods: gradient x input, integrated gradients (zero baseline, midpoint rule)
and epsilon-LRP. All three explain the pre-softmax score of the target class.
The LRP pass walks the same autodiff graph as the forward computation and
reuses each node's vector-Jacobian product:

- linear nodes (conv, dense, pooling average, eval batchnorm, add/sub/neg):
  ``R_parent = parent * VJP(R / (z + eps * sign(z)))``
- ELU / ReLU pass relevance through unchanged
- max pooling, reshape and slicing route relevance like gradients
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.colors import Normalize  # noqa: E402
from scipy.stats import spearmanr  # noqa: E402

from autodiff import Parameter, ShapeError, Tensor  # noqa: E402
from models import TrainedModel  # noqa: E402

logger = logging.getLogger(__name__)

GRAD_X_INPUT = "grad_x_input"
INTEGRATED_GRADIENTS = "integrated_gradients"
EPSILON_LRP = "epsilon_lrp"
METHODS = (GRAD_X_INPUT, INTEGRATED_GRADIENTS, EPSILON_LRP)

LRP_EPSILON = 1e-6
IG_STEPS = 256
IG_CHUNK = 64
COLORMAP = "bwr"

LINEAR_OPS = {"conv1d", "dense", "gap", "batchnorm_eval", "add", "sub", "neg"}
PASS_THROUGH_OPS = {"elu", "relu"}
ROUTING_OPS = {"maxpool", "reshape", "getitem"}

ScoreFn = Callable[[Tensor], Tensor]


class AttributionError(RuntimeError):
    pass


class UnsupportedLayerError(AttributionError):
    pass


@dataclass(frozen=True)
class AttributionMap:
    scores: np.ndarray
    target_class: int
    method: str
    normalization: float = 1.0

    @property
    def shape(self):
        return self.scores.shape


@dataclass(frozen=True)
class IgConfig:
    steps: int = IG_STEPS
    baseline: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError(f"integrated gradients needs >= 2 steps, got {self.steps}")


def _score_fn(model: Union[TrainedModel, ScoreFn]) -> ScoreFn:
    if isinstance(model, TrainedModel):
        return lambda x: model.forward(x, mode="eval")
    if callable(model):
        return model
    raise AttributionError(f"Cannot attribute {type(model).__name__}")


def _check_window(model, window: np.ndarray) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ShapeError(f"Attribution expects a [length x channels] window, got shape {window.shape}")
    if isinstance(model, TrainedModel):
        expected = (model.spec.input_length, model.spec.channels)
        if window.shape != expected:
            raise ShapeError(f"Window shape {window.shape} does not match the model input {expected}")
    return window


def _target_seed(logits: Tensor, target_class: int) -> np.ndarray:
    if logits.ndim != 2 or not 0 <= target_class < logits.shape[1]:
        raise ShapeError(f"target class {target_class} is invalid for scores of shape {logits.shape}")
    seed = np.zeros(logits.shape)
    seed[:, target_class] = 1.0
    return seed


def _input_gradients(fn: ScoreFn, inputs: np.ndarray, target_class: int) -> np.ndarray:
    x = Tensor(inputs, requires_grad=True)
    logits = fn(x)
    logits.backward(_target_seed(logits, target_class))
    return x.grad if x.grad is not None else np.zeros_like(inputs)


def grad_x_input(model, window: np.ndarray, target_class: int) -> AttributionMap:
    window = _check_window(model, window)
    grad = _input_gradients(_score_fn(model), window[None], target_class)[0]
    return AttributionMap(grad * window, target_class, GRAD_X_INPUT)


def integrated_gradients(
    model, window: np.ndarray, target_class: int, cfg: Optional[IgConfig] = None
) -> AttributionMap:
    cfg = cfg or IgConfig()
    window = _check_window(model, window)
    baseline = np.zeros_like(window) if cfg.baseline is None else np.asarray(cfg.baseline, dtype=np.float64)
    if baseline.shape != window.shape:
        raise ShapeError(f"IG baseline shape {baseline.shape} differs from window {window.shape}")
    fn = _score_fn(model)
    alphas = (np.arange(cfg.steps) + 0.5) / cfg.steps
    delta = window - baseline
    total = np.zeros_like(window)
    for start in range(0, cfg.steps, IG_CHUNK):
        chunk = alphas[start : start + IG_CHUNK]
        path = baseline[None] + chunk[:, None, None] * delta[None]
        total += _input_gradients(fn, path, target_class).sum(axis=0)
    return AttributionMap(delta * total / cfg.steps, target_class, INTEGRATED_GRADIENTS)


def _stabilized(z: np.ndarray, eps: float) -> np.ndarray:
    return z + np.where(z >= 0, eps, -eps)


def epsilon_lrp(model, window: np.ndarray, target_class: int, eps: float = LRP_EPSILON) -> AttributionMap:
    window = _check_window(model, window)
    x = Tensor(window[None], requires_grad=True)
    logits = _score_fn(model)(x)
    relevance: Dict[int, np.ndarray] = {id(logits): _target_seed(logits, target_class) * logits.data}

    def give(node: Tensor, value: Optional[np.ndarray]) -> None:
        if value is None or isinstance(node, Parameter) or not node.requires_grad:
            return
        key = id(node)
        relevance[key] = relevance[key] + value if key in relevance else value

    for node in reversed(logits.topological_order()):
        r = relevance.get(id(node))
        if r is None or node is x or not node.parents:
            continue
        del relevance[id(node)]
        if node.op in LINEAR_OPS:
            grads = node.pullback(r / _stabilized(node.data, eps))
            for parent, g in zip(node.parents, grads):
                give(parent, None if g is None else parent.data * g)
        elif node.op in PASS_THROUGH_OPS:
            give(node.parents[0], r)
        elif node.op in ROUTING_OPS:
            for parent, g in zip(node.parents, node.pullback(r)):
                give(parent, g)
        else:
            raise UnsupportedLayerError(f"epsilon-LRP has no rule for operation {node.op!r}")
    scores = relevance.get(id(x), np.zeros_like(x.data))[0]
    return AttributionMap(scores, target_class, EPSILON_LRP)


def attribute(model, window: np.ndarray, target_class: int, method: str = GRAD_X_INPUT, **kwargs) -> AttributionMap:
    if method == GRAD_X_INPUT:
        return grad_x_input(model, window, target_class)
    if method == INTEGRATED_GRADIENTS:
        return integrated_gradients(model, window, target_class, kwargs.get("ig_config"))
    if method == EPSILON_LRP:
        return epsilon_lrp(model, window, target_class, kwargs.get("eps", LRP_EPSILON))
    raise AttributionError(f"Unknown attribution method {method!r}; expected one of {METHODS}")


def normalize_channels(amap: AttributionMap) -> AttributionMap:
    """Divide every channel by the single global max |score|."""
    peak = float(np.max(np.abs(amap.scores))) if amap.scores.size else 0.0
    if peak == 0.0:
        return amap
    return replace(amap, scores=amap.scores / peak, normalization=amap.normalization / peak)


def method_agreement(a: AttributionMap, b: AttributionMap) -> float:
    """Spearman rank correlation between two maps of the same window."""
    if a.scores.shape != b.scores.shape:
        raise ShapeError(f"Maps differ in shape: {a.scores.shape} vs {b.scores.shape}")
    result = spearmanr(a.scores.ravel(), b.scores.ravel())
    return float(result.correlation if hasattr(result, "correlation") else result[0])


def export_scores_csv(amap: AttributionMap, path: Union[str, Path], lead_names: Optional[Sequence[str]] = None) -> Path:
    length, channels = amap.scores.shape
    names = list(lead_names) if lead_names is not None else [str(c) for c in range(channels)]
    frame = pd.DataFrame(
        {
            "time": np.repeat(np.arange(length), channels),
            "channel": np.tile(np.asarray(names, dtype=object), length),
            "score": amap.scores.ravel(),
        }
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    return path


def score_color(score: float) -> str:
    """Diverging palette color for a normalized score (+1 red, -1 blue)."""
    return matplotlib.colors.to_hex(plt.get_cmap(COLORMAP)(Normalize(-1.0, 1.0)(score)))


def render_figure(
    window: np.ndarray,
    amap: Optional[AttributionMap],
    lead_names: Sequence[str],
    out_path: Union[str, Path],
    used_channels: Optional[Sequence[bool]] = None,
    title: Optional[str] = None,
) -> Path:
    """One panel per channel: the trace over a color-coded attribution background.

    ``amap`` is expected to be normalized. Channels with ``used_channels[c]`` false are
    drawn without background.
    """
    window = np.asarray(window, dtype=np.float64)
    length, channels = window.shape
    if len(lead_names) != channels:
        raise ShapeError(f"{channels} channels but {len(lead_names)} lead names")
    used = list(used_channels) if used_channels is not None else [True] * channels
    scores = amap.scores if amap is not None else np.zeros_like(window)
    if scores.shape != window.shape:
        raise ShapeError(f"Attribution shape {scores.shape} differs from window shape {window.shape}")
    if len(used) != channels:
        raise ShapeError(f"{channels} channels but {len(used)} used-channel flags")
    cmap = plt.get_cmap(COLORMAP)
    norm = Normalize(-1.0, 1.0)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "ecgforge", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(channels, 1, sharex=True, figsize=(8.0, 1.1 * channels + 0.6), squeeze=False)
        t = np.arange(length)
        for c in range(channels):
            ax = axes[c, 0]
            if used[c]:
                for i in np.flatnonzero(scores[:, c]):
                    value = float(scores[i, c])
                    ax.axvspan(i - 0.5, i + 0.5, color=cmap(norm(value)), lw=0, gid=f"attr-{lead_names[c]}-{i}")
            ax.plot(t, window[:, c], color="black", linewidth=0.8)
            ax.set_ylabel(lead_names[c], rotation=0, ha="right", va="center")
            ax.set_xlim(-0.5, length - 0.5)
            ax.tick_params(axis="y", labelsize=6)
        axes[-1, 0].set_xlabel("sample")
        if title:
            axes[0, 0].set_title(title)
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    logger.info("Wrote attribution figure %s", out_path)
    return out_path


__all__ = [
    "AttributionMap",
    "IgConfig",
    "AttributionError",
    "UnsupportedLayerError",
    "ShapeError",
    "METHODS",
    "grad_x_input",
    "integrated_gradients",
    "epsilon_lrp",
    "attribute",
    "normalize_channels",
    "method_agreement",
    "export_scores_csv",
    "score_color",
    "render_figure",
]
