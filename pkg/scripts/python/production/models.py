"""Classifier architectures built from autodiff primitives.

Four kinds share one ``TrainedModel`` container:

- ``fcn``: input batchnorm, conv blocks (conv, ELU, max pool), global average pooling, dense head
- ``resnet``: input batchnorm, stem conv, pre-activation residual blocks, ELU, GAP, dense head
- ``lstm_final``: input batchnorm, one LSTM unrolled over the window, last hidden state, dense head
- ``lstm_joint``: ``lstm_final`` plus a time-distributed layer predicting the next input sample

Time- and frequency-domain variants differ only in ``input_length``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from autodiff import (
    BatchNormState,
    LstmWeights,
    Parameter,
    ShapeError,
    Tensor,
    activation,
    conv1d,
    dense,
    dropout,
    global_average_pool,
    he_init,
    input_batchnorm,
    load_checkpoint,
    lstm_gates_input,
    lstm_step,
    max_pool,
    no_grad,
    save_checkpoint,
    softmax,
    stack,
)
from run_manifest import atomic_write_text, format_config, parse_config_text
from windowing import DOMAIN_FREQUENCY, DOMAIN_TIME, WindowConfig, input_length

logger = logging.getLogger(__name__)

KIND_FCN = "fcn"
KIND_RESNET = "resnet"
KIND_LSTM_FINAL = "lstm_final"
KIND_LSTM_JOINT = "lstm_joint"
KINDS = (KIND_FCN, KIND_RESNET, KIND_LSTM_FINAL, KIND_LSTM_JOINT)
LSTM_KINDS = (KIND_LSTM_FINAL, KIND_LSTM_JOINT)

DEFAULT_FILTERS = 128
DEFAULT_KERNEL_SIZES = (8, 5, 5, 3)
DEFAULT_RESNET_BLOCKS = 3
DEFAULT_STEM_KERNEL = 7
DEFAULT_BLOCK_KERNELS = (5, 3)
LSTM_HIDDEN = 256
DROPOUT_RATE = 0.5
ENSEMBLE_SIZE = 5
FORGET_BIAS = 1.0

CHECKPOINT_SUFFIX = ".ckpt"
SPEC_SUFFIX = ".spec"
RUNNING_MEAN = "bn.running_mean"
RUNNING_VAR = "bn.running_var"


class ModelError(RuntimeError):
    pass


class ConfigError(ModelError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str = KIND_FCN
    input_domain: str = DOMAIN_TIME
    channels: int = 8
    num_classes: int = 2
    filters: int = DEFAULT_FILTERS
    kernel_sizes: Tuple[int, ...] = DEFAULT_KERNEL_SIZES
    resnet_blocks: int = DEFAULT_RESNET_BLOCKS
    stem_kernel: int = DEFAULT_STEM_KERNEL
    block_kernels: Tuple[int, ...] = DEFAULT_BLOCK_KERNELS
    hidden: int = LSTM_HIDDEN
    dropout: float = DROPOUT_RATE
    activation: str = "elu"
    target_length: int = 192

    @property
    def input_length(self) -> int:
        return input_length(self.input_domain, WindowConfig(target_length=self.target_length))

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"Unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_domain not in (DOMAIN_TIME, DOMAIN_FREQUENCY):
            raise ConfigError(f"Unknown input domain {self.input_domain!r}")
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.num_classes not in (2, 3):
            raise ConfigError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.activation not in ("elu", "relu"):
            raise ConfigError(f"activation must be elu or relu, got {self.activation!r}")
        if self.kind in (KIND_FCN, KIND_RESNET):
            if self.filters < 1:
                raise ConfigError(f"filters must be positive, got {self.filters}")
            kernels = list(self.kernel_sizes) if self.kind == KIND_FCN else [self.stem_kernel, *self.block_kernels]
            if any(k < 1 for k in kernels):
                raise ConfigError(f"kernel sizes must be positive, got {kernels}")
        if self.kind == KIND_FCN:
            if not self.kernel_sizes:
                raise ConfigError("fcn needs at least one conv block")
            if self.input_length >> len(self.kernel_sizes) < 1:
                raise ConfigError(f"{len(self.kernel_sizes)} pooling stages exhaust input length {self.input_length}")
        if self.kind == KIND_RESNET:
            if self.resnet_blocks < 1 or len(self.block_kernels) != 2:
                raise ConfigError("resnet needs >= 1 block with exactly two kernel sizes")
            if self.input_length >> (self.resnet_blocks - 1) < 1:
                raise ConfigError("too many downsampling blocks for the input length")
        if self.kind in LSTM_KINDS and self.hidden != LSTM_HIDDEN:
            raise ConfigError(f"LSTM models use {LSTM_HIDDEN} hidden units, got {self.hidden}")

    def to_config(self) -> Dict[str, Any]:
        return {f"spec.{key}": value for key, value in asdict(self).items()}

    @classmethod
    def from_config(cls, values: Dict[str, str]) -> "ModelSpec":
        raw = {key[len("spec.") :]: value for key, value in values.items() if key.startswith("spec.")}
        kwargs: Dict[str, Any] = {}
        for name, f in cls.__dataclass_fields__.items():
            if name not in raw:
                continue
            text = raw[name]
            default = f.default
            if isinstance(default, tuple):
                kwargs[name] = tuple(int(v) for v in text.split(",") if v.strip())
            elif isinstance(default, bool):
                kwargs[name] = text.lower() == "true"
            elif isinstance(default, int):
                kwargs[name] = int(text)
            elif isinstance(default, float):
                kwargs[name] = float(text)
            else:
                kwargs[name] = text
        return cls(**kwargs)


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: Dict[str, Parameter]
    bn_state: BatchNormState
    init_seed: int = 0
    training_log: Dict[str, List[float]] = field(default_factory=dict)

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.params.items()}
        arrays[RUNNING_MEAN] = self.bn_state.running_mean
        arrays[RUNNING_VAR] = self.bn_state.running_var
        return arrays

    def _check_input(self, x: Tensor) -> None:
        expected = (self.spec.input_length, self.spec.channels)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise ShapeError(f"Model expects input [B x {expected[0]} x {expected[1]}], got {x.shape}")

    def _act(self, x: Tensor) -> Tensor:
        return activation(x, self.spec.activation)

    def forward(
        self,
        x: Union[Tensor, np.ndarray],
        mode: str = "eval",
        rng: Optional[np.random.Generator] = None,
        return_prediction: bool = False,
    ):
        """Pre-softmax class scores ``[B x K]`` (plus next-step predictions for ``lstm_joint``)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        p = self.params
        h = input_batchnorm(x, p["bn.gamma"], p["bn.beta"], self.bn_state, mode)
        prediction = None
        if self.spec.kind == KIND_FCN:
            features = self._fcn_features(h)
        elif self.spec.kind == KIND_RESNET:
            features = self._resnet_features(h)
        else:
            features, prediction = self._lstm_features(h)
        features = dropout(features, self.spec.dropout, mode, rng)
        logits = dense(features, p["head.weight"], p["head.bias"])
        if return_prediction:
            return logits, prediction
        return logits

    def _fcn_features(self, h: Tensor) -> Tensor:
        for idx in range(1, len(self.spec.kernel_sizes) + 1):
            h = conv1d(h, self.params[f"conv{idx}.kernel"], self.params[f"conv{idx}.bias"])
            h = max_pool(self._act(h))
        return global_average_pool(h)

    def _resnet_features(self, h: Tensor) -> Tensor:
        p = self.params
        h = conv1d(h, p["stem.kernel"], p["stem.bias"])
        for block in range(1, self.spec.resnet_blocks + 1):
            prefix = f"block{block}"
            if f"{prefix}.proj.kernel" in p:
                h = max_pool(h)
                skip = conv1d(h, p[f"{prefix}.proj.kernel"], p[f"{prefix}.proj.bias"])
            else:
                skip = h
            branch = conv1d(self._act(h), p[f"{prefix}.conv_a.kernel"], p[f"{prefix}.conv_a.bias"])
            branch = conv1d(self._act(branch), p[f"{prefix}.conv_b.kernel"], p[f"{prefix}.conv_b.bias"])
            h = skip + branch
        return global_average_pool(self._act(h))

    def _lstm_features(self, h: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        p = self.params
        weights = LstmWeights(p["lstm.W"], p["lstm.U"], p["lstm.b"])
        batch, steps, _ = h.shape
        projected = lstm_gates_input(h, weights)
        state_h = Tensor(np.zeros((batch, self.spec.hidden)))
        state_c = Tensor(np.zeros((batch, self.spec.hidden)))
        outputs: List[Tensor] = []
        for t in range(steps):
            state_h, state_c = lstm_step(None, state_h, state_c, weights, projected=projected[:, t])
            if self.spec.kind == KIND_LSTM_JOINT and t < steps - 1:
                outputs.append(state_h)
        prediction = None
        if self.spec.kind == KIND_LSTM_JOINT:
            hidden_seq = stack(outputs, axis=1)
            prediction = dense(hidden_seq, p["predictor.weight"], p["predictor.bias"])
        return state_h, prediction


@dataclass
class Ensemble:
    members: List[TrainedModel]

    def __post_init__(self):
        if not self.members:
            raise ConfigError("An ensemble needs at least one member")
        specs = {m.spec for m in self.members}
        if len(specs) != 1:
            raise ConfigError("Ensemble members must share one ModelSpec")

    @property
    def spec(self) -> ModelSpec:
        return self.members[0].spec

    def __len__(self) -> int:
        return len(self.members)


def _conv_params(
    params: Dict[str, Parameter], prefix: str, k: int, c_in: int, c_out: int, rng: np.random.Generator
) -> None:
    params[f"{prefix}.kernel"] = Parameter(f"{prefix}.kernel", he_init((k, c_in, c_out), k * c_in, rng).data)
    params[f"{prefix}.bias"] = Parameter(f"{prefix}.bias", np.zeros(c_out))


def _dense_params(
    params: Dict[str, Parameter], prefix: str, n_in: int, n_out: int, rng: np.random.Generator
) -> None:
    params[f"{prefix}.weight"] = Parameter(f"{prefix}.weight", he_init((n_in, n_out), n_in, rng).data)
    params[f"{prefix}.bias"] = Parameter(f"{prefix}.bias", np.zeros(n_out))


def _input_params(spec: ModelSpec) -> Dict[str, Parameter]:
    return {
        "bn.gamma": Parameter("bn.gamma", np.ones(spec.channels)),
        "bn.beta": Parameter("bn.beta", np.zeros(spec.channels)),
    }


def _finish(spec: ModelSpec, params: Dict[str, Parameter], seed: int) -> TrainedModel:
    model = TrainedModel(spec=spec, params=params, bn_state=BatchNormState.fresh(spec.channels), init_seed=seed)
    logger.debug("Built %s model with %d parameters", spec.kind, parameter_count(model))
    return model


def build_fcn(spec: ModelSpec, seed: int = 0) -> TrainedModel:
    if spec.kind != KIND_FCN:
        raise ConfigError(f"build_fcn needs kind=fcn, got {spec.kind}")
    spec.validate()
    rng = np.random.default_rng(seed)
    params = _input_params(spec)
    c_in = spec.channels
    for idx, k in enumerate(spec.kernel_sizes, start=1):
        _conv_params(params, f"conv{idx}", k, c_in, spec.filters, rng)
        c_in = spec.filters
    _dense_params(params, "head", spec.filters, spec.num_classes, rng)
    return _finish(spec, params, seed)


def resnet_downsamples(spec: ModelSpec, block: int) -> bool:
    """Every block after the first halves the time axis."""
    return block > 1


def build_resnet(spec: ModelSpec, seed: int = 0) -> TrainedModel:
    if spec.kind != KIND_RESNET:
        raise ConfigError(f"build_resnet needs kind=resnet, got {spec.kind}")
    spec.validate()
    rng = np.random.default_rng(seed)
    params = _input_params(spec)
    f = spec.filters
    _conv_params(params, "stem", spec.stem_kernel, spec.channels, f, rng)
    k_a, k_b = spec.block_kernels
    for block in range(1, spec.resnet_blocks + 1):
        prefix = f"block{block}"
        if resnet_downsamples(spec, block):
            _conv_params(params, f"{prefix}.proj", 1, f, f, rng)
        _conv_params(params, f"{prefix}.conv_a", k_a, f, f, rng)
        _conv_params(params, f"{prefix}.conv_b", k_b, f, f, rng)
    _dense_params(params, "head", f, spec.num_classes, rng)
    return _finish(spec, params, seed)


def build_lstm(spec: ModelSpec, joint: bool, seed: int = 0) -> TrainedModel:
    expected = KIND_LSTM_JOINT if joint else KIND_LSTM_FINAL
    if spec.kind != expected:
        raise ConfigError(f"build_lstm(joint={joint}) needs kind={expected}, got {spec.kind}")
    spec.validate()
    rng = np.random.default_rng(seed)
    params = _input_params(spec)
    hidden = spec.hidden
    params["lstm.W"] = Parameter("lstm.W", he_init((spec.channels, 4 * hidden), spec.channels, rng).data)
    params["lstm.U"] = Parameter("lstm.U", he_init((hidden, 4 * hidden), hidden, rng).data)
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = FORGET_BIAS
    params["lstm.b"] = Parameter("lstm.b", bias)
    _dense_params(params, "head", hidden, spec.num_classes, rng)
    if joint:
        _dense_params(params, "predictor", hidden, spec.channels, rng)
    return _finish(spec, params, seed)


def build_model(spec: ModelSpec, seed: int = 0) -> TrainedModel:
    if spec.kind == KIND_FCN:
        return build_fcn(spec, seed)
    if spec.kind == KIND_RESNET:
        return build_resnet(spec, seed)
    if spec.kind in LSTM_KINDS:
        return build_lstm(spec, spec.kind == KIND_LSTM_JOINT, seed)
    raise ConfigError(f"Unknown model kind {spec.kind!r}")


def parameter_count(model: TrainedModel) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def expected_parameter_count(spec: ModelSpec) -> int:
    """Closed-form parameter count for ``spec``."""
    c, f, k_out = spec.channels, spec.filters, spec.num_classes
    total = 2 * c
    if spec.kind == KIND_FCN:
        c_in = c
        for k in spec.kernel_sizes:
            total += k * c_in * f + f
            c_in = f
        total += f * k_out + k_out
    elif spec.kind == KIND_RESNET:
        total += spec.stem_kernel * c * f + f
        for block in range(1, spec.resnet_blocks + 1):
            total += sum(k * f * f + f for k in spec.block_kernels)
            if resnet_downsamples(spec, block):
                total += f * f + f
        total += f * k_out + k_out
    else:
        h = spec.hidden
        total += c * 4 * h + h * 4 * h + 4 * h + h * k_out + k_out
        if spec.kind == KIND_LSTM_JOINT:
            total += h * c + c
    return total


def _as_array(batch) -> np.ndarray:
    data = getattr(batch, "data", batch)
    return np.asarray(data, dtype=np.float64)


def predict(model: TrainedModel, batch) -> np.ndarray:
    """Eval-mode class probabilities ``[B x K]``."""
    with no_grad():
        logits = model.forward(Tensor(_as_array(batch)), mode="eval")
        return softmax(logits).data


def ensemble_predict(ensemble: Union[Ensemble, Sequence[TrainedModel]], batch) -> np.ndarray:
    """Arithmetic mean of member softmax outputs."""
    if not isinstance(ensemble, Ensemble):
        ensemble = Ensemble(list(ensemble))
    data = _as_array(batch)
    return np.mean([predict(member, data) for member in ensemble.members], axis=0)


def _log_to_config(log: Dict[str, List[float]]) -> Dict[str, str]:
    return {f"log.{key}": ",".join(repr(float(v)) for v in values) for key, values in log.items()}


def save_model(model: TrainedModel, stem: Union[str, Path]) -> List[Path]:
    """Write ``<stem>.ckpt`` (named tensors) and ``<stem>.spec`` (key=value sidecar)."""
    stem = Path(stem)
    ckpt = save_checkpoint(stem.with_suffix(CHECKPOINT_SUFFIX), model.named_arrays())
    values: Dict[str, Any] = dict(model.spec.to_config())
    values["init_seed"] = model.init_seed
    values.update(_log_to_config(model.training_log))
    sidecar = atomic_write_text(stem.with_suffix(SPEC_SUFFIX), format_config(values))
    return [ckpt, sidecar]


def load_model(stem: Union[str, Path]) -> TrainedModel:
    stem = Path(stem)
    sidecar = stem.with_suffix(SPEC_SUFFIX)
    if not sidecar.exists():
        raise ModelError(f"Missing model sidecar {sidecar}")
    values = parse_config_text(sidecar.read_text(encoding="utf-8"))
    spec = ModelSpec.from_config(values)
    model = build_model(spec, seed=int(values.get("init_seed", 0)))
    arrays = load_checkpoint(stem.with_suffix(CHECKPOINT_SUFFIX))
    expected = set(model.named_arrays())
    if set(arrays) != expected:
        raise ModelError(
            f"Checkpoint tensors {sorted(set(arrays) ^ expected)} do not match the {spec.kind} topology"
        )
    for name, param in model.params.items():
        if arrays[name].shape != param.shape:
            raise ModelError(f"Tensor {name} has shape {arrays[name].shape}, expected {param.shape}")
        param.data = arrays[name].copy()
    model.bn_state.running_mean = arrays[RUNNING_MEAN].copy()
    model.bn_state.running_var = arrays[RUNNING_VAR].copy()
    model.training_log = {
        key[len("log.") :]: [float(v) for v in value.split(",") if v.strip()]
        for key, value in values.items()
        if key.startswith("log.")
    }
    return model


__all__ = [
    "ModelSpec",
    "TrainedModel",
    "Ensemble",
    "ModelError",
    "ConfigError",
    "ShapeError",
    "KINDS",
    "build_fcn",
    "build_resnet",
    "build_lstm",
    "build_model",
    "parameter_count",
    "expected_parameter_count",
    "predict",
    "ensemble_predict",
    "save_model",
    "load_model",
]
