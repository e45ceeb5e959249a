"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Every operation returns a ``Tensor`` that remembers its parents, an operation
name and a backward closure. ``Tensor.backward`` walks the graph in reverse
topological order (iteratively, so long unrolled LSTM graphs are fine).

Features:
- Layer set for the classifiers: conv1d (same padding), max/GAP pooling, ELU,
  ReLU, softmax, sigmoid, tanh, dense, input batch normalization, dropout,
  LSTM step, crossentropy and mean-squared-error losses
- Adam optimizer with per-parameter state, global-norm gradient clipping,
  He initialization
- Flat binary checkpoints (magic, version, named-tensor directory, raw data)
"""

from __future__ import annotations

import contextlib
import contextvars
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ELU_ALPHA = 1.0
BATCHNORM_MOMENTUM = 0.9
BATCHNORM_EPS = 1e-5
DEFAULT_CLIP_NORM = 5.0

CHECKPOINT_MAGIC = b"ECGF"
CHECKPOINT_VERSION = 1

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("ecgforge_grad_enabled", default=True)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError):
    pass


class LabelError(AutodiffError):
    pass


class NumericError(AutodiffError):
    pass


class CheckpointError(AutodiffError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: Tuple["Tensor", ...] = ()
        self.op = "leaf"
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # graph plumbing -------------------------------------------------------------
    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if grad.shape != self.data.shape:
            grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def _accumulate_at(self, index, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad[index] += grad

    def zero_grad(self) -> None:
        self.grad = None

    def topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.data.shape).copy()
        order = self.topological_order()
        self.requires_grad = True
        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def pullback(self, grad: np.ndarray) -> List[Optional[np.ndarray]]:
        """Vector-Jacobian product of this node alone, one entry per parent.

        Parent ``.grad`` buffers are restored afterwards.
        """
        if self._backward is None:
            return [None for _ in self.parents]
        saved = [p.grad for p in self.parents]
        for p in self.parents:
            p.grad = None
        try:
            self._backward(np.asarray(grad, dtype=np.float64))
            return [p.grad for p in self.parents]
        finally:
            for p, g in zip(self.parents, saved):
                p.grad = g

    # arithmetic -------------------------------------------------------------------
    def __add__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)

        def backward(g: np.ndarray) -> None:
            self._accumulate(g)
            other._accumulate(g)

        return _make(self.data + other.data, (self, other), "add", backward)

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)

        def backward(g: np.ndarray) -> None:
            self._accumulate(g)
            other._accumulate(-g)

        return _make(self.data - other.data, (self, other), "sub", backward)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __neg__(self) -> "Tensor":
        def backward(g: np.ndarray) -> None:
            self._accumulate(-g)

        return _make(-self.data, (self,), "neg", backward)

    def __mul__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)

        def backward(g: np.ndarray) -> None:
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)

        return _make(self.data * other.data, (self, other), "mul", backward)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = as_tensor(other)
        if self.data.shape[-1] != other.data.shape[0] or other.ndim != 2:
            raise ShapeError(f"matmul shapes do not conform: {self.shape} @ {other.shape}")

        def backward(g: np.ndarray) -> None:
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.reshape(-1, self.data.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

        return _make(self.data @ other.data, (self, other), "matmul", backward)

    def __getitem__(self, index) -> "Tensor":
        def backward(g: np.ndarray) -> None:
            self._accumulate_at(index, g)

        return _make(self.data[index], (self,), "getitem", backward)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.data.shape

        def backward(g: np.ndarray) -> None:
            self._accumulate(g.reshape(original))

        return _make(self.data.reshape(shape), (self,), "reshape", backward)

    def sum(self, axis=None) -> "Tensor":
        original = self.data.shape

        def backward(g: np.ndarray) -> None:
            expanded = g if axis is None else np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(expanded, original))

        return _make(self.data.sum(axis=axis), (self,), "sum", backward)

    def mean(self, axis=None) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis) * (1.0 / float(count))


class Parameter(Tensor):
    """Trainable tensor carrying its Adam moments and step count."""

    def __init__(self, name: str, data: ArrayLike):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.t = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(
    data: np.ndarray, parents: Tuple[Tensor, ...], op: str, backward: Callable[[np.ndarray], None]
) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward
    return out


# layers ---------------------------------------------------------------------------


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 1D cross-correlation: ``[B x L x Cin]`` (or ``[L x Cin]``) -> ``[.. x L x Cout]``.

    Even kernels pad one more zero on the right than on the left.
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernels.ndim != 3:
        raise ShapeError(f"conv1d expects x [B x L x Cin] and kernels [k x Cin x Cout], got {x.shape}, {kernels.shape}")
    k, c_in, c_out = kernels.shape
    if k < 1:
        raise ShapeError(f"conv1d needs a positive kernel size, got {k}")
    if xd.shape[2] != c_in:
        raise ShapeError(f"conv1d channel mismatch: input has {xd.shape[2]}, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias must have shape ({c_out},), got {bias.shape}")
    batch, length, _ = xd.shape
    left = (k - 1) // 2
    padded = np.pad(xd, ((0, 0), (left, k - 1 - left), (0, 0)))
    # (B, L, Cin, k) -> (B, L, k*Cin) with kernel tap as the slow index
    cols = sliding_window_view(padded, k, axis=1).transpose(0, 1, 3, 2).reshape(batch, length, k * c_in)
    weight = kernels.data.reshape(k * c_in, c_out)
    out = cols @ weight + bias.data

    def backward(g: np.ndarray) -> None:
        g3 = g[None] if squeeze else g
        if kernels.requires_grad:
            kernels._accumulate((cols.reshape(-1, k * c_in).T @ g3.reshape(-1, c_out)).reshape(k, c_in, c_out))
        if bias.requires_grad:
            bias._accumulate(g3.sum(axis=(0, 1)))
        if x.requires_grad:
            dcols = (g3 @ weight.T).reshape(batch, length, k, c_in)
            dpadded = np.zeros_like(padded)
            for tap in range(k):
                dpadded[:, tap : tap + length, :] += dcols[:, :, tap, :]
            dx = dpadded[:, left : left + length, :]
            x._accumulate(dx[0] if squeeze else dx)

    return _make(out[0] if squeeze else out, (x, kernels, bias), "conv1d", backward)


def max_pool(x: Tensor) -> Tensor:
    """Non-overlapping width-2 max pooling over the time axis (odd tail dropped)."""
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    batch, length, channels = xd.shape
    if length < 2:
        raise ShapeError(f"max pooling needs at least 2 time steps, got {length}")
    half = length // 2
    pairs = xd[:, : 2 * half].reshape(batch, half, 2, channels)
    choice = np.argmax(pairs, axis=2)
    out = np.take_along_axis(pairs, choice[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(g: np.ndarray) -> None:
        g3 = g[None] if squeeze else g
        routed = np.zeros_like(pairs)
        np.put_along_axis(routed, choice[:, :, None, :], g3[:, :, None, :], axis=2)
        dx = np.zeros_like(xd)
        dx[:, : 2 * half] = routed.reshape(batch, 2 * half, channels)
        x._accumulate(dx[0] if squeeze else dx)

    return _make(out[0] if squeeze else out, (x,), "maxpool", backward)


def global_average_pool(x: Tensor) -> Tensor:
    """Per-channel mean over the time axis (axis -2)."""
    length = x.shape[-2] if x.ndim >= 2 else 0
    if length == 0:
        raise ShapeError(f"global average pooling needs a non-empty time axis, got shape {x.shape}")

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to(np.expand_dims(g, -2) / length, x.data.shape))

    return _make(x.data.mean(axis=-2), (x,), "gap", backward)


def pool1d(x: Tensor, kind: str) -> Tensor:
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ShapeError(f"pool1d needs a non-empty time axis, got shape {x.shape}")
    if kind == "max_stride2":
        return max_pool(x)
    if kind == "global_average":
        return global_average_pool(x)
    raise ValueError(f"Unknown pooling kind: {kind!r}")


def elu(x: Tensor, alpha: float = ELU_ALPHA) -> Tensor:
    positive = x.data > 0
    exp_part = np.exp(np.minimum(x.data, 0.0))
    out = np.where(positive, x.data, alpha * (exp_part - 1.0))

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * np.where(positive, 1.0, alpha * exp_part))

    return _make(out, (x,), "elu", backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * positive)

    return _make(np.where(positive, x.data, 0.0), (x,), "relu", backward)


def _softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    out = _softmax_array(x.data)

    def backward(g: np.ndarray) -> None:
        x._accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), "softmax", backward)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), "sigmoid", backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * (1.0 - out * out))

    return _make(out, (x,), "tanh", backward)


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "elu": elu,
    "relu": relu,
    "softmax": softmax,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError as exc:
        raise ValueError(f"Unknown activation: {kind!r}") from exc
    return fn(x)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ W + b`` over the last axis; leading axes are batch axes."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense shapes do not conform: x {x.shape}, W {weight.shape}, b {bias.shape}")
    n, m = weight.shape

    def backward(g: np.ndarray) -> None:
        if weight.requires_grad:
            weight._accumulate(x.data.reshape(-1, n).T @ g.reshape(-1, m))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, m).sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), "dense", backward)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BATCHNORM_MOMENTUM
    eps: float = BATCHNORM_EPS

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def input_batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization over batch and time of a ``[B x L x C]`` batch."""
    if x.ndim != 3 or gamma.shape != (x.shape[2],) or beta.shape != (x.shape[2],):
        raise ShapeError(f"input_batchnorm shapes do not conform: x {x.shape}, gamma {gamma.shape}")
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv_std

        def backward_eval(g: np.ndarray) -> None:
            if x.requires_grad:
                x._accumulate(g * gamma.data * inv_std)
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 1)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 1)))

        return _make(gamma.data * xhat + beta.data, (x, gamma, beta), "batchnorm_eval", backward_eval)

    if mode != "train":
        raise ValueError(f"Unknown batchnorm mode: {mode!r}")
    if x.shape[0] < 2:
        raise ShapeError("input_batchnorm in train mode needs at least 2 examples")
    count = x.shape[0] * x.shape[1]
    mean = x.data.mean(axis=(0, 1))
    var = x.data.var(axis=(0, 1))
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv_std
    state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mean
    state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var

    def backward_train(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 1)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 1)))
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = (
                inv_std
                / count
                * (count * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1)))
            )
            x._accumulate(dx)

    return _make(gamma.data * xhat + beta.data, (x, gamma, beta), "batchnorm_train", backward_train)


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), "dropout", backward)


@dataclass
class LstmWeights:
    W: Tensor
    U: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.U.shape[0]


def lstm_gates_input(x: Tensor, weights: LstmWeights) -> Tensor:
    """Input projections for every time step at once: ``[B x T x n] -> [B x T x 4H]``."""
    return x @ weights.W


def lstm_step(
    x_t: Optional[Tensor],
    h: Tensor,
    c: Tensor,
    weights: LstmWeights,
    projected: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output).

    ``projected`` may carry a precomputed ``x_t @ W`` slice; otherwise ``x_t`` is projected here.
    """
    hidden = weights.hidden
    if weights.U.shape != (hidden, 4 * hidden) or weights.b.shape != (4 * hidden,):
        raise ShapeError(f"LSTM weights do not conform: U {weights.U.shape}, b {weights.b.shape}")
    if h.shape[-1] != hidden or c.shape[-1] != hidden:
        raise ShapeError(f"LSTM state width must be {hidden}, got h {h.shape}, c {c.shape}")
    if projected is None:
        if x_t is None or x_t.shape[-1] != weights.W.shape[0] or weights.W.shape[1] != 4 * hidden:
            raise ShapeError("lstm_step input does not match W")
        projected = x_t @ weights.W
    z = projected + h @ weights.U + weights.b
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden : 2 * hidden])
    g = tanh(z[..., 2 * hidden : 3 * hidden])
    o = sigmoid(z[..., 3 * hidden :])
    c_next = f * c + i * g
    h_next = o * tanh(c_next)
    return h_next, c_next


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g: np.ndarray) -> None:
        for idx, t in enumerate(tensors):
            t._accumulate(np.take(g, idx, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), "stack", backward)


def crossentropy_loss(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Mean negative log-softmax of the true class (fused, numerically stable)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"crossentropy expects logits [B x K] and labels [B], got {logits.shape}, {labels.shape}")
    batch, classes = logits.shape
    if not np.issubdtype(labels.dtype, np.integer) or labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise LabelError(f"labels must be integers in [0, {classes}), got {labels.tolist()}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(batch), labels].mean()

    def backward(g: np.ndarray) -> None:
        grad = np.exp(log_probs)
        grad[np.arange(batch), labels] -= 1.0
        logits._accumulate(g * grad / batch)

    return _make(np.asarray(loss), (logits,), "crossentropy", backward)


def mse_loss(pred: Tensor, target: ArrayLike) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target

    def backward(g: np.ndarray) -> None:
        pred._accumulate(g * 2.0 * diff / diff.size)

    return _make(np.asarray((diff * diff).mean()), (pred,), "mse", backward)


# optimisation -----------------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError(f"Adam lr and eps must be positive, got lr={self.lr}, eps={self.eps}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")


def adam_step(params: Iterable[Parameter], cfg: AdamConfig) -> List[Parameter]:
    params = list(params)
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"Non-finite gradient in parameter {p.name}")
    for p in params:
        if p.grad is None:
            continue
        p.t += 1
        p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * p.grad
        p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * p.grad * p.grad
        m_hat = p.m / (1.0 - cfg.beta1**p.t)
        v_hat = p.v / (1.0 - cfg.beta2**p.t)
        p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_gradients(params: Iterable[Tensor], max_norm: float = DEFAULT_CLIP_NORM) -> List[Tensor]:
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return params


def he_init(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> Tensor:
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(shape)))


# checkpoints -------------------------------------------------------------------------


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> Path:
    """Layout: magic, u32 version, u32 count, directory entries, then float64 data.

    Directory entry: u32 name length, name (utf-8), u32 ndim, u64 dims, u64 data offset.
    """
    arrays = [(name, np.ascontiguousarray(getattr(t, "data", t), dtype="<f8")) for name, t in tensors.items()]
    directory = bytearray()
    offset = 0
    for name, arr in arrays:
        encoded = name.encode("utf-8")
        directory += struct.pack("<I", len(encoded)) + encoded
        directory += struct.pack(f"<I{arr.ndim}QQ", arr.ndim, *arr.shape, offset)
        offset += arr.nbytes
    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(arrays)) + bytes(directory)
    blob += b"".join(arr.tobytes() for _, arr in arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an ecgforge checkpoint")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}")
        pos = 12
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            entries.append((name, dims, offset))
    except struct.error as exc:
        raise CheckpointError(f"Truncated checkpoint directory in {path}") from exc
    result: Dict[str, np.ndarray] = {}
    for name, dims, offset in entries:
        size = int(np.prod(dims)) if dims else 1
        start = pos + offset
        if start + 8 * size > len(blob):
            raise CheckpointError(f"Tensor {name} runs past the end of {path}")
        result[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=start).reshape(dims).astype(np.float64)
    return result


__all__ = [
    "Tensor",
    "Parameter",
    "AdamConfig",
    "BatchNormState",
    "LstmWeights",
    "AutodiffError",
    "ShapeError",
    "LabelError",
    "NumericError",
    "CheckpointError",
    "no_grad",
    "as_tensor",
    "conv1d",
    "pool1d",
    "max_pool",
    "global_average_pool",
    "activation",
    "elu",
    "relu",
    "softmax",
    "sigmoid",
    "tanh",
    "dense",
    "input_batchnorm",
    "dropout",
    "lstm_gates_input",
    "lstm_step",
    "stack",
    "crossentropy_loss",
    "mse_loss",
    "adam_step",
    "global_grad_norm",
    "clip_gradients",
    "he_init",
    "save_checkpoint",
    "load_checkpoint",
]
