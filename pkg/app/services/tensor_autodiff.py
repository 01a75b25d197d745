# app/services/tensor_autodiff.py
"""Dense tensors, reverse-mode differentiation and the Adam update rule.

Operations record themselves on the active ``Tape`` (if any). Without an
active tape they simply compute, which is how evaluation and frozen
forward passes run.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_local = threading.local()

GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


class TapeError(RuntimeError):
    """Tape misuse (replay of a consumed tape, non-scalar loss)."""


# ---------- Precision ----------
def get_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Switch the working precision, e.g. ``precision(np.float64)`` for gradient checks."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    previous = get_dtype()
    _local.dtype = dtype
    try:
        yield dtype
    finally:
        _local.dtype = previous


# ---------- Tensor / Parameter ----------
class Tensor:
    __slots__ = ("data", "requires_grad", "param", "softmax_input")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.param: Optional["Parameter"] = None
        # set by softmax so cross_entropy can work from logits
        self.softmax_input: Optional["Tensor"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)


class Parameter:
    """Trainable carrier: value tensor plus a gradient buffer of the same shape."""

    def __init__(self, value, name: str = "", trainable: bool = True):
        self.value = Tensor(value, requires_grad=trainable)
        self.value.param = self
        self.gradient = np.zeros_like(self.value.data)
        self.name = name
        self._trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool):
        self._trainable = bool(flag)
        self.value.requires_grad = bool(flag)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.gradient = np.zeros_like(self.value.data)

    def assign(self, array: np.ndarray):
        array = np.asarray(array)
        if array.shape != self.value.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {array.shape} to {self.value.shape}")
        self.value.data = array.astype(self.value.data.dtype, copy=True)
        self.gradient = np.zeros_like(self.value.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


# ---------- Tape ----------
@dataclass
class _Record:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    grad_fn: GradFn


class Tape:
    """Ordered record of executed operations; use as a context manager."""

    def __init__(self):
        self.records: List[_Record] = []
        self.parameters: Dict[int, Parameter] = {}
        self.consumed = False

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tapes.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, output: Tensor, inputs: Sequence[Tensor], grad_fn: GradFn):
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record on a new tape")
        for t in inputs:
            if t.param is not None and t.requires_grad:
                self.parameters[id(t)] = t.param
        output.requires_grad = True
        self.records.append(_Record(output, tuple(inputs), grad_fn))


def _active_tape() -> Optional[Tape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _make(data: np.ndarray, inputs: Sequence[Tensor], grad_fn: GradFn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, grad_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, tape: Tape, params: Optional[Iterable[Parameter]] = None) -> None:
    """Reverse pass over ``tape``; writes d(loss)/d(value) into every Parameter.gradient.

    Parameters recorded on the tape get their gradient; any extra ``params``
    that the loss does not reach get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward() already ran on this tape; record the computation again")
    tape.consumed = True

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi

    seen = set()
    for key, param in tape.parameters.items():
        seen.add(id(param))
        g = grads.get(key)
        param.gradient = np.zeros_like(param.value.data) if g is None else g.astype(param.value.data.dtype)
    for param in params or ():
        if id(param) not in seen:
            param.zero_grad()


# ---------- Elementwise / structural ops ----------
def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows ``x[indices]``; repeated indices accumulate on the way back."""
    idx = np.asarray(indices, dtype=np.int64)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), grad_fn)


def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"concat expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat: batch sizes {a.shape[0]} and {b.shape[0]} differ")
    p = a.shape[1]
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :p], g[:, p:]))


def split(x: Tensor, at: int) -> Tuple[Tensor, Tensor]:
    if x.ndim != 2 or not 0 <= at <= x.shape[1]:
        raise ShapeError(f"split: cannot split shape {x.shape} at {at}")
    width = x.shape[1]

    def left_grad(g):
        gx = np.zeros_like(x.data)
        gx[:, :at] = g
        return (gx,)

    def right_grad(g):
        gx = np.zeros_like(x.data)
        gx[:, at:] = g
        return (gx,)

    left = _make(x.data[:, :at].copy(), (x,), left_grad)
    right = _make(x.data[:, at:width].copy(), (x,), right_grad)
    return left, right


# ---------- Layers ----------
def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"linear expects x[B×I], w[I×O], b[O]; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(
            f"linear: x is {x.shape[0]}×{x.shape[1]}, w is {w.shape[0]}×{w.shape[1]}, b has {b.shape[0]} entries"
        )

    def grad_fn(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(x.data @ w.data + b.data, (x, w, b), grad_fn)


def conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """Valid cross-correlation, stride 1, plus per-filter bias."""
    if x.ndim != 4 or k.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d expects x[B×C×H×W], k[F×C×kh×kw], b[F]; got {x.shape}, {k.shape}, {b.shape}")
    batch, channels, height, width = x.shape
    filters, k_channels, kh, kw = k.shape
    if channels != k_channels or b.shape[0] != filters:
        raise ShapeError(f"conv2d: input has {channels} channels, kernel {k_channels}, bias {b.shape[0]} for {filters} filters")
    if height < kh or width < kw:
        raise ShapeError(f"conv2d: input {height}×{width} is smaller than kernel {kh}×{kw}")
    out_h, out_w = height - kh + 1, width - kw + 1

    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # B,C,oh,ow,kh,kw
    out = np.tensordot(windows, k.data, axes=([1, 4, 5], [1, 2, 3]))  # B,oh,ow,F
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b.data[None, :, None, None]

    def grad_fn(g):
        gb = g.sum(axis=(0, 2, 3))
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, k.data[:, :, i, j], axes=([1], [0]))  # B,oh,ow,C
                gx[:, :, i:i + out_h, j:j + out_w] += contrib.transpose(0, 3, 1, 2)
        return gx, gk, gb

    return _make(out, (x, k, b), grad_fn)


def maxpool2(x: Tensor) -> Tensor:
    """2×2 max-pool, stride 2; ties route the gradient to the first element in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects B×C×H×W, got {x.shape}")
    batch, channels, height, width = x.shape
    if height % 2 or width % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {height}×{width}")
    h2, w2 = height // 2, width // 2
    windows = (
        x.data.reshape(batch, channels, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, channels, h2, w2, 4)
    )
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(batch, channels, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (gx,)

    return _make(out, (x,), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "identity": identity,
}


def softmax(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax expects B×K, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    out = _make(s, (x,), grad_fn)
    out.softmax_input = x
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(p: Tensor, labels) -> Tensor:
    """Batch-mean categorical cross-entropy of distributions ``p`` against integer labels.

    When ``p`` comes from ``softmax`` the loss is evaluated from the logits
    with a fused log-softmax; probabilities are never logged in that path.
    """
    if p.ndim != 2:
        raise ShapeError(f"cross_entropy expects B×K probabilities, got {p.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = p.shape
    if y.shape[0] != batch:
        raise ShapeError(f"cross_entropy: {batch} rows but {y.shape[0]} labels")
    if batch == 0:
        raise ShapeError("cross_entropy: empty batch")
    if y.min() < 0 or y.max() >= classes:
        raise ValueError(f"cross_entropy: labels must lie in [0, {classes}), got range [{y.min()}, {y.max()}]")
    rows = np.arange(batch)

    logits = p.softmax_input
    if logits is not None:
        log_probs = _log_softmax(logits.data)
        loss = -log_probs[rows, y].mean()

        def grad_fn(g):
            d = np.exp(log_probs)
            d[rows, y] -= 1.0
            return (d * (g / batch),)

        return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), grad_fn)

    # externally supplied distribution without a logit history
    picked = np.maximum(p.data[rows, y], np.finfo(p.data.dtype).tiny)
    loss = -np.log(picked).mean()

    def grad_fn_probs(g):
        d = np.zeros_like(p.data)
        d[rows, y] = -1.0 / (batch * picked)
        return (d * g,)

    return _make(np.asarray(loss, dtype=p.data.dtype), (p,), grad_fn_probs)


# ---------- Adam ----------
@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"Adam learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"Adam epsilon must be positive, got {self.epsilon}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, param: Parameter) -> "AdamState":
        return cls(m=np.zeros_like(param.value.data), v=np.zeros_like(param.value.data))


def adam_step(params: Iterable[Parameter], states: Dict[str, AdamState], config: AdamConfig) -> None:
    """One bias-corrected Adam update of every trainable parameter, in place."""
    if not config.lr > 0:
        raise ValueError(f"Adam learning rate must be positive, got {config.lr}")
    b1, b2 = config.beta1, config.beta2
    for p in params:
        if not p.trainable:
            continue
        state = states.get(p.name)
        if state is None:
            state = states[p.name] = AdamState.fresh(p)
        if state.m.shape != p.shape:
            raise ShapeError(f"{p.name}: Adam state shape {state.m.shape} does not match {p.shape}")
        g = p.gradient
        state.t += 1
        state.m = b1 * state.m + (1.0 - b1) * g
        state.v = b2 * state.v + (1.0 - b2) * g * g
        m_hat = state.m / (1.0 - b1 ** state.t)
        v_hat = state.v / (1.0 - b2 ** state.t)
        update = config.lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
        p.value.data = (p.value.data - update).astype(p.value.data.dtype)


class Adam:
    """Optimizer bound to a fixed parameter list."""

    def __init__(self, params: Iterable[Parameter], config: AdamConfig):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("Adam needs uniquely named parameters")
        self.config = config
        self.states: Dict[str, AdamState] = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, self.states, self.config)

    def minimize(self, loss: Tensor, tape: Tape) -> float:
        backward(loss, tape, self.params)
        self.step()
        return loss.item()


# ---------- Finite differences ----------
def numerical_gradient(loss_fn: Callable[[], Tensor], param: Parameter, eps: float = 1e-4,
                       entries: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``param`` (all entries or the listed ones)."""
    data = param.value.data
    grad = np.zeros_like(data)
    for idx in entries if entries is not None else np.ndindex(*data.shape):
        original = data[idx]
        data[idx] = original + eps
        plus = loss_fn().item()
        data[idx] = original - eps
        minus = loss_fn().item()
        data[idx] = original
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-4,
                   max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Largest relative error between tape gradients and central differences.

    Relative error per parameter is ``|a - n| / max(|a| + |n|, 1e-12)`` measured
    in the L2 norm over the checked entries.
    """
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        all_entries = list(np.ndindex(*p.shape))
        if max_entries is not None and len(all_entries) > max_entries:
            picks = rng.choice(len(all_entries), size=max_entries, replace=False)
            entries = [all_entries[i] for i in sorted(picks)]
        else:
            entries = all_entries
        numeric = numerical_gradient(loss_fn, p, eps, entries)
        a = np.array([p.gradient[i] for i in entries])
        n = np.array([numeric[i] for i in entries])
        err = np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
        logger.debug(f"gradient check {p.name}: relative error {err:.3e}")
        worst = max(worst, float(err))
    return worst
