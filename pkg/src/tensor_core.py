"""
Minimal reverse-mode automatic differentiation on numpy arrays.

Every differentiable op computes its forward value with numpy and, when any
input requires a gradient, records a backward closure on a thread-local
tape. `backward(loss)` replays the tape in reverse and clears it.
"""
import logging
import threading
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class TensorError(ValueError):
    """Raised for shape mismatches and invalid autodiff usage."""


class _Tape(threading.local):
    def __init__(self):
        self.records: List[Tuple["Tensor", Tuple["Tensor", ...], Callable]] = []
        self.enabled = True


_tape = _Tape()


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them."""
    previous = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = previous


def reset_tape() -> None:
    _tape.records.clear()


def tape_size() -> int:
    return len(_tape.records)


class Tensor:
    """
    n-dimensional double precision value with an optional gradient.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + grad

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: Union["Tensor", ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _tape.records.append((out, tuple(parents), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TensorError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor) -> None:
    """
    Populate gradients of every requires_grad tensor that reaches `loss`.

    Raises:
        TensorError: if the loss is not a scalar
    """
    if loss.data.size != 1:
        raise TensorError(f"backward: loss must be a scalar, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.data))
    for out, parents, backward_fn in reversed(_tape.records):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for parent, grad in zip(parents, grads):
            if grad is not None and parent.requires_grad:
                parent.accumulate_grad(grad)
    reset_tape()


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


# Shape and indexing

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; both operands need ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise TensorError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise TensorError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise TensorError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None
    return _record(out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise TensorError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _record(x.data[index], (x,), backward_fn)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of `table` (V, D) for an integer id array; output shape ids.shape + (D,)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise TensorError(f"embedding_lookup: table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TensorError(f"embedding_lookup: ids out of range for table of shape {table.shape}")

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _record(table.data[ids], (table,), backward_fn)


# Reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# Activations

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out ** 2),))


def logistic(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _record(out, (x,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x.data)),))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax along `axis`. Positions where `mask` is False get probability 0;
    a fully masked slice yields all zeros.
    """
    x = as_tensor(x)
    if mask is None:
        valid = np.ones(x.shape, dtype=bool)
    else:
        try:
            valid = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        except ValueError:
            raise TensorError(f"softmax: mask shape {np.shape(mask)} does not fit {x.shape}") from None
    shifted = np.where(valid, x.data, -np.inf)
    peak = shifted.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    exp = np.where(valid, np.exp(np.where(valid, x.data, 0.0) - peak), 0.0)
    total = exp.sum(axis=axis, keepdims=True)
    out = exp / np.where(total > 0, total, 1.0)

    def backward_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record(out, (x,), backward_fn)


# Convolution and pooling

def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    1-D convolution over time with right zero padding.

    Args:
        x: (B, L, D) input
        weight: (window, D, F) filters
        bias: optional (F,) bias

    Returns:
        (B, L, F); position t sees x[t : t + window]
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise TensorError(f"conv1d: incompatible shapes {x.shape} and {weight.shape}")
    window = weight.shape[0]
    batch, length, _ = x.shape
    padded = np.concatenate([x.data, np.zeros((batch, window - 1, x.shape[2]))], axis=1)
    out = np.zeros((batch, length, weight.shape[2]))
    for k in range(window):
        out += padded[:, k:k + length] @ weight.data[k]

    def backward_fn(g):
        gpad = np.zeros_like(padded)
        gw = np.zeros_like(weight.data)
        for k in range(window):
            gpad[:, k:k + length] += g @ weight.data[k].T
            gw[k] = np.einsum("bld,blf->df", padded[:, k:k + length], g)
        return gpad[:, :length], gw

    result = _record(out, (x, weight), backward_fn)
    return add(result, bias) if bias is not None else result


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """
    2-D convolution (cross-correlation).

    Args:
        x: (B, Cin, H, W) input
        kernel: (Cout, Cin, kh, kw) filters
        bias: optional (Cout,) bias
        padding: zero padding on every side

    Returns:
        (B, Cout, H + 2p - kh + 1, W + 2p - kw + 1)
    """
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise TensorError(f"conv2d: incompatible shapes {x.shape} and {kernel.shape}")
    _, _, kh, kw = kernel.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = padded.shape[2] - kh + 1
    out_w = padded.shape[3] - kw + 1
    if out_h < 1 or out_w < 1:
        raise TensorError(f"conv2d: kernel {kernel.shape} larger than padded input {padded.shape}")
    out = np.zeros((x.shape[0], kernel.shape[0], out_h, out_w))
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("bchw,oc->bohw", padded[:, :, i:i + out_h, j:j + out_w], kernel.data[:, :, i, j])

    def backward_fn(g):
        gpad = np.zeros_like(padded)
        gk = np.zeros_like(kernel.data)
        for i in range(kh):
            for j in range(kw):
                window = padded[:, :, i:i + out_h, j:j + out_w]
                gk[:, :, i, j] = np.einsum("bohw,bchw->oc", g, window)
                gpad[:, :, i:i + out_h, j:j + out_w] += np.einsum("bohw,oc->bchw", g, kernel.data[:, :, i, j])
        h, w = x.shape[2], x.shape[3]
        return gpad[:, :, padding:padding + h, padding:padding + w], gk

    result = _record(out, (x, kernel), backward_fn)
    if bias is not None:
        result = add(result, reshape(bias, (1, kernel.shape[0], 1, 1)))
    return result


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes, ceil mode."""
    if x.ndim != 4:
        raise TensorError(f"max_pool2d: expected 4-D input, got shape {x.shape}")
    batch, channels, h, w = x.shape
    out_h, out_w = -(-h // size), -(-w // size)
    padded = np.full((batch, channels, out_h * size, out_w * size), -np.inf)
    padded[:, :, :h, :w] = x.data
    blocks = padded.reshape(batch, channels, out_h, size, out_w, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(batch, channels, out_h, out_w, size * size)
    winner = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, winner[..., None], g[..., None], axis=-1)
        gpad = gblocks.reshape(batch, channels, out_h, out_w, size, size).transpose(0, 1, 2, 4, 3, 5)
        gpad = gpad.reshape(batch, channels, out_h * size, out_w * size)
        return (gpad[:, :, :h, :w],)

    return _record(out, (x,), backward_fn)


def max_over_time(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Max over axis 1 of (B, L, F), restricted to the first lengths[b] positions."""
    if x.ndim != 3:
        raise TensorError(f"max_over_time: expected 3-D input, got shape {x.shape}")
    lengths = np.maximum(np.asarray(lengths, dtype=np.int64), 1)
    valid = np.arange(x.shape[1])[None, :] < lengths[:, None]
    masked = np.where(valid[:, :, None], x.data, -np.inf)
    winner = masked.argmax(axis=1)
    out = np.take_along_axis(x.data, winner[:, None, :], axis=1)[:, 0, :]

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, winner[:, None, :], g[:, None, :], axis=1)
        return (grad,)

    return _record(out, (x,), backward_fn)


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """
    Pairwise cosine similarities between rows.

    Args:
        a: (n, k) or (B, n, k)
        b: (m, k) or (B, m, k)

    Returns:
        (n, m) or (B, n, m); rows with zero norm give similarity 0
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3) or a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise TensorError(f"cosine_similarity_matrix: incompatible shapes {a.shape} and {b.shape}")
    norm_a = np.linalg.norm(a.data, axis=-1, keepdims=True)
    norm_b = np.linalg.norm(b.data, axis=-1, keepdims=True)
    safe_a = np.where(norm_a > 0, norm_a, 1.0)
    safe_b = np.where(norm_b > 0, norm_b, 1.0)
    unit_a = np.where(norm_a > 0, a.data / safe_a, 0.0)
    unit_b = np.where(norm_b > 0, b.data / safe_b, 0.0)
    out = np.clip(np.matmul(unit_a, np.swapaxes(unit_b, -1, -2)), -1.0, 1.0)

    def backward_fn(g):
        ga = (np.matmul(g, unit_b) - (g * out).sum(axis=-1, keepdims=True) * unit_a) / safe_a
        gt = np.swapaxes(g, -1, -2)
        ot = np.swapaxes(out, -1, -2)
        gb = (np.matmul(gt, unit_a) - (gt * ot).sum(axis=-1, keepdims=True) * unit_b) / safe_b
        return np.where(norm_a > 0, ga, 0.0), np.where(norm_b > 0, gb, 0.0)

    return _record(out, (a, b), backward_fn)


# Recurrent cells

def lstm_step(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, bias: Tensor) -> Tuple[Tensor, Tensor]:
    """
    One LSTM step; gate blocks in w_x (D, 4H), w_h (H, 4H), bias (4H,) are
    ordered input, forget, output, candidate.
    """
    hidden = h.shape[-1]
    if w_x.shape[-1] != 4 * hidden or w_h.shape != (hidden, 4 * hidden) or x.shape[-1] != w_x.shape[0]:
        raise TensorError(f"lstm_step: incompatible shapes x{x.shape} h{h.shape} w_x{w_x.shape} w_h{w_h.shape}")
    z = add(add(matmul(x, w_x), matmul(h, w_h)), bias)
    gate_i = logistic(getitem(z, (Ellipsis, slice(0, hidden))))
    gate_f = logistic(getitem(z, (Ellipsis, slice(hidden, 2 * hidden))))
    gate_o = logistic(getitem(z, (Ellipsis, slice(2 * hidden, 3 * hidden))))
    update = tanh(getitem(z, (Ellipsis, slice(3 * hidden, 4 * hidden))))
    c_next = add(mul(gate_f, c), mul(gate_i, update))
    h_next = mul(gate_o, tanh(c_next))
    return h_next, c_next


def _lstm_direction(x: Tensor, lengths: np.ndarray, weights: Tuple[Tensor, Tensor, Tensor],
                    reverse: bool) -> List[Tensor]:
    batch, length, _ = x.shape
    hidden = weights[1].shape[0]
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    outputs: List[Optional[Tensor]] = [None] * length
    steps = range(length - 1, -1, -1) if reverse else range(length)
    for t in steps:
        keep = (t < lengths).astype(np.float64)[:, None]
        x_t = getitem(x, (slice(None), t))
        h_new, c_new = lstm_step(x_t, h, c, *weights)
        h = add(mul(h_new, keep), mul(h, 1.0 - keep))
        c = add(mul(c_new, keep), mul(c, 1.0 - keep))
        outputs[t] = mul(h_new, keep)
    return outputs


def bilstm(x: Tensor, lengths: np.ndarray, forward_weights: Tuple[Tensor, Tensor, Tensor],
           backward_weights: Tuple[Tensor, Tensor, Tensor]) -> Tensor:
    """
    Bidirectional LSTM over (B, L, D) with per-example valid lengths.

    Positions at or beyond the valid length output zeros and do not touch
    the recurrent state.

    Returns:
        (B, L, 2H) concatenation of forward and backward hidden states
    """
    if x.ndim != 3:
        raise TensorError(f"bilstm: expected 3-D input, got shape {x.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    fwd = _lstm_direction(x, lengths, forward_weights, reverse=False)
    bwd = _lstm_direction(x, lengths, backward_weights, reverse=True)
    return stack([concat([f, b], axis=-1) for f, b in zip(fwd, bwd)], axis=1)


# Parameters and optimization

def init_uniform(rng: np.random.RandomState, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class ParameterSet:
    """Named trainable tensors plus the Adam state that belongs to them."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.adam_m: Dict[str, np.ndarray] = {}
        self.adam_v: Dict[str, np.ndarray] = {}
        self.adam_t = 0

    def add(self, name: str, value: ArrayLike, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise TensorError(f"duplicate parameter name {name!r}")
        tensor = Tensor(value, requires_grad=requires_grad, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._params.items()

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(n, p) for n, p in self._params.items() if p.requires_grad]

    def num_coordinates(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for _, p in self.trainable():
            p.grad = np.zeros_like(p.data)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_snapshot(self, values: Dict[str, np.ndarray]) -> None:
        for name, tensor in self._params.items():
            if name not in values:
                raise TensorError(f"snapshot is missing parameter {name!r}")
            if values[name].shape != tensor.shape:
                raise TensorError(f"snapshot shape {values[name].shape} does not match {name!r} {tensor.shape}")
            tensor.data = np.array(values[name], dtype=np.float64)


def adam_step(params: ParameterSet, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """
    One Adam update with bias correction on every trainable parameter.

    Raises:
        TensorError: if a trainable parameter has no gradient
    """
    missing = [n for n, p in params.trainable() if p.grad is None]
    if missing:
        raise TensorError(f"adam_step: missing gradients for {', '.join(missing)}")
    params.adam_t += 1
    t = params.adam_t
    for name, p in params.trainable():
        m = params.adam_m.get(name)
        v = params.adam_v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * p.grad
        v = beta2 * v + (1.0 - beta2) * p.grad ** 2
        params.adam_m[name] = m
        params.adam_v[name] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def gradient_check(build_loss: Callable[[ParameterSet], Tensor], params: ParameterSet, eps: float = 1e-5,
                   max_coordinates: int = 10000, sample_fraction: float = 0.05, seed: int = 0) -> float:
    """
    Compare backward gradients with central finite differences.

    Every coordinate is checked unless the set has more than
    `max_coordinates`, in which case a random `sample_fraction` is.
    Relative error is |a - n| / max(|a|, |n|, 1e-4).

    Returns:
        Maximum relative error over the checked coordinates
    """
    reset_tape()
    params.zero_grad()
    backward(build_loss(params))
    analytic = {n: p.grad.copy() for n, p in params.trainable()}

    coordinates = [(n, i) for n, p in params.trainable() for i in range(p.size)]
    if len(coordinates) > max_coordinates:
        rng = np.random.RandomState(seed)
        chosen = rng.choice(len(coordinates), size=max(1, int(len(coordinates) * sample_fraction)), replace=False)
        coordinates = [coordinates[i] for i in sorted(chosen)]

    worst = 0.0
    with no_grad():
        for name, index in coordinates:
            flat = params[name].data.reshape(-1)
            original = flat[index]
            flat[index] = original + eps
            plus = build_loss(params).item()
            flat[index] = original - eps
            minus = build_loss(params).item()
            flat[index] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = analytic[name].reshape(-1)[index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-4)
            worst = max(worst, error)
    logger.debug(f"Gradient check over {len(coordinates)} coordinates: max relative error {worst:.3e}")
    return worst
