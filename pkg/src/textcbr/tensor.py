"""Minimal reverse-mode autodiff over dense numpy arrays.

Every operator records its parents and a closure that maps the output
gradient to parent gradients.  All values are float64.
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True

SNAPSHOT_MAGIC = b"TCPS"
SNAPSHOT_VERSION = 1


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def backward(self) -> None:
        backward(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by operator '{op}'")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # gradient at exactly zero is zero
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


LEAKY_SLOPE = 0.01


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out**2),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data**2, (a,), lambda g: (2.0 * g * a.data,))


# ------------------------------------------------------------------ reductions


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make("sum", out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)
    return _make(
        "mean", out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,)
    )


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), _bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _make(
        "log_softmax", out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),)
    )


# ------------------------------------------------------------------- structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least two dimensions")
    out = a.data @ b.data

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), _bw)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum without ellipsis or repeated indices per operand."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if set(own) - set(other) - set(out_sub):
            raise ValueError(f"einsum '{subscripts}': index summed within one operand only")
    out = np.einsum(subscripts, a.data, b.data)
    return _make(
        "einsum",
        out,
        (a, b),
        lambda g: (
            np.einsum(f"{out_sub},{sb}->{sa}", g, b.data) if a.requires_grad else None,
            np.einsum(f"{out_sub},{sa}->{sb}", g, a.data) if b.requires_grad else None,
        ),
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inverse),))


def take(a, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = as_tensor(a)
    out = a.data[index]

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("take", np.array(out), (a,), _bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, tuple(ts), lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _make(
        "stack",
        out,
        tuple(ts),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ----------------------------------------------------------- composite kernels


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make("dropout", a.data * keep, (a,), lambda g: (g * keep,))


def sqdist(a, b, axis: int = -1) -> Tensor:
    """Squared L2 distance along ``axis``."""
    a, b = as_tensor(a), as_tensor(b)
    diff = a.data - b.data
    out = (diff**2).sum(axis=axis)

    def _bw(g):
        ge = 2.0 * np.expand_dims(g, axis) * diff
        return _unbroadcast(ge, a.shape), _unbroadcast(-ge, b.shape)

    return _make("sqdist", out, (a, b), _bw)


def l2_distance(a, b, axis: int = -1) -> Tensor:
    return sqrt(sqdist(a, b, axis))


COSINE_EPS = 1e-12


def cosine(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data**2).sum(axis=axis, keepdims=True))
    denom = np.maximum(na * nb, COSINE_EPS)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = dot / denom

    def _bw(g):
        g = np.expand_dims(g, axis)
        ga = g * (b.data / denom - cos * a.data / np.maximum(na**2, COSINE_EPS))
        gb = g * (a.data / denom - cos * b.data / np.maximum(nb**2, COSINE_EPS))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("cosine", np.squeeze(cos, axis=axis), (a, b), _bw)


def gru_cell(x, h, w_x, w_h, b_x, b_h) -> Tensor:
    """Fused GRU step (reset, update, candidate gates packed along the last axis).

    x: (B, i), h: (B, k), w_x: (i, 3k), w_h: (k, 3k), b_x, b_h: (3k,).
    """
    x, h, w_x, w_h, b_x, b_h = (as_tensor(t) for t in (x, h, w_x, w_h, b_x, b_h))
    k = h.shape[-1]
    gx = x.data @ w_x.data + b_x.data
    gh = h.data @ w_h.data + b_h.data
    r = _sigmoid(gx[..., :k] + gh[..., :k])
    z = _sigmoid(gx[..., k : 2 * k] + gh[..., k : 2 * k])
    hn = gh[..., 2 * k :]
    n = np.tanh(gx[..., 2 * k :] + r * hn)
    out = (1.0 - z) * n + z * h.data

    def _bw(g):
        dn = g * (1.0 - z)
        dz = g * (h.data - n)
        dh = g * z
        dan = dn * (1.0 - n**2)
        dr = dan * hn
        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgx = np.concatenate([dar, daz, dan], axis=-1)
        dgh = np.concatenate([dar, daz, dan * r], axis=-1)
        dx = dgx @ w_x.data.T
        dh = dh + dgh @ w_h.data.T
        dwx = x.data.reshape(-1, x.shape[-1]).T @ dgx.reshape(-1, 3 * k)
        dwh = h.data.reshape(-1, k).T @ dgh.reshape(-1, 3 * k)
        dbx = dgx.reshape(-1, 3 * k).sum(axis=0)
        dbh = dgh.reshape(-1, 3 * k).sum(axis=0)
        return dx, dh, dwx, dwh, dbx, dbh

    return _make("gru_cell", out, (x, h, w_x, w_h, b_x, b_h), _bw)


# -------------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: ParameterSet | Iterable[ParameterSet] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    When ``params`` is given, trainable tensors the loss does not reach get a
    zero gradient so the optimizer sees a complete set.
    """
    if loss.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)
    if params is not None:
        sets = [params] if isinstance(params, ParameterSet) else list(params)
        for pset in sets:
            for t in pset.values():
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)


# ------------------------------------------------------------------ parameters


class ParameterSet:
    """Named trainable tensors with deterministic, seeded initialization."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._tensors: dict[str, Tensor] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def values(self) -> list[Tensor]:
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int, shape=None) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        shape = (fan_in, fan_out) if shape is None else shape
        return self.add(name, self.rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def gaussian(self, name: str, shape, scale: float = 1.0) -> Tensor:
        return self.add(name, self.rng.normal(0.0, scale, size=shape))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._tensors:
                raise KeyError(f"unknown parameter {name!r}")
            if arr.shape != self._tensors[name].shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {self._tensors[name].shape}")
            self._tensors[name].data = np.array(arr, dtype=np.float64)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self._tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._tensors[name].data).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        save_parameters(self.copy_values(), path)

    def load(self, path: str | Path) -> None:
        self.load_values(load_parameters(path))


class Adam:
    def __init__(
        self,
        params: ParameterSet,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        missing = [name for name, t in self.params.items() if t.grad is None]
        if missing:
            raise ValueError(f"missing gradients for {missing[:5]}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, t in self.params.items():
            g = t.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            t.data = t.data - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            t.grad = None


def sgd_adam_step(params: ParameterSet, optimizer: Adam) -> ParameterSet:
    optimizer.step()
    return params


# --------------------------------------------------------------- snapshot file


def save_parameters(values: dict[str, np.ndarray], path: str | Path) -> None:
    """Name-indexed container: magic, version, count, then per tensor
    (name, ndim, shape, little-endian float64 payload)."""
    chunks = [SNAPSHOT_MAGIC, struct.pack("<HI", SNAPSHOT_VERSION, len(values))]
    for name in sorted(values):
        arr = np.ascontiguousarray(values[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_parameters(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot")
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != SNAPSHOT_VERSION:
            raise ValueError(
                f"{path}: snapshot version {version}, expected {SNAPSHOT_VERSION}"
            )
        pos = 10
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(blob):
                raise ValueError(f"{path}: truncated snapshot")
            out[name] = np.frombuffer(blob[pos : pos + size], dtype="<f8").reshape(shape).copy()
            pos += size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated snapshot") from exc
    return out
