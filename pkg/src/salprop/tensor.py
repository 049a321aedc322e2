"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on tensors that require gradients records a node holding its
parents and a backward closure. Node ids come from a monotone counter, so
sorting reachable nodes by id in descending order is a valid reverse
topological order; ``Tensor.backward`` replays the recorded tape in that order.
"""

from __future__ import annotations

import itertools
import struct
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "custom_op",
    "add",
    "mul",
    "matmul",
    "exp",
    "log",
    "sigmoid",
    "log_sigmoid",
    "leaky_relu",
    "logsumexp",
    "softmax",
    "clip",
    "concat",
    "stack",
    "conv2d",
    "upsample_nearest",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_node_ids = itertools.count()
_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} are not broadcastable") from None


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- tape -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Replay the tape from this tensor, accumulating into leaf ``.grad``."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward without an explicit grad needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"backward grad shape {grad.shape} != tensor shape {self.shape}")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t.node_id in nodes or not t.requires_grad:
                continue
            nodes[t.node_id] = t
            stack.extend(t._parents)

        grads: dict[int, np.ndarray] = {self.node_id: grad}
        for nid in sorted(nodes, reverse=True):
            t = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return mul(self, other ** -1.0)

    def __rtruediv__(self, other):
        return mul(as_tensor(other), self ** -1.0)

    def __neg__(self):
        return custom_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        p = float(p)
        x = self.data
        return custom_op(x ** p, (self,), lambda g: (g * p * x ** (p - 1.0),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        x = self.data
        out = x[idx]

        def back(g):
            full = np.zeros_like(x)
            np.add.at(full, idx, g)
            return (full,)

        return custom_op(out, (self,), back)

    # -- reductions and shape ops ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return custom_op(out, (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {old} into {shape}") from None
        return custom_op(out, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return custom_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def broadcast_to(self, shape) -> Tensor:
        shape = tuple(shape)
        old = self.shape
        try:
            out = np.broadcast_to(self.data, shape)
        except ValueError:
            raise ShapeError(f"cannot broadcast {old} to {shape}") from None
        return custom_op(out, (self,), lambda g: (_unbroadcast(g, old),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op with the given parents.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    x, y = a.data, b.data
    return custom_op(
        x * y,
        (a, b),
        lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim != 2 or x.shape[-1] != y.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {x.shape} by {y.shape}")

    def back(g):
        gx = g @ y.T
        gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gy

    return custom_op(x @ y, (a, b), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return custom_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return custom_op(np.log(d), (x,), lambda g: (g / d,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return custom_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return custom_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow or log(0)."""
    d = x.data
    out = -np.logaddexp(0.0, -d)
    return custom_op(out, (x,), lambda g: (g * _sigmoid(-d),))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    d = x.data
    pos = d > 0
    out = np.where(d >= 0, d, slope * d)
    return custom_op(out, (x,), lambda g: (np.where(pos, g, slope * g),))


def logsumexp(x: Tensor, axis) -> Tensor:
    d = x.data
    m = np.max(d, axis=axis, keepdims=True)
    e = np.exp(d - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    w = e / s

    def back(g):
        return (np.expand_dims(g, axis) * w,)

    return custom_op(out, (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return custom_op(s, (x,), back)


def clip(x: Tensor, lo, hi) -> Tensor:
    """Clamp values; the gradient is zero wherever clamping was active."""
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return custom_op(np.clip(d, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    cuts = np.cumsum(sizes)[:-1]
    return custom_op(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    n = len(tensors)
    return custom_op(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# -- convolution ---------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, k, k]`` with ``k`` odd.
    """
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected [B,C,H,W] input and [O,C,k,k] kernel, got {x.shape}, {kernel.shape}")
    b, c, h, w = x.shape
    o, ck, k, k2 = kernel.shape
    if ck != c or k != k2:
        raise ShapeError(f"conv2d: kernel {kernel.shape} incompatible with input channels {c}")
    if k % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"conv2d: input {h}x{w} smaller than kernel {k}")
    if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
        raise ValueError(
            f"conv2d: output size ({h}+2*{pad}-{k})/{stride}+1 is not an integer for input {h}x{w}"
        )
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    patches = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    wk = kernel.data
    out = np.tensordot(patches, wk, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents: list[Tensor] = [x, kernel]
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def back(g):
        gk = np.tensordot(g, patches, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                        "bohw,oc->bchw", g, wk[:, :, i, j], optimize=True
                    )
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    y = custom_op(out, parents, back)
    return y.reshape(y.shape[1:]) if unbatched else y


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling over the last two axes."""
    d = x.data
    out = d.repeat(factor, axis=-2).repeat(factor, axis=-1)
    h, w = d.shape[-2:]

    def back(g):
        g = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (g.sum(axis=(-3, -1)),)

    return custom_op(out, (x,), back)


# -- testing harness -----------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between taped and central-difference gradients.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    y.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(x0)).item()
            flat[i] = orig - eps
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"SPCKPT\x00\x01"
_VERSION = 1


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write parameters as a flat little-endian binary file."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(_MAGIC)
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return out

