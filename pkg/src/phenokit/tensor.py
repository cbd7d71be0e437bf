"""Dense tensors with tape-based reverse-mode automatic differentiation.

Only the operations the profiling network needs are provided. Every op
computes its forward result eagerly with numpy; when a :class:`Tape` is
active and any input requires a gradient, a node holding the backward rule
is appended to the tape. Outside a tape nothing is recorded, which is how
inference runs.

Example::

    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # 2 * x
"""
from __future__ import annotations

import io
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import CheckpointError, NonFiniteError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "make_rng",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "linear",
    "relu",
    "gelu",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "batch_norm2d",
    "dropout",
    "diff_conv2d",
    "conv2d",
    "concat",
    "l2_normalize_rows",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_tensor",
    "load_tensor",
]

DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
MAGIC = b"PTNS1"

_ACTIVE_TAPES: list["Tape"] = []


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded PCG64 generator; extra integers select an independent stream."""
    return np.random.Generator(np.random.PCG64([seed, *stream] if stream else seed))


class Tensor:
    """An n-dimensional float32/float64 array that can take part in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in DTYPE_CODES:
            arr = arr.astype(np.float32)
        if arr.dtype not in DTYPE_CODES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if not np.isfinite(arr).all():
            raise NonFiniteError(name or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class _Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Records differentiable operations in execution (hence topological) order.

    A tape is single-use: after :meth:`backward` it must be :meth:`reset`
    before it can be differentiated again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
        """Propagate d(loss)/d(.) to every leaf reached from ``loss``.

        Leaf gradients are accumulated into ``.grad``. When ``wrt`` is given,
        the gradients for those tensors are also returned in order; tensors
        the loss does not depend on get zeros.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("tape was already differentiated; call reset() first")
        self._consumed = True

        produced = {id(n.out) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss

        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
                if key not in produced:
                    leaves[key] = parent

        for key, leaf in leaves.items():
            g = np.ascontiguousarray(grads[key], dtype=leaf.dtype)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"backward:{leaf.name or 'leaf'}")
            leaf.grad = g if leaf.grad is None else leaf.grad + g

        if wrt is None:
            return None
        out = []
        for t in wrt:
            g = grads.get(id(t)) if id(t) in leaves else None
            if g is None:
                g = np.zeros_like(t.data)
                if t.grad is None:
                    t.grad = g
            out.append(np.ascontiguousarray(g, dtype=t.dtype))
        return out


def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] | None = None):
    return tape.backward(loss, wrt)


# --------------------------------------------------------------------------
# op plumbing


def _record(op: str, data: np.ndarray, parents: tuple[Tensor, ...], rule: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor._wrap(data)
    if _ACTIVE_TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].nodes.append(_Node(op, out, parents, rule))
    return out


def custom_op(op: str, data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Register a user-defined op; ``rule(grad_out)`` returns one grad per parent."""
    return _record(op, np.asarray(data), tuple(parents), rule)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def rule(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _record("div", out, (a, b), rule)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", np.asarray(out), (x,), rule)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(np.asarray(out).size, 1)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return _record("mean", np.asarray(out), (x,), rule)


def reshape(x: Tensor, shape) -> Tensor:
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU with the exact erf form."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _record("gelu", (x.data * cdf).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * (cdf + x.data * pdf),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", np.matmul(a.data, b.data), (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("linear", out, parents, rule)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if x.shape[-1] == 0:
        raise ValueError("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise ValueError("log-softmax over an empty axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    soft = np.exp(y)
    return _record("log_softmax", y, (x,),
                   lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True)) + eps
    y = x.data / norm
    return _record("l2_normalize", y, (x,),
                   lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply a per-feature affine map."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", out, (x, gain, bias), rule)


def batch_norm2d(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5,
                 running_mean: np.ndarray | None = None,
                 running_var: np.ndarray | None = None) -> Tensor:
    """Per-channel normalisation over batch and spatial axes of an NCHW tensor.

    With running statistics supplied (eval mode) they replace the batch
    statistics and the op is an affine map of ``x``.
    """
    if x.ndim != 4:
        raise ValueError("batch_norm2d expects NCHW input")
    c = x.shape[1]
    shape = (1, c, 1, 1)
    axes = (0, 2, 3)
    g4 = gain.data.reshape(shape)
    if running_mean is None:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
    else:
        mu = np.asarray(running_mean, dtype=x.dtype).reshape(shape)
        var = np.asarray(running_var, dtype=x.dtype).reshape(shape)
        xc = x.data - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g4 + bias.data.reshape(shape)
    train = running_mean is None
    m = x.size // c

    def rule(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx_hat = g * g4
        if train:
            gx = (inv / m) * (m * gx_hat - gx_hat.sum(axis=axes, keepdims=True)
                              - xhat * (gx_hat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gx_hat * inv
        return gx, gg, gb

    return _record("batch_norm", out, (x, gain, bias), rule)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or no generator is given."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if p == 0.0 or rng is None:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# convolution


def diff_conv2d(x: Tensor, weight: Tensor, theta: float, stride: int = 1,
                padding: int | None = None) -> Tensor:
    """Difference convolution over zero-padded NCHW input.

    Each output is ``sum_i w_i * (x_i - theta * x_center)`` over the
    receptive field (all input channels). ``theta == 0`` is ordinary
    cross-correlation.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("diff_conv2d expects NCHW input and OCKK weight")
    b, c, h, w = x.shape
    o, wc, k, k2 = weight.shape
    if wc != c:
        raise ValueError(f"diff_conv2d: input has {c} channels, weight expects {wc}")
    if k != k2 or k % 2 == 0:
        raise ValueError("diff_conv2d needs a square kernel of odd size")
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    p = k // 2 if padding is None else padding
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    if ho < 1 or wo < 1 or p < 0:
        raise ValueError("padding/stride leave no valid output positions")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    ck = k // 2
    hs = slice(ck, ck + stride * (ho - 1) + 1, stride)
    ws = slice(ck, ck + stride * (wo - 1) + 1, stride)
    if theta != 0.0:
        center = xp[:, :, hs, ws].transpose(0, 2, 3, 1).reshape(-1, c)
        wsum = wmat.reshape(o, c, k * k).sum(axis=-1)
        out = out - theta * (center @ wsum.T)
    out = out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    def rule(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape)
        gcols = (gm @ wmat).reshape(b, ho, wo, c, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    gcols[..., i, j].transpose(0, 3, 1, 2)
        if theta != 0.0:
            gw = gw - theta * (gm.T @ center)[:, :, None, None]
            gcen = (gm @ wsum).reshape(b, ho, wo, c).transpose(0, 3, 1, 2)
            gxp[:, :, hs, ws] -= theta * gcen
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw

    return _record("diff_conv2d", np.ascontiguousarray(out), (x, weight), rule)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    return diff_conv2d(x, weight, 0.0, stride, padding)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               wrt: Iterable[Tensor] = (), max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``wrt`` adds further tensors (e.g. parameters closed over by ``f``) to
    the check. The step is rounded to a power of two so that ``x +/- h`` is
    exact for moderately sized coordinates. With ``max_coords`` set, at most
    that many coordinates per tensor are probed, drawn from ``rng``.
    """
    step = 2.0 ** np.round(np.log2(h))
    tensors = [x, *wrt]
    saved = [(t.requires_grad, t.grad) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            y = f(x)
        if not isinstance(y, Tensor) or y.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        analytic = tape.backward(y, wrt=tensors)
        worst = 0.0
        for t, a in zip(tensors, analytic):
            base = t.data
            coords = list(np.ndindex(base.shape))
            if max_coords is not None and len(coords) > max_coords:
                pick = (rng or make_rng(0)).choice(len(coords), size=max_coords, replace=False)
                coords = [coords[i] for i in sorted(pick)]
            for idx in coords:
                bumped = base.copy()
                bumped[idx] = base[idx] + step
                t.data = bumped
                fp = float(f(x).data)
                bumped[idx] = base[idx] - step
                fm = float(f(x).data)
                t.data = base
                numeric = (fp - fm) / (2.0 * step)
                err = abs(float(a[idx]) - numeric) / max(1.0, abs(float(a[idx])))
                worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(tensors, saved):
            t.requires_grad = rg
            t.grad = g


# --------------------------------------------------------------------------
# binary tensor format: b"PTNS1", u8 dtype, u8 rank, rank x u32 dims, LE data


def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    if arr.dtype not in DTYPE_CODES:
        raise TypeError(f"cannot serialise dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank too large")
    head = MAGIC + struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0, what: str = "tensor") -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 5] != MAGIC:
        raise CheckpointError(f"{what}: bad magic at offset {offset}")
    if len(buf) < offset + 7:
        raise CheckpointError(f"{what}: truncated header")
    code, rank = struct.unpack_from("<BB", buf, offset + 5)
    if code not in _CODE_DTYPES:
        raise CheckpointError(f"{what}: unknown dtype code {code}")
    pos = offset + 7
    if len(buf) < pos + 4 * rank:
        raise CheckpointError(f"{what}: truncated shape")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise CheckpointError(f"{what}: truncated data ({len(buf) - pos} of {nbytes} bytes)")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return arr.reshape(shape).astype(_CODE_DTYPES[code]), pos + nbytes


def save_tensor(path, arr) -> None:
    from ._util import atomic_write_bytes

    atomic_write_bytes(path, tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with io.open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf, 0, str(path))
    if end != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - end} trailing bytes")
    return arr
