"""Dense tensors with a small reverse-mode autodiff tape.

Only the operations needed by the detectors live here: 2-D convolution,
batch normalisation, a handful of pointwise maps, global pooling, an affine
layer and the two training losses.  Arrays are numpy; everything else
(graph recording, gradients, the convolution kernels) is implemented here.

Convolution reduces over the im2col axis ordered (channel, kernel row,
kernel column).  Work is split across threads only along the batch axis and
each image always goes through an identically shaped GEMM, so results do not
depend on the thread count.
"""

from __future__ import annotations

import contextlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericalError

_DTYPES = {"float32": np.float32, "float64": np.float64}

_state = {
    "dtype": np.float64,
    "grad_enabled": True,
    "check_finite": True,
    "threads": 1,
    "pool": None,
    "blas_limiter": None,
}

# im2col buffers are built per chunk of the batch; this bounds their size
_COLS_BUDGET = 48 * 1024 * 1024


# ---------------------------------------------------------------------------
# run-level switches


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ConfigError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _state["dtype"] = _DTYPES[name]


def get_precision() -> str:
    return "float64" if _state["dtype"] is np.float64 else "float32"


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


def set_num_threads(n: int) -> None:
    """Cap the worker count used by batched kernels.

    BLAS is pinned to one thread so that the only parallelism is the batch
    split done here.
    """
    n = int(n)
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    if _state["blas_limiter"] is None:
        try:
            from threadpoolctl import threadpool_limits

            _state["blas_limiter"] = threadpool_limits(limits=1, user_api="blas")
        except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
            _state["blas_limiter"] = False
    if _state["pool"] is not None:
        _state["pool"].shutdown(wait=True)
        _state["pool"] = None
    _state["threads"] = n
    if n > 1:
        _state["pool"] = ThreadPoolExecutor(max_workers=n, thread_name_prefix="patchscope")


def get_num_threads() -> int:
    return _state["threads"]


def threads_from_env(default: int = 1) -> int:
    raw = os.environ.get("PATCHSCOPE_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"PATCHSCOPE_THREADS must be an integer, got {raw!r}") from None


@contextlib.contextmanager
def num_threads(n: int):
    old = get_num_threads()
    set_num_threads(n)
    try:
        yield
    finally:
        set_num_threads(old)


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def set_check_finite(flag: bool) -> None:
    _state["check_finite"] = bool(flag)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not _state["check_finite"] or not arr.size:
        return
    # a single reduction propagates any NaN/Inf; confirm elementwise since large finite sums can overflow
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NumericalError(f"{op}: produced non-finite values")


# ---------------------------------------------------------------------------
# the tensor type


class Tensor:
    """N-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        """Adopt ``arr`` as-is, without casting to the run precision."""
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = bool(requires_grad)
        t.name = name
        t._parents = ()
        t._backward = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None, retain_graph: bool = False) -> None:
        backward(self, grad=grad, retain_graph=retain_graph)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_state["dtype"]))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str, check: bool = True) -> Tensor:
    if check:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(parents)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every leaf that requires it."""
    if grad is None:
        if loss.data.size != 1:
            raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ConfigError("backward called on a tensor that does not require grad")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ConfigError("mean of an empty tensor")
    return _make(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean"
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = out > 0 if (a.requires_grad and _state["grad_enabled"]) else None

    def bw(g):
        return (g * mask,)

    # relu cannot create non-finite values from finite input
    return _make(out, (a,), bw, "relu", check=False)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def sigmoid_np(x) -> np.ndarray:
    """Numerically stable logistic function on plain arrays/scalars."""
    arr = np.asarray(x, dtype=np.float64)
    return _stable_sigmoid(arr.reshape(-1)).reshape(arr.shape)


def softplus_np(x) -> np.ndarray:
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def crop2d(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial crop of a [B,C,H,W] tensor."""
    B, C, H, W = a.shape
    if top < 0 or left < 0 or top + height > H or left + width > W:
        raise ConfigError(f"crop {top},{left},{height}x{width} outside {H}x{W}")
    out = a.data[:, :, top : top + height, left : left + width]

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, :, top : top + height, left : left + width] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), bw, "crop2d")


def global_avg_pool(a: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C], mean over all spatial positions."""
    B, C, H, W = a.shape
    n = H * W
    flat = a.data.reshape(B, C, n)
    # rounding can push a float mean past the extremes (e.g. a constant map); keep it inside
    out = np.clip(flat.mean(axis=2), flat.min(axis=2), flat.max(axis=2))
    return _make(
        out, (a,), lambda g: (np.broadcast_to((g / n)[:, :, None, None], a.shape).copy(),), "global_avg_pool"
    )


def global_max_pool(a: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C]; gradient flows to the first maximal position."""
    B, C, H, W = a.shape
    flat = a.data.reshape(B, C, H * W)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        full = np.zeros_like(flat)
        np.put_along_axis(full, idx[:, :, None], g[:, :, None], axis=2)
        return (full.reshape(a.shape),)

    return _make(out, (a,), bw, "global_max_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """[B,F] x [O,F]^T + [O] -> [B,O]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ConfigError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, bw, "linear")


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.padding not in ("valid", "same-zero"):
            raise ConfigError(f"padding must be 'valid' or 'same-zero', got {self.padding!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2 if self.padding == "same-zero" else 0

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        p, k, s = self.pad, self.kernel, self.stride
        if h + 2 * p < k or w + 2 * p < k:
            raise ConfigError(f"input {h}x{w} smaller than kernel {k}x{k} (padding {self.padding})")
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def n_weights(self) -> int:
        return self.out_channels * self.in_channels * self.kernel**2


def _im2col(x: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """[n,C,H,W] -> [n, C*k*k, ho*wo] with rows ordered (c, kr, kc)."""
    n, c = x.shape[:2]
    if k == 1:
        return np.ascontiguousarray(x[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]).reshape(n, c, ho * wo)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, dx: np.ndarray, k: int, s: int, ho: int, wo: int) -> None:
    n, c = dx.shape[:2]
    d6 = dcols.reshape(n, c, k, k, ho, wo)
    for kr in range(k):
        for kc in range(k):
            dx[:, :, kr : kr + s * (ho - 1) + 1 : s, kc : kc + s * (wo - 1) + 1 : s] += d6[:, :, kr, kc]


def _chunks(batch: int, per_item_bytes: int) -> list[tuple[int, int]]:
    step = max(1, min(batch, _COLS_BUDGET // max(per_item_bytes, 1)))
    threads = _state["threads"]
    if threads > 1:
        step = max(1, min(step, -(-batch // threads)))
    return [(i, min(batch, i + step)) for i in range(0, batch, step)]


def _run_chunks(fn, chunks) -> None:
    pool = _state["pool"]
    if pool is None or len(chunks) == 1:
        for a, b in chunks:
            fn(a, b)
    else:
        list(pool.map(lambda ab: fn(*ab), chunks))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation of a [B,C,H,W] batch (no kernel flip)."""
    if x.ndim != 4:
        raise ConfigError(f"conv2d expects [B,C,H,W], got shape {x.shape}")
    B, C, H, W = x.shape
    if C != spec.in_channels:
        raise ConfigError(f"conv2d: input has {C} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ConfigError(f"conv2d: weight {weight.shape} != expected {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ConfigError(f"conv2d: bias {bias.shape} != ({spec.out_channels},)")
    k, s, p = spec.kernel, spec.stride, spec.pad
    ho, wo = spec.output_hw(H, W)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wm = weight.data.reshape(spec.out_channels, -1)
    out = np.empty((B, spec.out_channels, ho * wo), dtype=x.data.dtype)
    chunks = _chunks(B, C * k * k * ho * wo * xp.itemsize)

    def fwd(a, b):
        np.matmul(wm, _im2col(xp[a:b], k, s, ho, wo), out=out[a:b])

    _run_chunks(fwd, chunks)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, spec.out_channels, ho, wo)

    def bw(g):
        gm = g.reshape(B, spec.out_channels, ho * wo)
        dwm = np.zeros_like(wm)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for a, b in chunks:
            cols = _im2col(xp[a:b], k, s, ho, wo)
            dwm += np.matmul(gm[a:b], cols.transpose(0, 2, 1)).sum(axis=0)
            if dxp is not None:
                dcols = np.matmul(wm.T, gm[a:b])
                _col2im(dcols, dxp[a:b], k, s, ho, wo)
        dx = None
        if dxp is not None:
            dx = dxp[:, :, p : p + H, p : p + W] if p else dxp
        grads = [dx, dwm.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def conv2d_single(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Convenience wrapper for an unbatched [C,H,W] input."""
    y = conv2d(reshape(x, (1,) + x.shape), weight, bias, spec)
    return reshape(y, y.shape[1:])


# ---------------------------------------------------------------------------
# batch normalisation

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalisation of [B,C,H,W]; updates running stats in place when training."""
    if x.ndim != 4:
        raise ConfigError(f"batch_norm expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,) or running_var.shape != (C,):
        raise ConfigError(f"batch_norm: parameters do not match {C} channels")
    n = B * H * W
    if training:
        if n == 0:
            raise ConfigError("batch_norm: empty batch in train mode")
        mu = _channel_mean(x.data)
        out = x.data - mu[None, :, None, None]
        var = _channel_mean(out * out)
        inv_std = 1.0 / np.sqrt(var + eps)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu = running_mean
        inv_std = 1.0 / np.sqrt(running_var + eps)
        out = x.data - mu[None, :, None, None]
    inv_std = inv_std.astype(x.data.dtype, copy=False)
    out *= (gamma.data * inv_std)[None, :, None, None]
    out += beta.data[None, :, None, None]

    def bw(g):
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
        dbeta = _channel_sum(g)
        dgamma = _channel_sum(g * xhat)
        dx = None
        if x.requires_grad:
            if training:
                scale = (gamma.data * inv_std / n)[None, :, None, None]
                dx = xhat
                dx *= -dgamma[None, :, None, None]
                dx += n * g
                dx -= dbeta[None, :, None, None]
                dx *= scale
            else:
                dx = g * (gamma.data * inv_std)[None, :, None, None]
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "batch_norm")


def _channel_sum(a: np.ndarray) -> np.ndarray:
    B, C = a.shape[:2]
    return a.reshape(B, C, -1).sum(axis=2).sum(axis=0)


def _channel_mean(a: np.ndarray) -> np.ndarray:
    return _channel_sum(a) / (a.shape[0] * a.shape[2] * a.shape[3])


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross entropy on pre-sigmoid scores, softplus form."""
    y = np.asarray(targets, dtype=logits.data.dtype).reshape(logits.shape)
    z = logits.data
    per = softplus_np(z) - y * z
    n = z.size
    if n == 0:
        raise ConfigError("bce_with_logits on an empty batch")
    out = np.asarray(per.mean(), dtype=z.dtype)
    return _make(out, (logits,), lambda g: ((g / n) * (_stable_sigmoid(z.reshape(-1)).reshape(z.shape) - y),), "bce")


def mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    d = pred.data - t
    n = d.size
    if n == 0:
        raise ConfigError("mse on an empty batch")
    return _make(np.asarray((d * d).mean(), dtype=d.dtype), (pred,), lambda g: (g * 2.0 * d / n,), "mse")
