"""Reverse-mode autodiff on numpy buffers.

A Tensor wraps a float32/float64 ndarray and records the operations that
produced it. Calling backward() on a scalar walks the recorded graph once,
in reverse topological order, accumulating gradients into every tensor
with requires_grad=True. Every forward op verifies its output is finite so
NaN/Inf surfaces at the op that produced it instead of three layers later.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "add",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "batchnorm2d",
    "avgpool2d",
    "global_avgpool",
    "reshape",
    "log",
    "exp",
    "tsum",
    "tmean",
    "softmax",
    "log_softmax",
    "backward",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


_FLOAT_DTYPES = (np.float32, np.float64)

# Module switches. Finite checks are on by default; no_grad() suspends
# graph recording so eval-mode forwards build no closures.
_grad_enabled = True
_finite_checks = True


class no_grad:
    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() on tensor of shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- graph plumbing ----------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not a registered op; divide by a scalar")
        return mul(self, 1.0 / scalar)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)


def _wrap_operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], bwd, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bwd
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; each node appears exactly once, parents before children.
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from `loss`.

    Leaf gradients accumulate across calls; interior-node gradients are
    reset per call so repeated backward on the same graph adds exactly one
    copy of d(loss)/d(leaf) each time.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- elementwise / structural ops ------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap_operand(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _wrap_operand(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(out, (a, b), bwd, "matmul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        _accumulate(x, g * (x.data > 0))

    return _make(out, (x,), bwd, "relu")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def bwd(g):
        _accumulate(x, g / x.data)

    return _make(out, (x,), bwd, "log")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bwd(g):
        _accumulate(x, g * out)

    return _make(out, (x,), bwd, "exp")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(out, (x,), bwd, "reshape")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make(np.asarray(out), (x,), bwd, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.data.shape[a] for a in axes]))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape) / n)

    return _make(np.asarray(out), (x,), bwd, "mean")


# -- softmax family ----------------------------------------------------------


def softmax(z: Tensor, t: float = 1.0, axis: int = 1) -> Tensor:
    """Temperature softmax along `axis`, computed with max subtraction."""
    if t <= 0:
        raise ValueError(f"temperature must be > 0, got {t}")
    scaled = z.data / t
    scaled = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(scaled)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(z, p * (g - inner) / t)

    return _make(p, (z,), bwd, "softmax")


def log_softmax(z: Tensor, t: float = 1.0, axis: int = 1) -> Tensor:
    if t <= 0:
        raise ValueError(f"temperature must be > 0, got {t}")
    scaled = z.data / t
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    lp = shifted - lse

    def bwd(g):
        p = np.exp(lp)
        gsum = g.sum(axis=axis, keepdims=True)
        _accumulate(z, (g - p * gsum) / t)

    return _make(lp, (z,), bwd, "log_softmax")


# -- convolution / pooling ----------------------------------------------------


def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, c, kh, kw),
        strides=(s0, s2 * sh, s3 * sw, s1, s2, s3),
        writeable=False,
    )
    return view.reshape(b * ho * wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation): x is B,C,H,W and w is Cout,Cin,kh,kw."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    b, c, h, wdim = x.shape
    cout, _, kh, kw = w.shape
    ho = _conv_out_dim(h, kh, stride, padding)
    wo = _conv_out_dim(wdim, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape} "
                         f"(stride={stride}, padding={padding})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, stride, ho, wo)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        if w.requires_grad:
            _accumulate(w, (gmat.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            # Accumulate channels-last so the innermost axis is contiguous on
            # both sides of the scatter, then transpose once at the end.
            wmat_kc = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, cout)
            dcols = (gmat @ wmat_kc.T).reshape(b, ho, wo, kh, kw, c)
            dxp = np.zeros((b, xp.shape[2], xp.shape[3], c), dtype=xp.dtype)
            for i in range(kh):
                hi = i + stride * ho
                for j in range(kw):
                    wi = j + stride * wo
                    dxp[:, i:hi:stride, j:wi:stride, :] += dcols[:, :, :, i, j, :]
            dxp = dxp.transpose(0, 3, 1, 2)
            _accumulate(x, dxp[:, :, padding:padding + h, padding:padding + wdim] if padding else dxp)

    return _make(np.ascontiguousarray(out), (x, w), bwd, "conv2d")


def avgpool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling (stride == kernel)."""
    if x.ndim != 4 or x.shape[2] % kernel or x.shape[3] % kernel:
        raise ShapeError(f"avgpool2d: input {x.shape} not divisible by kernel {kernel}")
    b, c, h, w = x.shape
    out = x.data.reshape(b, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

    def bwd(g):
        expanded = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / (kernel * kernel)
        _accumulate(x, expanded)

    return _make(out, (x,), bwd, "avgpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over spatial dims: B,C,H,W -> B,C."""
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool: expected 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None], x.data.shape) / (h * w))

    return _make(out, (x,), bwd, "global_avgpool")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    In training mode normalizes with batch statistics and folds them into the
    running buffers as an EMA (keep `momentum` of the old value); in eval mode
    the frozen buffers are used. Running buffers are plain arrays, mutated in
    place, never part of the graph.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * n / max(n - 1, 1)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            # Batch stats depend on x, so the full three-term derivative applies.
            sum_g = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            ivs = inv_std[None, :, None, None]
            dx = ivs / n * (n * gxhat - sum_g - xhat * sum_gx)
        else:
            dx = gxhat * inv_std[None, :, None, None]
        _accumulate(x, dx)

    return _make(out, (x, gamma, beta), bwd, "batchnorm2d")
