"""Dense float64 tensors with a reverse-mode gradient tape.

The operator set is exactly what the network needs: 2-D convolution
(cross-correlation convention), max pooling, batch normalization, leaky
ReLU, axis reductions (max / mean / sum / generalized mean), dense layers
and shape plumbing. Every op records a backward closure on its output
tensor; ``Tensor.backward`` assembles the recorded graph into a tape
(topological order, each node visited exactly once in reverse) and
accumulates gradients. A central-difference ``gradcheck`` harness
validates backward implementations against the forward path.

All forward outputs are checked for NaN/Inf and raise ``NonFiniteError``
instead of propagating bad values.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``self`` into every reachable leaf.

        ``seed`` defaults to 1 and is only optional for scalar outputs.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError(f"seed shape {seed.shape} != tensor shape {self.data.shape}")
        tape = Tape.from_root(self)
        tape.run(self, seed)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axes=None, keepdims=False):
        if axes is None:
            axes = tuple(range(self.ndim))
        return reduce(self, axes, "sum", keepdims=keepdims)

    def mean(self, axes=None, keepdims=False):
        if axes is None:
            axes = tuple(range(self.ndim))
        return reduce(self, axes, "mean", keepdims=keepdims)

    def max(self, axes=None, keepdims=False):
        if axes is None:
            axes = tuple(range(self.ndim))
        return reduce(self, axes, "max", keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op output, recording the backward closure when tracking is on."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


@dataclass
class Tape:
    """Recorded ops of one backward pass, inputs strictly before consumers."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        root.grad = seed if root.grad is None else root.grad + seed
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the broadcast axes of ``grad`` back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _result(out_data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(out_data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(out_data, "mul", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _result(-a.data, "neg", (a,), backward)


def pow_(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    with np.errstate(invalid="ignore", divide="ignore"):  # NaN policy raises below
        out_data = a.data ** exponent

    def backward(g):
        _accum(a, g * exponent * a.data ** (exponent - 1.0))

    return _result(out_data, "pow", (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # NaN/Inf policy raises below
        out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _result(out_data, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):  # NaN policy raises below
        out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _result(out_data, "log", (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):  # NaN policy raises below
        out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data)

    return _result(out_data, "sqrt", (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), "relu", (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    """x for x > 0, slope * x otherwise; backward uses the matching slope."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    mask = a.data > 0
    out_data = np.where(mask, a.data, slope * a.data)

    def backward(g):
        _accum(a, g * np.where(mask, 1.0, slope))

    return _result(out_data, "leaky_relu", (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked leading dims follow numpy matmul semantics."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires ndim >= 2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: lhs last dim {a.shape[-1]} != rhs second-to-last {b.shape[-2]}"
        )
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _result(out_data, "matmul", (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense layer: x [N, D_in] times weight [D_out, D_in], plus bias."""
    if weight.ndim != 2:
        raise ValueError(f"linear weight must be 2-D [D_out, D_in], got shape {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear input feature dim {x.shape[-1]} != weight D_in {weight.shape[1]}"
        )
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} != (D_out,) = ({weight.shape[0]},)")
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _result(out_data, "reshape", (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 1, -1, -1))
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose axes {axes} is not a permutation of 0..{a.ndim - 1}")
    inverse = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _result(a.data.transpose(axes), "transpose", (a,), backward)


def slice_(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _result(np.ascontiguousarray(out_data), "slice", (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty tensor list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _result(out_data, "concat", tuple(tensors), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(int(ax) % ndim for ax in axes)
    if len(axes) == 0:
        raise ValueError("reduce requires at least one axis")
    if len(set(axes)) != len(axes):
        raise ValueError(f"reduce axes {axes} contain duplicates")
    return tuple(sorted(axes))


def reduce(a: Tensor, axes, mode: str = "max", p: float = 6.5, keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` with max, mean, sum or generalized mean.

    Generalized mean clamps the input at 0 before powering (only used on
    non-negative activations) and computes (mean(x^p))^(1/p); p = 1 falls
    back to the exact mean of the clamped input. Max routes its gradient
    to the first maximum in flattened order.
    """
    axes = _normalize_axes(axes, a.ndim)
    for ax in axes:
        if a.data.shape[ax] == 0:
            raise ValueError(f"reduce over empty axis {ax} of shape {a.data.shape}")
    count = int(np.prod([a.data.shape[ax] for ax in axes]))

    def expand(g):
        if keepdims:
            return g
        gk = g
        for ax in axes:
            gk = np.expand_dims(gk, ax)
        return gk

    if mode == "sum":
        out_data = a.data.sum(axis=axes, keepdims=keepdims)

        def backward(g):
            _accum(a, np.broadcast_to(expand(g), a.data.shape).copy())

        return _result(out_data, "reduce_sum", (a,), backward)

    if mode == "mean":
        out_data = a.data.mean(axis=axes, keepdims=keepdims)

        def backward(g):
            _accum(a, np.broadcast_to(expand(g) / count, a.data.shape).copy())

        return _result(out_data, "reduce_mean", (a,), backward)

    if mode == "max":
        # move reduced axes last so the argmax is over one flat trailing dim
        kept = tuple(ax for ax in range(a.ndim) if ax not in axes)
        moved = np.transpose(a.data, kept + axes)
        kept_shape = moved.shape[: len(kept)]
        flat = moved.reshape(kept_shape + (count,))
        arg = flat.argmax(axis=-1)
        out_flat = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        out_data = out_flat
        if keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            out_data = out_flat.reshape(shape)

        def backward(g):
            gf = g if not keepdims else g.reshape(kept_shape)
            gflat = np.zeros(kept_shape + (count,), dtype=np.float64)
            np.put_along_axis(gflat, arg[..., None], gf[..., None], axis=-1)
            red_shape = tuple(a.data.shape[ax] for ax in axes)
            gmoved = gflat.reshape(kept_shape + red_shape)
            inverse = np.argsort(kept + axes)
            _accum(a, gmoved.transpose(inverse))

        return _result(out_data, "reduce_max", (a,), backward)

    if mode == "gem":
        if p < 1.0:
            raise ValueError(f"gem exponent must be >= 1, got {p}")
        clamped = np.maximum(a.data, 0.0)
        mask = a.data > 0
        if p == 1.0:
            out_data = clamped.mean(axis=axes, keepdims=keepdims)
            mp = out_data
        else:
            mp = (clamped ** p).mean(axis=axes, keepdims=keepdims)
            out_data = mp ** (1.0 / p)

        def backward(g):
            with np.errstate(divide="ignore"):
                outer = np.where(mp > 0, mp ** ((1.0 - p) / p), 0.0)
            ge = expand(g * outer) if p != 1.0 else expand(g)
            local = np.where(mask, clamped ** (p - 1.0), 0.0) if p != 1.0 else mask.astype(np.float64)
            _accum(a, ge * local / count)

        return _result(out_data, "reduce_gem", (a,), backward)

    raise ValueError(f"unknown reduce mode {mode!r}")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward(g):
        _accum(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _result(out_data, "log_softmax", (a,), backward)


def softmax_logits(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    soft = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(a, soft * (g - (g * soft).sum(axis=axis, keepdims=True)))

    return _result(soft, "softmax", (a,), backward)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


# im2col buffers below this size are kept for the backward pass instead of
# being rebuilt; larger ones are recomputed to cap peak memory.
_COL_CACHE_BYTES = 64 * 1024 * 1024


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    pad: tuple[int, int] = (0, 0),
    stride: tuple[int, int] = (1, 1),
) -> Tensor:
    """Cross-correlation of x [N, C_in, A, B] with kernel [C_out, C_in, kA, kB].

    im2col + one GEMM; the column buffer is cached for backward when small
    enough, rebuilt otherwise.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D [N, C_in, A, B], got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4-D [C_out, C_in, kA, kB], got shape {kernel.shape}")
    n, cin, a_dim, b_dim = x.shape
    cout, ck, ka, kb = kernel.shape
    pa, pb = int(pad[0]), int(pad[1])
    sa, sb = int(stride[0]), int(stride[1])
    if ck != cin:
        raise ValueError(f"conv2d channel mismatch: input C_in={cin} but kernel C_in={ck}")
    if sa < 1 or sb < 1:
        raise ValueError(f"conv2d strides must be >= 1, got ({sa}, {sb})")
    if ka > a_dim + 2 * pa:
        raise ValueError(f"conv2d kernel height {ka} exceeds padded input height {a_dim + 2 * pa}")
    if kb > b_dim + 2 * pb:
        raise ValueError(f"conv2d kernel width {kb} exceeds padded input width {b_dim + 2 * pb}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} != (C_out,) = ({cout},)")

    ao = (a_dim + 2 * pa - ka) // sa + 1
    bo = (b_dim + 2 * pb - kb) // sb + 1

    def build_col():
        xp = np.pad(x.data, ((0, 0), (0, 0), (pa, pa), (pb, pb))) if (pa or pb) else x.data
        win = np.lib.stride_tricks.sliding_window_view(xp, (ka, kb), axis=(2, 3))
        win = win[:, :, ::sa, ::sb]  # [N, C, Ao, Bo, ka, kb]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ao * bo, cin * ka * kb)

    col = build_col()
    kd = kernel.data
    w_mat = kd.reshape(cout, cin * ka * kb)
    out_mat = col @ w_mat.T  # [N*Ao*Bo, C_out]
    out_data = np.ascontiguousarray(out_mat.reshape(n, ao, bo, cout).transpose(0, 3, 1, 2))
    if bias is not None:
        out_data += bias.data.reshape(1, cout, 1, 1)
    saved_col = col if col.nbytes <= _COL_CACHE_BYTES else None
    del col

    def backward(g):
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ao * bo, cout)
        if kernel.requires_grad:
            col_b = saved_col if saved_col is not None else build_col()
            _accum(kernel, (g_mat.T @ col_b).reshape(cout, cin, ka, kb))
        if x.requires_grad:
            if sa == 1 and sb == 1 and pa <= ka - 1 and pb <= kb - 1:
                # stride-1 input gradient is a conv of g with the rotated kernel
                ra, rb = ka - 1 - pa, kb - 1 - pb
                gp = np.pad(g, ((0, 0), (0, 0), (ra, ra), (rb, rb))) if (ra or rb) else g
                win = np.lib.stride_tricks.sliding_window_view(gp, (ka, kb), axis=(2, 3))
                col_g = win.transpose(0, 2, 3, 1, 4, 5).reshape(
                    n * a_dim * b_dim, cout * ka * kb
                )
                w_rot = np.ascontiguousarray(
                    kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                ).reshape(cin, cout * ka * kb)
                gx = (col_g @ w_rot.T).reshape(n, a_dim, b_dim, cin).transpose(0, 3, 1, 2)
                _accum(x, gx)
            else:
                gcol = (g_mat @ w_mat).reshape(n, ao, bo, cin, ka, kb)
                gxp = np.zeros((n, cin, a_dim + 2 * pa, b_dim + 2 * pb), dtype=np.float64)
                for i in range(ka):
                    for j in range(kb):
                        gxp[
                            :, :, i : i + sa * (ao - 1) + 1 : sa, j : j + sb * (bo - 1) + 1 : sb
                        ] += gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                if pa or pb:
                    gxp = gxp[:, :, pa : pa + a_dim, pb : pb + b_dim]
                _accum(x, gxp)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out_data, "conv2d", parents, backward)


def maxpool2d(x: Tensor, kernel: tuple[int, int], stride: tuple[int, int] | None = None) -> Tensor:
    """Per-window max over x [N, C, A, B]; gradient goes to the first max
    (lowest flat index) in each window."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2d input must be 4-D [N, C, A, B], got shape {x.shape}")
    ka, kb = int(kernel[0]), int(kernel[1])
    if stride is None:
        stride = (ka, kb)
    sa, sb = int(stride[0]), int(stride[1])
    n, c, a_dim, b_dim = x.shape
    if ka > a_dim:
        raise ValueError(f"maxpool2d kernel height {ka} exceeds input height {a_dim}")
    if kb > b_dim:
        raise ValueError(f"maxpool2d kernel width {kb} exceeds input width {b_dim}")

    windows = np.lib.stride_tricks.sliding_window_view(x.data, (ka, kb), axis=(2, 3))
    windows = windows[:, :, ::sa, ::sb]
    ao, bo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, ao, bo, ka * kb)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        ni, ci, hi, wi = np.indices((n, c, ao, bo), sparse=False)
        rows = hi * sa + arg // kb
        cols = wi * sb + arg % kb
        gx = np.zeros_like(x.data)
        if sa >= ka and sb >= kb:
            # non-overlapping windows: argmax positions are unique
            gx[ni, ci, rows, cols] = g
        else:
            np.add.at(gx, (ni, ci, rows, cols), g)
        _accum(x, gx)

    return _result(np.ascontiguousarray(out_data), "maxpool2d", (x,), backward)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Batch normalization over every non-channel axis (channel axis 1).

    Training mode normalizes with batch statistics and, when running
    buffers are supplied, updates them in place (unbiased variance in the
    running estimate). Eval mode normalizes with the running buffers.
    """
    if eps <= 0:
        raise ValueError(f"batchnorm eps must be > 0, got {eps}")
    if x.ndim < 2:
        raise ValueError(f"batchnorm input needs a channel axis, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},) for input {x.shape}"
        )
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    count = int(np.prod([x.shape[ax] for ax in axes]))

    if training:
        mu = x.data.mean(axis=axes)
        var = ((x.data - mu.reshape(bshape)) ** 2).mean(axis=axes)
        if running_mean is not None and running_var is not None:
            unbiased = var * count / (count - 1) if count > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm eval mode requires running statistics")
        mu = running_mean
        var = running_var

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * ivar.reshape(bshape)
    out_data = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            # classic batch-stat backward: mean/var both depend on x
            sum_gxhat = gxhat.sum(axis=axes).reshape(bshape)
            sum_gxhat_xhat = (gxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (ivar.reshape(bshape) / count) * (
                count * gxhat - sum_gxhat - xhat * sum_gxhat_xhat
            )
        else:
            gx = gxhat * ivar.reshape(bshape)
        _accum(x, gx)

    return _result(out_data, "batchnorm", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one central-difference check."""

    max_rel_err: float
    per_input: list[float]
    passed: bool
    failure: str | None = None

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        detail = f" ({self.failure})" if self.failure else ""
        return f"{status} max_rel_err={self.max_rel_err:.3e}{detail}"


def gradcheck(f, inputs, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` against central differences.

    Relative error per element is |analytic - numeric| / max(1, |analytic|,
    |numeric|); the report carries the max over elements per input. ``f``
    must be deterministic and inputs double precision.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    try:
        out = f(*inputs)
    except NonFiniteError as e:
        return GradCheckReport(np.inf, [], False, f"forward produced non-finite values: {e}")
    if out.size != 1:
        raise ValueError(f"gradcheck requires a scalar function, got output shape {out.shape}")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    per_input: list[float] = []
    with no_grad():
        for which, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            ana = analytic[which].reshape(-1)
            worst = 0.0
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + eps
                try:
                    fp = f(*inputs).item()
                    flat[idx] = orig - eps
                    fm = f(*inputs).item()
                except NonFiniteError as e:
                    flat[idx] = orig
                    return GradCheckReport(
                        np.inf,
                        per_input,
                        False,
                        f"non-finite forward while probing input {which} element {idx}: {e}",
                    )
                flat[idx] = orig
                num = (fp - fm) / (2.0 * eps)
                err = abs(ana[idx] - num) / max(1.0, abs(ana[idx]), abs(num))
                worst = max(worst, err)
            per_input.append(worst)

    max_err = max(per_input) if per_input else 0.0
    return GradCheckReport(max_err, per_input, max_err <= tol)
