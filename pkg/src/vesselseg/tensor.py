"""Minimal dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a float32 or float64 numpy array. Operations executed while
a Tape is active are recorded (output, inputs, backward rule) in forward
order; ``backward(loss)`` replays the tape in reverse and accumulates
dLoss/dLeaf into each requiring leaf's ``.grad``. There is no broadcasting:
binary ops demand identical shapes and dtypes, and every shape error names
the offending dimensions.

Gradient correctness is the module's contract, checkable for any composite
through ``grad_check`` (central finite differences).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64)

# ---------------------------------------------------------------------------
# Tape machinery


class _TapeEntry:
    __slots__ = ("out", "inputs", "backward_fn", "tape")

    def __init__(self, out, inputs, backward_fn, tape):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of operations; used as a context manager.

    Inputs are always recorded before their consumers, so one reverse pass
    suffices. A tape is meant to live for a single forward/backward step.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def clear(self) -> None:
        self.entries.clear()


class _NoTape:
    """Sentinel that masks any outer tape while on the stack."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()


_TAPE_STACK: list[Tape | None] = []


def no_grad() -> _NoTape:
    return _NoTape()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: _TapeEntry | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def is_leaf(self) -> bool:
        return self.node is None

    # Operator sugar; scalars go through the *_scalar ops so shapes stay strict.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul_scalar(power(self, -1.0), float(other))

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def mean(self) -> "Tensor":
        return mul_scalar(reduce_sum(self), 1.0 / self.size)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _result(out_data, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap op output; record on the active tape when any input needs grad."""
    out = Tensor(out_data)
    tape = _active_tape()
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if tape is not None and needs:
        entry = _TapeEntry(out, tuple(inputs), backward_fn, tape)
        out.node = entry
        tape.entries.append(entry)
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad of every requiring leaf reachable from ``loss``.

    Replays the producing tape in reverse, then consumes it: entries are
    unlinked so the activation buffers captured by backward closures free
    immediately by refcount instead of waiting for the cycle collector.
    Gradients accumulate additively across fan-out within this call and
    across repeated backward calls (the optimizer clears them).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("loss was not produced by operations recorded on a tape")
    if not np.isfinite(loss.data).all():
        raise NumericError("backward called on a non-finite loss")

    tape = loss.node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.out), None)
        holders.pop(id(entry.out), None)
        if g is None:
            continue  # entry does not feed the loss
        input_grads = entry.backward_fn(g)
        for t, ig in zip(entry.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                holders[key] = t
    for key, t in holders.items():
        if t.node is None and t.requires_grad:
            g = grads[key]
            t.grad = g.copy() if t.grad is None else t.grad + g
    for entry in tape.entries:
        entry.out.node = None
        entry.out = None
        entry.inputs = ()
        entry.backward_fn = None
    tape.clear()


# ---------------------------------------------------------------------------
# Shape/dtype validation helpers


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: operand dtypes {a.dtype} and {b.dtype} differ")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Elementwise operations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype), [x],
                   lambda g: [g * mask])


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _result(y, [x], lambda g: [g * (y * (1.0 - y))])


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|))."""
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    return _result(y, [x], lambda g: [g * _stable_sigmoid(x.data)])


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, [x], lambda g: [g * y])


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log requires strictly positive input")
    return _result(np.log(x.data), [x], lambda g: [g / x.data])


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, [x], lambda g: [-g])


def power(x: Tensor, exponent: float) -> Tensor:
    """x ** exponent for a fixed scalar exponent.

    Non-integer exponents require x >= 0; negative exponents require x != 0.
    exponent == 0 returns exactly 1 with zero gradient.
    """
    p = float(exponent)
    if p == 0.0:
        ones = np.ones_like(x.data)
        return _result(ones, [x], lambda g: [np.zeros_like(g)])
    if p != int(p) and np.any(x.data < 0):
        raise NumericError(f"power({p}) requires non-negative input")
    if p < 0 and np.any(x.data == 0):
        raise NumericError(f"power({p}) requires non-zero input")
    y = x.data ** p
    return _result(y, [x], lambda g: [g * (p * x.data ** (p - 1.0))])


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, [a, b], lambda g: [g, g])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, [a, b], lambda g: [g, -g])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _result(a.data * b.data, [a, b], lambda g: [g * b.data, g * a.data])


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    return _result(a.data / b.data, [a, b],
                   lambda g: [g / b.data, -g * a.data / (b.data * b.data)])


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _result(x.data + x.dtype.type(c), [x], lambda g: [g])


def mul_scalar(x: Tensor, c: float) -> Tensor:
    cc = x.dtype.type(c)
    return _result(x.data * cc, [x], lambda g: [g * cc])


def reduce_sum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), [x],
                   lambda g: [np.full(x.shape, g, dtype=x.dtype)])


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (B, C, H, W) tensors along the channel axis."""
    if not tensors:
        raise ValueError("concat_channels needs at least one input")
    first = tensors[0]
    if first.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-d (B, C, H, W) tensors")
    for t in tensors[1:]:
        if t.data.ndim != 4:
            raise ShapeError("concat_channels expects 4-d (B, C, H, W) tensors")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: shape {t.shape} incompatible with {first.shape} "
                "(batch and spatial dims must match)"
            )
        if t.dtype != first.dtype:
            raise ShapeError("concat_channels: mixed dtypes")
    widths = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def bwd(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))]

    return _result(np.concatenate([t.data for t in tensors], axis=1), list(tensors), bwd)


# ---------------------------------------------------------------------------
# Convolution (im2col) and friends


def conv_out_size(in_size: int, kernel: int, stride: int, pad: int) -> int:
    return (in_size + 2 * pad - kernel) // stride + 1


def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int):
    b, c, h, w = x.shape
    oh = conv_out_size(h, kernel, stride, pad)
    ow = conv_out_size(w, kernel, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]              # (B, C, OH, OW, K, K)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * kernel * kernel)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(dcols: np.ndarray, x_shape, kernel: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(b, oh, ow, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
    for ki in range(kernel):
        for kj in range(kernel):
            dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                d6[:, :, :, :, ki, kj]
    return dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp


def _conv_input_grad_s1(g: np.ndarray, weight: np.ndarray, x_shape,
                        pad: int) -> np.ndarray:
    """Stride-1 input gradient as a correlation with the rotated kernel.

    dx = correlate(pad(g, K-1-pad), rot180(W) with in/out channels swapped);
    one im2col + one matmul instead of the scatter-add col2im.
    """
    b, c, h, w = x_shape
    o, i, k, _ = weight.shape
    w_rot = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(i, o * k * k)
    cols_g, gh, gw = _im2col(g, k, 1, k - 1 - pad)
    dx = np.matmul(w_rot, cols_g.transpose(0, 2, 1))  # (B, I, H*W)
    return dx.reshape(b, c, h, w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution (cross-correlation), NCHW x OIKK -> N,O,OH,OW.

    OH = floor((H + 2*pad - K) / stride) + 1, same for OW.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d (B, C, H, W), got {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (O, I, K, K), got {weight.shape}")
    b, c, h, w = x.shape
    o, i, k, _ = weight.shape
    if i != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {i}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} must be ({o},)")
    if x.dtype != weight.dtype or x.dtype != bias.dtype:
        raise ShapeError("conv2d: mixed dtypes between input, weight, and bias")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(
            f"conv2d: kernel {k} exceeds padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    cols, oh, ow = _im2col(x.data, k, stride, pad)      # (B, P, CKK)
    w_flat = weight.data.reshape(o, -1)                 # (O, CKK)
    out = np.matmul(w_flat, cols.transpose(0, 2, 1))    # (B, O, P), contiguous
    out = out.reshape(b, o, oh, ow) + bias.data.reshape(1, o, 1, 1)

    def bwd(g):
        g3 = np.ascontiguousarray(g.reshape(b, o, oh * ow))
        dw = db = dx = None
        if weight.requires_grad:
            dw = np.matmul(g3, cols).sum(axis=0).reshape(weight.shape)
        if bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            if stride == 1:
                dx = _conv_input_grad_s1(g3.reshape(b, o, oh, ow), weight.data, x.shape, pad)
            else:
                dcols = np.matmul(g3.transpose(0, 2, 1), w_flat)  # (B, P, CKK)
                dx = _col2im(dcols, x.shape, k, stride, pad, oh, ow)
        return [dx, dw, db]

    return _result(out, [x, weight, bias], bwd)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pointwise convolution; the FPN lateral projection."""
    if weight.data.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 weight must be (O, I, 1, 1), got {weight.shape}")
    return conv2d(x, weight, bias, stride=1, pad=0)


def maxpool_2x2(x: Tensor) -> Tensor:
    """Stride-2 2x2 max pooling; ties route the gradient to the first
    (row-major) maximum within each window."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool_2x2 input must be 4-d, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool_2x2 needs even spatial dims, got H={h}, W={w}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(b, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        return [dflat.reshape(b, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)]

    return _result(out, [x], bwd)


def _upsample_2x_weights(in_size: int, dtype):
    """Gather indices/weights for 2x bilinear upsampling, half-pixel centers."""
    out_size = 2 * in_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * 0.5 - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    w_hi = (src - lo).astype(dtype)
    return lo, hi, (1.0 - w_hi).astype(dtype), w_hi


def _upsample_matrix(in_size: int, dtype) -> np.ndarray:
    lo, hi, w0, w1 = _upsample_2x_weights(in_size, dtype)
    mat = np.zeros((2 * in_size, in_size), dtype=dtype)
    rows = np.arange(2 * in_size)
    np.add.at(mat, (rows, lo), w0)
    np.add.at(mat, (rows, hi), w1)
    return mat


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    """Double H and W with bilinear interpolation (half-pixel convention)."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear_2x input must be 4-d, got {x.shape}")
    b, c, h, w = x.shape
    r_lo, r_hi, r_w0, r_w1 = _upsample_2x_weights(h, x.dtype)
    c_lo, c_hi, c_w0, c_w1 = _upsample_2x_weights(w, x.dtype)
    rows = (x.data[:, :, r_lo, :] * r_w0[None, None, :, None]
            + x.data[:, :, r_hi, :] * r_w1[None, None, :, None])
    out = (rows[:, :, :, c_lo] * c_w0[None, None, None, :]
           + rows[:, :, :, c_hi] * c_w1[None, None, None, :])

    def bwd(g):
        # Adjoint of the two separable interpolations via the dense per-axis
        # matrices; sizes are small so tensordot/BLAS keeps this fast.
        a_h = _upsample_matrix(h, x.dtype)
        a_w = _upsample_matrix(w, x.dtype)
        t = np.tensordot(g, a_w, axes=([3], [0]))        # (B, C, 2H, W)
        t = np.tensordot(t, a_h, axes=([2], [0]))        # (B, C, W, H)
        return [np.ascontiguousarray(t.transpose(0, 1, 3, 2))]

    return _result(out, [x], bwd)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, eps: float = 1e-5,
              momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes with biased batch statistics and updates the
    running buffers in place; eval mode is a deterministic affine map from
    the running statistics. The epsilon floor keeps a zero-variance batch
    finite.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm input must be 4-d, got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} must be ({c},)"
        )
    axes = (0, 2, 3)
    n = b * h * w
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * x_hat + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        dgamma = (g * x_hat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        scale = (gamma.data * inv_std).reshape(1, c, 1, 1)
        if training:
            g_mean = g.mean(axis=axes).reshape(1, c, 1, 1)
            gx_mean = (g * x_hat).sum(axis=axes).reshape(1, c, 1, 1) / n
            dx = scale * (g - g_mean - x_hat * gx_mean)
        else:
            dx = scale * g
        return [dx, dgamma, dbeta]

    return _result(out, [x, gamma, beta], bwd)


# ---------------------------------------------------------------------------
# Generic dispatch and the finite-difference oracle

OP_KINDS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "neg": neg,
    "power": power,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "add_scalar": add_scalar,
    "mul_scalar": mul_scalar,
    "sum": reduce_sum,
    "concat_channels": concat_channels,
    "conv2d": conv2d,
    "conv1x1": conv1x1,
    "maxpool_2x2": maxpool_2x2,
    "upsample_bilinear_2x": upsample_bilinear_2x,
    "batchnorm": batchnorm,
}


def apply(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch by op name; the named functions are the primary API."""
    if kind not in OP_KINDS:
        raise ValueError(f"unknown op kind {kind!r}")
    if kind == "concat_channels":
        return concat_channels(list(inputs))
    return OP_KINDS[kind](*inputs, **attrs)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward grads and central differences.

    The relative error denominator is max(|analytic|, |numeric|, 1e-8) per
    coordinate. ``f`` must be evaluable repeatedly; evaluations for the
    difference quotients run untaped.
    """
    x.requires_grad = True
    x.grad = None
    with Tape():
        y = f(x)
    if y.size != 1:
        raise ShapeError(f"grad_check objective must be scalar, got {y.shape}")
    if not np.isfinite(y.data).all():
        raise NumericError("grad_check objective is non-finite at x")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic).reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
