"""Dense float64 tensors with reverse-mode automatic differentiation.

All arrays are NumPy float64 and row-major. Elementwise operations require
identical shapes (no silent broadcasting); the only broadcast allowed is the
per-channel bias add inside the convolution primitives. Gradients are
accumulated on leaf tensors by :func:`backward`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


def _arr(data) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


class Tensor:
    """An n-dimensional float64 array that can participate in a gradient tape.

    A tensor produced by a primitive op keeps references to its inputs and a
    closure computing input gradients from its output gradient; `backward`
    linearizes that graph into a `Tape` and walks it in reverse.
    """

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _arr(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._inputs: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data, inputs, backward_fn, op: str) -> "Tensor":
        out = cls(data)
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._inputs = tuple(inputs)
            out._backward_fn = backward_fn
            out._op = op
        return out

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ----------------------------------------------

    def _check_same_shape(self, other: "Tensor", opname: str) -> None:
        if self.data.shape != other.data.shape:
            raise ShapeError(
                f"{opname}: operand shapes {self.data.shape} and {other.data.shape} differ"
            )

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return Tensor._from_op(self.data + other, (self,), lambda g: (g,), "add_scalar")
        self._check_same_shape(other, "add")
        return Tensor._from_op(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self + (-other)
        self._check_same_shape(other, "sub")
        return Tensor._from_op(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            c = float(other)
            return Tensor._from_op(self.data * c, (self,), lambda g: (g * c,), "mul_scalar")
        self._check_same_shape(other, "mul")
        a, b = self.data, other.data
        return Tensor._from_op(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / float(other))
        self._check_same_shape(other, "div")
        a, b = self.data, other.data
        return Tensor._from_op(
            a / b, (self, other), lambda g: (g / b, -g * a / (b * b)), "div"
        )

    def square(self):
        a = self.data
        return Tensor._from_op(a * a, (self,), lambda g: (2.0 * a * g,), "square")

    def exp(self):
        e = np.exp(self.data)
        return Tensor._from_op(e, (self,), lambda g: (g * e,), "exp")

    def log(self):
        a = self.data
        return Tensor._from_op(np.log(a), (self,), lambda g: (g / a,), "log")

    def abs(self):
        a = self.data
        return Tensor._from_op(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")

    # -- reductions / shape ---------------------------------------------------

    def sum(self, axis=None):
        if axis is None:
            shape = self.data.shape
            return Tensor._from_op(
                self.data.sum(), (self,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
            )
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        out = self.data.sum(axis=axes)
        shape = self.data.shape

        def bwd(g):
            ge = np.expand_dims(g, axes)
            return (np.broadcast_to(ge, shape).copy(),)

        return Tensor._from_op(out, (self,), bwd, "sum_axis")

    def mean(self, axis=None):
        n = self.size if axis is None else np.prod(
            [self.data.shape[a] for a in ((axis,) if isinstance(axis, int) else axis)]
        )
        return self.sum(axis) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape"
        )

    def narrow(self, axis: int, start: int, length: int):
        """Slice `length` entries along `axis` starting at `start`."""
        idx = [slice(None)] * self.data.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        shape = self.data.shape

        def bwd(g):
            full = np.zeros(shape)
            full[idx] = g
            return (full,)

        return Tensor._from_op(self.data[idx].copy(), (self,), bwd, "narrow")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered schedule of the ops reachable from a root tensor."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._inputs:
                stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires_grad leaf reachable from `loss`.

    `loss` must be a scalar. Leaf gradients accumulate across calls; use
    `zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tape = Tape.trace(loss)
    for node in reversed(tape.ops):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            # requires_grad leaf: accumulate
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        input_grads = node._backward_fn(g)
        for parent, pg in zip(node._inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg.copy() if pg.base is not None or pg is g else pg
            else:
                acc += pg


def gradient_stop(t: Tensor) -> Tensor:
    """Forward identity whose backward contribution is zero."""
    return Tensor(t.data.copy())


# ---------------------------------------------------------------------------
# Convolution machinery (pure ndarray helpers)
# ---------------------------------------------------------------------------


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _dilate_hw(x: np.ndarray, stride: int, extra_h: int = 0, extra_w: int = 0) -> np.ndarray:
    if stride == 1 and extra_h == 0 and extra_w == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, (h - 1) * stride + 1 + extra_h, (w - 1) * stride + 1 + extra_w))
    out[:, :, :: stride if stride > 0 else 1, :: stride][:, :, :h, :w] = x
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding-window view (N, C, OH, OW, kh, kw) over a padded input."""
    n, c, h, w = xp.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def _corr2d(xp: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation of a pre-padded input with kernel (O, C, kh, kw)."""
    cols = _windows(xp, k.shape[2], k.shape[3], stride)
    out = np.tensordot(cols, k, axes=([1, 4, 5], [1, 2, 3]))  # (N, OH, OW, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _corr2d_weight_grad(xp: np.ndarray, gout: np.ndarray, stride: int, kh: int, kw: int) -> np.ndarray:
    cols = _windows(xp, kh, kw, stride)
    # (N, C, OH, OW, kh, kw) x (N, O, OH, OW) -> (O, C, kh, kw)
    dk = np.tensordot(gout, cols, axes=([0, 2, 3], [0, 2, 3]))
    return dk


def _flip_t(k: np.ndarray) -> np.ndarray:
    """Spatially flipped kernel with swapped in/out channel axes."""
    return np.ascontiguousarray(np.flip(k, (2, 3)).transpose(1, 0, 2, 3))


def conv2d_reference(x: np.ndarray, k: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct-summation convolution used as the oracle for the im2col path."""
    xp = _pad_hw(np.asarray(x, dtype=np.float64), padding, padding)
    n, c, h, w = xp.shape
    o, ck, kh, kw = k.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for yi in range(oh):
                for xi in range(ow):
                    patch = xp[ni, :, yi * stride : yi * stride + kh, xi * stride : xi * stride + kw]
                    out[ni, oi, yi, xi] = np.sum(patch * k[oi]) + b[oi]
    return out


def _check_conv_shapes(x: Tensor, kernel: Tensor, bias: Tensor | None, padding: int) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d (N,C,H,W), got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d (O,C,kh,kw), got {kernel.data.shape}")
    n, c, h, w = x.data.shape
    o, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ShapeError(f"conv2d: kernel channel dim {ck} does not match input channels {c}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.data.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} does not match output channels {o}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; output H' = floor((H+2p-kh)/s)+1."""
    _check_conv_shapes(x, kernel, bias, padding)
    n, c, h, w = x.data.shape
    o, _, kh, kw = kernel.data.shape
    xp = _pad_hw(x.data, padding, padding)
    out = _corr2d(xp, kernel.data, stride)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    oh, ow = out.shape[2], out.shape[3]
    kdata = kernel.data.copy()

    def bwd(g):
        g = np.ascontiguousarray(g)
        # input grad: dilate g by stride, pad by kh-1 (+ remainder), correlate flipped kernel
        rh = (h + 2 * padding) - ((oh - 1) * stride + kh)
        rw = (w + 2 * padding) - ((ow - 1) * stride + kw)
        gd = _dilate_hw(g, stride, rh, rw)
        gdp = _pad_hw(gd, kh - 1, kw - 1)
        dxp = _corr2d(gdp, _flip_t(kdata), 1)
        dx = dxp[:, :, padding : padding + h, padding : padding + w]
        dk = _corr2d_weight_grad(xp, g, stride, kh, kw)
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (dx, dk, db)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, inputs, bwd, "conv2d")


def conv_transpose2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of conv2d; kernel shape (Cin, Cout, kh, kw), output dims
    (H-1)*stride - 2*padding + kh + output_padding."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d: need 4-d input/kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    n, cin, h, w = x.data.shape
    ck, cout, kh, kw = kernel.data.shape
    if ck != cin:
        raise ShapeError(
            f"conv_transpose2d: kernel input-channel dim {ck} does not match input channels {cin}"
        )
    if output_padding >= stride and not (output_padding == 0):
        raise ShapeError("conv_transpose2d: output_padding must be smaller than stride")
    if padding > kh - 1 or padding > kw - 1:
        raise ShapeError(f"conv_transpose2d: padding {padding} exceeds kernel size - 1")
    out_h = (h - 1) * stride - 2 * padding + kh + output_padding
    out_w = (w - 1) * stride - 2 * padding + kw + output_padding
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(
            f"conv_transpose2d: non-positive output dims {out_h}x{out_w} "
            f"for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(
            f"conv_transpose2d: bias shape {bias.data.shape} does not match output channels {cout}"
        )

    xd = _dilate_hw(x.data, stride, output_padding, output_padding)
    xdp = _pad_hw(xd, kh - 1, kw - 1)
    full = _corr2d(xdp, _flip_t(kernel.data), 1)
    out = full[:, :, padding : padding + out_h, padding : padding + out_w]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    kdata = kernel.data.copy()
    full_h, full_w = full.shape[2], full.shape[3]

    def bwd(g):
        g = np.ascontiguousarray(g)
        gfull = np.zeros((n, cout, full_h, full_w))
        gfull[:, :, padding : padding + out_h, padding : padding + out_w] = g
        # d x: stride-1 conv input-grad, then un-dilate
        dxdp = _corr2d(_pad_hw(gfull, kh - 1, kw - 1), kdata, 1)
        dxd = dxdp[:, :, kh - 1 : kh - 1 + xd.shape[2], kw - 1 : kw - 1 + xd.shape[3]]
        dx = np.ascontiguousarray(dxd[:, :, ::stride, ::stride][:, :, :h, :w])
        # d kernel: weight grad of the stride-1 correlation, flipped back
        dkf = _corr2d_weight_grad(xdp, gfull, 1, kh, kw)  # (Cout, Cin, kh, kw)
        dk = np.ascontiguousarray(np.flip(dkf, (2, 3)).transpose(1, 0, 2, 3))
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (dx, dk, db)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, inputs, bwd, "conv_transpose2d")


# ---------------------------------------------------------------------------
# Normalization / activations / resampling
# ---------------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Channel batch normalization over (N, H, W).

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, as is conventional). Eval mode uses
    the running buffers. Zero batch variance is handled by the eps guard.
    """
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match channel count {c}"
        )
    if training:
        m = x.data.mean(axis=(0, 2, 3))
        v = x.data.var(axis=(0, 2, 3))
        cnt = n * h * w
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        running_var *= 1.0 - momentum
        running_var += momentum * (v * cnt / max(cnt - 1, 1))
    else:
        m = running_mean
        v = running_var
    ivstd = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m[None, :, None, None]) * ivstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    cnt = n * h * w

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            # standard batchnorm backward through the batch statistics
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (ivstd[None, :, None, None] / cnt) * (cnt * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * ivstd[None, :, None, None]
        return (dx, dgamma, dbeta)

    return Tensor._from_op(out, (x, gamma, beta), bwd, "batchnorm2d")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data >= 0
    out = np.where(mask, x.data, slope * x.data)
    return Tensor._from_op(out, (x,), lambda g: (np.where(mask, g, slope * g),), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    n, c, h, w = x.data.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    win = _windows(xp, kernel, kernel, stride)
    n_, c_, oh, ow, _, _ = win.shape
    flat = win.reshape(n_, c_, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        dxp = np.zeros((n, c, hp, wp))
        ky, kx = np.unravel_index(arg, (kernel, kernel))
        oy = np.arange(oh)[None, None, :, None] * stride
        ox = np.arange(ow)[None, None, None, :] * stride
        rows = (oy + ky).ravel()
        cols = (ox + kx).ravel()
        ni = np.repeat(np.arange(n), c * oh * ow)
        ci = np.tile(np.repeat(np.arange(c), oh * ow), n)
        np.add.at(dxp, (ni, ci, rows, cols), g.ravel())
        if padding:
            return (dxp[:, :, padding : padding + h, padding : padding + w],)
        return (dxp,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bwd, "maxpool2d")


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear interpolation matrix with half-pixel centers."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def broadcast_channels(t: Tensor, shape: tuple[int, int, int, int]) -> Tensor:
    """Broadcast a per-channel vector (C,) to (N, C, H, W)."""
    if t.data.ndim != 1 or t.data.shape[0] != shape[1]:
        raise ShapeError(
            f"broadcast_channels: vector shape {t.data.shape} does not match channel dim {shape[1]}"
        )
    out = np.broadcast_to(t.data[None, :, None, None], shape).copy()
    return Tensor._from_op(out, (t,), lambda g: (g.sum(axis=(0, 2, 3)),), "broadcast_channels")


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Upsample spatial dims via bilinear interpolation (half-pixel centers)."""
    n, c, h, w = x.data.shape
    if out_h < h or out_w < w:
        raise ShapeError(
            f"bilinear_upsample: target {out_h}x{out_w} smaller than input {h}x{w}"
        )
    return resize_bilinear(x, out_h, out_w)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize spatial dims (up or down) with half-pixel-center sampling."""
    n, c, h, w = x.data.shape
    mh = _resample_matrix(h, out_h)
    mw = _resample_matrix(w, out_w)
    # y[n,c,O,P] = sum_{h,w} Mh[O,h] x[n,c,h,w] Mw[P,w]
    tmp = np.tensordot(x.data, mh, axes=([2], [1]))       # (N, C, W, OH)
    out = np.tensordot(tmp, mw, axes=([2], [1]))          # (N, C, OH, OW)

    def bwd(g):
        t = np.tensordot(g, mh, axes=([2], [0]))          # (N, C, OW, H)
        dx = np.tensordot(t, mw, axes=([2], [0]))         # (N, C, H, W)
        return (np.ascontiguousarray(dx),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bwd, "bilinear_upsample")
