"""Dense float tensors with reverse-mode differentiation.

Covers exactly the operator set the enhancement U-Net and its losses
need: grouped/strided conv2d, GroupNorm, exact (erf) GELU, x2 bilinear
upsampling, elementwise arithmetic, channel concat/slice, reflect
padding, crop, and mean/L1 reductions.

Forward ops append (output, backward_fn) nodes to a thread-local tape
whenever any input requires grad; backward() replays the tape in exact
reverse execution order, accumulating gradients with +=, then clears it.
Tensors default to float32; every op preserves the input dtype, which
lets tests run the same code in float64 against finite differences.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .errors import GraphError, ShapeError

# scipy's scalar special-function loops release the GIL, so chunking large
# elementwise calls across a couple of threads is bit-deterministic and cheap
_ELEMENTWISE_POOL = ThreadPoolExecutor(max_workers=2)
_PARALLEL_THRESHOLD = 1 << 17


def _ndtr_fast(x: np.ndarray) -> np.ndarray:
    if x.size < _PARALLEL_THRESHOLD or not x.flags.c_contiguous:
        return ndtr(x)
    out = np.empty_like(x)
    flat_in = x.reshape(-1)
    flat_out = out.reshape(-1)
    half = flat_in.size // 2
    jobs = [(flat_in[:half], flat_out[:half]), (flat_in[half:], flat_out[half:])]
    list(_ELEMENTWISE_POOL.map(lambda ab: ndtr(ab[0], out=ab[1]), jobs))
    return out

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_state = threading.local()


def _tape() -> list:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = []
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def clear_graph() -> None:
    """Drop any recorded-but-unconsumed operations on this thread's tape."""
    _tape().clear()


class no_grad:
    """Context manager: ops inside record nothing and allocate no grad buffers."""

    def __enter__(self) -> "no_grad":
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc) -> None:
        _state.grad_enabled = self._prev


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()  # copy: callers may hand us shared buffers
        else:
            self.grad += g

    def _accum_owned(self, g: np.ndarray) -> None:
        # for backward rules handing over a freshly allocated buffer
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _record(out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
    _tape().append((out, backward_fn))


def _tracking(*tensors: Optional[Tensor]) -> bool:
    return grad_enabled() and any(t is not None and t.requires_grad for t in tensors)


def backward(loss: Tensor) -> None:
    """Populate grads of everything reachable from a scalar loss, then clear the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward() on a tensor that is not part of a recorded graph")
    tape = _tape()
    if not tape:
        raise GraphError("backward() with no recorded operations (graph already consumed)")
    loss.accumulate_grad(np.ones_like(loss.data))
    for out, fn in reversed(tape):
        if out.grad is not None:
            fn(out.grad)
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=_tracking(a, b))
    if out.requires_grad:

        def bwd(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

        _record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, requires_grad=_tracking(a, b))
    if out.requires_grad:
        a_data, b_data = a.data, b.data

        def bwd(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum_owned(g * b_data)
            if b.requires_grad:
                b._accum_owned(g * a_data)

        _record(out, bwd)
    return out


def mul_scalar(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * x.data.dtype.type(s), requires_grad=_tracking(x))
    if out.requires_grad:

        def bwd(g: np.ndarray) -> None:
            x._accum_owned(g * x.data.dtype.type(s))

        _record(out, bwd)
    return out


def clamp01(x: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradients pass only through strictly interior values."""
    out = Tensor(np.clip(x.data, 0.0, 1.0), requires_grad=_tracking(x))
    if out.requires_grad:
        mask = ((x.data > 0.0) & (x.data < 1.0)).astype(x.data.dtype)

        def bwd(g: np.ndarray) -> None:
            x._accum_owned(g * mask)

        _record(out, bwd)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact GELU x * Phi(x), with Phi the erf-based standard normal CDF (ndtr)."""
    cdf = _ndtr_fast(x.data)
    out = Tensor(x.data * cdf, requires_grad=_tracking(x))
    if out.requires_grad:
        x_data = x.data

        def bwd(g: np.ndarray) -> None:
            # d/dx = Phi(x) + x * phi(x), built in place
            t = np.multiply(x_data, x_data)
            t *= x_data.dtype.type(-0.5)
            np.exp(t, out=t)
            t *= x_data.dtype.type(_INV_SQRT_2PI)
            t *= x_data
            t += cdf
            t *= g
            x._accum_owned(t)

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# shape


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: rank-4 tensors required, got {a.shape}, {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1), requires_grad=_tracking(a, b))
    if out.requires_grad:
        ca = a.shape[1]

        def bwd(g: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate_grad(g[:, :ca])
            if b.requires_grad:
                b.accumulate_grad(g[:, ca:])

        _record(out, bwd)
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"slice_channels: rank-4 tensor required, got {x.shape}")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_channels: bad range [{start}, {stop}) for C={x.shape[1]}")
    out = Tensor(x.data[:, start:stop].copy(), requires_grad=_tracking(x))
    if out.requires_grad:

        def bwd(g: np.ndarray) -> None:
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            x._accum_owned(gx)

        _record(out, bwd)
    return out


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"crop: rank-4 tensor required, got {x.shape}")
    if top < 0 or left < 0 or top + height > x.shape[2] or left + width > x.shape[3]:
        raise ShapeError(
            f"crop: window {height}x{width}@({top},{left}) outside tensor {x.shape}"
        )
    out = Tensor(x.data[:, :, top : top + height, left : left + width].copy(),
                 requires_grad=_tracking(x))
    if out.requires_grad:

        def bwd(g: np.ndarray) -> None:
            gx = np.zeros_like(x.data)
            gx[:, :, top : top + height, left : left + width] = g
            x._accum_owned(gx)

        _record(out, bwd)
    return out


def pad_reflect(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"pad_reflect: rank-4 tensor required, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if max(top, bottom) > h - 1 or max(left, right) > w - 1:
        raise ShapeError(
            f"pad_reflect: pads ({top},{bottom},{left},{right}) too large for {h}x{w}"
        )
    idx_r = np.pad(np.arange(h), (top, bottom), mode="reflect")
    idx_c = np.pad(np.arange(w), (left, right), mode="reflect")
    out = Tensor(x.data[:, :, idx_r][:, :, :, idx_c], requires_grad=_tracking(x))
    if out.requires_grad:

        def bwd(g: np.ndarray) -> None:
            folded = np.zeros((*x.shape[:2], h, len(idx_c)), dtype=g.dtype)
            np.add.at(folded, (slice(None), slice(None), idx_r), g)
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None), slice(None), slice(None), idx_c), folded)
            x._accum_owned(gx)

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# reductions


def mean(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype), requires_grad=_tracking(x))
    if out.requires_grad:
        inv_n = 1.0 / x.data.size

        def bwd(g: np.ndarray) -> None:
            x._accum_owned(np.full_like(x.data, g * x.data.dtype.type(inv_n)))

        _record(out, bwd)
    return out


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = Tensor(np.asarray(np.abs(diff).mean(), dtype=pred.data.dtype),
                 requires_grad=_tracking(pred, target))
    if out.requires_grad:
        inv_n = 1.0 / diff.size

        def bwd(g: np.ndarray) -> None:
            s = np.sign(diff) * (g * diff.dtype.type(inv_n))
            if pred.requires_grad:
                pred._accum_owned(s)
            if target.requires_grad:
                target._accum_owned(-s)

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# conv2d


def _conv_out_dim(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, groups: int, k_h: int, k_w: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    """(B, G, cg*kH*kW, out_h*out_w) patch matrix from a padded input."""
    b, c_in = xp.shape[:2]
    cg = c_in // groups
    xg = xp.reshape(b, groups, cg, xp.shape[2], xp.shape[3])
    cols = np.empty((b, groups, cg, k_h, k_w, out_h, out_w), dtype=xp.dtype)
    for i in range(k_h):
        for j in range(k_w):
            cols[:, :, :, i, j] = xg[
                :, :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ]
    return cols.reshape(b, groups, cg * k_h * k_w, out_h * out_w)


def _col2im(gcols: np.ndarray, x_shape: tuple, groups: int, k_h: int, k_w: int,
            stride: int, padding: int, out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the input."""
    b, c_in, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    g6 = gcols.reshape(b, c_in, k_h, k_w, out_h, out_w)
    gxp = np.zeros((b, c_in, hp, wp), dtype=gcols.dtype)
    for i in range(k_h):
        for j in range(k_w):
            gxp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += \
                g6[:, :, i, j]
    if padding:
        return gxp[:, :, padding : padding + h, padding : padding + w]
    return gxp


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation with zero padding; groups=Cin gives depthwise convolution."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d: rank-4 tensors required, got input {x.shape} and weight {weight.shape}"
        )
    b, c_in, h, w = x.shape
    c_out, cg, k_h, k_w = weight.shape
    if c_in % groups or c_out % groups or cg != c_in // groups:
        raise ShapeError(
            f"conv2d: channel/group mismatch: input {x.shape}, weight {weight.shape}, "
            f"groups={groups}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match Cout={c_out}")
    out_h = _conv_out_dim(h, k_h, stride, padding)
    out_w = _conv_out_dim(w, k_w, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: kernel {k_h}x{k_w} stride {stride} too large for input {x.shape} "
            f"with padding {padding}"
        )

    if groups == c_in and cg == 1:
        return _conv2d_depthwise(x, weight, bias, stride, padding, out_h, out_w)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, groups, k_h, k_w, stride, out_h, out_w)
    wmat = weight.data.reshape(groups, c_out // groups, cg * k_h * k_w)
    out_data = np.matmul(wmat[None], cols).reshape(b, c_out, out_h, out_w)
    if bias is not None:
        out_data += bias.data.reshape(1, c_out, 1, 1)
    out = Tensor(out_data, requires_grad=_tracking(x, weight, bias))
    if out.requires_grad:

        def bwd(g: np.ndarray) -> None:
            gmat = g.reshape(b, groups, c_out // groups, out_h * out_w)
            if bias is not None and bias.requires_grad:
                bias._accum_owned(g.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                gw = np.matmul(gmat, cols.transpose(0, 1, 3, 2)).sum(axis=0)
                weight._accum_owned(gw.reshape(weight.shape))
            if x.requires_grad:
                gcols = np.matmul(wmat.transpose(0, 2, 1)[None], gmat)
                x._accum_owned(
                    _col2im(gcols, x.shape, groups, k_h, k_w, stride, padding, out_h, out_w)
                )

        _record(out, bwd)
    return out


def _conv2d_depthwise(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    stride: int,
    padding: int,
    out_h: int,
    out_w: int,
) -> Tensor:
    """Depthwise path: the kernel is applied as kH*kW shifted multiply-adds."""
    b, c, h, w = x.shape
    _, _, k_h, k_w = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    out_data = np.zeros((b, c, out_h, out_w), dtype=x.data.dtype)
    for i in range(k_h):
        for j in range(k_w):
            out_data += weight.data[:, 0, i, j][None, :, None, None] * xp[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ]
    if bias is not None:
        out_data += bias.data.reshape(1, c, 1, 1)
    out = Tensor(out_data, requires_grad=_tracking(x, weight, bias))
    if out.requires_grad:

        def bwd(g: np.ndarray) -> None:
            if bias is not None and bias.requires_grad:
                bias._accum_owned(g.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                gw = np.empty_like(weight.data)
                g2 = g.reshape(b, c, -1)
                for i in range(k_h):
                    for j in range(k_w):
                        xs = xp[
                            :, :, i : i + stride * out_h : stride,
                            j : j + stride * out_w : stride,
                        ].reshape(b, c, -1)
                        gw[:, 0, i, j] = np.einsum("bcl,bcl->c", g2, xs)
                weight._accum_owned(gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(k_h):
                    for j in range(k_w):
                        gxp[
                            :, :, i : i + stride * out_h : stride,
                            j : j + stride * out_w : stride,
                        ] += weight.data[:, 0, i, j][None, :, None, None] * g
                if padding:
                    gxp = gxp[:, :, padding : padding + h, padding : padding + w]
                x._accum_owned(gxp)

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# normalization


def group_norm(
    x: Tensor, num_groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5
) -> Tensor:
    """Normalize each (batch, channel-group) slab to zero mean / unit variance."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm: rank-4 tensor required, got {x.shape}")
    b, c = x.shape[:2]
    if c % num_groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"group_norm: gain/bias must be shape ({c},), got {gain.shape}/{bias.shape}"
        )
    xg = x.data.reshape(b, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)  # population variance
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (xg - mu) * inv_std
    xhat4 = xhat.reshape(x.shape)
    out_data = xhat4 * gain.data.reshape(1, c, 1, 1) + bias.data.reshape(1, c, 1, 1)
    out = Tensor(out_data, requires_grad=_tracking(x, gain, bias))
    if out.requires_grad:
        n = xg.shape[2]

        def bwd(g: np.ndarray) -> None:
            if bias.requires_grad:
                bias._accum_owned(g.sum(axis=(0, 2, 3)))
            if gain.requires_grad:
                gain._accum_owned((g * xhat4).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = (g * gain.data.reshape(1, c, 1, 1)).reshape(b, num_groups, -1)
                t1 = dxhat.sum(axis=2, keepdims=True)
                t2 = (dxhat * xhat).sum(axis=2, keepdims=True)
                dx = inv_std * (dxhat - (t1 + xhat * t2) / n)
                x._accum_owned(dx.reshape(x.shape))

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# upsampling


@lru_cache(maxsize=64)
def _up2_matrix(n: int, dtype_name: str) -> np.ndarray:
    """(2n, n) interpolation matrix for x2 bilinear upsampling, half-pixel centers."""
    src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    m = np.zeros((2 * n, n), dtype=np.dtype(dtype_name))
    rows = np.arange(2 * n)
    np.add.at(m, (rows, lo), (1.0 - frac).astype(m.dtype))
    np.add.at(m, (rows, hi), frac.astype(m.dtype))
    return m


def upsample_bilinear_x2(x: Tensor) -> Tensor:
    """Double both spatial dims with half-pixel-center bilinear sampling."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear_x2: rank-4 tensor required, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    mh = _up2_matrix(h, x.data.dtype.name)
    mw = _up2_matrix(w, x.data.dtype.name)
    out = Tensor(np.matmul(np.matmul(mh, x.data), mw.T), requires_grad=_tracking(x))
    if out.requires_grad:

        def bwd(g: np.ndarray) -> None:
            x._accum_owned(np.matmul(np.matmul(mh.T, g), mw))

        _record(out, bwd)
    return out
