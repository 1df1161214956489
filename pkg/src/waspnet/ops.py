"""Dense tensor kernels: atrous convolution, resampling, pooling, activations.

All tensors are numpy arrays in (batch, channel, height, width) layout.
Float32 inputs produce float32 outputs; float64 inputs stay float64 so the
same kernels can serve as the high-precision shadow in gradient checks.
Convolution and interpolation accumulate in float64 regardless of the
storage type.

Index alignment of the atrous sum
---------------------------------
Taps are applied as a centred cross-correlation over an explicitly
zero-padded input::

    y[i] = sum_{k=0}^{K-1} xpad[i + r*k] * w[k],   xpad = [0]*pad + x + [0]*pad

With ``pad = r*(K-1)/2`` the middle tap sits on ``x[i]``. Rewriting with the
left-anchored one-based form ``sum_{k=1}^{K} x[j + r*k] w[k]`` gives
``j = i - pad - r``: our output ``i`` is that sum evaluated ``pad + r``
samples to the left.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ShapeError
from .validation import check_finite, check_tensor

_ACC = np.float64


def _pair(v, name):
    if np.isscalar(v):
        v = (int(v), int(v))
    v = tuple(int(a) for a in v)
    if len(v) != 2:
        raise ShapeError(f"{name}: expected an int or a pair, got {v}")
    return v


def _out_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays if a is not None])


def conv_output_size(size, kernel, rate=1, pad=0, stride=1):
    """Spatial output length of a (dilated) convolution along one axis."""
    return (size + 2 * pad - (kernel - 1) * rate - 1) // stride + 1


def effective_kernel(kernel, rate):
    """Extent of a dilated kernel: ``k + (k - 1)(r - 1)``."""
    return kernel + (kernel - 1) * (rate - 1)


# ---------------------------------------------------------------------------
# 1-D reference
# ---------------------------------------------------------------------------


def atrous_conv1d(x, w, r=1, padding=0):
    """Dilated 1-D cross-correlation, the scalar form of the 2-D kernel.

    ``padding`` zeros are added to both ends of ``x``. Use
    ``padding=r*(len(w)-1)//2`` for "same" output length with odd ``len(w)``.
    """
    x = np.asarray(x, dtype=_ACC).ravel()
    w = np.asarray(w, dtype=_ACC).ravel()
    if x.size == 0:
        raise ShapeError("atrous_conv1d: empty input")
    if w.size == 0:
        raise ShapeError("atrous_conv1d: empty kernel")
    if int(r) != r or r < 1:
        raise ShapeError(f"atrous_conv1d: rate must be a positive integer, got {r}")
    check_finite(x, "atrous_conv1d input")
    check_finite(w, "atrous_conv1d kernel")
    r = int(r)
    n_out = conv_output_size(x.size, w.size, r, padding)
    if n_out < 1:
        raise ShapeError("atrous_conv1d: kernel footprint exceeds padded input")
    xp = np.pad(x, padding)
    y = np.zeros(n_out, dtype=_ACC)
    for k in range(w.size):
        y += w[k] * xp[r * k : r * k + n_out]
    return y


# ---------------------------------------------------------------------------
# 2-D convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvSpec:
    """Weights plus geometry of one 2-D convolution.

    ``kernel`` has shape (out_ch, in_ch, kh, kw). ``dilation`` is the atrous
    rate per axis; rate 1 is ordinary convolution.
    """

    kernel: np.ndarray
    bias: np.ndarray = None
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)
    padding: tuple = (0, 0)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be (out, in, kh, kw), got {self.kernel.shape}")
        self.stride = _pair(self.stride, "stride")
        self.dilation = _pair(self.dilation, "dilation")
        self.padding = _pair(self.padding, "padding")
        if min(self.stride) < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if min(self.dilation) < 1:
            raise ShapeError(f"dilation rate must be >= 1, got {self.dilation}")
        if min(self.padding) < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.kernel.shape[0],):
                raise ShapeError(
                    f"bias shape {self.bias.shape} != ({self.kernel.shape[0]},)"
                )

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[1]

    def output_hw(self, h, w):
        kh, kw = self.kernel.shape[2:]
        oh = conv_output_size(h, kh, self.dilation[0], self.padding[0], self.stride[0])
        ow = conv_output_size(w, kw, self.dilation[1], self.padding[1], self.stride[1])
        return oh, ow


def zero_stuff(kernel, rate):
    """Insert ``rate - 1`` zeros between neighbouring taps of a kernel."""
    kernel = np.asarray(kernel)
    rh, rw = _pair(rate, "rate")
    o, i, kh, kw = kernel.shape
    out = np.zeros((o, i, effective_kernel(kh, rh), effective_kernel(kw, rw)), kernel.dtype)
    out[:, :, ::rh, ::rw] = kernel
    return out


def _geometry(x, spec):
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {spec.in_channels}")
    oh, ow = spec.output_hw(h, w)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: degenerate output {oh}x{ow} for input {h}x{w}, "
            f"kernel {spec.kernel.shape[2:]}, rate {spec.dilation}, pad {spec.padding}"
        )
    return oh, ow


def _is_pointwise(spec):
    return spec.kernel.shape[2:] == (1, 1) and spec.stride == (1, 1) and spec.padding == (0, 0)


def _im2col(x, spec, oh, ow):
    """Gather dilated taps into a (n, c*kh*kw, oh*ow) float64 matrix."""
    n, c = x.shape[:2]
    kh, kw = spec.kernel.shape[2:]
    (sh, sw), (rh, rw), (ph, pw) = spec.stride, spec.dilation, spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=_ACC)
    for i in range(kh):
        hs = i * rh
        for j in range(kw):
            ws = j * rw
            cols[:, :, i, j] = xp[:, :, hs : hs + sh * (oh - 1) + 1 : sh, ws : ws + sw * (ow - 1) + 1 : sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols, x_shape, spec, oh, ow):
    n, c, h, w = x_shape
    kh, kw = spec.kernel.shape[2:]
    (sh, sw), (rh, rw), (ph, pw) = spec.stride, spec.dilation, spec.padding
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    gp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=_ACC)
    for i in range(kh):
        hs = i * rh
        for j in range(kw):
            ws = j * rw
            gp[:, :, hs : hs + sh * (oh - 1) + 1 : sh, ws : ws + sw * (ow - 1) + 1 : sw] += cols[:, :, i, j]
    return gp[:, :, ph : ph + h, pw : pw + w]


def conv2d(x, spec):
    """Dilated 2-D cross-correlation of ``x`` with ``spec.kernel``."""
    x = check_tensor(x, "conv2d input")
    oh, ow = _geometry(x, spec)
    n = x.shape[0]
    o = spec.out_channels
    w2 = spec.kernel.reshape(o, -1).astype(_ACC, copy=False)
    if _is_pointwise(spec):
        cols = x.reshape(n, x.shape[1], -1).astype(_ACC, copy=False)
    else:
        cols = _im2col(x, spec, oh, ow)
    out = np.matmul(w2, cols)
    if spec.bias is not None:
        out += spec.bias.astype(_ACC)[None, :, None]
    out = out.reshape(n, o, oh, ow).astype(_out_dtype(x, spec.kernel, spec.bias), copy=False)
    return check_finite(out, "conv2d output")


def conv2d_backward(x, spec, grad_out):
    """Gradients of a conv2d with respect to input, kernel and bias.

    Returns ``(grad_x, grad_kernel, grad_bias)``; ``grad_bias`` is None when
    ``spec.bias`` is None.
    """
    x = check_tensor(x, "conv2d_backward input")
    oh, ow = _geometry(x, spec)
    n, c = x.shape[:2]
    o = spec.out_channels
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (n, o, oh, ow):
        raise ShapeError(f"conv2d_backward: grad_out {grad_out.shape} != {(n, o, oh, ow)}")
    check_finite(grad_out, "conv2d_backward grad_out")
    g = grad_out.reshape(n, o, oh * ow).astype(_ACC, copy=False)
    w2 = spec.kernel.reshape(o, -1).astype(_ACC, copy=False)
    pointwise = _is_pointwise(spec)
    if pointwise:
        cols = x.reshape(n, c, -1).astype(_ACC, copy=False)
    else:
        cols = _im2col(x, spec, oh, ow)
    gk = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(spec.kernel.shape)
    gcols = np.matmul(w2.T, g)
    gx = gcols.reshape(x.shape) if pointwise else _col2im(gcols, x.shape, spec, oh, ow)
    gb = None
    if spec.bias is not None:
        gb = g.sum(axis=(0, 2)).astype(spec.bias.dtype)
    return (
        gx.astype(x.dtype, copy=False),
        gk.astype(spec.kernel.dtype, copy=False),
        gb,
    )


# ---------------------------------------------------------------------------
# Resampling and pooling
# ---------------------------------------------------------------------------


def _interp_matrix(n_in, n_out):
    # align_corners=False: source coordinate (dst + 0.5) * in/out - 0.5, clamped
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=_ACC) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    A = np.zeros((n_out, n_in), dtype=_ACC)
    rows = np.arange(n_out)
    np.add.at(A, (rows, i0), 1.0 - frac)
    np.add.at(A, (rows, i1), frac)
    return A


def bilinear_resize(x, out_h, out_w):
    """Bilinear resampling with the align-corners-false convention."""
    x = check_tensor(x, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target {out_h}x{out_w} must be positive")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    Ah, Aw = _interp_matrix(h, out_h), _interp_matrix(w, out_w)
    out = np.einsum("ph,nchw,qw->ncpq", Ah, x.astype(_ACC, copy=False), Aw, optimize=True)
    return out.astype(x.dtype, copy=False)


def bilinear_resize_backward(grad_out, in_h, in_w):
    grad_out = np.asarray(grad_out)
    oh, ow = grad_out.shape[2:]
    if (oh, ow) == (in_h, in_w):
        return grad_out.copy()
    Ah, Aw = _interp_matrix(in_h, oh), _interp_matrix(in_w, ow)
    g = np.einsum("ph,ncpq,qw->nchw", Ah, grad_out.astype(_ACC, copy=False), Aw, optimize=True)
    return g.astype(grad_out.dtype, copy=False)


def global_avg_pool(x):
    x = check_tensor(x, "global_avg_pool input")
    return x.mean(axis=(2, 3), keepdims=True, dtype=_ACC).astype(x.dtype, copy=False)


def global_avg_pool_backward(grad_out, in_shape):
    h, w = in_shape[2:]
    return np.broadcast_to(grad_out / (h * w), in_shape).copy()


def maxpool2d(x, kernel=3, stride=2, padding=1):
    """Max pooling; returns ``(out, argmax)`` where argmax feeds the backward."""
    x = check_tensor(x, "maxpool2d input")
    n, c, h, w = x.shape
    oh = conv_output_size(h, kernel, 1, padding, stride)
    ow = conv_output_size(w, kernel, 1, padding, stride)
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool2d: degenerate output {oh}x{ow}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2), constant_values=-np.inf)
    taps = np.stack(
        [
            xp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
            for i in range(kernel)
            for j in range(kernel)
        ]
    )
    arg = taps.argmax(axis=0)
    out = np.take_along_axis(taps, arg[None], axis=0)[0]
    return out, arg


def maxpool2d_backward(grad_out, arg, in_shape, kernel=3, stride=2, padding=1):
    n, c, h, w = in_shape
    oh, ow = grad_out.shape[2:]
    gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    for t in range(kernel * kernel):
        i, j = divmod(t, kernel)
        gp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += np.where(
            arg == t, grad_out, 0
        )
    return gp[:, :, padding : padding + h, padding : padding + w]


# ---------------------------------------------------------------------------
# Pointwise ops
# ---------------------------------------------------------------------------


def relu(x):
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_channels(x):
    """Softmax over axis 1 of an (n, c, h, w) tensor."""
    x = check_tensor(x, "softmax_channels input")
    z = x.astype(_ACC) - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)


def softmax_channels_backward(grad_out, y):
    return (y * (grad_out - (grad_out * y).sum(axis=1, keepdims=True))).astype(y.dtype, copy=False)


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one batchnorm layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
        )


def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def batchnorm(x, params, mode="eval"):
    """Per-channel normalisation. Returns ``(out, cache)``.

    In train mode the batch statistics are used and the running statistics
    in ``params`` are updated in place; eval mode reads the running ones.
    """
    _check_mode(mode)
    x = check_tensor(x, "batchnorm input")
    shape = (1, -1, 1, 1)
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3), dtype=_ACC)
        var = x.var(axis=(0, 2, 3), dtype=_ACC)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * m / max(m - 1, 1)
        mom = params.momentum
        params.running_mean[...] = (1 - mom) * params.running_mean + mom * mean
        params.running_var[...] = (1 - mom) * params.running_var + mom * unbiased
    else:
        mean = params.running_mean.astype(_ACC)
        var = params.running_var.astype(_ACC)
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * params.gamma.astype(_ACC).reshape(shape) + params.beta.astype(_ACC).reshape(shape)
    cache = (xhat, inv_std, mode)
    return out.astype(x.dtype, copy=False), cache


def batchnorm_backward(grad_out, cache, params):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, mode = cache
    shape = (1, -1, 1, 1)
    g = grad_out.astype(_ACC, copy=False)
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    gbeta = g.sum(axis=(0, 2, 3))
    gxhat = g * params.gamma.astype(_ACC).reshape(shape)
    if mode == "train":
        m = g.shape[0] * g.shape[2] * g.shape[3]
        gx = (
            inv_std.reshape(shape)
            / m
            * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True) - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        )
    else:
        gx = gxhat * inv_std.reshape(shape)
    dt = grad_out.dtype
    return gx.astype(dt), ggamma.astype(params.gamma.dtype), gbeta.astype(params.beta.dtype)


def dropout(x, p=0.5, mode="eval", rng=None):
    """Inverted dropout. Returns ``(out, mask)``; mask is None in eval mode."""
    _check_mode(mode)
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = np.asarray(x)
    if x.size == 0:
        raise ShapeError("dropout: empty tensor")
    if mode == "eval" or p == 0:
        return x, None
    rng = np.random.default_rng() if rng is None else rng
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask
