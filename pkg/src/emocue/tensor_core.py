"""Dense tensor kernels: convolution, pooling, activations, affine layers.

Tensors are plain :class:`numpy.ndarray` objects. Stored tensors are float32;
every kernel preserves the floating dtype it is given, which is how the
float64 verification mode works (cast inputs and parameters up front, the
kernels follow).

The public kernels take a single sample (``C, H, W`` or a vector). Each has a
``*_batch`` twin operating on a leading batch axis; the network runtime and
the training loop use those, the single-sample versions are thin wrappers.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, GeometryError, NumericError

DTYPE = np.float32


def as_tensor(data, dtype=DTYPE):
    """Coerce ``data`` to a C-contiguous float array with 1 to 4 dims."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if not 1 <= arr.ndim <= 4:
        raise DimensionError(f"tensor must have 1-4 dims, got shape {arr.shape}")
    if 0 in arr.shape:
        raise DimensionError(f"tensor dims must be positive, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("out_channels", "in_channels", "kernel_h", "kernel_w", "stride"):
            if int(getattr(self, name)) < 1:
                raise GeometryError(f"ConvSpec.{name} must be positive")
        if self.padding < 0:
            raise GeometryError("ConvSpec.padding must be nonnegative")

    @property
    def kernel_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def output_hw(self, h, w):
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise GeometryError(
                f"conv {self.kernel_h}x{self.kernel_w} stride {self.stride} pad {self.padding} "
                f"does not fit a {h}x{w} input"
            )
        return oh, ow

    def preserves_shape(self):
        return (
            self.in_channels == self.out_channels
            and self.stride == 1
            and self.kernel_h == self.kernel_w == 2 * self.padding + 1
        )


def pool_output_hw(h, w, window, stride):
    if window < 1 or stride < 1:
        raise GeometryError("pool window and stride must be positive")
    if window > h or window > w:
        raise GeometryError(f"pool window {window} larger than {h}x{w} input")
    return (h - window) // stride + 1, (w - window) // stride + 1


def _check_conv(x, kernel, bias, spec):
    if x.ndim != 4:
        raise DimensionError(f"expected (N, C, H, W) input, got {x.shape}")
    if kernel.shape != spec.kernel_shape:
        raise DimensionError(f"kernel shape {kernel.shape} does not match spec {spec.kernel_shape}")
    if bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias shape {bias.shape} does not match {spec.out_channels} outputs")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"input has {x.shape[1]} channels, spec wants {spec.in_channels}")
    return spec.output_hw(x.shape[2], x.shape[3])


def conv_windows(x, spec):
    """Strided window view of the zero-padded input: (N, C, H', W', kh, kw)."""
    p = spec.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh, ow = spec.output_hw(x.shape[2] - 2 * p, x.shape[3] - 2 * p)
    s = spec.stride
    win = sliding_window_view(x, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    return win[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]


def conv2d_batch(x, kernel, bias, spec):
    _check_conv(x, kernel, bias, spec)
    win = conv_windows(x, spec)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d(x, kernel, bias, spec):
    """Zero-padded strided cross-correlation of one (C, H, W) input."""
    if x.ndim != 3:
        raise DimensionError(f"conv2d expects (C, H, W), got {x.shape}")
    return conv2d_batch(x[None], kernel, bias, spec)[0]


def maxpool_windows(x, window, stride):
    oh, ow = pool_output_hw(x.shape[-2], x.shape[-1], window, stride)
    win = sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return win.reshape(win.shape[:4] + (window * window,))


def maxpool2d_batch(x, window, stride):
    if x.ndim != 4:
        raise DimensionError(f"expected (N, C, H, W) input, got {x.shape}")
    return maxpool_windows(x, window, stride).max(axis=-1)


def maxpool2d(x, window, stride):
    """Max over ``window``-square windows; windows overrunning the edge are dropped."""
    if x.ndim != 3:
        raise DimensionError(f"maxpool2d expects (C, H, W), got {x.shape}")
    return maxpool2d_batch(x[None], window, stride)[0]


def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def dense_batch(x, weights, bias):
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} incompatible with weights {weights.shape}")
    return x @ weights.T + bias


def dense(x, weights, bias):
    if x.ndim != 1:
        raise DimensionError(f"dense expects a vector, got {x.shape}")
    return dense_batch(x[None], weights, bias)[0]


def softmax(logits, axis=-1):
    """Exp-normalise along ``axis`` after subtracting the max (never skipped)."""
    logits = np.asarray(logits)
    if logits.size == 0:
        raise DimensionError("softmax needs at least one logit")
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax received a non-finite logit")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def global_avg_pool_batch(x):
    if x.ndim != 4:
        raise DimensionError(f"expected (N, C, H, W) input, got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool(x):
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool expects (C, H, W), got {x.shape}")
    return x.mean(axis=(1, 2))


def check_residual(spec1, spec2, channels):
    for spec in (spec1, spec2):
        if not spec.preserves_shape() or spec.in_channels != channels:
            raise GeometryError(
                f"residual branch conv {spec} changes the shape of a {channels}-channel input"
            )


def residual_block_batch(x, w1, b1, spec1, w2, b2, spec2):
    check_residual(spec1, spec2, x.shape[1])
    h = relu(conv2d_batch(x, w1, b1, spec1))
    return relu(x + conv2d_batch(h, w2, b2, spec2))


def residual_block(x, w1, b1, spec1, w2, b2, spec2):
    """``relu(x + conv2(relu(conv1(x))))`` with an identity shortcut."""
    if x.ndim != 3:
        raise DimensionError(f"residual_block expects (C, H, W), got {x.shape}")
    return residual_block_batch(x[None], w1, b1, spec1, w2, b2, spec2)[0]
