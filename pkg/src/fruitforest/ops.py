"""Dense tensor kernels: convolution, pooling, dense layers, activations.

Single images are HWC arrays and batches are NHWC; everything runs in the
caller's dtype (float32 in production, float64 in some checks). Convolution
uses the cross-correlation convention. All functions are pure: argmax maps
are returned to the caller, never cached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidSpecError, NonFiniteInputError, ShapeMismatchError

DTYPE = np.float32

# Column blocks in im2col buffers are capped to this many bytes; the chunk
# size depends only on shapes, so runs stay reproducible across machines.
_MAX_COLS_BYTES = 64 * 1024 * 1024


@dataclass
class Conv2dLayer:
    """Square cross-correlation kernel [K, K, C_in, C_out] plus bias [C_out]."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: tuple[int, int] = (1, 1)
    padding_mode: str = "same"

    def __post_init__(self) -> None:
        if self.kernel.ndim != 4 or self.kernel.shape[0] != self.kernel.shape[1]:
            raise InvalidSpecError(f"kernel must be [K, K, C_in, C_out], got {self.kernel.shape}")
        if min(self.kernel.shape) < 1:
            raise InvalidSpecError(f"kernel dimensions must be positive, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[3],):
            raise InvalidSpecError(
                f"bias shape {self.bias.shape} does not match C_out {self.kernel.shape[3]}"
            )
        if len(self.stride) != 2 or min(self.stride) < 1:
            raise InvalidSpecError(f"stride must be a positive pair, got {self.stride}")
        if self.padding_mode not in ("same", "valid"):
            raise InvalidSpecError(f"unknown padding mode {self.padding_mode!r}")

    @property
    def parameter_count(self) -> int:
        return self.kernel.size + self.bias.size


@dataclass
class DenseLayer:
    """Affine map with weights [F_in, F_out] and bias [F_out]."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weights.ndim != 2:
            raise InvalidSpecError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise InvalidSpecError(
                f"bias shape {self.bias.shape} does not match F_out {self.weights.shape[1]}"
            )

    @property
    def parameter_count(self) -> int:
        return self.weights.size + self.bias.size


@dataclass(frozen=True)
class MaxPoolSpec:
    """Window and stride for valid-mode max pooling with floor semantics."""

    window: tuple[int, int] = (2, 2)
    stride: tuple[int, int] = (2, 2)
    padding_mode: str = "valid"

    def __post_init__(self) -> None:
        if len(self.window) != 2 or min(self.window) < 1:
            raise InvalidSpecError(f"window must be a positive pair, got {self.window}")
        if len(self.stride) != 2 or min(self.stride) < 1:
            raise InvalidSpecError(f"stride must be a positive pair, got {self.stride}")
        if self.padding_mode != "valid":
            raise InvalidSpecError(f"max pooling supports only valid padding, got {self.padding_mode!r}")


def _conv_geometry(h: int, w: int, k: int, stride, padding_mode):
    """Output size and (top, bottom, left, right) zero padding."""
    sh, sw = stride
    if padding_mode == "same":
        oh = -(-h // sh)
        ow = -(-w // sw)
        ph = max((oh - 1) * sh + k - h, 0)
        pw = max((ow - 1) * sw + k - w, 0)
        return oh, ow, (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    if k > h or k > w:
        raise InvalidSpecError(f"{k}x{k} window exceeds {h}x{w} input with valid padding")
    return (h - k) // sh + 1, (w - k) // sw + 1, (0, 0, 0, 0)


def _conv_chunk(n: int, oh: int, ow: int, k: int, cin: int, itemsize: int) -> int:
    per_image = oh * ow * k * k * cin * itemsize
    return max(1, min(n, _MAX_COLS_BYTES // max(per_image, 1)))


def _im2col(padded: np.ndarray, k: int, stride, oh: int, ow: int) -> np.ndarray:
    """Rows are output pixels, columns follow (dy, dx, channel) order."""
    sh, sw = stride
    win = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::sh, ::sw]
    n = padded.shape[0]
    cin = padded.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, k * k * cin)


def conv2d_forward_batch(images: np.ndarray, layer: Conv2dLayer) -> np.ndarray:
    """Cross-correlate an NHWC batch with the layer kernel."""
    n, h, w, c = images.shape
    k, _, cin, cout = layer.kernel.shape
    if c != cin:
        raise ShapeMismatchError(f"input has {c} channels, kernel expects {cin}")
    oh, ow, (pt, pb, pl, pr) = _conv_geometry(h, w, k, layer.stride, layer.padding_mode)
    kmat = layer.kernel.reshape(k * k * cin, cout)
    out = np.empty((n, oh, ow, cout), dtype=images.dtype)
    chunk = _conv_chunk(n, oh, ow, k, cin, images.dtype.itemsize)
    for start in range(0, n, chunk):
        part = images[start : start + chunk]
        padded = np.pad(part, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        cols = _im2col(padded, k, layer.stride, oh, ow)
        block = cols @ kmat
        block += layer.bias
        out[start : start + chunk] = block.reshape(-1, oh, ow, cout)
    return out


def conv2d_backward_batch(
    images: np.ndarray, layer: Conv2dLayer, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward_batch for input, kernel, and bias."""
    n, h, w, c = images.shape
    k, _, cin, cout = layer.kernel.shape
    if c != cin:
        raise ShapeMismatchError(f"input has {c} channels, kernel expects {cin}")
    oh, ow, (pt, pb, pl, pr) = _conv_geometry(h, w, k, layer.stride, layer.padding_mode)
    if upstream.shape != (n, oh, ow, cout):
        raise ShapeMismatchError(
            f"upstream shape {upstream.shape} does not match output shape {(n, oh, ow, cout)}"
        )
    sh, sw = layer.stride
    hp, wp = h + pt + pb, w + pl + pr
    kmat = layer.kernel.reshape(k * k * cin, cout)

    # Flat scatter indices of one image's im2col cells inside its padded plane.
    iy = (np.arange(oh) * sh)[:, None] + np.arange(k)
    ix = (np.arange(ow) * sw)[:, None] + np.arange(k)
    plane = iy[:, None, :, None] * wp + ix[None, :, None, :]
    cell = plane[..., None] * cin + np.arange(cin)
    cell = cell.reshape(-1)

    grad_kernel = np.zeros((k * k * cin, cout), dtype=images.dtype)
    grad_bias = upstream.reshape(-1, cout).sum(axis=0)
    grad_input = np.empty_like(images)
    plane_size = hp * wp * cin
    chunk = _conv_chunk(n, oh, ow, k, cin, images.dtype.itemsize)
    for start in range(0, n, chunk):
        part = images[start : start + chunk]
        m = part.shape[0]
        padded = np.pad(part, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        cols = _im2col(padded, k, layer.stride, oh, ow)
        upmat = upstream[start : start + m].reshape(m * oh * ow, cout)
        grad_kernel += cols.T @ upmat
        gcols = upmat @ kmat.T
        offsets = (np.arange(m) * plane_size)[:, None]
        flat = (offsets + cell).reshape(-1)
        acc = np.bincount(flat, weights=gcols.reshape(-1), minlength=m * plane_size)
        acc = acc.reshape(m, hp, wp, cin)
        grad_input[start : start + m] = acc[:, pt : pt + h, pl : pl + w].astype(images.dtype)
    return grad_input, grad_kernel.reshape(k, k, cin, cout), grad_bias


def maxpool2d_forward_batch(images: np.ndarray, spec: MaxPoolSpec) -> tuple[np.ndarray, np.ndarray]:
    """Pool an NHWC batch; also return flat H*W argmax positions per cell."""
    n, h, w, c = images.shape
    wh, ww = spec.window
    sh, sw = spec.stride
    if wh > h or ww > w:
        raise InvalidSpecError(f"{wh}x{ww} window exceeds {h}x{w} input")
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1
    win = sliding_window_view(images, (wh, ww), axis=(1, 2))[:, ::sh, ::sw]
    flat = win.reshape(n, oh, ow, c, wh * ww)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
    dy, dx = np.divmod(arg, ww)
    src_y = np.arange(oh).reshape(1, oh, 1, 1) * sh + dy
    src_x = np.arange(ow).reshape(1, 1, ow, 1) * sw + dx
    return out, src_y * w + src_x


def maxpool2d_backward_batch(
    argmax_index: np.ndarray, upstream: np.ndarray, input_shape: tuple[int, int, int]
) -> np.ndarray:
    """Route upstream values back to their recorded argmax positions."""
    if upstream.shape != argmax_index.shape:
        raise ShapeMismatchError(
            f"upstream shape {upstream.shape} does not match argmax shape {argmax_index.shape}"
        )
    h, w, c = input_shape
    n = argmax_index.shape[0]
    channels = np.arange(c).reshape(1, 1, 1, c)
    offsets = (np.arange(n) * (h * w)).reshape(n, 1, 1, 1)
    flat = (offsets + argmax_index) * c + channels
    acc = np.bincount(
        flat.reshape(-1), weights=upstream.reshape(-1), minlength=n * h * w * c
    )
    return acc.reshape(n, h, w, c).astype(upstream.dtype)


def _require_hwc(x: np.ndarray, name: str) -> None:
    if x.ndim != 3:
        raise ShapeMismatchError(f"{name} must be an HWC array, got shape {x.shape}")


def conv2d_forward(image: np.ndarray, layer: Conv2dLayer) -> np.ndarray:
    """Cross-correlate one HWC image with the layer kernel."""
    _require_hwc(image, "image")
    return conv2d_forward_batch(image[None], layer)[0]


def conv2d_backward(
    image: np.ndarray, layer: Conv2dLayer, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _require_hwc(image, "image")
    grad_input, grad_kernel, grad_bias = conv2d_backward_batch(image[None], layer, upstream[None])
    return grad_input[0], grad_kernel, grad_bias


def maxpool2d_forward(image: np.ndarray, spec: MaxPoolSpec) -> tuple[np.ndarray, np.ndarray]:
    _require_hwc(image, "image")
    out, arg = maxpool2d_forward_batch(image[None], spec)
    return out[0], arg[0]


def maxpool2d_backward(
    argmax_index: np.ndarray, upstream: np.ndarray, input_shape: tuple[int, int, int]
) -> np.ndarray:
    grad = maxpool2d_backward_batch(argmax_index[None], upstream[None], input_shape)
    return grad[0]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Derivative at exactly zero is defined as zero."""
    if x.shape != upstream.shape:
        raise ShapeMismatchError(f"input shape {x.shape} does not match upstream {upstream.shape}")
    return np.where(x > 0, upstream, upstream.dtype.type(0))


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.ndim != 1 or x.shape[0] != layer.weights.shape[0]:
        raise ShapeMismatchError(
            f"input shape {x.shape} does not match weights {layer.weights.shape}"
        )
    return x @ layer.weights + layer.bias


def dense_backward(
    x: np.ndarray, layer: DenseLayer, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_weights, grad_bias)."""
    if x.ndim != 1 or x.shape[0] != layer.weights.shape[0]:
        raise ShapeMismatchError(
            f"input shape {x.shape} does not match weights {layer.weights.shape}"
        )
    if upstream.shape != (layer.weights.shape[1],):
        raise ShapeMismatchError(
            f"upstream shape {upstream.shape} does not match F_out {layer.weights.shape[1]}"
        )
    return layer.weights @ upstream, np.outer(x, upstream), upstream.copy()


def dense_forward_batch(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.weights.shape[0]:
        raise ShapeMismatchError(
            f"batch shape {x.shape} does not match weights {layer.weights.shape}"
        )
    return x @ layer.weights + layer.bias


def dense_backward_batch(
    x: np.ndarray, layer: DenseLayer, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if upstream.shape != (x.shape[0], layer.weights.shape[1]):
        raise ShapeMismatchError(
            f"upstream shape {upstream.shape} does not match {(x.shape[0], layer.weights.shape[1])}"
        )
    return upstream @ layer.weights.T, x.T @ upstream, upstream.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax of a logit vector."""
    if logits.ndim != 1 or logits.size < 1:
        raise ShapeMismatchError(f"logits must be a non-empty vector, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteInputError("logits contain NaN or infinity")
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def flatten(x: np.ndarray) -> np.ndarray:
    """Row-major linearization."""
    return np.ascontiguousarray(x).reshape(-1)
