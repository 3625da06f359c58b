"""The 4-layer network: four conv/relu/pool blocks, three dense layers.

Besides class probabilities, the forward pass can expose named taps
(conv4_pooled, dense1, dense2) whose flattened activations concatenate
into one deep-feature vector per image.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import container, ops
from .errors import ContainerError, InvalidSpecError, ShapeMismatchError, UnknownTapError
from .rng import ROLE_INIT, derive_rng

TAP_NAMES = ("conv4_pooled", "dense1", "dense2")

MODEL_MAGIC = b"GRNM"
MODEL_VERSION = 1
FEATURES_MAGIC = b"GRFX"
FEATURES_VERSION = 1

# Forward passes over image collections run in fixed-size slices; the size is
# a constant so repeated runs chunk identically.
_EXTRACT_CHUNK = 32


@dataclass(frozen=True)
class Cnn4Config:
    input_shape: tuple[int, int, int] = (100, 100, 4)
    conv_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    kernel: int = 5
    dense_sizes: tuple[int, int] = (1024, 256)
    num_classes: int = 120


def _stage_spatial(config: Cnn4Config) -> list[tuple[int, int]]:
    """Spatial size after each conv (same) and each 2x2/2 pool, interleaved."""
    h, w = config.input_shape[:2]
    sizes = []
    for _ in config.conv_channels:
        sizes.append((h, w))
        h = (h - 2) // 2 + 1
        w = (w - 2) // 2 + 1
        sizes.append((h, w))
    return sizes


def flattened_conv_size(config: Cnn4Config) -> int:
    h, w = _stage_spatial(config)[-1]
    return h * w * config.conv_channels[-1]


@dataclass
class Cnn4Model:
    config: Cnn4Config
    convs: list[ops.Conv2dLayer]
    pool: ops.MaxPoolSpec
    dense1: ops.DenseLayer
    dense2: ops.DenseLayer
    dense3: ops.DenseLayer

    def parameters(self) -> list[np.ndarray]:
        arrays = []
        for conv in self.convs:
            arrays.extend([conv.kernel, conv.bias])
        for dense in (self.dense1, self.dense2, self.dense3):
            arrays.extend([dense.weights, dense.bias])
        return arrays

    def forward_train(self, images: np.ndarray, dropout: float = 0.0, rng=None):
        return _forward_batch(self, images, dropout=dropout, rng=rng)

    def backward(self, cache, grad_logits: np.ndarray) -> list[np.ndarray]:
        return _backward_batch(self, cache, grad_logits)


def build_cnn4(config: Cnn4Config, seed: int) -> Cnn4Model:
    """Construct the model with ReLU-calibrated scaled-normal initialization."""
    _validate_config(config)
    rng = derive_rng(seed, ROLE_INIT)
    arrays = []
    in_channels = config.input_shape[2]
    k = config.kernel
    for out_channels in config.conv_channels:
        arrays.append(_he_normal(rng, (k, k, in_channels, out_channels), k * k * in_channels))
        arrays.append(np.zeros(out_channels, dtype=ops.DTYPE))
        in_channels = out_channels
    fan_in = flattened_conv_size(config)
    for width in (*config.dense_sizes, config.num_classes):
        arrays.append(_he_normal(rng, (fan_in, width), fan_in))
        arrays.append(np.zeros(width, dtype=ops.DTYPE))
        fan_in = width
    return _assemble(config, arrays)


def _validate_config(config: Cnn4Config) -> None:
    h, w, c = config.input_shape
    if min(h, w) < 16:
        raise InvalidSpecError(
            f"input spatial size {h}x{w} is below 16; four pooling halvings degenerate"
        )
    if c < 1:
        raise InvalidSpecError("input needs at least one channel")
    if len(config.conv_channels) != 4 or min(config.conv_channels) < 1:
        raise InvalidSpecError(f"conv_channels must be four positive sizes, got {config.conv_channels}")
    if len(config.dense_sizes) != 2 or min(config.dense_sizes) < 1:
        raise InvalidSpecError(f"dense_sizes must be two positive sizes, got {config.dense_sizes}")
    if config.kernel < 1:
        raise InvalidSpecError(f"kernel size must be positive, got {config.kernel}")
    if config.num_classes < 2:
        raise InvalidSpecError(f"need at least two classes, got {config.num_classes}")


def _he_normal(rng, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(ops.DTYPE)


def _assemble(config: Cnn4Config, arrays: list[np.ndarray]) -> Cnn4Model:
    convs = [
        ops.Conv2dLayer(kernel=arrays[2 * i], bias=arrays[2 * i + 1])
        for i in range(len(config.conv_channels))
    ]
    base = 2 * len(config.conv_channels)
    dense = [
        ops.DenseLayer(weights=arrays[base + 2 * i], bias=arrays[base + 2 * i + 1])
        for i in range(3)
    ]
    return Cnn4Model(config=config, convs=convs, pool=ops.MaxPoolSpec(), dense1=dense[0], dense2=dense[1], dense3=dense[2])


@dataclass
class _ForwardCache:
    conv_steps: list[tuple[np.ndarray, np.ndarray, np.ndarray, tuple[int, int, int]]]
    conv_out: np.ndarray
    flat: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray
    mask1: np.ndarray | None
    fed1: np.ndarray
    pre2: np.ndarray
    act2: np.ndarray
    mask2: np.ndarray | None
    fed2: np.ndarray


def _dropout_mask(shape, rate: float, rng, dtype) -> np.ndarray:
    keep = (rng.random(shape) >= rate).astype(dtype)
    keep /= dtype.type(1.0 - rate)
    return keep


def _forward_batch(model: Cnn4Model, images: np.ndarray, dropout: float = 0.0, rng=None):
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != model.config.input_shape:
        raise ShapeMismatchError(
            f"batch shape {images.shape} does not match input shape {model.config.input_shape}"
        )
    if dropout and rng is None:
        raise InvalidSpecError("dropout requires a random generator")
    conv_steps = []
    current = images
    for conv in model.convs:
        pre = ops.conv2d_forward_batch(current, conv)
        act = ops.relu(pre)
        pooled, argmax = ops.maxpool2d_forward_batch(act, model.pool)
        conv_steps.append((current, pre, argmax, act.shape[1:]))
        current = pooled
    flat = current.reshape(current.shape[0], -1)
    dtype = flat.dtype

    pre1 = ops.dense_forward_batch(flat, model.dense1)
    act1 = ops.relu(pre1)
    mask1 = _dropout_mask(act1.shape, dropout, rng, dtype) if dropout else None
    fed1 = act1 * mask1 if mask1 is not None else act1

    pre2 = ops.dense_forward_batch(fed1, model.dense2)
    act2 = ops.relu(pre2)
    mask2 = _dropout_mask(act2.shape, dropout, rng, dtype) if dropout else None
    fed2 = act2 * mask2 if mask2 is not None else act2

    logits = ops.dense_forward_batch(fed2, model.dense3)
    cache = _ForwardCache(conv_steps, current, flat, pre1, act1, mask1, fed1, pre2, act2, mask2, fed2)
    return logits, cache


def _backward_batch(model: Cnn4Model, cache: _ForwardCache, grad_logits: np.ndarray) -> list[np.ndarray]:
    g_fed2, gw3, gb3 = ops.dense_backward_batch(cache.fed2, model.dense3, grad_logits)
    if cache.mask2 is not None:
        g_fed2 = g_fed2 * cache.mask2
    g_pre2 = ops.relu_backward(cache.pre2, g_fed2)
    g_fed1, gw2, gb2 = ops.dense_backward_batch(cache.fed1, model.dense2, g_pre2)
    if cache.mask1 is not None:
        g_fed1 = g_fed1 * cache.mask1
    g_pre1 = ops.relu_backward(cache.pre1, g_fed1)
    g_flat, gw1, gb1 = ops.dense_backward_batch(cache.flat, model.dense1, g_pre1)

    grad = g_flat.reshape(cache.conv_out.shape)
    conv_grads: list[np.ndarray] = []
    for (conv_in, pre, argmax, act_shape), conv in zip(reversed(cache.conv_steps), reversed(model.convs)):
        g_act = ops.maxpool2d_backward_batch(argmax, grad, act_shape)
        g_pre = ops.relu_backward(pre, g_act)
        grad, g_kernel, g_bias = ops.conv2d_backward_batch(conv_in, conv, g_pre)
        conv_grads[:0] = [g_kernel, g_bias]
    return conv_grads + [gw1, gb1, gw2, gb2, gw3, gb3]


def _canonical_taps(taps) -> tuple[str, ...]:
    requested = set(taps)
    unknown = requested - set(TAP_NAMES)
    if unknown:
        raise UnknownTapError(f"unknown taps {sorted(unknown)}; registry has {list(TAP_NAMES)}")
    return tuple(name for name in TAP_NAMES if name in requested)


def _tap_activations(cache: _ForwardCache, taps: tuple[str, ...]) -> dict[str, np.ndarray]:
    table = {"conv4_pooled": cache.conv_out, "dense1": cache.act1, "dense2": cache.act2}
    return {name: table[name] for name in taps}


def forward_with_taps(model: Cnn4Model, image: np.ndarray, taps=()) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Class probabilities for one HWC image plus requested tap activations."""
    ordered = _canonical_taps(taps)
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeMismatchError(f"image must be HWC, got shape {image.shape}")
    logits, cache = _forward_batch(model, image[None])
    activations = {name: act[0] for name, act in _tap_activations(cache, ordered).items()}
    return ops.softmax(logits[0]), activations


def feature_layout(model: Cnn4Model, taps=TAP_NAMES) -> list[tuple[str, int, int]]:
    """(name, offset, length) for each tap, in registry order."""
    ordered = _canonical_taps(taps)
    lengths = {
        "conv4_pooled": flattened_conv_size(model.config),
        "dense1": model.config.dense_sizes[0],
        "dense2": model.config.dense_sizes[1],
    }
    layout = []
    offset = 0
    for name in ordered:
        layout.append((name, offset, lengths[name]))
        offset += lengths[name]
    return layout


def extract_deep_features(model: Cnn4Model, images, taps=TAP_NAMES):
    """Per-image flattened tap activations, concatenated in registry order.

    Returns (matrix [N, total], layout). Images must share one shape.
    """
    ordered = _canonical_taps(taps)
    if not ordered:
        raise UnknownTapError("at least one tap is required for feature extraction")
    stack = np.asarray(images) if not isinstance(images, np.ndarray) else images
    if stack.ndim != 4:
        raise ShapeMismatchError(f"expected a stack of HWC images, got shape {stack.shape}")
    layout = feature_layout(model, ordered)
    total = sum(length for _, _, length in layout)
    matrix = np.empty((stack.shape[0], total), dtype=ops.DTYPE)
    for start in range(0, stack.shape[0], _EXTRACT_CHUNK):
        chunk = stack[start : start + _EXTRACT_CHUNK]
        _, cache = _forward_batch(model, chunk)
        activations = _tap_activations(cache, ordered)
        for name, offset, length in layout:
            block = activations[name].reshape(chunk.shape[0], -1)
            matrix[start : start + chunk.shape[0], offset : offset + length] = block
    return matrix, layout


def predict_proba_batch(model: Cnn4Model, images) -> np.ndarray:
    """Softmax probabilities for a stack of images, chunked like extraction."""
    stack = np.asarray(images)
    out = np.empty((stack.shape[0], model.config.num_classes), dtype=ops.DTYPE)
    for start in range(0, stack.shape[0], _EXTRACT_CHUNK):
        logits, _ = _forward_batch(model, stack[start : start + _EXTRACT_CHUNK])
        shifted = logits - logits.max(axis=1, keepdims=True)
        exps = np.exp(shifted)
        out[start : start + logits.shape[0]] = exps / exps.sum(axis=1, keepdims=True)
    return out


def count_parameters(model: Cnn4Model) -> tuple[list[tuple[str, int]], int]:
    """Per-layer counts from live array shapes, and their total.

    Every dense layer contributes in_features * out_features + out_features.
    At the default widths that makes dense2 262,400 and dense3 30,840; summary
    tables sometimes quote 131,200 and 15,480 for layers of this shape, which
    is the weight term halved and not what the arrays allocate.
    """
    rows = []
    for i, conv in enumerate(model.convs, start=1):
        rows.append((f"conv{i}", conv.parameter_count))
    for name, dense in (("dense1", model.dense1), ("dense2", model.dense2), ("dense3", model.dense3)):
        rows.append((name, dense.parameter_count))
    return rows, sum(count for _, count in rows)


_ARRAY_NAMES = (
    "conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias",
    "conv3.kernel", "conv3.bias", "conv4.kernel", "conv4.bias",
    "dense1.weights", "dense1.bias", "dense2.weights", "dense2.bias",
    "dense3.weights", "dense3.bias",
)


def save_model(model: Cnn4Model, path: str) -> None:
    arrays = model.parameters()
    header = {
        "config": asdict(model.config),
        "arrays": [
            {"name": name, "shape": list(a.shape)}
            for name, a in zip(_ARRAY_NAMES, arrays)
        ],
    }
    payload = container.pack_header(header)
    payload += b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    container.write_container(path, MODEL_MAGIC, MODEL_VERSION, payload)


def load_model(path: str) -> Cnn4Model:
    payload = container.read_container(path, MODEL_MAGIC, MODEL_VERSION)
    header, offset = container.unpack_header(payload)
    raw = header["config"]
    config = Cnn4Config(
        input_shape=tuple(raw["input_shape"]),
        conv_channels=tuple(raw["conv_channels"]),
        kernel=raw["kernel"],
        dense_sizes=tuple(raw["dense_sizes"]),
        num_classes=raw["num_classes"],
    )
    arrays = []
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = 4 * int(np.prod(shape))
        if offset + size > len(payload):
            raise ContainerError(f"{path}: array data extends past end of payload")
        arrays.append(np.frombuffer(payload[offset : offset + size], dtype="<f4").reshape(shape).copy())
        offset += size
    if offset != len(payload):
        raise ContainerError(f"{path}: {len(payload) - offset} trailing bytes after arrays")
    if len(arrays) != len(_ARRAY_NAMES):
        raise ContainerError(f"{path}: expected {len(_ARRAY_NAMES)} arrays, found {len(arrays)}")
    return _assemble(config, arrays)


def save_features(path: str, matrix: np.ndarray, layout, labels) -> None:
    """Feature matrix container: layout table and labels in the header."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    header = {
        "rows": int(matrix.shape[0]),
        "cols": int(matrix.shape[1]),
        "taps": [[name, int(offset), int(length)] for name, offset, length in layout],
        "labels": [int(v) for v in labels],
    }
    payload = container.pack_header(header) + matrix.tobytes()
    container.write_container(path, FEATURES_MAGIC, FEATURES_VERSION, payload)


def load_features(path: str):
    """Returns (matrix [rows, cols] float32, layout, labels int64)."""
    payload = container.read_container(path, FEATURES_MAGIC, FEATURES_VERSION)
    header, offset = container.unpack_header(payload)
    rows, cols = header["rows"], header["cols"]
    size = 4 * rows * cols
    if len(payload) - offset != size:
        raise ContainerError(f"{path}: expected {size} bytes of matrix data")
    matrix = np.frombuffer(payload[offset:], dtype="<f4").reshape(rows, cols).copy()
    layout = [(name, offset_, length) for name, offset_, length in header["taps"]]
    labels = np.asarray(header["labels"], dtype=np.int64)
    if labels.shape != (rows,):
        raise ContainerError(f"{path}: label count {labels.shape[0]} does not match rows {rows}")
    return matrix, layout, labels
