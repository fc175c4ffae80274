"""Tiny fully convolutional encoder-decoder for per-pixel classification.

Layer table (``w`` = base_width, ``K`` = num_classes, all 3x3 convs use
padding 1, stride 1)::

    name        kernel shape        then
    enc1        [w,   C_in, 3, 3]   relu, max_pool2
    enc2        [2w,  w,    3, 3]   relu, max_pool2
    bottleneck  [4w,  2w,   3, 3]   relu
    dec1        [2w,  4w,   3, 3]   (after upsample2) relu
    dec2        [w,   2w,   3, 3]   (after upsample2) relu
    head        [K,   w,    1, 1]   logits

The decoder's upsample-then-conv pairs are evaluated with the fused
``upsample2_conv3x3`` op, which computes the same map at the low resolution.

Every conv has a bias of length C_out.  Parameter count:
``9*w*C_in + 18*w^2 + 72*w^2 + 72*w^2 + 18*w^2 + K*w`` weights plus
``w + 2w + 4w + 2w + w + K`` biases (11924 for 4/4/8).
"""

from __future__ import annotations

import struct
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import kernels as K
from .autodiff.tensor import Tape, Tensor
from .errors import ConfigError, DataFormatError, ShapeError
from .rng import XoshiroLanes

MTP_MAGIC = b"MTTP"
MTP_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 4
    num_classes: int = 4
    base_width: int = 8
    image_size: int = 64

    def __post_init__(self):
        if self.in_channels < 1 or self.base_width < 1:
            raise ConfigError("in_channels and base_width must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_size < 4 or self.image_size % 4:
            raise ConfigError(f"image_size must be a positive multiple of 4, got {self.image_size}")


def layer_table(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    w, c, k = config.base_width, config.in_channels, config.num_classes
    convs = [
        ("enc1", (w, c, 3, 3)),
        ("enc2", (2 * w, w, 3, 3)),
        ("bottleneck", (4 * w, 2 * w, 3, 3)),
        ("dec1", (2 * w, 4 * w, 3, 3)),
        ("dec2", (w, 2 * w, 3, 3)),
        ("head", (k, w, 1, 1)),
    ]
    table = []
    for name, shape in convs:
        table.append((f"{name}.weight", shape))
        table.append((f"{name}.bias", (shape[0],)))
    return table


def param_count(config: NetworkConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in layer_table(config))


class ParamVector(Mapping[str, Tensor]):
    """Named parameter tensors in the fixed layer-table order."""

    def __init__(self, items):
        self._items: dict[str, Tensor] = {}
        for name, value in (items.items() if isinstance(items, Mapping) else items):
            self._items[name] = value if isinstance(value, Tensor) else Tensor(value)

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        return f"ParamVector({len(self)} tensors, {self.size} values)"

    @property
    def size(self) -> int:
        return sum(t.size for t in self._items.values())

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self._items.values()]

    def watch(self, tape: Tape) -> "ParamVector":
        return ParamVector((k, tape.watch(v)) for k, v in self._items.items())

    def detach(self) -> "ParamVector":
        return ParamVector((k, v.detach()) for k, v in self._items.items())

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "ParamVector":
        return ParamVector((k, fn(k, v)) for k, v in self._items.items())

    def replace(self, values) -> "ParamVector":
        """Same names, new values in the same order."""
        values = list(values)
        if len(values) != len(self):
            raise ShapeError("ParamVector.replace", (len(self),), (len(values),))
        return ParamVector(zip(self._items, values))

    def flat(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._items.values()])

    def equals(self, other: "ParamVector") -> bool:
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)


def init_params(config: NetworkConfig, seed: int) -> ParamVector:
    """Kernels ~ uniform(-s, s) with s = sqrt(1/fan_in); biases zero."""
    rng = XoshiroLanes(seed, lanes=64)
    items = []
    for name, shape in layer_table(config):
        if name.endswith(".bias"):
            items.append((name, np.zeros(shape)))
            continue
        fan_in = shape[1] * shape[2] * shape[3]
        s = np.sqrt(1.0 / fan_in)
        u = rng.random(int(np.prod(shape))).reshape(shape)
        items.append((name, (2.0 * u - 1.0) * s))
    return ParamVector(items)


def zeros_like_params(config: NetworkConfig) -> ParamVector:
    return ParamVector((name, np.zeros(shape)) for name, shape in layer_table(config))


def _check_image(params: Mapping[str, Tensor], shape: tuple[int, ...], op: str) -> None:
    c_in = params["enc1.weight"].shape[1]
    if len(shape) != 3 or shape[0] != c_in or shape[1] % 4 or shape[2] % 4:
        raise ShapeError(op, shape, (c_in, "H%4==0", "W%4==0"))


def forward(params: Mapping[str, Tensor], image) -> Tensor:
    """Logits ``[K, H, W]`` for one image ``[C_in, H, W]``."""
    x = ad.as_tensor(image)
    _check_image(params, x.shape, "segnet.forward")

    def conv(h, name, pad=1):
        return ad.bias_add(ad.conv2d(h, params[f"{name}.weight"], 1, pad), params[f"{name}.bias"])

    def upconv(h, name):
        return ad.bias_add(ad.upsample2_conv3x3(h, params[f"{name}.weight"]), params[f"{name}.bias"])

    h = ad.max_pool2(ad.relu(conv(x, "enc1")))
    h = ad.max_pool2(ad.relu(conv(h, "enc2")))
    h = ad.relu(conv(h, "bottleneck"))
    h = ad.relu(upconv(h, "dec1"))
    h = ad.relu(upconv(h, "dec2"))
    return conv(h, "head", pad=0)


def forward_batch(params: Mapping[str, Tensor], images: np.ndarray) -> np.ndarray:
    """Untracked logits ``[N, K, H, W]`` for a batch ``[N, C_in, H, W]``.

    Same arithmetic as :func:`forward`, for evaluation only.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError("segnet.forward_batch", images.shape, ("N", "C", "H", "W"))
    _check_image(params, images.shape[1:], "segnet.forward_batch")

    def conv(h, name, pad=1):
        w = params[f"{name}.weight"].data
        geom = K.ConvGeom(1, pad, h.shape[-2], h.shape[-1], w.shape[2], w.shape[3])
        return K.conv2d(h, w, geom) + params[f"{name}.bias"].data[:, None, None]

    def upconv(h, name):
        return K.upsample2_conv3x3(h, params[f"{name}.weight"].data) + params[f"{name}.bias"].data[:, None, None]

    h = K.max_pool2_values(K.relu(conv(images, "enc1")))
    h = K.max_pool2_values(K.relu(conv(h, "enc2")))
    h = K.relu(conv(h, "bottleneck"))
    h = K.relu(upconv(h, "dec1"))
    h = K.relu(upconv(h, "dec2"))
    return conv(h, "head", pad=0)


def loss(params: Mapping[str, Tensor], sample) -> Tensor:
    """Mean per-pixel cross-entropy of the network on ``sample`` (has ``.x``, ``.y``)."""
    return ad.softmax_cross_entropy(forward(params, sample.x), sample.y)


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax over the class axis (-3); ties go to the lowest class index."""
    return np.argmax(logits, axis=-3).astype(np.uint8)


def predict(params: Mapping[str, Tensor], image) -> np.ndarray:
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    return argmax_labels(forward_batch(params, data[None])[0])


def predict_batch(params: Mapping[str, Tensor], images: np.ndarray, chunk: int = 8) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    out = [argmax_labels(forward_batch(params, images[i:i + chunk]))
           for i in range(0, len(images), chunk)]
    if not out:
        return np.zeros((0, *images.shape[2:]), dtype=np.uint8)
    return np.concatenate(out)


def sgd_step(params: ParamVector, grads, lr: float) -> ParamVector:
    return params.replace(Tensor(p.data - lr * g.data) for p, g in zip(params.tensors(), grads))


# .mtp parameter files ------------------------------------------------------
# "MTTP" | u32 version | u32 in_channels, num_classes, base_width, image_size,
# param_count | float64 LE values of every tensor in layer-table order.

def save_params(path, params: ParamVector, config: NetworkConfig) -> None:
    expected = layer_table(config)
    if [(n, tuple(params[n].shape)) for n in params] != expected:
        raise ShapeError("save_params", tuple(params[n].shape for n in params), tuple(s for _, s in expected))
    header = MTP_MAGIC + struct.pack("<6I", MTP_VERSION, *astuple(config), param_count(config))
    body = b"".join(params[n].data.astype("<f8").tobytes() for n in params)
    Path(path).write_bytes(header + body)


def load_params(path) -> tuple[ParamVector, NetworkConfig]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(path, "file", f"cannot read: {exc}") from exc
    if len(raw) < 28:
        raise DataFormatError(path, "header", f"expected 28 header bytes, found {len(raw)}")
    if raw[:4] != MTP_MAGIC:
        raise DataFormatError(path, "magic", f"expected {MTP_MAGIC!r}, found {raw[:4]!r}")
    version, c_in, k, w, size, count = struct.unpack("<6I", raw[4:28])
    if version != MTP_VERSION:
        raise DataFormatError(path, "version", f"unsupported format version {version}")
    try:
        config = NetworkConfig(c_in, k, w, size)
    except ConfigError as exc:
        raise DataFormatError(path, "config", str(exc)) from exc
    if count != param_count(config):
        raise DataFormatError(path, "param_count", f"header says {count}, config implies {param_count(config)}")
    body = raw[28:]
    if len(body) != 8 * count:
        raise DataFormatError(path, "values", f"expected {8 * count} bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    items, offset = [], 0
    for name, shape in layer_table(config):
        n = int(np.prod(shape))
        items.append((name, values[offset:offset + n].reshape(shape).copy()))
        offset += n
    return ParamVector(items), config
