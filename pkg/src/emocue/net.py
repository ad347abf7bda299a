"""Emotion classifier: layer configs, parameter init, forward pass, weights I/O."""

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import ClassVar

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DimensionError, DomainError, FormatError, IntegrityError, ShapeError
from .imaging import resize_bilinear

INPUT_SHAPE = (1, 48, 48)
NUM_CLASSES = 7


class EmotionLabel(enum.IntEnum):
    # index order is part of the weights/wire format; never reorder
    ANGRY = 0
    DISGUST = 1
    FEAR = 2
    HAPPY = 3
    SAD = 4
    SURPRISE = 5
    NEUTRAL = 6

    @property
    def display(self):
        return self.name.capitalize()

    @classmethod
    def parse(cls, name):
        try:
            return cls[str(name).strip().upper()]
        except KeyError:
            raise DomainError(f"unknown emotion {name!r}; expected one of "
                              f"{', '.join(l.display for l in cls)}") from None


class Arch(str, enum.Enum):
    FERNET9 = "FERNET9"
    RESNET_MINI = "RESNET_MINI"
    CUSTOM = "CUSTOM"


# ---------------------------------------------------------------- layers

@dataclass(frozen=True)
class Conv:
    kind: ClassVar[str] = "conv"
    out_channels: int
    in_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    @property
    def spec(self):
        return tc.ConvSpec(self.out_channels, self.in_channels, self.kernel, self.kernel,
                           self.stride, self.padding)

    def param_shapes(self):
        return {"weight": self.spec.kernel_shape, "bias": (self.out_channels,)}

    def fans(self):
        k2 = self.kernel * self.kernel
        return self.in_channels * k2, self.out_channels * k2

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ConfigError(f"conv expects {self.in_channels} input channels, got shape {shape}")
        return (self.out_channels,) + self.spec.output_hw(shape[1], shape[2])


@dataclass(frozen=True)
class ReLU:
    kind: ClassVar[str] = "relu"

    def output_shape(self, shape):
        return shape


@dataclass(frozen=True)
class MaxPool:
    kind: ClassVar[str] = "maxpool"
    window: int = 2
    stride: int = 2

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ConfigError(f"maxpool needs a (C, H, W) input, got {shape}")
        return (shape[0],) + tc.pool_output_hw(shape[1], shape[2], self.window, self.stride)


@dataclass(frozen=True)
class Residual:
    kind: ClassVar[str] = "residual_block"
    channels: int
    kernel: int = 3

    @property
    def spec(self):
        c, k = self.channels, self.kernel
        return tc.ConvSpec(c, c, k, k, 1, k // 2)

    def param_shapes(self):
        s = self.spec.kernel_shape
        c = (self.channels,)
        return {"conv1.weight": s, "conv1.bias": c, "conv2.weight": s, "conv2.bias": c}

    def fans(self):
        k2 = self.kernel * self.kernel
        return self.channels * k2, self.channels * k2

    def output_shape(self, shape):
        if self.kernel % 2 == 0:
            raise ConfigError("residual_block kernel must be odd to preserve shape")
        if len(shape) != 3 or shape[0] != self.channels:
            raise ConfigError(f"residual_block expects {self.channels} channels, got shape {shape}")
        return shape


@dataclass(frozen=True)
class GlobalAvgPool:
    kind: ClassVar[str] = "global_avg_pool"

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ConfigError(f"global_avg_pool needs a (C, H, W) input, got {shape}")
        return (shape[0],)


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "flatten"

    def output_shape(self, shape):
        return (math.prod(shape),)


@dataclass(frozen=True)
class Dense:
    kind: ClassVar[str] = "dense"
    in_features: int
    out_features: int

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def fans(self):
        return self.in_features, self.out_features

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ConfigError(f"dense expects a vector of {self.in_features}, got shape {shape}")
        return (self.out_features,)


@dataclass(frozen=True)
class Softmax:
    kind: ClassVar[str] = "softmax"

    def output_shape(self, shape):
        if len(shape) != 1:
            raise ConfigError(f"softmax needs a vector input, got {shape}")
        return shape


LAYER_TYPES = {cls.kind: cls for cls in (Conv, ReLU, MaxPool, Residual, GlobalAvgPool,
                                         Flatten, Dense, Softmax)}


def layer_params(idx, layer):
    """Ordered ``{param_name: shape}`` for one layer of a network."""
    if not hasattr(layer, "param_shapes"):
        return {}
    return {f"{idx:02d}_{layer.kind}.{k}": v for k, v in layer.param_shapes().items()}


# ---------------------------------------------------------------- configs

@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple
    arch: Arch = Arch.CUSTOM
    input_shape: tuple = INPUT_SHAPE
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "arch", Arch(self.arch))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.validate()

    def shapes(self):
        """Input shape followed by every layer's output shape."""
        out = [self.input_shape]
        for layer in self.layers:
            try:
                out.append(layer.output_shape(out[-1]))
            except (ConfigError, tc.GeometryError) as exc:
                raise ConfigError(f"layer {len(out) - 1} ({layer.kind}): {exc}") from None
        return out

    def param_shapes(self):
        shapes = {}
        for i, layer in enumerate(self.layers):
            shapes.update(layer_params(i, layer))
        return shapes

    def param_count(self):
        return sum(math.prod(s) for s in self.param_shapes().values())

    @property
    def logit_layers(self):
        return self.layers[:-1]

    def validate(self):
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ConfigError("network must end with a softmax layer")
        if any(l.kind == "softmax" for l in self.layers[:-1]):
            raise ConfigError("softmax is only allowed as the final layer")
        shapes = self.shapes()
        if shapes[-1] != (NUM_CLASSES,):
            raise ConfigError(f"final layer must produce {NUM_CLASSES} outputs, got {shapes[-1]}")
        kinds = [l.kind for l in self.layers]
        if self.arch is Arch.FERNET9:
            trunk = [k for k in kinds if k in ("conv", "maxpool")]
            if kinds.count("conv") != 9:
                raise ConfigError(f"FERNET9 requires exactly 9 conv layers, found {kinds.count('conv')}")
            if trunk != ["conv"] * 3 + ["maxpool"] + ["conv"] * 3 + ["maxpool"] + ["conv"] * 3 + ["maxpool"]:
                raise ConfigError("FERNET9 requires a maxpool after conv 3, 6 and 9 and nowhere else")
            if kinds.count("dense") != 2:
                raise ConfigError(f"FERNET9 requires exactly 2 dense layers, found {kinds.count('dense')}")
            if "residual_block" in kinds:
                raise ConfigError("FERNET9 must not contain residual blocks")
            if kinds.index("dense") < len(kinds) - 1 - kinds[::-1].index("maxpool"):
                raise ConfigError("FERNET9 dense layers must follow the conv trunk")
        elif self.arch is Arch.RESNET_MINI:
            if "residual_block" not in kinds:
                raise ConfigError("RESNET_MINI requires at least one residual_block")
            if "global_avg_pool" not in kinds or "dense" not in kinds:
                raise ConfigError("RESNET_MINI requires a global_avg_pool before the dense head")
            gap = kinds.index("global_avg_pool")
            last_res = len(kinds) - 1 - kinds[::-1].index("residual_block")
            if not last_res < gap < kinds.index("dense"):
                raise ConfigError("RESNET_MINI requires a global_avg_pool between the last "
                                  "residual_block and the dense head")

    def to_json(self):
        layers = [dict(kind=l.kind, **asdict(l)) for l in self.layers]
        return {"arch": self.arch.value, "input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_json(cls, obj, name=""):
        try:
            layers = []
            for spec in obj["layers"]:
                spec = dict(spec)
                kind = spec.pop("kind")
                if kind not in LAYER_TYPES:
                    raise ConfigError(f"unknown layer kind {kind!r}")
                layers.append(LAYER_TYPES[kind](**spec))
            return cls(layers, obj.get("arch", "CUSTOM"),
                       tuple(obj.get("input_shape", INPUT_SHAPE)), name=name)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed network config: {exc}") from None


def fernet9_config(widths=(8, 8, 8, 16, 16, 16, 32, 32, 32), hidden=64):
    """Nine 3x3 convs in three blocks of three, a 2x2 maxpool after each block, two dense layers."""
    layers, c_in, hw = [], INPUT_SHAPE[0], INPUT_SHAPE[1]
    for i, c_out in enumerate(widths):
        layers += [Conv(c_out, c_in), ReLU()]
        c_in = c_out
        if i % 3 == 2:
            layers.append(MaxPool(2, 2))
            hw //= 2
    layers += [Flatten(), Dense(c_in * hw * hw, hidden), ReLU(), Dense(hidden, NUM_CLASSES), Softmax()]
    return NetworkConfig(layers, Arch.FERNET9, name="fernet9")


def resnet_mini_config(widths=(8, 16, 32)):
    """Stem conv, then per stage a residual block and (between stages) a channel-raising conv + pool."""
    layers = [Conv(widths[0], INPUT_SHAPE[0]), ReLU(), MaxPool(2, 2)]
    for i, c in enumerate(widths):
        if i:
            layers += [Conv(c, widths[i - 1]), ReLU(), MaxPool(2, 2)]
        layers.append(Residual(c))
    layers += [GlobalAvgPool(), Dense(widths[-1], NUM_CLASSES), Softmax()]
    return NetworkConfig(layers, Arch.RESNET_MINI, name="resnet_mini")


NAMED_CONFIGS = {"fernet9": fernet9_config, "resnet_mini": resnet_mini_config}


def resolve_config(name_or_path):
    """A named reference config, or a JSON config file on disk."""
    key = str(name_or_path).lower()
    if key in NAMED_CONFIGS:
        return NAMED_CONFIGS[key]()
    path = Path(name_or_path)
    if path.suffix == ".json" and path.is_file():
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load network config {path}: {exc}") from None
        return NetworkConfig.from_json(obj, name=str(path))
    raise ConfigError(f"unknown network config {name_or_path!r}; expected one of "
                      f"{', '.join(NAMED_CONFIGS)} or a .json file")


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class EmotionModel:
    config: NetworkConfig
    params: dict

    def __post_init__(self):
        expected = self.config.param_shapes()
        if list(self.params) != list(expected):
            missing = [k for k in expected if k not in self.params]
            extra = [k for k in self.params if k not in expected]
            raise IntegrityError(f"parameter names disagree with config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if self.params[name].shape != tuple(shape):
                raise IntegrityError(f"parameter {name} has shape {self.params[name].shape}, "
                                     f"config wants {tuple(shape)}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype if self.params else tc.DTYPE

    def astype(self, dtype):
        return EmotionModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def with_params(self, params):
        return EmotionModel(self.config, dict(params))



def build_model(config, seed=0):
    """Glorot-uniform weights from a PCG64 stream seeded with ``seed``; zero biases.

    Parameters are drawn in ParamSet order, each as float64 then rounded to
    float32, so the same seed gives bit-identical weights everywhere.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for i, layer in enumerate(config.layers):
        if not hasattr(layer, "param_shapes"):
            continue
        fan_in, fan_out = layer.fans()
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        for key, shape in layer_params(i, layer).items():
            if key.endswith("weight"):
                params[key] = rng.uniform(-limit, limit, size=shape).astype(tc.DTYPE)
            else:
                params[key] = np.zeros(shape, dtype=tc.DTYPE)
    return EmotionModel(config, params)


# ---------------------------------------------------------------- forward

def layer_params_of(model, idx):
    """Parameters of layer ``idx`` keyed by their short names ("weight", "conv1.bias", ...)."""
    prefix = f"{idx:02d}_{model.config.layers[idx].kind}."
    return {k[len(prefix):]: v for k, v in model.params.items() if k.startswith(prefix)}


def forward_layer(layer, p, x):
    """Apply one layer to a batch; returns the output and what backward needs."""
    kind = layer.kind
    if kind == "conv":
        return tc.conv2d_batch(x, p["weight"], p["bias"], layer.spec), None
    if kind == "relu":
        return tc.relu(x), None
    if kind == "maxpool":
        win = tc.maxpool_windows(x, layer.window, layer.stride)
        arg = win.argmax(axis=-1)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg
    if kind == "residual_block":
        tc.check_residual(layer.spec, layer.spec, x.shape[1])
        h = tc.relu(tc.conv2d_batch(x, p["conv1.weight"], p["conv1.bias"], layer.spec))
        pre = x + tc.conv2d_batch(h, p["conv2.weight"], p["conv2.bias"], layer.spec)
        return tc.relu(pre), (h, pre)
    if kind == "global_avg_pool":
        return tc.global_avg_pool_batch(x), None
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), None
    if kind == "dense":
        return tc.dense_batch(x, p["weight"], p["bias"]), None
    if kind == "softmax":
        return tc.softmax(x), None
    raise ConfigError(f"no forward rule for layer kind {kind!r}")


def forward_logits(model, x, tape=None):
    """Logits for a batch ``x`` of shape (N, *input_shape).

    If ``tape`` is a list, ``(input, aux)`` per layer is appended to it for
    the backward pass.
    """
    if tuple(x.shape[1:]) != model.config.input_shape:
        raise DimensionError(f"input shape {tuple(x.shape[1:])} does not match model input "
                             f"{model.config.input_shape}")
    for idx, layer in enumerate(model.config.logit_layers):
        out, aux = forward_layer(layer, layer_params_of(model, idx), x)
        if tape is not None:
            tape.append((x, aux))
        x = out
    return x


def logits(model, tensor):
    """Logits for one preprocessed input tensor."""
    return forward_logits(model, np.asarray(tensor)[None].astype(model.dtype, copy=False))[0]


# ---------------------------------------------------------------- prediction

@dataclass(frozen=True)
class Prediction:
    label: EmotionLabel
    probabilities: tuple

    @classmethod
    def from_probs(cls, probs):
        probs = np.asarray(probs, dtype=np.float64)
        # argmax returns the first maximum: lowest index wins ties
        return cls(EmotionLabel(int(np.argmax(probs))), tuple(float(p) for p in probs))

    def to_json(self, digits=9):
        return {"label": self.label.display,
                "probabilities": [float(f"{p:.{digits}g}") for p in self.probabilities]}


def preprocess(image):
    """Bilinear resize of an 8-bit grayscale image to 48x48, scaled to [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 2 or 0 in img.shape:
        raise DimensionError(f"expected a nonempty 2-D grayscale image, got shape {img.shape}")
    h, w = INPUT_SHAPE[1:]
    resized = resize_bilinear(img.astype(np.float64), h, w)
    return (resized / 255.0).astype(tc.DTYPE)[None]


def predict_probs(model, tensor):
    return tc.softmax(logits(model, tensor).astype(np.float64))


def classify(model, image):
    return Prediction.from_probs(predict_probs(model, preprocess(image)))


def classify_eyes(model, eye_rois):
    """Average the per-ROI probability vectors; the caller falls back to the full frame when empty."""
    if not eye_rois:
        raise DomainError("classify_eyes needs at least one eye region")
    probs = np.mean([predict_probs(model, preprocess(roi)) for roi in eye_rois], axis=0)
    return Prediction.from_probs(probs)


# ---------------------------------------------------------------- weights file

MAGIC = b"FEMR"
VERSION = 1


def encode_weights(params):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_weights(blob):
    """Parse a FEMR v1 blob into an ordered ``{name: float32 array}``."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"weights file truncated at byte {pos} (needed {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("not a weights file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported weights format version {version}")
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8") from None
        (ndim,) = struct.unpack("<B", take(1))
        if not 1 <= ndim <= 4:
            raise FormatError(f"tensor {name} has unsupported rank {ndim}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = math.prod(dims)
        values = np.frombuffer(take(4 * n), dtype="<f4").astype(tc.DTYPE).reshape(dims)
        if name in params:
            raise FormatError(f"duplicate tensor name {name}")
        params[name] = values
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after the last tensor")
    return params


def save_weights(model, path):
    Path(path).write_bytes(encode_weights(model.params))


def load_weights(path, config):
    params = decode_weights(Path(path).read_bytes())
    expected = config.param_shapes()
    for (name, shape), got in zip(expected.items(), params.items()):
        if got[0] != name or got[1].shape != tuple(shape):
            raise ShapeError(f"tensor {got[0]!r} {got[1].shape} does not match config tensor "
                             f"{name!r} {tuple(shape)}")
    if len(params) < len(expected):
        missing = list(expected)[len(params)]
        raise ShapeError(f"weights file holds {len(params)} tensors, config needs {len(expected)}; "
                         f"first missing tensor is {missing!r}")
    if len(params) > len(expected):
        extra = list(params)[len(expected)]
        raise ShapeError(f"weights file holds {len(params)} tensors, config needs {len(expected)}; "
                         f"first unexpected tensor is {extra!r}")
    return EmotionModel(config, params)
