"""CAM network: convolutional trunk, global average pooling, one dense layer.

The architecture is declared by a :class:`NetworkSpec`, which has a small
line-oriented text form so specs can live in files next to a run::

    camloc-net 1
    input 64 64 1
    conv filters=8 size=4 stride=2 bn=1 act=relu pool=0
    ...
    head gap classes=2
    min_resolution 8

Only convolutional layers are allowed in the trunk. The single dense layer
after the pooling step is implicit in the ``head`` line.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import nn

log = logging.getLogger(__name__)

__all__ = [
    "ConvLayer",
    "DenseLayer",
    "NetworkSpec",
    "SpecError",
    "Network",
    "TrainConfig",
    "EpochLog",
    "build",
    "forward",
    "train",
    "save",
    "load",
    "toy_spec",
    "paper_spec",
    "ModelFormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedModelError",
    "ShapeTableError",
]


class SpecError(ValueError):
    """A network spec violates one of the architecture constraints."""


@dataclass(frozen=True)
class ConvLayer:
    filters: int
    size: int = 3
    stride: int = 1
    batchnorm: bool = True
    activation: str = "relu"
    pool: int = 0

    @property
    def padding(self) -> int:
        return (self.size - 1) // 2


@dataclass(frozen=True)
class DenseLayer:
    """Present only so that specs declaring one can be parsed and rejected."""

    units: int


@dataclass(frozen=True)
class NetworkSpec:
    input_size: Tuple[int, int, int]  # H, W, channels
    layers: Tuple[Union[ConvLayer, DenseLayer], ...]
    num_classes: int = 2
    min_resolution: int = 8

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "layers", tuple(self.layers))

    # -- shape bookkeeping -------------------------------------------------

    def layer_shapes(self) -> List[Tuple[int, int, int]]:
        """(channels, H, W) after every trunk layer."""
        h, w, ch = self.input_size
        shapes = []
        for layer in self.layers:
            if isinstance(layer, DenseLayer):
                break
            h = nn.conv_output_size(h, layer.size, layer.stride, layer.padding)
            w = nn.conv_output_size(w, layer.size, layer.stride, layer.padding)
            if layer.pool:
                h, w = h // layer.pool, w // layer.pool
            ch = layer.filters
            shapes.append((ch, h, w))
        return shapes

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        """(K, u, v) of the last convolutional layer."""
        return self.layer_shapes()[-1]

    def validate(self) -> None:
        h, w, ch = self.input_size
        if min(h, w, ch) < 1:
            raise SpecError(f"input size must be positive, got {self.input_size}")
        if not self.layers:
            raise SpecError("spec needs at least one convolutional layer")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, DenseLayer):
                raise SpecError(
                    f"layer {i}: dense layers are not allowed in the trunk; "
                    "the only dense layer is the classifier after global average pooling"
                )
            if layer.filters < 1 or layer.size < 1 or layer.stride < 1 or layer.pool < 0:
                raise SpecError(f"layer {i}: filters, size and stride must be positive")
            if layer.activation not in ("relu", "none"):
                raise SpecError(f"layer {i}: unsupported activation {layer.activation!r}")
        if self.num_classes < 2:
            raise SpecError("need at least two classes")
        size_h, size_w = h, w
        for i, layer in enumerate(self.layers):
            if layer.size > size_h + 2 * layer.padding or layer.size > size_w + 2 * layer.padding:
                raise SpecError(f"layer {i}: kernel larger than its input")
            size_h = nn.conv_output_size(size_h, layer.size, layer.stride, layer.padding)
            size_w = nn.conv_output_size(size_w, layer.size, layer.stride, layer.padding)
            if layer.pool:
                if size_h % layer.pool or size_w % layer.pool:
                    raise SpecError(f"layer {i}: pool {layer.pool} does not divide {size_h}x{size_w}")
                size_h //= layer.pool
                size_w //= layer.pool
        _, u, v = self.feature_shape
        if min(u, v) < self.min_resolution:
            raise SpecError(
                f"last conv resolution {u}x{v} is below the minimum {self.min_resolution}"
            )

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        h, w, ch = self.input_size
        lines = ["camloc-net 1", f"input {h} {w} {ch}"]
        for layer in self.layers:
            if isinstance(layer, DenseLayer):
                lines.append(f"dense units={layer.units}")
            else:
                lines.append(
                    f"conv filters={layer.filters} size={layer.size} stride={layer.stride} "
                    f"bn={int(layer.batchnorm)} act={layer.activation} pool={layer.pool}"
                )
        lines.append(f"head gap classes={self.num_classes}")
        lines.append(f"min_resolution {self.min_resolution}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        input_size = None
        layers: List[Union[ConvLayer, DenseLayer]] = []
        classes = 2
        min_res = 8
        seen_header = False
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, *rest = line.split()
            try:
                if head == "camloc-net":
                    if rest != ["1"]:
                        raise SpecError(f"unsupported spec version {' '.join(rest)!r}")
                    seen_header = True
                elif head == "input":
                    input_size = tuple(int(v) for v in rest)
                    if len(input_size) != 3:
                        raise SpecError("input needs H W channels")
                elif head == "conv":
                    kw = _keyvals(rest)
                    layers.append(
                        ConvLayer(
                            filters=int(kw.pop("filters")),
                            size=int(kw.pop("size", 3)),
                            stride=int(kw.pop("stride", 1)),
                            batchnorm=bool(int(kw.pop("bn", 1))),
                            activation=kw.pop("act", "relu"),
                            pool=int(kw.pop("pool", 0)),
                        )
                    )
                    if kw:
                        raise SpecError(f"unknown conv keys {sorted(kw)}")
                elif head == "dense":
                    layers.append(DenseLayer(int(_keyvals(rest)["units"])))
                elif head == "head":
                    if not rest or rest[0] != "gap":
                        raise SpecError("head must be 'gap'")
                    classes = int(_keyvals(rest[1:]).get("classes", 2))
                elif head == "min_resolution":
                    min_res = int(rest[0])
                else:
                    raise SpecError(f"unknown directive {head!r}")
            except (KeyError, ValueError, IndexError) as exc:
                if isinstance(exc, SpecError):
                    raise SpecError(f"line {lineno}: {exc}") from None
                raise SpecError(f"line {lineno}: cannot parse {raw!r} ({exc})") from None
        if not seen_header:
            raise SpecError("missing 'camloc-net 1' header")
        if input_size is None:
            raise SpecError("missing 'input' line")
        return cls(input_size, tuple(layers), classes, min_res)


def _keyvals(tokens: Sequence[str]) -> Dict[str, str]:
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep:
            raise SpecError(f"expected key=value, got {tok!r}")
        out[key] = value
    return out


def toy_spec(size: int = 64, channels: int = 1) -> NetworkSpec:
    """Four-layer desk-scale spec: 64x64 input gives 32 maps of 16x16.

    The stride-2 layers use 4x4 kernels so unit ``i`` is centred on input
    pixel ``4i + 1.5``; with 3x3 kernels it would sit at ``4i`` and every
    upsampled map would drift towards the bottom-right.
    """
    return NetworkSpec(
        (size, size, channels),
        (
            ConvLayer(8, 4, stride=2),
            ConvLayer(16, 3, stride=1),
            ConvLayer(16, 4, stride=2),
            ConvLayer(32, 3, stride=1),
        ),
    )


def paper_spec() -> NetworkSpec:
    """512x512x3 input down to 1024 feature maps of 32x32.

    The first and third convolutions run at stride one and the last layer is
    the added 3x3, stride-one, 1024-kernel convolution. Downsampling is done
    by four 2x2 max-pools. The remaining layer sizes are placeholders.
    """
    return NetworkSpec(
        (512, 512, 3),
        (
            ConvLayer(32, 5, stride=1),
            ConvLayer(32, 3, stride=1, pool=2),
            ConvLayer(64, 5, stride=1),
            ConvLayer(64, 3, stride=1, pool=2),
            ConvLayer(128, 3, stride=1),
            ConvLayer(128, 3, stride=1, pool=2),
            ConvLayer(256, 3, stride=1),
            ConvLayer(256, 3, stride=1, pool=2),
            ConvLayer(1024, 3, stride=1),
        ),
        min_resolution=32,
    )


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class Network:
    """Parameters and running batch-norm statistics for one spec."""

    def __init__(self, spec: NetworkSpec, params: Dict[str, np.ndarray], running: Dict[int, nn.RunningStats]):
        self.spec = spec
        self.params = params
        self.running = running

    @property
    def classifier_weights(self) -> np.ndarray:
        return self.params["fc.weight"]

    @property
    def classifier_bias(self) -> np.ndarray:
        return self.params["fc.bias"]

    @property
    def dtype(self):
        return self.params["fc.weight"].dtype

    def state_tensors(self) -> Dict[str, np.ndarray]:
        """Every tensor that defines the network, in canonical order."""
        out = dict(self.params)
        for i, rs in self.running.items():
            out[f"bn{i}.running_mean"] = rs.mean
            out[f"bn{i}.running_var"] = rs.var
        return out

    def astype(self, dtype) -> "Network":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        running = {
            i: nn.RunningStats(rs.mean.astype(dtype), rs.var.astype(dtype), rs.momentum)
            for i, rs in self.running.items()
        }
        return Network(self.spec, params, running)

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    # -- passes ------------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "infer"):
        logits, fmaps, _ = self._forward(x, mode, keep_cache=False)
        return logits, fmaps

    def _forward(self, x, mode, keep_cache=True):
        h, w, ch = self.spec.input_size
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != (ch, h, w):
            raise ValueError(f"expected batch of shape (N, {ch}, {h}, {w}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        p = self.params
        caches = []
        for i, layer in enumerate(self.spec.layers):
            x, c_conv = nn.conv2d_forward(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], layer.stride, layer.padding)
            c_bn = c_act = c_pool = None
            if layer.batchnorm:
                x, c_bn = nn.batchnorm_forward(x, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.running[i], mode)
            if layer.activation == "relu":
                x, c_act = nn.relu_forward(x)
            if layer.pool:
                x, c_pool = nn.maxpool_forward(x, layer.pool)
            if keep_cache:
                caches.append((c_conv, c_bn, c_act, c_pool))
        fmaps = x
        pooled, c_gap = nn.gap_forward(fmaps)
        logits, c_fc = nn.dense_forward(pooled, p["fc.weight"], p["fc.bias"])
        return logits, fmaps, (caches, c_gap, c_fc)

    def backward(self, grad_logits, cache) -> Dict[str, np.ndarray]:
        caches, c_gap, c_fc = cache
        grads: Dict[str, np.ndarray] = {}
        g, grads["fc.weight"], grads["fc.bias"] = nn.dense_backward(grad_logits, c_fc)
        g = nn.gap_backward(g, c_gap)
        for i in reversed(range(len(self.spec.layers))):
            c_conv, c_bn, c_act, c_pool = caches[i]
            if c_pool is not None:
                g = nn.maxpool_backward(g, c_pool)
            if c_act is not None:
                g = nn.relu_backward(g, c_act)
            if c_bn is not None:
                g, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = nn.batchnorm_backward(g, c_bn)
            g, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = nn.conv2d_backward(g, c_conv)
        return {k: grads[k].astype(self.params[k].dtype, copy=False) for k in self.params}

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        for start in range(0, len(x), batch_size):
            logits, _ = self.forward(x[start : start + batch_size], "infer")
            out.append(nn.softmax(logits))
        return np.concatenate(out) if out else np.zeros((0, self.spec.num_classes))


def build(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Instantiate a spec with He-normal kernels and zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    running: Dict[int, nn.RunningStats] = {}
    ch = spec.input_size[2]
    for i, layer in enumerate(spec.layers):
        fan_in = ch * layer.size * layer.size
        params[f"conv{i}.weight"] = (
            rng.standard_normal((layer.filters, ch, layer.size, layer.size)) * np.sqrt(2.0 / fan_in)
        ).astype(dtype)
        params[f"conv{i}.bias"] = np.zeros(layer.filters, dtype)
        if layer.batchnorm:
            params[f"bn{i}.gamma"] = np.ones(layer.filters, dtype)
            params[f"bn{i}.beta"] = np.zeros(layer.filters, dtype)
            running[i] = nn.RunningStats.fresh(layer.filters, dtype)
        ch = layer.filters
    params["fc.weight"] = (
        rng.standard_normal((spec.num_classes, ch)) * np.sqrt(2.0 / ch)
    ).astype(dtype)
    params["fc.bias"] = np.zeros(spec.num_classes, dtype)
    return Network(spec, params, running)


def forward(net: Network, batch: np.ndarray, mode: str = "infer"):
    """Return ``(logits[N,C], feature_maps[N,K,u,v])``."""
    return net.forward(batch, mode)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    optimizer: nn.OptimizerState = field(default_factory=nn.OptimizerState)
    seed: int = 0
    augment: bool = False
    augment_params: Optional[object] = None  # imaging.AugmentParams

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalisation")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    loss: float
    accuracy: float


def train(net: Network, dataset, config: TrainConfig, callback=None) -> Tuple[Network, List[EpochLog]]:
    """Mini-batch SGD with momentum; mutates and returns ``net``.

    ``dataset`` is ``(images[N, ch, H, W], labels[N])``. A trailing batch of
    one sample is dropped because batch statistics need two.
    """
    from .imaging import AugmentParams, augment, standardize_array

    images, labels = dataset
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    if labels.min() < 0 or labels.max() >= net.spec.num_classes:
        raise ValueError("labels out of range")

    rng = np.random.default_rng(config.seed)
    aug_params = config.augment_params or AugmentParams()
    state = config.optimizer
    history: List[EpochLog] = []
    n = len(images)
    for epoch in range(config.epochs):
        lr = nn.lr_at_epoch(state, epoch)
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        seen = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            xb = images[idx]
            if config.augment:
                seeds = rng.integers(0, 2**63, size=len(idx))
                xb = np.stack([standardize_array(augment(img, int(s), aug_params)) for img, s in zip(xb, seeds)])
            yb = labels[idx]
            logits, _, cache = net._forward(xb, "train")
            loss, grad = nn.softmax_cross_entropy(logits, yb)
            grads = net.backward(grad, cache)
            nn.sgd_momentum_step(net.params, grads, state, lr)
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
            seen += len(idx)
        entry = EpochLog(epoch, lr, total_loss / seen, correct / seen)
        history.append(entry)
        log.info("epoch %d lr %.6f loss %.4f acc %.3f", epoch, lr, entry.loss, entry.accuracy)
        if callback is not None:
            callback(entry)
    return net, history


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

MAGIC = b"CAMLOCNN"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    code = 10


class BadMagicError(ModelFormatError):
    code = 11


class UnsupportedVersionError(ModelFormatError):
    code = 12


class TruncatedModelError(ModelFormatError):
    code = 13


class ShapeTableError(ModelFormatError):
    code = 14


def to_bytes(net: Network) -> bytes:
    """Serialise to the model file layout (all integers little-endian).

    magic(8) version(u16) spec_len(u32) spec(utf-8) count(u32)
    count x [name_len(u16) name ndim(u8) dims(u32 x ndim)]
    payload_len(u64) payload(float32 LE, tensors in table order)
    """
    buf = io.BytesIO()
    spec_text = net.spec.to_text().encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(spec_text)))
    buf.write(spec_text)
    tensors = net.state_tensors()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("ascii")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in tensors.values())
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)
    return buf.getvalue()


def save(net: Network, path) -> None:
    Path(path).write_bytes(to_bytes(net))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedModelError(f"model file truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Network:
    r = _Reader(data)
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a camloc model file (bad magic)")
    r.take(len(MAGIC))
    version, spec_len = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported model format version {version}")
    try:
        spec = NetworkSpec.from_text(r.take(spec_len).decode("utf-8"))
    except (UnicodeDecodeError, SpecError) as exc:
        raise ShapeTableError(f"embedded spec unreadable: {exc}") from None
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("ascii", errors="replace")
        (ndim,) = r.unpack("<B")
        table.append((name, r.unpack(f"<{ndim}I")))
    (payload_len,) = r.unpack("<Q")
    expected = sum(int(np.prod(shape)) for _, shape in table) * 4
    if payload_len != expected:
        raise ShapeTableError(f"shape table describes {expected} bytes, header says {payload_len}")
    payload = r.take(payload_len)
    if r.pos != len(data):
        raise ShapeTableError(f"{len(data) - r.pos} trailing bytes after payload")

    try:
        template = build(spec)
    except SpecError as exc:
        raise ShapeTableError(f"embedded spec invalid: {exc}") from None
    want = {k: v.shape for k, v in template.state_tensors().items()}
    got = {name: tuple(shape) for name, shape in table}
    if want != got:
        raise ShapeTableError("shape table does not match the embedded spec")

    arrays = {}
    offset = 0
    for name, shape in table:
        size = int(np.prod(shape)) * 4
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=offset).astype(np.float32).reshape(shape)
        offset += size
    params = {k: arrays[k] for k in template.params}
    running = {
        i: nn.RunningStats(arrays[f"bn{i}.running_mean"], arrays[f"bn{i}.running_var"], rs.momentum)
        for i, rs in template.running.items()
    }
    return Network(spec, params, running)


def load(path) -> Network:
    return from_bytes(Path(path).read_bytes())
