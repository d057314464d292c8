"""Model zoo, training loop, activation capture and checkpoints.

A model is a flat list of layer nodes in forward order. Each node names the
nodes it reads from (0 is the network input), which is enough to express the
residual blocks of ResNet18 next to the plain chains of LeNet and VGG19.
Convolutions that count for sensitivity analysis and detector placement are
numbered 1..L; the capture point of conv l is its post-ReLU output, or the
post-addition ReLU when the conv closes a residual block.
"""

import copy
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from ansguard import DEFAULT_SEED
from ansguard.checkpoint import read_container, read_header, write_container
from ansguard.datasets import LabeledImageSet, batches
from ansguard.errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    NonFiniteError,
    ShapeError,
)
from ansguard.tensor import (
    DTYPE,
    SGD,
    Tensor,
    avgpool2d,
    backward,
    batchnorm,
    conv2d,
    conv_output_extent,
    flatten,
    linear,
    maxpool2d,
    mul,
    no_grad,
    relu,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

ARCHITECTURES = ("lenet", "vgg19_cifar", "resnet18_cifar", "tiny_cnn")
DEFAULT_INPUT_SHAPES = {
    "lenet": (1, 28, 28),
    "vgg19_cifar": (3, 32, 32),
    "resnet18_cifar": (3, 32, 32),
    "tiny_cnn": (1, 8, 8),
}
VGG19_CONFIG = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                512, 512, 512, 512, "M", 512, 512, 512, 512, "M")
RESNET18_STAGES = ((64, 1), (128, 2), (256, 2), (512, 2))
EVAL_BATCH = 256

ActivationHook = Callable[["LayerNode", Tensor], Tensor]


@dataclass
class LayerNode:
    id: int
    kind: str  # conv|pool|avgpool|linear|relu|batchnorm|residual_add|flatten
    dims: tuple[int, ...]
    inputs: tuple[int, ...]
    config: dict = field(default_factory=dict)
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    conv_index: int | None = None


class _GraphBuilder:
    def __init__(self, in_shape, rng: np.random.Generator | None, dtype) -> None:
        self.layers: list[LayerNode] = []
        self.dims: dict[int, tuple[int, ...]] = {0: tuple(in_shape)}
        self.current = 0
        self.captures: dict[int, int] = {}
        self.rng = rng
        self.dtype = dtype
        self._convs = 0
        self._pending: int | None = None

    def _add(self, kind, dims, inputs, **extra) -> int:
        node_id = len(self.layers) + 1
        self.layers.append(LayerNode(node_id, kind, tuple(dims), tuple(inputs), **extra))
        self.dims[node_id] = tuple(dims)
        self.current = node_id
        return node_id

    def _uniform(self, shape, fan_in):
        if self.rng is None:
            return None
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape).astype(self.dtype), True)

    def _zeros(self, n):
        return None if self.rng is None else Tensor(np.zeros(n, dtype=self.dtype), True)

    def conv(self, out_ch, k, stride=1, padding=0, bias=True, indexed=True, src=None, floor=False):
        src = self.current if src is None else src
        c, h, w = self.dims[src]
        h_out = conv_output_extent(h, k, stride, padding, floor)
        w_out = conv_output_extent(w, k, stride, padding, floor)
        params = {}
        if self.rng is not None:
            params["weight"] = self._uniform((out_ch, c, k, k), c * k * k)
            if bias:
                params["bias"] = self._zeros(out_ch)
        conv_index = None
        if indexed:
            self._convs += 1
            conv_index = self._pending = self._convs
        config = {"in_channels": c, "in_size": h, "out_channels": out_ch, "k": k,
                  "stride": stride, "padding": padding, "floor": floor}
        return self._add("conv", (out_ch, h_out, w_out), (src,), config=config,
                         params=params, conv_index=conv_index)

    def relu(self):
        return self._add("relu", self.dims[self.current], (self.current,))

    def capture(self) -> None:
        self.captures[self._pending] = self.current
        self._pending = None

    def batchnorm(self):
        c = self.dims[self.current][0]
        params, buffers = {}, {}
        if self.rng is not None:
            params = {"gamma": Tensor(np.ones(c, dtype=self.dtype), True), "beta": self._zeros(c)}
            buffers = {"running_mean": np.zeros(c, dtype=self.dtype),
                       "running_var": np.ones(c, dtype=self.dtype)}
        return self._add("batchnorm", self.dims[self.current], (self.current,),
                         params=params, buffers=buffers)

    def pool(self, size, kind="pool"):
        c, h, w = self.dims[self.current]
        dims = (c, conv_output_extent(h, size, size, 0, True), conv_output_extent(w, size, size, 0, True))
        return self._add(kind, dims, (self.current,), config={"size": size})

    def flatten(self):
        return self._add("flatten", (int(np.prod(self.dims[self.current])),), (self.current,))

    def linear(self, out_features):
        (n_in,) = self.dims[self.current]
        params = {}
        if self.rng is not None:
            params = {"weight": self._uniform((out_features, n_in), n_in), "bias": self._zeros(out_features)}
        return self._add("linear", (out_features,), (self.current,),
                         config={"in_features": n_in}, params=params)

    def add(self, a, b):
        return self._add("residual_add", self.dims[a], (a, b))


def _lenet(b: _GraphBuilder, classes: int) -> None:
    for channels in (6, 16):
        b.conv(channels, 5)
        b.relu()
        b.capture()
        b.pool(2)
    b.flatten()
    for width in (120, 84):
        b.linear(width)
        b.relu()
    b.linear(classes)


def _vgg19(b: _GraphBuilder, classes: int) -> None:
    for item in VGG19_CONFIG:
        if item == "M":
            b.pool(2)
            continue
        b.conv(item, 3, padding=1)
        b.relu()
        b.capture()
    b.flatten()
    b.linear(classes)


def _basic_block(b: _GraphBuilder, channels: int, stride: int) -> None:
    entry = b.current
    in_channels = b.dims[entry][0]
    b.conv(channels, 3, stride, 1, bias=False, floor=stride > 1)
    b.batchnorm()
    b.relu()
    b.capture()
    b.conv(channels, 3, 1, 1, bias=False)
    branch = b.batchnorm()
    shortcut = entry
    if stride != 1 or in_channels != channels:
        b.conv(channels, 1, stride, 0, bias=False, indexed=False, src=entry, floor=True)
        shortcut = b.batchnorm()
    b.add(branch, shortcut)
    b.relu()
    b.capture()


def _resnet18(b: _GraphBuilder, classes: int) -> None:
    b.conv(64, 3, 1, 1, bias=False)
    b.batchnorm()
    b.relu()
    b.capture()
    for channels, stride in RESNET18_STAGES:
        _basic_block(b, channels, stride)
        _basic_block(b, channels, 1)
    b.pool(4, kind="avgpool")
    b.flatten()
    b.linear(classes)


def _tiny_cnn(b: _GraphBuilder, classes: int) -> None:
    for channels in (4, 8):
        b.conv(channels, 3, padding=1)
        b.relu()
        b.capture()
    b.flatten()
    b.linear(classes)


_BUILDERS = {"lenet": _lenet, "vgg19_cifar": _vgg19, "resnet18_cifar": _resnet18, "tiny_cnn": _tiny_cnn}


@dataclass
class PartialForward:
    """Node outputs of a forward pass stopped at a capture point."""

    values: dict[int, Tensor]
    position: int
    layer: int
    capture_id: int

    @property
    def activation(self) -> Tensor:
        return self.values[self.capture_id]

    def select(self, rows) -> "PartialForward":
        rows = np.asarray(rows)
        values = {k: Tensor(v.data[rows]) for k, v in self.values.items()}
        return PartialForward(values, self.position, self.layer, self.capture_id)


class Model:
    def __init__(
        self,
        kind: str,
        classes: int,
        in_shape: tuple[int, ...],
        layers: list[LayerNode],
        captures: dict[int, int],
        seed: int,
        dtype=DTYPE,
    ) -> None:
        self.kind = kind
        self.classes = classes
        self.in_shape = tuple(in_shape)
        self.layers = layers
        self.captures = captures
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.epoch = 0
        self.metrics: dict = {}
        self._by_id = {node.id: node for node in layers}
        self._position = {node.id: i for i, node in enumerate(layers)}

    def __repr__(self) -> str:
        return f"Model({self.kind}, classes={self.classes}, convs={self.conv_count})"

    @property
    def conv_count(self) -> int:
        return len(self.captures)

    @property
    def materialized(self) -> bool:
        return any(node.params for node in self.layers)

    def node(self, node_id: int) -> LayerNode:
        return self._by_id[node_id]

    def capture_node(self, layer: int) -> LayerNode:
        if layer not in self.captures:
            raise ConfigError(f"{self.kind} has conv layers 1..{self.conv_count}, not {layer}")
        return self._by_id[self.captures[layer]]

    def conv_node(self, layer: int) -> LayerNode:
        self.capture_node(layer)
        return next(n for n in self.layers if n.conv_index == layer)

    def activation_dims(self, layer: int) -> tuple[int, ...]:
        return self.capture_node(layer).dims

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{n.id}.{key}", p) for n in self.layers for key, p in n.params.items()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Copies of every parameter and buffer in declared order."""
        out = [(name, p.data.copy()) for name, p in self.named_parameters()]
        out += [(f"{n.id}.{key}", buf.copy()) for n in self.layers for key, buf in n.buffers.items()]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = {name for name, _ in self.state_arrays()}
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise CheckpointError(f"array mismatch: missing {missing}, unexpected {extra}")
        for node in self.layers:
            for key, p in node.params.items():
                p.data = _checked(arrays[f"{node.id}.{key}"], p.data)
            for key, buf in node.buffers.items():
                node.buffers[key] = _checked(arrays[f"{node.id}.{key}"], buf)

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def _apply(self, node: LayerNode, args: list[Tensor], training: bool) -> Tensor:
        kind, p = node.kind, node.params
        if kind == "conv":
            cfg = node.config
            return conv2d(args[0], p["weight"], p.get("bias"), cfg["stride"], cfg["padding"], cfg["floor"])
        if kind == "relu":
            return relu(args[0])
        if kind == "pool":
            return maxpool2d(args[0], node.config["size"])
        if kind == "avgpool":
            return avgpool2d(args[0], node.config["size"])
        if kind == "batchnorm":
            return batchnorm(args[0], p["gamma"], p["beta"], node.buffers["running_mean"],
                             node.buffers["running_var"], training)
        if kind == "flatten":
            return flatten(args[0])
        if kind == "linear":
            return linear(args[0], p["weight"], p["bias"])
        if kind == "residual_add":
            return args[0] + args[1]
        raise ConfigError(f"unknown layer kind {kind!r}")

    def _run(
        self,
        values: dict[int, Tensor],
        start: int,
        stop: int,
        training: bool = False,
        masks: dict[int, np.ndarray] | None = None,
        act_hook: ActivationHook | None = None,
    ) -> dict[int, Tensor]:
        if not self.materialized:
            raise ConfigError(f"{self.kind} was built without parameters")
        mask_at = {self.captures[layer]: m for layer, m in (masks or {}).items()}
        for node in self.layers[start:stop]:
            out = self._apply(node, [values[i] for i in node.inputs], training)
            if node.id in mask_at:
                mask = np.asarray(mask_at[node.id], dtype=out.dtype)
                out = mul(out, Tensor(mask.reshape((1, -1) + (1,) * (out.ndim - 2))))
            if act_hook is not None:
                out = act_hook(node, out)
            values[node.id] = out
        return values

    def _input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(f"{self.kind} expects inputs {self.in_shape}, got {x.shape[1:]}")
        return x

    def forward(self, x, training: bool = False, masks=None, act_hook=None) -> Tensor:
        values = self._run({0: self._input(x)}, 0, len(self.layers), training, masks, act_hook)
        return values[self.layers[-1].id]

    __call__ = forward

    def forward_all(self, x, masks=None, act_hook=None) -> tuple[Tensor, list[Tensor]]:
        values = self._run({0: self._input(x)}, 0, len(self.layers), False, masks, act_hook)
        acts = [values[self.captures[layer]] for layer in range(1, self.conv_count + 1)]
        return values[self.layers[-1].id], acts

    def run_until(self, x, layer: int, act_hook=None) -> PartialForward:
        """Execute nodes up to and including the capture point of conv ``layer``."""
        capture = self.capture_node(layer)
        stop = self._position[capture.id] + 1
        values = self._run({0: self._input(x)}, 0, stop, act_hook=act_hook)
        return PartialForward(values, stop, layer, capture.id)

    def resume(self, partial: PartialForward, act_hook=None) -> Tensor:
        values = self._run(dict(partial.values), partial.position, len(self.layers), act_hook=act_hook)
        return values[self.layers[-1].id]

    def prefix_layers(self, layer: int) -> tuple[int, ...]:
        capture = self.capture_node(layer)
        return tuple(n.id for n in self.layers[: self._position[capture.id] + 1])

    def suffix_layers(self, layer: int) -> tuple[int, ...]:
        capture = self.capture_node(layer)
        return tuple(n.id for n in self.layers[self._position[capture.id] + 1 :])


def _checked(new: np.ndarray, old: np.ndarray) -> np.ndarray:
    if new.shape != old.shape:
        raise CheckpointError(f"array shape {new.shape} does not match model {old.shape}")
    return np.array(new, dtype=new.dtype)


def build(
    kind: str,
    classes: int = 10,
    in_shape: tuple[int, ...] | None = None,
    seed: int = DEFAULT_SEED,
    dtype=DTYPE,
    materialize: bool = True,
) -> Model:
    """Build a zoo architecture with Kaiming-uniform weights and zero biases.

    ``materialize=False`` keeps only the layer dimensions, which is all the
    energy model needs for the CIFAR-scale networks.
    """
    if kind not in _BUILDERS:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {', '.join(ARCHITECTURES)}")
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    in_shape = tuple(in_shape or DEFAULT_INPUT_SHAPES[kind])
    rng = np.random.default_rng(seed) if materialize else None
    builder = _GraphBuilder(in_shape, rng, dtype)
    _BUILDERS[kind](builder, classes)
    return Model(kind, classes, in_shape, builder.layers, builder.captures, seed, dtype)


def forward_capture(model: Model, x, layer: int) -> tuple[Tensor, Tensor]:
    """Logits plus the captured activation of conv ``layer``."""
    partial = model.run_until(x, layer)
    return model.resume(partial), partial.activation


def forward_all_captures(model: Model, x) -> tuple[Tensor, list[Tensor]]:
    return model.forward_all(x)


def capture_activations(
    model: Model, images: np.ndarray, layer: int, batch_size: int = EVAL_BATCH, act_hook=None
) -> np.ndarray:
    """Flattened activations of conv ``layer`` for every image, shape (N, D)."""
    rows = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            act = model.run_until(images[start : start + batch_size], layer, act_hook).activation
            rows.append(act.data.reshape(act.shape[0], -1))
    width = int(np.prod(model.activation_dims(layer)))
    return np.concatenate(rows) if rows else np.zeros((0, width), dtype=model.dtype)


def predict(model: Model, images: np.ndarray, batch_size: int = EVAL_BATCH, masks=None, act_hook=None) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.forward(images[start : start + batch_size], masks=masks, act_hook=act_hook)
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy_on(model: Model, images: np.ndarray, labels: np.ndarray, **kwargs) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(model, images, **kwargs) == labels))


def evaluate_accuracy(model: Model, data: LabeledImageSet, **kwargs) -> float:
    return accuracy_on(model, data.images, data.labels, **kwargs)


# training


@dataclass(frozen=True)
class Schedule:
    epochs: int = 30
    lr: float = 0.1
    lr_decay: float = 0.1
    step_size: int = 70
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch: int = 128

    def validate(self) -> None:
        if self.epochs < 1 or self.step_size < 1 or self.batch < 1:
            raise ConfigError(f"epochs, step_size and batch must be positive: {self}")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.lr_decay <= 0:
            raise ConfigError(f"invalid learning-rate settings: {self}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.step_size)


SCHEDULES = {
    "lenet": Schedule(epochs=30, lr=0.1, momentum=0.0, batch=64),
    "tiny_cnn": Schedule(epochs=5, lr=0.05, momentum=0.9, batch=32),
    "vgg19_cifar": Schedule(epochs=210, lr=0.1, momentum=0.9, weight_decay=5e-4),
    "resnet18_cifar": Schedule(epochs=210, lr=0.1, momentum=0.9, weight_decay=5e-4),
}


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    train_accuracy: float
    eval_accuracy: float | None = None


@dataclass
class TrainResult:
    model: Model
    history: list[EpochStats]


def train(
    model: Model,
    data: LabeledImageSet,
    schedule: Schedule,
    seed: int = DEFAULT_SEED,
    eval_set: LabeledImageSet | None = None,
    progress: bool = False,
) -> TrainResult:
    """Minibatch SGD with step learning-rate decay.

    A non-finite loss or gradient restores the parameters of the last completed
    epoch and raises DivergenceError.
    """
    schedule.validate()
    optimizer = SGD(model.parameters(), schedule.lr, schedule.momentum, schedule.weight_decay)
    shuffle_seeds = np.random.SeedSequence(seed).generate_state(schedule.epochs)
    snapshot = dict(model.state_arrays())
    history: list[EpochStats] = []
    epochs = range(schedule.epochs)
    if progress:
        epochs = tqdm(epochs, desc=f"train {model.kind}", unit="epoch")
    for epoch in epochs:
        optimizer.lr = schedule.lr_at(epoch)
        loss_sum, correct = 0.0, 0
        for xb, yb in batches(data, schedule.batch, shuffle=True, seed=int(shuffle_seeds[epoch])):
            optimizer.zero_grad()
            logits = model.forward(xb, training=True)
            loss = softmax_cross_entropy(logits, yb)
            value = loss.item()
            try:
                if not np.isfinite(value):
                    raise NonFiniteError(f"loss is {value}")
                backward(loss)
                optimizer.step()
            except NonFiniteError as err:
                model.load_state_arrays(snapshot)
                raise DivergenceError(
                    f"training diverged in epoch {epoch + 1}: {err}", last_good_epoch=epoch
                ) from err
            loss_sum += value * len(yb)
            correct += int(np.sum(logits.data.argmax(axis=1) == yb))
        model.epoch += 1
        stats = EpochStats(epoch + 1, optimizer.lr, loss_sum / len(data), correct / len(data))
        if eval_set is not None:
            stats.eval_accuracy = evaluate_accuracy(model, eval_set)
        history.append(stats)
        snapshot = dict(model.state_arrays())
        logger.info("epoch %d lr %.4g loss %.4f acc %.4f", stats.epoch, stats.lr, stats.loss, stats.train_accuracy)
    return TrainResult(model, history)


# checkpoints


def save_model(model: Model, path, metrics: dict | None = None) -> None:
    header = {
        "artifact": "model",
        "kind": model.kind,
        "classes": model.classes,
        "in_shape": list(model.in_shape),
        "seed": model.seed,
        "epoch": model.epoch,
        "dtype": model.dtype.str,
        "metrics": {**model.metrics, **(metrics or {})},
        "conv_layers": model.conv_count,
        "layers": [
            {"id": n.id, "kind": n.kind, "dims": list(n.dims), "inputs": list(n.inputs),
             "conv_index": n.conv_index}
            for n in model.layers
        ],
    }
    write_container(path, header, model.state_arrays())


def load_model(path) -> Model:
    header, arrays = read_container(path)
    if header.get("artifact") != "model":
        raise CheckpointError(f"{path}: holds a {header.get('artifact')!r}, not a model")
    model = build(header["kind"], header["classes"], tuple(header["in_shape"]), header["seed"],
                  np.dtype(header["dtype"]))
    model.load_state_arrays(arrays)
    model.epoch = header["epoch"]
    model.metrics = header.get("metrics", {})
    return model


def inspect_header(path) -> dict:
    return read_header(Path(path))
