"""Binary detector on captured activations and the early-exit guarded model."""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from ansguard import DEFAULT_SEED
from ansguard.attacks import AttackSpec, attack_dataset, pgd_on_activations
from ansguard.checkpoint import read_container, write_container
from ansguard.errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    InsufficientDataError,
    NonFiniteError,
    ShapeError,
)
from ansguard.metrics import DEFAULT_THRESHOLD, Confusion, ScoredLabels, accuracy, auc, confusion
from ansguard.models import Model, capture_activations
from ansguard.tensor import (
    DTYPE,
    SGD,
    Tensor,
    backward,
    linear,
    no_grad,
    relu,
    softmax,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = 128
CLEAN, ADVERSARIAL = 0, 1


class Detector:
    """Linear(D, H) -> ReLU -> Linear(H, 2); logit 1 means adversarial."""

    def __init__(
        self,
        in_features: int,
        hidden: int = DEFAULT_HIDDEN,
        layer: int | None = None,
        seed: int = DEFAULT_SEED,
        dtype=DTYPE,
    ) -> None:
        if in_features < 1 or hidden < 1:
            raise ConfigError(f"detector sizes must be positive, got {in_features}, {hidden}")
        rng = np.random.default_rng(seed)
        self.in_features = in_features
        self.hidden = hidden
        self.layer = layer
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        for name, (fan_out, fan_in) in (("fc1", (hidden, in_features)), ("fc2", (2, hidden))):
            bound = np.sqrt(6.0 / fan_in)
            self.params[f"{name}.weight"] = Tensor(
                rng.uniform(-bound, bound, (fan_out, fan_in)).astype(dtype), True
            )
            self.params[f"{name}.bias"] = Tensor(np.zeros(fan_out, dtype=dtype), True)

    def __repr__(self) -> str:
        return f"Detector({self.in_features} -> {self.hidden} -> 2, layer={self.layer})"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, x, act_hook: Callable[[str, Tensor], Tensor] | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.params["fc1.weight"].dtype))
        hook = act_hook or (lambda _, t: t)
        p = self.params
        h = hook("fc1", linear(x, p["fc1.weight"], p["fc1.bias"]))
        h = hook("relu", relu(h))
        return hook("fc2", linear(h, p["fc2.weight"], p["fc2.bias"]))

    __call__ = forward

    def scores(self, activations: np.ndarray, act_hook=None, batch_size: int = 1024) -> np.ndarray:
        """Softmax probability of the adversarial class per row."""
        out = []
        with no_grad():
            for start in range(0, len(activations), batch_size):
                logits = self.forward(activations[start : start + batch_size], act_hook)
                out.append(softmax(logits.data.astype(np.float64))[:, ADVERSARIAL])
        return np.concatenate(out) if out else np.zeros(0)

    def clone(self) -> "Detector":
        twin = Detector.__new__(Detector)
        twin.__dict__.update(self.__dict__)
        twin.params = {k: Tensor(v.data.copy(), True) for k, v in self.params.items()}
        return twin


@dataclass
class ActivationDataset:
    activations: np.ndarray  # (N, D) flattened captures
    labels: np.ndarray  # 0 clean, 1 adversarial
    layer: int
    spec: AttackSpec | None = None
    reused_sources: bool = False

    def __post_init__(self) -> None:
        if self.activations.ndim != 2 or len(self.activations) != len(self.labels):
            raise ShapeError(
                f"activations {self.activations.shape} vs {len(self.labels)} labels"
            )
        positives = int(np.sum(self.labels == ADVERSARIAL))
        if 2 * positives != len(self.labels):
            raise ConfigError(f"unbalanced activation set: {positives} of {len(self.labels)} adversarial")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def width(self) -> int:
        return self.activations.shape[1]


def build_activation_dataset(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    layer: int,
    spec: AttackSpec,
    train_size: int,
    test_size: int,
    seed: int = DEFAULT_SEED,
    allow_reuse: bool = False,
    progress: bool = False,
) -> tuple[ActivationDataset, ActivationDataset]:
    """Paired clean/adversarial captures: each source image yields one row of each label.

    Train and test halves always draw from disjoint source images. With reuse
    allowed, sources repeat within their own half with fresh attack noise.
    """
    if train_size % 2 or test_size % 2 or train_size < 2 or test_size < 2:
        raise ConfigError(f"dataset sizes must be even and positive, got {train_size}, {test_size}")
    half = train_size // 2
    need = half + test_size // 2
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    reused = need > len(images)
    if reused and not allow_reuse:
        raise InsufficientDataError(
            f"{need} source images needed, {len(images)} available; pass allow_reuse"
        )
    if reused and len(images) < 2:
        raise InsufficientDataError("reuse still needs one source image per half")
    split_at = min(max(round(len(order) * half / need), 1), len(order) - 1) if reused else half
    train_pool, test_pool = order[:split_at], order[split_at:need]
    sources = np.concatenate([np.resize(train_pool, half), np.resize(test_pool, need - half)])
    x = images[sources]
    x_adv = attack_dataset(model, x, labels[sources], spec, seed, progress=progress)
    clean_rows = capture_activations(model, x, layer)
    adv_rows = capture_activations(model, x_adv, layer)
    logger.info("activation set layer %d: %d sources, width %d", layer, need, clean_rows.shape[1])

    def part(sl: slice) -> ActivationDataset:
        n = len(clean_rows[sl])
        return ActivationDataset(
            np.concatenate([clean_rows[sl], adv_rows[sl]]),
            np.r_[np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)],
            layer,
            spec,
            reused,
        )

    return part(slice(0, half)), part(slice(half, need))


def paired_activation_set(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    layer: int,
    spec: AttackSpec,
    seed: int = DEFAULT_SEED,
    progress: bool = False,
) -> ActivationDataset:
    """One clean and one attacked row per image, for held-out evaluation."""
    if len(images) == 0:
        raise InsufficientDataError("no source images for the activation set")
    x_adv = attack_dataset(model, images, labels, spec, seed, progress=progress)
    clean_rows = capture_activations(model, images, layer)
    adv_rows = capture_activations(model, x_adv, layer)
    n = len(images)
    return ActivationDataset(
        np.concatenate([clean_rows, adv_rows]),
        np.r_[np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)],
        layer,
        spec,
    )


@dataclass(frozen=True)
class DetectorSchedule:
    phases: tuple[tuple[int, float], ...] = ((15, 0.03), (15, 0.003))  # (epochs, lr)
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch: int = 128

    def lr_per_epoch(self) -> list[float]:
        return [lr for epochs, lr in self.phases for _ in range(epochs)]


@dataclass
class DetectorHistory:
    epoch: int
    lr: float
    loss: float
    accuracy: float


@dataclass
class DetectorTraining:
    detector: Detector
    history: list[DetectorHistory] = field(default_factory=list)


def _fit(
    detector: Detector,
    data: ActivationDataset,
    schedule: DetectorSchedule,
    seed: int,
    perturb: Callable[[np.ndarray, np.ndarray], np.ndarray] | None,
    progress: bool,
) -> DetectorTraining:
    if schedule.batch < 1 or not schedule.phases:
        raise ConfigError(f"bad detector schedule {schedule}")
    optimizer = SGD(detector.parameters(), schedule.phases[0][1], schedule.momentum, schedule.weight_decay)
    shuffle = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    result = DetectorTraining(detector)
    epochs = list(enumerate(schedule.lr_per_epoch(), start=1))
    if progress:
        epochs = tqdm(epochs, desc="train detector", unit="epoch")
    for epoch, lr in epochs:
        optimizer.lr = lr
        order = shuffle.permutation(len(data))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), schedule.batch):
            index = order[start : start + schedule.batch]
            rows, labels = data.activations[index], data.labels[index]
            if perturb is not None:
                rows = perturb(rows, labels)
            optimizer.zero_grad()
            logits = detector.forward(rows)
            loss = softmax_cross_entropy(logits, labels)
            value = loss.item()
            try:
                if not np.isfinite(value):
                    raise NonFiniteError(f"loss is {value}")
                backward(loss)
                optimizer.step()
            except NonFiniteError as err:
                raise DivergenceError(f"detector diverged in epoch {epoch}: {err}", epoch - 1) from err
            loss_sum += value * len(index)
            correct += int(np.sum(logits.data.argmax(axis=1) == labels))
        result.history.append(DetectorHistory(epoch, lr, loss_sum / len(data), correct / len(data)))
    logger.info("detector trained: final loss %.4f", result.history[-1].loss)
    return result


def train_detector(
    data: ActivationDataset,
    schedule: DetectorSchedule = DetectorSchedule(),
    seed: int = DEFAULT_SEED,
    hidden: int = DEFAULT_HIDDEN,
    progress: bool = False,
) -> DetectorTraining:
    detector = Detector(data.width, hidden, data.layer, seed, data.activations.dtype)
    return _fit(detector, data, schedule, seed, None, progress)


def train_detector_adversarial(
    data: ActivationDataset,
    schedule: DetectorSchedule,
    dyn_spec: AttackSpec,
    p_attack: float = 0.5,
    seed: int = DEFAULT_SEED,
    hidden: int = DEFAULT_HIDDEN,
    progress: bool = False,
) -> DetectorTraining:
    """Train while adversarial rows are attacked in activation space with probability p_attack.

    Coin flips and attack noise use their own streams, so p_attack = 0 retraces
    train_detector exactly.
    """
    if not 0 <= p_attack <= 1:
        raise ConfigError(f"p_attack must lie in [0, 1], got {p_attack}")
    detector = Detector(data.width, hidden, data.layer, seed, data.activations.dtype)
    coin_seq, noise_seq = np.random.SeedSequence(seed).spawn(3)[1:]
    coins, noise = np.random.default_rng(coin_seq), np.random.default_rng(noise_seq)

    def perturb(rows: np.ndarray, labels: np.ndarray) -> np.ndarray:
        hit = (labels == ADVERSARIAL) & (coins.random(len(labels)) < p_attack)
        if not hit.any():
            return rows
        rows = rows.copy()
        rows[hit] = pgd_on_activations(detector, rows[hit], dyn_spec, noise)
        return rows

    return _fit(detector, data, schedule, seed, perturb, progress)


@dataclass(frozen=True)
class DetectorEvaluation:
    auc: float
    accuracy: float
    confusion: Confusion
    threshold: float = DEFAULT_THRESHOLD


def evaluate_detector(
    detector: Detector, data: ActivationDataset, threshold: float = DEFAULT_THRESHOLD, act_hook=None
) -> DetectorEvaluation:
    scored = ScoredLabels(detector.scores(data.activations, act_hook), data.labels)
    return DetectorEvaluation(auc(scored), accuracy(scored, threshold), confusion(scored, threshold), threshold)


def dynamic_attack_dataset(
    detector: Detector, data: ActivationDataset, dyn_spec: AttackSpec, seed: int = DEFAULT_SEED
) -> ActivationDataset:
    """Every adversarial row also attacked in activation space; clean rows untouched."""
    rows = data.activations.copy()
    adv = data.labels == ADVERSARIAL
    rows[adv] = pgd_on_activations(detector, rows[adv], dyn_spec, np.random.default_rng(seed))
    return ActivationDataset(rows, data.labels.copy(), data.layer, data.spec, data.reused_sources)


# early exit


@dataclass(frozen=True)
class GuardedModel:
    model: Model
    detector: Detector
    layer: int
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        width = int(np.prod(self.model.activation_dims(self.layer)))
        if width != self.detector.in_features:
            raise ShapeError(f"layer {self.layer} yields {width} features, detector takes {self.detector.in_features}")


@dataclass
class CostTrace:
    prefix: tuple[int, ...]
    suffix: tuple[int, ...]
    exited: np.ndarray  # per row, True when stopped at the detector

    def layers_for(self, row: int) -> tuple:
        """Executed model layer ids for one row, with the detector after the prefix."""
        tail = () if self.exited[row] else self.suffix
        return self.prefix + ("detector",) + tail

    @property
    def early_exit_rate(self) -> float:
        return float(np.mean(self.exited)) if len(self.exited) else 0.0


@dataclass
class GuardedResult:
    adversarial: np.ndarray  # per-row verdict
    scores: np.ndarray
    logits: np.ndarray  # rows of inputs judged clean, in input order
    clean_rows: np.ndarray
    trace: CostTrace

    def verdict(self, row: int) -> tuple[str, np.ndarray | None]:
        if self.adversarial[row]:
            return "adversarial", None
        return "clean", self.logits[int(np.searchsorted(self.clean_rows, row))]


def guarded_forward(guarded: GuardedModel, x: np.ndarray) -> GuardedResult:
    """Run to the attach layer, let the detector decide, finish only the clean rows."""
    model = guarded.model
    with no_grad():
        partial = model.run_until(x, guarded.layer)
        act = partial.activation.data
        scores = guarded.detector.scores(act.reshape(len(act), -1))
        adversarial = scores > guarded.threshold
        clean_rows = np.flatnonzero(~adversarial)
        if len(clean_rows) == len(x):
            logits = model.resume(partial).data
        elif len(clean_rows):
            logits = model.resume(partial.select(clean_rows)).data
        else:
            logits = np.zeros((0, model.classes), dtype=model.dtype)
    trace = CostTrace(model.prefix_layers(guarded.layer), model.suffix_layers(guarded.layer), adversarial)
    return GuardedResult(adversarial, scores, logits, clean_rows, trace)


# persistence


def save_detector(detector: Detector, path, metrics: dict | None = None) -> None:
    header = {
        "artifact": "detector",
        "in_features": detector.in_features,
        "hidden": detector.hidden,
        "layer": detector.layer,
        "seed": detector.seed,
        "metrics": metrics or {},
    }
    write_container(path, header, [(k, v.data) for k, v in detector.params.items()])


def load_detector(path) -> Detector:
    header, arrays = read_container(path)
    if header.get("artifact") != "detector":
        raise CheckpointError(f"{path}: holds a {header.get('artifact')!r}, not a detector")
    detector = Detector(header["in_features"], header["hidden"], header["layer"], header["seed"])
    for name, tensor in detector.params.items():
        if name not in arrays or arrays[name].shape != tensor.shape:
            raise CheckpointError(f"{path}: missing or misshaped array {name}")
        tensor.data = arrays[name]
    return detector


def save_activation_dataset(data: ActivationDataset, path) -> None:
    header = {
        "artifact": "activations",
        "layer": data.layer,
        "attack": data.spec.to_config() if data.spec else None,
        "reused_sources": data.reused_sources,
    }
    write_container(path, header, [("activations", data.activations), ("labels", data.labels)])


def load_activation_dataset(path) -> ActivationDataset:
    header, arrays = read_container(path)
    if header.get("artifact") != "activations":
        raise CheckpointError(f"{path}: holds a {header.get('artifact')!r}, not an activation set")
    spec = AttackSpec.from_config(header["attack"]) if header.get("attack") else None
    return ActivationDataset(arrays["activations"], arrays["labels"], header["layer"], spec, header["reused_sources"])
