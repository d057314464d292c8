"""FGSM and PGD in input and activation space, plus substitute-model transfer.

Attacks take numpy batches and return numpy batches. Gradients come from
``tensor.grad`` so a shared model's parameters are never written to, which
lets batches of one dataset be attacked from several threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np
from tqdm import tqdm

from ansguard import DEFAULT_SEED
from ansguard.errors import ConfigError, PresetError, ShapeError
from ansguard.models import accuracy_on
from ansguard.tensor import Tensor, grad, softmax_cross_entropy

logger = logging.getLogger(__name__)

FAMILIES = ("fgsm", "pgd")
TARGETS = ("classifier", "detector")
CLEAN_LABEL = 0
MAX_WORKERS = 8
ATTACK_BATCH = 128

# name -> (steps n, step size alpha, strength epsilon), raw units
PGD_PRESETS: dict[str, tuple[int, float, float]] = {
    "i": (7, 0.007, 0.125),
    "ii": (20, 0.007, 0.125),
    "iii": (100, 0.007, 0.125),
    "iv": (40, 0.5, 8.0),
    "v": (200, 0.5, 8.0),
    "vgg-v": (500, 0.5, 8.0),
    "mnist-i": (150, 0.007, 0.125),
    "mnist-ii": (300, 0.007, 0.125),
    "mnist-iii": (450, 0.06, 5.0),
    "mnist-iv": (600, 0.06, 5.0),
}
PRESET_GRID = ("i", "ii", "iii", "iv", "v")


class Differentiable(Protocol):
    def forward(self, x: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class AttackSpec:
    family: str
    epsilon: float
    alpha: float = 0.0
    steps: int = 1
    random_start: bool = False
    pixel_scale_255: bool = False
    target: str = "classifier"
    preset: str | None = None

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown attack family {self.family!r}")
        if self.target not in TARGETS:
            raise ConfigError(f"unknown attack target {self.target!r}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.family == "pgd" and (self.steps < 1 or self.alpha <= 0):
            raise ConfigError(f"pgd needs steps >= 1 and alpha > 0, got {self.steps}, {self.alpha}")

    @classmethod
    def create(
        cls,
        family: str,
        epsilon: float,
        alpha: float = 0.0,
        steps: int = 1,
        *,
        random_start: bool = False,
        pixel_scale_255: bool | None = None,
        target: str = "classifier",
        preset: str | None = None,
    ) -> "AttackSpec":
        """Build a spec from raw values; strengths above 1 are read as 0-255 pixel units."""
        if pixel_scale_255 is None:
            pixel_scale_255 = epsilon > 1
        if pixel_scale_255:
            epsilon, alpha = epsilon / 255.0, alpha / 255.0
            logger.info("pixel_scale_255: epsilon %.6g, alpha %.6g in [0,1] units", epsilon, alpha)
        if family == "fgsm":
            steps, alpha = 1, alpha or epsilon
        return cls(family, epsilon, alpha, steps, random_start, pixel_scale_255, target, preset)

    @property
    def label(self) -> str:
        if self.preset:
            return f"{self.family}:{self.preset}"
        if self.family == "fgsm":
            return f"fgsm:{self.epsilon:g}"
        return f"pgd:{self.epsilon:g},{self.alpha:g},{self.steps}"

    def to_config(self) -> dict[str, str]:
        return {key: str(value) for key, value in asdict(self).items() if value is not None}

    @classmethod
    def from_config(cls, block: dict[str, str]) -> "AttackSpec":
        """Inverse of to_config; values are already in input units."""
        flags = ("random_start", "pixel_scale_255")
        try:
            return cls(
                family=block["family"],
                epsilon=float(block["epsilon"]),
                alpha=float(block.get("alpha", 0.0)),
                steps=int(block.get("steps", 1)),
                target=block.get("target", "classifier"),
                preset=block.get("preset"),
                **{flag: block.get(flag, "False") == "True" for flag in flags},
            )
        except (KeyError, ValueError) as err:
            raise ConfigError(f"bad attack config block {block}: {err}") from err

    def with_target(self, target: str) -> "AttackSpec":
        return AttackSpec(**{**asdict(self), "target": target})


def preset(name: str, random_start: bool = True, target: str = "classifier") -> AttackSpec:
    if name not in PGD_PRESETS:
        raise PresetError(f"unknown PGD preset {name!r}; known: {', '.join(PGD_PRESETS)}")
    steps, alpha, epsilon = PGD_PRESETS[name]
    return AttackSpec.create(
        "pgd", epsilon, alpha, steps, random_start=random_start, target=target, preset=name
    )


def parse_attacks(text: str, random_start: bool = True) -> list[AttackSpec]:
    """Parse ``fgsm:EPS``, ``pgd:EPS,ALPHA,STEPS`` or ``pgd:PRESET[,PRESET...]``."""
    family, sep, rest = text.strip().partition(":")
    if not sep or not rest:
        raise ConfigError(f"attack {text!r} is not of the form family:arguments")
    parts = [p.strip() for p in rest.split(",")]
    if family == "fgsm":
        try:
            return [AttackSpec.create("fgsm", float(p)) for p in parts]
        except ValueError as err:
            raise PresetError(f"fgsm takes numeric strengths, got {rest!r}") from err
    if family != "pgd":
        raise ConfigError(f"unknown attack family {family!r}")
    if all(p in PGD_PRESETS for p in parts):
        return [preset(p, random_start) for p in parts]
    if len(parts) == 3:
        try:
            eps, alpha, steps = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            pass
        else:
            return [AttackSpec.create("pgd", eps, alpha, steps, random_start=random_start)]
    raise PresetError(f"unknown PGD preset or malformed triple in {text!r}")


def parse_attack(text: str, random_start: bool = True) -> AttackSpec:
    specs = parse_attacks(text, random_start)
    if len(specs) != 1:
        raise ConfigError(f"{text!r} names {len(specs)} attacks, expected one")
    return specs[0]


def _ascent_direction(model: Differentiable, x: np.ndarray, y: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """sign of the gradient the attacker climbs; sign(0) = 0."""
    xt = Tensor(x, requires_grad=True)
    logits = model.forward(xt)
    if spec.target == "detector":
        loss = softmax_cross_entropy(logits, np.full(len(x), CLEAN_LABEL), reduction="sum")
        (g,) = grad(loss, [xt])
        return -np.sign(g)
    loss = softmax_cross_entropy(logits, y, reduction="sum")
    (g,) = grad(loss, [xt])
    return np.sign(g)


def fgsm(model: Differentiable, x: np.ndarray, y: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """x + eps * sign(grad_x L), clipped to [0, 1]."""
    if spec.family != "fgsm":
        raise ConfigError(f"fgsm called with a {spec.family} spec")
    if spec.epsilon == 0:
        return x.copy()
    return np.clip(x + spec.epsilon * _ascent_direction(model, x, y, spec), 0.0, 1.0)


def pgd(
    model: Differentiable,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    rng: np.random.Generator | None = None,
    on_step=None,
) -> np.ndarray:
    """Signed-gradient steps of size alpha, each projected onto the eps-ball around x within [0, 1]."""
    if spec.family != "pgd":
        raise ConfigError(f"pgd called with a {spec.family} spec")
    lower = np.clip(x - spec.epsilon, 0.0, 1.0)
    upper = np.clip(x + spec.epsilon, 0.0, 1.0)
    x_adv = x.copy()
    if spec.random_start:
        rng = rng or np.random.default_rng(DEFAULT_SEED)
        noise = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape).astype(x.dtype)
        x_adv = np.clip(x + noise, lower, upper)
    for _ in range(spec.steps):
        x_adv = np.clip(x_adv + spec.alpha * _ascent_direction(model, x_adv, y, spec), lower, upper)
        if on_step is not None:
            on_step(x_adv)
    return x_adv


def run_attack(model, x, y, spec: AttackSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    if spec.family == "fgsm":
        return fgsm(model, x, y, spec)
    return pgd(model, x, y, spec, rng)


def pgd_on_activations(
    detector,
    a_adv: np.ndarray,
    spec: AttackSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Push adversarial activations toward the detector's clean verdict.

    Descends the detector cross-entropy toward the clean label inside the
    eps-ball around ``a_adv``, kept non-negative like the post-ReLU values it
    replaces.
    """
    if a_adv.ndim != 2 or a_adv.shape[1] != detector.in_features:
        raise ShapeError(
            f"detector takes {detector.in_features} features, activations are {a_adv.shape}"
        )
    if spec.epsilon == 0 or len(a_adv) == 0:
        return a_adv.copy()
    lower = np.maximum(a_adv - spec.epsilon, 0.0)
    upper = a_adv + spec.epsilon
    a = a_adv.copy()
    if spec.random_start:
        rng = rng or np.random.default_rng(DEFAULT_SEED)
        a = np.clip(a + rng.uniform(-spec.epsilon, spec.epsilon, a.shape).astype(a.dtype), lower, upper)
    towards_clean = spec.with_target("detector")
    for _ in range(spec.steps):
        a = np.clip(a + spec.alpha * _ascent_direction(detector, a, None, towards_clean), lower, upper)
    return a


def blackbox_transfer(substitute, target, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Craft on the substitute; the result is meant for evaluation on the target."""
    if tuple(substitute.in_shape) != tuple(target.in_shape):
        raise ShapeError(f"substitute takes {substitute.in_shape}, target {target.in_shape}")
    if tuple(x.shape[1:]) != tuple(target.in_shape):
        raise ShapeError(f"inputs {x.shape[1:]} do not fit {target.in_shape}")
    return run_attack(substitute, x, y, spec, rng)


def attack_dataset(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    spec: AttackSpec,
    seed: int = DEFAULT_SEED,
    batch_size: int = ATTACK_BATCH,
    max_workers: int = MAX_WORKERS,
    progress: bool = False,
) -> np.ndarray:
    """Attack every image in parallel batches; batch i draws noise from the i-th spawned seed."""
    starts = list(range(0, len(images), batch_size))
    if not starts:
        return images.copy()
    seeds = np.random.SeedSequence(seed).spawn(len(starts))
    out = np.empty_like(images)

    def work(i: int) -> tuple[int, np.ndarray]:
        sl = slice(starts[i], starts[i] + batch_size)
        return i, run_attack(model, images[sl], labels[sl], spec, np.random.default_rng(seeds[i]))

    with ThreadPoolExecutor(max_workers=min(max_workers, len(starts))) as pool:
        futures = [pool.submit(work, i) for i in range(len(starts))]
        iterator = as_completed(futures)
        if progress:
            iterator = tqdm(iterator, total=len(futures), desc=f"attack {spec.label}")
        for future in iterator:
            i, x_adv = future.result()
            out[starts[i] : starts[i] + batch_size] = x_adv
    return out


def adversarial_accuracy(model, images, labels, spec: AttackSpec, seed: int = DEFAULT_SEED, **kwargs) -> float:
    x_adv = attack_dataset(model, images, labels, spec, seed, **kwargs)
    return accuracy_on(model, x_adv, labels)
