"""Layer-wise adversarial noise sensitivity (ANS) and channel ablation."""

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ansguard import DEFAULT_SEED
from ansguard.attacks import AttackSpec, attack_dataset
from ansguard.errors import ConfigError, ShapeError
from ansguard.models import EVAL_BATCH, Model, accuracy_on
from ansguard.tensor import no_grad

logger = logging.getLogger(__name__)

DEFAULT_CANDIDATE_FRACTION = 0.6
DEFAULT_ANS_BATCH = 512
AGGREGATION = "per-sample RMS of (a_adv - a), mean over samples"


@dataclass
class AnsProfile:
    values: np.ndarray  # index l-1 holds ANS of conv layer l
    attack: AttackSpec
    batch_size: int
    aggregation: str = AGGREGATION

    def __len__(self) -> int:
        return len(self.values)

    def rows(self) -> list[tuple[int, float]]:
        return [(layer, float(v)) for layer, v in enumerate(self.values, start=1)]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "ans"])
            writer.writerows(self.rows())


def ans_from_activations(clean: np.ndarray, adversarial: np.ndarray) -> float:
    if clean.shape != adversarial.shape:
        raise ShapeError(f"activation shapes differ: {clean.shape} vs {adversarial.shape}")
    diff = (adversarial.astype(np.float64) - clean).reshape(len(clean), -1)
    return float(np.mean(np.sqrt(np.mean(diff * diff, axis=1))))


def ans_profile(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    spec: AttackSpec,
    seed: int = DEFAULT_SEED,
    x_adv: np.ndarray | None = None,
    batch_size: int = EVAL_BATCH,
) -> AnsProfile:
    """ANS of every conv layer for one clean batch and its attacked copy."""
    if len(images) == 0:
        raise ConfigError("ANS needs a nonempty batch")
    if x_adv is None:
        x_adv = attack_dataset(model, images, labels, spec, seed)
    sums = np.zeros(model.conv_count)
    with no_grad():
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            _, clean = model.forward_all(images[sl])
            _, adv = model.forward_all(x_adv[sl])
            for i, (a, b) in enumerate(zip(clean, adv)):
                sums[i] += ans_from_activations(a.data, b.data) * len(a)
    values = sums / len(images)
    logger.info("ANS %s: %s", spec.label, np.array2string(values, precision=4))
    return AnsProfile(values, spec, len(images))


def select_detector_layer(
    profile: AnsProfile | Sequence[float],
    candidate_fraction: float = DEFAULT_CANDIDATE_FRACTION,
) -> int:
    """Highest-ANS conv layer among the first ceil(fraction * L); ties go to the earliest."""
    values = np.asarray(profile.values if isinstance(profile, AnsProfile) else profile, dtype=float)
    if values.size == 0:
        raise ConfigError("empty ANS profile")
    if not 0 < candidate_fraction <= 1:
        raise ConfigError(f"candidate fraction must lie in (0, 1], got {candidate_fraction}")
    # 0.7 * 10 evaluates a hair above 7
    allowed = max(1, math.ceil(candidate_fraction * values.size - 1e-9))
    return int(np.argmax(values[:allowed])) + 1


@dataclass(frozen=True)
class AblationRow:
    fraction: float
    clean_accuracy: float
    adversarial_accuracy: float


def channel_mask(channels: int, fraction: float, seed: int) -> np.ndarray | None:
    """Zero the first round(fraction * C) channels of one seeded permutation."""
    removed = round(fraction * channels)
    if removed == 0:
        return None
    mask = np.ones(channels)
    mask[np.random.default_rng(seed).permutation(channels)[:removed]] = 0.0
    return mask


def ablation_study(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    adv_images: np.ndarray,
    layer: int,
    fractions: Sequence[float],
    seed: int = DEFAULT_SEED,
) -> list[AblationRow]:
    """Clean and adversarial accuracy as growing random channel subsets of a layer are removed."""
    channels = model.activation_dims(layer)[0]
    fractions = [float(f) for f in fractions]
    if any(not 0 <= f <= 1 for f in fractions):
        raise ConfigError(f"fractions must lie in [0, 1]: {fractions}")
    if fractions != sorted(fractions):
        raise ConfigError(f"fractions must be ascending: {fractions}")
    rows = []
    for fraction in fractions:
        mask = channel_mask(channels, fraction, seed)
        masks = None if mask is None else {layer: mask}
        rows.append(AblationRow(
            fraction,
            accuracy_on(model, images, labels, masks=masks),
            accuracy_on(model, adv_images, labels, masks=masks),
        ))
        logger.debug("ablation layer %d f=%.2f -> %s", layer, fraction, rows[-1])
    return rows


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "clean", "adv"])
        for row in rows:
            writer.writerow([row.fraction, row.clean_accuracy, row.adversarial_accuracy])
