"""Post-training symmetric uniform quantization, simulated in floating point."""

import csv
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

from ansguard.detector import Detector
from ansguard.errors import ConfigError
from ansguard.metrics import ScoredLabels, auc
from ansguard.models import Model, accuracy_on, capture_activations
from ansguard.tensor import Tensor

logger = logging.getLogger(__name__)

MIN_BITS, MAX_BITS = 1, 16
CASES = ("net_only", "det_only", "both")
MAX_WORKERS = 4


def _quantize_array(values: np.ndarray, bits: int) -> np.ndarray:
    if bits < 1:
        raise ConfigError(f"bits must be >= 1, got {bits}")
    t = np.asarray(values)
    m = float(np.max(np.abs(t))) if t.size else 0.0
    if m == 0.0:
        return t.copy()
    wide = t.astype(np.float64)
    if bits == 1:
        return (np.sign(wide) * m).astype(t.dtype)
    levels_max = 2 ** (bits - 1) - 1
    levels = np.clip(np.rint(wide / (m / levels_max)), -levels_max, levels_max)
    # m * (level / K) maps the extreme level back to exactly m, which keeps requantization stable
    return (m * (levels / levels_max)).astype(t.dtype)


def quantize_tensor(t, bits: int):
    """Per-tensor symmetric grid with step max|t| / (2^(bits-1) - 1); bits=1 keeps sign * max|t|."""
    if isinstance(t, Tensor):
        return Tensor(_quantize_array(t.data, bits))
    return _quantize_array(t, bits)


def quantization_step(t: np.ndarray, bits: int) -> float:
    m = float(np.max(np.abs(t))) if np.size(t) else 0.0
    return m if bits == 1 else m / (2 ** (bits - 1) - 1)


@dataclass(frozen=True)
class QuantConfig:
    network_bits: int | None = None  # None keeps full precision
    detector_bits: int | None = None
    scheme: str = "symmetric-uniform-per-tensor"

    def __post_init__(self) -> None:
        for bits in (self.network_bits, self.detector_bits):
            if bits is not None and not MIN_BITS <= bits <= MAX_BITS:
                raise ConfigError(f"bits must lie in [{MIN_BITS}, {MAX_BITS}], got {bits}")

    @classmethod
    def parse(cls, text: str) -> "QuantConfig":
        """``NET:DET`` bit widths, either side may be ``float``."""
        try:
            net, det = text.split(":")
            convert = lambda s: None if s in ("", "float") else int(s)  # noqa: E731
            return cls(convert(net), convert(det))
        except ValueError as err:
            raise ConfigError(f"--bits expects NET:DET, got {text!r}") from err

    @classmethod
    def for_case(cls, case: str, bits: int) -> "QuantConfig":
        if case == "net_only":
            return cls(bits, None)
        if case == "det_only":
            return cls(None, bits)
        if case == "both":
            return cls(bits, bits)
        raise ConfigError(f"unknown quantization case {case!r}; choose from {', '.join(CASES)}")


def quantized_copy(model: Model, bits: int) -> Model:
    """Copy with every weight, bias and batchnorm statistic quantized once."""
    twin = model.clone()
    for node in twin.layers:
        for p in node.params.values():
            p.data = _quantize_array(p.data, bits)
        for key, buf in node.buffers.items():
            node.buffers[key] = _quantize_array(buf, bits)
    return twin


def quantized_detector(detector: Detector, bits: int) -> Detector:
    twin = detector.clone()
    for p in twin.params.values():
        p.data = _quantize_array(p.data, bits)
    return twin


def activation_hook(bits: int):
    """Hook for Model/Detector forward passes that requantizes each layer output."""

    def hook(_node, out: Tensor) -> Tensor:
        return Tensor(_quantize_array(out.data, bits))

    return hook


def quantized_forward(target: Model | Detector, x, config: QuantConfig) -> np.ndarray:
    """Logits with weights quantized once and activations after every layer."""
    if isinstance(target, Detector):
        bits = config.detector_bits
        if bits is None:
            return target.forward(x).data
        return quantized_detector(target, bits).forward(x, activation_hook(bits)).data
    bits = config.network_bits
    if bits is None:
        return target.forward(x).data
    return quantized_copy(target, bits).forward(x, act_hook=activation_hook(bits)).data


@dataclass
class DetectionPipeline:
    """A base network, its detector and an evaluation mix of clean and attacked images."""

    model: Model
    detector: Detector
    layer: int
    images: np.ndarray
    labels: np.ndarray
    adv_images: np.ndarray

    def evaluate(self, config: QuantConfig) -> tuple[float, float]:
        """(detector AUC, clean accuracy of the base network) under ``config``."""
        net, net_hook = self.model, None
        if config.network_bits is not None:
            net = quantized_copy(self.model, config.network_bits)
            net_hook = activation_hook(config.network_bits)
        det, det_hook = self.detector, None
        if config.detector_bits is not None:
            det = quantized_detector(self.detector, config.detector_bits)
            det_hook = activation_hook(config.detector_bits)
        rows = np.concatenate([
            capture_activations(net, self.images, self.layer, act_hook=net_hook),
            capture_activations(net, self.adv_images, self.layer, act_hook=net_hook),
        ])
        n = len(self.images)
        scored = ScoredLabels(det.scores(rows, det_hook), np.r_[np.zeros(n), np.ones(n)])
        return auc(scored), accuracy_on(net, self.images, self.labels, act_hook=net_hook)


@dataclass(frozen=True)
class SweepRow:
    case: str
    bits: int
    auc: float
    clean_acc: float


def quant_sweep(
    pipeline: DetectionPipeline,
    bit_list: Sequence[int],
    cases: Sequence[str] = CASES,
    max_workers: int = MAX_WORKERS,
    progress: bool = False,
) -> list[SweepRow]:
    """AUC and clean accuracy per (case, bits) cell, ordered as requested."""
    cells = [(case, int(bits)) for case in cases for bits in bit_list]
    configs = [QuantConfig.for_case(case, bits) for case, bits in cells]
    results: list[SweepRow | None] = [None] * len(cells)
    with ThreadPoolExecutor(max_workers=max(1, min(max_workers, len(cells)))) as pool:
        futures = {pool.submit(pipeline.evaluate, cfg): i for i, cfg in enumerate(configs)}
        iterator = as_completed(futures)
        if progress:
            iterator = tqdm(iterator, total=len(futures), desc="quant sweep")
        for future in iterator:
            i = futures[future]
            case, bits = cells[i]
            auc_value, clean_acc = future.result()
            results[i] = SweepRow(case, bits, auc_value, clean_acc)
            logger.debug("sweep %s %d bits: auc %.4f acc %.4f", case, bits, auc_value, clean_acc)
    return results


def find_knee(rows: Sequence[SweepRow], case: str, metric: str, reference: float, tolerance: float = 0.01) -> int | None:
    """Lowest bit width before ``metric`` first falls more than ``tolerance`` below ``reference``."""
    ordered = sorted((r for r in rows if r.case == case), key=lambda r: -r.bits)
    knee = None
    for row in ordered:
        if getattr(row, metric) < reference - tolerance:
            return knee
        knee = row.bits
    return knee


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "bits", "auc", "clean_acc"])
        for row in rows:
            writer.writerow([row.case, row.bits, row.auc, row.clean_acc])
