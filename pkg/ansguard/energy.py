"""Analytic accelerator cost model for networks with an early-exit detector.

Counts come from layer dimensions only, so the CIFAR-scale architectures are
modelled from descriptor-only graphs. Energies are in pJ and are meant to be
read as ratios against the standalone network.
"""

import csv
import enum
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

from ansguard.errors import ConfigError, FormatError
from ansguard.models import build
from ansguard.quant import QuantConfig

logger = logging.getLogger(__name__)

MODES = ("basic", "dg", "dvafs")
OPS = ("mac", "mem")
LAYER_KINDS = ("conv", "shortcut", "linear")
MAX_BITS = 32
FULL_PRECISION_BITS = 32
ENERGY_DETECTOR_HIDDEN = 256
DEFAULT_CONFIG = QuantConfig(12, 1)
SCENARIOS = {"no adversaries": 0.0, "99% adversaries": 0.99, "1% adversaries": 0.01}
DESCRIPTOR_HEADER = ["kind", "N_I", "N_O", "M_I", "M_O", "k", "bits"]


class MemoryAccounting(enum.Enum):
    LITERAL = "literal"  # N_I*M_I^2 + N_I*k^2
    PER_FILTER = "per_filter"  # N_I*M_I^2 + N_I*N_O*k^2


@dataclass(frozen=True)
class LayerCostSpec:
    kind: str
    n_in: int
    n_out: int
    m_in: int
    m_out: int
    k: int
    bits: int = 16

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; choose from {', '.join(LAYER_KINDS)}")
        values = (self.n_in, self.n_out, self.m_in, self.m_out, self.k, self.bits)
        if any(v < 1 for v in values):
            raise ConfigError(f"layer dimensions must be positive: {self}")
        if self.kind == "linear" and (self.k, self.m_in, self.m_out) != (1, 1, 1):
            raise ConfigError(f"linear layers take k=1 and M=1: {self}")

    def with_bits(self, bits: int) -> "LayerCostSpec":
        return LayerCostSpec(self.kind, self.n_in, self.n_out, self.m_in, self.m_out, self.k, bits)


def mac_count(spec: LayerCostSpec) -> int:
    """N_I * N_O * M_O^2 * k^2; linear layers reduce to N_I * N_O."""
    return spec.n_in * spec.n_out * spec.m_out**2 * spec.k**2


def mem_access_count(spec: LayerCostSpec, accounting: MemoryAccounting = MemoryAccounting.LITERAL) -> int:
    """Input reads plus kernel reads for one layer."""
    kernel = spec.n_in * spec.k**2
    if accounting is MemoryAccounting.PER_FILTER:
        kernel *= spec.n_out
    return spec.n_in * spec.m_in**2 + kernel


# per-operation energy


@dataclass(frozen=True)
class VoltageMap:
    """Supply voltage factor per precision, linear between two anchor widths."""

    high_bits: int = 16
    low_bits: int = 4
    high: float = 1.0
    low: float = 0.7

    def __post_init__(self) -> None:
        if not 0 < self.low <= self.high <= 1:
            raise ConfigError(f"voltage factors must satisfy 0 < low <= high <= 1: {self}")
        if self.low_bits >= self.high_bits:
            raise ConfigError(f"low_bits must be below high_bits: {self}")

    @classmethod
    def unit(cls) -> "VoltageMap":
        return cls(high=1.0, low=1.0)

    def __call__(self, bits: int) -> float:
        if bits >= self.high_bits:
            return self.high
        if bits <= self.low_bits:
            return self.low
        t = (bits - self.low_bits) / (self.high_bits - self.low_bits)
        return self.low + t * (self.high - self.low)


def dvafs_parallelism(bits: int) -> int:
    """Sub-word lanes of one MAC: 4x4-bit, 2x8-bit, otherwise a single word."""
    if bits <= 4:
        return 4
    if bits <= 8:
        return 2
    return 1


@dataclass(frozen=True)
class EnergyMode:
    name: str = "basic"
    voltage: VoltageMap = field(default_factory=VoltageMap)
    dvafs_voltage: VoltageMap | None = None  # falls back to ``voltage``

    def __post_init__(self) -> None:
        if self.name not in MODES:
            raise ConfigError(f"unknown energy mode {self.name!r}; choose from {', '.join(MODES)}")

    def mac_scale(self, bits: int) -> float:
        if self.name == "basic":
            return 1.0
        if self.name == "dg":
            return self.voltage(bits) ** 2
        v = (self.dvafs_voltage or self.voltage)(bits)
        return v**2 / dvafs_parallelism(bits)


def _mode(mode: "EnergyMode | str") -> EnergyMode:
    return mode if isinstance(mode, EnergyMode) else EnergyMode(mode)


def mac_energy_basic(bits: int) -> float:
    # 31b/320 + 1/10 is 3.1*b/32 + 0.1 without intermediate rounding
    return float(Fraction(31 * bits, 320) + Fraction(1, 10))


def mem_energy_basic(bits: int) -> float:
    return 2.5 * bits


def energy_per_op(bits: int, op: str = "mac", mode: "EnergyMode | str" = "basic") -> float:
    """pJ for one MAC or one data-memory access at ``bits`` precision.

    Memory accesses cost the same in every mode; only the MAC array is gated
    or sub-word parallel.
    """
    if not 1 <= bits <= MAX_BITS:
        raise ConfigError(f"bits must lie in [1, {MAX_BITS}], got {bits}")
    mode = _mode(mode)
    if op == "mac":
        return mac_energy_basic(bits) * mode.mac_scale(bits)
    if op == "mem":
        return mem_energy_basic(bits)
    raise ConfigError(f"unknown operation {op!r}; choose from {', '.join(OPS)}")


def normalized_mac_curve(
    mode: "EnergyMode | str", bits: Sequence[int] = range(1, 17)
) -> list[tuple[int, float]]:
    """Per-MAC energy relative to a basic-mode 16-bit MAC."""
    reference = energy_per_op(16, "mac", "basic")
    return [(int(b), energy_per_op(int(b), "mac", mode) / reference) for b in bits]


# descriptors


def descriptor_from_model(model, bits: int = 16, include_shortcuts: bool = True) -> list[LayerCostSpec]:
    """Cost rows for every conv and linear node, in execution order."""
    rows = []
    for node in model.layers:
        if node.kind == "conv":
            kind = "conv" if node.conv_index is not None else "shortcut"
            if kind == "shortcut" and not include_shortcuts:
                continue
            cfg = node.config
            rows.append(LayerCostSpec(kind, cfg["in_channels"], cfg["out_channels"], cfg["in_size"],
                                      node.dims[1], cfg["k"], bits))
        elif node.kind == "linear":
            rows.append(LayerCostSpec("linear", node.config["in_features"], node.dims[0], 1, 1, 1, bits))
    return rows


def network_descriptor(
    arch: str, bits: int = 16, classes: int = 10, include_shortcuts: bool = True
) -> list[LayerCostSpec]:
    return descriptor_from_model(build(arch, classes, materialize=False), bits, include_shortcuts)


def detector_descriptor(in_features: int, hidden: int = ENERGY_DETECTOR_HIDDEN, bits: int = 1) -> list[LayerCostSpec]:
    return [
        LayerCostSpec("linear", in_features, hidden, 1, 1, 1, bits),
        LayerCostSpec("linear", hidden, 2, 1, 1, 1, bits),
    ]


def attach_features(network: Sequence[LayerCostSpec], attach_layer: int) -> int:
    """Flattened width the detector sees at conv ``attach_layer``."""
    row = network[_prefix_length(network, attach_layer) - 1]
    return row.n_out * row.m_out**2


def _prefix_length(network: Sequence[LayerCostSpec], attach_layer: int) -> int:
    """Rows executed up to the attach point; shortcuts closing that block belong to it."""
    convs = [i for i, row in enumerate(network) if row.kind == "conv"]
    if not 1 <= attach_layer <= len(convs):
        raise ConfigError(f"attach layer must lie in 1..{len(convs)}, got {attach_layer}")
    end = convs[attach_layer - 1] + 1
    while end < len(network) and network[end].kind == "shortcut":
        end += 1
    return end


def write_descriptor(path, rows: Sequence[LayerCostSpec]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DESCRIPTOR_HEADER)
        for r in rows:
            writer.writerow([r.kind, r.n_in, r.n_out, r.m_in, r.m_out, r.k, r.bits])


def read_descriptor(path) -> list[LayerCostSpec]:
    rows = []
    with Path(path).open(newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or record[0].startswith("#") or record == DESCRIPTOR_HEADER:
                continue
            if len(record) != len(DESCRIPTOR_HEADER):
                raise FormatError(f"{path}:{lineno}: expected {len(DESCRIPTOR_HEADER)} fields, got {len(record)}")
            try:
                rows.append(LayerCostSpec(record[0].strip(), *(int(v) for v in record[1:])))
            except ValueError as err:
                raise FormatError(f"{path}:{lineno}: {err}") from err
    return rows


# scenario reports


@dataclass(frozen=True)
class LayerEnergy:
    part: str  # network|detector
    spec: LayerCostSpec
    count: int
    energy: float  # one full pass through this layer
    weight: float  # fraction of inputs that reach it

    @property
    def expected(self) -> float:
        return self.energy * self.weight


@dataclass
class EnergyReport:
    quantity: str  # mac|mem|total
    mode: str
    adv_fraction: float
    attach_layer: int | None
    config: QuantConfig
    layers: list[LayerEnergy]
    baseline: float

    @property
    def total(self) -> float:
        return math.fsum(layer.expected for layer in self.layers)

    @property
    def network(self) -> float:
        return math.fsum(layer.expected for layer in self.layers if layer.part == "network")

    @property
    def detector(self) -> float:
        return math.fsum(layer.expected for layer in self.layers if layer.part == "detector")

    @property
    def reduction(self) -> float:
        """Scenario energy over the standalone network; below 1 is a saving."""
        return self.total / self.baseline

    def to_dict(self) -> dict:
        return {
            "quantity": self.quantity,
            "mode": self.mode,
            "adv_fraction": self.adv_fraction,
            "attach_layer": self.attach_layer,
            "network_bits": self.config.network_bits,
            "detector_bits": self.config.detector_bits,
            "total_pj": self.total,
            "network_pj": self.network,
            "detector_pj": self.detector,
            "baseline_pj": self.baseline,
            "reduction": self.reduction,
            "layers": [
                {"part": row.part, **asdict(row.spec), "count": row.count, "energy_pj": row.energy,
                 "weight": row.weight, "expected_pj": row.expected}
                for row in self.layers
            ],
        }


def _bits(bits: int | None) -> int:
    return FULL_PRECISION_BITS if bits is None else bits


def _counter(quantity: str, accounting: MemoryAccounting):
    if quantity == "mac":
        return mac_count
    return lambda spec: mem_access_count(spec, accounting)


def scenario_energy(
    network: Sequence[LayerCostSpec],
    detector: Sequence[LayerCostSpec] | None,
    attach_layer: int | None,
    adv_fraction: float = 0.0,
    config: QuantConfig = DEFAULT_CONFIG,
    mode: "EnergyMode | str" = "basic",
    quantity: str = "mac",
    accounting: MemoryAccounting = MemoryAccounting.LITERAL,
) -> EnergyReport:
    """Expected per-input energy when a fraction ``adv_fraction`` exits at the detector.

    Every input runs the prefix and the detector; only clean inputs run the
    rest of the network. Detection is taken to be perfect. The baseline is the
    standalone network at ``config.network_bits``.
    """
    if quantity not in OPS:
        raise ConfigError(f"unknown quantity {quantity!r}; choose from {', '.join(OPS)}")
    p = float(adv_fraction)
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"adversarial fraction must lie in [0, 1], got {adv_fraction}")
    mode = _mode(mode)
    if detector:
        prefix = _prefix_length(network, attach_layer)
    elif p > 0:
        raise ConfigError("an early exit needs a detector")
    else:
        prefix = len(network)
    count = _counter(quantity, accounting)
    net_bits, det_bits = _bits(config.network_bits), _bits(config.detector_bits)
    net_op = energy_per_op(net_bits, quantity, mode)
    det_op = energy_per_op(det_bits, quantity, mode)

    layers = []
    for i, spec in enumerate(network):
        n = count(spec.with_bits(net_bits))
        layers.append(LayerEnergy("network", spec.with_bits(net_bits), n, n * net_op, 1.0 if i < prefix else 1.0 - p))
    for spec in detector or ():
        n = count(spec.with_bits(det_bits))
        layers.append(LayerEnergy("detector", spec.with_bits(det_bits), n, n * det_op, 1.0))
    baseline = math.fsum(row.energy for row in layers if row.part == "network")
    report = EnergyReport(quantity, mode.name, p, attach_layer if detector else None, config, layers, baseline)
    logger.debug("%s energy p=%.2f mode %s: %.6g pJ, ratio %.4f", quantity, p, mode.name, report.total, report.reduction)
    return report


def memory_scenario_energy(
    network: Sequence[LayerCostSpec],
    detector: Sequence[LayerCostSpec] | None,
    attach_layer: int | None,
    adv_fraction: float = 0.0,
    config: QuantConfig = DEFAULT_CONFIG,
    mode: "EnergyMode | str" = "basic",
    accounting: MemoryAccounting = MemoryAccounting.PER_FILTER,
) -> EnergyReport:
    return scenario_energy(network, detector, attach_layer, adv_fraction, config, mode, "mem", accounting)


def combined_report(mac: EnergyReport, mem: EnergyReport) -> EnergyReport:
    """MAC plus memory energy, layer by layer."""
    if len(mac.layers) != len(mem.layers) or mac.adv_fraction != mem.adv_fraction:
        raise ConfigError("MAC and memory reports describe different scenarios")
    layers = [
        LayerEnergy(a.part, a.spec, a.count + b.count, a.energy + b.energy, a.weight)
        for a, b in zip(mac.layers, mem.layers)
    ]
    return EnergyReport("total", mac.mode, mac.adv_fraction, mac.attach_layer, mac.config, layers,
                        mac.baseline + mem.baseline)


def scenario_table(
    network: Sequence[LayerCostSpec],
    detector: Sequence[LayerCostSpec],
    attach_layer: int,
    fractions: dict[str, float] = SCENARIOS,
    config: QuantConfig = DEFAULT_CONFIG,
    modes: Sequence[str] = MODES,
    accounting: MemoryAccounting = MemoryAccounting.PER_FILTER,
) -> list[dict]:
    """One row per (scenario, mode) with MAC, memory and combined energies."""
    rows = []
    for name, p in fractions.items():
        for mode in modes:
            mac = scenario_energy(network, detector, attach_layer, p, config, mode)
            mem = memory_scenario_energy(network, detector, attach_layer, p, config, mode, accounting)
            total = combined_report(mac, mem)
            rows.append({
                "scenario": name,
                "adv_fraction": p,
                "mode": mode,
                "mac_pj": mac.total,
                "mac_baseline_pj": mac.baseline,
                "mac_reduction": mac.reduction,
                "mem_pj": mem.total,
                "mem_baseline_pj": mem.baseline,
                "mem_reduction": mem.reduction,
                "total_pj": total.total,
                "total_reduction": total.reduction,
            })
    return rows


def quantization_mac_savings(
    network: Sequence[LayerCostSpec],
    detector: Sequence[LayerCostSpec] | None,
    config_a: QuantConfig,
    config_b: QuantConfig,
    mode: "EnergyMode | str" = "basic",
) -> float:
    """Percent less MAC energy for a full pass under ``config_a`` than under ``config_b``."""
    energy_a = _full_pass_mac(network, detector, config_a, mode)
    energy_b = _full_pass_mac(network, detector, config_b, mode)
    return 100.0 * (1.0 - energy_a / energy_b)


def _full_pass_mac(network, detector, config: QuantConfig, mode) -> float:
    net = math.fsum(mac_count(s) for s in network) * energy_per_op(_bits(config.network_bits), "mac", mode)
    det = math.fsum(mac_count(s) for s in detector or ()) * energy_per_op(_bits(config.detector_bits), "mac", mode)
    return net + det


def write_report_csv(path, report: EnergyReport) -> None:
    columns = ["part", *DESCRIPTOR_HEADER, "count", "energy_pj", "weight", "expected_pj"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in report.layers:
            s = row.spec
            writer.writerow([row.part, s.kind, s.n_in, s.n_out, s.m_in, s.m_out, s.k, s.bits,
                             row.count, row.energy, row.weight, row.expected])


def write_table_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ConfigError("nothing to write")
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_reports_json(path, reports: Sequence[EnergyReport], extra: dict | None = None) -> None:
    payload = {**(extra or {}), "reports": [r.to_dict() for r in reports]}
    Path(path).write_text(json.dumps(payload, indent=2))
