"""Click subcommands for the ansguard CLI."""

import csv
import functools
import json
import logging
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import click
import numpy as np

from ansguard import DEFAULT_SEED, __version__, db, energy, plots
from ansguard.ans import (
    DEFAULT_CANDIDATE_FRACTION,
    ablation_study,
    ans_profile,
    select_detector_layer,
    write_ablation_csv,
)
from ansguard.attacks import PRESET_GRID, AttackSpec, attack_dataset, blackbox_transfer, parse_attacks
from ansguard.datasets import DATA_ENV, DATASETS, LabeledImageSet, data_dir, has_dataset, load_dataset, subsample
from ansguard.detector import (
    DEFAULT_HIDDEN,
    DetectorSchedule,
    build_activation_dataset,
    dynamic_attack_dataset,
    evaluate_detector,
    load_detector,
    paired_activation_set,
    save_detector,
    train_detector,
    train_detector_adversarial,
)
from ansguard.errors import AcceptanceError, AnsguardError, ConfigError, DataMissingError
from ansguard.metrics import ScoredLabels, auc, best_threshold
from ansguard.models import (
    ARCHITECTURES,
    SCHEDULES,
    accuracy_on,
    build,
    capture_activations,
    inspect_header,
    load_model,
    save_model,
    train,
)
from ansguard.quant import CASES, DetectionPipeline, QuantConfig, find_knee, quant_sweep, write_sweep_csv

logger = logging.getLogger(__name__)

RUNS_ROOT = Path("runs")
DEFAULT_LIMIT = 1000
ARCH_ALIASES = {"vgg19": "vgg19_cifar", "resnet18": "resnet18_cifar"}

# acceptance gates for --check
TRAIN_GATES = {("mnist", "lenet"): 0.976}
TRAIN_GATE_SUBSAMPLED = 0.95
FGSM_GATE = (0.3, 0.20)  # epsilon, max accuracy
PGD_GATE = (0.3, 40, 0.05)  # epsilon, min steps, max accuracy
DETECTOR_MIN_AUC = 0.95
TRANSFER_SLACK = 0.02
DYNAMIC_PLAIN_MAX_AUC = 0.2
DYNAMIC_ROBUST_MIN_AUC = 0.9
QUANT_TOLERANCE = 0.01
ENERGY_GATES = {
    ("vgg19_cifar", 7): {("mac", 0.99): (0.49, 0.03)},
    ("resnet18_cifar", 5): {
        ("mac", 0.99): (0.32, 0.05),
        ("mac", 0.0): (1.01, 0.01),
        ("mac", 0.01): (0.99, 0.01),
        ("mem", 0.0): (1.14, 0.05),
        ("mem", 0.99): (0.18, 0.05),
        ("mem", 0.01): (1.13, 0.05),
    },
}


@dataclass(frozen=True)
class RunConfig:
    command: str
    out: str
    seed: int = DEFAULT_SEED
    dataset: str | None = None
    data_dir: str | None = None
    model: str | None = None
    checkpoint: str | None = None
    attacks: tuple[str, ...] = ()
    mode: tuple[str, ...] = ()
    bits: str | None = None
    adv: tuple[float, ...] = ()
    limit: int | None = None
    check: bool = False
    plot: bool = False
    options: dict = field(default_factory=dict)

    def validate(self) -> None:
        """Fail before any work if inputs are missing or malformed."""
        if self.dataset is not None and not has_dataset(self.dataset, self.data_dir):
            raise DataMissingError(
                f"{self.dataset} files not found under {data_dir(self.data_dir)}; set {DATA_ENV} or --data-dir"
            )
        for text in self.attacks:
            parse_attacks(text)
        if self.bits is not None:
            QuantConfig.parse(self.bits)
        if self.limit is not None and self.limit < 2:
            raise ConfigError(f"--limit must be at least 2, got {self.limit}")

    def to_dict(self) -> dict:
        return {**asdict(self), "version": __version__}


class RunContext:
    """Output directory, ledger entry and acceptance gates of one command."""

    def __init__(self, config: RunConfig, run_id: int, ledger: Path) -> None:
        self.config = config
        self.out = Path(config.out)
        self.run_id = run_id
        self.ledger = ledger
        self.checks: list[dict] = []

    def _register(self, path: Path) -> Path:
        db.add_artifact(self.run_id, str(path), self.ledger)
        return path

    def write_rows(self, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
        path = self.out / name
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        return self._register(path)

    def write_json(self, name: str, payload: dict) -> Path:
        path = self.out / name
        body = {"config": self.config.to_dict(), **payload, "checks": self.checks}
        path.write_text(json.dumps(body, indent=2, default=_jsonable))
        return self._register(path)

    def artifact(self, name: str, writer: Callable[[Path], object]) -> Path:
        path = self.out / name
        writer(path)
        return self._register(path)

    def plot(self, name: str, series, title: str, x_label: str, y_label: str) -> None:
        if self.config.plot:
            self._register(plots.write_line_chart(self.out / name, series, title, x_label, y_label))

    def gate(self, name: str, passed: bool, detail: str) -> None:
        self.checks.append({"name": name, "passed": bool(passed), "detail": detail})

    def enforce(self) -> None:
        if not self.config.check:
            return
        for entry in self.checks:
            click.echo(f"  [{'PASS' if entry['passed'] else 'FAIL'}] {entry['name']}: {entry['detail']}")
        failed = [entry["name"] for entry in self.checks if not entry["passed"]]
        if failed:
            raise AcceptanceError(f"acceptance check failed: {', '.join(failed)}")


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


@contextmanager
def recorded_run(config: RunConfig) -> Iterator[RunContext]:
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    ledger = out.parent / "runs.db"
    db.init_db(ledger)
    run_id = db.start_run(config.command, config.to_dict(), config.seed, str(out), ledger)
    run = RunContext(config, run_id, ledger)
    try:
        yield run
        run.enforce()
    except AcceptanceError:
        db.finish_run(run_id, "check-failed", ledger)
        raise
    except BaseException:
        db.finish_run(run_id, "failed", ledger)
        raise
    db.finish_run(run_id, "ok", ledger)


def reports_errors(fn):
    """Turn library errors into click errors carrying their exit code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except AnsguardError as err:
            exc = click.ClickException(str(err))
            exc.exit_code = err.exit_code
            raise exc from err

    return wrapper


# shared options


def _out_option(command: str):
    return click.option(
        "--out", type=click.Path(file_okay=False, path_type=Path), default=RUNS_ROOT / command,
        show_default=True, help="Output directory.",
    )


seed_option = click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
check_option = click.option("--check", is_flag=True, help="Exit with code 6 when an acceptance gate fails.")
plot_option = click.option("--plot", is_flag=True, help="Also write SVG line charts.")
checkpoint_option = click.option(
    "--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
    help="Model checkpoint written by `ansguard train`.",
)
detector_option = click.option(
    "--detector", "detector_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True, help="Detector checkpoint written by `ansguard detector`.",
)


def data_options(fn):
    fn = click.option("--limit", type=int, default=DEFAULT_LIMIT, show_default=True,
                      help="Stratified subsample of the evaluation split.")(fn)
    fn = click.option("--data-dir", envvar=DATA_ENV, type=click.Path(file_okay=False),
                      help="Dataset directory.")(fn)
    fn = click.option("--dataset", type=click.Choice(DATASETS), default="mnist", show_default=True)(fn)
    return fn


def _load_split(config: RunConfig, split_name: str, limit: int | None) -> LabeledImageSet:
    data = load_dataset(config.dataset, split_name, config.data_dir)
    if limit is not None and limit < len(data):
        data = subsample(data, limit, config.seed)
    logger.info("loaded %s/%s: %d images", config.dataset, split_name, len(data))
    return data


def _attacks(texts: Sequence[str]) -> list[AttackSpec]:
    return [spec for text in texts for spec in parse_attacks(text)]


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as err:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from err


def _parse_bit_list(text: str) -> list[int]:
    """``1-16`` or ``1,2,4,8``."""
    try:
        if "-" in text:
            lo, hi = (int(v) for v in text.split("-"))
            return list(range(hi, lo - 1, -1))
        return [int(v) for v in text.split(",")]
    except ValueError as err:
        raise ConfigError(f"expected LO-HI or a comma list of bit widths, got {text!r}") from err


def _detector_schedule(epochs: int) -> DetectorSchedule:
    if epochs < 1:
        raise ConfigError(f"--epochs must be positive, got {epochs}")
    first = (epochs + 1) // 2
    phases = ((first, 0.03), (epochs - first, 0.003)) if epochs > 1 else ((1, 0.03),)
    return DetectorSchedule(phases=phases)


# commands


@click.command(name="train")
@data_options
@click.option("--model", "model_kind", type=click.Choice(ARCHITECTURES), default="lenet", show_default=True)
@click.option("--epochs", type=int, help="Override the architecture's default epoch count.")
@click.option("--train-limit", type=int, help="Stratified subsample of the training split.")
@seed_option
@check_option
@plot_option
@_out_option("train")
@reports_errors
def train_cmd(dataset, data_dir, limit, model_kind, epochs, train_limit, seed, check, plot, out) -> None:
    """Train a model from the zoo and save its checkpoint."""
    config = RunConfig("train", str(out), seed, dataset, data_dir, model_kind, limit=limit, check=check,
                       plot=plot, options={"epochs": epochs, "train_limit": train_limit})
    with recorded_run(config) as run:
        train_set = _load_split(config, "train", train_limit)
        test_set = _load_split(config, "test", config.limit)
        schedule = SCHEDULES[model_kind]
        if epochs is not None:
            schedule = replace(schedule, epochs=epochs)
        model = build(model_kind, train_set.classes, train_set.input_shape, seed)
        click.echo(f"Training {model_kind} on {len(train_set)} {dataset} images for {schedule.epochs} epoch(s)...")
        result = train(model, train_set, schedule, seed, eval_set=test_set, progress=True)
        test_acc = result.history[-1].eval_accuracy
        save_model(model, out / "model.ckpt", {"test_accuracy": test_acc})
        db.add_artifact(run.run_id, str(out / "model.ckpt"), run.ledger)
        run.write_rows(
            "train.csv",
            ["epoch", "lr", "loss", "train_acc", "test_acc"],
            [[h.epoch, h.lr, h.loss, h.train_accuracy, h.eval_accuracy] for h in result.history],
        )
        gate = TRAIN_GATES.get((dataset, model_kind))
        if gate is not None:
            gate = TRAIN_GATE_SUBSAMPLED if train_limit else gate
            run.gate("clean accuracy", test_acc >= gate, f"{test_acc:.4f} >= {gate}")
        run.write_json("train.json", {"schedule": asdict(schedule), "test_accuracy": test_acc})
        run.plot("train.svg", [("test accuracy", [(h.epoch, h.eval_accuracy) for h in result.history])],
                 f"{model_kind} on {dataset}", "epoch", "accuracy")
        click.echo(f"Test accuracy: {test_acc:.4f}")
        click.echo(f"Saved {out / 'model.ckpt'}")


@click.command(name="attack-eval")
@data_options
@checkpoint_option
@click.option("--attack", "attacks", multiple=True, required=True,
              help="fgsm:EPS[,EPS...] | pgd:PRESET[,PRESET...] | pgd:EPS,ALPHA,STEPS")
@seed_option
@check_option
@_out_option("attack-eval")
@reports_errors
def attack_eval(dataset, data_dir, limit, checkpoint, attacks, seed, check, out) -> None:
    """Accuracy of a trained model under white-box attacks."""
    config = RunConfig("attack-eval", str(out), seed, dataset, data_dir, checkpoint=str(checkpoint),
                       attacks=attacks, limit=limit, check=check)
    with recorded_run(config) as run:
        model = load_model(checkpoint)
        data = _load_split(config, "test", config.limit)
        clean = accuracy_on(model, data.images, data.labels)
        click.echo(f"Clean accuracy: {clean:.4f}")
        rows = []
        for spec in _attacks(attacks):
            x_adv = attack_dataset(model, data.images, data.labels, spec, seed, progress=True)
            acc = accuracy_on(model, x_adv, data.labels)
            rows.append([spec.label, spec.family, spec.epsilon, spec.alpha, spec.steps, acc])
            click.echo(f"  {spec.label}: {acc:.4f}")
            if spec.family == "fgsm" and spec.epsilon >= FGSM_GATE[0]:
                run.gate(f"fgsm {spec.epsilon:g}", acc <= FGSM_GATE[1], f"{acc:.4f} <= {FGSM_GATE[1]}")
            if spec.family == "pgd" and spec.epsilon >= PGD_GATE[0] and spec.steps >= PGD_GATE[1]:
                run.gate(f"{spec.label}", acc <= PGD_GATE[2], f"{acc:.4f} <= {PGD_GATE[2]}")
        run.write_rows("attack_eval.csv", ["attack", "family", "epsilon", "alpha", "steps", "accuracy"], rows)
        run.write_json("attack_eval.json", {"clean_accuracy": clean, "rows": rows})


@click.command(name="ans")
@data_options
@checkpoint_option
@click.option("--attack", "attacks", multiple=True, default=("pgd:i",), show_default=True)
@click.option("--candidate-fraction", type=float, default=DEFAULT_CANDIDATE_FRACTION, show_default=True)
@seed_option
@check_option
@plot_option
@_out_option("ans")
@reports_errors
def ans_cmd(dataset, data_dir, limit, checkpoint, attacks, candidate_fraction, seed, check, plot, out) -> None:
    """Adversarial noise sensitivity of every conv layer."""
    config = RunConfig("ans", str(out), seed, dataset, data_dir, checkpoint=str(checkpoint),
                       attacks=attacks, limit=limit, check=check, plot=plot,
                       options={"candidate_fraction": candidate_fraction})
    with recorded_run(config) as run:
        model = load_model(checkpoint)
        data = _load_split(config, "test", config.limit)
        profiles = [ans_profile(model, data.images, data.labels, spec, seed) for spec in _attacks(attacks)]
        selected = {p.attack.label: select_detector_layer(p, candidate_fraction) for p in profiles}
        header = ["layer", *(p.attack.label for p in profiles)]
        rows = [[layer, *(float(p.values[layer - 1]) for p in profiles)] for layer in range(1, model.conv_count + 1)]
        run.write_rows("ans.csv", header, rows)
        for row in rows:
            click.echo("  layer {:>2}: ".format(row[0]) + "  ".join(f"{v:.5f}" for v in row[1:]))
        for label, layer in selected.items():
            click.echo(f"Selected layer for {label}: {layer}")
        run.gate("ans nonnegative", all(np.all(p.values >= 0) for p in profiles), "every ANS >= 0")
        if len(profiles) > 1:
            argmaxes = {int(np.argmax(p.values)) + 1 for p in profiles}
            run.gate("shared argmax", len(argmaxes) == 1, f"argmax layers {sorted(argmaxes)}")
        run.write_json("ans.json", {"profiles": {p.attack.label: p.values for p in profiles},
                                    "selected_layer": selected, "aggregation": profiles[0].aggregation})
        run.plot("ans.svg", [(p.attack.label, p.rows()) for p in profiles], "ANS per layer", "conv layer", "ANS")


@click.command(name="ablation")
@data_options
@checkpoint_option
@click.option("--layer", "layers", type=int, multiple=True, required=True)
@click.option("--attack", default="pgd:i", show_default=True)
@click.option("--fractions", default="0,0.25,0.5,0.75,1", show_default=True)
@seed_option
@check_option
@plot_option
@_out_option("ablation")
@reports_errors
def ablation(dataset, data_dir, limit, checkpoint, layers, attack, fractions, seed, check, plot, out) -> None:
    """Accuracy as random channel subsets of a layer are removed."""
    config = RunConfig("ablation", str(out), seed, dataset, data_dir, checkpoint=str(checkpoint),
                       attacks=(attack,), limit=limit, check=check, plot=plot,
                       options={"layers": list(layers), "fractions": fractions})
    with recorded_run(config) as run:
        model = load_model(checkpoint)
        data = _load_split(config, "test", config.limit)
        (spec,) = _attacks([attack])
        x_adv = attack_dataset(model, data.images, data.labels, spec, seed, progress=True)
        grid = _parse_floats(fractions)
        results = {layer: ablation_study(model, data.images, data.labels, x_adv, layer, grid, seed) for layer in layers}
        for layer, rows in results.items():
            run.artifact(f"ablation_layer{layer}.csv", lambda path, rows=rows: write_ablation_csv(path, rows))
            for row in rows:
                click.echo(f"  layer {layer} f={row.fraction:.2f}: clean {row.clean_accuracy:.4f}"
                           f" adv {row.adversarial_accuracy:.4f}")
        if len(layers) == 2 and 0.5 in grid and 0.0 in grid:
            drops = {}
            for layer, rows in results.items():
                by_f = {r.fraction: r for r in rows}
                drops[layer] = by_f[0.0].adversarial_accuracy - by_f[0.5].adversarial_accuracy
            first, second = layers
            run.gate("selected layer degrades more", drops[first] > drops[second],
                     f"adv drop layer {first} {drops[first]:.4f} > layer {second} {drops[second]:.4f}")
        run.write_json("ablation.json", {"results": {str(k): [asdict(r) for r in v] for k, v in results.items()}})
        series = []
        for layer, rows in results.items():
            series.append((f"layer {layer} clean", [(r.fraction, r.clean_accuracy) for r in rows]))
            series.append((f"layer {layer} adv", [(r.fraction, r.adversarial_accuracy) for r in rows]))
        run.plot("ablation.svg", series, "Channel ablation", "fraction removed", "accuracy")


def _resolve_layer(model, data, layer: int | None, spec: AttackSpec, seed: int) -> int:
    if layer is not None:
        model.capture_node(layer)
        return layer
    profile = ans_profile(model, data.images, data.labels, spec, seed)
    selected = select_detector_layer(profile)
    click.echo(f"ANS selects conv layer {selected}")
    return selected


def _evaluation_row(train_label: str, test_label: str, detector, data) -> list:
    evaluation = evaluate_detector(detector, data)
    tau, tau_acc = best_threshold(ScoredLabels(detector.scores(data.activations), data.labels))
    c = evaluation.confusion
    return [train_label, test_label, evaluation.auc, evaluation.accuracy, c.fpr, c.fnr, tau, tau_acc]


def _training_activations(config: RunConfig, model, layer: int, spec: AttackSpec, train_size: int,
                          val_size: int, allow_reuse: bool):
    """Paired train and validation activation sets from disjoint training-split images."""
    sources = _load_split(config, "train", (train_size + val_size) // 2)
    return build_activation_dataset(model, sources.images, sources.labels, layer, spec, train_size, val_size,
                                    config.seed, allow_reuse=allow_reuse, progress=True)


EVAL_HEADER = ["train_attack", "test_attack", "auc", "accuracy", "fpr", "fnr", "best_tau", "best_tau_accuracy"]


@click.command(name="detector")
@data_options
@checkpoint_option
@click.option("--layer", type=int, help="Conv layer to attach to; chosen by ANS when omitted.")
@click.option("--train", "train_attack", default="pgd:i", show_default=True)
@click.option("--test", "test_attacks", multiple=True, default=("pgd:i,ii,iii,iv,v", "fgsm:0.3,0.5"),
              show_default=True)
@click.option("--train-size", type=int, default=2000, show_default=True, help="Rows, half of them adversarial.")
@click.option("--val-size", type=int, default=200, show_default=True, help="Held-out rows from the training split.")
@click.option("--hidden", type=int, default=DEFAULT_HIDDEN, show_default=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--allow-reuse", is_flag=True, help="Repeat source images when the split is too small.")
@seed_option
@check_option
@_out_option("detector")
@reports_errors
def detector_cmd(dataset, data_dir, limit, checkpoint, layer, train_attack, test_attacks, train_size, val_size,
                 hidden, epochs, allow_reuse, seed, check, out) -> None:
    """Train an activation detector and evaluate it against a set of attacks."""
    config = RunConfig("detector", str(out), seed, dataset, data_dir, checkpoint=str(checkpoint),
                       attacks=(train_attack, *test_attacks), limit=limit, check=check,
                       options={"layer": layer, "train_size": train_size, "val_size": val_size, "hidden": hidden,
                                "epochs": epochs, "allow_reuse": allow_reuse})
    with recorded_run(config) as run:
        model = load_model(checkpoint)
        test_set = _load_split(config, "test", config.limit)
        (train_spec,) = _attacks([train_attack])
        layer = _resolve_layer(model, test_set, layer, train_spec, seed)
        train_data, val_data = _training_activations(config, model, layer, train_spec, train_size, val_size,
                                                     allow_reuse)
        trained = train_detector(train_data, _detector_schedule(epochs), seed, hidden, progress=True)
        detector = trained.detector
        validation_auc = evaluate_detector(detector, val_data).auc
        click.echo(f"Validation AUC ({train_spec.label}): {validation_auc:.4f}")
        save_detector(detector, out / "detector.ckpt", {"train_attack": train_spec.label})
        db.add_artifact(run.run_id, str(out / "detector.ckpt"), run.ledger)
        rows, preset_auc = [], {}
        for spec in _attacks(test_attacks):
            data = paired_activation_set(model, test_set.images, test_set.labels, layer, spec, seed, progress=True)
            row = _evaluation_row(train_spec.label, spec.label, detector, data)
            rows.append(row)
            if spec.family == "pgd" and spec.preset in PRESET_GRID:
                preset_auc[spec.preset] = row[2]
            click.echo(f"  {spec.label}: AUC {row[2]:.4f} acc {row[3]:.4f}")
            run.gate(f"auc {spec.label}", row[2] >= DETECTOR_MIN_AUC, f"{row[2]:.4f} >= {DETECTOR_MIN_AUC}")
        if "i" in preset_auc and len(preset_auc) > 1:
            floor = preset_auc["i"] - TRANSFER_SLACK
            weakest = min(v for k, v in preset_auc.items() if k != "i")
            run.gate("one-way transferability", weakest >= floor,
                     f"min AUC over stronger presets {weakest:.4f} >= preset i AUC - {TRANSFER_SLACK} = {floor:.4f}")
        run.write_rows("detector.csv", EVAL_HEADER, rows)
        run.write_json("detector.json", {"layer": layer, "validation_auc": validation_auc, "rows": rows,
                                         "history": [asdict(h) for h in trained.history]})
        click.echo(f"Saved {out / 'detector.ckpt'}")


@click.command(name="dynamic")
@data_options
@checkpoint_option
@click.option("--layer", type=int, required=True)
@click.option("--train", "train_attack", default="pgd:i", show_default=True)
@click.option("--dyn", "dyn_attacks", multiple=True, default=("pgd:i,ii,iii",), show_default=True,
              help="Activation-space attacks on the detector.")
@click.option("--p-attack", type=float, default=0.5, show_default=True)
@click.option("--train-size", type=int, default=2000, show_default=True)
@click.option("--hidden", type=int, default=DEFAULT_HIDDEN, show_default=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--allow-reuse", is_flag=True)
@seed_option
@check_option
@_out_option("dynamic")
@reports_errors
def dynamic(dataset, data_dir, limit, checkpoint, layer, train_attack, dyn_attacks, p_attack, train_size, hidden,
            epochs, allow_reuse, seed, check, out) -> None:
    """Plain versus adversarially trained detector under activation-space attacks."""
    config = RunConfig("dynamic", str(out), seed, dataset, data_dir, checkpoint=str(checkpoint),
                       attacks=(train_attack, *dyn_attacks), limit=limit, check=check,
                       options={"layer": layer, "p_attack": p_attack, "train_size": train_size,
                                "hidden": hidden, "epochs": epochs, "allow_reuse": allow_reuse})
    with recorded_run(config) as run:
        model = load_model(checkpoint)
        model.capture_node(layer)
        test_set = _load_split(config, "test", config.limit)
        (train_spec,) = _attacks([train_attack])
        dyn_specs = _attacks(dyn_attacks)
        train_data, _ = _training_activations(config, model, layer, train_spec, train_size, 2, allow_reuse)
        test_data = paired_activation_set(model, test_set.images, test_set.labels, layer, train_spec, seed)
        schedule = _detector_schedule(epochs)
        plain = train_detector(train_data, schedule, seed, hidden, progress=True).detector
        robust = train_detector_adversarial(train_data, schedule, dyn_specs[0], p_attack, seed, hidden,
                                            progress=True).detector
        save_detector(robust, out / "detector_robust.ckpt", {"p_attack": p_attack})
        db.add_artifact(run.run_id, str(out / "detector_robust.ckpt"), run.ledger)
        rows = [["static", evaluate_detector(plain, test_data).auc, evaluate_detector(robust, test_data).auc]]
        for spec in dyn_specs:
            plain_auc = evaluate_detector(plain, dynamic_attack_dataset(plain, test_data, spec, seed)).auc
            robust_auc = evaluate_detector(robust, dynamic_attack_dataset(robust, test_data, spec, seed)).auc
            rows.append([spec.label, plain_auc, robust_auc])
        for label, plain_auc, robust_auc in rows:
            click.echo(f"  {label}: plain AUC {plain_auc:.4f}  adversarially trained AUC {robust_auc:.4f}")
        recovered = [r for r in rows[1:] if r[1] <= DYNAMIC_PLAIN_MAX_AUC and r[2] >= DYNAMIC_ROBUST_MIN_AUC]
        run.gate("dynamic recovery", bool(recovered),
                 f"some attack with plain AUC <= {DYNAMIC_PLAIN_MAX_AUC} and robust AUC >= {DYNAMIC_ROBUST_MIN_AUC}")
        run.write_rows("dynamic.csv", ["attack", "plain_auc", "robust_auc"], rows)
        run.write_json("dynamic.json", {"layer": layer, "rows": rows})


@click.command(name="blackbox")
@data_options
@checkpoint_option
@click.option("--substitute", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@detector_option
@click.option("--attack", "attacks", multiple=True, default=("fgsm:0.3",), show_default=True)
@seed_option
@check_option
@_out_option("blackbox")
@reports_errors
def blackbox(dataset, data_dir, limit, checkpoint, substitute, detector_path, attacks, seed, check, out) -> None:
    """Attacks crafted on a substitute model, evaluated on the target and its detector."""
    config = RunConfig("blackbox", str(out), seed, dataset, data_dir, checkpoint=str(checkpoint),
                       attacks=attacks, limit=limit, check=check,
                       options={"substitute": str(substitute), "detector": str(detector_path)})
    with recorded_run(config) as run:
        target = load_model(checkpoint)
        surrogate = load_model(substitute)
        detector = load_detector(detector_path)
        data = _load_split(config, "test", config.limit)
        clean_rows = capture_activations(target, data.images, detector.layer)
        same_model = substitute.resolve() == checkpoint.resolve()
        rows = []
        for spec in _attacks(attacks):
            white_box = accuracy_on(target, attack_dataset(target, data.images, data.labels, spec, seed), data.labels)
            x_adv = blackbox_transfer(surrogate, target, data.images, data.labels, spec,
                                      np.random.default_rng(seed))
            adv_rows = capture_activations(target, x_adv, detector.layer)
            scored = ScoredLabels(detector.scores(np.concatenate([clean_rows, adv_rows])),
                                  np.r_[np.zeros(len(data)), np.ones(len(data))])
            row = [spec.label, accuracy_on(surrogate, x_adv, data.labels),
                   accuracy_on(target, x_adv, data.labels), white_box, auc(scored)]
            rows.append(row)
            click.echo(f"  {spec.label}: substitute acc {row[1]:.4f} target acc {row[2]:.4f}"
                       f" white-box acc {white_box:.4f} AUC {row[4]:.4f}")
            if not same_model:
                run.gate(f"transfer weaker than white-box {spec.label}", row[2] > white_box,
                         f"transfer acc {row[2]:.4f} > white-box acc {white_box:.4f}")
        run.write_rows("blackbox.csv", ["attack", "substitute_accuracy", "target_accuracy", "white_box_accuracy",
                                        "detector_auc"], rows)
        run.write_json("blackbox.json", {"rows": rows})


@click.command(name="quant-sweep")
@data_options
@checkpoint_option
@detector_option
@click.option("--attack", default="pgd:i", show_default=True)
@click.option("--bits", "bit_range", default="1-16", show_default=True, help="LO-HI or a comma list.")
@click.option("--case", "cases", type=click.Choice(CASES), multiple=True, default=CASES, show_default=True)
@seed_option
@check_option
@plot_option
@_out_option("quant-sweep")
@reports_errors
def quant_sweep_cmd(dataset, data_dir, limit, checkpoint, detector_path, attack, bit_range, cases, seed, check,
                    plot, out) -> None:
    """Detector AUC and clean accuracy across quantization bit widths."""
    config = RunConfig("quant-sweep", str(out), seed, dataset, data_dir, checkpoint=str(checkpoint),
                       attacks=(attack,), limit=limit, check=check, plot=plot,
                       options={"detector": str(detector_path), "bits": bit_range, "cases": list(cases)})
    with recorded_run(config) as run:
        model = load_model(checkpoint)
        detector = load_detector(detector_path)
        data = _load_split(config, "test", config.limit)
        (spec,) = _attacks([attack])
        x_adv = attack_dataset(model, data.images, data.labels, spec, seed, progress=True)
        pipeline = DetectionPipeline(model, detector, detector.layer, data.images, data.labels, x_adv)
        reference_auc, reference_acc = pipeline.evaluate(QuantConfig())
        bit_list = _parse_bit_list(bit_range)
        rows = quant_sweep(pipeline, bit_list, cases, progress=True)
        run.artifact("quant_sweep.csv", lambda path: write_sweep_csv(path, rows))
        knees = {case: {"auc": find_knee(rows, case, "auc", reference_auc),
                        "clean_acc": find_knee(rows, case, "clean_acc", reference_acc)} for case in cases}
        click.echo(f"Full precision: AUC {reference_auc:.4f} clean acc {reference_acc:.4f}")
        for row in rows:
            click.echo(f"  {row.case:>8} {row.bits:>2} bits: AUC {row.auc:.4f} clean acc {row.clean_acc:.4f}")
        by_cell = {(r.case, r.bits): r for r in rows}
        if ("det_only", 1) in by_cell:
            delta = abs(by_cell["det_only", 1].auc - reference_auc)
            run.gate("1-bit detector", delta <= QUANT_TOLERANCE, f"|dAUC| {delta:.4f} <= {QUANT_TOLERANCE}")
        if "both" in cases and "net_only" in cases:
            worst = max(abs(by_cell["both", b].auc - by_cell["net_only", b].auc) for b in bit_list)
            run.gate("both tracks net_only", worst <= QUANT_TOLERANCE, f"max |dAUC| {worst:.4f} <= {QUANT_TOLERANCE}")
        run.write_json("quant_sweep.json", {"reference": {"auc": reference_auc, "clean_acc": reference_acc},
                                            "knees": knees, "rows": [asdict(r) for r in rows]})
        series = [(case, sorted((r.bits, r.auc) for r in rows if r.case == case)) for case in cases]
        run.plot("quant_sweep.svg", series, "Detector AUC under quantization", "bits", "AUC")


@click.command(name="energy-report")
@click.option("--arch", help="vgg19, resnet18 or any zoo architecture.")
@click.option("--descriptor", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Layer descriptor CSV instead of --arch.")
@click.option("--attach", type=int, required=True, help="Conv layer the detector is attached to.")
@click.option("--adv", type=float, multiple=True, help="Adversarial fractions; the three standard scenarios when omitted.")
@click.option("--bits", default="12:1", show_default=True, help="NET:DET bit widths.")
@click.option("--mode", "modes", type=click.Choice(energy.MODES), multiple=True, default=("basic",), show_default=True)
@click.option("--hidden", type=int, default=energy.ENERGY_DETECTOR_HIDDEN, show_default=True)
@click.option("--accounting", type=click.Choice([a.value for a in energy.MemoryAccounting]),
              default=energy.MemoryAccounting.PER_FILTER.value, show_default=True)
@click.option("--shortcuts/--no-shortcuts", default=True, show_default=True,
              help="Count residual downsample convs.")
@check_option
@plot_option
@_out_option("energy-report")
@reports_errors
def energy_report(arch, descriptor, attach, adv, bits, modes, hidden, accounting, shortcuts, check, plot, out) -> None:
    """MAC and memory energy of early-exit detection scenarios."""
    if (arch is None) == (descriptor is None):
        raise click.UsageError("pass exactly one of --arch and --descriptor")
    arch = ARCH_ALIASES.get(arch, arch)
    config = RunConfig("energy-report", str(out), model=arch, mode=modes, bits=bits, adv=adv, check=check,
                       plot=plot, options={"descriptor": str(descriptor) if descriptor else None, "attach": attach,
                                           "hidden": hidden, "accounting": accounting, "shortcuts": shortcuts})
    with recorded_run(config) as run:
        quant = QuantConfig.parse(bits)
        memory = energy.MemoryAccounting(accounting)
        fractions = {f"{p:g}": p for p in adv} if adv else energy.SCENARIOS
        variants = {"declared": energy.read_descriptor(descriptor)} if descriptor else {
            "with shortcuts": energy.network_descriptor(arch, include_shortcuts=True),
            "without shortcuts": energy.network_descriptor(arch, include_shortcuts=False),
        }
        primary = "declared" if descriptor else ("with shortcuts" if shortcuts else "without shortcuts")
        network = variants[primary]
        det = energy.detector_descriptor(energy.attach_features(network, attach), hidden)
        run.artifact("network.csv", lambda path: energy.write_descriptor(path, network))

        table, reports = [], []
        for name, rows in variants.items():
            if name != primary and rows == network:
                continue
            for row in energy.scenario_table(rows, det, attach, fractions, quant, modes, memory):
                table.append({"accounting": name, **row})
        for p in fractions.values():
            mac = energy.scenario_energy(network, det, attach, p, quant, modes[0])
            mem = energy.memory_scenario_energy(network, det, attach, p, quant, modes[0], memory)
            reports += [mac, mem, energy.combined_report(mac, mem)]
        run.artifact("scenarios.csv", lambda path: energy.write_table_csv(path, table))
        for quantity, report in zip(("mac", "mem", "total"), reports[-3:]):
            run.artifact(f"layers_{quantity}.csv", lambda path, r=report: energy.write_report_csv(path, r))

        savings = energy.quantization_mac_savings(network, det, quant, QuantConfig(16, 16), modes[0])
        curves = {mode: energy.normalized_mac_curve(mode) for mode in energy.MODES}
        run.write_rows("mac_curve.csv", ["bits", *energy.MODES],
                       [[b, *(dict(curves[m])[b] for m in energy.MODES)] for b in range(1, 17)])

        for row in table:
            if row["accounting"] == primary:
                click.echo(f"  {row['scenario']:>16} [{row['mode']}]: MAC {row['mac_reduction']:.3f}x"
                           f"  mem {row['mem_reduction']:.3f}x  total {row['total_reduction']:.3f}x")
        click.echo(f"MAC savings of {bits} against 16:16: {savings:.1f}%")

        gates = ENERGY_GATES.get((arch, attach), {}) if quant == QuantConfig(12, 1) else {}
        for report in reports:
            key = (report.quantity, report.adv_fraction)
            if report.mode == "basic" and key in gates:
                target, tol = gates[key]
                run.gate(f"{report.quantity} p={report.adv_fraction:g}", abs(report.reduction - target) <= tol,
                         f"{report.reduction:.4f} within {target} +- {tol}")
        run.write_json("energy.json", {
            "reports": [r.to_dict() for r in reports],
            "table": table,
            "quantization_mac_savings_percent": savings,
            "mac_curves": curves,
        })
        run.plot("mac_curve.svg", [(m, c) for m, c in curves.items()], "Normalized energy per MAC", "bits",
                 "energy / 16-bit basic")
        grid = np.linspace(0.0, 1.0, 11)
        series = [
            (quantity, [(float(p), energy.scenario_energy(network, det, attach, float(p), quant, modes[0], quantity,
                                                         memory).reduction) for p in grid])
            for quantity in energy.OPS
        ]
        run.plot("energy_vs_adv.svg", series, "Energy against the standalone network", "adversarial fraction",
                 "ratio")


@click.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@reports_errors
def inspect(path: Path) -> None:
    """Print the header of a checkpoint without loading its arrays."""
    click.echo(json.dumps(inspect_header(path), indent=2))


@click.command()
@click.option("--root", type=click.Path(file_okay=False, path_type=Path), default=RUNS_ROOT, show_default=True)
@click.option("--command", "command_name", help="Only runs of this command.")
def runs(root: Path, command_name: str | None) -> None:
    """List recorded runs."""
    ledger = root / "runs.db"
    if not ledger.is_file():
        click.echo("No runs recorded.")
        return
    entries = db.list_runs(command_name, ledger)
    if not entries:
        click.echo("No runs recorded.")
        return
    for entry in entries:
        click.echo(f"#{entry['id']} {entry['command']} [{entry['status']}] seed={entry['seed']} {entry['started']}")
        for artifact in entry["artifacts"]:
            click.echo(f"    {artifact}")
