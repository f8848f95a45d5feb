"""Deterministic federated training loop with attack and defense wiring.

One iteration: broadcast the global model, let every sampled device run
local SGD (compromised devices included, so the attacker has the honest
before-attack models), replace the compromised devices' uploads with
crafted ones on poisoned iterations, filter with the configured defense,
and aggregate.  Every random draw comes from a labelled stream derived
from (seed, trial, iteration, purpose), which makes runs bit-reproducible
and keeps attack randomness isolated from training randomness.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from flrlab.aggregation import RULES, AggregatorSpec, aggregate, krum, mean, median, trimmed_mean
from flrlab.attacks import (
    AttackSpec,
    KnowledgeScope,
    attack_gaussian,
    attack_krum,
    attack_trimmed_mean,
    estimate_direction,
    flip_labels,
)
from flrlab.core import RngStream
from flrlab.data import Dataset, load_csv, load_idx, partition_noniid, synth_blobs
from flrlab.defenses import DefenseOutcome, DefenseSpec, apply_defense
from flrlab.models import ModelSpec, error_rate, init_params, local_update, loss, shard_objective

ATTACK_KINDS = ("none", "gaussian", "label_flip", "craft")
SELECTION_STRATEGIES = ("last", "best_validation")
DATASET_KINDS = ("synth", "idx", "csv")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one experiment; field names double as config-file keys."""

    # federation
    num_devices: int = 100
    compromised: int = 20
    label_bias: float = 0.5
    iterations: int = 100
    local_rounds: int = 1
    batch_size: int = 32
    learning_rate: float = 0.5
    devices_per_round: int | None = None  # None samples every device
    # model
    model: str = "lr"
    hidden: int = 32
    # aggregation
    rule: str = "mean"
    assumed_compromised: int | None = None  # defaults to `compromised`
    trim_count: int | None = None  # defaults to assumed_compromised
    selection_count: int | None = None  # bulyan theta, defaults to m - 2c
    average_count: int | None = None  # bulyan gamma, defaults to theta - 2c
    # attack
    attack: str = "none"
    attack_rule: str | None = None  # crafted attack's assumed rule, defaults to `rule`
    knowledge: str = "full"
    objective: str = "directed_deviation"
    support_radius: float = 0.01
    interval_factor: float = 2.0
    shift_floor: float = 1e-5
    poison_fraction: float = 1.0
    # defense
    defense: str = "none"
    validation_size: int = 100
    # final model selection
    selection: str = "last"
    # data source
    dataset: str = "synth"
    synth_classes: int = 2
    synth_per_class: int = 500
    synth_test_per_class: int = 200
    synth_features: int = 8
    synth_spread: float = 0.3
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    csv_path: str = ""
    csv_label_column: str = "label"
    csv_classes: int = 2
    csv_test_fraction: float = 0.2
    # bookkeeping
    seed: int = 0
    trials: int = 1

    def validate(self) -> None:
        if self.num_devices < 1:
            raise ConfigError("need at least one device")
        if not 0 <= self.compromised < self.num_devices / 2:
            raise ConfigError("compromised devices must number fewer than half")
        if self.iterations < 1 or self.local_rounds < 1 or self.batch_size < 1:
            raise ConfigError("iterations, local rounds, and batch size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")
        k = self.resolved_devices_per_round()
        if not 1 <= k <= self.num_devices:
            raise ConfigError("devices per round out of range")
        if not 0 <= self.poison_fraction <= 1:
            raise ConfigError("poison fraction must lie in [0, 1]")
        if self.rule not in RULES:
            raise ConfigError(f"unknown aggregation rule {self.rule!r}")
        if self.attack not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack {self.attack!r}")
        if self.knowledge not in ("full", "partial"):
            raise ConfigError(f"unknown knowledge mode {self.knowledge!r}")
        if self.defense not in ("none", "err", "lfr", "union"):
            raise ConfigError(f"unknown defense {self.defense!r}")
        if self.selection not in SELECTION_STRATEGIES:
            raise ConfigError(f"unknown selection strategy {self.selection!r}")
        if self.dataset not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind {self.dataset!r}")
        if self.model not in ("lr", "mlp"):
            raise ConfigError(f"unknown model kind {self.model!r}")
        if self.trials < 1:
            raise ConfigError("need at least one trial")
        if self.attack == "craft":
            self.attack_spec()  # surfaces bad attack parameters early

    def resolved_devices_per_round(self) -> int:
        return self.num_devices if self.devices_per_round is None else self.devices_per_round

    def resolved_assumed(self) -> int:
        return self.compromised if self.assumed_compromised is None else self.assumed_compromised

    def aggregator_spec(self) -> AggregatorSpec:
        c = self.resolved_assumed()
        trim = c if self.trim_count is None else self.trim_count
        theta = self.num_devices - 2 * c if self.selection_count is None else self.selection_count
        gamma = theta - 2 * c if self.average_count is None else self.average_count
        return AggregatorSpec(
            self.rule,
            assumed_compromised=c,
            trim_count=trim,
            selection_count=theta,
            average_count=gamma,
        )

    def attack_spec(self) -> AttackSpec:
        return AttackSpec(
            target_rule=self.attack_rule or self.rule,
            objective=self.objective,
            support_radius=self.support_radius,
            interval_factor=self.interval_factor,
            shift_floor=self.shift_floor,
        )

    def model_spec(self, train: Dataset) -> ModelSpec:
        return ModelSpec(self.model, train.num_features, train.num_classes, hidden=self.hidden)


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    train_loss: float
    test_error: float
    validation_error: float
    attack_active: bool
    attack_shift: float | None
    removed_devices: tuple[int, ...]


@dataclass(frozen=True)
class IterationReport:
    """Observability hook payload: everything the master saw this iteration."""

    iteration: int
    sampled: np.ndarray
    models: np.ndarray
    defense: DefenseOutcome | None
    new_global: np.ndarray


@dataclass
class TrialState:
    config: ExperimentConfig
    model_spec: ModelSpec
    agg_spec: AggregatorSpec
    train: Dataset
    test: Dataset
    validation: Dataset
    shards: list[np.ndarray]
    stream: RngStream
    poisoned_iterations: frozenset[int]
    weights: np.ndarray
    objectives: list = field(default_factory=list)
    flipped_objectives: dict = field(default_factory=dict)


def sample_devices(num_devices: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform without-replacement device subset, returned sorted."""
    if not 1 <= count <= num_devices:
        raise ValueError("sample size out of range")
    return np.sort(rng.choice(num_devices, size=count, replace=False))


def poison_schedule(iterations: int, fraction: float, rng: np.random.Generator) -> frozenset[int]:
    """Exactly round(fraction * iterations) distinct poisoned iterations."""
    if not 0 <= fraction <= 1:
        raise ValueError("poison fraction must lie in [0, 1]")
    count = round(fraction * iterations)
    if count == 0:
        return frozenset()
    return frozenset(int(i) for i in rng.choice(iterations, size=count, replace=False))


def select_final_model(history, strategy: str) -> tuple[int, np.ndarray]:
    """Pick the final global model from per-iteration (weights, validation error).

    Returns (iteration index, weights).  ``best_validation`` takes the
    earliest minimum; ``last`` the final iterate.
    """
    if not history:
        raise ValueError("empty history")
    if strategy == "last":
        return len(history) - 1, history[-1][0]
    if strategy == "best_validation":
        errors = np.asarray([err for _, err in history])
        idx = int(np.argmin(errors))
        return idx, history[idx][0]
    raise ValueError(f"unknown selection strategy {strategy!r}")


def _craft_models(
    config: ExperimentConfig,
    models: np.ndarray,
    present: int,
    w_received: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray | None, float | None]:
    """Crafted replacements for the ``present`` compromised rows, or None."""
    spec = config.attack_spec()
    if config.knowledge == "full":
        scope = KnowledgeScope("full", models, w_received)
    else:
        scope = KnowledgeScope("partial", models[:present], w_received)

    if spec.target_rule in ("krum", "bulyan"):
        result = attack_krum(scope, spec, present, rng)
        return result.models, result.shift

    direction = None
    if spec.objective == "directed_deviation":
        if config.knowledge == "full":
            trim = spec.assumed_trim if spec.assumed_trim is not None else present
            if spec.target_rule == "mean":
                before = mean(models)
            elif spec.target_rule == "median":
                before = median(models)
            else:
                before = trimmed_mean(models, trim)
            direction = estimate_direction(scope, before)
        else:
            direction = estimate_direction(scope)
    return attack_trimmed_mean(scope, spec, present, direction, rng), None


def run_iteration(
    state: TrialState, config: ExperimentConfig, iteration: int
) -> tuple[np.ndarray, MetricsRecord, IterationReport]:
    """One synchronized round: broadcast, local updates, attack, defense, aggregate."""
    w_received = state.weights
    it_stream = state.stream.child(f"iter{iteration}")
    m = config.num_devices
    k = config.resolved_devices_per_round()
    if k < m:
        sampled = sample_devices(m, k, it_stream.child("sample").generator())
    else:
        sampled = np.arange(m)
    present = int(np.sum(sampled < config.compromised))
    scheduled = config.attack != "none" and iteration in state.poisoned_iterations
    flip_active = scheduled and config.attack == "label_flip"

    updates = []
    for dev in sampled:
        dev = int(dev)
        if flip_active and dev < config.compromised:
            objective = state.flipped_objectives[dev]
        else:
            objective = state.objectives[dev]
        updates.append(
            local_update(
                objective,
                w_received,
                config.learning_rate,
                config.local_rounds,
                config.batch_size,
                it_stream.child(f"device{dev}").generator(),
            )
        )
    models = np.stack(updates)

    shift = None
    if scheduled and present > 0 and config.attack in ("gaussian", "craft"):
        attack_rng = it_stream.child("attack").generator()
        if config.attack == "gaussian":
            models[:present] = attack_gaussian(models, present, attack_rng)
        else:
            crafted, shift = _craft_models(config, models, present, w_received, attack_rng)
            if crafted is not None:
                models[:present] = crafted

    outcome = None
    agg_input = models
    removed: tuple[int, ...] = ()
    if config.defense != "none":
        defense_spec = DefenseSpec(config.defense, config.resolved_assumed(), state.validation)
        outcome = apply_defense(models, state.agg_spec, state.model_spec, defense_spec)
        agg_input = outcome.survivors
        removed = tuple(sorted(int(sampled[i]) for i in outcome.removed))

    new_global = aggregate(state.agg_spec, agg_input)
    record = MetricsRecord(
        iteration=iteration,
        train_loss=loss(shard_objective(state.model_spec, state.train), new_global),
        test_error=error_rate(state.model_spec, new_global, state.test),
        validation_error=error_rate(state.model_spec, new_global, state.validation),
        attack_active=scheduled,
        attack_shift=shift,
        removed_devices=removed,
    )
    report = IterationReport(iteration, sampled, models, outcome, new_global)
    return new_global, record, report


@dataclass(frozen=True)
class TrialResult:
    records: tuple[MetricsRecord, ...]
    final_weights: np.ndarray
    selected_iteration: int
    final_test_error: float
    final_validation_error: float


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    trial_results: tuple[TrialResult, ...]

    @property
    def mean_final_test_error(self) -> float:
        return float(np.mean([t.final_test_error for t in self.trial_results]))

    @property
    def mean_final_validation_error(self) -> float:
        return float(np.mean([t.final_validation_error for t in self.trial_results]))

    def summary(self) -> dict:
        errors = [t.final_test_error for t in self.trial_results]
        return {
            "config_hash": config_hash(self.config),
            "trials": len(self.trial_results),
            "mean_final_test_error": float(np.mean(errors)),
            "std_final_test_error": float(np.std(errors)),
            "mean_final_validation_error": self.mean_final_validation_error,
        }


def build_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Materialize (train, test) from the config's data source."""
    if config.dataset == "synth":
        train = synth_blobs(
            config.synth_classes,
            config.synth_per_class,
            config.synth_features,
            config.synth_spread,
            RngStream(config.seed, "data/train").generator(),
        )
        test = synth_blobs(
            config.synth_classes,
            config.synth_test_per_class,
            config.synth_features,
            config.synth_spread,
            RngStream(config.seed, "data/test").generator(),
        )
        return train, test
    if config.dataset == "idx":
        train = load_idx(config.idx_train_images, config.idx_train_labels)
        test = load_idx(config.idx_test_images, config.idx_test_labels)
        return train, test
    full = load_csv(config.csv_path, config.csv_label_column, config.csv_classes)
    n = len(full)
    n_test = max(1, int(round(config.csv_test_fraction * n)))
    order = RngStream(config.seed, "data/split").generator().permutation(n)
    return full.subset(np.sort(order[n_test:])), full.subset(np.sort(order[:n_test]))


def _carve_validation(test: Dataset, size: int, rng: np.random.Generator) -> Dataset:
    take = min(size, len(test))
    picked = np.sort(rng.choice(len(test), size=take, replace=False))
    return test.subset(picked)


def run_trial(
    config: ExperimentConfig,
    train: Dataset,
    test: Dataset,
    trial_index: int,
    on_iteration: Callable[[IterationReport], None] | None = None,
) -> TrialResult:
    """Run one seeded trial of the full federated loop."""
    stream = RngStream(config.seed, f"trial{trial_index}")
    model_spec = config.model_spec(train)
    agg_spec = config.aggregator_spec()

    partition = partition_noniid(train, config.num_devices, config.label_bias, stream.child("partition").generator())
    shards = partition.shards()
    empty = [i for i, shard in enumerate(shards) if shard.size == 0]
    if empty:
        raise ConfigError(f"devices {empty} received no training instances; use more data or fewer devices")

    validation = _carve_validation(test, config.validation_size, stream.child("validation").generator())
    schedule = frozenset()
    if config.attack != "none":
        schedule = poison_schedule(config.iterations, config.poison_fraction, stream.child("schedule").generator())

    state = TrialState(
        config=config,
        model_spec=model_spec,
        agg_spec=agg_spec,
        train=train,
        test=test,
        validation=validation,
        shards=shards,
        stream=stream,
        poisoned_iterations=schedule,
        weights=init_params(model_spec, stream.child("init").generator()),
    )
    state.objectives = [shard_objective(model_spec, train, shard) for shard in shards]
    if config.attack == "label_flip":
        flipped = flip_labels(train)
        state.flipped_objectives = {
            dev: shard_objective(model_spec, flipped, shards[dev]) for dev in range(config.compromised)
        }

    records: list[MetricsRecord] = []
    history: list[tuple[np.ndarray, float]] = []
    for t in range(config.iterations):
        new_global, record, report = run_iteration(state, config, t)
        state.weights = new_global
        records.append(record)
        history.append((new_global, record.validation_error))
        if on_iteration is not None:
            on_iteration(report)

    selected_iteration, final_weights = select_final_model(history, config.selection)
    return TrialResult(
        records=tuple(records),
        final_weights=final_weights,
        selected_iteration=selected_iteration,
        final_test_error=error_rate(model_spec, final_weights, test),
        final_validation_error=records[selected_iteration].validation_error,
    )


def run_experiment(
    config: ExperimentConfig,
    train: Dataset | None = None,
    test: Dataset | None = None,
    on_iteration: Callable[[IterationReport], None] | None = None,
) -> ExperimentResult:
    """Run all trials of an experiment; datasets may be supplied or built from config."""
    config.validate()
    if (train is None) != (test is None):
        raise ValueError("supply both train and test datasets, or neither")
    if train is None:
        train, test = build_datasets(config)
    results = tuple(
        run_trial(config, train, test, trial, on_iteration=on_iteration) for trial in range(config.trials)
    )
    return ExperimentResult(config, results)


def config_to_mapping(config: ExperimentConfig) -> dict[str, str]:
    """Canonical flat key=value view of a config (used for files and hashing)."""
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if value is None:
            out[f.name] = "none"
        elif isinstance(value, bool):
            out[f.name] = "true" if value else "false"
        elif isinstance(value, float):
            out[f.name] = repr(value)
        else:
            out[f.name] = str(value)
    return out


def config_hash(config: ExperimentConfig) -> str:
    text = "\n".join(f"{k} = {v}" for k, v in sorted(config_to_mapping(config).items()))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    declared = _FIELD_TYPES[name]
    text = raw.strip()
    optional = "None" in declared
    if optional and text.lower() in ("none", ""):
        return None
    base = declared.replace(" | None", "")
    if base == "int":
        return int(text)
    if base == "float":
        return float(text)
    if base == "bool":
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean {name}={raw!r}")
    return text


def config_from_mapping(mapping: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from string key=value pairs, over an optional base."""
    config = base or ExperimentConfig()
    unknown = set(mapping) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    updates = {name: _coerce(name, value) for name, value in mapping.items()}
    return replace(config, **updates)


def format_float(value: float) -> str:
    if value != value or math.isinf(value):  # NaN or infinity should never be logged
        raise ValueError("non-finite metric value")
    return repr(float(value))


def metrics_csv_lines(records) -> list[str]:
    """Stable CSV encoding of MetricsRecords (documented in the README)."""
    lines = ["iteration,train_loss,test_error,validation_error,attack_active,attack_shift,removed_devices"]
    for r in records:
        shift = "" if r.attack_shift is None else format_float(r.attack_shift)
        removed = ";".join(str(d) for d in r.removed_devices)
        lines.append(
            f"{r.iteration},{format_float(r.train_loss)},{format_float(r.test_error)},"
            f"{format_float(r.validation_error)},{int(r.attack_active)},{shift},{removed}"
        )
    return lines


def write_trial_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(metrics_csv_lines(records)) + "\n")


def write_summary_csv(result: ExperimentResult, path) -> None:
    summary = result.summary()
    per_trial = ";".join(format_float(t.final_test_error) for t in result.trial_results)
    with open(path, "w", newline="") as fh:
        fh.write(
            "config_hash,trials,mean_final_test_error,std_final_test_error,"
            "mean_final_validation_error,per_trial_final_test_error\n"
        )
        fh.write(
            f"{summary['config_hash']},{summary['trials']},"
            f"{format_float(summary['mean_final_test_error'])},"
            f"{format_float(summary['std_final_test_error'])},"
            f"{format_float(summary['mean_final_validation_error'])},"
            f"{per_trial}\n"
        )
