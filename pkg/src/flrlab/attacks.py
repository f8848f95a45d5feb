"""Local model poisoning attack crafters.

The crafted-model attacks push the aggregated global model against the
direction it would move without an attack.  Against Krum the crafted model
sits at ``w_received - shift * direction`` with the largest shift that Krum
still selects (binary search under a provable upper bound); against trimmed
mean and median the compromised coordinates are sampled just beyond the
benign extremes (full knowledge) or 3-4 standard deviations from the
compromised mean (partial knowledge).  Gaussian and label-flipping baselines
round out the set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flrlab.aggregation import krum, mean, median, pairwise_sq_dists, trimmed_mean
from flrlab.core import as_model_matrix, as_vector, signed_direction
from flrlab.data import Dataset

OBJECTIVES = ("directed_deviation", "deviation")
CRAFT_TARGETS = ("krum", "bulyan", "trimmed_mean", "median", "mean")


@dataclass(frozen=True)
class KnowledgeScope:
    """What the attacker can see this iteration.

    ``models`` holds the before-attack local models: all m of them in full
    knowledge, only the compromised ones in partial knowledge.  Partial mode
    never receives benign models, which enforces the knowledge boundary by
    construction.  ``w_received`` is the global model the master broadcast.
    """

    mode: str  # "full" | "partial"
    models: np.ndarray
    w_received: np.ndarray

    def __post_init__(self):
        if self.mode not in ("full", "partial"):
            raise ValueError(f"unknown knowledge mode {self.mode!r}")
        arr = as_model_matrix(self.models)
        w = as_vector(self.w_received, dim=arr.shape[1])
        object.__setattr__(self, "models", arr)
        object.__setattr__(self, "w_received", w)


@dataclass(frozen=True)
class AttackSpec:
    """Crafted-attack hyperparameters.

    ``support_radius`` bounds the ball the c-1 supporting Krum models are
    sampled in; ``interval_factor`` stretches the sampling interval past the
    benign extremes for the trimmed-mean/median attack; ``shift_floor`` is
    where the Krum binary search gives up.
    """

    target_rule: str
    objective: str = "directed_deviation"
    support_radius: float = 0.01
    interval_factor: float = 2.0
    shift_floor: float = 1e-5
    assumed_trim: int | None = None  # trim count used when simulating trimmed mean

    def __post_init__(self):
        if self.target_rule not in CRAFT_TARGETS:
            raise ValueError(f"unknown attack target {self.target_rule!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown attack objective {self.objective!r}")
        if self.support_radius <= 0:
            raise ValueError("support radius must be positive")
        if self.interval_factor <= 1:
            raise ValueError("interval factor must exceed 1")
        if self.shift_floor <= 0:
            raise ValueError("shift floor must be positive")


@dataclass(frozen=True)
class CoordinateStats:
    """Per-coordinate mean, population standard deviation, and extremes."""

    mean: np.ndarray
    std: np.ndarray
    maximum: np.ndarray
    minimum: np.ndarray


@dataclass(frozen=True)
class KrumAttackResult:
    """Outcome of a Krum-targeted crafting attempt.

    ``models`` is None when no feasible shift was found (no-solution);
    ``crafted_copies`` is how many replicas of the crafted model the
    successful evaluation set contained (partial mode grows it).
    """

    models: np.ndarray | None
    shift: float | None
    crafted_copies: int

    @property
    def success(self) -> bool:
        return self.models is not None


def estimate_direction(scope: KnowledgeScope, before_attack_agg=None) -> np.ndarray:
    """Per-coordinate update direction the attack will work against.

    Full knowledge compares the iteration's no-attack aggregate with the
    received global model; partial knowledge substitutes the mean of the
    compromised devices' before-attack models.
    """
    if scope.mode == "full":
        if before_attack_agg is None:
            raise ValueError("full knowledge needs the no-attack aggregate")
        return signed_direction(before_attack_agg, scope.w_received)
    if before_attack_agg is not None:
        raise ValueError("partial knowledge must not see the no-attack aggregate")
    return signed_direction(scope.models.mean(axis=0), scope.w_received)


def krum_shift_upper_bound(candidate_models, w_received, crafted_count: int) -> float:
    """Largest shift for which the crafted model could still win Krum.

    ``candidate_models`` are the models the attacker treats as benign (the
    true benign ones in full knowledge, the compromised before-attack ones
    in partial knowledge); the evaluation set is those plus
    ``crafted_count`` identical crafted replicas.
    """
    cand = as_model_matrix(candidate_models)
    n, dim = cand.shape
    w_re = as_vector(w_received, dim=dim)
    if n < 3:
        raise ValueError("need at least three candidate models for the neighbour sums")
    denom = n - crafted_count - 1
    if denom <= 0:
        raise ValueError(f"bound undefined: need crafted_count <= candidates-2 (n={n}, crafted={crafted_count})")
    neighbor_sums = np.sort(pairwise_sq_dists(cand), axis=1)[:, 1 : n - 1].sum(axis=1)
    term1 = np.sqrt(neighbor_sums.min() / (denom * dim))
    term2 = np.sqrt(np.sum((cand - w_re) ** 2, axis=1)).max() / np.sqrt(dim)
    return float(term1 + term2)


def sample_in_ball(center: np.ndarray, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the Euclidean ball around ``center``."""
    dim = center.shape[0]
    direction = rng.standard_normal(dim)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        direction = np.zeros(dim)
        direction[0] = 1.0
        norm = 1.0
    r = radius * rng.random() ** (1.0 / dim)
    return center + (r / norm) * direction


def _binary_search_shift(
    candidates: np.ndarray,
    w_received: np.ndarray,
    direction: np.ndarray,
    copies: int,
    shift_floor: float,
) -> tuple[float, np.ndarray] | None:
    """Halve the shift from its upper bound until Krum picks the crafted model."""
    shift = krum_shift_upper_bound(candidates, w_received, copies)
    while shift >= shift_floor:
        crafted = w_received - shift * direction
        eval_set = np.vstack([np.tile(crafted, (copies, 1)), candidates])
        chosen, _ = krum(eval_set, copies)
        if chosen < copies:
            return shift, crafted
        shift *= 0.5
    return None


def attack_krum(
    scope: KnowledgeScope,
    spec: AttackSpec,
    compromised_count: int,
    rng: np.random.Generator,
) -> KrumAttackResult:
    """Craft ``compromised_count`` local models so Krum selects the shifted one.

    Full knowledge searches the shift against the benign models with the
    crafted model replicated c times (the supporting replicas).  Partial
    knowledge searches against the compromised devices' before-attack models
    and, on failure, adds one more crafted replica to the evaluation set and
    restarts, up to c replicas.  The emitted set is the crafted model plus
    c-1 samples inside the support-radius ball around it.
    """
    if spec.target_rule not in ("krum", "bulyan"):
        raise ValueError("attack_krum targets the krum or bulyan rule")
    c = compromised_count
    if c < 1:
        raise ValueError("need at least one compromised device")
    w_re = scope.w_received
    dim = w_re.shape[0]

    if scope.mode == "full":
        if scope.models.shape[0] <= c:
            raise ValueError("full knowledge requires benign models in scope")
        if spec.objective == "directed_deviation":
            _, before = krum(scope.models, c)
            direction = signed_direction(before, w_re)
        else:
            direction = np.ones(dim)
        benign = scope.models[c:]
        copy_plans = [c]
        candidates = benign
    else:
        if scope.models.shape[0] != c:
            raise ValueError("partial knowledge sees exactly the compromised models")
        if spec.objective == "directed_deviation":
            direction = signed_direction(scope.models.mean(axis=0), w_re)
        else:
            direction = np.ones(dim)
        # The evaluation Krum needs at least 3 candidates beyond the replicas
        # and the bound needs candidates - copies - 1 > 0.
        copy_plans = [a for a in range(1, c + 1) if c - a - 1 > 0]
        candidates = scope.models

    for copies in copy_plans:
        found = _binary_search_shift(candidates, w_re, direction, copies, spec.shift_floor)
        if found is not None:
            shift, crafted = found
            out = np.empty((c, dim))
            out[0] = crafted
            for i in range(1, c):
                out[i] = sample_in_ball(crafted, spec.support_radius, rng)
            return KrumAttackResult(out, shift, copies)
    return KrumAttackResult(None, None, 0)


attack_bulyan = attack_krum  # the Krum attack transfers to Bulyan unchanged


def coordinate_stats(models) -> CoordinateStats:
    """Exact per-coordinate statistics (population standard deviation)."""
    arr = as_model_matrix(models)
    return CoordinateStats(
        mean=arr.mean(axis=0),
        std=arr.std(axis=0),
        maximum=arr.max(axis=0),
        minimum=arr.min(axis=0),
    )


def _extreme_intervals(extremes: np.ndarray, factor: float, above: bool) -> tuple[np.ndarray, np.ndarray]:
    """Sampling interval just beyond the benign extreme on one side.

    ``above=True`` builds [max, factor*max] / [max, max/factor] depending on
    the sign of the extreme; ``above=False`` mirrors below the minimum.
    """
    if above:
        lo = extremes
        hi = np.where(extremes > 0, factor * extremes, extremes / factor)
    else:
        hi = extremes
        lo = np.where(extremes > 0, extremes / factor, factor * extremes)
    return lo, hi


def _rule_per_coordinate(rule: str, models: np.ndarray, trim_count: int) -> np.ndarray:
    if rule == "mean":
        return mean(models)
    if rule == "median":
        return median(models)
    return trimmed_mean(models, trim_count)


def attack_trimmed_mean(
    scope: KnowledgeScope,
    spec: AttackSpec,
    compromised_count: int,
    direction,
    rng: np.random.Generator,
) -> np.ndarray:
    """Craft per-coordinate extreme values against trimmed mean, median, or mean.

    Full knowledge samples each compromised coordinate uniformly just beyond
    the benign maximum (direction -1) or minimum (direction +1).  Partial
    knowledge samples from [mu+3s, mu+4s] or [mu-4s, mu-3s] of the
    compromised devices' own statistics.  Under the undirected deviation
    objective the side is chosen per coordinate by whichever interval
    midpoint displaces the simulated aggregate further.
    """
    if spec.target_rule not in ("trimmed_mean", "median", "mean"):
        raise ValueError("attack_trimmed_mean targets a coordinate-wise rule")
    c = compromised_count
    if c < 1:
        raise ValueError("need at least one compromised device")
    dim = scope.w_received.shape[0]

    if scope.mode == "partial":
        if spec.objective != "directed_deviation":
            raise ValueError("the deviation objective is defined for full knowledge only")
        if scope.models.shape[0] != c:
            raise ValueError("partial knowledge sees exactly the compromised models")
        s = as_vector(direction, dim=dim)
        stats = coordinate_stats(scope.models)
        lo = np.where(s < 0, stats.mean + 3.0 * stats.std, stats.mean - 4.0 * stats.std)
        hi = np.where(s < 0, stats.mean + 4.0 * stats.std, stats.mean - 3.0 * stats.std)
    else:
        if scope.models.shape[0] <= c:
            raise ValueError("full knowledge requires benign models in scope")
        benign = scope.models[c:]
        above_lo, above_hi = _extreme_intervals(benign.max(axis=0), spec.interval_factor, above=True)
        below_lo, below_hi = _extreme_intervals(benign.min(axis=0), spec.interval_factor, above=False)
        if spec.objective == "directed_deviation":
            s = as_vector(direction, dim=dim)
            go_above = s < 0
        else:
            trim = spec.assumed_trim if spec.assumed_trim is not None else c
            base = _rule_per_coordinate(spec.target_rule, scope.models, trim)
            above_mid = np.vstack([np.tile((above_lo + above_hi) / 2.0, (c, 1)), benign])
            below_mid = np.vstack([np.tile((below_lo + below_hi) / 2.0, (c, 1)), benign])
            dev_above = np.abs(_rule_per_coordinate(spec.target_rule, above_mid, trim) - base)
            dev_below = np.abs(_rule_per_coordinate(spec.target_rule, below_mid, trim) - base)
            go_above = dev_above >= dev_below
        lo = np.where(go_above, above_lo, below_lo)
        hi = np.where(go_above, above_hi, below_hi)

    return rng.uniform(lo, hi, size=(c, dim))


attack_median = attack_trimmed_mean  # the median rule is attacked identically


def attack_gaussian(models, compromised_count: int, rng: np.random.Generator) -> np.ndarray:
    """Baseline: resample compromised models from a per-coordinate Gaussian fit
    over all before-attack local models."""
    arr = as_model_matrix(models)
    if not 1 <= compromised_count <= arr.shape[0]:
        raise ValueError("compromised count out of range")
    mu = arr.mean(axis=0)
    sigma = arr.std(axis=0)
    return rng.normal(mu, sigma, size=(compromised_count, arr.shape[1]))


def flip_labels(shard: Dataset, num_classes: int | None = None) -> Dataset:
    """Label-flipping baseline: label l becomes L-1-l; features untouched."""
    L = shard.num_classes if num_classes is None else num_classes
    return Dataset(shard.features, L - 1 - shard.labels, L)
