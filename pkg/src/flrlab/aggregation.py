"""Master-side aggregation rules: mean, Krum, Bulyan, trimmed mean, median.

All rules are pure functions over an (m, d) matrix of local models, one row
per device, returning a single d-vector.  Selection ties always break to the
lowest device index so attack searches stay reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flrlab.core import as_model_matrix

RULES = ("mean", "krum", "trimmed_mean", "median", "bulyan")

# Above this m*m*d workload the pairwise kernel switches from the exact
# elementwise path to a BLAS Gram-matrix formulation.
_DIRECT_PAIRWISE_LIMIT = 1 << 24


@dataclass(frozen=True)
class AggregatorSpec:
    """Which rule to run and its parameters.

    ``assumed_compromised`` is the defender's upper bound c used by Krum and
    Bulyan; ``trim_count`` is the per-side trim for trimmed mean;
    ``selection_count``/``average_count`` are Bulyan's theta and gamma.
    """

    rule: str
    assumed_compromised: int = 0
    trim_count: int = 0
    selection_count: int = 0
    average_count: int = 0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown aggregation rule {self.rule!r}")

    def validate(self, num_models: int) -> None:
        """Check rule parameters against the size of the model set."""
        m, c = num_models, self.assumed_compromised
        if m < 1:
            raise ValueError("empty model set")
        if self.rule == "krum" and m < c + 3:
            raise ValueError(f"krum needs m >= c+3 (m={m}, c={c})")
        if self.rule == "trimmed_mean" and not 0 <= self.trim_count < m / 2:
            raise ValueError(f"trim count must satisfy 0 <= beta < m/2 (m={m}, beta={self.trim_count})")
        if self.rule == "bulyan":
            theta, gamma = self.selection_count, self.average_count
            if not 1 <= theta <= m - 2 * c:
                raise ValueError(f"bulyan selection count must satisfy 1 <= theta <= m-2c (m={m}, c={c})")
            if not 1 <= gamma <= theta - 2 * c:
                raise ValueError("bulyan average count must satisfy 1 <= gamma <= theta-2c")


def pairwise_sq_dists(models: np.ndarray) -> np.ndarray:
    """Symmetric matrix of squared Euclidean distances between model rows."""
    arr = as_model_matrix(models)
    m, d = arr.shape
    if m * m * d <= _DIRECT_PAIRWISE_LIMIT:
        out = np.empty((m, m))
        for i in range(m):
            out[i] = np.sum((arr - arr[i]) ** 2, axis=1)
    else:
        sq = np.einsum("ij,ij->i", arr, arr)
        out = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (arr @ arr.T), 0.0)
    np.fill_diagonal(out, 0.0)
    return out


def _neighbor_score_sums(sq_dists: np.ndarray, neighbor_count: int) -> np.ndarray:
    """Per row: sum of the ``neighbor_count`` smallest off-diagonal entries.

    Row-sorting puts the zero self-distance first; skipping one leading
    entry excludes the model itself (duplicates tie at zero, so which copy
    is skipped does not change the sum).
    """
    ordered = np.sort(sq_dists, axis=1)
    return ordered[:, 1 : neighbor_count + 1].sum(axis=1)


def mean(models) -> np.ndarray:
    return as_model_matrix(models).mean(axis=0)


def krum_scores(models, assumed_compromised: int) -> np.ndarray:
    """Sum of squared distances from each model to its m-c-2 nearest peers."""
    arr = as_model_matrix(models)
    m = arr.shape[0]
    if m < assumed_compromised + 3:
        raise ValueError(f"krum needs m >= c+3 (m={m}, c={assumed_compromised})")
    return _neighbor_score_sums(pairwise_sq_dists(arr), m - assumed_compromised - 2)


def krum(models, assumed_compromised: int) -> tuple[int, np.ndarray]:
    """Select the local model with the smallest Krum score (lowest index on ties)."""
    arr = as_model_matrix(models)
    scores = krum_scores(arr, assumed_compromised)
    chosen = int(np.argmin(scores))
    return chosen, arr[chosen].copy()


def trimmed_mean(models, trim_count: int) -> np.ndarray:
    """Per coordinate: drop the trim_count largest and smallest values, average the rest."""
    arr = as_model_matrix(models)
    m = arr.shape[0]
    if not 0 <= trim_count < m / 2:
        raise ValueError(f"trim count must satisfy 0 <= beta < m/2 (m={m}, beta={trim_count})")
    ordered = np.sort(arr, axis=0)
    kept = ordered[trim_count : m - trim_count]
    return kept.mean(axis=0)


def median(models) -> np.ndarray:
    """Coordinate-wise median; an even count averages the two middle values."""
    arr = as_model_matrix(models)
    return np.median(arr, axis=0)


def bulyan(models, assumed_compromised: int, selection_count: int, average_count: int) -> np.ndarray:
    """Krum-select ``selection_count`` models, then per coordinate average the
    ``average_count`` values closest to their median.

    Distance-to-median ties keep selection order (stable sort), and the inner
    Krum's neighbour count clips at zero once few models remain.
    """
    arr = as_model_matrix(models)
    m = arr.shape[0]
    spec = AggregatorSpec(
        "bulyan",
        assumed_compromised=assumed_compromised,
        selection_count=selection_count,
        average_count=average_count,
    )
    spec.validate(m)

    sq = pairwise_sq_dists(arr)
    remaining = list(range(m))
    selected: list[int] = []
    for _ in range(selection_count):
        sub = sq[np.ix_(remaining, remaining)]
        neighbors = max(0, len(remaining) - assumed_compromised - 2)
        scores = _neighbor_score_sums(sub, neighbors)
        winner = int(np.argmin(scores))
        selected.append(remaining.pop(winner))

    chosen = arr[selected]
    med = np.median(chosen, axis=0)
    dist_to_med = np.abs(chosen - med)
    order = np.argsort(dist_to_med, axis=0, kind="stable")[:average_count]
    closest = np.take_along_axis(chosen, order, axis=0)
    return closest.mean(axis=0)


def aggregate(spec: AggregatorSpec, models) -> np.ndarray:
    """Dispatch to the configured rule after validating its parameters."""
    arr = as_model_matrix(models)
    spec.validate(arr.shape[0])
    if spec.rule == "mean":
        return mean(arr)
    if spec.rule == "krum":
        return krum(arr, spec.assumed_compromised)[1]
    if spec.rule == "trimmed_mean":
        return trimmed_mean(arr, spec.trim_count)
    if spec.rule == "median":
        return median(arr)
    return bulyan(arr, spec.assumed_compromised, spec.selection_count, spec.average_count)
