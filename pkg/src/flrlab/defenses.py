"""Rejection defenses: remove suspect local models before aggregation.

ERR drops the c local models whose inclusion raises the validation error
rate the most, LFR the ones that raise the validation cross-entropy the
most, and Union drops anything either would.  Impacts are leave-one-out:
aggregate with and without each model and compare on a small validation
set held by the master.  The defenses never see which devices are actually
compromised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flrlab.aggregation import AggregatorSpec, aggregate, krum, pairwise_sq_dists
from flrlab.core import as_model_matrix
from flrlab.data import Dataset
from flrlab.models import ModelSpec, error_rate, loss, shard_objective

DEFENSE_KINDS = ("none", "err", "lfr", "union")


@dataclass(frozen=True)
class DefenseSpec:
    """Which filter to run, how many models it removes, and the validation data."""

    kind: str
    removal_count: int
    validation: Dataset | None = None

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind != "none":
            if self.removal_count < 1:
                raise ValueError("defense removal count must be positive")
            if self.validation is None or len(self.validation) == 0:
                raise ValueError(f"{self.kind} defense needs a non-empty validation set")


@dataclass(frozen=True)
class ImpactRecord:
    """Leave-one-out impact of a single device's local model."""

    device: int
    error_impact: float
    loss_impact: float


@dataclass(frozen=True)
class DefenseOutcome:
    survivors: np.ndarray
    removed: tuple[int, ...]
    records: tuple[ImpactRecord, ...]
    removed_by_error: tuple[int, ...] = ()
    removed_by_loss: tuple[int, ...] = ()


def _loo_aggregates(models: np.ndarray, agg_spec: AggregatorSpec):
    """Yield (index, aggregate-without-index) for every device.

    Krum gets a fast path that reuses one pairwise distance matrix; the
    selection is identical to rerunning the rule on each m-1 subset.
    """
    m = models.shape[0]
    if agg_spec.rule == "krum":
        c = agg_spec.assumed_compromised
        if m - 1 < c + 3:
            raise ValueError(f"krum leave-one-out needs m-1 >= c+3 (m={m}, c={c})")
        sq = pairwise_sq_dists(models)
        neighbors = (m - 1) - c - 2
        for i in range(m):
            keep = np.flatnonzero(np.arange(m) != i)
            sub = sq[np.ix_(keep, keep)]
            scores = np.sort(sub, axis=1)[:, 1 : neighbors + 1].sum(axis=1)
            yield i, models[keep[int(np.argmin(scores))]]
    else:
        for i in range(m):
            subset = np.delete(models, i, axis=0)
            yield i, aggregate(agg_spec, subset)


def impact_scores(
    models,
    agg_spec: AggregatorSpec,
    model_spec: ModelSpec,
    validation: Dataset,
) -> list[ImpactRecord]:
    """Error-rate and loss impact of each local model on the validation set."""
    arr = as_model_matrix(models)
    if arr.shape[0] < 2:
        raise ValueError("leave-one-out impacts need at least two models")
    val_objective = shard_objective(model_spec, validation)
    with_all = aggregate(agg_spec, arr)
    err_all = error_rate(model_spec, with_all, validation)
    loss_all = loss(val_objective, with_all)
    records = []
    for i, without in _loo_aggregates(arr, agg_spec):
        err_w = error_rate(model_spec, without, validation)
        loss_w = loss(val_objective, without)
        records.append(ImpactRecord(i, err_all - err_w, loss_all - loss_w))
    return records


def _largest_impacts(records: list[ImpactRecord], key, count: int) -> tuple[int, ...]:
    """Devices with the ``count`` largest impacts; ties drop lower indices first."""
    impacts = np.asarray([key(r) for r in records])
    order = np.argsort(-impacts, kind="stable")
    return tuple(sorted(int(records[i].device) for i in order[:count]))


def _outcome(models: np.ndarray, removed, records, by_error=(), by_loss=()) -> DefenseOutcome:
    mask = np.ones(models.shape[0], dtype=bool)
    mask[list(removed)] = False
    return DefenseOutcome(
        survivors=models[mask],
        removed=tuple(removed),
        records=tuple(records),
        removed_by_error=tuple(by_error),
        removed_by_loss=tuple(by_loss),
    )


def defend_err(models, agg_spec: AggregatorSpec, model_spec: ModelSpec, spec: DefenseSpec) -> DefenseOutcome:
    """Remove the ``removal_count`` models with the largest error-rate impact."""
    arr = as_model_matrix(models)
    _check_removal(spec, arr.shape[0])
    records = impact_scores(arr, agg_spec, model_spec, spec.validation)
    removed = _largest_impacts(records, lambda r: r.error_impact, spec.removal_count)
    return _outcome(arr, removed, records, by_error=removed)


def defend_lfr(models, agg_spec: AggregatorSpec, model_spec: ModelSpec, spec: DefenseSpec) -> DefenseOutcome:
    """Remove the ``removal_count`` models with the largest loss impact."""
    arr = as_model_matrix(models)
    _check_removal(spec, arr.shape[0])
    records = impact_scores(arr, agg_spec, model_spec, spec.validation)
    removed = _largest_impacts(records, lambda r: r.loss_impact, spec.removal_count)
    return _outcome(arr, removed, records, by_loss=removed)


def defend_union(models, agg_spec: AggregatorSpec, model_spec: ModelSpec, spec: DefenseSpec) -> DefenseOutcome:
    """Remove every model that either ERR or LFR would remove."""
    arr = as_model_matrix(models)
    _check_removal(spec, arr.shape[0])
    records = impact_scores(arr, agg_spec, model_spec, spec.validation)
    by_error = _largest_impacts(records, lambda r: r.error_impact, spec.removal_count)
    by_loss = _largest_impacts(records, lambda r: r.loss_impact, spec.removal_count)
    removed = tuple(sorted(set(by_error) | set(by_loss)))
    return _outcome(arr, removed, records, by_error=by_error, by_loss=by_loss)


def apply_defense(models, agg_spec: AggregatorSpec, model_spec: ModelSpec, spec: DefenseSpec) -> DefenseOutcome:
    arr = as_model_matrix(models)
    if spec.kind == "none":
        return DefenseOutcome(survivors=arr, removed=(), records=())
    if spec.kind == "err":
        return defend_err(arr, agg_spec, model_spec, spec)
    if spec.kind == "lfr":
        return defend_lfr(arr, agg_spec, model_spec, spec)
    return defend_union(arr, agg_spec, model_spec, spec)


def _check_removal(spec: DefenseSpec, num_models: int) -> None:
    if spec.removal_count >= num_models:
        raise ValueError(f"cannot remove {spec.removal_count} of {num_models} models")
