import numpy as np
import pytest

from flrlab.aggregation import AggregatorSpec
from flrlab.core import RngStream
from flrlab.data import Dataset, synth_blobs
from flrlab.defenses import (
    DefenseSpec,
    apply_defense,
    defend_err,
    defend_lfr,
    defend_union,
    impact_scores,
)
from flrlab.models import ModelSpec, error_rate, loss, shard_objective

from oracles import oracle_leave_one_out_mean


@pytest.fixture(scope="module")
def validation():
    return synth_blobs(2, 40, 2, 0.15, RngStream(100, "val").generator())


@pytest.fixture(scope="module")
def model_spec():
    return ModelSpec("lr", 2, 2)


def trained_models(validation, model_spec, count=6, noise=0.2, seed=5):
    """A population of sensible local models around one trained solution."""
    rng = RngStream(seed, "defense-models").generator()
    obj = shard_objective(model_spec, validation)
    w = np.zeros(model_spec.dim)
    from flrlab.models import gradient

    for _ in range(300):
        w -= 0.5 * gradient(obj, w)
    return w + noise * rng.standard_normal((count, model_spec.dim))


class TestImpactScores:
    def test_identical_models_zero_impact(self, validation, model_spec):
        models = np.tile(np.linspace(-1, 1, model_spec.dim), (5, 1))
        records = impact_scores(models, AggregatorSpec("mean"), model_spec, validation)
        assert all(r.error_impact == 0 and abs(r.loss_impact) < 1e-12 for r in records)

    def test_mean_rule_matches_closed_form(self, validation, model_spec):
        rng = RngStream(6, "d").generator()
        models = rng.standard_normal((7, model_spec.dim))
        records = impact_scores(models, AggregatorSpec("mean"), model_spec, validation)
        loo = oracle_leave_one_out_mean(models.tolist())
        obj = shard_objective(model_spec, validation)
        full_mean = models.mean(axis=0)
        for r, without in zip(records, loo):
            expect_err = error_rate(model_spec, full_mean, validation) - error_rate(
                model_spec, np.asarray(without), validation
            )
            expect_loss = loss(obj, full_mean) - loss(obj, np.asarray(without))
            assert r.error_impact == pytest.approx(expect_err, abs=1e-12)
            assert r.loss_impact == pytest.approx(expect_loss, abs=1e-12)

    def test_krum_fast_path_matches_rule_rerun(self, validation, model_spec):
        from flrlab.aggregation import krum

        rng = RngStream(7, "d").generator()
        models = rng.standard_normal((8, model_spec.dim))
        spec = AggregatorSpec("krum", assumed_compromised=2)
        records = impact_scores(models, spec, model_spec, validation)
        obj = shard_objective(model_spec, validation)
        from flrlab.aggregation import aggregate

        full = aggregate(spec, models)
        for i, r in enumerate(records):
            _, without = krum(np.delete(models, i, axis=0), 2)
            assert r.error_impact == pytest.approx(
                error_rate(model_spec, full, validation) - error_rate(model_spec, without, validation), abs=1e-12
            )
            assert r.loss_impact == pytest.approx(loss(obj, full) - loss(obj, without), abs=1e-12)

    def test_permutation_equivariant(self, validation, model_spec):
        rng = RngStream(8, "d").generator()
        models = rng.standard_normal((6, model_spec.dim))
        perm = rng.permutation(6)
        direct = impact_scores(models, AggregatorSpec("mean"), model_spec, validation)
        permuted = impact_scores(models[perm], AggregatorSpec("mean"), model_spec, validation)
        for pos, orig in enumerate(perm):
            assert permuted[pos].loss_impact == pytest.approx(direct[orig].loss_impact, abs=1e-12)
            assert permuted[pos].error_impact == pytest.approx(direct[orig].error_impact, abs=1e-12)

    def test_needs_two_models(self, validation, model_spec):
        with pytest.raises(ValueError):
            impact_scores(np.zeros((1, model_spec.dim)), AggregatorSpec("mean"), model_spec, validation)


class TestDefendErr:
    def test_removes_worst_device(self, validation, model_spec):
        models = trained_models(validation, model_spec)
        # an inverted, amplified model flips the mean's predictions; note a
        # constant-shift model would be harmless (softmax shift invariance)
        models[3] = -6.0 * models[0]
        spec = DefenseSpec("err", 1, validation)
        outcome = defend_err(models, AggregatorSpec("mean"), model_spec, spec)
        assert outcome.removed == (3,)
        assert outcome.survivors.shape == (5, model_spec.dim)

    def test_survivor_count(self, validation, model_spec):
        models = trained_models(validation, model_spec, count=8)
        for c in (1, 2, 3):
            outcome = defend_err(models, AggregatorSpec("mean"), model_spec, DefenseSpec("err", c, validation))
            assert len(outcome.removed) == c
            assert outcome.survivors.shape[0] == 8 - c

    def test_ties_remove_lowest_indices(self, validation, model_spec):
        models = np.tile(np.linspace(0, 1, model_spec.dim), (6, 1))
        outcome = defend_err(models, AggregatorSpec("mean"), model_spec, DefenseSpec("err", 2, validation))
        assert outcome.removed == (0, 1)


class TestDefendLfr:
    def test_huge_parameters_removed(self, validation, model_spec):
        models = trained_models(validation, model_spec)
        models[4] = 1e4
        outcome = defend_lfr(models, AggregatorSpec("mean"), model_spec, DefenseSpec("lfr", 1, validation))
        assert outcome.removed == (4,)

    def test_identical_models_remove_by_index(self, validation, model_spec):
        models = np.tile(np.linspace(0, 1, model_spec.dim), (6, 1))
        outcome = defend_lfr(models, AggregatorSpec("mean"), model_spec, DefenseSpec("lfr", 3, validation))
        assert outcome.removed == (0, 1, 2)


class TestDefendUnion:
    def test_union_of_both_sets(self, validation, model_spec):
        rng = RngStream(9, "d").generator()
        models = trained_models(validation, model_spec, count=9)
        models += 0.05 * rng.standard_normal(models.shape)
        agg = AggregatorSpec("mean")
        spec = DefenseSpec("union", 2, validation)
        err_set = set(defend_err(models, agg, model_spec, DefenseSpec("err", 2, validation)).removed)
        lfr_set = set(defend_lfr(models, agg, model_spec, DefenseSpec("lfr", 2, validation)).removed)
        outcome = defend_union(models, agg, model_spec, spec)
        assert set(outcome.removed) == err_set | lfr_set
        assert set(outcome.removed_by_error) == err_set
        assert set(outcome.removed_by_loss) == lfr_set
        assert spec.removal_count <= len(outcome.removed) <= 2 * spec.removal_count

    def test_union_survivors_subset_of_each(self, validation, model_spec):
        models = trained_models(validation, model_spec, count=7, seed=11)
        agg = AggregatorSpec("median")
        union = defend_union(models, agg, model_spec, DefenseSpec("union", 2, validation))
        err = defend_err(models, agg, model_spec, DefenseSpec("err", 2, validation))
        lfr = defend_lfr(models, agg, model_spec, DefenseSpec("lfr", 2, validation))
        assert set(union.removed) >= set(err.removed)
        assert set(union.removed) >= set(lfr.removed)


class TestApplyDefense:
    def test_none_is_identity(self, validation, model_spec):
        models = trained_models(validation, model_spec)
        outcome = apply_defense(models, AggregatorSpec("mean"), model_spec, DefenseSpec("none", 0))
        assert outcome.removed == ()
        assert np.array_equal(outcome.survivors, models)

    def test_spec_validation(self, validation):
        with pytest.raises(ValueError):
            DefenseSpec("err", 0, validation)
        with pytest.raises(ValueError):
            DefenseSpec("lfr", 2, None)
        with pytest.raises(ValueError):
            DefenseSpec("gatekeeper", 1, validation)

    def test_cannot_remove_everything(self, validation, model_spec):
        models = trained_models(validation, model_spec, count=3)
        with pytest.raises(ValueError):
            defend_err(models, AggregatorSpec("mean"), model_spec, DefenseSpec("err", 3, validation))

    def test_trimmed_mean_loo_configuration_error(self, validation, model_spec):
        # beta = 2 is fine for 5 models but invalid for the 4-model subsets
        models = trained_models(validation, model_spec, count=5)
        agg = AggregatorSpec("trimmed_mean", trim_count=2)
        with pytest.raises(ValueError):
            impact_scores(models, agg, model_spec, validation)
