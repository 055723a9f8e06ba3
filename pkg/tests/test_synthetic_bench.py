import numpy as np
import pytest

from femodels import choice_loss as cl
from femodels import functional_effects as fe
from femodels import synthetic_bench as sb
from femodels.errors import ConfigError, DataError

SMALL = sb.SyntheticConfig(n_individuals=300, n_scenarios=4, n_test_individuals=50,
                           n_valid_individuals=20, seed=9)


class _Oracle:
    """Stands in for a fitted model whose intercepts are the truth."""

    def __init__(self, truth, reference=sb.REFERENCE):
        self.spec = fe.ModelSpec.from_kind("FI-RUMBoost", sb.VARIABLES, reference=reference)
        self.truth = truth

    def effect_values(self, ds):
        return {f"intercept[{i}]": self.truth.intercepts[:, i] for i in self.truth.free_alternatives()}


class TestGenerate:
    def test_default_sizes(self):
        cfg = sb.SyntheticConfig()
        assert cfg.n_individuals * cfg.n_scenarios == 100_000
        assert cfg.n_test_individuals * cfg.n_scenarios == 20_000

    def test_shapes_and_panel_structure(self):
        data = sb.generate(SMALL)
        ds, truth = data["train"]
        assert ds.n_observations == 1200 and ds.n_individuals == 300
        assert np.all(np.bincount(ds.individual) == 4)
        assert ds.socio.min() >= 0 and ds.socio.max() <= 1
        # trip attributes vary within an individual, socio does not (it is stored once)
        assert np.unique(ds.alt_vars[ds.individual == 0, 0, 0]).size == 4
        assert truth.intercepts.shape == (300, 4)
        assert not truth.intercepts[:, sb.REFERENCE].any()

    def test_functional_parts_at_half(self):
        parts = sb.functional_parts(np.full((1, 4), 0.5))[0]
        np.testing.assert_allclose(parts[:3], [np.exp(2.0), 4.0, -np.log(0.0625)], rtol=1e-14)
        assert parts[3] == 0.0

    def test_deterministic(self):
        a, b = sb.generate(SMALL), sb.generate(SMALL)
        assert all(a[k][0].equals(b[k][0]) for k in a)

    def test_streams_are_independent(self):
        data = sb.generate(SMALL)
        assert not np.array_equal(data["train"][0].socio[:20], data["test"][0].socio[:20])
        assert set(data["train"][0].individual_ids).isdisjoint(data["test"][0].individual_ids)

    def test_no_validation_panel(self):
        cfg = sb.SyntheticConfig(n_individuals=10, n_test_individuals=5, n_valid_individuals=0)
        assert set(sb.generate(cfg)) == {"train", "test"}

    @pytest.mark.parametrize("kw", [{"n_individuals": 0}, {"n_scenarios": 0}, {"n_valid_individuals": -1}])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            sb.SyntheticConfig(**kw)

    def test_choice_shares_match_probabilities(self):
        ds, _ = sb.generate(sb.SyntheticConfig(n_individuals=10_000, n_test_individuals=1, seed=4))["train"]
        P = cl.softmax_probabilities(sb.true_utilities(ds))
        n = ds.n_observations
        share = np.bincount(ds.target, minlength=4) / n
        p_bar = P.mean(axis=0)
        se = np.sqrt(p_bar * (1 - p_bar) / n)
        assert np.all(np.abs(share - p_bar) <= 3 * se)


class TestTruthAndScores:
    def test_oracle_recovery_is_zero(self):
        ds, truth = sb.generate(SMALL)["test"]
        mae = sb.recovery_mae(_Oracle(truth), truth, ds)
        assert mae == {0: 0.0, 1: 0.0, 3: 0.0, "mean": 0.0}

    def test_reference_mismatch(self):
        ds, truth = sb.generate(SMALL)["test"]
        with pytest.raises(ConfigError, match="reference"):
            sb.recovery_mae(_Oracle(truth, reference=0), truth, ds)

    def test_frame_round_trip(self):
        ds, truth = sb.generate(SMALL)["test"]
        df = truth.to_frame().sample(frac=1.0, random_state=0)
        back = sb.GroundTruth.from_frame(df, ds.individual_ids)
        np.testing.assert_array_equal(back.intercepts, truth.intercepts)

    def test_frame_missing_individual(self):
        ds, truth = sb.generate(SMALL)["test"]
        with pytest.raises(DataError):
            sb.GroundTruth.from_frame(truth.to_frame().iloc[1:], ds.individual_ids)

    def test_irreducible_cel_saturates(self):
        ds, _ = sb.generate(SMALL)["test"]
        V = np.full((ds.n_observations, 4), -40.0)
        V[np.arange(ds.n_observations), ds.target] = 40.0
        assert sb.irreducible_cel(ds, V) < 1e-30

    def test_irreducible_cel_default_bound(self):
        ds, _ = sb.generate(sb.SyntheticConfig())["test"]
        assert sb.irreducible_cel(ds) <= 1.35

    def test_irreducible_cel_near_target_model_cel(self):
        # the target FI-model test CEL is 1.343 .. 1.344; the
        # generating probabilities should sit within 0.02 of that
        ds, _ = sb.generate(sb.SyntheticConfig())["test"]
        cel = sb.irreducible_cel(ds)
        assert abs(cel - 1.343) <= 0.02, f"irreducible test CEL is {cel:.4f}"

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_irreducible_cel_stable_when_doubled(self, seed):
        # nested: the default-size sample is the first half of the doubled one
        double = sb.generate(sb.SyntheticConfig(n_individuals=20_000, n_test_individuals=1,
                                                seed=seed))["train"][0]
        base = double.subset(np.arange(10_000))
        assert base.n_observations == 100_000
        assert abs(sb.irreducible_cel(base) - sb.irreducible_cel(double)) <= 0.005


class TestOrdinal:
    def test_shapes(self):
        ds, head, V = sb.generate_ordinal(n_individuals=100, n_scenarios=3, seed=1)
        assert ds.n_classes == 13 and head.n_classes == 13
        assert ds.n_observations == 300 and V.shape == (300,)
        np.testing.assert_allclose(V, ds.alt_vars[:, 0, :] @ np.array(sb.ORDINAL_BETA))

    def test_class_frequencies_match_model(self):
        from femodels import ordinal_coral as oc

        ds, head, V = sb.generate_ordinal(n_individuals=20_000, seed=3)
        expected = oc.coral_probabilities(V, head).class_probs.mean(axis=0)
        share = np.bincount(ds.target, minlength=13) / ds.n_observations
        se = np.sqrt(expected * (1 - expected) / ds.n_observations)
        assert np.all(np.abs(share - expected) <= 4 * se)
