import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from femodels import functional_effects as fe
from femodels import synthetic_bench as sb
from femodels.boosted_trees import GbdtParams
from femodels.errors import ConfigError, SchemaError
from femodels.mlp_regressor import DnnParams
from femodels.panel_data import PanelDataset, split_by_individual

from conftest import make_panel

SMALL = sb.SyntheticConfig(n_individuals=400, n_scenarios=5, n_test_individuals=150,
                           n_valid_individuals=150, seed=3)
FAST = GbdtParams(num_leaves=8, min_data_in_leaf=10, max_rounds=60, early_stopping_rounds=20)


@pytest.fixture(scope="module")
def small():
    return sb.generate(SMALL)


@pytest.fixture(scope="module")
def fi_rumboost(small):
    spec = fe.ModelSpec.from_kind("FI-RUMBoost", sb.VARIABLES)
    return fe.fit(spec, small["train"][0], small["valid"][0], gbdt=FAST)


class TestClamp:
    @pytest.mark.parametrize("v,c,out", [(-0.3, 1, 0.0), (-0.3, -1, -0.3), (0.7, -1, 0.0),
                                         (0.7, 1, 0.7), (-2.0, 0, -2.0)])
    def test_values(self, v, c, out):
        assert fe.monotone_clamp(v, c) == out

    @given(st.floats(-1e6, 1e6), st.sampled_from([-1, 0, 1]))
    def test_idempotent_and_signed(self, v, c):
        once = fe.monotone_clamp(v, c)
        assert fe.monotone_clamp(once, c) == once
        assert c * once >= 0 or c == 0


class TestSpec:
    @pytest.mark.parametrize("m,lr", [(20, 0.05), (4, 0.1), (10, 0.1), (1, 0.1), (40, 0.025)])
    def test_default_learning_rate(self, m, lr):
        variables = [[f"a{k}" for k in range(m)], [f"b{k}" for k in range(m + 3)]]
        spec = fe.ModelSpec.from_kind("RUMBoost", variables, reference=0)
        assert fe.default_learning_rate(spec) == pytest.approx(lr)

    def test_empty_utility_has_no_learning_rate(self):
        spec = fe.ModelSpec((fe.Utility("linear", ()), fe.Utility("linear", (fe.Slope("x"),))), reference=0)
        with pytest.raises(ConfigError):
            fe.default_learning_rate(spec)

    def test_reference_has_no_intercept(self):
        spec = fe.ModelSpec.from_kind("FI-RUMBoost", sb.VARIABLES)
        keys = [e[0] for e in spec.effects()]
        assert "intercept[2]" not in keys and {"intercept[0]", "intercept[1]", "intercept[3]"} <= set(keys)

    def test_effect_order_is_intercepts_then_slopes(self):
        spec = fe.ModelSpec.from_kind("FIS-GBDT", [("a", "b"), ("c",)], reference=1)
        assert [e[0] for e in spec.effects()] == [
            "intercept[0]", "slope[0][a]", "slope[0][b]", "slope[1][c]"]

    @pytest.mark.parametrize("bad", [
        dict(utilities=[{"slopes": [{"variable": "x", "kind": "boosted"}]}] * 2, regressor="dnn"),
        dict(utilities=[{"intercept": "functional", "slopes": [{"variable": "x"}]}] * 2),
        dict(utilities=[{}, {}], head="ordinal", n_classes=3),
        dict(utilities=[{}, {}], reference=5),
        dict(utilities=[{"slopes": [{"variable": "x", "monotone": 2}]}] * 2),
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            fe.ModelSpec(**bad)

    def test_dict_round_trip(self):
        spec = fe.ModelSpec.from_kind("FIS-DNN", [("a",), ("b", "c")], monotone={"c": -1}, reference=0)
        assert fe.ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="unknown model kind"):
            fe.ModelSpec.from_kind("GMNL", [("a",), ("b",)])


class TestAssemble:
    def _model(self, kind, ds, reference=None):
        spec = fe.ModelSpec.from_kind(kind, ds.schema.alternatives, reference=reference)
        return fe.FittedModel(spec, ds.schema.socio)

    def test_zero_parameters_give_zero_utilities(self):
        ds = make_panel(n_ind=3, n_scen=2)
        model = self._model("MNL", ds)
        model.linear = {e[0]: 0.0 for e in model.spec.effects()}
        assert not model.utilities(ds).any()

    def test_linear_by_hand(self):
        ds = make_panel(n_ind=1, n_scen=2, n_alt=2, n_vars=2)
        model = self._model("MNL", ds, reference=1)
        model.linear = {"intercept[0]": 0.5, "slope[0][x0_0]": 2.0, "slope[0][x0_1]": -1.0,
                        "slope[1][x1_0]": 3.0, "slope[1][x1_1]": 0.25}
        x = ds.alt_vars
        expected = np.column_stack([0.5 + 2.0 * x[:, 0, 0] - x[:, 0, 1],
                                    3.0 * x[:, 1, 0] + 0.25 * x[:, 1, 1]])
        np.testing.assert_allclose(fe.assemble_utilities(model, ds), expected, atol=1e-15)

    def test_separability(self, small, fi_rumboost):
        """Same trip attributes, different people: utilities differ by the intercept gap."""
        model, _ = fi_rumboost
        ds = small["test"][0]
        two = PanelDataset(np.array([0, 1]), ("a", "b"), ds.socio[:2],
                           np.repeat(ds.alt_vars[:1], 2, axis=0), np.zeros(2, dtype=int), ds.schema)
        V = model.utilities(two)
        eff = model.effect_values(two)
        for i in (0, 1, 3):
            gap = eff[f"intercept[{i}]"][0] - eff[f"intercept[{i}]"][1]
            assert V[0, i] - V[1, i] == pytest.approx(gap, abs=1e-12)
        assert V[0, 2] == V[1, 2]

    def test_schema_mismatch(self, fi_rumboost):
        with pytest.raises(SchemaError):
            fi_rumboost[0].utilities(make_panel(n_alt=4))


class TestTraining:
    def test_report(self, fi_rumboost):
        model, report = fi_rumboost
        assert report.learning_rate == 0.1
        assert 1 <= report.best_iteration <= report.iterations_run <= FAST.max_rounds
        assert all(len(e.trees) == report.best_iteration for e in model.ensembles.values())
        assert report.valid_loss[report.best_iteration - 1] == min(report.valid_loss)

    def test_prediction_purity(self, small, fi_rumboost):
        model, _ = fi_rumboost
        test = small["test"][0]
        before = json.dumps(model.to_dict())
        P = model.predict_proba(test)
        assert json.dumps(model.to_dict()) == before
        np.testing.assert_array_equal(model.predict_proba(test), P)
        # one unseen individual alone gets the same rows as within the full test set
        sub = test.subset([7])
        np.testing.assert_array_equal(model.predict_proba(sub), P[test.individual == 7])

    def test_serialisation(self, small, fi_rumboost):
        model = fi_rumboost[0]
        back = fe.FittedModel.from_dict(json.loads(json.dumps(model.to_dict())))
        np.testing.assert_array_equal(back.predict_proba(small["test"][0]),
                                      model.predict_proba(small["test"][0]))

    def test_boosted_slopes_anchored_without_changing_probabilities(self, small):
        spec = fe.ModelSpec.from_kind("FI-RUMBoost", sb.VARIABLES)
        train, valid = small["train"][0], small["valid"][0]
        raw, _ = fe.fit(spec, train, valid, gbdt=FAST, options=fe.TrainOptions(normalize_boosted=False))
        norm, _ = fe.fit(spec, train, valid, gbdt=FAST)
        np.testing.assert_allclose(norm.predict_proba(train), raw.predict_proba(train), atol=1e-12)
        for key, ens in norm.ensembles.items():
            if key.startswith("slope"):
                assert abs(ens.predict(np.array([[0.0]]))[0]) <= 1e-12

    def test_loss_decreases_in_most_rounds(self):
        data = sb.generate(sb.SyntheticConfig(n_individuals=1500, n_scenarios=10, n_test_individuals=10,
                                              n_valid_individuals=0, seed=5))
        spec = fe.ModelSpec.from_kind("FI-RUMBoost", sb.VARIABLES)
        _, report = fe.fit(spec, data["train"][0], gbdt=GbdtParams(max_rounds=100, min_data_in_leaf=20))
        steps = np.diff(report.train_loss)
        assert np.mean(steps < 0) >= 0.95

    def test_fs_with_constant_socio_matches_mnl(self):
        rng = np.random.default_rng(8)
        base = make_panel(n_ind=400, n_scen=5, n_alt=3, n_socio=1, n_vars=2, seed=8)
        x = base.alt_vars
        V = np.array([0.4, -0.3, 0.0]) + x[:, :, 0] * 1.2 - x[:, :, 1] * 0.8
        P = np.exp(V) / np.exp(V).sum(axis=1, keepdims=True)
        y = (rng.uniform(size=(len(P), 1)) > np.cumsum(P, axis=1)).sum(axis=1)
        ds = PanelDataset(base.individual, base.individual_ids, np.ones_like(base.socio), x, y, base.schema)
        params = GbdtParams(max_rounds=600, early_stopping_rounds=0, min_data_in_leaf=1)
        mnl, _ = fe.fit(fe.ModelSpec.from_kind("MNL", ds.schema.alternatives), ds, gbdt=params)
        fs, _ = fe.fit(fe.ModelSpec.from_kind("FS-GBDT", ds.schema.alternatives), ds, gbdt=params)
        assert abs(fs.loss(ds) - mnl.loss(ds)) <= 1e-3

    def test_monotone_functional_slopes(self, small):
        spec = fe.ModelSpec.from_kind("FS-GBDT", sb.VARIABLES, monotone={"x5": -1, "x6": 1})
        model, _ = fe.fit(spec, small["train"][0], small["valid"][0], gbdt=FAST)
        eff = model.effect_values(small["test"][0])
        assert eff["slope[0][x5]"].max() <= 0.0 and eff["slope[1][x6]"].min() >= 0.0

    def test_fi_dnn_runs_and_exports(self, small):
        spec = fe.ModelSpec.from_kind("FI-DNN", sb.VARIABLES)
        hp = DnnParams(layer_sizes=[16], batch_size=256, learning_rate=0.01, max_epochs=8)
        model, report = fe.fit(spec, small["train"][0], small["valid"][0], dnn=hp)
        assert model.net_outputs == ["intercept[0]", "intercept[1]", "intercept[3]"]
        assert 1 <= report.best_iteration <= report.iterations_run <= 8
        tables = fe.export_effects(model, small["test"][0])
        assert set(tables) == {"individual_effects", "linear_parameters"}
        assert len(tables["individual_effects"]) == small["test"][0].n_individuals

    def test_ordinal_fi_model(self):
        ds, head, _ = sb.generate_ordinal(n_individuals=600, n_scenarios=4, seed=2)
        spec = fe.ModelSpec.from_kind("FI-RUMBoost", ds.schema.alternatives, head="ordinal", n_classes=13)
        model, _ = fe.fit(spec, ds, gbdt=GbdtParams(max_rounds=30, num_leaves=4))
        assert model.coral.is_sorted()
        m = model.metrics(ds)
        assert set(m) == {"mcel", "mae", "emae"}
        assert fe.export_effects(model, ds)["thresholds"].shape == (12, 2)

    def test_split_must_partition(self, small):
        ds = small["train"][0]
        plan = split_by_individual(ds, seed=0)
        bad = type(plan)(plan.train[1:], plan.valid, plan.test, plan.seed)
        with pytest.raises(ConfigError):
            fe.train(fe.ModelSpec.from_kind("MNL", sb.VARIABLES), ds, bad)


class TestExport:
    def test_fi_rumboost_tables(self, small, fi_rumboost):
        tables = fe.export_effects(fi_rumboost[0], small["test"][0])
        eff = tables["individual_effects"]
        assert list(eff.columns) == ["individual", "intercept[0]", "intercept[1]", "intercept[3]"]
        curves = tables["coefficient_curves"]
        assert (curves.groupby("effect").size() == fe.CURVE_POINTS).all()

    def test_linear_model_exports_scalars_only(self, small):
        model, _ = fe.fit(fe.ModelSpec.from_kind("MNL", sb.VARIABLES), small["train"][0],
                          gbdt=GbdtParams(max_rounds=5))
        assert set(fe.export_effects(model, small["test"][0])) == {"linear_parameters"}
