import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from supradiff import (
    ExperimentConfig,
    SyntheticParams,
    ValidationError,
    assemble_supra,
    generate_synthetic,
    normalized_frobenius_error,
    predict_drift,
    run_experiment,
)
from supradiff.evaluation import (
    hide_edges,
    is_connected,
    mean_rows,
    ordering_holds,
    pooled_means,
    replication_seeds,
    run_replications,
)

SMALL = SyntheticParams(nodes_per_layer=6, edge_prob=0.5, steps=20, topics=3)


class TestMetric:
    def test_exact(self):
        X = np.random.default_rng(0).random((3, 2))
        assert normalized_frobenius_error(X, X) == 0.0

    def test_null_predictor(self):
        X = np.random.default_rng(1).random((3, 2))
        assert normalized_frobenius_error(np.zeros_like(X), X) == pytest.approx(1.0, abs=1e-15)

    def test_hand_computed(self):
        assert normalized_frobenius_error([[0, 0]], [[3, 4]]) == 1.0
        assert normalized_frobenius_error([[3, 0]], [[3, 4]]) == pytest.approx(4 / 5, abs=1e-15)

    def test_zero_truth(self):
        with pytest.raises(ValidationError):
            normalized_frobenius_error(np.ones((2, 2)), np.zeros((2, 2)))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.01, 100))
    def test_homogeneous_in_perturbation(self, seed, c):
        rng = np.random.default_rng(seed)
        X, D = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        a = normalized_frobenius_error(X + c * D, X)
        b = normalized_frobenius_error(X + D, X)
        assert a == pytest.approx(c * b, rel=1e-9)


class TestSynthetic:
    def test_complete_graphs(self):
        net, _ = generate_synthetic(SyntheticParams(nodes_per_layer=5, edge_prob=1.0, steps=2), 0)
        for layer in net.layers:
            np.testing.assert_array_equal(layer.adjacency > 0, ~np.eye(5, dtype=bool))

    def test_noiseless_semigroup(self):
        p = SyntheticParams(nodes_per_layer=5, edge_prob=0.6, sigma_scale=0.0, steps=6)
        net, traj = generate_synthetic(p, 3)
        L = assemble_supra(net)
        for k in range(1, 7):
            np.testing.assert_allclose(traj.states[k], predict_drift(L, traj.states[0], float(k)), atol=1e-12)

    def test_deterministic(self):
        a = generate_synthetic(SMALL, 5)[1].states
        b = generate_synthetic(SMALL, 5)[1].states
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != generate_synthetic(SMALL, 6)[1].states.tobytes()

    def test_connected_and_simplex_start(self):
        net, traj = generate_synthetic(SMALL, 2)
        assert is_connected(net)
        np.testing.assert_allclose(traj.states[0].sum(axis=1), 1.0)
        assert traj.states.shape == (21, 12, 3)

    def test_disconnected_error(self):
        p = SyntheticParams(nodes_per_layer=4, edge_prob=0.0, coupling="random", coupling_prob=0.0, steps=2)
        with pytest.raises(ValidationError, match="edge"):
            generate_synthetic(p, 0)

    @pytest.mark.parametrize("bad", [{"edge_prob": 1.5}, {"n_layers": 0}, {"coupling": "ring"}, {"steps": 0}])
    def test_param_validation(self, bad):
        with pytest.raises(ValidationError):
            SyntheticParams(**bad)

    def test_hide_edges_count(self):
        net, _ = generate_synthetic(SyntheticParams(nodes_per_layer=10, edge_prob=0.5, steps=2), 1)
        hidden = hide_edges(net, 0.3, np.random.default_rng(0))
        for full, part in zip(net.layers, hidden.layers):
            e_full = int(np.count_nonzero(np.triu(full.adjacency, 1)))
            e_part = int(np.count_nonzero(np.triu(part.adjacency, 1)))
            assert e_full - e_part == round(0.3 * e_full)
            assert np.all(part.adjacency <= full.adjacency)


class TestExperiment:
    def test_tables_and_baseline(self):
        res = run_experiment(ExperimentConfig(synthetic=SMALL, seed=1))
        assert res.predictors == ["fixed_laplacian", "learned_lambda", "kalman", "persistence"]
        assert len(res.table("kalman")) == 21 - math.floor(0.5 * 21)
        assert len(res.observed_nodes) == math.ceil(0.25 * 12)

    def test_reproducible(self):
        a = run_experiment(ExperimentConfig(synthetic=SMALL, seed=4))
        b = run_experiment(ExperimentConfig(synthetic=SMALL, seed=4))
        assert a.rows == b.rows
        assert a.observed_nodes == b.observed_nodes

    def test_full_observation(self):
        res = run_experiment(ExperimentConfig(synthetic=SMALL, observation_fraction=1.0, observation_noise=1e-12, seed=2))
        assert res.table("kalman").max() < 1e-6
        assert np.all(np.isnan(res.table("kalman", "error_unobserved")))

    def test_no_observation(self):
        res = run_experiment(ExperimentConfig(synthetic=SMALL, observation_fraction=0.0, seed=2))
        for col in ("error_all", "error_unobserved"):
            assert np.abs(res.table("kalman", col) - res.table("learned_lambda", col)).max() < 1e-9

    def test_hub_selection(self):
        res = run_experiment(ExperimentConfig(synthetic=SMALL, observation_selection="hub", seed=3))
        assert len(res.observed_nodes) == 3

    def test_too_short(self):
        p = SyntheticParams(nodes_per_layer=4, edge_prob=0.8, steps=2)
        with pytest.raises(ValidationError, match="at least 2"):
            run_experiment(ExperimentConfig(synthetic=p, train_fraction=0.3))

    def test_write(self, tmp_path):
        res = run_experiment(ExperimentConfig(synthetic=SMALL, seed=1))
        errors, summary = res.write(tmp_path)
        assert errors.read_text().splitlines()[0] == "predictor,step,error_all,error_unobserved"
        data = json.loads(summary.read_text())
        assert set(data["means"]) == set(res.predictors)
        assert ExperimentConfig.from_dict(data["config"]).to_dict() == res.config.to_dict()


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ValidationError, match="bogus"):
            ExperimentConfig.from_dict({"bogus": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ValidationError, match=r"\$\.synthetic.*layers"):
            ExperimentConfig.from_dict({"synthetic": {"layers": 2}})

    @pytest.mark.parametrize("bad", [{"train_fraction": 1.0}, {"observation_fraction": -0.1}, {"predictors": ["oracle"]}])
    def test_invalid(self, bad):
        with pytest.raises(ValidationError):
            ExperimentConfig(**bad)


class TestReplications:
    def test_seeds_deterministic_and_distinct(self):
        s = replication_seeds(7, 5)
        assert s == replication_seeds(7, 5)
        assert len(set(s)) == 5

    def test_workers_do_not_change_results(self):
        cfg = ExperimentConfig(synthetic=SMALL, seed=11)
        a = run_replications(cfg, 3, workers=1)
        b = run_replications(cfg, 3, workers=2)
        assert [r.rows for r in a] == [r.rows for r in b]

    def test_pooling(self):
        rs = run_replications(ExperimentConfig(synthetic=SMALL, seed=12), 3)
        m = pooled_means(rs)
        assert m["kalman"]["error_all"] == pytest.approx(np.mean([r.means()["kalman"]["error_all"] for r in rs]))
        rows = mean_rows(rs)
        assert len(rows) == len(rs[0].rows)
        assert isinstance(ordering_holds(m), bool)

    def test_ordering_rule(self):
        m = {"kalman": 1, "learned_lambda": 2, "fixed_laplacian": 3, "persistence": 4}
        means = {k: {"error_all": v} for k, v in m.items()}
        assert ordering_holds(means)
        means["persistence"]["error_all"] = 2.5
        assert not ordering_holds(means)
