import json
import math

import numpy as np
import pytest

from dualrec.harness import (
    ExperimentConfig,
    SplitSpec,
    SyntheticSpec,
    gen_synthetic,
    run_experiment,
    split,
    sweep_train_sizes,
)
from dualrec.mf_model import MfHyperparams, factor_predict, train_mf

from conftest import random_store


class TestSplitSpec:
    def test_bad_fractions_rejected(self):
        with pytest.raises(ValueError):
            SplitSpec(0.5, 0.2, 0.2)
        with pytest.raises(ValueError):
            SplitSpec(1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            SplitSpec(folds=0)


class TestSplit:
    def make_store(self, n_pairs=100):
        rng = np.random.default_rng(1)
        store = random_store(rng, 20, 20, density=0.5, with_reliability=True)
        while len(store.omega) < n_pairs:
            store = random_store(rng, 25, 25, density=0.5, with_reliability=True)
        pairs = sorted(store.omega)[:n_pairs]
        from dualrec.ingest import restrict

        return restrict(store, pairs)

    def test_sizes_70_15_15(self):
        store = self.make_store(100)
        train, val, test = split(store, SplitSpec(0.7, 0.15, 0.15, seed=3))[0]
        assert (len(train.omega), len(val.omega), len(test.omega)) == (70, 15, 15)

    def test_deterministic(self):
        store = self.make_store(60)
        spec = SplitSpec(0.7, 0.15, 0.15, seed=9)
        a = split(store, spec)[0]
        b = split(store, spec)[0]
        assert sorted(a[0].omega) == sorted(b[0].omega)
        assert sorted(a[2].omega) == sorted(b[2].omega)

    def test_partition_property(self):
        store = self.make_store(87)
        for fold in split(store, SplitSpec(0.6, 0.2, 0.2, folds=3, seed=5)):
            train, val, test = fold
            tr, va, te = set(train.omega), set(val.omega), set(test.omega)
            assert not (tr & va) and not (tr & te) and not (va & te)
            assert tr | va | te == set(store.omega)

    def test_folds_re_randomize(self):
        store = self.make_store(80)
        folds = split(store, SplitSpec(0.7, 0.15, 0.15, folds=2, seed=0))
        assert sorted(folds[0][0].omega) != sorted(folds[1][0].omega)

    def test_insufficient_data_rejected(self):
        rng = np.random.default_rng(2)
        store = random_store(rng, 2, 2, density=1.0)
        with pytest.raises(ValueError):
            split(store, SplitSpec(0.9, 0.05, 0.05))

    def test_reliability_follows_pairs(self):
        store = self.make_store(60)
        train, _, _ = split(store, SplitSpec(0.7, 0.15, 0.15, seed=1))[0]
        assert set(train.psi) == set(train.omega) & set(store.psi)


class TestSynthetic:
    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(5, 5, 6, 0.5, 0.0, seed=0)
        with pytest.raises(ValueError):
            SyntheticSpec(5, 5, 2, 0.0, 0.0, seed=0)

    def test_deterministic(self):
        spec = SyntheticSpec(12, 10, 2, 0.5, 0.1, seed=4)
        a = gen_synthetic(spec).store
        b = gen_synthetic(spec).store
        assert a.raw_ratings == b.raw_ratings
        assert a.reliability == b.reliability

    def test_density_within_binomial_spread(self):
        n, m, density = 50, 40, 0.01
        spec = SyntheticSpec(n, m, 2, density, 0.0, seed=8)
        observed = len(gen_synthetic(spec).store.omega)
        expected = n * m * density
        spread = math.sqrt(n * m * density * (1 - density))
        assert abs(observed - expected) <= 3 * spread

    def test_quantized_ratings_are_whole_stars(self):
        store = gen_synthetic(SyntheticSpec(10, 10, 2, 0.5, 0.1, seed=2)).store
        assert all(v == int(v) and 1 <= v <= 5 for v in store.raw_ratings.values())

    def test_continuous_ratings_stay_in_range(self):
        store = gen_synthetic(SyntheticSpec(10, 10, 2, 0.5, 0.1, seed=2, quantize=False)).store
        assert all(1.0 <= v <= 5.0 for v in store.raw_ratings.values())

    def test_reliability_in_open_unit_interval(self):
        store = gen_synthetic(SyntheticSpec(10, 10, 2, 0.5, 0.0, seed=3)).store
        assert set(store.psi) == set(store.omega)
        assert all(0.0 < v < 1.0 for v in store.reliability.values())

    def test_recoverability_oracle(self):
        # noiseless, fully observed, continuous ratings: a matching-rank
        # factor model must reproduce the training data almost exactly
        data = gen_synthetic(SyntheticSpec(50, 40, 2, 1.0, 0.0, seed=3, quantize=False))
        store = data.store
        hyper = MfHyperparams(latent_dim=2, predictive_dim=4, reg_lambda=0.0,
                              batch_size=512, epochs=200, lr=0.05, seed=0, patience=0)
        params = train_mf(store, hyper)
        pairs = sorted(store.omega)
        idx_u = np.array([p[0] for p in pairs])
        idx_p = np.array([p[1] for p in pairs])
        preds = factor_predict(params, idx_u, idx_p, branch="rating")
        truth = np.array([store.raw_ratings[p] for p in pairs])
        assert float(np.sqrt(np.mean((preds - truth) ** 2))) < 0.05


def tiny_config(**overrides) -> ExperimentConfig:
    base = dict(
        synthetic=SyntheticSpec(14, 12, 2, 0.6, 0.05, seed=5),
        split=SplitSpec(0.7, 0.15, 0.15, folds=1, seed=0),
        latent_dim=2,
        tower=(4, 2),
        reg_lambda=0.01,
        batch_size=32,
        epochs_mf=2,
        epochs_mlp=2,
        epochs_fusion=2,
        lr=0.01,
        seed=0,
        patience=0,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestRunExperiment:
    def test_single_fold_mean_equals_fold(self):
        result = run_experiment(tiny_config())
        assert len(result.folds) == 1
        fold = result.folds[0].report
        mean = result.mean_report
        assert mean.rmse == fold.rmse
        assert mean.ndcg == fold.ndcg

    def test_mean_is_arithmetic_mean(self):
        result = run_experiment(tiny_config(split=SplitSpec(0.7, 0.15, 0.15, folds=3, seed=2)))
        reports = [f.report for f in result.folds]
        for field in ("rmse", "mae", "precision", "recall", "ndcg", "mean_ap"):
            direct = sum(getattr(r, field) for r in reports) / len(reports)
            assert math.isclose(getattr(result.mean_report, field), direct, abs_tol=1e-12)

    def test_deterministic_under_seed(self):
        a = run_experiment(tiny_config())
        b = run_experiment(tiny_config())
        assert a.mean_report == b.mean_report

    def test_phase_timings_recorded(self):
        result = run_experiment(tiny_config())
        timings = result.folds[0].phase_seconds
        assert set(timings) == {"pretrain_mf", "pretrain_mlp", "fusion", "evaluate"}
        assert all(v >= 0 for v in timings.values())
        phases = {entry[0] for entry in result.folds[0].epoch_log}
        assert "fusion" in phases and "mlp" in phases and "mf-rating" in phases

    def test_no_pretrain_mode(self):
        result = run_experiment(tiny_config(pretrain=False))
        assert result.folds[0].phase_seconds["pretrain_mf"] == 0.0
        assert result.mean_report.n_pairs > 0


class TestSweep:
    def test_remainder_splits_evenly(self):
        results = sweep_train_sizes(tiny_config(), [0.4, 0.6])
        assert set(results) == {0.4, 0.6}
        for result in results.values():
            assert result.mean_report.n_pairs > 0


class TestConfigParsing:
    def test_from_json_round_trip(self, tmp_path):
        doc = {
            "data": {"synthetic": {
                "n_users": 10, "n_products": 10, "true_rank": 2,
                "observation_density": 0.5, "noise_std": 0.0, "seed": 1,
            }},
            "split": {"train_frac": 0.6, "val_frac": 0.2, "test_frac": 0.2,
                      "folds": 2, "seed": 7},
            "model": {"latent_dim": 3, "tower": [6, 3], "epochs_mf": 1,
                      "epochs_mlp": 1, "epochs_fusion": 1, "gamma": 0.25},
            "eval": {"cutoffs": [3, 7], "threshold": 4},
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        config = ExperimentConfig.from_json(path)
        assert config.synthetic.n_users == 10
        assert config.split.folds == 2
        assert config.tower == (6, 3)
        assert config.gamma == 0.25
        assert config.cutoffs == (3, 7)
        assert config.relevance_threshold == 4

    def test_config_requires_data_source(self):
        config = ExperimentConfig(store_path=None, synthetic=None)
        with pytest.raises(ValueError):
            run_experiment(config)
