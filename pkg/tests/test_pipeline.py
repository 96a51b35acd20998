"""Two-stage training loop, baseline switches, and experiment orchestration."""

import dataclasses

import numpy as np
import pytest

from sitepool import data, metrics
from sitepool.data import SiteDataset, SplitSpec, SynthConfig, gen_synthetic
from sitepool.liegroup import ConfigError
from sitepool.pipeline import (TrainConfig, hyperparam_select, params_checksum,
                               run_baseline, run_experiment, run_training,
                               train_stage1, train_stage2)


def quick_config(**kwargs):
    base = dict(n=4, epochs_stage1=5, epochs_stage2=5, batch_size=64,
                lr=3e-3, kappa=1.0, seed=0)
    base.update(kwargs)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def train_split(tiny_splits):
    return tiny_splits[0]


class TestTrainConfig:
    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(lambda_mmd=-0.1)

    def test_bad_method_and_param_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(method="oracle")
        with pytest.raises(ConfigError):
            TrainConfig(param="pade")

    def test_bad_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs_stage1=0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)

    def test_for_method_ours_is_identity(self):
        cfg = quick_config()
        assert cfg.for_method() is cfg

    def test_for_method_naive_drops_both_terms(self):
        eff = quick_config(method="naive", lambda_eq=1.0, lambda_mmd=0.5).for_method()
        assert eff.lambda_eq == 0.0 and eff.lambda_mmd == 0.0

    def test_for_method_mmd_keeps_invariance_term(self):
        eff = quick_config(method="mmd", lambda_eq=1.0, lambda_mmd=0.5).for_method()
        assert eff.lambda_eq == 0.0 and eff.lambda_mmd == 0.5


class TestStage1:
    def test_reconstruction_decreases_without_equivariance_term(self, train_split):
        cfg = quick_config(method="naive", epochs_stage1=25)
        _, traces = train_stage1(train_split, cfg)
        rec = traces["stage1_recon"]
        assert rec[-1] < rec[0]
        assert all(np.isfinite(rec))

    def test_equivariance_term_decreases(self, train_split):
        cfg = quick_config(epochs_stage1=25)
        _, traces = train_stage1(train_split, cfg)
        assert traces["stage1_eq"][-1] < traces["stage1_eq"][0]

    def test_too_few_samples_rejected(self, train_split):
        with pytest.raises(ConfigError):
            train_stage1(train_split.subset(np.array([0])), quick_config())

    def test_early_stopping_truncates_trace(self, train_split):
        cfg = quick_config(epochs_stage1=50, early_stop_patience=3,
                           early_stop_tol=1e9)
        _, traces = train_stage1(train_split, cfg)
        assert 3 <= len(traces["stage1_eq"]) < 50

    def test_train_cap_limits_pairing_pool(self, train_split):
        cfg = quick_config(epochs_stage1=2, max_train_samples=40)
        bundle, traces = train_stage1(train_split, cfg)
        assert len(traces["stage1_eq"]) == 2  # runs to completion on the cap


class TestDeterminismAndFreezing:
    def test_same_seed_gives_bit_identical_parameters(self, train_split):
        a = run_training(train_split, quick_config())
        b = run_training(train_split, quick_config())
        assert params_checksum(a.bundle.all_params()) \
            == params_checksum(b.bundle.all_params())
        assert a.traces == b.traces

    def test_different_seed_differs(self, train_split):
        a = run_training(train_split, quick_config(seed=0))
        b = run_training(train_split, quick_config(seed=1))
        assert params_checksum(a.bundle.all_params()) \
            != params_checksum(b.bundle.all_params())

    def test_stage_two_never_touches_stage_one_parameters(self, train_split):
        cfg = quick_config()
        bundle, _ = train_stage1(train_split, cfg)
        frozen = params_checksum(bundle.encoder.params + bundle.decoder.params
                                 + bundle.tau_net.params)
        train_stage2(train_split, bundle, cfg)
        after = params_checksum(bundle.encoder.params + bundle.decoder.params
                                + bundle.tau_net.params)
        assert frozen == after

    def test_finetune_request_is_reported_not_honored(self, train_split):
        cfg = quick_config(finetune_stage1=True)
        run = run_training(train_split, cfg)
        assert any("finetune" in w for w in run.warnings)

    def test_checksum_is_order_insensitive_but_value_sensitive(self):
        import sitepool.autodiff as ad
        p1 = ad.Parameter(np.arange(3.0), "a")
        p2 = ad.Parameter(np.ones(2), "b")
        before = params_checksum([p1, p2])
        assert before == params_checksum([p2, p1])
        p2.value[0] = 2.0
        assert params_checksum([p1, p2]) != before


class TestInvariancePenalty:
    def test_stronger_penalty_shrinks_site_discrepancy(self, tiny_splits):
        train, _, test = tiny_splits
        base = quick_config(epochs_stage1=30, epochs_stage2=60)
        values = {}
        for lam in (0.0, 1.0):
            run = run_training(train, dataclasses.replace(base, lambda_mmd=lam))
            codes = metrics.codes_for(test, run.bundle)
            by_site = [codes[test.site == s] for s in np.unique(test.site)]
            values[lam] = metrics.mmd_test_metric(by_site)["raw"]
        assert values[1.0] < values[0.0]

    def test_single_bin_stratification_equals_plain_penalty(self, train_split):
        cfg_ss = quick_config(method="ss", ss_bins=1, epochs_stage2=10)
        cfg_mmd = quick_config(method="mmd", epochs_stage2=10)
        a = run_training(train_split, cfg_ss)
        b = run_training(train_split, cfg_mmd)
        assert a.traces == b.traces
        assert params_checksum(a.bundle.all_params()) \
            == params_checksum(b.bundle.all_params())

    def test_matching_with_no_cross_site_cells_warns_and_matches_naive(
            self, tiny_synth):
        _, dataset, _ = tiny_synth
        # Tie the label to the site so every (label, bin) cell is single-site.
        confounded = SiteDataset(dataset.features, dataset.site.astype(np.int64),
                                 dataset.covariate, dataset.covariate_raw,
                                 dataset.site, dataset.ids)
        rm = run_training(confounded, quick_config(method="rm", ss_bins=1))
        naive = run_training(confounded, quick_config(method="naive"))
        assert any(w.startswith("rm:") for w in rm.warnings)
        assert rm.traces == naive.traces


class TestRunners:
    def test_run_baseline_rejects_primary_method(self, train_split):
        with pytest.raises(ConfigError):
            run_baseline(train_split, quick_config(method="ours"))

    def test_run_baseline_accepts_naive(self, train_split):
        run = run_baseline(train_split, quick_config(method="naive",
                                                     epochs_stage1=2,
                                                     epochs_stage2=2))
        assert run.config.method == "naive"

    def test_run_experiment_is_reproducible(self, tiny_splits):
        train, _, test = tiny_splits
        cfg = quick_config(epochs_stage1=3, epochs_stage2=3)
        a = run_experiment(train, test, cfg, seeds=[0])
        b = run_experiment(train, test, cfg, seeds=[0])
        assert a["aggregate"] == b["aggregate"]
        assert a["runs"][0].metrics == b["runs"][0].metrics

    def test_run_experiment_needs_seeds(self, tiny_splits):
        train, _, test = tiny_splits
        with pytest.raises(ConfigError):
            run_experiment(train, test, quick_config(), seeds=[])

    def test_trace_rows_enumerate_epochs(self, train_split):
        run = run_training(train_split, quick_config(epochs_stage1=3,
                                                     epochs_stage2=2))
        rows = run.trace_rows()
        terms = {t for _, t, _ in rows}
        assert terms == {"stage1_eq", "stage1_recon", "stage2_recon",
                         "stage2_pred", "stage2_inv"}
        eq_epochs = [e for e, t, _ in rows if t == "stage1_eq"]
        assert eq_epochs == list(range(3))


class TestSeparablePrediction:
    def test_head_solves_a_separable_task(self):
        cfg = SynthConfig(n_samples=600, n=4, feature_dim=12, kappa=0.3,
                          n_sites=2, site_bias=0.0, noise_sigma=0.0,
                          label_margin=0.3, label_flip_prob=0.0,
                          base_dispersion=0.5, seed=1)
        dataset, _ = gen_synthetic(cfg)
        train, _, test = data.split_site_dataset(dataset, SplitSpec(seed=0))
        tc = TrainConfig(n=4, epochs_stage1=100, epochs_stage2=500,
                         batch_size=64, seed=0, lr=3e-3, kappa=0.3,
                         lambda_mmd=0.0, early_stop_patience=80)
        run = run_training(train, tc)
        assert metrics.acc_metric(test, run.bundle) > 0.95


class TestHyperparamSelect:
    @staticmethod
    def cand(acc, mmd, adv, tag):
        return {"config": {"tag": tag}, "acc": acc, "mmd": mmd, "adv": adv}

    def test_single_candidate_is_returned(self):
        c = self.cand(80.0, 1.0, 0.6, "only")
        assert hyperparam_select([c]) is c

    def test_lowest_discrepancy_inside_window_wins(self):
        a = self.cand(84.0, 9.8, 0.6, "a")
        b = self.cand(83.0, 3.1, 0.6, "b")
        assert hyperparam_select([a, b]) is b

    def test_candidates_far_below_best_are_excluded(self):
        a = self.cand(84.0, 9.8, 0.6, "a")
        low = self.cand(77.0, 0.1, 0.1, "low")  # 7 points below best
        assert hyperparam_select([a, low]) is a

    def test_tie_broken_by_adversary_then_config_order(self):
        a = self.cand(84.0, 3.0, 0.7, "a")
        b = self.cand(84.0, 3.0, 0.5, "b")
        assert hyperparam_select([a, b]) is b
        c = self.cand(84.0, 3.0, 0.5, "aaa")
        d = self.cand(84.0, 3.0, 0.5, "zzz")
        assert hyperparam_select([c, d]) is c

    def test_empty_candidates_rejected(self):
        with pytest.raises(ConfigError):
            hyperparam_select([])
