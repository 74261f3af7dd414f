"""Config parsing: defaults, key validation, constraint messages."""

import pytest

from protocurate.config import (
    EngineConfig,
    default_cluster_weights,
    parse_config,
)
from protocurate.errors import ConfigError


class TestDefaults:
    def test_empty_text_gives_paper_defaults(self):
        cfg = parse_config("")
        assert cfg.K == 6
        assert cfg.ema_alpha == 0.1
        assert cfg.superbatch_size == 640
        assert cfg.outlier_frac == 0.05
        assert cfg.keep_frac == 0.10
        assert cfg.per_cluster_budget == 10
        assert cfg.warmup_samples == 6400
        assert cfg.epsilon == 0.05
        assert cfg.learning_rate == 5e-5
        assert cfg.weight_decay == 1e-4
        assert cfg.epochs == 20
        assert cfg.tau_init == 0.01
        assert cfg.knn_k == 20
        assert cfg.density_quantile == 0.25
        assert cfg.rho == 0.9
        assert cfg.n_samples == 20000

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# a comment\n\nK = 4  # inline\n")
        assert cfg.K == 4

    def test_default_weights_long_tailed(self):
        w = default_cluster_weights(6)
        assert w == (0.70, 0.15, 0.07, 0.04, 0.025, 0.015)
        assert abs(sum(w) - 1.0) < 1e-12
        w4 = default_cluster_weights(4)
        assert len(w4) == 4
        assert abs(sum(w4) - 1.0) < 1e-12
        assert all(a > b for a, b in zip(w4, w4[1:]))


class TestParsing:
    def test_k4_accepted(self):
        assert parse_config("K = 4").K == 4

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key 'krnel'"):
            parse_config("krnel = 3")

    def test_type_mismatch_names_key(self):
        with pytest.raises(ConfigError, match="'K'"):
            parse_config("K = six")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("K = 4\nK = 5")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config("K 4")

    def test_cluster_weights_list(self):
        cfg = parse_config("clusters = 3\ncluster_weights = 0.5, 0.3, 0.2")
        assert cfg.cluster_weights == (0.5, 0.3, 0.2)

    def test_target_subset_size(self):
        assert parse_config("").target_subset_size is None
        assert parse_config("target_subset_size = 50").target_subset_size == 50


class TestConstraints:
    def test_fraction_sum_constraint(self):
        with pytest.raises(ConfigError, match="sum"):
            parse_config("keep_frac = 0.97")

    def test_keep_frac_bounds(self):
        with pytest.raises(ConfigError, match="keep_frac"):
            parse_config("keep_frac = 0")

    def test_k_lower_bound(self):
        with pytest.raises(ConfigError, match="'K'"):
            parse_config("K = 1")

    def test_warmup_at_least_k(self):
        with pytest.raises(ConfigError, match="warmup_samples"):
            parse_config("warmup_samples = 3")

    def test_ema_range(self):
        with pytest.raises(ConfigError, match="ema_alpha"):
            parse_config("ema_alpha = 1.5")

    def test_curation_space_values(self):
        assert parse_config("curation_space = image_only").curation_space == "image_only"
        with pytest.raises(ConfigError, match="curation_space"):
            parse_config("curation_space = both")

    def test_tau_range(self):
        with pytest.raises(ConfigError, match="tau_init"):
            parse_config("tau_init = 0.9")

    def test_weights_must_match_clusters(self):
        with pytest.raises(ConfigError, match="cluster_weights"):
            parse_config("cluster_weights = 0.5, 0.5")

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigError, match="sum to 1"):
            parse_config("clusters = 2\ncluster_weights = 0.9, 0.2")

    def test_rho_range(self):
        with pytest.raises(ConfigError, match="rho"):
            parse_config("rho = 1.2")

    def test_validation_runs_on_programmatic_config(self):
        from protocurate.config import validate_config
        from dataclasses import replace

        with pytest.raises(ConfigError, match="epsilon"):
            validate_config(replace(EngineConfig(), epsilon=0.0))
