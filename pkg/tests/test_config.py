import pytest

from icl_re.config import (
    ConfigError,
    ExperimentConfig,
    apply_override,
    load_config,
)


def write_toml(tmp_path, text):
    path = tmp_path / "exp.toml"
    path.write_text(text, encoding="utf-8")
    return path


class TestLoading:
    def test_defaults_without_file(self):
        config = load_config(None)
        assert config.experiment.retriever == "knn"
        assert config.experiment.k_retrieved == 5
        assert config.experiment.r_per_class == 4
        assert config.epr.lr == 0.05
        assert config.data.inclusive_ends is None

    def test_file_merges_into_defaults(self, tmp_path):
        path = write_toml(
            tmp_path,
            """
            [data]
            train_path = "train.jsonl"
            inclusive_ends = true

            [experiment]
            retriever = "epr"
            seed = 99

            [providers.embedding]
            base_url = "https://emb.example/v1"
            api_key_env = "EMB_KEY"

            [epr]
            lr = 0.1
            """,
        )
        config = load_config(path)
        assert config.data.train_path == "train.jsonl"
        assert config.data.inclusive_ends is True
        assert config.experiment.retriever == "epr"
        assert config.experiment.seed == 99
        assert config.providers.embedding.base_url == "https://emb.example/v1"
        assert config.providers.embedding.api_key_env == "EMB_KEY"
        # untouched sections keep defaults
        assert config.providers.completion.max_parallel == 4
        assert config.epr.lr == 0.1
        assert config.epr.epochs == 30

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.toml")

    def test_invalid_toml(self, tmp_path):
        path = write_toml(tmp_path, "[experiment\nseed = 1")
        with pytest.raises(ConfigError, match="invalid TOML"):
            load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = write_toml(tmp_path, "[experiment]\nretreiver = \"knn\"")
        with pytest.raises(ConfigError, match="experiment.retreiver"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = write_toml(tmp_path, "[providers.reranker]\nbase_url = \"x\"")
        with pytest.raises(ConfigError, match="providers.reranker"):
            load_config(path)

    def test_type_mismatch_rejected(self, tmp_path):
        path = write_toml(tmp_path, "[experiment]\nseed = \"seven\"")
        with pytest.raises(ConfigError, match="integer"):
            load_config(path)

    def test_bool_not_accepted_as_int(self, tmp_path):
        path = write_toml(tmp_path, "[experiment]\nseed = true")
        with pytest.raises(ConfigError, match="integer"):
            load_config(path)

    def test_int_promotes_to_float_field(self, tmp_path):
        path = write_toml(tmp_path, "[epr]\nlr = 1")
        config = load_config(path)
        assert config.epr.lr == 1.0
        assert isinstance(config.epr.lr, float)

    def test_retry_subtable(self, tmp_path):
        path = write_toml(
            tmp_path,
            "[providers.completion.retry]\nmax_attempts = 6\nbase_delay = 0.25",
        )
        config = load_config(path)
        assert config.providers.completion.retry.max_attempts == 6
        assert config.providers.completion.retry.base_delay == 0.25
        assert config.providers.embedding.retry.max_attempts == 3


class TestSecretRejection:
    def test_api_key_in_provider_section(self, tmp_path):
        path = write_toml(
            tmp_path, "[providers.completion]\napi_key = \"sk-oops\""
        )
        with pytest.raises(ConfigError, match="api_key_env"):
            load_config(path)

    def test_api_key_at_top_level(self, tmp_path):
        path = write_toml(tmp_path, "api_key = \"sk-oops\"")
        with pytest.raises(ConfigError, match="environment variable"):
            load_config(path)

    def test_api_key_deeply_nested(self, tmp_path):
        path = write_toml(tmp_path, "[mock.responses]\napi_key = \"sk-oops\"")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_override_cannot_set_api_key(self):
        config = ExperimentConfig()
        with pytest.raises(ConfigError, match="api_key_env"):
            apply_override(config, "providers.completion.api_key=sk-oops")

    def test_api_key_env_is_fine(self, tmp_path):
        path = write_toml(
            tmp_path, "[providers.completion]\napi_key_env = \"MY_KEY\""
        )
        config = load_config(path)
        assert config.providers.completion.api_key_env == "MY_KEY"


class TestOverrides:
    def test_int_float_bool_string(self):
        config = load_config(
            None,
            overrides=[
                "experiment.seed=42",
                "epr.lr=0.2",
                "experiment.restrict_to_type_pair=false",
                "experiment.output_dir=elsewhere",
            ],
        )
        assert config.experiment.seed == 42
        assert config.epr.lr == 0.2
        assert config.experiment.restrict_to_type_pair is False
        assert config.experiment.output_dir == "elsewhere"

    def test_override_wins_over_file(self, tmp_path):
        path = write_toml(tmp_path, "[experiment]\nseed = 1")
        config = load_config(path, overrides=["experiment.seed=2"])
        assert config.experiment.seed == 2

    def test_nested_retry_override(self):
        config = load_config(
            None, overrides=["providers.scoring.retry.max_attempts=9"]
        )
        assert config.providers.scoring.retry.max_attempts == 9

    def test_optional_bool_override(self):
        config = load_config(None, overrides=["data.inclusive_ends=true"])
        assert config.data.inclusive_ends is True

    def test_value_with_equals_sign(self):
        config = load_config(
            None, overrides=["prompt.task_description=a = b"]
        )
        assert config.prompt.task_description == "a = b"

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="section.key=value"):
            load_config(None, overrides=["experiment.seed"])

    def test_unknown_path(self):
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(None, overrides=["experiment.sede=3"])

    def test_table_target_rejected(self):
        with pytest.raises(ConfigError, match="table"):
            load_config(None, overrides=["providers.embedding=x"])

    def test_bad_int(self):
        with pytest.raises(ConfigError, match="integer"):
            load_config(None, overrides=["experiment.seed=seven"])

    def test_bad_bool(self):
        with pytest.raises(ConfigError, match="true or false"):
            load_config(None, overrides=["mock.enabled=yes"])


class TestValidation:
    def test_bad_retriever(self):
        with pytest.raises(ConfigError, match="retriever"):
            load_config(None, overrides=["experiment.retriever=bm25"])

    def test_bad_order(self):
        with pytest.raises(ConfigError, match="prompt.order"):
            load_config(None, overrides=["prompt.order=shuffled"])

    def test_zero_demos_rejected(self):
        with pytest.raises(ConfigError, match="zero_shot"):
            load_config(
                None,
                overrides=["experiment.k_retrieved=0", "experiment.r_per_class=0"],
            )

    def test_zero_demos_allowed_when_opted_in(self):
        config = load_config(
            None,
            overrides=[
                "experiment.k_retrieved=0",
                "experiment.r_per_class=0",
                "experiment.allow_zero_shot=true",
            ],
        )
        assert config.experiment.allow_zero_shot is True

    def test_retriever_none_needs_random_demos(self):
        with pytest.raises(ConfigError, match="zero_shot"):
            load_config(
                None,
                overrides=[
                    "experiment.retriever=none",
                    "experiment.r_per_class=0",
                ],
            )

    def test_retriever_none_with_random_demos_ok(self):
        config = load_config(
            None,
            overrides=["experiment.retriever=none", "experiment.k_retrieved=0"],
        )
        assert config.experiment.retriever == "none"

    def test_negative_k_rejected(self):
        with pytest.raises(ConfigError, match=">= 0"):
            load_config(None, overrides=["experiment.k_retrieved=-1"])

    def test_failure_fraction_bounds(self):
        with pytest.raises(ConfigError, match="failure_abort_fraction"):
            load_config(None, overrides=["experiment.failure_abort_fraction=1.5"])

    def test_epr_candidate_arithmetic(self):
        with pytest.raises(ConfigError, match="candidates"):
            load_config(
                None,
                overrides=["epr.candidates=10", "epr.positives=8", "epr.negatives=8"],
            )


class TestDigest:
    def test_shape(self):
        digest = ExperimentConfig().digest()
        assert len(digest) == 12
        int(digest, 16)

    def test_stable_across_instances(self):
        assert ExperimentConfig().digest() == ExperimentConfig().digest()

    def test_sensitive_to_values(self):
        base = load_config(None)
        changed = load_config(None, overrides=["experiment.seed=8"])
        assert base.digest() != changed.digest()

    def test_round_trips_through_dict(self):
        config = load_config(None, overrides=["experiment.seed=123"])
        assert config.to_dict()["experiment"]["seed"] == 123
