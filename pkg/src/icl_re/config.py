"""Experiment configuration: TOML file plus command-line overrides.

Secrets never live in config files. Provider sections name the environment
variable holding the API key (api_key_env); a config containing a literal
api_key anywhere is rejected outright.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

RETRIEVERS = ("knn", "epr", "none")
SCORING_MODES = ("sum", "per_token")
DEMO_ORDERS = ("most_similar_last", "most_similar_first")
CORPUS_FORMATS = ("canonical", "refind_native")
MOCK_COMPLETIONS = ("scripted", "gold_leak", "majority")


class ConfigError(ValueError):
    """Invalid configuration file or override."""


@dataclass
class DataConfig:
    train_path: str = ""
    test_path: str = ""
    format: str = "canonical"
    field_map: dict[str, str] = field(default_factory=dict)
    inclusive_ends: bool | None = None
    schema_path: str = ""


@dataclass
class RetryConfig:
    max_attempts: int = 3
    base_delay: float = 0.5


@dataclass
class ProviderSettings:
    base_url: str = ""
    model_name: str = "mock"
    api_key_env: str = ""
    max_parallel: int = 4
    cache_dir: str = ""
    timeout: float = 60.0
    max_tokens: int = 16
    retry: RetryConfig = field(default_factory=RetryConfig)


@dataclass
class ProvidersConfig:
    embedding: ProviderSettings = field(default_factory=ProviderSettings)
    completion: ProviderSettings = field(default_factory=ProviderSettings)
    scoring: ProviderSettings = field(default_factory=ProviderSettings)


@dataclass
class PromptConfig:
    template_path: str = ""
    task_description: str = ""
    order: str = "most_similar_last"
    token_budget: int = 0
    dump_prompts: bool = False


@dataclass
class EprConfig:
    candidates: int = 50
    positives: int = 3
    negatives: int = 10
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32
    temperature: float = 0.1
    in_batch_negatives: bool = False
    max_anchors: int = 0


@dataclass
class MockConfig:
    enabled: bool = False
    embedding_dim: int = 256
    embedding_seed: int = 0
    completion_behavior: str = "gold_leak"
    completion_default: str = "no relation"
    responses: dict[str, str] = field(default_factory=dict)


@dataclass
class ExperimentSettings:
    retriever: str = "knn"
    k_retrieved: int = 5
    r_per_class: int = 4
    seed: int = 7
    restrict_to_type_pair: bool = True
    scoring_mode: str = "sum"
    output_dir: str = "out"
    failure_abort_fraction: float = 0.05
    allow_zero_shot: bool = False


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    providers: ProvidersConfig = field(default_factory=ProvidersConfig)
    epr: EprConfig = field(default_factory=EprConfig)
    mock: MockConfig = field(default_factory=MockConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def validate(self) -> None:
        exp = self.experiment
        if exp.retriever not in RETRIEVERS:
            raise ConfigError(
                f"experiment.retriever must be one of {RETRIEVERS}, got "
                f"{exp.retriever!r}"
            )
        if exp.scoring_mode not in SCORING_MODES:
            raise ConfigError(
                f"experiment.scoring_mode must be one of {SCORING_MODES}"
            )
        if self.prompt.order not in DEMO_ORDERS:
            raise ConfigError(f"prompt.order must be one of {DEMO_ORDERS}")
        if self.data.format not in CORPUS_FORMATS:
            raise ConfigError(f"data.format must be one of {CORPUS_FORMATS}")
        if self.mock.completion_behavior not in MOCK_COMPLETIONS:
            raise ConfigError(
                f"mock.completion_behavior must be one of {MOCK_COMPLETIONS}"
            )
        if exp.k_retrieved < 0 or exp.r_per_class < 0:
            raise ConfigError("k_retrieved and r_per_class must be >= 0")
        effective_k = exp.k_retrieved if exp.retriever != "none" else 0
        if effective_k + exp.r_per_class == 0 and not exp.allow_zero_shot:
            raise ConfigError(
                "the prompt would contain no demonstrations "
                "(k_retrieved + r_per_class is 0); set "
                "experiment.allow_zero_shot = true to run zero-shot on purpose"
            )
        if not 0.0 <= exp.failure_abort_fraction <= 1.0:
            raise ConfigError("experiment.failure_abort_fraction must be in [0, 1]")
        if self.epr.positives < 1 or self.epr.negatives < 1:
            raise ConfigError("epr.positives and epr.negatives must be >= 1")
        if self.epr.candidates < self.epr.positives + self.epr.negatives:
            raise ConfigError(
                "epr.candidates must be at least epr.positives + epr.negatives"
            )


def _reject_secrets(raw: Any, path: str = "") -> None:
    if isinstance(raw, dict):
        for key, value in raw.items():
            where = f"{path}.{key}" if path else key
            if key == "api_key":
                raise ConfigError(
                    f"config contains a literal API key at {where!r}; put the key "
                    f"in an environment variable and name it via api_key_env"
                )
            _reject_secrets(value, where)
    elif isinstance(raw, list):
        for i, value in enumerate(raw):
            _reject_secrets(value, f"{path}[{i}]")


def _merge_into(instance: Any, raw: dict, path: str) -> None:
    known = {f.name: f for f in fields(instance)}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key {where!r}")
        current = getattr(instance, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            _merge_into(current, value, where)
            continue
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where!r} must be a boolean")
        elif isinstance(current, int) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where!r} must be an integer")
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where!r} must be a number")
            value = float(value)
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where!r} must be a string")
        elif isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
        elif current is None:
            if not isinstance(value, bool):
                raise ConfigError(f"{where!r} must be a boolean")
        setattr(instance, key, value)


_OVERRIDE_BOOLEANS = {"true": True, "false": False}


def _coerce_override(current: Any, text: str, where: str) -> Any:
    if isinstance(current, bool) or current is None:
        lowered = text.lower()
        if lowered not in _OVERRIDE_BOOLEANS:
            raise ConfigError(f"override {where!r} expects true or false, got {text!r}")
        return _OVERRIDE_BOOLEANS[lowered]
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"override {where!r} expects an integer") from exc
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"override {where!r} expects a number") from exc
    if isinstance(current, str):
        return text
    raise ConfigError(f"override {where!r} targets an unsupported value type")


def apply_override(config: ExperimentConfig, assignment: str) -> None:
    """Apply one KEY=VALUE override with a dotted key path."""
    if "=" not in assignment:
        raise ConfigError(
            f"override {assignment!r} must look like section.key=value"
        )
    dotted, text = assignment.split("=", 1)
    dotted = dotted.strip()
    if not dotted:
        raise ConfigError(f"override {assignment!r} has an empty key")
    if dotted.split(".")[-1] == "api_key":
        raise ConfigError(
            "overrides cannot set api_key; use api_key_env and the environment"
        )
    parts = dotted.split(".")
    target: Any = config
    for part in parts[:-1]:
        if not is_dataclass(target) or part not in {f.name for f in fields(target)}:
            raise ConfigError(f"override references unknown key {dotted!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not is_dataclass(target) or leaf not in {f.name for f in fields(target)}:
        raise ConfigError(f"override references unknown key {dotted!r}")
    current = getattr(target, leaf)
    if is_dataclass(current) or isinstance(current, dict):
        raise ConfigError(f"override {dotted!r} targets a table, not a value")
    setattr(target, leaf, _coerce_override(current, text.strip(), dotted))


def load_config(
    path: str | Path | None,
    overrides: list[str] | None = None,
) -> ExperimentConfig:
    """Load a TOML config and apply overrides. A None path starts from defaults."""
    config = ExperimentConfig()
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
        _reject_secrets(raw)
        _merge_into(config, raw, "")
    for assignment in overrides or []:
        apply_override(config, assignment)
    config.validate()
    return config
