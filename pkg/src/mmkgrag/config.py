"""Pipeline configuration: defaults, file loading, validation.

The config file is a flat TOML-style document, one ``key = value`` per
line with ``#`` comments.  Values use the literal forms shared by TOML
and JSON (double-quoted strings, integers, floats, ``true``/``false``,
inline string lists), which keeps the parser tiny and the format easy to
write by hand.  String values may interpolate environment variables with
``${NAME}`` so secrets stay out of checked-in files.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigInvalid

DEFAULT_TYPE_VOCABULARY = [
    "person",
    "organization",
    "location",
    "event",
    "concept",
    "visual_figure",
    "visual_table",
]

_ENV_REF = re.compile(r"\$\{(\w+)\}")


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline in one flat record.

    Retrieval depths, budgets, and staging defaults mirror the pipeline's
    documented operating point; ablation switches disable one stage each
    while leaving the rest untouched.
    """

    # backend selection
    backend: str = "mock"
    chat_endpoint: str = ""
    embed_endpoint: str = ""
    api_key_env: str = "MMKGRAG_API_KEY"
    extractor_model: str = ""
    generator_model: str = ""
    embedder_model: str = ""
    judge_model: str = ""
    judge_chat_endpoint: str = ""  # empty: share chat_endpoint
    embedding_dim: int = 64
    request_timeout: float = 120.0

    # mock backend
    mock_script: str = ""
    mock_mode: str = "echo"

    # retrieval and budgets
    k: int = 60
    m: int = 6
    refinement_top: int = 120
    refinement_budget_tokens: int = 32000
    context_budget_tokens: int = 8000
    refinement_rounds: int = 1
    keyword_query_mode: str = "per_keyword"

    # generation
    temperature: float = 0.0
    max_output_tokens: int = 2048

    # execution
    concurrency: int = 4
    max_retries: int = 2
    retry_base_delay: float = 0.5
    seed: int = 0

    # ablation switches
    text_only_graph: bool = False
    page_only_retrieval: bool = False
    single_pass: bool = False

    # extraction
    record_delimiter: str = "<|>"
    type_vocabulary: list[str] = field(default_factory=lambda: list(DEFAULT_TYPE_VOCABULARY))
    prompt_dir: str = ""

    def validate(self) -> None:
        """Raise ConfigInvalid naming the first field out of range."""
        def bad(name: str, why: str) -> ConfigInvalid:
            return ConfigInvalid(f"{name}: {why} (got {getattr(self, name)!r})")

        if self.backend not in ("mock", "http"):
            raise bad("backend", "must be 'mock' or 'http'")
        for name in ("k", "m", "refinement_top", "max_output_tokens", "concurrency"):
            if getattr(self, name) < 1:
                raise bad(name, "must be at least 1")
        for name in ("refinement_budget_tokens", "context_budget_tokens", "embedding_dim"):
            if getattr(self, name) < 1:
                raise bad(name, "must be at least 1")
        for name in ("refinement_rounds", "max_retries", "seed"):
            if getattr(self, name) < 0:
                raise bad(name, "must not be negative")
        if self.temperature < 0:
            raise bad("temperature", "must not be negative")
        if self.retry_base_delay < 0:
            raise bad("retry_base_delay", "must not be negative")
        if self.request_timeout <= 0:
            raise bad("request_timeout", "must be positive")
        if self.keyword_query_mode not in ("per_keyword", "joined"):
            raise bad("keyword_query_mode", "must be 'per_keyword' or 'joined'")
        if self.mock_mode not in ("echo", "strict"):
            raise bad("mock_mode", "must be 'echo' or 'strict'")
        if not self.record_delimiter or "\n" in self.record_delimiter:
            raise bad("record_delimiter", "must be non-empty without newlines")
        if not self.type_vocabulary or not all(
            isinstance(t, str) and t for t in self.type_vocabulary
        ):
            raise bad("type_vocabulary", "must be a non-empty list of non-empty strings")
        if self.backend == "http":
            for name in ("chat_endpoint", "embed_endpoint", "extractor_model",
                         "generator_model", "embedder_model"):
                if not getattr(self, name):
                    raise bad(name, "required when backend is 'http'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(name: str, value: object) -> object:
    """Check a parsed value against its field's type, coercing int -> float."""
    declared = _FIELD_TYPES[name]
    if declared == "float" and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    expected = {"str": str, "int": int, "float": float, "bool": bool,
                "list[str]": list}[declared]
    if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
        raise ConfigInvalid(f"{name}: expected {declared}, got {value!r}")
    if expected is list and not all(isinstance(v, str) for v in value):
        raise ConfigInvalid(f"{name}: expected a list of strings, got {value!r}")
    return value


def _interpolate(name: str, value: object) -> object:
    if not isinstance(value, str):
        return value

    def lookup(match: re.Match) -> str:
        var = match.group(1)
        if var not in os.environ:
            raise ConfigInvalid(f"{name}: environment variable {var} is not set")
        return os.environ[var]

    return _ENV_REF.sub(lookup, value)


def parse_config_text(text: str, where: str = "config") -> dict:
    """Parse a TOML-style key/value document into a plain dict."""
    values: dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigInvalid(f"{where}:{lineno}: expected 'key = value'")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if not re.fullmatch(r"\w+", key):
            raise ConfigInvalid(f"{where}:{lineno}: bad key {key!r}")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            raise ConfigInvalid(
                f"{where}:{lineno}: bad value for {key}: {raw_value!r}"
            ) from None
        if key in values:
            raise ConfigInvalid(f"{where}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def config_from_dict(values: dict, where: str = "config") -> PipelineConfig:
    """Apply parsed values over the defaults; reject unknown keys."""
    config = PipelineConfig()
    for key, value in values.items():
        if key not in _FIELD_TYPES:
            raise ConfigInvalid(f"{where}: unknown key {key!r}")
        setattr(config, key, _coerce(key, _interpolate(key, value)))
    config.validate()
    return config


def load_config(
    path: str | Path | None = None, overrides: dict | None = None
) -> PipelineConfig:
    """Build the effective config: defaults, then file, then overrides."""
    values: dict[str, object] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigInvalid(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    if overrides:
        values.update(overrides)
    return config_from_dict(values, str(path) if path else "config")


def dumps_config(config: PipelineConfig) -> str:
    """Render a config as the same TOML-style document load_config reads.

    ``parse_config_text(dumps_config(c))`` reproduces ``c`` exactly.
    """
    lines = [
        f"{f.name} = {json.dumps(getattr(config, f.name))}"
        for f in fields(PipelineConfig)
    ]
    return "\n".join(lines) + "\n"
