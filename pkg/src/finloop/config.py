"""Run configuration: a TOML document with per-role backend sections.

Credentials never live in the file; each HTTP backend names an environment
variable instead. A single ``[backends.default]`` section covers every
role unless a role-specific section (``[backends.solver]``, ...) overrides
it.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .provider import Role

REGIMES = ("Short", "Long")
BACKEND_KINDS = ("mock", "http")
REWORD_MODES = ("off", "synonyms", "llm")
SUMMARY_MODES = ("local", "llm")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    script: str | None = None  # mock rule table (JSON)
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "FINLOOP_API_KEY"
    max_attempts: int = 5
    timeout: float = 60.0

    def validate(self, name: str) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backends.{name}: unknown kind {self.kind!r}")
        if self.kind == "mock" and not self.script:
            raise ConfigError(f"backends.{name}: mock backend needs a script path")
        if self.kind == "http" and (not self.endpoint or not self.model):
            raise ConfigError(f"backends.{name}: http backend needs endpoint and model")
        if self.max_attempts < 1:
            raise ConfigError(f"backends.{name}: max_attempts must be >= 1")


@dataclass(frozen=True)
class BudgetConfig:
    max_examples: int = 15        # synthetic examples to accumulate
    max_refinements: int = 15     # accepted prompt revisions
    inner_cap: int = 4            # revise attempts per error slice
    max_regenerations: int = 5    # generation attempts per example
    token_ceiling: int = 5_000_000

    def validate(self) -> None:
        if self.max_examples < 0:
            raise ConfigError("budgets.max_examples must be >= 0")
        for name in ("max_refinements", "inner_cap", "max_regenerations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"budgets.{name} must be >= 1")
        if self.token_ceiling < 0:
            raise ConfigError("budgets.token_ceiling must be >= 0")


@dataclass(frozen=True)
class ToleranceConfig:
    rel_tol: float = 0.01
    abs_tol: float = 1e-6
    kl_threshold: float = 1.0

    def validate(self) -> None:
        if self.rel_tol < 0 or self.abs_tol < 0:
            raise ConfigError("tolerances must be >= 0")
        if self.kl_threshold <= 0:
            raise ConfigError("tolerances.kl_threshold must be positive")


@dataclass(frozen=True)
class GeneratorSection:
    c_max: int = 15
    summary_mode: str = "local"
    lambda_weight: float = 0.0

    def validate(self) -> None:
        if self.c_max < 1:
            raise ConfigError("generator.c_max must be >= 1")
        if self.summary_mode not in SUMMARY_MODES:
            raise ConfigError(f"generator.summary_mode must be one of {SUMMARY_MODES}")
        if self.lambda_weight < 0:
            raise ConfigError("generator.lambda_weight must be >= 0")


@dataclass(frozen=True)
class VerifierSection:
    perturbations: int = 2
    reword: str = "off"
    allow_llm_numerical: bool = False

    def validate(self) -> None:
        if self.perturbations < 0:
            raise ConfigError("verifier.perturbations must be >= 0")
        if self.reword not in REWORD_MODES:
            raise ConfigError(f"verifier.reword must be one of {REWORD_MODES}")


@dataclass(frozen=True)
class RunConfig:
    regime: str = "Short"
    rng_seed: int = 0
    ledger_path: str = "runs/run.jsonl"
    seed_prompt: str = "base"  # preset name or file path
    prompt_length_cap: int = 20_000
    concurrency: int = 4
    dataset_paths: dict[str, str] = field(default_factory=dict)
    backends: dict[str, BackendConfig] = field(default_factory=dict)
    budgets: BudgetConfig = BudgetConfig()
    tolerances: ToleranceConfig = ToleranceConfig()
    generator: GeneratorSection = GeneratorSection()
    verifier: VerifierSection = VerifierSection()

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.prompt_length_cap < 1:
            raise ConfigError("prompt_length_cap must be >= 1")
        if not self.backends:
            raise ConfigError("at least one [backends.*] section is required")
        valid_roles = {"default"} | {r.value for r in Role}
        for name, backend in self.backends.items():
            if name not in valid_roles:
                raise ConfigError(f"backends.{name}: unknown role")
            backend.validate(name)
        self.budgets.validate()
        self.tolerances.validate()
        self.generator.validate()
        self.verifier.validate()

    def backend_for(self, role: str) -> BackendConfig:
        backend = self.backends.get(role) or self.backends.get("default")
        if backend is None:
            raise ConfigError(f"no backend configured for role {role!r}")
        return backend

    def all_mock(self) -> bool:
        return all(b.kind == "mock" for b in self.backends.values())

    def validate_paths(self) -> None:
        """Existence checks for every path the run will open."""
        for subset, path in self.dataset_paths.items():
            if not Path(path).is_file():
                raise ConfigError(f"datasets.{subset}: no such file: {path}")
        for name, backend in self.backends.items():
            if backend.kind == "mock" and not Path(backend.script).is_file():
                raise ConfigError(f"backends.{name}: no such script: {backend.script}")


def _section(data: dict, name: str) -> dict:
    value = data.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return value


def loads_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    try:
        generator = GeneratorSection(**_section(data, "generator"))
        budgets_raw = dict(_section(data, "budgets"))
        # The example budget defaults to the difficulty ceiling so the
        # curriculum can reach its top tier.
        budgets_raw.setdefault("max_examples", generator.c_max)
        config = RunConfig(
            regime=data.get("regime", "Short"),
            rng_seed=int(data.get("rng_seed", 0)),
            ledger_path=data.get("ledger_path", "runs/run.jsonl"),
            seed_prompt=data.get("seed_prompt", "base"),
            prompt_length_cap=int(data.get("prompt_length_cap", 20_000)),
            concurrency=int(data.get("concurrency", 4)),
            dataset_paths={k: str(v) for k, v in _section(data, "datasets").items()},
            backends={name: BackendConfig(**raw)
                      for name, raw in _section(data, "backends").items()},
            budgets=BudgetConfig(**budgets_raw),
            tolerances=ToleranceConfig(**_section(data, "tolerances")),
            generator=generator,
            verifier=VerifierSection(**_section(data, "verifier")),
        )
    except TypeError as exc:
        raise ConfigError(f"unknown or missing config field: {exc}") from exc
    config.validate()
    return config


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads_config(text)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=True)
    raise ConfigError(f"cannot serialize {value!r}")


def dumps_config(config: RunConfig) -> str:
    """Serialize back to TOML; ``loads_config(dumps_config(c)) == c``."""
    lines: list[str] = []
    for key in ("regime", "rng_seed", "ledger_path", "seed_prompt",
                "prompt_length_cap", "concurrency"):
        lines.append(f"{key} = {_toml_value(getattr(config, key))}")
    lines.append("")
    lines.append("[datasets]")
    for subset, path in config.dataset_paths.items():
        lines.append(f"{json.dumps(subset)} = {_toml_value(path)}")
    for section_name in ("budgets", "tolerances", "generator", "verifier"):
        lines.append("")
        lines.append(f"[{section_name}]")
        for key, value in asdict(getattr(config, section_name)).items():
            lines.append(f"{key} = {_toml_value(value)}")
    for name, backend in config.backends.items():
        lines.append("")
        lines.append(f"[backends.{name}]")
        for key, value in asdict(backend).items():
            if value is not None:
                lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def with_overrides(
    config: RunConfig,
    *,
    subset: str | None = None,
    max_difficulty: int | None = None,
    t_max: int | None = None,
    mock: str | None = None,
    ledger: str | None = None,
) -> RunConfig:
    """Apply the targeted command-line overrides to a loaded config."""
    if subset is not None:
        if subset not in config.dataset_paths:
            raise ConfigError(f"--subset {subset}: no [datasets] entry for it")
        config = replace(config, dataset_paths={subset: config.dataset_paths[subset]})
    if max_difficulty is not None:
        config = replace(config, generator=replace(config.generator, c_max=max_difficulty))
    if t_max is not None:
        config = replace(config, budgets=replace(config.budgets, max_refinements=t_max))
    if mock is not None:
        config = replace(config, backends={"default": BackendConfig(kind="mock", script=mock)})
    if ledger is not None:
        config = replace(config, ledger_path=ledger)
    config.validate()
    return config
