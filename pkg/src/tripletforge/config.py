"""Run configuration: a single human-editable YAML file, strictly validated.

Unknown keys are errors, all violations are reported together (no
fail-fast), and defaults are materialized on load. Relative paths in the
file are resolved against the config file's directory; the manifest's
config snapshot keeps paths exactly as authored so identical inputs
produce identical manifests on any machine. API keys never appear in the
config: backends name the environment variable that holds them.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .gateway import BackendDescriptor, BackendKind
from .records import SubsetTag

BACKEND_ROLES = ("question_gen", "solution_gen", "converter", "reasoner", "embedder")
OPTIONAL_ROLES = ("prefill_gen",)  # raw-completion override; falls back to question_gen

STAGE_ROLE_REQUIREMENTS: dict[str, tuple[str, ...]] = {
    "synth": ("question_gen",),
    "dedup": ("embedder",),
    "verify": ("solution_gen",),
    "convert": ("converter",),
    "distill": ("reasoner",),
    "analyze": (),
}

# contamination analysis needs the same embedding backend as dedup
ANALYZE_EMBEDDING_ROLE = "embedder"


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackendConfig(_StrictModel):
    kind: Literal["chat", "raw_completion", "embedding", "mock"]
    model_id: str
    endpoint: str = ""
    auth: str = ""
    rate: int | None = Field(default=None, ge=1)
    max_inflight: int = Field(default=4, ge=1)
    fixtures: str = ""
    mock_mode: Literal["strict", "generative"] = "generative"
    embedding_dim: int = Field(default=16, ge=2)

    def descriptor(self, base_dir: Path) -> BackendDescriptor:
        fixtures = self.fixtures
        if fixtures and not Path(fixtures).is_absolute():
            fixtures = str(base_dir / fixtures)
        return BackendDescriptor(
            kind=BackendKind(self.kind),
            model_id=self.model_id,
            endpoint=self.endpoint,
            auth=self.auth,
            rate=self.rate,
            max_inflight=self.max_inflight,
            fixtures=fixtures,
            mock_mode=self.mock_mode,
            embedding_dim=self.embedding_dim,
        )


class SubsetConfig(_StrictModel):
    enabled: bool = True
    count: int | None = Field(default=None, ge=1)
    corpus: str | None = None


class VerifySettings(_StrictModel):
    n_attempts: int = Field(default=10, ge=1)
    timeout_s: float = Field(default=30.0, gt=0)
    memory_mb: int = Field(default=1024, ge=1)
    require_full_coverage: bool = True
    run_all_attempts: bool = True


class DedupSettings(_StrictModel):
    threshold: float = 0.90
    scope: Literal["within_subset", "global"] = "within_subset"

    @field_validator("threshold")
    @classmethod
    def _threshold_range(cls, v: float) -> float:
        if not (0.5 < v <= 1.0):
            raise ValueError("dedup.threshold in (0.5, 1.0]")
        return v


class SftSettings(_StrictModel):
    min_tokens: int = Field(default=64, ge=1)
    max_tokens: int = Field(default=16384, ge=1)
    reject_class_solutions: bool = True
    samples_per_question: int = Field(default=3, ge=1)


class ContaminationSettings(_StrictModel):
    threshold: float = Field(default=0.95, gt=0.0, le=1.0)
    benchmarks: dict[str, str] = Field(default_factory=dict)


class RunnerSettings(_StrictModel):
    kind: Literal["stub", "subprocess"] = "stub"
    command: list[str] = Field(default_factory=list)


class RunConfig(_StrictModel):
    run_id: str
    runs_root: str = "runs"
    rng_seed: int = 0
    fixed_clock: str | None = None  # RFC 3339; fixes created_at for reproducible runs
    transcripts: bool = False
    workers: int = Field(default=1, ge=1)
    backends: dict[str, BackendConfig] = Field(default_factory=dict)
    subsets: dict[str, SubsetConfig] = Field(default_factory=dict)
    verify: VerifySettings = Field(default_factory=VerifySettings)
    dedup: DedupSettings = Field(default_factory=DedupSettings)
    sft: SftSettings = Field(default_factory=SftSettings)
    contamination: ContaminationSettings = Field(default_factory=ContaminationSettings)
    runner: RunnerSettings = Field(default_factory=RunnerSettings)
    rl_validation_fraction: float = Field(default=0.05, ge=0.0, lt=1.0)
    # where relative paths resolve; set by the loader, excluded from snapshots
    base_dir: str | None = None

    @field_validator("run_id")
    @classmethod
    def _run_id_shape(cls, v: str) -> str:
        if not v or "/" in v or v.startswith("."):
            raise ValueError("run_id must be a plain directory name")
        return v

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if p.is_absolute():
            return p
        return (Path(self.base_dir) if self.base_dir else Path.cwd()) / p

    @property
    def runs_root_path(self) -> Path:
        return self.resolve(self.runs_root)

    def snapshot(self) -> dict[str, Any]:
        """Effective configuration with defaults, paths as authored."""
        return self.model_dump(mode="json", exclude={"base_dir"})

    def semantic_errors(self) -> list[str]:
        errors: list[str] = []
        for role in self.backends:
            if role not in BACKEND_ROLES and role not in OPTIONAL_ROLES:
                errors.append(f"backends.{role}: unknown backend role")
        for role, backend in self.backends.items():
            if backend.kind == "mock" and not backend.fixtures:
                errors.append(f"backends.{role}: mock backends require a fixtures path")
            if backend.kind != "mock" and not backend.endpoint:
                errors.append(f"backends.{role}: non-mock backends require an endpoint")
            if backend.kind == "mock" and backend.endpoint:
                errors.append(
                    f"backends.{role}: mock fixtures path replaces endpoint"
                )
        if self.sft.min_tokens >= self.sft.max_tokens:
            errors.append("sft.min_tokens must be < sft.max_tokens")
        for name, subset in self.subsets.items():
            try:
                tag = SubsetTag(name)
            except ValueError:
                errors.append(f"subsets.{name}: unknown subset")
                continue
            if subset.enabled and tag is not SubsetTag.PREFILL and not subset.corpus:
                errors.append(f"subsets.{name}: enabled subset needs a corpus path")
            if subset.enabled and tag is SubsetTag.PREFILL and not subset.count:
                errors.append("subsets.prefill: enabled prefill needs a count")
        if self.runner.kind == "subprocess" and not self.runner.command:
            errors.append("runner.command required for subprocess runner")
        return errors

    def enabled_subsets(self) -> list[SubsetTag]:
        out = []
        for tag in SubsetTag:
            cfg = self.subsets.get(tag.value)
            if cfg is not None and cfg.enabled:
                out.append(tag)
        return out

    def require_roles(self, roles: tuple[str, ...]) -> list[str]:
        return [r for r in roles if r not in self.backends]


def _format_pydantic_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def validate_config_data(data: Any, base_dir: Path | None = None) -> tuple[RunConfig | None, list[str]]:
    """Validate a parsed config mapping; returns (config, all errors)."""
    if not isinstance(data, dict):
        return None, ["config must be a mapping"]
    payload = dict(data)
    if base_dir is not None:
        payload["base_dir"] = str(base_dir)
    try:
        config = RunConfig.model_validate(payload)
    except ValidationError as exc:
        return None, _format_pydantic_errors(exc)
    errors = config.semantic_errors()
    if errors:
        return None, errors
    return config, []


def validate_config(path: Path | str) -> tuple[RunConfig | None, list[str]]:
    """Load and validate a YAML config file; every error is reported, not just the first."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        return None, [f"cannot read config: {exc}"]
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        return None, [f"config is not valid YAML: {exc}"]
    return validate_config_data(data, base_dir=path.resolve().parent)


def load_config(path: Path | str) -> RunConfig:
    config, errors = validate_config(path)
    if config is None:
        raise ConfigError(errors)
    return config
