"""
Settings and experiment documents.

``settings`` carries process-wide defaults from the environment / ``.env``.
Experiment documents are TOML files validated into ``ExperimentConfig``;
any problem is reported as a ``ConfigError`` listing (line, key, message).
"""

import re
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from src.attack import AttackConfig
from src.errors import ConfigError
from src.models import ModelSpec
from src.optim import LbfgsOptions
from src.stopping import ControllerKind, ControllerSpec


class Settings(BaseSettings):
    """Application settings managed by Pydantic."""

    # Experiment defaults (overridden by the experiment document, then CLI flags)
    EXPERIMENT_OUTPUT_DIR: str = Field(default="runs", description="Directory reports are written under")
    EXPERIMENT_JOBS: int = Field(default=1, ge=1, description="Worker processes for attacks")
    EXPERIMENT_SEED: int = Field(default=0, ge=0, description="Base seed when a document sets none")
    DEBUG_MODE: bool = False

    # Dataset roots, used for relative dataset paths and by the dataset tests
    MNIST_DIR: str = Field(default="", description="Directory holding the MNIST IDX files")
    CIFAR10_DIR: str = Field(default="", description="Directory holding the CIFAR-10 binary batches")

    model_config = SettingsConfigDict(
        env_file=str(Path(__file__).resolve().parent.parent / ".env"),
        env_file_encoding="utf-8",
        extra="ignore",
    )


# Global settings instance
settings = Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Section):
    name: Literal["synthetic", "mnist", "cifar10"]
    # mnist
    images: Optional[str] = None
    labels: Optional[str] = None
    # cifar10
    batches: List[str] = Field(default_factory=list)
    # synthetic
    shape: Tuple[PositiveInt, PositiveInt, PositiveInt] = (8, 8, 1)
    classes: int = Field(default=10, ge=2)
    pool_size: PositiveInt = 100
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_sources(self) -> "DatasetConfig":
        if self.name != "mnist" and (self.images or self.labels):
            raise ValueError("images/labels only apply to the mnist dataset")
        if self.name != "cifar10" and self.batches:
            raise ValueError("batches only apply to the cifar10 dataset")
        return self


class ModelConfig(_Section):
    architecture: Optional[Literal["lenet", "mlp"]] = None
    seed: Optional[int] = Field(default=None, ge=0)
    init_low: float = -0.5
    init_high: float = 0.5
    hidden_size: PositiveInt = 256
    conv_channels: PositiveInt = 12

    @model_validator(mode="after")
    def _check_range(self) -> "ModelConfig":
        if not self.init_low < self.init_high:
            raise ValueError("init_low must be below init_high")
        return self


class AttackSection(_Section):
    max_iterations: PositiveInt = 300
    learning_rate: PositiveFloat = 1.0
    optimizer: Literal["sgd", "lbfgs"] = "lbfgs"
    history_size: PositiveInt = 10
    max_line_search_evals: PositiveInt = 20
    inner_iterations: PositiveInt = 20
    snapshot_every: int = Field(default=0, ge=0)

    def to_attack_config(self, dummy_seed: int, controller: ControllerSpec) -> AttackConfig:
        return AttackConfig(
            max_iterations=self.max_iterations,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            dummy_seed=dummy_seed,
            lbfgs=LbfgsOptions(
                history_size=self.history_size,
                max_line_search_evals=self.max_line_search_evals,
                inner_iterations=self.inner_iterations,
            ),
            controller=controller,
            snapshot_every=self.snapshot_every,
        )


class ControllerSweep(_Section):
    """Controller kinds crossed with thresholds and patiences."""

    kinds: List[ControllerKind] = Field(default_factory=lambda: [ControllerKind.HYBRID], min_length=1)
    thresholds: List[PositiveFloat] = Field(default_factory=lambda: [1e-5])
    patiences: List[PositiveInt] = Field(default_factory=lambda: [15])

    @model_validator(mode="after")
    def _check_axes(self) -> "ControllerSweep":
        kinds = set(self.kinds)
        if kinds & {ControllerKind.THRESHOLD, ControllerKind.HYBRID} and not self.thresholds:
            raise ValueError("threshold and hybrid controllers need at least one threshold")
        if kinds & {ControllerKind.PLATEAU, ControllerKind.HYBRID} and not self.patiences:
            raise ValueError("plateau and hybrid controllers need at least one patience")
        return self

    def expand(self) -> List[ControllerSpec]:
        specs: List[ControllerSpec] = []
        for kind in self.kinds:
            if kind is ControllerKind.NEVER:
                specs.append(ControllerSpec(kind=kind))
            elif kind is ControllerKind.THRESHOLD:
                specs.extend(ControllerSpec(kind=kind, threshold=t) for t in self.thresholds)
            elif kind is ControllerKind.PLATEAU:
                specs.extend(ControllerSpec(kind=kind, patience=p) for p in self.patiences)
            else:
                specs.extend(
                    ControllerSpec(kind=kind, threshold=t, patience=p)
                    for t, p in product(self.thresholds, self.patiences)
                )
        # repeated kinds in the document would duplicate configurations
        return list(dict.fromkeys(specs))


class RunConfig(_Section):
    samples: PositiveInt = 100
    selection_seed: Optional[int] = Field(default=None, ge=0)
    seed: Optional[int] = Field(default=None, ge=0)
    jobs: Optional[PositiveInt] = None
    output_dir: Optional[str] = None


class ExperimentConfig(_Section):
    dataset: DatasetConfig
    model: ModelConfig = ModelConfig()
    attack: AttackSection = AttackSection()
    controllers: ControllerSweep = ControllerSweep()
    run: RunConfig = RunConfig()

    @property
    def base_seed(self) -> int:
        return self.run.seed if self.run.seed is not None else settings.EXPERIMENT_SEED

    @property
    def init_seed(self) -> int:
        return self.model.seed if self.model.seed is not None else self.base_seed

    @property
    def selection_seed(self) -> int:
        return self.run.selection_seed if self.run.selection_seed is not None else self.base_seed

    @property
    def jobs(self) -> int:
        return self.run.jobs or settings.EXPERIMENT_JOBS

    @property
    def output_dir(self) -> Path:
        return Path(self.run.output_dir or settings.EXPERIMENT_OUTPUT_DIR)

    @property
    def architecture(self) -> str:
        if self.model.architecture:
            return self.model.architecture
        return "mlp" if self.dataset.name == "synthetic" else "lenet"

    def controller_specs(self) -> List[ControllerSpec]:
        return self.controllers.expand()

    def build_model_spec(self, input_shape: Tuple[int, int, int], class_count: int) -> ModelSpec:
        if self.architecture == "lenet":
            return ModelSpec(
                architecture="lenet",
                input_shape=input_shape,
                class_count=class_count,
                conv_channels=(self.model.conv_channels,) * 4,
            )
        return ModelSpec.mlp(input_shape, class_count, hidden_sizes=(self.model.hidden_size,))

    def with_overrides(
        self,
        output_dir: Optional[Union[str, Path]] = None,
        seed: Optional[int] = None,
        jobs: Optional[int] = None,
    ) -> "ExperimentConfig":
        """Copy with CLI flag values applied on top of the document."""
        run = self.run.model_dump()
        if output_dir is not None:
            run["output_dir"] = str(output_dir)
        if seed is not None:
            run["seed"] = seed
        if jobs is not None:
            run["jobs"] = jobs
        return self.model_copy(update={"run": RunConfig(**run)})

    def with_controllers(self, sweep: ControllerSweep) -> "ExperimentConfig":
        return self.model_copy(update={"controllers": sweep})


_SECTION_RE = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
_DECODE_LINE_RE = re.compile(r"line (\d+)")


def _line_of(text: str, loc: Sequence[Any]) -> Optional[int]:
    """1-based line of the key named by a validation error location, if present."""
    keys = [str(part) for part in loc if isinstance(part, str)]
    if not keys:
        return None
    section = keys[0] if len(keys) > 1 else None
    key = keys[-1]
    key_re = re.compile(rf"^\s*{re.escape(key)}\s*=")
    current: Optional[str] = None
    for number, line in enumerate(text.splitlines(), start=1):
        header = _SECTION_RE.match(line)
        if header:
            current = header.group(1)
            if section is None and current == key:
                return number
            continue
        if key_re.match(line) and current == section:
            return number
    if section is not None:
        # fall back to the section header when the key itself is absent
        for number, line in enumerate(text.splitlines(), start=1):
            header = _SECTION_RE.match(line)
            if header and header.group(1) == section:
                return number
    return None


def parse_config(data: Union[bytes, str]) -> ExperimentConfig:
    """Parse and validate an experiment document.

    A top-level ``dataset = "<name>"`` is shorthand for a ``[dataset]``
    section holding only ``name``.

    Raises:
        ConfigError: TOML syntax errors, unknown keys, missing required keys
            and invalid values, each with its line when it can be located.
    """
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        document: Dict[str, Any] = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        match = _DECODE_LINE_RE.search(str(exc))
        raise ConfigError([(int(match.group(1)) if match else None, "<document>", str(exc))]) from exc

    if isinstance(document.get("dataset"), str):
        document["dataset"] = {"name": document["dataset"]}

    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        issues = []
        for error in exc.errors():
            loc = error.get("loc", ())
            key = ".".join(str(part) for part in loc) or "<document>"
            issues.append((_line_of(text, loc), key, error.get("msg", "invalid value")))
        raise ConfigError(issues) from exc


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    return parse_config(Path(path).read_bytes())
