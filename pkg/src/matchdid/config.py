"""Run configuration: pydantic models, TOML config files and environment defaults."""

from __future__ import annotations

import logging
import os
import tomllib
from pathlib import Path
from typing import Any, Literal

import psutil
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from matchdid.errors import ParseError
from matchdid.matching import Scaling
from matchdid.simulation.dgp import InferenceDesign

logger = logging.getLogger(__name__)

WORKERS_ENV = "MATCHDID_WORKERS"
LOG_LEVEL_ENV = "MATCHDID_LOG_LEVEL"

OutputFormat = Literal["table", "json"]


class PanelColumns(BaseModel):
    """Column names of a long-format panel CSV."""

    model_config = ConfigDict(extra="forbid")

    unit: str = "unit"
    period: str = "period"
    outcome: str = "outcome"
    cohort: str = "cohort"
    covariates: list[str] = Field(
        default_factory=list, description="Empty means every other column"
    )
    discrete: list[str] = Field(default_factory=list, description="Covariates flagged discrete")


class NswColumns(BaseModel):
    """Column names of the NSW experimental and CPS comparison files."""

    model_config = ConfigDict(extra="forbid")

    treat: str = "treat"
    re74: str = "re74"
    re75: str = "re75"
    re78: str = "re78"
    age: str = "age"
    education: str = "education"
    married: str = "married"
    black: str = "black"
    hispanic: str = "hispanic"


class RunConfig(BaseModel):
    """Every parameter a CLI run can take. Config files and flags both land here."""

    model_config = ConfigDict(extra="forbid")

    input: Path | None = None
    columns: PanelColumns = Field(default_factory=PanelColumns)
    experimental: Path | None = None
    cps: Path | None = None
    nsw_columns: NswColumns = Field(default_factory=NswColumns)

    cohort: str | None = Field(default=None, description="Target cohort or 'all'")
    comparison: str = "inf"
    M: int = Field(default=1, ge=1)
    J: int = Field(default=2, ge=1)
    periods: str | None = Field(default=None, description="Period selector flags, e.g. '1,1,0,1'")
    scaling: Scaling = "none"
    bias_correct: bool = False

    design: InferenceDesign = "constant-effect"
    n: int = Field(default=1000, ge=10)
    seed: int = Field(default=0, ge=0)
    reps: int = Field(default=1000, ge=100)
    workers: int | None = Field(default=None, ge=1)

    output: Path | None = None
    output_format: OutputFormat = "table"

    def merged(self, overrides: dict[str, Any]) -> RunConfig:
        """Copy with every non-None override applied and revalidated."""
        data = self.model_dump()
        data.update({key: value for key, value in overrides.items() if value is not None})
        return RunConfig.model_validate(data)

    @property
    def resolved_workers(self) -> int:
        return self.workers if self.workers is not None else default_workers()


def load_run_config(path: Path | None) -> RunConfig:
    """Read a TOML run config; None gives the defaults.

    Raises:
        ParseError: The file is not valid TOML or has invalid fields.
    """
    if path is None:
        return RunConfig()
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ParseError(f"config file {path} does not exist") from None
    except tomllib.TOMLDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"])
        raise ParseError(f"{path}: {first['msg']}", column=field) from e
    logger.debug(f"[IO] loaded run config from {path}")
    return config


def default_workers() -> int:
    """MATCHDID_WORKERS if set, otherwise the physical core count (at least 1)."""
    value = os.environ.get(WORKERS_ENV)
    if value:
        try:
            workers = int(value)
        except ValueError:
            logger.warning(f"[IO] ignoring non-integer {WORKERS_ENV}={value!r}")
        else:
            if workers >= 1:
                return workers
            logger.warning(f"[IO] ignoring {WORKERS_ENV}={value!r}; must be at least 1")
    return psutil.cpu_count(logical=False) or 1


def load_environment() -> None:
    """Load a .env file from the working directory, if there is one."""
    load_dotenv()


def log_level() -> str:
    return os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
