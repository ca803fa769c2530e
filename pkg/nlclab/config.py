"""Experiment configuration and run settings.

``ExperimentConfig`` is the JSON-described one-particle experiment (field
schedule, preparation, measurement, anomaly scale). ``RunSettings`` holds the
process-level knobs read from ``QLAG_*`` environment variables or ``.env``.
"""

import json
import logging
from pathlib import Path
from typing import AbstractSet, Any, Dict, List, Optional, Tuple

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    TypeAdapter,
    ValidationError,
    model_validator,
)
from pydantic_settings import BaseSettings, SettingsConfigDict

from nlclab.errors import ConfigError, OutputError, ValidationFailure
from nlclab.physics.histories import MIN_PHASE_TURNS, AnomalyParams
from nlclab.physics.lagrangian import LagrangianContext
from nlclab.physics.spin_algebra import FieldSchedule, FieldSegment, build_spin_operators


logger = logging.getLogger(__name__)

# gyro * max|B| * s must stay below this fraction of omega.
NONRELATIVISTIC_FRACTION = 1e-3

Vector3 = Tuple[float, float, float]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class SegmentSpec(_Frozen):
    """One linear ramp of B between two times; ``b_end`` defaults to ``b_start``."""

    t_start: float
    t_end: float
    b_start: Vector3
    b_end: Optional[Vector3] = None

    def to_segment(self) -> FieldSegment:
        end = self.b_start if self.b_end is None else self.b_end
        return FieldSegment(self.t_start, self.t_end, tuple(self.b_start), tuple(end))


class Preparation(_Frozen):
    time: float
    axis: Vector3
    outcome: int = Field(default=0, ge=0)


class Measurement(_Frozen):
    time: float
    axis: Vector3
    delta_t: float = Field(gt=0)


class Anomaly(_Frozen):
    gamma_s: float = Field(ge=0)
    t0: Optional[float] = None


class ExperimentConfig(_Frozen):
    spin_n: int = Field(ge=2)
    omega: float = Field(gt=0)
    gyro: float
    schedule: List[SegmentSpec] = Field(default_factory=list)
    preparation: Preparation
    measurement: Measurement
    anomaly: Anomaly
    erased: bool = False
    seed: int = Field(default=0, ge=0, lt=1 << 64)
    steps: int = Field(default=2000, ge=1)
    l_max: int = Field(default=10_000, ge=1)
    extra_measurements: List[Measurement] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_semantics(self) -> "ExperimentConfig":
        problems = semantic_violations(self)
        if problems:
            raise ValueError("\n".join(problems))
        return self

    @property
    def t0(self) -> float:
        return self.measurement.time - self.preparation.time

    @property
    def t_last(self) -> float:
        if self.extra_measurements:
            return self.extra_measurements[-1].time
        return self.measurement.time

    def field_schedule(self) -> FieldSchedule:
        """The configured schedule, or zero field over the experiment span."""

        if not self.schedule:
            return FieldSchedule.zero(self.preparation.time, self.t_last)
        return FieldSchedule(tuple(s.to_segment() for s in self.schedule))

    def lagrangian_context(self) -> LagrangianContext:
        return LagrangianContext(
            build_spin_operators(self.spin_n), self.field_schedule(), self.omega, self.gyro
        )

    def anomaly_params(self) -> AnomalyParams:
        return AnomalyParams(
            gamma_s=self.anomaly.gamma_s,
            t0=self.t0,
            delta_t=self.measurement.delta_t,
            omega=self.omega,
        )


def _norm(v: Vector3) -> float:
    return sum(x * x for x in v) ** 0.5


def semantic_violations(
    cfg: ExperimentConfig, available: Optional[AbstractSet[str]] = None
) -> List[str]:
    """Cross-field checks that a per-field schema cannot express.

    With ``available``, only checks whose fields all validated are run; this
    is how a config with field errors still reports its semantic ones.
    """

    def has(*names: str) -> bool:
        return available is None or all(name in available for name in names)

    problems: List[str] = []
    timeline = has("preparation", "measurement")
    if timeline and not cfg.preparation.time < cfg.measurement.time:
        problems.append("time ordering: preparation.time must precede measurement.time")
    if has("measurement", "extra_measurements"):
        previous = cfg.measurement.time
        for k, extra in enumerate(cfg.extra_measurements):
            if not extra.time > previous:
                problems.append(
                    f"time ordering: extra_measurements[{k}] must follow the previous event"
                )
            previous = extra.time
    if timeline and has("anomaly") and cfg.anomaly.t0 is not None:
        if abs(cfg.anomaly.t0 - cfg.t0) > 1e-12 * max(1.0, abs(cfg.t0)):
            problems.append(
                f"anomaly.t0={cfg.anomaly.t0} must equal "
                f"measurement.time - preparation.time={cfg.t0}"
            )
    if timeline and has("omega") and cfg.t0 > 0 and cfg.omega * cfg.t0 < MIN_PHASE_TURNS:
        problems.append(f"omega*t0 = {cfg.omega * cfg.t0:.3g} is below {MIN_PHASE_TURNS:g}")
    for name in ("preparation", "measurement"):
        if has(name) and _norm(getattr(cfg, name).axis) == 0.0:
            problems.append(f"{name}.axis must be a non-zero 3-vector")
    if has("extra_measurements"):
        for k, extra in enumerate(cfg.extra_measurements):
            if _norm(extra.axis) == 0.0:
                problems.append(f"extra_measurements[{k}].axis must be a non-zero 3-vector")
    if has("preparation", "spin_n") and cfg.preparation.outcome >= cfg.spin_n:
        problems.append(
            f"preparation.outcome={cfg.preparation.outcome} out of range for spin_n={cfg.spin_n}"
        )

    if has("schedule") and cfg.schedule:
        try:
            schedule = cfg.field_schedule()
        except ValidationFailure as exc:
            problems.append(f"schedule: {exc}")
            return problems
        if timeline and has("extra_measurements"):
            lo, hi = cfg.preparation.time, cfg.t_last
            if not schedule.covers(lo, hi):
                problems.append(
                    f"schedule coverage: [{schedule.t_start}, {schedule.t_end}] "
                    f"does not cover [{lo}, {hi}]"
                )
        if has("spin_n", "gyro", "omega"):
            spin = (cfg.spin_n - 1) / 2.0
            coupling = abs(cfg.gyro) * schedule.max_field() * spin
            bound = NONRELATIVISTIC_FRACTION * cfg.omega
            if coupling > bound:
                problems.append(
                    f"non-relativistic gate: gyro*max|B|*s = {coupling:.6g} exceeds "
                    f"{NONRELATIVISTIC_FRACTION:g}*omega = {bound:.6g}"
                )
    return problems


def _salvaged_violations(data: Dict[str, Any], errors: List[Any]) -> List[str]:
    """Semantic checks over the top-level fields that passed validation."""

    failed = {error["loc"][0] for error in errors if error.get("loc")}
    values: Dict[str, Any] = {}
    for name, field in ExperimentConfig.model_fields.items():
        if name in failed:
            continue
        if name in data:
            values[name] = TypeAdapter(field.annotation).validate_python(data[name])
        else:
            values[name] = field.get_default(call_default_factory=True)
    partial = ExperimentConfig.model_construct(**values)
    return semantic_violations(partial, frozenset(values))


def _describe(error: dict) -> List[str]:
    location = ".".join(str(part) for part in error.get("loc", ()))
    message = str(error.get("msg", ""))
    if message.startswith("Value error, "):
        message = message[len("Value error, "):]
    lines = [line for line in message.split("\n") if line]
    if location:
        return [f"{location}: {line}" for line in lines]
    return lines


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON experiment description.

    Raises ConfigError carrying every violation found, or the line/column of a
    JSON syntax error.
    """

    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            [f"syntax error: {exc.msg} at line {exc.lineno}, column {exc.colno}"],
            line=exc.lineno,
            column=exc.colno,
        ) from exc
    if not isinstance(data, dict):
        raise ConfigError(["config must be a JSON object"])
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        errors = exc.errors()
        violations: List[str] = []
        for error in errors:
            violations.extend(_describe(error))
        if any(error.get("loc") for error in errors):
            # Field errors stop pydantic before the semantic pass runs.
            violations.extend(_salvaged_violations(data, errors))
        raise ConfigError(violations) from exc


def load_config(path: Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot read config {path}: {exc}") from exc
    logger.debug("loaded config from %s", path)
    return parse_config(text)


class RunSettings(BaseSettings):
    """Process-level settings (``QLAG_SEED``, ``QLAG_WORKERS``, ...)."""

    model_config = SettingsConfigDict(env_prefix="QLAG_", env_file=".env", extra="ignore")

    seed: Optional[int] = None
    workers: int = Field(default=1, ge=1)
    log_level: str = "INFO"
    trace_file: Optional[Path] = None
    output_dir: Path = Path("output")


def resolve_seed(
    flag_seed: Optional[int], settings: RunSettings, config_seed: Optional[int] = None
) -> int:
    """Seed precedence: command-line flag, then QLAG_SEED, then the config."""

    for candidate in (flag_seed, settings.seed, config_seed):
        if candidate is not None:
            return int(candidate)
    return 0
