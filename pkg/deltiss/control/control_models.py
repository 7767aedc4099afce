from __future__ import annotations

from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from deltiss.control.geometry import Polytope

Matrix = list[list[float]]


class LoopOptions(BaseModel):
    """Retry schedule for the (H, γ) parameter loop"""

    gamma_max: float = Field(default=100.0, gt=0)
    eps_gamma: float = Field(default=1.0, gt=0)
    eps_h: float = Field(default=0.1, gt=0)
    budget: int = Field(default=2000, gt=0)
    tol_psd: float = Field(default=1e-7, gt=0)
    margin: float = Field(default=1e-6, ge=0)
    max_iter: int = Field(default=200, gt=0)
    solver: Optional[str] = None


class SynthesisOptions(BaseModel):
    """Free design parameters of the synthesis procedures"""

    loop: LoopOptions = Field(default_factory=LoopOptions)
    static_objective: Literal["feasibility", "enlarge"] = "feasibility"
    constrain_rpi: bool = False
    lambda_x: Optional[Matrix] = None
    lambda_u: Optional[Matrix] = None
    beta_f1: float = Field(default=1.0, gt=0)
    beta_f2: float = Field(default=1.0, gt=0)

    def weights(self, n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
        Lx = np.eye(n) if self.lambda_x is None else np.asarray(self.lambda_x, dtype=float)
        Lu = np.eye(m) if self.lambda_u is None else np.asarray(self.lambda_u, dtype=float)
        return Lx, Lu


class PolytopeSpec(BaseModel):
    """Either explicit rows ``G v ≤ b`` or a box ``lower ≤ v ≤ upper``"""

    G: Optional[Matrix] = None
    b: Optional[list[float]] = None
    lower: Optional[list[float]] = None
    upper: Optional[list[float]] = None

    @model_validator(mode="after")
    def _one_form(self) -> "PolytopeSpec":
        explicit = self.G is not None or self.b is not None
        box = self.lower is not None or self.upper is not None
        if explicit == box:
            raise ValueError("give either G/b or lower/upper")
        if explicit and (self.G is None or self.b is None):
            raise ValueError("G and b must both be given")
        if box and (self.lower is None or self.upper is None):
            raise ValueError("lower and upper must both be given")
        return self

    def to_polytope(self) -> Polytope:
        if self.G is not None and self.b is not None:
            return Polytope(np.asarray(self.G, dtype=float), np.asarray(self.b, dtype=float))
        return Polytope.from_box(self.lower, self.upper)


class ConstraintSpec(BaseModel):
    input: Optional[PolytopeSpec] = None
    output: Optional[PolytopeSpec] = None


class DisturbanceSpec(BaseModel):
    """Disturbance ellipsoids (override the model file) and the sampling policy"""

    Q_w0: Optional[Matrix] = None
    Q_eta0: Optional[Matrix] = None
    policy: Literal["zero", "uniform", "boundary", "worst-case"] = "uniform"


class ScheduleSegment(BaseModel):
    start: int = Field(ge=0)
    y_bar: list[float]


class RoaGridSpec(BaseModel):
    y_min: float = -0.5
    y_max: float = 0.5
    points: int = Field(default=21, ge=2)
    horizons: list[int] = Field(default_factory=lambda: [3, 10])
    steps: int = Field(default=200, gt=0)

    @field_validator("horizons")
    @classmethod
    def _positive(cls, value: list[int]) -> list[int]:
        if any(N < 1 for N in value):
            raise ValueError("horizons must be >= 1")
        return sorted(set(value))

    def values(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.points)


class NmpcOptions(BaseModel):
    max_iter: int = Field(default=50, gt=0)
    feas_tol: float = Field(default=1e-6, gt=0)
    kkt_tol: float = Field(default=1e-6, gt=0)
    warn_tol: float = Field(default=1e-4, gt=0)
    penalty: float = Field(default=1e4, gt=0)
    trust_radius: float = Field(default=10.0, gt=0)
    margin: float = Field(default=1e-6, ge=0)
    verify_candidate: bool = True


class RunConfig(BaseModel):
    """Everything a command needs besides the command line itself"""

    model: str
    y_bar: list[float] = Field(default_factory=lambda: [0.0])
    schedule: Optional[list[ScheduleSegment]] = None
    controller: Literal["static", "nmpc"] = "nmpc"
    horizon: int = Field(default=10, ge=1)
    steps: int = Field(default=500, gt=0)
    seed: int = 0
    jobs: int = Field(default=1, ge=1)
    verify_samples: int = Field(default=10_000, gt=0)
    out_dir: str = "out"
    synthesis: SynthesisOptions = Field(default_factory=SynthesisOptions)
    nmpc: NmpcOptions = Field(default_factory=NmpcOptions)
    constraints: ConstraintSpec = Field(default_factory=ConstraintSpec)
    disturbance: DisturbanceSpec = Field(default_factory=DisturbanceSpec)
    roa: RoaGridSpec = Field(default_factory=RoaGridSpec)

    @model_validator(mode="after")
    def _schedule_order(self) -> "RunConfig":
        if self.schedule:
            starts = [seg.start for seg in self.schedule]
            if starts[0] != 0 or starts != sorted(starts) or len(set(starts)) != len(starts):
                raise ValueError("schedule segments must start at 0 and be strictly increasing")
        return self

    def reference(self) -> list[tuple[int, np.ndarray]]:
        """Reference as (start step, ȳ) segments."""
        if self.schedule:
            return [(seg.start, np.asarray(seg.y_bar, dtype=float)) for seg in self.schedule]
        return [(0, np.asarray(self.y_bar, dtype=float))]


class StageAttempt(BaseModel):
    """One (H, γ) attempt of a design stage"""

    stage: str
    h: list[float]
    gamma: Optional[float] = None
    status: str
    worst_block: Optional[str] = None
    min_eig: Optional[float] = None
    objective: Optional[float] = None


class SynthesisTranscript(BaseModel):
    attempts: list[StageAttempt] = Field(default_factory=list)
    outcomes: dict[str, str] = Field(default_factory=dict)

    def record(self, attempt: StageAttempt) -> None:
        self.attempts.append(attempt)

    def for_stage(self, stage: str) -> list[StageAttempt]:
        return [a for a in self.attempts if a.stage.startswith(stage)]


class SuiteResult(BaseModel):
    name: str
    samples: int
    evaluated: int
    violations: int
    worst_margin: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


class VerificationReport(BaseModel):
    suites: list[SuiteResult] = Field(default_factory=list)
    tolerance: float = 1e-8

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    @property
    def total_violations(self) -> int:
        return sum(s.violations for s in self.suites)

    def suite(self, name: str) -> SuiteResult:
        for s in self.suites:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_markdown(self) -> str:
        lines = [
            "## Verification suites",
            "",
            f"Tolerance: `{self.tolerance:g}`",
            "",
            "| suite | samples | evaluated | violations | worst margin | result |",
            "|---|---|---|---|---|---|",
        ]
        for s in self.suites:
            lines.append(
                f"| {s.name} | {s.samples} | {s.evaluated} | {s.violations} "
                f"| {s.worst_margin:.6g} | {'pass' if s.passed else 'FAIL'} |"
            )
        return "\n".join(lines) + "\n"
