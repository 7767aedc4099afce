import asyncio
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field
from temporalio import activity
from temporalio.exceptions import ApplicationError

from deltiss.control import io
from deltiss.control.control_models import NmpcOptions, RoaGridSpec
from deltiss.control.errors import DESIGN_FAILURES, DeltissError
from deltiss.control.sim import (
    roa_map_from_rows,
    roa_row,
    roa_variants,
    verify_design,
)


class DesignRequest(BaseModel):
    """Synthesize one bundle from a run configuration"""

    config_path: str
    mode: Literal["static", "tube"] = "tube"
    shared_gain: bool = False
    out_dir: Optional[str] = None
    stem: str = "design"


class DesignResult(BaseModel):
    design_path: str
    transcript_path: str
    mode: str
    gamma_o: float
    gamma_c: float
    gamma_f: Optional[float] = None
    stage_solves: int


class VerifyRequest(BaseModel):
    design_path: str
    out_dir: str
    samples: int = Field(default=10_000, gt=0)
    seed: int = 0


class VerifyResult(BaseModel):
    report_path: str
    markdown: str
    passed: bool
    total_violations: int


class RoaSweepPlan(BaseModel):
    """Designs and grid shared by every row of a sweep"""

    static_design: str
    tube_design: str
    grid: RoaGridSpec
    nmpc: NmpcOptions
    policy: str
    seed: int
    out_dir: str
    variants: list[str]


class RoaRowRequest(BaseModel):
    plan: RoaSweepPlan
    row: int


class RoaRowResult(BaseModel):
    row: int
    cells: dict[str, list[bool]]


class RoaSummaryRequest(BaseModel):
    plan: RoaSweepPlan
    rows: list[RoaRowResult]


class RoaSummaryResult(BaseModel):
    csv_path: str
    markdown: str
    counts: dict[str, int]
    counterexamples: int


def _application_error(exc: DeltissError) -> ApplicationError:
    return ApplicationError(exc.message, exc.to_dict(), type=type(exc).__name__, non_retryable=True)


def synthesize_to_files(request: DesignRequest) -> DesignResult:
    config = io.load_config(request.config_path)
    out = Path(request.out_dir or config.out_dir)
    run = io.resolve_run(config)
    try:
        bundle = run.design(request.mode, shared_gain=request.shared_gain)
    except DESIGN_FAILURES as exc:
        io.write_json(out / f"{request.stem}.transcript.json", exc.transcript)
        raise
    design_path = io.save_design(bundle, out / f"{request.stem}.json")
    transcript_path = io.write_json(
        out / f"{request.stem}.transcript.json", bundle.transcript.model_dump(mode="json")
    )
    return DesignResult(
        design_path=str(design_path),
        transcript_path=str(transcript_path),
        mode=bundle.mode.value,
        gamma_o=bundle.observer.gamma_o,
        gamma_c=bundle.controller.gamma_c,
        gamma_f=None if bundle.terminal is None else bundle.terminal.gamma_f,
        stage_solves=len(bundle.transcript.attempts),
    )


def verify_to_files(request: VerifyRequest) -> VerifyResult:
    bundle = io.load_design(request.design_path)
    report = verify_design(bundle, request.samples, request.seed)
    path = io.write_json(Path(request.out_dir) / "verification.json", report.model_dump(mode="json"))
    return VerifyResult(
        report_path=str(path),
        markdown=report.to_markdown(),
        passed=report.passed,
        total_violations=report.total_violations,
    )


def plan_sweep(config_path: str) -> RoaSweepPlan:
    config = io.load_config(config_path)
    out = Path(config.out_dir)
    run = io.resolve_run(config)
    static = run.static_design()
    tube = run.tube_design(shared=static)
    return RoaSweepPlan(
        static_design=str(io.save_design(static, out / "design_static.json")),
        tube_design=str(io.save_design(tube, out / "design_tube.json")),
        grid=config.roa,
        nmpc=config.nmpc,
        policy=config.disturbance.policy,
        seed=config.seed,
        out_dir=str(out),
        variants=roa_variants(config.roa),
    )


def sweep_one_row(request: RoaRowRequest) -> RoaRowResult:
    plan = request.plan
    static = io.load_design(plan.static_design)
    tube = io.load_design(plan.tube_design)
    cells = roa_row(static, tube, plan.grid, request.row, plan.nmpc, plan.policy, plan.seed)
    return RoaRowResult(row=request.row, cells=cells)


def summarize_sweep(request: RoaSummaryRequest) -> RoaSummaryResult:
    plan = request.plan
    roa = roa_map_from_rows(plan.grid, plan.variants, {r.row: r.cells for r in request.rows})
    csv_path = roa.to_csv(Path(plan.out_dir) / "roa.csv")
    markdown = roa.to_markdown()
    (Path(plan.out_dir) / "roa_summary.md").write_text(markdown)
    return RoaSummaryResult(
        csv_path=str(csv_path),
        markdown=markdown,
        counts=roa.counts(),
        counterexamples=len(roa.counterexamples()),
    )


@activity.defn
async def synthesize_design(request: DesignRequest) -> DesignResult:
    activity.logger.info(f"Synthesizing {request.mode} design from {request.config_path}")
    try:
        return await asyncio.to_thread(synthesize_to_files, request)
    except DeltissError as exc:
        raise _application_error(exc) from exc


@activity.defn
async def verify_bundle(request: VerifyRequest) -> VerifyResult:
    activity.logger.info(f"Verifying {request.design_path} with {request.samples} samples")
    try:
        return await asyncio.to_thread(verify_to_files, request)
    except DeltissError as exc:
        raise _application_error(exc) from exc


@activity.defn
async def plan_roa_sweep(config_path: str) -> RoaSweepPlan:
    activity.logger.info(f"Preparing ROA sweep designs from {config_path}")
    try:
        return await asyncio.to_thread(plan_sweep, config_path)
    except DeltissError as exc:
        raise _application_error(exc) from exc


@activity.defn
async def sweep_roa_row(request: RoaRowRequest) -> RoaRowResult:
    activity.logger.info(f"ROA row {request.row + 1}/{request.plan.grid.points}")
    try:
        return await asyncio.to_thread(sweep_one_row, request)
    except DeltissError as exc:
        raise _application_error(exc) from exc


@activity.defn
async def summarize_roa_sweep(request: RoaSummaryRequest) -> RoaSummaryResult:
    return await asyncio.to_thread(summarize_sweep, request)
