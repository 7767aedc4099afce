import asyncio
from dataclasses import dataclass, field
from datetime import timedelta

from temporalio import workflow

with workflow.unsafe.imports_passed_through():
    from deltiss.workflows.design_activities import (
        RoaRowRequest,
        RoaRowResult,
        RoaSummaryRequest,
        RoaSummaryResult,
        plan_roa_sweep,
        summarize_roa_sweep,
        sweep_roa_row,
    )


@dataclass
class RoaSweepProgress:
    status: str
    rows_done: int = 0
    rows_total: int = 0
    counts: dict[str, int] = field(default_factory=dict)


@workflow.defn
class RoaSweepWorkflow:
    """Region-of-attraction sweep with one activity per grid row."""

    def __init__(self) -> None:
        self.status = "pending"
        self.rows: list[RoaRowResult] = []
        self.rows_total = 0
        self.counts: dict[str, int] = {}

    async def _row(self, request: RoaRowRequest) -> RoaRowResult:
        result = await workflow.execute_activity(
            sweep_roa_row,
            request,
            start_to_close_timeout=timedelta(hours=1),
        )
        self.rows.append(result)
        return result

    @workflow.run
    async def run(self, config_path: str) -> RoaSummaryResult:
        self.status = "designing"
        plan = await workflow.execute_activity(
            plan_roa_sweep,
            config_path,
            start_to_close_timeout=timedelta(hours=2),
        )
        self.rows_total = plan.grid.points
        self.status = "sweeping"
        results = await asyncio.gather(
            *(self._row(RoaRowRequest(plan=plan, row=row)) for row in range(plan.grid.points))
        )
        self.status = "summarizing"
        summary = await workflow.execute_activity(
            summarize_roa_sweep,
            RoaSummaryRequest(plan=plan, rows=list(results)),
            start_to_close_timeout=timedelta(minutes=5),
        )
        self.counts = summary.counts
        if summary.counterexamples:
            workflow.logger.warning(
                f"{summary.counterexamples} cells break the nested inclusion of the variants"
            )
        self.status = "completed"
        return summary

    @workflow.query
    def get_status(self) -> RoaSweepProgress:
        return RoaSweepProgress(
            status=self.status,
            rows_done=len(self.rows),
            rows_total=self.rows_total,
            counts=self.counts,
        )
