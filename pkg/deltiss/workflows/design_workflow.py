from dataclasses import dataclass
from datetime import timedelta
from typing import Literal, Optional

from temporalio import workflow
from temporalio.common import RetryPolicy

with workflow.unsafe.imports_passed_through():
    from deltiss.workflows.design_activities import (
        DesignRequest,
        DesignResult,
        VerifyRequest,
        VerifyResult,
        synthesize_design,
        verify_bundle,
    )
    from deltiss.workflows.report_activity import ReportRequest, ReportResult, render_report


@dataclass
class DesignPipelineInput:
    config_path: str
    out_dir: str
    mode: Literal["static", "tube"] = "tube"
    shared_gain: bool = False
    verify: bool = True
    samples: int = 10_000
    seed: int = 0


@dataclass
class DesignPipelineStatus:
    stage: str
    design: Optional[DesignResult] = None
    verification: Optional[VerifyResult] = None


@dataclass
class DesignPipelineResult:
    design: DesignResult
    verification: Optional[VerifyResult] = None
    report: Optional[ReportResult] = None


_RETRY = RetryPolicy(
    backoff_coefficient=2.0,
    initial_interval=timedelta(seconds=1),
    maximum_interval=timedelta(seconds=5),
    maximum_attempts=3,
)


@workflow.defn
class DesignPipelineWorkflow:
    """Synthesis, optional Monte-Carlo verification and the rendered report."""

    def __init__(self) -> None:
        self.stage = "pending"
        self.design: Optional[DesignResult] = None
        self.verification: Optional[VerifyResult] = None

    @workflow.run
    async def run(self, input: DesignPipelineInput) -> DesignPipelineResult:
        self.stage = "synthesizing"
        self.design = await workflow.execute_activity(
            synthesize_design,
            DesignRequest(
                config_path=input.config_path,
                mode=input.mode,
                shared_gain=input.shared_gain,
                out_dir=input.out_dir,
            ),
            start_to_close_timeout=timedelta(hours=2),
            retry_policy=_RETRY,
        )
        workflow.logger.info(
            f"Design ready after {self.design.stage_solves} stage-solves: {self.design.design_path}"
        )
        if not input.verify:
            self.stage = "completed"
            return DesignPipelineResult(design=self.design)

        self.stage = "verifying"
        self.verification = await workflow.execute_activity(
            verify_bundle,
            VerifyRequest(
                design_path=self.design.design_path,
                out_dir=input.out_dir,
                samples=input.samples,
                seed=input.seed,
            ),
            start_to_close_timeout=timedelta(hours=1),
            retry_policy=_RETRY,
        )

        self.stage = "reporting"
        report = await workflow.execute_activity(
            render_report,
            ReportRequest(
                markdown_content=self.verification.markdown,
                title=f"Verification of the {self.design.mode} design",
                out_dir=input.out_dir,
                stem="verification",
            ),
            start_to_close_timeout=timedelta(seconds=60),
        )
        self.stage = "completed"
        return DesignPipelineResult(design=self.design, verification=self.verification, report=report)

    @workflow.query
    def get_status(self) -> DesignPipelineStatus:
        return DesignPipelineStatus(
            stage=self.stage, design=self.design, verification=self.verification
        )
