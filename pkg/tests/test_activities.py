import json
from pathlib import Path

import pytest
from temporalio.exceptions import ApplicationError
from temporalio.testing import ActivityEnvironment

from deltiss.control import io
from deltiss.control.control_models import NmpcOptions, RoaGridSpec
from deltiss.workflows.design_activities import (
    DesignRequest,
    RoaRowRequest,
    RoaRowResult,
    RoaSummaryRequest,
    RoaSweepPlan,
    VerifyRequest,
    summarize_roa_sweep,
    sweep_roa_row,
    synthesize_design,
    verify_bundle,
)
from deltiss.workflows.report_activity import ReportRequest, render_report


@pytest.mark.asyncio
async def test_render_report_writes_html(tmp_path):
    env = ActivityEnvironment()
    result = await env.run(
        render_report,
        ReportRequest(
            markdown_content="| suite | violations |\n|---|---|\n| observer_rpi | 0 |\n",
            title="Verification report",
            out_dir=str(tmp_path),
            stem="verification",
        ),
    )
    html = Path(result.html_file_path).read_text()
    assert "<table>" in html
    assert "Verification report" in html
    if result.success:
        assert Path(result.pdf_file_path).is_file()
    else:
        assert result.error_message


@pytest.mark.asyncio
async def test_domain_errors_become_non_retryable(tmp_path):
    env = ActivityEnvironment()
    with pytest.raises(ApplicationError) as info:
        await env.run(synthesize_design, DesignRequest(config_path=str(tmp_path / "missing.cfg")))
    assert info.value.type == "ConfigurationError"
    assert info.value.non_retryable
    assert info.value.details[0]["cause"] == "path"


@pytest.mark.asyncio
async def test_summarize_merges_rows(tmp_path):
    plan = RoaSweepPlan(
        static_design="unused",
        tube_design="unused",
        grid=RoaGridSpec(y_min=-0.1, y_max=0.1, points=2, horizons=[3]),
        nmpc=NmpcOptions(),
        policy="uniform",
        seed=0,
        out_dir=str(tmp_path),
        variants=["static", "nmpc(3)"],
    )
    rows = [
        RoaRowResult(row=1, cells={"static": [False, True], "nmpc(3)": [True, True]}),
        RoaRowResult(row=0, cells={"static": [True, True], "nmpc(3)": [True, False]}),
    ]
    env = ActivityEnvironment()
    summary = await env.run(summarize_roa_sweep, RoaSummaryRequest(plan=plan, rows=rows))
    assert summary.counts == {"static": 3, "nmpc(3)": 3}
    assert summary.counterexamples == 1
    assert Path(summary.csv_path).is_file()
    assert (tmp_path / "roa_summary.md").read_text() == summary.markdown


@pytest.mark.slow
@pytest.mark.asyncio
async def test_synthesize_and_verify_activities(d1_config, tmp_path):
    env = ActivityEnvironment()
    design = await env.run(
        synthesize_design,
        DesignRequest(config_path=str(d1_config()), mode="static", out_dir=str(tmp_path)),
    )
    assert design.mode == "static"
    assert design.gamma_f is None
    assert Path(design.design_path).is_file()
    verified = await env.run(
        verify_bundle,
        VerifyRequest(design_path=design.design_path, out_dir=str(tmp_path), samples=500),
    )
    assert verified.passed
    assert Path(verified.report_path).is_file()


@pytest.mark.slow
@pytest.mark.asyncio
async def test_row_activity_rejects_a_tampered_bundle(d1_static, d1_tube, tmp_path):
    static_path = io.save_design(d1_static, tmp_path / "design_static.json")
    tube_path = io.save_design(d1_tube, tmp_path / "design_tube.json")
    doc = json.loads(static_path.read_text())
    doc["observer"]["gamma_o"] = 1e-6
    static_path.write_text(json.dumps(doc))
    plan = RoaSweepPlan(
        static_design=str(static_path),
        tube_design=str(tube_path),
        grid=RoaGridSpec(y_min=-0.1, y_max=0.1, points=2, horizons=[3]),
        nmpc=NmpcOptions(),
        policy="uniform",
        seed=0,
        out_dir=str(tmp_path),
        variants=["static", "nmpc(3)"],
    )
    env = ActivityEnvironment()
    with pytest.raises(ApplicationError) as info:
        await env.run(sweep_roa_row, RoaRowRequest(plan=plan, row=0))
    assert info.value.type == "DesignCertificationError"
    assert info.value.non_retryable
