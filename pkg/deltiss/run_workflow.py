import argparse
import asyncio
import time
import uuid
from pathlib import Path

from dotenv import load_dotenv

load_dotenv(dotenv_path='./.env', override=True)

from deltiss.run_worker import TASK_QUEUE, connect
from deltiss.workflows.design_workflow import DesignPipelineInput, DesignPipelineWorkflow
from deltiss.workflows.roa_sweep_workflow import RoaSweepWorkflow


async def run_design(args: argparse.Namespace) -> None:
    client = await connect()
    workflow_id = f"deltiss-design-{uuid.uuid4().hex[:8]}"
    print(f"Starting design workflow: {workflow_id}")
    handle = await client.start_workflow(
        DesignPipelineWorkflow.run,
        DesignPipelineInput(
            config_path=str(Path(args.config).resolve()),
            out_dir=str(Path(args.out).resolve()),
            mode=args.mode,
            shared_gain=args.shared_gain,
            verify=not args.no_verify,
            samples=args.samples,
            seed=args.seed,
        ),
        id=workflow_id,
        task_queue=TASK_QUEUE,
    )
    last = None
    while True:
        status = await handle.query(DesignPipelineWorkflow.get_status)
        if status.stage != last:
            print(f"  stage: {status.stage}")
            last = status.stage
        if status.stage == "completed":
            break
        desc = await handle.describe()
        if desc.status is not None and desc.status.name not in ("RUNNING", "CONTINUED_AS_NEW"):
            break
        await asyncio.sleep(2)

    result = await handle.result()
    print(f"Design bundle: {result.design.design_path}")
    print(f"  gamma_o={result.design.gamma_o:.6g}  gamma_c={result.design.gamma_c:.6g}")
    if result.verification is not None:
        verdict = "passed" if result.verification.passed else f"{result.verification.total_violations} violations"
        print(f"Verification: {verdict}")
        print(result.verification.markdown)
    if result.report is not None and result.report.pdf_file_path:
        print(f"PDF report saved to: {result.report.pdf_file_path}")


async def run_sweep(args: argparse.Namespace) -> None:
    client = await connect()
    workflow_id = f"deltiss-roa-{int(time.time())}"
    print(f"Starting ROA sweep workflow: {workflow_id}")
    handle = await client.start_workflow(
        RoaSweepWorkflow.run,
        str(Path(args.config).resolve()),
        id=workflow_id,
        task_queue=TASK_QUEUE,
    )
    while True:
        progress = await handle.query(RoaSweepWorkflow.get_status)
        print(f"  {progress.status}: {progress.rows_done}/{progress.rows_total} rows")
        if progress.status == "completed":
            break
        desc = await handle.describe()
        if desc.status is not None and desc.status.name not in ("RUNNING", "CONTINUED_AS_NEW"):
            break
        await asyncio.sleep(5)
    summary = await handle.result()
    print(summary.markdown)
    print(f"ROA map written to {summary.csv_path}")


async def main():
    parser = argparse.ArgumentParser(description="Start a deltiss workflow on a running worker")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("design")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="out")
    p.add_argument("--mode", choices=["static", "tube"], default="tube")
    p.add_argument("--shared-gain", action="store_true")
    p.add_argument("--no-verify", action="store_true")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=run_design)
    p = sub.add_parser("sweep-roa")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=run_sweep)
    args = parser.parse_args()
    await args.handler(args)


if __name__ == "__main__":
    asyncio.run(main())
