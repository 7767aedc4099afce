from __future__ import annotations

import asyncio
import logging
import os

from dotenv import load_dotenv

load_dotenv(dotenv_path='.env', override=True)

from temporalio.client import Client
from temporalio.contrib.pydantic import pydantic_data_converter
from temporalio.worker import Worker

from deltiss.workflows.design_activities import (
    plan_roa_sweep,
    summarize_roa_sweep,
    sweep_roa_row,
    synthesize_design,
    verify_bundle,
)
from deltiss.workflows.design_workflow import DesignPipelineWorkflow
from deltiss.workflows.report_activity import render_report
from deltiss.workflows.roa_sweep_workflow import RoaSweepWorkflow

TASK_QUEUE = os.getenv("DELTISS_TASK_QUEUE", "deltiss-queue")


async def connect() -> Client:
    if os.getenv('CONNECT_CLOUD') == 'Y':
        print(f"Connecting to Temporal at {os.getenv('TEMPORAL_ENDPOINT')} in namespace {os.getenv('TEMPORAL_NAMESPACE')}")
        return await Client.connect(
            os.getenv('TEMPORAL_ENDPOINT'),
            namespace=os.getenv('TEMPORAL_NAMESPACE'),
            api_key=os.getenv('TEMPORAL_API_KEY'),
            tls=True,
            data_converter=pydantic_data_converter,
        )
    print("Connecting to localhost:7233")
    return await Client.connect("localhost:7233", data_converter=pydantic_data_converter)


async def main():
    logging.basicConfig(level=os.getenv("DELTISS_LOG_LEVEL", "INFO").upper())
    print("Starting worker...")
    client = await connect()
    print(f"Client created, creating worker on task queue '{TASK_QUEUE}'...")
    worker = Worker(
        client,
        task_queue=TASK_QUEUE,
        workflows=[
            DesignPipelineWorkflow,
            RoaSweepWorkflow,
        ],
        activities=[
            synthesize_design,
            verify_bundle,
            plan_roa_sweep,
            sweep_roa_row,
            summarize_roa_sweep,
            render_report,
        ],
    )
    await worker.run()


if __name__ == "__main__":
    asyncio.run(main())
