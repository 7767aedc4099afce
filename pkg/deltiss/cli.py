"""Command-line entry point: synthesize, simulate, verify, sweep-roa, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

from deltiss.control import io
from deltiss.control.control_models import RunConfig
from deltiss.control.errors import DESIGN_FAILURES, DeltissError, DesignCertificationError
from deltiss.control.model import (
    RnnModel,
    equilibrium,
    sector_bound,
)
from deltiss.control.sim import (
    DisturbancePolicy,
    boundedness_radius,
    output_tube_fraction,
    roa_sweep,
    run_closed_loop,
    verify_design,
)
from deltiss.control.synthesis import (
    DesignBundle,
    check_detectability,
    check_stabilizability,
)
from deltiss.workflows.report_activity import ReportRequest, render_markdown_report

logger = logging.getLogger(__name__)
console = Console(stderr=False)


class _Context:
    """Resolved config, model and output directory of one command."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.config: RunConfig = io.load_config(args.config)
        updates = {}
        if getattr(args, "seed", None) is not None:
            updates["seed"] = args.seed
        if getattr(args, "jobs", None) is not None:
            updates["jobs"] = args.jobs
        if getattr(args, "out", None) is not None:
            updates["out_dir"] = args.out
        if getattr(args, "horizon", None) is not None:
            updates["horizon"] = args.horizon
        if updates:
            self.config = RunConfig.model_validate({**self.config.model_dump(), **updates})
        self.out = Path(self.config.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.run: io.RunInputs = io.resolve_run(self.config)
        self.model: RnnModel = self.run.model
        self.outputs: dict[str, Path] = {}

    def emit(self, name: str, path: Path) -> None:
        self.outputs[name] = path
        logger.info(f"Wrote {path}")

    def finish(self, command: str) -> None:
        io.write_manifest(self.out, command, self.config, self.outputs)


def _design_for(ctx: _Context, args: argparse.Namespace) -> DesignBundle:
    if getattr(args, "design", None):
        return io.load_design(args.design)
    return ctx.run.design("static" if ctx.config.controller == "static" else "tube")


def _gnuplot_trajectory(path: Path, csv_name: str, columns: list[str]) -> Path:
    y_cols = [i + 1 for i, c in enumerate(columns) if c.startswith("y[")]
    ref_cols = [i + 1 for i, c in enumerate(columns) if c.startswith("ybar[")]
    plots = [f"'{csv_name}' using 1:{c} with lines title '{columns[c - 1]}'" for c in y_cols]
    plots += [f"'{csv_name}' using 1:{c} with lines dt 2 title '{columns[c - 1]}'" for c in ref_cols]
    path.write_text(
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'k'\n"
        "set terminal pngcairo size 1000,500\nset output 'trajectory.png'\n"
        "plot " + ", \\\n     ".join(plots) + "\n"
    )
    return path


def _gnuplot_roa(path: Path, csv_name: str, variants: list[str]) -> Path:
    plots = [
        f"'{csv_name}' using 1:(stringcolumn(3) eq '{v}' && $4 == 1 ? $2 : 1/0) "
        f"with points pt {5 + i} title '{v}'"
        for i, v in enumerate(variants)
    ]
    path.write_text(
        "set datafile separator ','\nset xlabel 'ybar0'\nset ylabel 'ybar'\n"
        "set terminal pngcairo size 700,700\nset output 'roa.png'\n"
        "plot " + ", \\\n     ".join(plots) + "\n"
    )
    return path


# -- commands ------------------------------------------------------------------------------


def cmd_synthesize(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    try:
        if args.mode == "static":
            bundle = ctx.run.static_design()
        else:
            bundle = ctx.run.design("tube", shared_gain=args.shared_gain)
    except DESIGN_FAILURES as exc:
        ctx.emit("transcript", io.write_json(ctx.out / "transcript.json", exc.transcript))
        ctx.finish("synthesize")
        raise
    ctx.emit("design", io.save_design(bundle, ctx.out / "design.json"))
    ctx.emit(
        "transcript",
        io.write_json(ctx.out / "transcript.json", bundle.transcript.model_dump(mode="json")),
    )
    ctx.finish("synthesize")

    table = Table(title=f"{args.mode} design")
    table.add_column("quantity")
    table.add_column("value", justify="right")
    table.add_row("gamma_o", f"{bundle.observer.gamma_o:.6g}")
    table.add_row("h_o", ", ".join(f"{h:.6g}" for h in bundle.observer.sector.h))
    table.add_row("gamma_c", f"{bundle.controller.gamma_c:.6g}")
    table.add_row("h_c", ", ".join(f"{h:.6g}" for h in bundle.controller.sector.h))
    table.add_row("K", np.array2string(bundle.controller.K, precision=6))
    if bundle.terminal is not None:
        table.add_row("gamma_f", f"{bundle.terminal.gamma_f:.6g}")
    table.add_row("stage-solves", str(len(bundle.transcript.attempts)))
    console.print(table)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    bundle = _design_for(ctx, args)
    cfg = ctx.config
    controller = "static" if bundle.mode.value == "static" else "nmpc"
    policy = DisturbancePolicy(
        cfg.disturbance.policy, bundle.bounds, cfg.seed, bundle.model, bundle.observer
    )
    traj = run_closed_loop(
        bundle, controller, cfg.reference(), policy, cfg.steps, cfg.horizon, cfg.nmpc
    )
    csv_path = traj.to_csv(ctx.out / "trajectory.csv")
    ctx.emit("trajectory", csv_path)
    ctx.emit("plot", _gnuplot_trajectory(ctx.out / "trajectory.gp", csv_path.name, traj.columns()))

    sp_final = equilibrium(bundle.model, cfg.reference()[-1][1])
    summary = {
        "controller": controller,
        "steps": traj.steps,
        "max_constraint_violation": float(np.max(traj.constraint_violation)),
        "tube_member_share": float(np.mean(traj.tube_member)),
        "locality_member_share": float(np.mean(traj.locality_member)),
        "boundedness_radius": boundedness_radius(traj, sp_final.x_bar),
        "output_tube_share": output_tube_fraction(bundle, traj),
    }
    if traj.has_nominal:
        summary["fhocp_status"] = {s: traj.fhocp_status.count(s) for s in sorted(set(traj.fhocp_status))}
        summary["candidate_infeasible_steps"] = [
            k for k, c in enumerate(traj.candidate_feasible) if c is False
        ]
    ctx.emit("summary", io.write_json(ctx.out / "summary.json", summary))
    ctx.finish("simulate")
    console.print_json(json.dumps(summary))
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    bundle = _design_for(ctx, args)
    samples = args.samples or ctx.config.verify_samples
    report = verify_design(bundle, samples, ctx.config.seed)
    ctx.emit("report", io.write_json(ctx.out / "verification.json", report.model_dump(mode="json")))
    md_path = ctx.out / "verification.md"
    md_path.write_text(report.to_markdown())
    ctx.emit("markdown", md_path)
    rendered = render_markdown_report(
        ReportRequest(
            markdown_content=report.to_markdown(),
            title="Verification report",
            out_dir=str(ctx.out),
            stem="verification",
        )
    )
    ctx.emit("html", Path(rendered.html_file_path))
    if rendered.success:
        # not hashed: weasyprint stamps creation metadata into the file
        logger.info(f"Wrote {rendered.pdf_file_path}")
    ctx.finish("verify")

    table = Table(title="Verification suites")
    for col in ("suite", "evaluated", "violations", "worst margin"):
        table.add_column(col, justify="right" if col != "suite" else "left")
    for s in report.suites:
        table.add_row(s.name, str(s.evaluated), str(s.violations), f"{s.worst_margin:.6g}")
    console.print(table)
    if not report.passed:
        worst = min(report.suites, key=lambda s: s.worst_margin)
        raise DesignCertificationError(
            f"verification found {report.total_violations} violations",
            cause=worst.name,
            details={"violations": {s.name: s.violations for s in report.suites}},
        )
    return 0


def cmd_sweep_roa(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    cfg = ctx.config
    static = ctx.run.static_design()
    tube = ctx.run.tube_design(shared=static)
    roa = roa_sweep(static, tube, cfg.roa, cfg.nmpc, cfg.disturbance.policy, cfg.seed, cfg.jobs)
    csv_path = roa.to_csv(ctx.out / "roa.csv")
    ctx.emit("roa", csv_path)
    ctx.emit("plot", _gnuplot_roa(ctx.out / "roa.gp", csv_path.name, roa.variants))
    counter = roa.counterexamples()
    md = roa.to_markdown()
    md += f"\nNested-inclusion counterexamples: {len(counter)}\n"
    for y0, y, smaller, larger in counter:
        md += f"- ybar0={y0:.6g}, ybar={y:.6g}: {smaller} feasible, {larger} not\n"
    md_path = ctx.out / "roa_summary.md"
    md_path.write_text(md)
    ctx.emit("summary", md_path)
    ctx.finish("sweep-roa")

    total = len(roa.y0_values) * len(roa.y_values)
    table = Table(title="Region of attraction")
    table.add_column("variant")
    table.add_column("feasible cells", justify="right")
    table.add_column("share", justify="right")
    for variant, count in roa.counts().items():
        table.add_row(variant, f"{count} / {total}", f"{count / total:.6f}")
    console.print(table)
    if counter:
        logger.warning(f"{len(counter)} cells break the nested inclusion of the variants")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    m = ctx.model
    eigs = np.linalg.eigvals(m.A)
    info: dict = {
        "dimensions": {"n": m.n, "m": m.m, "p": m.p, "d": m.d, "nu": m.nu},
        "spectral_radius_A": float(np.max(np.abs(eigs))),
        "detectable": check_detectability(m.A, m.C),
        "stabilizable": check_stabilizability(m.A, m.B),
        "activations": [act.kind for act in m.activations],
    }
    try:
        sp = ctx.run.first_setpoint()
        info["setpoint"] = {"y_bar": sp.y_bar.tolist(), "x_bar": sp.x_bar.tolist(), "u_bar": sp.u_bar.tolist()}
        info["v_eq"] = sp.v_eq(m).tolist()
    except DeltissError as exc:
        info["setpoint"] = {"error": exc.cause}
    if args.design:
        bundle = io.load_design(args.design)
        info["design"] = {
            "mode": bundle.mode.value,
            "gamma_o": bundle.observer.gamma_o,
            "gamma_c": bundle.controller.gamma_c,
            "h_o": bundle.observer.sector.h.tolist(),
            "h_c": bundle.controller.sector.h.tolist(),
            "K": bundle.controller.K.tolist(),
            "gamma_f": None if bundle.terminal is None else bundle.terminal.gamma_f,
        }
    ctx.emit("inspect", io.write_json(ctx.out / "inspect.json", info))
    ctx.finish("inspect")

    table = Table(title="Sector bounds of the activations")
    table.add_column("h", justify="right")
    for i in range(m.nu):
        table.add_column(f"v_bar[{i}]", justify="right")
    for h in (1.0, 1.5, 2.0, 4.0):
        table.add_row(f"{h:g}", *(f"{sector_bound(act, h):.6g}" for act in m.activations))
    console.print_json(json.dumps(info))
    console.print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deltiss",
        description="Observer, robust controller and tube-NMPC synthesis for RNN plant models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="Run configuration (JSON) or a manifest.json")
        p.add_argument("--out", help="Output directory (created if absent)")
        p.add_argument("--seed", type=int, help="Random seed (overrides DELTISS_SEED)")

    p = sub.add_parser("synthesize", help="Run the design pipeline and write a design bundle")
    common(p)
    p.add_argument("--mode", choices=["static", "tube"], default="tube")
    p.add_argument(
        "--shared-gain",
        action="store_true",
        help="Certify the static gain as the tube controller instead of designing a new one",
    )
    p.set_defaults(handler=cmd_synthesize)

    p = sub.add_parser("simulate", help="Closed-loop simulation")
    common(p)
    p.add_argument("--design", help="Existing design bundle (re-certified on load)")
    p.add_argument("--horizon", type=int, help="NMPC horizon N")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("verify", help="Monte-Carlo verification of a design")
    common(p)
    p.add_argument("--design", help="Existing design bundle (re-certified on load)")
    p.add_argument("--samples", type=int, help="Samples per suite")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("sweep-roa", help="Region-of-attraction comparison of the controllers")
    common(p)
    p.add_argument("--jobs", type=int, help="Worker processes (overrides DELTISS_JOBS)")
    p.set_defaults(handler=cmd_sweep_roa)

    p = sub.add_parser("inspect", help="Model and design summary")
    common(p)
    p.add_argument("--design", help="Design bundle to summarize")
    p.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv(dotenv_path=".env", override=True)
    logging.basicConfig(level=os.getenv("DELTISS_LOG_LEVEL", "INFO").upper())
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except DeltissError as exc:
        logger.error(f"{args.command} failed: {exc.message}")
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
