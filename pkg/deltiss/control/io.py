"""Model files, design bundles, run configurations and run manifests.

Every format is JSON. Floats are written with ``repr`` (shortest round-trip form), so a
save/load cycle reproduces every matrix bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from deltiss.control.control_models import (
    ConstraintSpec,
    DisturbanceSpec,
    Matrix,
    PolytopeSpec,
    RunConfig,
    SynthesisOptions,
    SynthesisTranscript,
)
from deltiss.control.errors import ConfigurationError, ModelError, SchemaError
from deltiss.control.geometry import Polytope
from deltiss.control.model import (
    DisturbanceBounds,
    RnnModel,
    SectorParams,
    Setpoint,
    equilibrium,
    sigmoid_from_kind,
)
from deltiss.control.synthesis import (
    ControllerDesign,
    ControllerMode,
    DesignBundle,
    ObserverDesign,
    TerminalIngredients,
    design_static_pipeline,
    design_tube_pipeline,
)

logger = logging.getLogger(__name__)

DESIGN_FORMAT = "deltiss-design"
DESIGN_VERSION = 1
ENV_PREFIX = "DELTISS_"


class ModelDocument(BaseModel):
    """On-disk form of an RNN model (plus its default disturbance bounds)"""

    name: str = "model"
    description: Optional[str] = None
    A_x: Matrix
    B_u: Matrix
    D_w: Matrix
    B_sigma: Matrix
    A_tilde: Matrix
    B_tilde: Matrix
    D_tilde: Matrix
    C: Matrix
    activations: Optional[list[str]] = None
    Q_w0: Optional[Matrix] = None
    Q_eta0: Optional[Matrix] = None

    def to_model(self) -> RnnModel:
        acts = tuple(sigmoid_from_kind(kind) for kind in (self.activations or []))
        return RnnModel(
            A_x=self.A_x,
            B_u=self.B_u,
            D_w=self.D_w,
            B_sigma=self.B_sigma,
            A_tilde=self.A_tilde,
            B_tilde=self.B_tilde,
            D_tilde=self.D_tilde,
            C=self.C,
            activations=acts,
        )

    @classmethod
    def from_model(cls, m: RnnModel, name: str = "model", bounds: DisturbanceBounds | None = None) -> "ModelDocument":
        return cls(
            name=name,
            A_x=_rows(m.A_x),
            B_u=_rows(m.B_u),
            D_w=_rows(m.D_w),
            B_sigma=_rows(m.B_sigma),
            A_tilde=_rows(m.A_tilde),
            B_tilde=_rows(m.B_tilde),
            D_tilde=_rows(m.D_tilde),
            C=_rows(m.C),
            activations=[act.kind for act in m.activations],
            Q_w0=None if bounds is None else _rows(bounds.Q_w0),
            Q_eta0=None if bounds is None else _rows(bounds.Q_eta0),
        )


class SetpointDocument(BaseModel):
    y_bar: list[float]
    x_bar: list[float]
    u_bar: list[float]


class ObserverDocument(BaseModel):
    L: Matrix
    L_tilde: Matrix
    P_o: Matrix
    gamma_o: float
    S_o: Matrix
    h: list[float]
    Q_ox: Matrix
    Q_owo: Matrix


class ControllerDocument(BaseModel):
    mode: Literal["static", "tube"]
    K: Matrix
    Q_c: Matrix
    gamma_c: float
    h: list[float]
    U_c: Matrix
    Q_cwc: Matrix
    Q_cx_tilde: Matrix
    setpoint: Optional[SetpointDocument] = None


class TerminalDocument(BaseModel):
    P_f: Matrix
    gamma_f: float
    h: list[float]
    S_f: Matrix
    setpoint: SetpointDocument
    Lambda_x: Matrix
    Lambda_u: Matrix


class DesignDocument(BaseModel):
    """Serialized design bundle"""

    format: Literal["deltiss-design"] = DESIGN_FORMAT
    version: int = DESIGN_VERSION
    model: ModelDocument
    Q_w0: Matrix
    Q_eta0: Matrix
    options: SynthesisOptions = Field(default_factory=SynthesisOptions)
    constraints: ConstraintSpec = Field(default_factory=ConstraintSpec)
    observer: ObserverDocument
    controller: ControllerDocument
    terminal: Optional[TerminalDocument] = None
    transcript: SynthesisTranscript = Field(default_factory=SynthesisTranscript)


def _rows(a: np.ndarray) -> Matrix:
    return np.atleast_2d(np.asarray(a, dtype=float)).tolist()


def _arr(value) -> np.ndarray:
    return np.asarray(value, dtype=float)


def _schema_error(exc: ValidationError, source: str) -> SchemaError:
    first = exc.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or "document"
    return SchemaError(f"{source}: {field}: {first['msg']}", cause=field, details={"errors": json.loads(exc.json(include_url=False))})


def _read_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"file not found: {path}", cause="path")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc.msg})", cause="json") from exc


def write_json(path: str | Path, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=False) + "\n")
    return path


# -- models --------------------------------------------------------------------------------


def load_model_document(path: str | Path) -> ModelDocument:
    raw = _read_json(path)
    try:
        return ModelDocument.model_validate(raw)
    except ValidationError as exc:
        raise _schema_error(exc, str(path)) from exc


def load_model(path: str | Path) -> RnnModel:
    """Validated model: shapes, finiteness and activation spot-checks."""
    doc = load_model_document(path)
    try:
        m = doc.to_model()
        m.check_activations()
    except ModelError as exc:
        raise SchemaError(f"{path}: {exc.message}", cause=exc.cause, details=exc.details) from exc
    logger.info(f"Loaded model '{doc.name}' from {path}: n={m.n}, m={m.m}, p={m.p}, nu={m.nu}")
    return m


def disturbance_bounds(doc: ModelDocument, override: DisturbanceSpec | None = None) -> DisturbanceBounds:
    """Bounds from the configuration, falling back to the ones stored with the model."""
    Q_w0 = override.Q_w0 if override is not None and override.Q_w0 is not None else doc.Q_w0
    Q_eta0 = override.Q_eta0 if override is not None and override.Q_eta0 is not None else doc.Q_eta0
    if Q_w0 is None or Q_eta0 is None:
        raise ConfigurationError("disturbance bounds Q_w0 and Q_eta0 are required", cause="disturbance")
    return DisturbanceBounds(_arr(Q_w0), _arr(Q_eta0))


def constraint_sets(spec: ConstraintSpec, m: RnnModel) -> tuple[Polytope | None, Polytope | None]:
    U = spec.input.to_polytope() if spec.input is not None else None
    Y = spec.output.to_polytope() if spec.output is not None else None
    if U is not None and U.dim != m.m:
        raise SchemaError(f"input constraint has dimension {U.dim}, model has m={m.m}", cause="constraints.input")
    if Y is not None and Y.dim != m.p:
        raise SchemaError(f"output constraint has dimension {Y.dim}, model has p={m.p}", cause="constraints.output")
    return U, Y


@dataclass
class RunInputs:
    """A run configuration resolved into the objects the pipelines consume."""

    config: RunConfig
    document: ModelDocument
    model: RnnModel
    bounds: DisturbanceBounds
    U: Polytope | None
    Y: Polytope | None

    def first_setpoint(self) -> Setpoint:
        return equilibrium(self.model, self.config.reference()[0][1])

    def static_design(self) -> DesignBundle:
        return design_static_pipeline(
            self.model, self.bounds, self.first_setpoint(), self.config.synthesis, self.U, self.Y
        )

    def tube_design(self, shared: DesignBundle | None = None) -> DesignBundle:
        """Tube bundle; ``shared`` hands over its observer and gain for re-certification."""
        return design_tube_pipeline(
            self.model,
            self.bounds,
            self.first_setpoint(),
            self.config.synthesis,
            self.U,
            self.Y,
            controller=None if shared is None else shared.controller,
            observer=None if shared is None else shared.observer,
        )

    def design(self, mode: str, shared_gain: bool = False) -> DesignBundle:
        if mode == "static":
            return self.static_design()
        if mode != "tube":
            raise ConfigurationError(f"unknown design mode '{mode}'", cause="mode")
        return self.tube_design(self.static_design() if shared_gain else None)


def resolve_run(config: RunConfig) -> RunInputs:
    doc = load_model_document(config.model)
    m = load_model(config.model)
    U, Y = constraint_sets(config.constraints, m)
    return RunInputs(config, doc, m, disturbance_bounds(doc, config.disturbance), U, Y)


# -- design bundles ------------------------------------------------------------------------


def _setpoint_doc(sp: Setpoint) -> SetpointDocument:
    return SetpointDocument(y_bar=sp.y_bar.tolist(), x_bar=sp.x_bar.tolist(), u_bar=sp.u_bar.tolist())


def _setpoint(doc: SetpointDocument) -> Setpoint:
    return Setpoint(_arr(doc.y_bar), _arr(doc.x_bar), _arr(doc.u_bar))


def _polytope_spec(P: Polytope | None) -> PolytopeSpec | None:
    return None if P is None else PolytopeSpec(G=_rows(P.G), b=P.b.tolist())


def design_document(bundle: DesignBundle) -> DesignDocument:
    obs, ctrl, term = bundle.observer, bundle.controller, bundle.terminal
    return DesignDocument(
        model=ModelDocument.from_model(bundle.model),
        Q_w0=_rows(bundle.bounds.Q_w0),
        Q_eta0=_rows(bundle.bounds.Q_eta0),
        options=bundle.options,
        constraints=ConstraintSpec(input=_polytope_spec(bundle.U), output=_polytope_spec(bundle.Y)),
        observer=ObserverDocument(
            L=_rows(obs.L),
            L_tilde=_rows(obs.L_tilde),
            P_o=_rows(obs.P_o),
            gamma_o=obs.gamma_o,
            S_o=_rows(obs.S_o),
            h=obs.sector.h.tolist(),
            Q_ox=_rows(obs.Q_ox),
            Q_owo=_rows(obs.Q_owo),
        ),
        controller=ControllerDocument(
            mode=ctrl.mode.value,
            K=_rows(ctrl.K),
            Q_c=_rows(ctrl.Q_c),
            gamma_c=ctrl.gamma_c,
            h=ctrl.sector.h.tolist(),
            U_c=_rows(ctrl.U_c),
            Q_cwc=_rows(ctrl.Q_cwc),
            Q_cx_tilde=_rows(ctrl.Q_cx_tilde),
            setpoint=None if ctrl.setpoint is None else _setpoint_doc(ctrl.setpoint),
        ),
        terminal=None
        if term is None
        else TerminalDocument(
            P_f=_rows(term.P_f),
            gamma_f=term.gamma_f,
            h=term.sector.h.tolist(),
            S_f=_rows(term.S_f),
            setpoint=_setpoint_doc(term.setpoint),
            Lambda_x=_rows(term.Lambda_x),
            Lambda_u=_rows(term.Lambda_u),
        ),
        transcript=bundle.transcript,
    )


def bundle_from_document(doc: DesignDocument) -> DesignBundle:
    m = doc.model.to_model()
    acts = m.activations
    if doc.controller.mode == "tube" and doc.terminal is None:
        raise SchemaError("tube design has no terminal block", cause="terminal")
    if doc.controller.mode == "static" and doc.controller.setpoint is None:
        raise SchemaError("static design has no setpoint", cause="controller.setpoint")
    o, c = doc.observer, doc.controller
    observer = ObserverDesign(
        L=_arr(o.L),
        L_tilde=_arr(o.L_tilde),
        P_o=_arr(o.P_o),
        gamma_o=o.gamma_o,
        S_o=_arr(o.S_o),
        sector=SectorParams.from_slopes(o.h, acts),
        Q_ox=_arr(o.Q_ox),
        Q_owo=_arr(o.Q_owo),
    )
    controller = ControllerDesign(
        K=_arr(c.K),
        Q_c=_arr(c.Q_c),
        gamma_c=c.gamma_c,
        sector=SectorParams.from_slopes(c.h, acts),
        U_c=_arr(c.U_c),
        Q_cwc=_arr(c.Q_cwc),
        Q_cx_tilde=_arr(c.Q_cx_tilde),
        mode=ControllerMode(c.mode),
        setpoint=None if c.setpoint is None else _setpoint(c.setpoint),
    )
    terminal = None
    if doc.terminal is not None:
        t = doc.terminal
        terminal = TerminalIngredients(
            P_f=_arr(t.P_f),
            gamma_f=t.gamma_f,
            sector=SectorParams.from_slopes(t.h, acts),
            S_f=_arr(t.S_f),
            setpoint=_setpoint(t.setpoint),
            Lambda_x=_arr(t.Lambda_x),
            Lambda_u=_arr(t.Lambda_u),
        )
    U, Y = constraint_sets(doc.constraints, m)
    return DesignBundle(
        model=m,
        bounds=DisturbanceBounds(_arr(doc.Q_w0), _arr(doc.Q_eta0)),
        observer=observer,
        controller=controller,
        options=doc.options,
        U=U,
        Y=Y,
        terminal=terminal,
        transcript=doc.transcript,
    )


def save_design(bundle: DesignBundle, path: str | Path) -> Path:
    path = write_json(path, design_document(bundle).model_dump(mode="json"))
    logger.info(f"Wrote {bundle.mode.value} design bundle to {path}")
    return path


def load_design(path: str | Path, certify: bool = True) -> DesignBundle:
    """Read a bundle and, unless ``certify`` is off, re-check every LMI block."""
    raw = _read_json(path)
    try:
        doc = DesignDocument.model_validate(raw)
    except ValidationError as exc:
        raise _schema_error(exc, str(path)) from exc
    try:
        bundle = bundle_from_document(doc)
    except (ModelError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"{path}: {exc}", cause=getattr(exc, "cause", None) or "design") from exc
    if certify:
        bundle.require_certified(bundle.options.loop.tol_psd)
    return bundle


# -- run configuration ---------------------------------------------------------------------


def _env(name: str) -> str | None:
    value = os.getenv(ENV_PREFIX + name)
    return value if value not in (None, "") else None


def load_config(path: str | Path) -> RunConfig:
    """RunConfig from a config file or a manifest, with ``DELTISS_*`` overrides applied.

    A relative model path is resolved against the config file's directory.
    """
    path = Path(path)
    raw = _read_json(path)
    if isinstance(raw, dict) and "config" in raw and "config_sha256" in raw:
        raw = raw["config"]
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise _schema_error(exc, str(path)) from exc
    updates: dict[str, Any] = {}
    if (model := _env("MODEL")) is not None:
        updates["model"] = model
    if (out := _env("OUT")) is not None:
        updates["out_dir"] = out
    for name, key in (("SEED", "seed"), ("JOBS", "jobs")):
        value = _env(name)
        if value is not None:
            try:
                updates[key] = int(value)
            except ValueError as exc:
                raise ConfigurationError(f"{ENV_PREFIX}{name} must be an integer, got '{value}'", cause=key) from exc
    if updates:
        config = config.model_copy(update=updates)
    model_path = Path(config.model)
    if not model_path.is_absolute():
        base = Path.cwd() if "model" in updates else path.parent
        config = config.model_copy(update={"model": str((base / model_path).resolve())})
    if updates.get("jobs", config.jobs) < 1:
        raise ConfigurationError("jobs must be >= 1", cause="jobs")
    return config


# -- manifests -----------------------------------------------------------------------------


def tool_version() -> str:
    try:
        return metadata.version("deltiss")
    except metadata.PackageNotFoundError:
        return "0.1.0"


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_digest(config: RunConfig) -> str:
    text = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(
    out_dir: str | Path, command: str, config: RunConfig, outputs: dict[str, Path]
) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "tool": "deltiss",
        "version": tool_version(),
        "command": command,
        "config": config.model_dump(mode="json"),
        "config_sha256": config_digest(config),
        "seed": config.seed,
        "outputs": {name: sha256_file(p) for name, p in sorted(outputs.items())},
    }
    return write_json(out_dir / "manifest.json", manifest)
