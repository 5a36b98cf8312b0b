"""Scenario documents: one YAML file holding robot, state, contacts, wall, controller and tasks.

Units are SI throughout (m, s, kg, N, rad). A document is validated with a
strict schema (unknown keys are errors) and then turned into a
:class:`~impact_wbc.simulator.Scenario`.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import contact as ct
from . import models
from .constraints import IMPACT_LABELS
from .controller import ControllerConfig
from .dynamics import EndEffector, Joint, Link, RobotModel, RobotState, compute
from .simulator import Scenario, Wall
from .tasks import KINDS as TASK_KINDS
from .tasks import TaskSpec

SCHEMA_VERSION = "1"
BUILTIN_MODELS = {
    "planar_biped": models.planar_biped,
    "seven_dof_arm": models.seven_dof_arm,
    "two_link_arm": models.two_link_arm,
}

Vec3 = list[float]


class ScenarioError(ValueError):
    """Invalid scenario document; ``str()`` lists ``path.to.key: problem`` lines."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _check_len(v, n, what):
    if v is not None and len(v) != n:
        raise ValueError(f"{what} must have {n} entries")
    return v


class JointDoc(_Strict):
    type: Literal["revolute", "prismatic", "floating"]
    parent: str | None = None
    axis: Vec3 = [0.0, 0.0, 1.0]
    origin_xyz: Vec3 = [0.0, 0.0, 0.0]
    origin_rpy: Vec3 = [0.0, 0.0, 0.0]

    @field_validator("axis", "origin_xyz", "origin_rpy")
    @classmethod
    def _three(cls, v):
        return _check_len(v, 3, "vector")


class LinkDoc(_Strict):
    name: str
    mass: float = Field(gt=0)
    com: Vec3 = [0.0, 0.0, 0.0]
    inertia: list[float] | list[list[float]] = Field(description="diagonal (3) or full 3x3, kg m^2")
    joint: JointDoc

    @field_validator("inertia")
    @classmethod
    def _inertia_shape(cls, v):
        a = np.asarray(v, dtype=float)
        if a.shape not in ((3,), (3, 3)):
            raise ValueError("inertia must be 3 diagonal entries or a 3x3 matrix")
        return v


class EndEffectorDoc(_Strict):
    name: str
    link: str
    offset: Vec3 = [0.0, 0.0, 0.0]


Bound = Union[float, list[float]]


class LimitsDoc(_Strict):
    """Per-DoF overrides keyed by DoF name; a number ``b`` means ``[-b, b]``."""

    velocity: dict[str, Bound] = {}
    impulsive_torque: dict[str, Bound] = {}
    acceleration: dict[str, Bound] = {}


class RobotDoc(_Strict):
    builtin: str | None = None
    links: list[LinkDoc] | None = None
    end_effectors: list[EndEffectorDoc] = []
    limits: LimitsDoc = LimitsDoc()

    @model_validator(mode="after")
    def _one_source(self):
        if (self.builtin is None) == (self.links is None):
            raise ValueError("give exactly one of 'builtin' or 'links'")
        if self.builtin is not None and self.builtin not in BUILTIN_MODELS:
            raise ValueError(f"unknown builtin model {self.builtin!r}; choose from {sorted(BUILTIN_MODELS)}")
        if self.builtin is not None and self.end_effectors:
            raise ValueError("end_effectors can only be listed with explicit links")
        return self


class StateDoc(_Strict):
    builtin: Literal["standing"] | None = None
    stagger: float = 0.06
    base_height: float = 0.80
    hand_reach: float = 0.40
    hand_height: float = 1.05
    q: list[float] | None = None
    v: list[float] | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.builtin is None) == (self.q is None):
            raise ValueError("give exactly one of 'builtin' or 'q'")
        return self


class ContactDoc(_Strict):
    ee: str
    vertices: list[list[float]] | None = None
    size: list[float] | None = Field(None, description="rectangle [length along x, width along y], m")
    normal: Vec3 = [0.0, 0.0, 1.0]
    mu: float = Field(0.7, gt=0)

    @model_validator(mode="after")
    def _one_shape(self):
        if (self.vertices is None) == (self.size is None):
            raise ValueError("give exactly one of 'vertices' or 'size'")
        if self.size is not None and (len(self.size) != 2 or min(self.size) <= 0):
            raise ValueError("size must be two positive lengths")
        return self


class WallDoc(_Strict):
    normal: Vec3 = Field(description="outward unit normal, pointing towards the robot")
    point: Vec3 | None = None
    distance: float | None = Field(None, description="gap between the initial hand position and the plane, m")
    c_r: float = Field(0.02, ge=0, le=1, description="true restitution used by the momentum reset")
    mode: Literal["rigid", "spring"] = "rigid"
    stiffness: float = Field(5000.0, gt=0)
    threshold: float = Field(20.0, gt=0)

    @model_validator(mode="after")
    def _placement(self):
        if (self.point is None) == (self.distance is None):
            raise ValueError("give exactly one of 'point' or 'distance'")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("wall normal must be unit norm")
        return self


class ControllerDoc(_Strict):
    dt: float = Field(0.005, gt=0)
    impact_duration: float = Field(0.005, gt=0)
    c_r: float = Field(0.02, ge=0, le=1)
    impact_constraints: Literal["on", "off"] | list[str] = "on"
    zmp_set: Literal["feet", "feet+hand"] = "feet+hand"
    baseline_zmp: bool = False
    velocity_form: Literal["realized", "verbatim"] = "realized"
    friction_form: Literal["pyramid", "componentwise"] = "pyramid"
    normalize_rows: bool = True
    regularization: float = Field(1e-6, ge=0)
    max_iter: int | None = None
    surface_feet: bool = True

    @field_validator("impact_constraints")
    @classmethod
    def _labels(cls, v):
        if isinstance(v, list):
            bad = [x for x in v if x not in IMPACT_LABELS]
            if bad:
                raise ValueError(f"unknown constraint labels {bad}; choose from {list(IMPACT_LABELS)}")
        return v


class TaskDoc(_Strict):
    kind: str
    weight: float | None = Field(None, ge=0)
    gains: dict[str, float | list[int]] = {}
    target: float | list[float] | None = None
    ee: str | None = None

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v not in TASK_KINDS:
            raise ValueError(f"unknown task kind {v!r}; choose from {list(TASK_KINDS)}")
        return v


class SimulationDoc(_Strict):
    duration: float = Field(0.5, gt=0)
    seed: int = 0
    wall_jitter: float = Field(0.0, ge=0, description="impact-phase randomization: the wall moves by U(0, jitter) m")
    reset_mode: Literal["paper", "momentum"] = "paper"
    on_infeasible: Literal["abort", "hold"] = "abort"
    velocity_ceiling: float = Field(100.0, gt=0)
    post_impact_time: float | None = Field(None, ge=0)


class ScenarioDocument(_Strict):
    schema_version: str
    name: str = "scenario"
    robot: RobotDoc
    initial_state: StateDoc
    contacts: list[ContactDoc]
    impacting_ee: str
    wall: WallDoc
    controller: ControllerDoc = ControllerDoc()
    tasks: list[TaskDoc] = []
    simulation: SimulationDoc = SimulationDoc()

    @field_validator("schema_version", mode="before")
    @classmethod
    def _version(cls, v):
        if str(v) != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {v!r}; this build reads {SCHEMA_VERSION!r}")
        return str(v)


# ----------------------------------------------------------------- loading


def _format_validation(exc: ValidationError):
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<document>"
        lines.append(f"{path}: {err['msg']}")
    return "\n".join(lines)


def parse_document(raw) -> ScenarioDocument:
    if not isinstance(raw, dict):
        raise ScenarioError("<document>: top level must be a mapping")
    try:
        return ScenarioDocument.model_validate(raw)
    except ValidationError as exc:
        raise ScenarioError(_format_validation(exc)) from None


def read_raw(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"<file>: cannot read {path}: {exc.strerror}") from None
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"<document>: not valid YAML ({exc})") from None


def load_document(path) -> ScenarioDocument:
    return parse_document(read_raw(path))


def set_key(raw, key, value):
    """Copy of ``raw`` with the dotted ``key`` (list indices allowed) set to ``value``."""
    out = copy.deepcopy(raw)
    parts = key.split(".")
    node = out
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(part)
                node[idx]
            except (ValueError, IndexError):
                raise ScenarioError(f"{key}: no list entry {part!r}") from None
            if last:
                node[idx] = value
            else:
                node = node[idx]
        elif isinstance(node, dict):
            if last:
                node[part] = value
            else:
                node = node.setdefault(part, {})
        else:
            raise ScenarioError(f"{key}: {'.'.join(parts[:i])} is not a mapping or list")
    return out


# ---------------------------------------------------------------- building


def _bound_pair(value):
    if isinstance(value, (int, float)):
        return -abs(float(value)), abs(float(value))
    if len(value) != 2 or value[0] > value[1]:
        raise ValueError("a bound must be a number or an ordered [lower, upper] pair")
    return float(value[0]), float(value[1])


def _apply_limits(model, limits: LimitsDoc):
    names = list(model.dof_names)
    fields = {
        "velocity": "velocity_bounds",
        "impulsive_torque": "impulsive_torque_bounds",
        "acceleration": "acceleration_bounds",
    }
    for key, attr in fields.items():
        overrides = getattr(limits, key)
        if not overrides:
            continue
        lo, hi = (b.copy() for b in getattr(model, attr))
        for dof, value in overrides.items():
            if dof not in names:
                raise ScenarioError(f"robot.limits.{key}.{dof}: unknown DoF; model has {names}")
            try:
                lo[names.index(dof)], hi[names.index(dof)] = _bound_pair(value)
            except (TypeError, ValueError) as exc:
                raise ScenarioError(f"robot.limits.{key}.{dof}: {exc}") from None
        setattr(model, attr, (lo, hi))
    return model


def build_model(doc: RobotDoc) -> RobotModel:
    if doc.builtin is not None:
        model = BUILTIN_MODELS[doc.builtin]()
    else:
        index = {}
        links = []
        for i, ld in enumerate(doc.links):
            j = ld.joint
            if j.parent is None:
                parent = -1
            elif j.parent in index:
                parent = index[j.parent]
            else:
                raise ScenarioError(f"robot.links.{i}.joint.parent: {j.parent!r} is not an earlier link")
            inertia = np.asarray(ld.inertia, dtype=float)
            if inertia.ndim == 1:
                inertia = np.diag(inertia)
            links.append(
                Link(ld.name, ld.mass, np.asarray(ld.com, dtype=float), inertia,
                     Joint(j.type, parent, np.asarray(j.axis, dtype=float),
                           np.asarray(j.origin_xyz, dtype=float), np.asarray(j.origin_rpy, dtype=float)))
            )
            index[ld.name] = i
        ees = []
        for i, ed in enumerate(doc.end_effectors):
            if ed.link not in index:
                raise ScenarioError(f"robot.end_effectors.{i}.link: unknown link {ed.link!r}")
            ees.append(EndEffector(ed.name, index[ed.link], np.asarray(ed.offset, dtype=float)))
        try:
            model = RobotModel(links, ees, name="document")
        except ValueError as exc:
            raise ScenarioError(f"robot.links: {exc}") from None
    return _apply_limits(model, doc.limits)


def build_state(model, doc: StateDoc) -> RobotState:
    if doc.builtin == "standing":
        if model.nv != 14 or "hand" not in [e.name for e in model.end_effectors]:
            raise ScenarioError("initial_state.builtin: 'standing' needs the planar_biped model")
        state = models.biped_standing_state(model, doc.stagger, doc.base_height, doc.hand_reach, doc.hand_height)
        q = state.q
    else:
        q = np.asarray(doc.q, dtype=float)
        if q.shape != (model.nq,):
            raise ScenarioError(f"initial_state.q: expected {model.nq} entries, got {q.size}")
    v = np.zeros(model.nv) if doc.v is None else np.asarray(doc.v, dtype=float)
    if v.shape != (model.nv,):
        raise ScenarioError(f"initial_state.v: expected {model.nv} entries, got {v.size}")
    try:
        return RobotState(q, v)
    except ValueError as exc:
        raise ScenarioError(f"initial_state: {exc}") from None


def _contact(model, i, cd: ContactDoc):
    if cd.ee not in [e.name for e in model.end_effectors]:
        raise ScenarioError(f"contacts.{i}.ee: unknown end-effector {cd.ee!r}")
    if cd.size is not None:
        a, b = 0.5 * cd.size[0], 0.5 * cd.size[1]
        verts = [[-a, -b], [a, -b], [a, b], [-a, b]]
    else:
        verts = cd.vertices
    try:
        return ct.ContactSpec(cd.ee, np.asarray(verts, dtype=float), normal=np.asarray(cd.normal, dtype=float), mu=cd.mu)
    except ValueError as exc:
        raise ScenarioError(f"contacts.{i}: {exc}") from None


def _controller_config(doc: ControllerDoc) -> ControllerConfig:
    ic = doc.impact_constraints
    labels = frozenset(IMPACT_LABELS) if ic == "on" else frozenset() if ic == "off" else frozenset(ic)
    return ControllerConfig(
        dt=doc.dt,
        impact_duration=doc.impact_duration,
        c_r=doc.c_r,
        impact_constraints=labels,
        zmp_set=doc.zmp_set,
        baseline_zmp=doc.baseline_zmp,
        velocity_form=doc.velocity_form,
        friction_form=doc.friction_form,
        normalize_rows=doc.normalize_rows,
        regularization=doc.regularization,
        max_iter=doc.max_iter,
        surface_feet=doc.surface_feet,
    )


def _task(i, td: TaskDoc):
    target = td.target
    if isinstance(target, list):
        target = np.asarray(target, dtype=float)
    try:
        return TaskSpec(td.kind, td.weight, dict(td.gains), target, td.ee)
    except ValueError as exc:
        raise ScenarioError(f"tasks.{i}: {exc}") from None


def build_scenario(doc: ScenarioDocument) -> Scenario:
    model = build_model(doc.robot)
    state = build_state(model, doc.initial_state)
    feet = tuple(_contact(model, i, c) for i, c in enumerate(doc.contacts))
    names = [e.name for e in model.end_effectors]
    if doc.impacting_ee not in names:
        raise ScenarioError(f"impacting_ee: unknown end-effector {doc.impacting_ee!r}; model has {names}")
    if doc.impacting_ee in [f.ee_id for f in feet]:
        raise ScenarioError("impacting_ee: already listed as an established contact")
    n = np.asarray(doc.wall.normal, dtype=float)
    if doc.wall.point is not None:
        point = np.asarray(doc.wall.point, dtype=float)
    else:
        hand = compute(model, state).ee_position(doc.impacting_ee)
        point = hand - doc.wall.distance * n
    wall = Wall(point, n, doc.wall.c_r, doc.wall.mode, doc.wall.stiffness, doc.wall.threshold)
    sim = doc.simulation
    try:
        return Scenario(
            model, state, feet, doc.impacting_ee, wall, _controller_config(doc.controller),
            tuple(_task(i, t) for i, t in enumerate(doc.tasks)),
            duration=sim.duration, seed=sim.seed, wall_jitter=sim.wall_jitter, reset_mode=sim.reset_mode,
            on_infeasible=sim.on_infeasible, velocity_ceiling=sim.velocity_ceiling,
            post_impact_time=sim.post_impact_time, name=doc.name,
        )
    except ValueError as exc:
        raise ScenarioError(f"<scenario>: {exc}") from None


def load_scenario(path) -> Scenario:
    return build_scenario(load_document(path))


def reference_path():
    """The shipped reference biped wall-contact scenario."""
    return Path(__file__).parent / "scenarios" / "reference.yaml"
