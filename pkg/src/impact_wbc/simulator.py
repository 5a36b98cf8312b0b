"""Closed-loop batch simulation around :class:`~impact_wbc.controller.WholeBodyController`.

The continuous phase integrates the controller's ``qdd`` with semi-implicit
Euler (``v+ = v + dt qdd``, then ``q+`` along ``v+``). Wall crossings inside a
step are located by bisection on the sub-step time, the reset map is applied
at that instant and integration resumes for the rest of the step.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import contact as ct
from . import impact
from .controller import ControllerAbort, ControllerConfig, WholeBodyController
from .dynamics import RobotState, compute, integrate_configuration
from .tasks import DETECTION_THRESHOLD

log = logging.getLogger(__name__)

RESET_MODES = ("paper", "momentum")
BISECTION_TOL = 1e-9
MARGIN_TOL = 1e-9  # m; ZMP margins above -MARGIN_TOL count as inside the polygon


class SimulationDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Wall:
    """Plane through ``point`` with outward unit ``normal`` (pointing at the robot)."""

    point: np.ndarray
    normal: np.ndarray
    c_r: float = 0.02
    mode: str = "rigid"
    stiffness: float = 5000.0
    threshold: float = DETECTION_THRESHOLD

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("wall normal must be a unit 3-vector")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        if self.mode not in ("rigid", "spring"):
            raise ValueError("wall mode must be 'rigid' or 'spring'")
        if not 0.0 <= self.c_r <= 1.0:
            raise ValueError("wall restitution must lie in [0, 1]")
        if self.mode == "spring" and not self.stiffness > 0:
            raise ValueError("spring wall needs a positive stiffness")

    def distance(self, x):
        return float(self.normal @ (np.asarray(x) - self.point))

    def shifted(self, offset):
        """The same wall moved ``offset`` metres away from the robot."""
        return replace(self, point=self.point - offset * self.normal)


@dataclass(frozen=True)
class Scenario:
    model: object
    initial_state: RobotState
    feet: tuple
    hand: str
    wall: Wall
    controller: ControllerConfig = ControllerConfig()
    tasks: tuple = ()
    duration: float = 0.5
    seed: int = 0
    wall_jitter: float = 0.0
    reset_mode: str = "paper"
    on_infeasible: str = "abort"
    velocity_ceiling: float = 100.0
    post_impact_time: float | None = None
    name: str = "scenario"

    def __post_init__(self):
        if self.reset_mode not in RESET_MODES:
            raise ValueError(f"reset_mode must be one of {RESET_MODES}")
        if self.on_infeasible not in ("abort", "hold"):
            raise ValueError("on_infeasible must be 'abort' or 'hold'")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.wall_jitter < 0:
            raise ValueError("wall_jitter must be nonnegative")

    def effective_wall(self):
        """Wall after the seeded offset that randomizes the impact phase."""
        if not self.wall_jitter:
            return self.wall
        offset = np.random.default_rng(self.seed).uniform(0.0, self.wall_jitter)
        return self.wall.shifted(offset)


@dataclass
class ImpactEvent:
    time: float
    step: int
    phase: float  # fraction of the control period elapsed at the crossing
    speed: float
    mode: str
    delta_qdot: np.ndarray
    impulses: dict
    delta_tau: np.ndarray
    v_minus: np.ndarray
    v_plus: np.ndarray
    predicted_delta_qdot: np.ndarray | None = None
    predicted_impulses: dict | None = None
    predicted_delta_tau: np.ndarray | None = None


@dataclass
class StepLog:
    step: int
    t: float
    phase: str
    status: str
    q: np.ndarray
    v: np.ndarray
    qdd: np.ndarray | None
    hand_velocity: np.ndarray
    hand_distance: float
    margins: dict = field(default_factory=dict)
    forces: dict = field(default_factory=dict)
    pred_dq: np.ndarray | None = None
    pred_dtau: np.ndarray | None = None
    pred_impulses: dict | None = None
    pred_zmp: np.ndarray | None = None
    pred_zmp_margin: float = float("nan")
    pred_cop_margin: dict = field(default_factory=dict)
    pred_friction_margin: dict = field(default_factory=dict)
    zmp: np.ndarray | None = None
    neglected_ratio: float = float("nan")
    external_force: np.ndarray | None = None
    event: ImpactEvent | None = None
    diagnostics: tuple = ()


@dataclass
class RunResult:
    scenario: Scenario
    logs: list
    events: list
    summary: dict
    aborted: bool


# ------------------------------------------------------------ continuous phase


def step_continuous(model, state: RobotState, qdd, dt, velocity_ceiling=np.inf):
    """Semi-implicit Euler step; the base quaternion is renormalized by the integrator."""
    v_next = np.asarray(state.v, dtype=float) + dt * np.asarray(qdd, dtype=float)
    if not np.all(np.isfinite(v_next)) or np.linalg.norm(v_next) > velocity_ceiling:
        raise SimulationDiverged(f"|v| = {np.linalg.norm(v_next):.3e} exceeds the ceiling at t = {state.t:.4f}")
    q_next = integrate_configuration(model, state.q, v_next, dt)
    return RobotState(q_next, v_next, state.t + dt)


def detect_impact(model, q, v, wall: Wall, hand, dt):
    """Crossing time ``s`` in ``(0, dt]`` of the hand through the wall, or ``None``.

    The configuration moves along ``integrate_configuration(q, v, s)``; an
    event needs a sign change of the signed distance and an approaching
    normal velocity at the crossing.
    """

    def dist(s):
        qs = integrate_configuration(model, q, v, s) if s else q
        return wall.distance(compute(model, RobotState(qs, v)).ee_position(hand))

    d0 = dist(0.0)
    d1 = dist(dt)
    if not (d0 > 0.0 and d1 <= 0.0):
        return None
    lo, hi = 0.0, dt
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if dist(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    s = hi
    kin = compute(model, RobotState(integrate_configuration(model, q, v, s), v))
    if -wall.normal @ kin.ee_velocity(hand) <= 0.0:
        return None
    return s


def spring_force(kin, wall: Wall, hand):
    """Unilateral linear spring: force on the robot along the outward normal."""
    pen = -wall.distance(kin.ee_position(hand))
    return wall.stiffness * max(pen, 0.0) * wall.normal


# --------------------------------------------------------------- reset maps


def paper_reset(pred: impact.ImpulsePrediction, v_minus):
    """``v+ = v- + J_dq v-`` with the maps from the last control step."""
    return v_minus + pred.map_dq @ v_minus, {e: m @ v_minus for e, m in zip(pred.ee_ids, pred.map_force)}, (
        pred.map_tau @ v_minus / pred.duration
    )


def momentum_reset(kin, feet, hand, normal, c_r, v_minus, duration):
    """Impulsive momentum balance with Newton restitution at the hand.

    Established contacts end with zero point and angular velocity; the hand
    gets ``n . x+ = -c_r n . x-`` and no tangential impulse.
    """
    model = kin.model
    rows, targets, blocks = [], [], []
    for ee in feet:
        link = model.end_effectors[model.ee_index(ee)].link
        jc = np.vstack([kin.ee_jacobian(ee), kin.angular_jacobian(link)])
        rows.append(jc)
        targets.append(-jc @ v_minus)
        blocks.append((ee, jc.shape[0]))
    jh = normal @ kin.ee_jacobian(hand)
    rows.append(jh[None, :])
    targets.append(np.array([-(1.0 + c_r) * (jh @ v_minus)]))
    blocks.append((hand, 1))
    jc = np.vstack(rows)
    M = kin.mass_matrix
    n, r = M.shape[0], jc.shape[0]
    k = np.block([[M, -jc.T], [jc, np.zeros((r, r))]])
    rhs = np.concatenate([np.zeros(n), np.concatenate(targets)])
    sol, *_ = np.linalg.lstsq(k, rhs, rcond=None)
    if np.linalg.norm(k @ sol - rhs) > 1e-8 * max(1.0, np.linalg.norm(rhs)):
        raise impact.SingularConfigurationError("impulsive momentum system has no solution")
    dq = sol[:n]
    lam = sol[n:]
    impulses, start = {}, 0
    for ee, size in blocks:
        seg = lam[start : start + size]
        impulses[ee] = seg[0] * normal if ee == hand else seg[:3]
        start += size
    dtau = jc.T @ lam / duration
    return v_minus + dq, impulses, dtau


# ---------------------------------------------------------------------- run


def _initial_wrenches(controller, kin):
    """Contact wrenches of the robot holding its initial pose, used as the first measurement.

    The solve keeps only the posture and CoM tasks and drops the impact rows,
    so it models standing still before the approach starts.
    """
    saved_cfg, saved_tasks = controller.config, controller.tasks
    controller.config = replace(saved_cfg, impact_constraints=frozenset())
    controller.tasks = tuple(t for t in saved_tasks if t.kind in ("posture", "com"))
    try:
        out = controller.step(kin, "approach", {})
    finally:
        controller.config, controller.tasks = saved_cfg, saved_tasks
        controller._warm = controller._warm_key = None
        controller._last_pred = None
    if out.x is None:
        raise ControllerAbort(f"baseline QP at the initial state is {out.status}")
    return {f.ee_id: out.forces[f.ee_id] for f in controller.feet}


def build_controller(scenario: Scenario):
    model = scenario.model
    wall = scenario.effective_wall()
    cfg = scenario.controller
    spec = impact.ImpactSpec(scenario.hand, wall.normal, cfg.c_r, cfg.impact_duration)
    kin0 = compute(model, scenario.initial_state)
    return WholeBodyController(model, scenario.feet, spec, scenario.tasks, cfg,
                               q_ref=scenario.initial_state.q, com_ref=kin0.com())


def run(scenario: Scenario) -> RunResult:
    model = scenario.model
    cfg = scenario.controller
    dt = cfg.dt
    wall = scenario.effective_wall()
    hand = scenario.hand
    controller = build_controller(scenario)
    state = scenario.initial_state
    measured = _initial_wrenches(controller, compute(model, state))
    phase = "approach"
    logs, events = [], []
    aborted = False
    hold_qdd = None
    n_steps = int(round(scenario.duration / dt))
    impact_step = None

    for k in range(n_steps):
        kin = compute(model, state)
        external = {}
        if wall.mode == "spring":
            f_ext = spring_force(kin, wall, hand)
            external[hand] = f_ext
            if phase == "approach" and wall.normal @ f_ext > wall.threshold:
                phase = "spring"
                events.append(ImpactEvent(state.t, k, 0.0, float(-wall.normal @ kin.ee_velocity(hand)), "spring",
                                          np.zeros(model.nv), {hand: np.zeros(3)}, np.zeros(model.nv),
                                          state.v.copy(), state.v.copy()))
        try:
            out = controller.step(kin, phase, measured, external)
        except ControllerAbort as exc:
            logs.append(_log_entry(k, state, phase, "singular", kin, wall, hand, None, external, (str(exc),)))
            aborted = True
            break
        entry = _log_entry(k, state, phase, out.status, kin, wall, hand, out, external, out.diagnostics)
        logs.append(entry)
        if out.qdd is None:
            if scenario.on_infeasible == "abort" or hold_qdd is None:
                aborted = True
                break
            qdd = hold_qdd
        else:
            qdd = out.qdd
            hold_qdd = qdd
            measured = {f.ee_id: out.forces[f.ee_id] for f in scenario.feet}

        try:
            v_next = state.v + dt * qdd
            if not np.all(np.isfinite(v_next)) or np.linalg.norm(v_next) > scenario.velocity_ceiling:
                raise SimulationDiverged(f"|v| = {np.linalg.norm(v_next):.3e} at t = {state.t:.4f}")
            s = None
            if phase == "approach" and wall.mode == "rigid":
                s = detect_impact(model, state.q, v_next, wall, hand, dt)
            if s is None:
                state = step_continuous(model, state, qdd, dt, scenario.velocity_ceiling)
            else:
                q_s = integrate_configuration(model, state.q, v_next, s)
                kin_s = compute(model, RobotState(q_s, v_next))
                event = _apply_reset(scenario, controller, out, kin_s, v_next, state.t + s, k, s / dt, wall)
                events.append(event)
                entry.event = event
                phase = "contact"
                impact_step = k
                q_next = integrate_configuration(model, q_s, event.v_plus, dt - s)
                state = RobotState(q_next, event.v_plus, state.t + dt)
        except (SimulationDiverged, impact.SingularConfigurationError) as exc:
            entry.diagnostics = entry.diagnostics + (str(exc),)
            aborted = True
            break
        if impact_step is not None and scenario.post_impact_time is not None:
            if (k - impact_step) * dt >= scenario.post_impact_time:
                break

    return RunResult(scenario, logs, events, summarize(scenario, logs, events, aborted), aborted)


def _apply_reset(scenario, controller, out, kin_s, v_minus, t, k, frac, wall):
    hand = scenario.hand
    pred = out.prediction if out is not None else None
    if scenario.reset_mode == "paper":
        if pred is None:
            raise impact.SingularConfigurationError("no impulse prediction available for reset_mode 'paper'")
        v_plus, impulses, dtau = paper_reset(pred, v_minus)
    else:
        v_plus, impulses, dtau = momentum_reset(
            kin_s, [f.ee_id for f in scenario.feet], hand, wall.normal, wall.c_r, v_minus,
            scenario.controller.impact_duration,
        )
    event = ImpactEvent(
        time=t,
        step=k,
        phase=frac,
        speed=float(-wall.normal @ kin_s.ee_velocity(hand)),
        mode=scenario.reset_mode,
        delta_qdot=v_plus - v_minus,
        impulses=impulses,
        delta_tau=dtau,
        v_minus=v_minus.copy(),
        v_plus=v_plus,
    )
    if pred is not None:
        event.predicted_delta_qdot = pred.delta_qdot.copy()
        event.predicted_impulses = {e: i.copy() for e, i in zip(pred.ee_ids, pred.impulses)}
        event.predicted_delta_tau = pred.delta_tau.copy()
    return event


def _log_entry(k, state, phase, status, kin, wall, hand, out, external, diagnostics):
    entry = StepLog(
        step=k,
        t=state.t,
        phase=phase,
        status=status,
        q=np.asarray(state.q).copy(),
        v=np.asarray(state.v).copy(),
        qdd=None if out is None or out.qdd is None else out.qdd.copy(),
        hand_velocity=kin.ee_velocity(hand),
        hand_distance=wall.distance(kin.ee_position(hand)),
        external_force=external.get(hand),
        diagnostics=tuple(diagnostics),
    )
    if out is not None:
        entry.margins = dict(out.margins)
        entry.forces = {e: f.copy() for e, f in out.forces.items()}
        entry.zmp = out.actual_zmp
        if out.prediction is not None:
            p = out.prediction
            entry.pred_dq = p.delta_qdot.copy()
            entry.pred_dtau = p.delta_tau.copy()
            entry.pred_impulses = {e: i.copy() for e, i in zip(p.ee_ids, p.impulses)}
            entry.pred_zmp = out.predicted_zmp
            entry.pred_zmp_margin = out.predicted_zmp_margin
            entry.pred_cop_margin = dict(out.predicted_cop_margin)
            entry.pred_friction_margin = dict(out.predicted_friction_margin)
            entry.neglected_ratio = out.neglected_ratio
    return entry


# ------------------------------------------------------------------ summary


def _finite_max(values, default=0.0):
    values = [v for v in values if np.isfinite(v)]
    return float(max(values)) if values else default


def summarize(scenario, logs, events, aborted):
    model = scenario.model
    lo, hi = model.velocity_bounds
    tlo, thi = model.impulsive_torque_bounds
    wall = scenario.effective_wall()
    infeasible = sum(1 for e in logs if e.status not in ("optimal",))
    approach = [e for e in logs if e.phase == "approach"]
    speeds = [float(-wall.normal @ e.hand_velocity) for e in approach]
    rigid = [ev for ev in events if ev.mode != "spring"]
    velocity_violation = 0.0
    torque_violation = 0.0
    peak_dtau = np.zeros(model.nv)
    for ev in rigid:
        over = np.maximum(ev.v_plus - hi, lo - ev.v_plus)
        velocity_violation = max(velocity_violation, float(np.max(over)))
        tover = np.maximum(ev.delta_tau - thi, tlo - ev.delta_tau)
        torque_violation = max(torque_violation, float(np.max(tover)))
        peak_dtau = np.maximum(peak_dtau, np.abs(ev.delta_tau))
    pred_peak_dtau = np.zeros(model.nv)
    for e in approach:
        if e.pred_dtau is not None:
            pred_peak_dtau = np.maximum(pred_peak_dtau, np.abs(e.pred_dtau))
    dur = scenario.controller.impact_duration
    pred_forces = [np.linalg.norm(e.pred_impulses[scenario.hand]) / dur for e in approach if e.pred_impulses]
    zmp_margins = [e.pred_zmp_margin for e in approach if np.isfinite(e.pred_zmp_margin)]
    zmps = np.array([e.pred_zmp for e in approach if e.pred_zmp is not None]).reshape(-1, 2)
    first = rigid[0] if rigid else None
    return {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "steps": len(logs),
        "aborted": bool(aborted),
        "infeasible_steps": infeasible,
        "impact_events": len(events),
        "impact_time": None if not events else float(events[0].time),
        "impact_phase": None if first is None else float(first.phase),
        "impact_speed": None if not events else float(events[0].speed),
        "max_approach_speed": _finite_max(speeds),
        "peak_predicted_impulsive_force": _finite_max(pred_forces),
        "realized_impulsive_force": None if first is None else float(np.linalg.norm(first.impulses[scenario.hand]) / dur),
        "predicted_impulsive_force_at_impact": None
        if first is None or first.predicted_impulses is None
        else float(np.linalg.norm(first.predicted_impulses[scenario.hand]) / dur),
        "peak_realized_delta_tau": [float(x) for x in peak_dtau],
        "peak_predicted_delta_tau": [float(x) for x in pred_peak_dtau],
        "post_impact_velocity_violation": velocity_violation,
        "impulsive_torque_violation": torque_violation,
        "min_predicted_zmp_margin": None if not zmp_margins else float(min(zmp_margins)),
        "predicted_zmp_excursions": int(sum(m < -MARGIN_TOL for m in zmp_margins)),
        "predicted_zmp_x_range": None if not len(zmps) else [float(zmps[:, 0].min()), float(zmps[:, 0].max())],
        "max_neglected_ratio": _finite_max([e.neglected_ratio for e in approach]),
        "neglected_ratio_violations": int(sum(e.neglected_ratio > 0.05 for e in approach if np.isfinite(e.neglected_ratio))),
    }


# ------------------------------------------------------------------ output


def _fmt(x):
    return format(float(x), ".17e")


def csv_columns(model, feet, hand):
    """Fixed column order of ``steps.csv``."""
    cols = ["step", "t", "phase", "status"]
    cols += [f"q{i}" for i in range(model.nq)]
    cols += [f"v{i}" for i in range(model.nv)]
    cols += [f"qdd{i}" for i in range(model.nv)]
    cols += ["hand_vx", "hand_vy", "hand_vz", "hand_distance"]
    for f in feet:
        cols += [f"F_{f}_{c}" for c in ("tx", "ty", "tz", "fx", "fy", "fz")]
    cols += [f"f_{hand}_{c}" for c in ("x", "y", "z")]
    cols += [f"ext_{hand}_{c}" for c in ("x", "y", "z")]
    cols += ["zmp_x", "zmp_y"]
    cols += [f"pred_dq{i}" for i in range(model.nv)]
    cols += [f"pred_dtau{i}" for i in range(model.nv)]
    for e in list(feet) + [hand]:
        cols += [f"pred_I_{e}_{c}" for c in ("x", "y", "z")]
    cols += ["pred_zmp_x", "pred_zmp_y", "pred_zmp_margin"]
    cols += [f"pred_cop_margin_{f}" for f in feet]
    cols += [f"pred_friction_margin_{f}" for f in feet]
    cols += ["neglected_ratio"]
    cols += ["impact", "impact_time", "impact_speed"]
    cols += [f"real_dq{i}" for i in range(model.nv)]
    cols += [f"real_dtau{i}" for i in range(model.nv)]
    cols += [f"real_I_{hand}_{c}" for c in ("x", "y", "z")]
    return cols


def _force_part(i):
    return None if i is None else np.asarray(i)[-3:]


def _vec(x, n):
    if x is None:
        return [""] * n
    return [_fmt(v) for v in np.asarray(x).ravel()]


def _num(x):
    return "" if x is None or not np.isfinite(x) else _fmt(x)


def steps_csv(result: RunResult) -> str:
    sc = result.scenario
    model = sc.model
    feet = [f.ee_id for f in sc.feet]
    hand = sc.hand
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_columns(model, feet, hand))
    for e in result.logs:
        row = [str(e.step), _fmt(e.t), e.phase, e.status]
        row += _vec(e.q, model.nq) + _vec(e.v, model.nv) + _vec(e.qdd, model.nv)
        row += _vec(e.hand_velocity, 3) + [_num(e.hand_distance)]
        for f in feet:
            row += _vec(e.forces.get(f), 6)
        row += _vec(e.forces.get(hand), 3)
        row += _vec(e.external_force, 3)
        row += _vec(e.zmp, 2)
        row += _vec(e.pred_dq, model.nv) + _vec(e.pred_dtau, model.nv)
        for ee in feet + [hand]:
            row += _vec(None if e.pred_impulses is None else _force_part(e.pred_impulses.get(ee)), 3)
        row += _vec(e.pred_zmp, 2) + [_num(e.pred_zmp_margin)]
        row += [_num(e.pred_cop_margin.get(f)) for f in feet]
        row += [_num(e.pred_friction_margin.get(f)) for f in feet]
        row += [_num(e.neglected_ratio)]
        ev = e.event
        row += ["1" if ev else "0", _num(ev.time) if ev else "", _num(ev.speed) if ev else ""]
        row += _vec(ev.delta_qdot if ev else None, model.nv)
        row += _vec(ev.delta_tau if ev else None, model.nv)
        row += _vec(ev.impulses.get(hand) if ev else None, 3)
        w.writerow(row)
    return buf.getvalue()


def margins_csv(result: RunResult) -> str:
    """Long-format constraint-margin trace: one row per (step, block)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "t", "block", "margin"])
    for e in result.logs:
        for key in sorted(e.margins):
            w.writerow([str(e.step), _fmt(e.t), key, _fmt(e.margins[key])])
    return buf.getvalue()


def summary_json(result: RunResult) -> str:
    return json.dumps(result.summary, indent=2, sort_keys=True) + "\n"
