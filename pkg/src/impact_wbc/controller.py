"""Whole-body QP controller with optional impact-aware constraints.

One call to :meth:`WholeBodyController.step` builds and solves

    min  sum_i w_i |e_i(x)|^2
    s.t. floating-base dynamics, contact kinematics (Eq1), CoP/friction (Eq3),
         velocity/acceleration boxes, and, before the impact, the rows of
         Eq17-Eq21 built from the one-step-ahead impulse prediction,

over ``x = (qdd, F_feet, [f_hand])``. Actuated torques are left implicit: any
``qdd`` that satisfies the six base rows is realizable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import constraints as cs
from . import contact as ct
from . import impact, qp, tasks
from .constraints import IMPACT_LABELS, VariableLayout
from .impact import ImpactSpec

log = logging.getLogger(__name__)

ZMP_SETS = ("feet", "feet+hand")


class ControllerAbort(RuntimeError):
    pass


BASE_WEIGHT = 100.0  # default weight of the base-attitude rows in the posture task


@dataclass(frozen=True)
class ControllerConfig:
    dt: float = 0.005
    impact_duration: float = 0.005
    c_r: float = 0.02
    impact_constraints: frozenset = frozenset(IMPACT_LABELS)
    zmp_set: str = "feet+hand"
    baseline_zmp: bool = False
    velocity_form: str = "realized"
    friction_form: str = "pyramid"
    normalize_rows: bool = True
    regularization: float = 1e-6
    max_iter: int | None = None
    surface_feet: bool = True  # feet hold orientation in the impulse model, matching the flat-foot contact rows

    def __post_init__(self):
        if not self.dt > 0 or not self.impact_duration > 0:
            raise ValueError("dt and impact_duration must be positive")
        toggles = frozenset(self.impact_constraints)
        unknown = toggles - set(IMPACT_LABELS)
        if unknown:
            raise ValueError(f"unknown impact constraint toggles {sorted(unknown)}")
        object.__setattr__(self, "impact_constraints", toggles)
        if self.zmp_set not in ZMP_SETS:
            raise ValueError(f"zmp_set must be one of {ZMP_SETS}")
        if self.velocity_form not in ("realized", "verbatim"):
            raise ValueError("velocity_form must be 'realized' or 'verbatim'")
        if self.friction_form not in ("pyramid", "componentwise"):
            raise ValueError("friction_form must be 'pyramid' or 'componentwise'")


@dataclass
class ControlOutput:
    status: str
    qdd: np.ndarray | None
    forces: dict
    x: np.ndarray | None
    solution: qp.QpSolution
    blocks: tuple
    margins: dict
    prediction: impact.ImpulsePrediction | None = None
    predicted_zmp: np.ndarray | None = None
    predicted_zmp_margin: float = float("nan")
    predicted_cop_margin: dict = field(default_factory=dict)
    predicted_friction_margin: dict = field(default_factory=dict)
    actual_zmp: np.ndarray | None = None
    neglected_ratio: float = float("nan")
    diagnostics: tuple = ()
    certificate_labels: tuple = ()


class WholeBodyController:
    """Stateful wrapper: keeps the warm start and the last valid impulse maps."""

    def __init__(self, model, feet, impact_spec: ImpactSpec, task_specs, config=ControllerConfig(),
                 q_ref=None, com_ref=None):
        self.model = model
        self.feet = tuple(feet)
        self.impact_spec = impact_spec
        self.tasks = tuple(task_specs)
        self.config = config
        self.q_ref = None if q_ref is None else np.asarray(q_ref, dtype=float)
        self.com_ref = None if com_ref is None else np.asarray(com_ref, dtype=float)
        self._warm = None
        self._warm_key = None
        self._last_pred = None
        self._pred_failures = 0

    # -------------------------------------------------------------- pieces

    def layout(self, hand_contact=False):
        parts = [(f.ee_id, 6) for f in self.feet]
        if hand_contact:
            parts.append((self.impact_spec.ee_id, 3))
        return VariableLayout(self.model.nv, tuple(parts))

    def hand_contact_spec(self):
        return ct.ContactSpec(self.impact_spec.ee_id, [[0.0, 0.0]], normal=self.impact_spec.normal,
                              mu=self.feet[0].mu if self.feet else 0.7)

    def _force_jacobian(self, kin, ee_id, size):
        """Map from the contact's force variables to generalized forces (transposed)."""
        jp = kin.ee_jacobian(ee_id)
        if size == 3:
            return jp
        link = self.model.end_effectors[self.model.ee_index(ee_id)].link
        return np.vstack([kin.angular_jacobian(link), jp])  # torque first

    def base_dynamics_rows(self, kin, layout, external=None):
        """Unactuated rows of ``M qdd + h = S^T tau + sum J_i^T F_i``."""
        if not self.model.floating:
            return None
        M = kin.mass_matrix
        G = np.zeros((6, layout.dim))
        G[:, : layout.nv] = M[:6]
        for ee, size in layout.contacts:
            G[:, layout.force_slice(ee)] = -self._force_jacobian(kin, ee, size)[:, :6].T
        rhs = -kin.bias[:6]
        for ee, f in (external or {}).items():
            rhs = rhs + kin.ee_jacobian(ee)[:, :6].T @ f
        return cs.LinearConstraintBlock(G, rhs, "eq", "plumbing", "base dynamics")

    def polygon(self, kin):
        return ct.support_polygon(self.feet, [kin.ee_position(f.ee_id) for f in self.feet])

    def predict(self, kin):
        """One-step-ahead impulse maps (evaluated later at the chosen ``qdd``)."""
        spec = self.impact_spec
        try:
            pred = impact.predict_impulses(
                kin, tuple(f.ee_id for f in self.feet), spec, self.config.dt,
                surface_contacts=tuple(f.ee_id for f in self.feet) if self.config.surface_feet else (),
            )
        except (impact.SingularConfigurationError, impact.PredictionError) as exc:
            self._pred_failures += 1
            if self._pred_failures >= 2 or self._last_pred is None:
                raise ControllerAbort(f"impulse prediction failed: {exc}") from exc
            log.warning("impulse prediction failed (%s); reusing previous maps", exc)
            return self._last_pred, (f"prediction reused: {exc}",)
        self._pred_failures = 0
        self._last_pred = pred
        return pred, ()

    def task_terms(self, kin, layout, phase, measured_hand_force=None):
        terms = []
        cfg = self.config
        hand = self.impact_spec.ee_id
        n = self.impact_spec.normal
        force_spec = next((t for t in self.tasks if t.kind == "force_regulation"), None)
        for t in self.tasks:
            g = t.gains
            if t.kind == "ee_velocity":
                ee = t.ee_id or hand
                if phase == "approach" or ee != hand:
                    target = t.target
                    v_ref = -float(target) * n if np.ndim(target) == 0 else np.asarray(target, dtype=float)
                    terms.append(tasks.ee_velocity_task(kin, ee, v_ref, layout, cfg.dt, g.get("gain", 0.1), t.weight))
                elif phase == "spring" and force_spec is not None:
                    fg = force_spec.gains
                    v_ref = tasks.admittance_velocity(
                        n, force_spec.target, measured_hand_force, fg.get("k_f", 0.05), fg.get("v_max", 0.1)
                    )
                    terms.append(tasks.ee_velocity_task(kin, ee, v_ref, layout, cfg.dt, g.get("gain", 0.1), t.weight))
            elif t.kind == "posture":
                q_ref = self.q_ref if t.target is None else np.asarray(t.target, dtype=float)
                terms.append(tasks.posture_task(
                    kin, q_ref, layout, g.get("kp", 20.0), g.get("kd"), t.weight, g.get("base_weight", BASE_WEIGHT)
                ))
            elif t.kind == "com":
                c_ref = self.com_ref if t.target is None else np.asarray(t.target, dtype=float)
                axes = tuple(t.gains.get("axes", (0, 1, 2))) if isinstance(t.gains.get("axes"), (list, tuple)) else (0, 1, 2)
                gains = {k: v for k, v in g.items() if k != "axes"}
                terms.append(tasks.com_task(kin, c_ref, layout, gains.get("kp", 50.0), gains.get("kd"), t.weight, axes))
            elif t.kind == "force_regulation" and phase == "contact":
                terms.append(tasks.force_task(layout, hand, n, t.target, t.weight))
        return terms

    # ----------------------------------------------------------------- step

    def step(self, kin, phase="approach", measured=None, external=None):
        """Solve one control step.

        ``phase`` is ``approach`` (impact ahead), ``contact`` (rigid hand
        contact held) or ``spring`` (compliant wall, admittance on the hand).
        ``measured`` maps end-effectors to the previous step's contact
        wrenches (torque first, about the end-effector point, world frame).
        ``external`` maps end-effectors to known external forces.
        """
        if phase not in ("approach", "contact", "spring"):
            raise ValueError(f"unknown phase {phase!r}")
        cfg = self.config
        measured = measured or {}
        external = external or {}
        hand = self.impact_spec.ee_id
        layout = self.layout(hand_contact=phase == "contact")
        diagnostics = []

        blocks = []
        base = self.base_dynamics_rows(kin, layout, external)
        if base is not None:
            blocks.append(base)
        geometric = [cs.contact_geometric_rows(kin, f.ee_id, layout, cfg.dt) for f in self.feet]
        for f in self.feet:
            blocks.append(cs.cop_rows(f, layout))
            blocks.append(cs.friction_rows(f, layout))
        if phase == "contact":
            # the wall holds the hand along n only; it may slide, so no tangential force
            hspec = self.hand_contact_spec()
            geometric.append(cs.contact_geometric_rows(kin, hand, layout, cfg.dt, angular=False, directions=hspec.normal))
            blocks.append(cs.frictionless_rows(hspec, layout))
            blocks.append(cs.friction_rows(hspec, layout))
        blocks += cs.consistent_contact_rows(geometric)
        polygon = self.polygon(kin) if self.feet else None
        if cfg.baseline_zmp and polygon is not None:
            blocks.append(cs.zmp_rows(polygon, layout, {f.ee_id: kin.ee_position(f.ee_id) for f in self.feet}))
        blocks.append(cs.velocity_bound_rows(kin, self.model.velocity_bounds, layout, cfg.dt))
        blocks.append(cs.acceleration_bound_rows(self.model.acceleration_bounds, layout))

        pred = None
        foot_wrenches = {}
        if phase == "approach":
            pred, notes = self.predict(kin)
            diagnostics += notes
            foot_wrenches = {f.ee_id: np.asarray(measured.get(f.ee_id, np.zeros(6)), dtype=float) for f in self.feet}
            blocks += self.impact_rows(kin, pred, layout, polygon, foot_wrenches, diagnostics)

        terms = self.task_terms(kin, layout, phase, external.get(hand))
        H, g = tasks.objective(terms, layout.dim, cfg.regularization)
        qp_blocks = [b.normalized() for b in blocks] if cfg.normalize_rows else blocks
        stacked = cs.assemble(qp_blocks, layout.dim)
        problem = qp.QpProblem(H, g, stacked.A_eq, stacked.b_eq, stacked.G, stacked.h, spans=layout.spans())
        key = (layout, tuple((b.label, b.name, b.rows) for b in stacked.ineq_blocks))
        warm = self._warm if key == self._warm_key else None
        sol = qp.solve(problem, warm_start=warm, max_iter=cfg.max_iter)
        raw = cs.assemble(blocks, layout.dim)
        if not sol.ok:
            labels = ()
            if sol.certificate:
                labels = tuple(sorted({self._row_label(raw, r) for r in sol.certificate}))
            return ControlOutput(sol.status, None, {}, None, sol, raw.eq_blocks + raw.ineq_blocks, {},
                                 prediction=pred, diagnostics=tuple(diagnostics) + tuple(f"certificate {l}" for l in labels),
                                 certificate_labels=labels)
        self._warm, self._warm_key = sol, key
        x = sol.x
        qdd = x[: layout.nv].copy()
        forces = {ee: x[layout.force_slice(ee)].copy() for ee, _ in layout.contacts}
        out = ControlOutput("optimal", qdd, forces, x, sol, raw.eq_blocks + raw.ineq_blocks,
                            cs.block_margins(raw.eq_blocks + raw.ineq_blocks, x), diagnostics=tuple(diagnostics))
        if polygon is not None:
            total = sum(ct.wrench_about_origin(kin.ee_position(f.ee_id), forces[f.ee_id]) for f in self.feet)
            if total[5] > 0:
                out.actual_zmp = ct.zmp([total])
        if pred is not None:
            self._fill_prediction(out, kin, pred, qdd, polygon, foot_wrenches)
        return out

    def _row_label(self, raw, row):
        n_eq = raw.A_eq.shape[0]
        if row < n_eq:
            start = 0
            for b in raw.eq_blocks:
                if row < start + b.rows:
                    return f"{b.label}:{b.name}"
                start += b.rows
        b = raw.block_of_row(row - n_eq)
        return f"{b.label}:{b.name}"

    def impact_rows(self, kin, pred, layout, polygon, foot_wrenches, diagnostics):
        cfg = self.config
        on = cfg.impact_constraints
        dt, dur = cfg.dt, cfg.impact_duration
        rows = []
        if "Eq17" in on:
            rows.append(cs.post_impact_joint_velocity_rows(kin, pred, self.model.velocity_bounds, layout, dt,
                                                           cfg.velocity_form))
        if "Eq18" in on:
            rows.append(cs.impulsive_torque_rows(kin, pred, self.model.impulsive_torque_bounds, layout, dt, dur))
        for f in self.feet:
            F = foot_wrenches[f.ee_id]
            try:
                if "Eq19" in on:
                    rows.append(cs.post_impact_cop_rows(kin, pred, f, F, layout, dt, dur))
                if "Eq20" in on:
                    rows.append(cs.post_impact_friction_rows(kin, pred, f, F[3:], layout, dt, dur, cfg.friction_form))
            except ct.ContactInactiveError as exc:
                diagnostics.append(f"{f.ee_id}: {exc}")
        if "Eq21" in on and polygon is not None:
            wrenches = [ct.wrench_about_origin(kin.ee_position(e), w) for e, w in foot_wrenches.items()]
            try:
                rows.append(cs.post_impact_zmp_rows(kin, pred, polygon, wrenches, self.zmp_points(kin), layout, dt, dur))
            except ct.ContactInactiveError as exc:
                diagnostics.append(f"zmp: {exc}")
        return rows

    def zmp_points(self, kin, zmp_set=None):
        zmp_set = self.config.zmp_set if zmp_set is None else zmp_set
        ees = [f.ee_id for f in self.feet]
        if zmp_set == "feet+hand":
            ees.append(self.impact_spec.ee_id)
        return {e: kin.ee_position(e) for e in ees}

    def _fill_prediction(self, out, kin, pred, qdd, polygon, foot_wrenches):
        cfg = self.config
        w = kin.v + cfg.dt * qdd
        evaluated = pred.at(w)
        out.prediction = evaluated
        out.neglected_ratio = impact.neglected_term_ratio(kin, qdd, self.impact_spec.ee_id, cfg.dt)
        dur = cfg.impact_duration
        for f in self.feet:
            F = foot_wrenches[f.ee_id]
            post = F + evaluated.impulse_wrench(f.ee_id) / dur
            a_c = ct.cop_constraint_matrix(f) @ cs._world_to_contact(f)
            out.predicted_cop_margin[f.ee_id] = float(-(a_c @ post).max())
            d = ct.friction_pyramid_rows(f.normal, f.mu, f.cone_facets)
            out.predicted_friction_margin[f.ee_id] = float(-(d @ post[3:]).max())
        if polygon is not None:
            total = sum(ct.wrench_about_origin(kin.ee_position(e), F) for e, F in foot_wrenches.items())
            for e, p in self.zmp_points(kin, "feet+hand").items():
                total = total + cs.wrench_shift(p) @ (evaluated.impulse_wrench(e) / dur)
            if total[5] > 0:
                out.predicted_zmp = ct.zmp([total])
                out.predicted_zmp_margin = float(polygon.margins(out.predicted_zmp).min())
