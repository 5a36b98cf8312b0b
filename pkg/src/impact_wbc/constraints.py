"""Linear constraint rows over the QP decision vector ``x = (qdd, f)``.

Contact force variables are world-frame quantities attached to end-effector
reference points: surface contacts carry a stacked wrench (torque first, about
the reference point), point contacts a bare 3D force. :class:`VariableLayout`
records where each block lives inside ``x``.

Impact-aware builders take an :class:`~impact_wbc.impact.ImpulsePrediction`
whose sensitivity maps act on ``w = v + dt * qdd``; every row they emit is
therefore affine in ``qdd`` with constant data from step ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import contact as ct
from .dynamics import skew

LABELS = ("Eq1", "Eq3", "Eq5", "Eq17", "Eq18", "Eq19", "Eq20", "Eq21", "plumbing")
IMPACT_LABELS = ("Eq17", "Eq18", "Eq19", "Eq20", "Eq21")
KINDS = ("eq", "ineq")


@dataclass(frozen=True)
class VariableLayout:
    """Column spans of ``x``: ``nv`` accelerations, then one force block per contact.

    ``contacts`` is a tuple of ``(ee_id, size)`` with size 6 (wrench) or 3 (point force).
    """

    nv: int
    contacts: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "contacts", tuple((ee, int(s)) for ee, s in self.contacts))
        for ee, size in self.contacts:
            if size not in (3, 6):
                raise ValueError(f"contact {ee!r}: force block must have size 3 or 6")
        names = [ee for ee, _ in self.contacts]
        if len(set(names)) != len(names):
            raise ValueError("duplicate contact in layout")

    @property
    def dim(self):
        return self.nv + sum(s for _, s in self.contacts)

    @property
    def qdd(self):
        return slice(0, self.nv)

    def force_slice(self, ee_id):
        start = self.nv
        for ee, size in self.contacts:
            if ee == ee_id:
                return slice(start, start + size)
            start += size
        raise KeyError(f"{ee_id!r} has no force variables")

    def force_size(self, ee_id):
        return dict(self.contacts)[ee_id]

    def spans(self):
        out = {"qdd": (0, self.nv)}
        for ee, _ in self.contacts:
            sl = self.force_slice(ee)
            out[f"f_{ee}"] = (sl.start, sl.stop)
        return out

    def embed_qdd(self, rows):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        G = np.zeros((rows.shape[0], self.dim))
        G[:, : self.nv] = rows
        return G

    def embed_force(self, ee_id, rows):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        G = np.zeros((rows.shape[0], self.dim))
        G[:, self.force_slice(ee_id)] = rows
        return G


@dataclass(frozen=True)
class LinearConstraintBlock:
    """``G x <= h`` (kind ``ineq``) or ``G x = h`` (kind ``eq``)."""

    G: np.ndarray
    h: np.ndarray
    kind: str
    label: str
    name: str = ""

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        h = np.atleast_1d(np.asarray(self.h, dtype=float)).ravel()
        if G.size == 0:
            G = G.reshape(0, G.shape[-1] if G.ndim == 2 else 0)
        if G.shape[0] != h.shape[0]:
            raise ValueError(f"block {self.label}/{self.name}: G has {G.shape[0]} rows, h has {h.shape[0]}")
        if not (np.all(np.isfinite(G)) and np.all(np.isfinite(h))):
            raise ValueError(f"block {self.label}/{self.name}: non-finite entries")
        if self.kind not in KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.label not in LABELS:
            raise ValueError(f"unknown block label {self.label!r}")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)

    @property
    def rows(self):
        return self.G.shape[0]

    @property
    def dim(self):
        return self.G.shape[1]

    def margins(self, x):
        """``h - G x``; nonnegative means satisfied for inequalities."""
        return self.h - self.G @ x

    def normalized(self):
        """Rows scaled to unit infinity-norm (zero rows left alone)."""
        scale = np.abs(self.G).max(axis=1) if self.rows else np.zeros(0)
        scale = np.where(scale > 0, scale, 1.0)
        return LinearConstraintBlock(self.G / scale[:, None], self.h / scale, self.kind, self.label, self.name)

    def to_text(self):
        lines = [f"block {self.label} {self.name or '-'} {self.kind} {self.rows}x{self.dim}"]
        for g_row, h_val in zip(self.G, self.h):
            lines.append(" ".join(repr(float(v)) for v in g_row) + " | " + repr(float(h_val)))
        return "\n".join(lines)


def _ineq(G, h, label, name=""):
    return LinearConstraintBlock(G, h, "ineq", label, name)


def _check_bounds(bounds):
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if np.any(lo > hi):
        raise ValueError("bounds inverted: lower exceeds upper")
    return lo, hi


def _two_sided(A, c, lo, hi, layout, label, name):
    """Rows for ``lo <= A qdd + c <= hi``, finite bounds only."""
    up = np.isfinite(hi)
    dn = np.isfinite(lo)
    G = np.vstack([A[up], -A[dn]])
    h = np.concatenate([hi[up] - c[up], c[dn] - lo[dn]])
    return _ineq(layout.embed_qdd(G) if G.size else np.zeros((0, layout.dim)), h, label, name)


def _world_to_contact(contact_spec):
    b = contact_spec.basis
    return np.block([[b.T, np.zeros((3, 3))], [np.zeros((3, 3)), b.T]])


# ---------------------------------------------------------------- baseline rows


def contact_geometric_rows(kin, ee_id, layout: VariableLayout, dt, angular=True, directions=None):
    """``J qdd = -J_dot v - v_c / dt`` for the contact point (and link rotation).

    Rotational rows hold a surface contact flat; point contacts use
    ``angular=False``. ``directions`` (k x 3) keeps only those components of
    the point rows, e.g. the normal of a contact free to slide.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    model = kin.model
    link = model.end_effectors[model.ee_index(ee_id)].link
    j = [kin.ee_jacobian(ee_id)]
    jd = [kin.ee_jacobian_dot(ee_id)]
    if angular:
        j.append(kin.angular_jacobian(link))
        jd.append(kin.angular_jacobian_dot(link))
    if directions is not None:
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        j[0], jd[0] = d @ j[0], d @ jd[0]
    j = np.vstack(j)
    jd = np.vstack(jd)
    v_c = j @ kin.v
    rhs = -jd @ kin.v - v_c / dt
    if j.shape[1] != model.nv:
        raise ValueError("jacobian width does not match the model")
    return LinearConstraintBlock(layout.embed_qdd(j), rhs, "eq", "Eq1", str(ee_id))


def consistent_contact_rows(blocks, tol=1e-10):
    """Project the stacked right-hand side of contact rows onto the range of their matrix.

    After an impact reset the contact points may carry velocity along
    directions no acceleration can reach (e.g. foot roll on a leg with pitch
    joints only); the drift term then makes the equalities inconsistent.
    The least-squares projection keeps every reachable component. Blocks are
    returned unchanged when already consistent.
    """
    blocks = list(blocks)
    if not blocks:
        return blocks
    A = np.vstack([b.G for b in blocks])
    rhs = np.concatenate([b.h for b in blocks])
    proj = A @ np.linalg.lstsq(A, rhs, rcond=None)[0]
    if np.abs(proj - rhs).max() <= tol * max(1.0, np.abs(rhs).max()):
        return blocks
    out, start = [], 0
    for b in blocks:
        out.append(replace(b, h=proj[start : start + b.rows]))
        start += b.rows
    return out


def frictionless_rows(contact_spec, layout: VariableLayout):
    """Zero tangential force on a point contact: ``t_i . f = 0``."""
    b = contact_spec.basis
    return LinearConstraintBlock(
        layout.embed_force(contact_spec.ee_id, b[:, :2].T), np.zeros(2), "eq", "plumbing", f"frictionless {contact_spec.ee_id}"
    )


def velocity_bound_rows(kin, bounds, layout: VariableLayout, dt):
    """Next-sample joint velocity inside ``bounds``: ``lo <= v + dt qdd <= hi``."""
    lo, hi = _check_bounds(bounds)
    n = layout.nv
    return _two_sided(dt * np.eye(n), kin.v, lo, hi, layout, "plumbing", "velocity")


def acceleration_bound_rows(bounds, layout: VariableLayout):
    lo, hi = _check_bounds(bounds)
    n = layout.nv
    return _two_sided(np.eye(n), np.zeros(n), lo, hi, layout, "plumbing", "acceleration")


def cop_rows(contact_spec: ct.ContactSpec, layout: VariableLayout):
    """``A_c F <= 0`` on the contact's wrench variables (CoP inside the patch)."""
    a_c = ct.cop_constraint_matrix(contact_spec) @ _world_to_contact(contact_spec)
    return _ineq(layout.embed_force(contact_spec.ee_id, a_c), np.zeros(a_c.shape[0]), "Eq3", f"cop {contact_spec.ee_id}")


def friction_rows(contact_spec: ct.ContactSpec, layout: VariableLayout):
    """Inscribed friction pyramid on the force part of the contact variables."""
    d = ct.friction_pyramid_rows(contact_spec.normal, contact_spec.mu, contact_spec.cone_facets)
    size = layout.force_size(contact_spec.ee_id)
    rows = np.zeros((d.shape[0], size))
    rows[:, size - 3 :] = d
    return _ineq(
        layout.embed_force(contact_spec.ee_id, rows), np.zeros(d.shape[0]), "Eq3", f"friction {contact_spec.ee_id}"
    )


def wrench_shift(point):
    """6x6 map moving a torque-first wrench from ``point`` to the origin."""
    s = np.eye(6)
    s[:3, 3:] = skew(np.asarray(point, dtype=float))
    return s


def zmp_rows(polygon: ct.SupportPolygon, layout: VariableLayout, positions):
    """Baseline ZMP rows ``A_Z sum_i S_i F_i <= 0`` over the wrench variables.

    ``positions`` maps each surface-contact end-effector to its world position.
    """
    a_z = ct.zmp_constraint_matrix(polygon)
    G = np.zeros((a_z.shape[0], layout.dim))
    for ee, pos in positions.items():
        G[:, layout.force_slice(ee)] = a_z @ wrench_shift(pos)
    return _ineq(G, np.zeros(a_z.shape[0]), "Eq5", "zmp")


# ----------------------------------------------------------- impact-aware rows


def _ratio(dt, duration):
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not duration > 0:
        raise ValueError("impact duration must be positive")
    return dt / duration


def post_impact_joint_velocity_rows(kin, pred, bounds, layout: VariableLayout, dt, form="realized"):
    """Joint-velocity bounds after the predicted jump.

    ``form="verbatim"`` bounds ``v + J_dq (v + dt qdd)``, the state before the
    sample's acceleration is applied. ``form="realized"`` bounds
    ``(I + J_dq)(v + dt qdd)``, which is what a reset at the next sample
    produces; only that form certifies the realized post-impact velocity.
    """
    lo, hi = _check_bounds(bounds)
    if not dt > 0:
        raise ValueError("dt must be positive")
    m = pred.map_dq
    v = kin.v
    if form == "verbatim":
        A, c = dt * m, v + m @ v
    elif form == "realized":
        full = np.eye(len(v)) + m
        A, c = dt * full, full @ v
    else:
        raise ValueError(f"unknown form {form!r}")
    return _two_sided(A, c, lo, hi, layout, "Eq17", form)


def impulsive_torque_rows(kin, pred, bounds, layout: VariableLayout, dt, duration):
    """``lo <= J_dtau (v + dt qdd) / duration <= hi`` on rows with finite bounds."""
    ratio = _ratio(dt, duration)
    lo, hi = _check_bounds(bounds)
    A = ratio * pred.map_tau
    c = pred.map_tau @ kin.v / duration
    return _two_sided(A, c, lo, hi, layout, "Eq18", "impulsive torque")


def _measured_contact_frame(contact_spec, wrench):
    w = np.asarray(wrench.stacked() if isinstance(wrench, ct.Wrench) else wrench, dtype=float)
    if w.shape == (3,):
        w = np.concatenate([np.zeros(3), w])
    return _world_to_contact(contact_spec) @ w


def post_impact_cop_rows(kin, pred, contact_spec: ct.ContactSpec, measured_wrench, layout: VariableLayout, dt, duration):
    """CoP of ``F + F_bar`` inside the patch, with ``F`` the measured wrench.

    ``F_bar`` is the predicted impulsive wrench of the contact over the impact
    duration; a point-contact prediction contributes its force only.
    """
    ratio = _ratio(dt, duration)
    F = _measured_contact_frame(contact_spec, measured_wrench)
    if F[5] <= 0:
        raise ct.ContactInactiveError(f"contact {contact_spec.ee_id!r} has no normal force")
    a_c = ct.cop_constraint_matrix(contact_spec)
    a_w = a_c @ _world_to_contact(contact_spec)
    jw = pred.wrench_map(contact_spec.ee_id)
    G = a_w @ jw * ratio
    h = -a_c @ F - a_w @ jw @ kin.v / duration
    return _ineq(layout.embed_qdd(G), h, "Eq19", str(contact_spec.ee_id))


def post_impact_friction_rows(
    kin, pred, contact_spec: ct.ContactSpec, measured_force, layout: VariableLayout, dt, duration, form="pyramid"
):
    """Friction of ``f + f_bar``: inscribed pyramid, or the literal ``P_mu`` rows."""
    ratio = _ratio(dt, duration)
    f = np.asarray(measured_force, dtype=float)
    if f.shape == (6,):
        f = f[3:]
    if f @ contact_spec.normal <= 0:
        raise ct.ContactInactiveError(f"contact {contact_spec.ee_id!r} has no normal force")
    if form == "pyramid":
        rows = ct.friction_pyramid_rows(contact_spec.normal, contact_spec.mu, contact_spec.cone_facets)
    elif form == "componentwise":
        rows = ct.friction_projector(contact_spec.normal, contact_spec.mu)
    else:
        raise ValueError(f"unknown form {form!r}")
    jf = pred.force_map(contact_spec.ee_id)
    G = rows @ jf * ratio
    h = -rows @ (f + jf @ kin.v / duration)
    return _ineq(layout.embed_qdd(G), h, "Eq20", f"{contact_spec.ee_id} {form}")


def post_impact_zmp_rows(kin, pred, polygon: ct.SupportPolygon, wrenches, points, layout: VariableLayout, dt, duration):
    """ZMP of the measured wrenches plus predicted impulsive forces inside ``polygon``.

    ``wrenches`` are world-frame wrenches about the origin (their sum enters
    the right-hand side). ``points`` maps each end-effector whose impulsive
    force is included to its world position, which fixes ``A_i``.
    """
    ratio = _ratio(dt, duration)
    total = np.sum([np.asarray(w, dtype=float) for w in wrenches], axis=0) if len(wrenches) else np.zeros(6)
    if total[5] <= 0:
        raise ct.ContactInactiveError("total normal force must be positive")
    a_z = ct.zmp_constraint_matrix(polygon)
    acc = np.zeros((6, layout.nv))
    for ee, pos in points.items():
        acc += wrench_shift(pos) @ pred.wrench_map(ee)
    G = a_z @ acc * ratio
    h = -a_z @ (total + acc @ kin.v / duration)
    return _ineq(layout.embed_qdd(G), h, "Eq21", "+".join(str(e) for e in points))


# ------------------------------------------------------------------- assembly


@dataclass(frozen=True)
class StackedConstraints:
    A_eq: np.ndarray
    b_eq: np.ndarray
    G: np.ndarray
    h: np.ndarray
    eq_blocks: tuple = field(default=())
    ineq_blocks: tuple = field(default=())

    def ineq_ranges(self):
        """``(block, start, stop)`` row ranges of the stacked inequality system."""
        out, start = [], 0
        for b in self.ineq_blocks:
            out.append((b, start, start + b.rows))
            start += b.rows
        return out

    def block_of_row(self, row):
        for b, start, stop in self.ineq_ranges():
            if start <= row < stop:
                return b
        raise IndexError(row)

    def to_text(self):
        return "\n".join(b.to_text() for b in self.eq_blocks + self.ineq_blocks)


def _order(blocks):
    return sorted(blocks, key=lambda b: LABELS.index(b.label))  # stable: ties keep insertion order


def assemble(blocks, decision_dim, normalize=False) -> StackedConstraints:
    blocks = list(blocks)
    for b in blocks:
        if b.dim != decision_dim:
            raise ValueError(f"block {b.label}/{b.name} has width {b.dim}, expected {decision_dim}")
    if normalize:
        blocks = [b.normalized() for b in blocks]
    eqs = _order([b for b in blocks if b.kind == "eq"])
    ins = _order([b for b in blocks if b.kind == "ineq"])

    def stack(group):
        if not group:
            return np.zeros((0, decision_dim)), np.zeros(0)
        return np.vstack([b.G for b in group]), np.concatenate([b.h for b in group])

    A_eq, b_eq = stack(eqs)
    G, h = stack(ins)
    return StackedConstraints(A_eq, b_eq, G, h, tuple(eqs), tuple(ins))


def block_margins(blocks, x):
    """Minimum margin per ``label name`` key (inequalities) and max residual (equalities)."""
    out = {}
    for b in blocks:
        if not b.rows:
            continue
        key = f"{b.label}:{b.name}"
        m = b.margins(x)
        out[key] = float(m.min()) if b.kind == "ineq" else float(-np.abs(m).max())
    return out
