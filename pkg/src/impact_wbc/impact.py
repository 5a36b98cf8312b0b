"""Impact-instant physics: velocity jumps, operational-space inertia and impulse prediction.

The prediction solves the least-norm auxiliary problem

    min 1/2 |u|^2,  u = (dq, I_1, ..., I_{m+1})
    s.t. J dq - Lambda^{-1} I = 0,   J_{m+1} dq = dx_{m+1}

through its KKT matrix. Only the columns of ``K^{-1}`` that multiply the
nonzero part of the right-hand side are formed, and they double as the
sensitivity maps used by the impact-aware constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import qp
from .dynamics import DynamicsCache

DEFAULT_DURATION = 0.005
RCOND_MIN = 1e-10
# contact rows this close to dependent are dropped; they have a zero right-hand side
CONTACT_RANK_TOL = 1e-7


class SingularConfigurationError(RuntimeError):
    """The auxiliary KKT matrix is numerically singular."""


class PredictionError(RuntimeError):
    """The one-step-ahead mass matrix is not positive definite."""


def _unit(n):
    n = np.asarray(n, dtype=float)
    if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("impact normal must be a unit 3-vector")
    return n


@dataclass(frozen=True)
class ImpactSpec:
    ee_id: str | int
    normal: np.ndarray
    c_r: float = 0.02
    duration: float = DEFAULT_DURATION

    def __post_init__(self):
        object.__setattr__(self, "normal", _unit(self.normal))
        if not 0.0 <= self.c_r <= 1.0:
            raise ValueError("restitution must lie in [0, 1]")
        if not self.duration > 0:
            raise ValueError("impact duration must be positive")

    @property
    def projector(self):
        return velocity_jump_projector(self.normal, self.c_r)


def velocity_jump_projector(n, c_r):
    """``P = -(1 + c_r) n n^T``, so that ``dx = P x_minus``."""
    n = _unit(n)
    return -(1.0 + c_r) * np.outer(n, n)


def predict_ee_velocity_jump(kin: DynamicsCache, qdd, spec: ImpactSpec, dt, keep_second_order=False):
    """Velocity jump of the impacting end-effector at the next sample.

    The ``J_dot dt^2 qdd`` term is dropped unless ``keep_second_order``; with
    it kept the result is ``P (J + dt J_dot)(v + dt qdd)``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    qdd = np.asarray(qdd, dtype=float)
    j = kin.ee_jacobian(spec.ee_id)
    jd = kin.ee_jacobian_dot(spec.ee_id)
    xdot = j @ (dt * qdd) + j @ kin.v + dt * (jd @ kin.v)
    if keep_second_order:
        xdot = xdot + dt**2 * (jd @ qdd)
    return spec.projector @ xdot


def neglected_term_ratio(kin: DynamicsCache, qdd, ee_id, dt):
    """``|J_dot dt^2 qdd| / |J dt qdd + J v + J_dot v dt|`` (inf when the denominator vanishes)."""
    j = kin.ee_jacobian(ee_id)
    jd = kin.ee_jacobian_dot(ee_id)
    kept = np.linalg.norm(j @ (dt * qdd) + j @ kin.v + dt * (jd @ kin.v))
    dropped = np.linalg.norm(dt**2 * (jd @ qdd))
    if kept == 0.0:
        return 0.0 if dropped == 0.0 else np.inf
    return dropped / kept


def operational_inertia_inverse(M, J):
    """``J M^{-1} J^T`` via a Cholesky solve."""
    M = np.asarray(M, dtype=float)
    J = np.atleast_2d(np.asarray(J, dtype=float))
    try:
        c = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("mass matrix is not positive definite") from exc
    y = np.linalg.solve(c, J.T)
    lam_inv = y.T @ y
    return 0.5 * (lam_inv + lam_inv.T)


def stacked_jacobians(kin: DynamicsCache, ee_ids, dt=0.0, surface=()):
    """Per-end-effector Jacobians, advanced by ``dt`` to first order.

    End-effectors listed in ``surface`` get the 6-row ``[J_w; J_p]`` of their
    link (torque first), so a flat contact also holds its orientation.
    """
    out = []
    model = kin.model
    for ee in ee_ids:
        j = kin.ee_jacobian(ee)
        jd = kin.ee_jacobian_dot(ee) if dt else None
        if ee in surface:
            link = model.end_effectors[model.ee_index(ee)].link
            j = np.vstack([kin.angular_jacobian(link), j])
            if dt:
                jd = np.vstack([kin.angular_jacobian_dot(link), jd])
        if dt:
            j = j + dt * jd
        out.append(j)
    return out


def predict_operational_inertia(kin: DynamicsCache, ee_ids, dt):
    """First-order prediction of ``Lambda^{-1}`` one sample ahead."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    J = np.vstack(stacked_jacobians(kin, ee_ids, dt))
    m_next = kin.mass_matrix + dt * kin.mass_matrix_dot
    try:
        return operational_inertia_inverse(m_next, J)
    except np.linalg.LinAlgError as exc:
        raise PredictionError(f"predicted mass matrix not positive definite for dt={dt}") from exc


@dataclass(frozen=True)
class ImpactProblem:
    """Data of the auxiliary least-norm problem.

    ``ee_ids`` lists established contacts first, then impacting
    end-effectors. Point contacts carry 3 impulse components, surface
    contacts 6 (a torque-first wrench about the contact point). ``impacts`` holds, per impacting end-effector, its index
    in ``ee_ids``, the velocity jump target and the projector (or ``None``
    when the jump was prescribed directly).
    """

    ee_ids: tuple
    jacobians: tuple
    lambda_inv: np.ndarray
    impacts: tuple
    duration: float = DEFAULT_DURATION
    weight: np.ndarray | None = None

    @property
    def n(self):
        return self.jacobians[0].shape[1]

    @property
    def sizes(self):
        return tuple(j.shape[0] for j in self.jacobians)

    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    @property
    def constraint_matrix(self):
        J = np.vstack(self.jacobians)
        top = np.hstack([J, -self.lambda_inv])
        rows = [top]
        for idx, _, _ in self.impacts:
            rows.append(np.hstack([self.jacobians[idx], np.zeros((3, J.shape[0]))]))
        return np.vstack(rows)

    @property
    def rhs(self):
        m = sum(self.sizes)
        return np.concatenate([np.zeros(m)] + [np.asarray(dx, dtype=float) for _, dx, _ in self.impacts])


@dataclass(frozen=True)
class ImpulsePrediction:
    ee_ids: tuple
    delta_qdot: np.ndarray
    impulses: tuple
    impulsive_forces: tuple
    delta_tau: np.ndarray
    map_dq: np.ndarray
    map_tau: np.ndarray
    map_force: tuple
    delta_xdot: np.ndarray
    jacobians: tuple
    duration: float
    rcond: float = float("nan")
    lam: np.ndarray | None = field(default=None, repr=False)

    def impulse(self, ee_id):
        return self.impulses[self.ee_ids.index(ee_id)]

    def force(self, ee_id):
        return self.impulsive_forces[self.ee_ids.index(ee_id)]

    def force_map(self, ee_id):
        """Impulse map of the contact's force part (3 x n)."""
        return self.map_force[self.ee_ids.index(ee_id)][-3:]

    def wrench_map(self, ee_id):
        """Impulse map as a torque-first wrench about the contact point (6 x n)."""
        m = self.map_force[self.ee_ids.index(ee_id)]
        return m if m.shape[0] == 6 else np.vstack([np.zeros((3, m.shape[1])), m])

    def impulse_wrench(self, ee_id):
        i = self.impulse(ee_id)
        return i if i.shape[0] == 6 else np.concatenate([np.zeros(3), i])

    @property
    def u(self):
        return np.concatenate([self.delta_qdot] + list(self.impulses))

    def at(self, w):
        """The prediction re-evaluated through the maps at ``w = v + dt qdd``."""
        w = np.asarray(w, dtype=float)
        impulses = tuple(m @ w for m in self.map_force)
        return replace(
            self,
            delta_qdot=self.map_dq @ w,
            impulses=impulses,
            impulsive_forces=tuple(i / self.duration for i in impulses),
            delta_tau=self.map_tau @ w / self.duration,
            lam=None,
        )


def build_problem(kin: DynamicsCache, contacts, spec: ImpactSpec, dt, qdd=None, delta_xdot=None, predicted=True,
                  weight=None, surface_contacts=()):
    """Assemble the auxiliary problem for one impacting end-effector.

    With ``predicted`` the Jacobians and ``Lambda^{-1}`` are advanced one
    sample; ``delta_xdot`` defaults to ``P (J + dt J_dot)(v + dt qdd)``.
    Contacts named in ``surface_contacts`` are held in orientation too.
    """
    contacts = tuple(contacts)
    if spec.ee_id in contacts:
        raise ValueError("impacting end-effector is also listed as a contact")
    ee_ids = contacts + (spec.ee_id,)
    horizon = dt if predicted else 0.0
    surface = tuple(e for e in surface_contacts if e in contacts)
    jacs = stacked_jacobians(kin, ee_ids, horizon, surface)
    m_next = kin.mass_matrix + horizon * kin.mass_matrix_dot
    try:
        lam_inv = operational_inertia_inverse(m_next, np.vstack(jacs))
    except np.linalg.LinAlgError as exc:
        raise PredictionError("predicted mass matrix not positive definite") from exc
    if delta_xdot is None:
        qdd = np.zeros(kin.model.nv) if qdd is None else np.asarray(qdd, dtype=float)
        delta_xdot = spec.projector @ jacs[-1] @ (kin.v + dt * qdd)
    return ImpactProblem(
        ee_ids,
        tuple(jacs),
        lam_inv,
        ((len(ee_ids) - 1, np.asarray(delta_xdot, dtype=float), spec.projector),),
        spec.duration,
        weight,
    )


def add_secondary_impact(problem: ImpactProblem, kin: DynamicsCache, ee_id, delta_xdot=None, spec=None, dt=0.0):
    """Append a second impacting end-effector with ``J_{m+2} dq = dx_{m+2}``.

    Either ``delta_xdot`` or ``spec`` must be given; with a spec the jump is
    predicted like the first one and enters the sensitivity maps.
    """
    if ee_id in problem.ee_ids:
        raise ValueError("secondary impact must be a distinct end-effector")
    j_new = stacked_jacobians(kin, [ee_id], dt)[0]
    jacs = problem.jacobians + (j_new,)
    m_next = kin.mass_matrix + dt * kin.mass_matrix_dot
    lam_inv = operational_inertia_inverse(m_next, np.vstack(jacs))
    projector = None
    if delta_xdot is None:
        if spec is None:
            raise ValueError("give either delta_xdot or spec")
        projector = spec.projector
        delta_xdot = projector @ j_new @ kin.v
    weight = problem.weight
    if weight is not None:
        weight = np.pad(weight, ((0, 3), (0, 3)))
        weight[-3:, -3:] = np.eye(3)
    return replace(
        problem,
        ee_ids=problem.ee_ids + (ee_id,),
        jacobians=jacs,
        lambda_inv=lam_inv,
        impacts=problem.impacts + ((len(jacs) - 1, np.asarray(delta_xdot, dtype=float), projector),),
        weight=weight,
    )


def solve_problem(problem: ImpactProblem) -> ImpulsePrediction:
    """Closed-form KKT solution of the auxiliary problem.

    Rows of ``A`` that vanish identically (directions the mechanism cannot
    move in, e.g. out of plane for a planar arm) are dropped when their
    right-hand side vanishes too; otherwise the instance is singular.
    Linearly dependent contact rows are dropped as well, which leaves the
    feasible set and hence the least-norm solution unchanged.
    """
    A_full = problem.constraint_matrix
    b_full = problem.rhs
    n = problem.n
    ne = len(problem.ee_ids)
    r_full = A_full.shape[0]
    scale = max(np.abs(A_full).max(), 1e-300)
    zero = np.abs(A_full).max(axis=1) <= 1e-12 * scale
    if np.any(np.abs(b_full[zero]) > 1e-12 * max(1.0, np.abs(b_full).max())):
        raise SingularConfigurationError("velocity jump requested along a direction the robot cannot move")
    first_impact_row = r_full - 3 * len(problem.impacts)
    # contact rows have a zero right-hand side, so dependent ones (e.g. two
    # flat feet on a mechanism with only sagittal joints) carry no information
    contact = np.where(~zero[:first_impact_row])[0]
    contact = contact[qp._independent_rows(A_full[contact], CONTACT_RANK_TOL)]
    kept = np.concatenate([contact, np.where(~zero[first_impact_row:])[0] + first_impact_row])
    A, b = A_full[kept], b_full[kept]
    impact_rows = [i for i, row in enumerate(kept) if row >= first_impact_row]
    sol = qp.solve_equality_kkt(A, b, weight=problem.weight, columns=impact_rows, rcond_min=RCOND_MIN)
    if sol.status != "optimal":
        raise SingularConfigurationError(f"singular impact configuration (rcond={sol.rcond:.3e})")
    u = sol.u
    dq = u[:n]
    off = n + problem.offsets()
    impulses = tuple(u[off[i] : off[i + 1]].copy() for i in range(ne))
    forces = tuple(i / problem.duration for i in impulses)
    dtau = sum(j.T @ f for j, f in zip(problem.jacobians, forces))

    # K^{-1} columns for every impact row; dropped rows get zero columns
    nu = off[-1]
    kcols = np.zeros((nu, 3 * len(problem.impacts)))
    for col, local in zip(sol.columns.T, impact_rows):
        kcols[:, kept[local] - first_impact_row] = col[:nu]
    map_u = np.zeros((nu, n))
    for k, (idx, _, proj) in enumerate(problem.impacts):
        if proj is None:
            continue
        map_u += kcols[:, 3 * k : 3 * k + 3] @ proj @ problem.jacobians[idx]
    map_dq = map_u[:n]
    map_force = tuple(map_u[off[i] : off[i + 1]] for i in range(ne))
    map_tau = sum(j.T @ mf for j, mf in zip(problem.jacobians, map_force))
    return ImpulsePrediction(
        ee_ids=problem.ee_ids,
        delta_qdot=dq,
        impulses=impulses,
        impulsive_forces=forces,
        delta_tau=dtau,
        map_dq=map_dq,
        map_tau=map_tau,
        map_force=map_force,
        delta_xdot=problem.impacts[0][1],
        jacobians=problem.jacobians,
        duration=problem.duration,
        rcond=sol.rcond,
        lam=sol.lam,
    )


def predict_impulses(kin: DynamicsCache, contacts, spec: ImpactSpec, dt, qdd=None, delta_xdot=None, predicted=True,
                     weight=None, surface_contacts=()):
    """Predicted joint-velocity jump, impulses and impulsive torque.

    ``map_dq``, ``map_tau`` and ``map_force`` are the sensitivity maps
    ``K^{-1}_cols P J_{m+1}``; applied to ``v + dt qdd`` they reproduce
    ``delta_qdot``, ``duration * delta_tau`` and the impulses respectively.
    """
    problem = build_problem(kin, contacts, spec, dt, qdd, delta_xdot, predicted, weight, surface_contacts)
    return solve_problem(problem)


def momentum_weight(kin: DynamicsCache, n_ee, dt=0.0):
    """Objective weight ``blkdiag(M, I)``: a kinetic-energy flavored least-norm variant."""
    m = kin.mass_matrix + dt * kin.mass_matrix_dot
    w = np.eye(m.shape[0] + 3 * n_ee)
    w[: m.shape[0], : m.shape[0]] = m
    return w


def scaling_weight(scale):
    """Diagonal unit-balancing weight ``diag(scale)^2``."""
    s = np.asarray(scale, dtype=float)
    if np.any(s <= 0):
        raise ValueError("scaling entries must be positive")
    return np.diag(s**2)


def predict_impulsive_torque(pred: ImpulsePrediction, duration=None):
    """``sum_i J_i^T I_i / duration``."""
    duration = pred.duration if duration is None else duration
    if not duration > 0:
        raise ValueError("impact duration must be positive")
    return sum(j.T @ (i / duration) for j, i in zip(pred.jacobians, pred.impulses))
