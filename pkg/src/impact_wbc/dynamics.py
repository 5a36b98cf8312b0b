"""Rigid-body kinematics and dynamics for kinematic trees.

A model is a list of links in topological order. Every link is attached to
its parent (or to the world) through exactly one joint. The root joint may be
``floating``; its generalized velocity is the body-frame twist
``(v_b, w_b)`` and its configuration is ``(position, quaternion wxyz)``.

All quantities are evaluated from ``(model, state)`` only. Jacobians are
geometric: each DoF contributes a world axis ``a_k`` through a world point
``o_k``, and ``J_dot`` is the total time derivative of those columns along
the current motion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

GRAVITY = np.array([0.0, 0.0, -9.81])

JOINT_TYPES = ("revolute", "prismatic", "floating")


class DimensionError(ValueError):
    """State or argument shapes do not match the model."""


def cross(a, b):
    """Row-wise 3-vector cross product; much cheaper than ``np.cross`` on small arrays."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def axis_angle_matrix(axis, angle):
    """Rodrigues formula for a unit axis."""
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rpy_matrix(rpy):
    r, p, y = rpy
    rx = axis_angle_matrix(np.array([1.0, 0.0, 0.0]), r)
    ry = axis_angle_matrix(np.array([0.0, 1.0, 0.0]), p)
    rz = axis_angle_matrix(np.array([0.0, 0.0, 1.0]), y)
    return rz @ ry @ rx


def quat_to_matrix(quat):
    w, x, y, z = quat
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_exp(omega):
    """Unit quaternion of the rotation vector ``omega``."""
    angle = np.linalg.norm(omega)
    if angle < 1e-12:
        q = np.array([1.0, 0.5 * omega[0], 0.5 * omega[1], 0.5 * omega[2]])
        return q / np.linalg.norm(q)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * omega / angle])


@dataclass(frozen=True)
class Joint:
    type: str
    parent: int = -1
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    origin_xyz: np.ndarray = field(default_factory=lambda: np.zeros(3))
    origin_rpy: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def nv(self):
        return 6 if self.type == "floating" else 1

    @property
    def nq(self):
        return 7 if self.type == "floating" else 1


@dataclass(frozen=True)
class Link:
    name: str
    mass: float
    com: np.ndarray
    inertia: np.ndarray
    joint: Joint


@dataclass(frozen=True)
class EndEffector:
    name: str
    link: int
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))


class RobotModel:
    """Kinematic tree with per-link inertial data and per-DoF limits.

    ``velocity_bounds`` and ``impulsive_torque_bounds`` are ``(lower, upper)``
    pairs of length-``nv`` arrays; unbounded entries are ``+-inf``.
    """

    def __init__(
        self,
        links,
        end_effectors=(),
        velocity_bounds=None,
        impulsive_torque_bounds=None,
        acceleration_bounds=None,
        dof_names=None,
        name="robot",
    ):
        self.name = name
        self.links = tuple(links)
        self.end_effectors = tuple(end_effectors)
        self._validate_structure()

        self.q_index = []
        self.v_index = []
        iq = iv = 0
        for link in self.links:
            j = link.joint
            self.q_index.append(iq)
            self.v_index.append(iv)
            iq += j.nq
            iv += j.nv
        self.nq = iq
        self.nv = iv
        self.floating = self.links[0].joint.type == "floating"

        # per-DoF ancestry: dof_mask[i, k] is True when DoF k moves link i
        self.dof_mask = np.zeros((len(self.links), self.nv), dtype=bool)
        self._dof_owner = np.zeros(self.nv, dtype=int)
        for i, link in enumerate(self.links):
            parent = link.joint.parent
            if parent >= 0:
                self.dof_mask[i] = self.dof_mask[parent]
            sl = self.dof_slice(i)
            self.dof_mask[i, sl] = True
            self._dof_owner[sl] = i

        if dof_names is None:
            dof_names = []
            for link in self.links:
                if link.joint.type == "floating":
                    dof_names += [f"base_{c}" for c in ("vx", "vy", "vz", "wx", "wy", "wz")]
                else:
                    dof_names.append(link.name)
        self.dof_names = tuple(dof_names)

        inf = np.full(self.nv, np.inf)
        self.velocity_bounds = _bounds(velocity_bounds, inf, self.nv, "velocity_bounds")
        self.impulsive_torque_bounds = _bounds(
            impulsive_torque_bounds, inf, self.nv, "impulsive_torque_bounds"
        )
        self.acceleration_bounds = _bounds(
            acceleration_bounds, inf, self.nv, "acceleration_bounds"
        )

    def _validate_structure(self):
        if not self.links:
            raise ValueError("model needs at least one link")
        for i, link in enumerate(self.links):
            j = link.joint
            if j.type not in JOINT_TYPES:
                raise ValueError(f"link {link.name!r}: unknown joint type {j.type!r}")
            if j.type == "floating" and i != 0:
                raise ValueError("a floating joint is only allowed at the root")
            if not (-1 <= j.parent < i):
                raise ValueError(f"link {link.name!r}: parent must precede it")
            if i > 0 and j.parent < 0:
                raise ValueError(f"link {link.name!r}: only the root attaches to the world")
            if j.type != "floating" and abs(np.linalg.norm(j.axis) - 1.0) > 1e-9:
                raise ValueError(f"link {link.name!r}: joint axis must be unit norm")
            if not link.mass > 0:
                raise ValueError(f"link {link.name!r}: mass must be positive")
            inertia = np.asarray(link.inertia)
            if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T, atol=1e-12):
                raise ValueError(f"link {link.name!r}: inertia must be symmetric 3x3")
            if np.linalg.eigvalsh(inertia).min() <= 0:
                raise ValueError(f"link {link.name!r}: inertia must be positive definite")
        for ee in self.end_effectors:
            if not 0 <= ee.link < len(self.links):
                raise ValueError(f"end-effector {ee.name!r}: invalid link index")

    def dof_slice(self, link_index):
        j = self.links[link_index].joint
        start = self.v_index[link_index]
        return slice(start, start + j.nv)

    def ee_index(self, ee):
        if isinstance(ee, str):
            for i, e in enumerate(self.end_effectors):
                if e.name == ee:
                    return i
            raise KeyError(f"unknown end-effector {ee!r}")
        if not 0 <= ee < len(self.end_effectors):
            raise KeyError(f"invalid end-effector id {ee}")
        return int(ee)

    @property
    def actuated(self):
        """Boolean mask of actuated DoFs (everything except the floating base)."""
        mask = np.ones(self.nv, dtype=bool)
        if self.floating:
            mask[:6] = False
        return mask

    def neutral_configuration(self):
        q = np.zeros(self.nq)
        if self.floating:
            q[3] = 1.0
        return q

    def total_mass(self):
        return float(sum(link.mass for link in self.links))


def _bounds(value, inf, n, name):
    if value is None:
        return (-inf.copy(), inf.copy())
    lo, hi = (np.asarray(v, dtype=float).copy() for v in value)
    if lo.shape != (n,) or hi.shape != (n,):
        raise ValueError(f"{name} must be two vectors of length {n}")
    if np.any(lo >= 0) or np.any(hi <= 0):
        raise ValueError(f"{name} must satisfy lower < 0 < upper componentwise")
    return (lo, hi)


@dataclass(frozen=True)
class RobotState:
    q: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def validate(self, model):
        q = np.asarray(self.q)
        v = np.asarray(self.v)
        if q.shape != (model.nq,) or v.shape != (model.nv,):
            raise DimensionError(
                f"state has q{q.shape}, v{v.shape}; model expects ({model.nq},), ({model.nv},)"
            )
        if model.floating and abs(np.linalg.norm(q[3:7]) - 1.0) > 1e-9:
            raise ValueError("floating-base quaternion must be unit norm")


def integrate_configuration(model, q, v, dt):
    """Move ``q`` along the constant generalized velocity ``v`` for ``dt``.

    The floating base follows ``p += R v_b dt`` and ``R <- R Exp(w_b dt)``.
    """
    q_next = np.array(q, dtype=float)
    for i, link in enumerate(model.links):
        j = link.joint
        iq = model.q_index[i]
        iv = model.v_index[i]
        if j.type == "floating":
            quat = q[iq + 3 : iq + 7]
            rot = quat_to_matrix(quat)
            q_next[iq : iq + 3] = q[iq : iq + 3] + rot @ v[iv : iv + 3] * dt
            new_quat = quat_multiply(quat, quat_exp(v[iv + 3 : iv + 6] * dt))
            q_next[iq + 3 : iq + 7] = new_quat / np.linalg.norm(new_quat)
        else:
            q_next[iq] = q[iq] + v[iv] * dt
    return q_next


class DynamicsCache:
    """Forward kinematics and cached derived quantities for one state.

    Construct through :func:`compute`. Everything is computed lazily and
    cached; instances are not mutated after construction otherwise.
    """

    def __init__(self, model: RobotModel, state: RobotState):
        state.validate(model)
        self.model = model
        self.q = np.asarray(state.q, dtype=float)
        self.v = np.asarray(state.v, dtype=float)
        nl = len(model.links)
        n = model.nv
        self.R = np.zeros((nl, 3, 3))
        self.p = np.zeros((nl, 3))
        self.axes = np.zeros((n, 3))
        self.points = np.zeros((n, 3))
        self.revolute = np.zeros(n, dtype=bool)

        for i, link in enumerate(model.links):
            j = link.joint
            if j.parent >= 0:
                rp, pp = self.R[j.parent], self.p[j.parent]
            else:
                rp, pp = np.eye(3), np.zeros(3)
            rj = rp @ rpy_matrix(j.origin_rpy)
            pj = pp + rp @ np.asarray(j.origin_xyz, dtype=float)
            iq = model.q_index[i]
            iv = model.v_index[i]
            if j.type == "floating":
                rb = rj @ quat_to_matrix(self.q[iq + 3 : iq + 7])
                pb = pj + rj @ self.q[iq : iq + 3]
                self.R[i], self.p[i] = rb, pb
                for k in range(3):
                    self.axes[iv + k] = rb[:, k]
                    self.points[iv + k] = pb
                    self.axes[iv + 3 + k] = rb[:, k]
                    self.points[iv + 3 + k] = pb
                    self.revolute[iv + 3 + k] = True
            elif j.type == "revolute":
                a = rj @ j.axis
                self.R[i] = rj @ axis_angle_matrix(j.axis, self.q[iq])
                self.p[i] = pj
                self.axes[iv], self.points[iv], self.revolute[iv] = a, pj, True
            else:
                a = rj @ j.axis
                self.R[i] = rj
                self.p[i] = pj + a * self.q[iq]
                self.axes[iv], self.points[iv] = a, pj

    # --- Jacobians -------------------------------------------------------

    def world_point(self, link, offset):
        return self.p[link] + self.R[link] @ np.asarray(offset, dtype=float)

    def _memo(self, name, link, offset, build):
        key = (name, link, tuple(np.asarray(offset, dtype=float)))
        memo = self.__dict__.setdefault("_jac_memo", {})
        if key not in memo:
            memo[key] = build()
        return memo[key].copy()

    def point_jacobian(self, link, offset=np.zeros(3)):
        """3 x nv translational Jacobian of a point fixed on ``link``."""
        return self._memo("J", link, offset, lambda: self._point_jacobian(link, offset))

    def _point_jacobian(self, link, offset):
        x = self.world_point(link, offset)
        mask = self.model.dof_mask[link]
        cols = np.where(self.revolute[:, None], cross(self.axes, x - self.points), self.axes)
        cols[~mask] = 0.0
        return cols.T.copy()

    def angular_jacobian(self, link):
        mask = self.model.dof_mask[link] & self.revolute
        cols = np.where(mask[:, None], self.axes, 0.0)
        return cols.T.copy()

    @cached_property
    def angular_velocities(self):
        return np.array(
            [self.angular_jacobian(i) @ self.v for i in range(len(self.model.links))]
        )

    @cached_property
    def _axis_rates(self):
        """Time derivatives of the DoF axes and points along the motion."""
        owner = self.model._dof_owner
        omega = self.angular_velocities[owner]
        adot = cross(omega, self.axes)
        odot = np.zeros_like(self.points)
        for k in range(self.model.nv):
            odot[k] = self.point_jacobian(owner[k], self._local(owner[k], self.points[k])) @ self.v
        return adot, odot

    def _local(self, link, x):
        return self.R[link].T @ (x - self.p[link])

    def point_velocity(self, link, offset=np.zeros(3)):
        return self.point_jacobian(link, offset) @ self.v

    def point_jacobian_dot(self, link, offset=np.zeros(3)):
        """Time derivative of :meth:`point_jacobian` along the current velocity."""
        return self._memo("Jdot", link, offset, lambda: self._point_jacobian_dot(link, offset))

    def _point_jacobian_dot(self, link, offset):
        adot, odot = self._axis_rates
        x = self.world_point(link, offset)
        xdot = self.point_velocity(link, offset)
        rev = cross(adot, x - self.points) + cross(self.axes, xdot - odot)
        cols = np.where(self.revolute[:, None], rev, adot)
        cols[~self.model.dof_mask[link]] = 0.0
        return cols.T.copy()

    def angular_jacobian_dot(self, link):
        adot, _ = self._axis_rates
        mask = self.model.dof_mask[link] & self.revolute
        return np.where(mask[:, None], adot, 0.0).T.copy()

    # --- end-effector helpers ---------------------------------------------

    def _ee(self, ee_id):
        ee = self.model.end_effectors[self.model.ee_index(ee_id)]
        return ee.link, ee.offset

    def ee_position(self, ee_id):
        return self.world_point(*self._ee(ee_id))

    def ee_velocity(self, ee_id):
        return self.point_velocity(*self._ee(ee_id))

    def ee_jacobian(self, ee_id):
        return self.point_jacobian(*self._ee(ee_id))

    def ee_jacobian_dot(self, ee_id):
        return self.point_jacobian_dot(*self._ee(ee_id))

    # --- dynamics ---------------------------------------------------------

    @cached_property
    def _link_terms(self):
        terms = []
        for i, link in enumerate(self.model.links):
            jv = self.point_jacobian(i, link.com)
            jw = self.angular_jacobian(i)
            jvd = self.point_jacobian_dot(i, link.com)
            jwd = self.angular_jacobian_dot(i)
            iw = self.R[i] @ link.inertia @ self.R[i].T
            terms.append((link.mass, jv, jw, jvd, jwd, iw, self.angular_velocities[i]))
        return terms

    @cached_property
    def mass_matrix(self):
        n = self.model.nv
        m_q = np.zeros((n, n))
        for m, jv, jw, _, _, iw, _ in self._link_terms:
            m_q += m * jv.T @ jv + jw.T @ iw @ jw
        return 0.5 * (m_q + m_q.T)

    @cached_property
    def coriolis_matrix(self):
        """Coriolis matrix ``C`` with ``M_dot = C + C^T``."""
        n = self.model.nv
        c = np.zeros((n, n))
        for m, jv, jw, jvd, jwd, iw, w in self._link_terms:
            c += m * jv.T @ jvd + jw.T @ (iw @ jwd + skew(w) @ iw @ jw)
        return c

    @cached_property
    def mass_matrix_dot(self):
        c = self.coriolis_matrix
        return c + c.T

    @cached_property
    def gravity_vector(self):
        """Generalized gravity force ``G`` of ``M a + C v + G = tau``."""
        g = np.zeros(self.model.nv)
        for (m, jv, *_rest) in self._link_terms:
            g -= m * jv.T @ GRAVITY
        return g

    @cached_property
    def bias(self):
        return self.coriolis_matrix @ self.v + self.gravity_vector

    def kinetic_energy(self):
        return 0.5 * self.v @ self.mass_matrix @ self.v

    def potential_energy(self):
        return -sum(
            link.mass * GRAVITY @ self.world_point(i, link.com)
            for i, link in enumerate(self.model.links)
        )

    def com(self):
        total = self.model.total_mass()
        return sum(
            link.mass * self.world_point(i, link.com) for i, link in enumerate(self.model.links)
        ) / total

    def com_jacobian(self):
        total = self.model.total_mass()
        return sum(
            link.mass * self.point_jacobian(i, link.com) for i, link in enumerate(self.model.links)
        ) / total

    def com_jacobian_dot(self):
        total = self.model.total_mass()
        return sum(
            link.mass * self.point_jacobian_dot(i, link.com)
            for i, link in enumerate(self.model.links)
        ) / total


def compute(model, state):
    return DynamicsCache(model, state)


# Functional surface ---------------------------------------------------------


def forward_kinematics(model, state):
    """World position and velocity of every end-effector, plus link frames."""
    kin = compute(model, state)
    return {
        "link_rotations": kin.R.copy(),
        "link_positions": kin.p.copy(),
        "ee_positions": np.array([kin.ee_position(i) for i in range(len(model.end_effectors))]),
        "ee_velocities": np.array([kin.ee_velocity(i) for i in range(len(model.end_effectors))]),
    }


def point_jacobian(model, state, ee_id):
    return compute(model, state).ee_jacobian(ee_id)


def jacobian_dot(model, state, ee_id):
    return compute(model, state).ee_jacobian_dot(ee_id)


def mass_matrix(model, state):
    return compute(model, state).mass_matrix


def mass_matrix_dot(model, state):
    return compute(model, state).mass_matrix_dot


def forward_dynamics(model, state, tau=None):
    """Joint-space acceleration of the unconstrained tree under gravity."""
    kin = compute(model, state)
    rhs = -kin.bias
    if tau is not None:
        rhs = rhs + tau
    return np.linalg.solve(kin.mass_matrix, rhs)
