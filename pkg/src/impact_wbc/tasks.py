"""Weighted least-squares task terms of the QP objective.

Each term is ``w |A x - b|^2`` over the full decision vector; summing terms
gives the ``(H, g)`` pair of ``1/2 x^T H x + g^T x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .constraints import VariableLayout

KINDS = ("ee_velocity", "posture", "com", "force_regulation")

DEFAULT_WEIGHTS = {"ee_velocity": 100.0, "posture": 1.0, "com": 10.0, "force_regulation": 1.0}
DETECTION_THRESHOLD = 20.0  # N


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    weight: float | None = None
    gains: dict = field(default_factory=dict)
    target: np.ndarray | float | None = None
    ee_id: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        w = DEFAULT_WEIGHTS[self.kind] if self.weight is None else float(self.weight)
        if not (np.isfinite(w) and w >= 0):
            raise ValueError("task weight must be finite and nonnegative")
        object.__setattr__(self, "weight", w)
        for k, g in self.gains.items():
            if np.ndim(g) == 0 and not g > 0:
                raise ValueError(f"gain {k!r} must be positive")


@dataclass(frozen=True)
class QuadraticTerm:
    A: np.ndarray
    b: np.ndarray
    weight: float
    name: str = ""

    def error(self, x):
        return self.A @ x - self.b

    def cost(self, x):
        e = self.error(x)
        return self.weight * float(e @ e)

    def hessian(self):
        return 2.0 * self.weight * self.A.T @ self.A

    def gradient(self):
        return -2.0 * self.weight * self.A.T @ self.b


def objective(terms, dim, regularization=0.0):
    """Sum of terms as ``(H, g)``; zero-weight terms are skipped outright."""
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    for t in terms:
        if t.weight == 0.0:
            continue
        H += t.hessian()
        g += t.gradient()
    if regularization:
        H += 2.0 * regularization * np.eye(dim)
    return 0.5 * (H + H.T), g


def ee_velocity_task(kin, ee_id, v_ref, layout: VariableLayout, dt, gain=0.1, weight=DEFAULT_WEIGHTS["ee_velocity"]):
    """End-effector acceleration servo ``J qdd + J_dot v = gain (v_ref - xdot) / dt``.

    ``gain = 1`` asks for ``v_ref`` in a single sample.
    """
    j = kin.ee_jacobian(ee_id)
    a_ref = gain * (np.asarray(v_ref, dtype=float) - kin.ee_velocity(ee_id)) / dt
    return QuadraticTerm(layout.embed_qdd(j), a_ref - kin.ee_jacobian_dot(ee_id) @ kin.v, weight, f"ee {ee_id}")


def joint_position_map(model):
    """``(v_index, q_index)`` pairs of the actuated 1-DoF joints."""
    pairs = []
    for i, link in enumerate(model.links):
        if link.joint.type != "floating":
            pairs.append((model.v_index[i], model.q_index[i]))
    return pairs


def base_orientation_error(q, q_ref):
    """Body-frame rotation vector taking the base attitude in ``q`` to that of ``q_ref``."""
    a = Rotation.from_quat(np.roll(q[3:7], -1))  # stored as (w, x, y, z)
    b = Rotation.from_quat(np.roll(q_ref[3:7], -1))
    return (a.inv() * b).as_rotvec()


def posture_task(kin, q_ref, layout: VariableLayout, kp=20.0, kd=None, weight=DEFAULT_WEIGHTS["posture"], base_weight=0.0):
    """PD acceleration reference on the actuated joints.

    ``q_ref`` is a full configuration vector; only joint entries are used,
    plus the base attitude when ``base_weight > 0`` on a floating model. The
    base rows are scaled so their weight is ``base_weight`` rather than
    ``weight``.
    """
    kd = 2.0 * np.sqrt(kp) if kd is None else kd
    pairs = joint_position_map(kin.model)
    sel = np.zeros((len(pairs), layout.nv))
    ref = np.zeros(len(pairs))
    for r, (iv, iq) in enumerate(pairs):
        sel[r, iv] = 1.0
        ref[r] = kp * (q_ref[iq] - kin.q[iq]) - kd * kin.v[iv]
    if base_weight > 0.0 and kin.model.floating and weight > 0.0:
        s = np.sqrt(base_weight / weight)
        rows = np.zeros((3, layout.nv))
        rows[:, 3:6] = s * np.eye(3)
        err = base_orientation_error(kin.q, q_ref)
        sel = np.vstack([rows, sel])
        ref = np.concatenate([s * (kp * err - kd * kin.v[3:6]), ref])
    return QuadraticTerm(layout.embed_qdd(sel), ref, weight, "posture")


def com_task(kin, c_ref, layout: VariableLayout, kp=50.0, kd=None, weight=DEFAULT_WEIGHTS["com"], axes=(0, 1, 2)):
    kd = 2.0 * np.sqrt(kp) if kd is None else kd
    axes = list(axes)
    j = kin.com_jacobian()[axes]
    c = kin.com()[axes]
    cdot = j @ kin.v
    a_ref = kp * (np.asarray(c_ref, dtype=float)[axes] - c) - kd * cdot
    return QuadraticTerm(layout.embed_qdd(j), a_ref - kin.com_jacobian_dot()[axes] @ kin.v, weight, "com")


def force_task(layout: VariableLayout, ee_id, normal, f_ref, weight=DEFAULT_WEIGHTS["force_regulation"]):
    """Direct normal-force target ``n . f = f_ref`` on a contact's force variables."""
    size = layout.force_size(ee_id)
    row = np.zeros((1, size))
    row[0, size - 3 :] = normal
    return QuadraticTerm(layout.embed_force(ee_id, row), np.array([float(f_ref)]), weight, f"force {ee_id}")


def admittance_velocity(normal, f_ref, f_measured, k_f=0.05, v_max=0.1):
    """Velocity set-point regulating the normal contact force.

    ``normal`` is the outward surface normal, so the contact force on the robot
    is ``(n . f) n`` with ``n . f >= 0``. Too little force yields a reference
    along ``-n``, into the surface.
    """
    n = np.asarray(normal, dtype=float)
    err = float(f_ref) - float(n @ np.asarray(f_measured, dtype=float))
    speed = np.clip(k_f * err, -v_max, v_max)
    return -speed * n


def impact_detected(normal, f_measured, threshold=DETECTION_THRESHOLD):
    return float(np.asarray(normal) @ np.asarray(f_measured)) > threshold
