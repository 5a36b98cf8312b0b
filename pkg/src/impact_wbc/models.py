"""Reference robots used by tests, scenarios and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .dynamics import EndEffector, Joint, Link, RobotModel, RobotState, compute

X = np.array([1.0, 0.0, 0.0])
Y = np.array([0.0, 1.0, 0.0])
Z = np.array([0.0, 0.0, 1.0])


def rod_inertia(mass, length, axis=0, radius=0.03):
    """Solid cylinder inertia about its center, long axis along ``axis``."""
    along = 0.5 * mass * radius**2
    across = mass * (3 * radius**2 + length**2) / 12.0
    diag = np.full(3, across)
    diag[axis] = along
    return np.diag(diag)


def box_inertia(mass, sx, sy, sz):
    return np.diag(
        [mass * (sy**2 + sz**2) / 12, mass * (sx**2 + sz**2) / 12, mass * (sx**2 + sy**2) / 12]
    )


def pendulum(length=1.0, mass=1.0, axis=Z, inertia=1e-6):
    """1-DoF revolute pendulum; the tip end-effector sits at local ``(length, 0, 0)``."""
    link = Link(
        "link1",
        mass,
        np.array([length, 0.0, 0.0]),
        np.eye(3) * inertia,
        Joint("revolute", -1, np.asarray(axis, dtype=float)),
    )
    return RobotModel(
        [link],
        [EndEffector("tip", 0, np.array([length, 0.0, 0.0]))],
        velocity_bounds=(np.array([-5.0]), np.array([5.0])),
        impulsive_torque_bounds=(np.array([-300.0]), np.array([300.0])),
        name="pendulum",
    )


def two_link_arm(l1=0.5, l2=0.5, m1=1.0, m2=1.0, axis=Z, hanging=False):
    """Planar 2R arm. With ``hanging`` the links point along ``-z`` and swing about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    direction = -Z if hanging else X
    long_axis = 2 if hanging else 0
    links = [
        Link("link1", m1, 0.5 * l1 * direction, rod_inertia(m1, l1, long_axis), Joint("revolute", -1, axis)),
        Link(
            "link2",
            m2,
            0.5 * l2 * direction,
            rod_inertia(m2, l2, long_axis),
            Joint("revolute", 0, axis, l1 * direction),
        ),
    ]
    ees = [
        EndEffector("elbow", 0, l1 * direction),
        EndEffector("tip", 1, l2 * direction),
    ]
    return RobotModel(
        links,
        ees,
        velocity_bounds=(np.full(2, -4.0), np.full(2, 4.0)),
        impulsive_torque_bounds=(np.full(2, -60.0), np.full(2, 60.0)),
        name="two_link_arm",
    )


def prismatic_z(mass=1.0):
    link = Link("slider", mass, np.zeros(3), np.eye(3) * 1e-3, Joint("prismatic", -1, Z))
    return RobotModel([link], [EndEffector("tip", 0)], name="prismatic")


def free_body(mass=2.0, inertia=None):
    """A single floating rigid body (6 DoF, no joints)."""
    inertia = box_inertia(mass, 0.3, 0.2, 0.1) if inertia is None else inertia
    link = Link("body", mass, np.zeros(3), inertia, Joint("floating"))
    return RobotModel([link], [EndEffector("center", 0)], name="free_body")


def seven_dof_arm():
    """Fixed-base 7-DoF anthropomorphic arm (alternating z/y axes)."""
    spec = [
        # (axis, origin in parent frame, mass, com, length)
        (Z, np.array([0.0, 0.0, 0.0]), 4.0, np.array([0.0, 0.0, 0.17]), 0.34),
        (Y, np.array([0.0, 0.0, 0.34]), 4.0, np.array([0.0, 0.0, 0.10]), 0.20),
        (Z, np.array([0.0, 0.0, 0.20]), 3.0, np.array([0.0, 0.0, 0.10]), 0.20),
        (Y, np.array([0.0, 0.0, 0.20]), 2.7, np.array([0.0, 0.0, 0.10]), 0.20),
        (Z, np.array([0.0, 0.0, 0.20]), 1.7, np.array([0.0, 0.0, 0.10]), 0.20),
        (Y, np.array([0.0, 0.0, 0.20]), 1.8, np.array([0.0, 0.0, 0.04]), 0.08),
        (Z, np.array([0.0, 0.0, 0.08]), 0.3, np.array([0.0, 0.0, 0.02]), 0.05),
    ]
    links = []
    for i, (axis, origin, m, com, length) in enumerate(spec):
        links.append(
            Link(f"joint{i + 1}", m, com, rod_inertia(m, length, 2, 0.05), Joint("revolute", i - 1, axis, origin))
        )
    vmax = np.array([1.7, 1.7, 1.7, 2.2, 2.4, 3.1, 3.1])
    tmax = np.array([176.0, 46.0, 110.0, 42.85, 110.0, 85.65, 40.0])
    return RobotModel(
        links,
        [
            EndEffector("elbow", 3, np.zeros(3)),
            EndEffector("tip", 6, np.array([0.0, 0.0, 0.10])),
        ],
        velocity_bounds=(-vmax, vmax),
        impulsive_torque_bounds=(-tmax, tmax),
        name="seven_dof_arm",
    )


BIPED_DIMS = {
    "hip_width": 0.10,
    "thigh": 0.40,
    "shank": 0.40,
    "ankle_height": 0.06,
    "torso_shoulder": 0.45,
    "shoulder_width": 0.20,
    "upper_arm": 0.30,
    "forearm": 0.30,
    "foot_length": 0.22,
    "foot_width": 0.10,
}


def planar_biped():
    """Floating-base biped whose joints all pitch about ``y``.

    DoF layout: 6 base, then per leg (hip, knee, ankle), then (shoulder, elbow)
    of the single arm. End-effectors: ``left_foot`` and ``right_foot`` sole
    centers, and ``hand``.
    """
    d = BIPED_DIMS
    links = [
        Link("base", 20.0, np.array([0.0, 0.0, 0.20]), box_inertia(20.0, 0.2, 0.3, 0.6), Joint("floating")),
    ]
    ees = []
    for side, sign in (("left", 1.0), ("right", -1.0)):
        hip = len(links)
        links += [
            Link(
                f"{side}_hip",
                3.0,
                np.array([0.0, 0.0, -0.5 * d["thigh"]]),
                rod_inertia(3.0, d["thigh"], 2, 0.05),
                Joint("revolute", 0, Y, np.array([0.0, sign * d["hip_width"], 0.0])),
            ),
            Link(
                f"{side}_knee",
                2.0,
                np.array([0.0, 0.0, -0.5 * d["shank"]]),
                rod_inertia(2.0, d["shank"], 2, 0.04),
                Joint("revolute", hip, Y, np.array([0.0, 0.0, -d["thigh"]])),
            ),
            Link(
                f"{side}_ankle",
                1.0,
                np.array([0.03, 0.0, -0.04]),
                box_inertia(1.0, d["foot_length"], d["foot_width"], 0.05),
                Joint("revolute", hip + 1, Y, np.array([0.0, 0.0, -d["shank"]])),
            ),
        ]
        ees.append(EndEffector(f"{side}_foot", hip + 2, np.array([0.03, 0.0, -d["ankle_height"]])))
    shoulder = len(links)
    links += [
        Link(
            "shoulder",
            1.5,
            np.array([0.0, 0.0, -0.5 * d["upper_arm"]]),
            rod_inertia(1.5, d["upper_arm"], 2, 0.04),
            Joint("revolute", 0, Y, np.array([0.0, d["shoulder_width"], d["torso_shoulder"]])),
        ),
        Link(
            "elbow",
            1.0,
            np.array([0.0, 0.0, -0.5 * d["forearm"]]),
            rod_inertia(1.0, d["forearm"], 2, 0.035),
            Joint("revolute", shoulder, Y, np.array([0.0, 0.0, -d["upper_arm"]])),
        ),
    ]
    ees.append(EndEffector("hand", shoulder + 1, np.array([0.0, 0.0, -d["forearm"]])))

    inf = np.inf
    vmax = np.array([inf] * 6 + [3.0, 3.0, 3.0] * 2 + [3.0, 3.5])
    amax = np.array([inf] * 6 + [200.0] * 8)
    tmax = np.array([inf] * 6 + [150.0] * 6 + [46.0, 42.85])
    return RobotModel(
        links,
        ees,
        velocity_bounds=(-vmax, vmax),
        impulsive_torque_bounds=(-tmax, tmax),
        acceleration_bounds=(-amax, amax),
        name="planar_biped",
    )


def _solve_points(model, q, targets, dofs, iters=50, project=None):
    """Newton iterations placing end-effector x/z coordinates on targets."""
    q = q.copy()
    for _ in range(iters):
        if project is not None:
            project(q)
        kin = compute(model, RobotState(q, np.zeros(model.nv)))
        err = []
        rows = []
        for ee, target in targets.items():
            e = kin.ee_position(ee) - target
            jac = kin.ee_jacobian(ee)
            err += [e[0], e[2]]
            rows += [jac[0], jac[2]]
        err = np.array(err)
        if np.linalg.norm(err) < 1e-13:
            break
        jac = np.array(rows)[:, dofs]
        step = np.linalg.lstsq(jac, -err, rcond=None)[0]
        step *= min(1.0, 0.3 / max(np.abs(step).max(), 1e-12))
        q[[model.q_index[0] + 1 + d for d in dofs]] += step  # v index d -> q index d+1
    return q


def biped_standing_state(model=None, stagger=0.06, base_height=0.80, hand_reach=0.40, hand_height=1.05):
    """Standing pose with feet staggered along ``x`` and the hand in front of the chest.

    The stagger keeps the lateral rows of the two foot Jacobians independent
    so that impulse prediction is well posed.
    """
    model = planar_biped() if model is None else model
    q = model.neutral_configuration()
    q[2] = base_height
    # joint positions in q are offset by one w.r.t. v because of the quaternion
    leg = {"left": [6, 7, 8], "right": [9, 10, 11]}
    q[1 + 6] = q[1 + 9] = 0.3
    q[1 + 7] = q[1 + 10] = -0.6
    q[1 + 12], q[1 + 13] = -0.6, -0.9
    targets = {
        "left_foot": np.array([stagger, 0.0, 0.0]),
        "right_foot": np.array([-stagger, 0.0, 0.0]),
        "hand": np.array([hand_reach, 0.0, hand_height]),
    }

    def flatten_feet(q):
        for hip, knee, ankle in leg.values():
            q[1 + ankle] = -(q[1 + hip] + q[1 + knee])

    q = _solve_points(
        model, q, targets, leg["left"][:2] + leg["right"][:2] + [12, 13], project=flatten_feet
    )
    flatten_feet(q)
    # ankles changed the sole height slightly; re-center the base on the ground plane
    kin = compute(model, RobotState(q, np.zeros(model.nv)))
    q[2] -= 0.5 * (kin.ee_position("left_foot")[2] + kin.ee_position("right_foot")[2])
    return RobotState(q, np.zeros(model.nv))
