import numpy as np
import pytest

from impact_wbc import dynamics, models
from impact_wbc.dynamics import DimensionError, RobotState, compute, integrate_configuration

from oracles import (
    energy_hessian_mass_matrix,
    fd_jacobian,
    fd_jacobian_dot,
    fd_point_velocity,
    random_state,
    recursive_point_velocity,
)

MODELS = {
    "two_link": models.two_link_arm,
    "seven_dof": models.seven_dof_arm,
    "biped": models.planar_biped,
    "free_body": models.free_body,
}


def zero_state(model):
    return RobotState(model.neutral_configuration(), np.zeros(model.nv))


class TestForwardKinematics:
    def test_pendulum_zero_state(self):
        model = models.pendulum(length=1.0)
        fk = dynamics.forward_kinematics(model, zero_state(model))
        np.testing.assert_allclose(fk["ee_positions"][0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(fk["ee_velocities"][0], 0.0)

    def test_pendulum_quarter_turn(self):
        model = models.pendulum(length=1.0)
        state = RobotState(np.array([np.pi / 2]), np.zeros(1))
        tip = dynamics.forward_kinematics(model, state)["ee_positions"][0]
        np.testing.assert_allclose(tip, [0.0, 1.0, 0.0], atol=1e-15)
        assert np.linalg.norm(tip) == pytest.approx(1.0)

    def test_two_link_tip_velocity_matches_position_differences(self):
        model = models.two_link_arm(0.5, 0.5)
        state = RobotState(np.array([np.pi / 4, np.pi / 4]), np.array([1.0, 0.0]))
        fk = dynamics.forward_kinematics(model, state)
        tip = model.ee_index("tip")
        expected = fd_point_velocity(model, state, 1, model.end_effectors[tip].offset)
        np.testing.assert_allclose(fk["ee_velocities"][tip], expected, atol=1e-9)
        # hand value: tip moves as the rigid 2-link rotated about the base joint
        np.testing.assert_allclose(expected, [-0.5 * np.sqrt(2) / 2 - 0.5, 0.5 * np.sqrt(2) / 2, 0.0], atol=1e-9)

    def test_dimension_mismatch_rejected(self):
        model = models.two_link_arm()
        with pytest.raises(DimensionError):
            compute(model, RobotState(np.zeros(3), np.zeros(2)))

    def test_non_unit_quaternion_rejected(self):
        model = models.free_body()
        q = model.neutral_configuration()
        q[3] = 2.0
        with pytest.raises(ValueError):
            compute(model, RobotState(q, np.zeros(6)))


class TestModelValidation:
    def test_floating_joint_must_be_root(self):
        link0 = dynamics.Link("a", 1.0, np.zeros(3), np.eye(3), dynamics.Joint("revolute"))
        link1 = dynamics.Link("b", 1.0, np.zeros(3), np.eye(3), dynamics.Joint("floating", 0))
        with pytest.raises(ValueError):
            dynamics.RobotModel([link0, link1])

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"mass": 0.0},
            {"inertia": np.diag([1.0, 1.0, -1.0])},
            {"joint": dynamics.Joint("revolute", -1, np.array([0.0, 0.0, 2.0]))},
        ],
    )
    def test_bad_links_rejected(self, kwargs):
        base = {"name": "a", "mass": 1.0, "com": np.zeros(3), "inertia": np.eye(3), "joint": dynamics.Joint("revolute")}
        base.update(kwargs)
        with pytest.raises(ValueError):
            dynamics.RobotModel([dynamics.Link(**base)])

    def test_bounds_must_straddle_zero(self):
        link = dynamics.Link("a", 1.0, np.zeros(3), np.eye(3), dynamics.Joint("revolute"))
        with pytest.raises(ValueError):
            dynamics.RobotModel([link], velocity_bounds=(np.array([0.5]), np.array([1.0])))


class TestJacobian:
    def test_pendulum_at_zero(self):
        model = models.pendulum(length=2.0)
        jac = dynamics.point_jacobian(model, zero_state(model), "tip")
        np.testing.assert_allclose(jac[:, 0], [0.0, 2.0, 0.0], atol=1e-15)

    def test_prismatic_column_is_axis(self):
        model = models.prismatic_z()
        jac = dynamics.point_jacobian(model, RobotState(np.array([0.3]), np.zeros(1)), 0)
        np.testing.assert_array_equal(jac[:, 0], [0.0, 0.0, 1.0])

    def test_invalid_ee(self):
        model = models.two_link_arm()
        with pytest.raises(KeyError):
            dynamics.point_jacobian(model, zero_state(model), 7)

    @pytest.mark.parametrize("name", sorted(MODELS))
    def test_matches_finite_differences(self, name):
        model = MODELS[name]()
        rng = np.random.default_rng(1)
        for _ in range(3):
            state = random_state(model, rng)
            kin = compute(model, state)
            for ee in model.end_effectors:
                expected = fd_jacobian(model, state, ee.link, ee.offset)
                np.testing.assert_allclose(kin.point_jacobian(ee.link, ee.offset), expected, atol=1e-6)

    def test_velocity_identity_on_many_states(self):
        # 10^4 random states against an outward twist recursion
        rng = np.random.default_rng(2)
        for name, count in (("two_link", 8000), ("biped", 2000)):
            model = MODELS[name]()
            ee = model.end_effectors[-1]
            for _ in range(count):
                state = random_state(model, rng)
                kin = compute(model, state)
                xdot = recursive_point_velocity(model, state, ee.link, ee.offset)
                err = np.linalg.norm(xdot - kin.point_jacobian(ee.link, ee.offset) @ state.v)
                assert err <= 1e-10 * (1 + np.linalg.norm(state.v))


class TestJacobianDot:
    def test_zero_velocity(self):
        model = models.planar_biped()
        state = models.biped_standing_state(model)
        for ee in range(3):
            np.testing.assert_array_equal(dynamics.jacobian_dot(model, state, ee), 0.0)

    def test_pendulum_centripetal(self):
        length = 1.5
        model = models.pendulum(length=length)
        state = RobotState(np.array([0.4]), np.array([1.0]))
        acc = dynamics.jacobian_dot(model, state, "tip") @ state.v
        radial = np.array([np.cos(0.4), np.sin(0.4), 0.0])
        np.testing.assert_allclose(acc, -length * 1.0**2 * radial, atol=1e-14)

    @pytest.mark.parametrize("name", ["two_link", "seven_dof", "biped"])
    def test_matches_time_differences(self, name):
        model = MODELS[name]()
        rng = np.random.default_rng(3)
        for _ in range(3):
            state = random_state(model, rng)
            kin = compute(model, state)
            for ee in model.end_effectors:
                expected = fd_jacobian_dot(model, state, ee.link, ee.offset)
                assert np.abs(kin.point_jacobian_dot(ee.link, ee.offset) - expected).max() <= 1e-5


class TestMassMatrix:
    def test_free_body_blocks(self):
        inertia = np.diag([0.2, 0.3, 0.4])
        model = models.free_body(mass=3.0, inertia=inertia)
        rng = np.random.default_rng(4)
        state = random_state(model, rng)
        m = dynamics.mass_matrix(model, state)
        np.testing.assert_allclose(m[:3, :3], 3.0 * np.eye(3), atol=1e-14)
        # body-frame angular velocity sees the body-frame inertia
        np.testing.assert_allclose(m[3:, 3:], inertia, atol=1e-14)
        np.testing.assert_allclose(m[:3, 3:], 0.0, atol=1e-14)

    def test_point_mass_pendulum(self):
        model = models.pendulum(length=0.7, mass=2.0, inertia=1e-6)
        m = dynamics.mass_matrix(model, RobotState(np.array([0.3]), np.zeros(1)))
        assert m[0, 0] == pytest.approx(2.0 * 0.7**2 + 1e-6, rel=1e-14)

    @pytest.mark.parametrize("name", ["two_link", "biped"])
    def test_energy_hessian_oracle(self, name):
        model = MODELS[name]()
        rng = np.random.default_rng(5)
        state = random_state(model, rng)
        expected = energy_hessian_mass_matrix(model, state.q)
        np.testing.assert_allclose(dynamics.mass_matrix(model, state), expected, atol=1e-6)

    @pytest.mark.parametrize("name", sorted(MODELS))
    def test_symmetric_positive_definite(self, name):
        model = MODELS[name]()
        rng = np.random.default_rng(6)
        for _ in range(20):
            m = dynamics.mass_matrix(model, random_state(model, rng))
            assert np.abs(m - m.T).max() <= 1e-12
            assert np.linalg.eigvalsh(m).min() > 0

    @pytest.mark.parametrize("name", sorted(MODELS))
    def test_energy_rate_consistency(self, name):
        model = MODELS[name]()
        rng = np.random.default_rng(7)
        for _ in range(10):
            kin = compute(model, random_state(model, rng))
            v = kin.v
            mdot = kin.mass_matrix_dot
            assert np.abs(mdot - mdot.T).max() <= 1e-12
            assert abs(v @ (mdot - 2 * kin.coriolis_matrix) @ v) <= 1e-9 * (1 + v @ v)

    @pytest.mark.parametrize("name", ["two_link", "seven_dof", "biped"])
    def test_mass_matrix_dot_convergence(self, name):
        model = MODELS[name]()
        state = random_state(model, np.random.default_rng(8))
        kin = compute(model, state)
        errors = []
        for h in (1e-3, 1e-4):
            q_next = integrate_configuration(model, state.q, state.v, h)
            m_next = dynamics.mass_matrix(model, RobotState(q_next, state.v))
            errors.append(np.abs((m_next - kin.mass_matrix) / h - kin.mass_matrix_dot).max())
        # first-order forward difference: error shrinks ~10x with h
        assert errors[1] < errors[0] / 5
        assert errors[1] < 1e-2


def test_gravity_is_potential_gradient():
    model = models.two_link_arm(axis=models.Y, hanging=True)
    rng = np.random.default_rng(9)
    state = random_state(model, rng)
    kin = compute(model, state)
    h = 1e-6
    grad = []
    for k in range(model.nv):
        e = np.zeros(model.nv)
        e[k] = 1.0
        up = compute(model, RobotState(integrate_configuration(model, state.q, e, h), e)).potential_energy()
        dn = compute(model, RobotState(integrate_configuration(model, state.q, e, -h), e)).potential_energy()
        grad.append((up - dn) / (2 * h))
    np.testing.assert_allclose(kin.gravity_vector, grad, atol=1e-7)


def test_passive_swing_conserves_energy():
    # double pendulum hanging under gravity, integrated by an adaptive high-order scheme
    from scipy.integrate import solve_ivp

    model = models.two_link_arm(axis=np.array([0.0, 1.0, 0.0]), hanging=True)
    rest = compute(model, zero_state(model)).potential_energy()

    def energy(y):
        kin = compute(model, RobotState(y[:2], y[2:]))
        return kin.kinetic_energy() + kin.potential_energy() - rest

    def rhs(_, y):
        return np.concatenate([y[2:], dynamics.forward_dynamics(model, RobotState(y[:2], y[2:]))])

    sol = solve_ivp(rhs, (0.0, 5.0), [0.8, -0.4, 0.0, 0.0], method="DOP853", rtol=1e-9, atol=1e-9)
    assert sol.success
    e = np.array([energy(y) for y in sol.y.T])
    assert np.abs(e - e[0]).max() <= 0.01 * e[0]
    # it really swings: the elbow angle changes sign
    assert sol.y[1].max() > 0.1 and sol.y[1].min() < -0.1
