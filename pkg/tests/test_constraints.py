from dataclasses import dataclass, field

import numpy as np
import pytest

from impact_wbc import constraints as cs
from impact_wbc import contact as ct
from impact_wbc import impact, models
from impact_wbc.constraints import LinearConstraintBlock, VariableLayout
from impact_wbc.dynamics import RobotState, compute, integrate_configuration
from impact_wbc.impact import ImpactSpec

DT = 0.005
UNIT_SQUARE = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])


@dataclass
class FakePrediction:
    """Just the sensitivity maps the builders read."""

    map_dq: np.ndarray
    map_tau: np.ndarray
    maps: dict = field(default_factory=dict)

    def force_map(self, ee):
        return self.maps[ee][-3:]

    def wrench_map(self, ee):
        m = self.maps[ee]
        return m if m.shape[0] == 6 else np.vstack([np.zeros((3, m.shape[1])), m])


def zero_prediction(n, ees=()):
    return FakePrediction(np.zeros((n, n)), np.zeros((n, n)), {e: np.zeros((3, n)) for e in ees})


class Kin:
    """Stand-in exposing only the generalized velocity."""

    def __init__(self, v):
        self.v = np.asarray(v, dtype=float)


class TestLayout:
    def test_spans(self):
        lay = VariableLayout(14, (("left_foot", 6), ("right_foot", 6), ("hand", 3)))
        assert lay.dim == 29
        assert lay.force_slice("right_foot") == slice(20, 26)
        assert lay.spans()["f_hand"] == (26, 29)

    def test_rejects_duplicates_and_sizes(self):
        with pytest.raises(ValueError):
            VariableLayout(3, (("a", 6), ("a", 6)))
        with pytest.raises(ValueError):
            VariableLayout(3, (("a", 4),))


class TestBlock:
    def test_validation(self):
        with pytest.raises(ValueError):
            LinearConstraintBlock(np.ones((2, 3)), np.ones(3), "ineq", "Eq3")
        with pytest.raises(ValueError):
            LinearConstraintBlock(np.ones((1, 3)), [np.inf], "ineq", "Eq3")
        with pytest.raises(ValueError):
            LinearConstraintBlock(np.ones((1, 3)), [0.0], "ineq", "Eq4")
        with pytest.raises(ValueError):
            LinearConstraintBlock(np.ones((1, 3)), [0.0], "soft", "Eq3")

    def test_normalized_keeps_feasible_set(self):
        rng = np.random.default_rng(0)
        b = LinearConstraintBlock(rng.normal(size=(6, 4)) * 100, rng.normal(size=6), "ineq", "Eq18")
        nb = b.normalized()
        np.testing.assert_allclose(np.abs(nb.G).max(axis=1), 1.0)
        for _ in range(100):
            x = rng.normal(size=4)
            assert np.array_equal(b.margins(x) >= 0, nb.margins(x) >= 0)

    def test_text_dump(self):
        text = LinearConstraintBlock([[1.0, 0.5]], [2.0], "ineq", "Eq17", "demo").to_text()
        assert text.splitlines()[0] == "block Eq17 demo ineq 1x2"
        assert "| 2.0" in text


class TestGeometric:
    def test_stationary_contact(self):
        model = models.free_body()
        kin = compute(model, RobotState(model.neutral_configuration(), np.zeros(6)))
        lay = VariableLayout(6)
        b = cs.contact_geometric_rows(kin, "center", lay, DT)
        assert b.kind == "eq" and b.label == "Eq1"
        np.testing.assert_array_equal(b.h, 0.0)
        np.testing.assert_allclose(b.G[:3], kin.ee_jacobian("center"))

    def test_drift_correction(self):
        model = models.free_body()
        v = np.array([1e-3, 0, 0, 0, 0, 0])
        kin = compute(model, RobotState(model.neutral_configuration(), v))
        b = cs.contact_geometric_rows(kin, "center", VariableLayout(6), DT, angular=False)
        np.testing.assert_allclose(b.h, [-0.2, 0.0, 0.0], atol=1e-15)

    def test_one_step_contact_velocity(self):
        model = models.planar_biped()
        state = models.biped_standing_state(model)
        kin = compute(model, state)
        lay = VariableLayout(model.nv)
        blocks = [cs.contact_geometric_rows(kin, f, lay, DT) for f in ("left_foot", "right_foot")]
        A = np.vstack([b.G for b in blocks])
        rhs = np.concatenate([b.h for b in blocks])
        rng = np.random.default_rng(1)
        _, s, vt = np.linalg.svd(A)
        null = vt[np.sum(s > 1e-10) :].T
        for _ in range(20):
            qdd = np.linalg.lstsq(A, rhs, rcond=None)[0] + null @ rng.normal(size=null.shape[1])
            v1 = state.v + DT * qdd
            q1 = integrate_configuration(model, state.q, v1, DT)
            kin1 = compute(model, RobotState(q1, v1))
            for f in ("left_foot", "right_foot"):
                assert np.linalg.norm(kin1.ee_velocity(f)) <= 1e-6


class TestJointVelocityRows:
    def test_decoupled_limit(self):
        v = np.array([0.5, -1.0])
        bounds = (np.full(2, -4.0), np.full(2, 4.0))
        lay = VariableLayout(2)
        b = cs.post_impact_joint_velocity_rows(Kin(v), zero_prediction(2), bounds, lay, DT, form="verbatim")
        np.testing.assert_array_equal(b.G, 0.0)
        np.testing.assert_allclose(b.h, np.concatenate([4.0 - v, v + 4.0]))
        assert np.all(b.h > 0)
        realized = cs.post_impact_joint_velocity_rows(Kin(v), zero_prediction(2), bounds, lay, DT)
        base = cs.velocity_bound_rows(Kin(v), bounds, lay, DT)
        np.testing.assert_array_equal(realized.G, base.G)
        np.testing.assert_array_equal(realized.h, base.h)

    def test_scalar_cap(self):
        # 1-DoF, v at 90 % of the bound, map entry 0.5
        vmax, v, m = 5.0, 4.5, 0.5
        pred = FakePrediction(np.array([[m]]), np.zeros((1, 1)))
        lay = VariableLayout(1)
        bounds = (np.array([-vmax]), np.array([vmax]))
        verb = cs.post_impact_joint_velocity_rows(Kin([v]), pred, bounds, lay, DT, form="verbatim")
        cap = verb.h[0] / verb.G[0, 0]
        assert cap == pytest.approx((vmax - v - m * v) / (m * DT))
        assert cap == pytest.approx(-700.0)
        real = cs.post_impact_joint_velocity_rows(Kin([v]), pred, bounds, lay, DT)
        assert real.h[0] / real.G[0, 0] == pytest.approx((vmax / (1 + m) - v) / DT)

    def test_inverted_bounds(self):
        with pytest.raises(ValueError):
            cs.post_impact_joint_velocity_rows(
                Kin([0.0]), zero_prediction(1), (np.array([1.0]), np.array([-1.0])), VariableLayout(1), DT
            )

    def test_infinite_bounds_skipped(self):
        b = cs.post_impact_joint_velocity_rows(
            Kin(np.zeros(3)),
            zero_prediction(3),
            (np.array([-np.inf, -1.0, -1.0]), np.array([np.inf, 1.0, np.inf])),
            VariableLayout(3),
            DT,
        )
        assert b.rows == 3


def random_maps(rng, n):
    return FakePrediction(rng.normal(size=(n, n)) * 0.5, rng.normal(size=(n, n)) * 20, {"foot": rng.normal(size=(3, n))})


class TestGuaranteeProperty:
    """Rows hold exactly when the predicted post-impact quantity is within bounds."""

    def test_joint_velocity(self):
        rng = np.random.default_rng(2)
        n = 4
        agree = 0
        for _ in range(10_000):
            pred = random_maps(rng, n)
            v = rng.normal(size=n)
            hi = rng.uniform(0.5, 3.0, size=n)
            bounds = (-hi, hi)
            qdd = rng.normal(size=n) * 100
            w = v + DT * qdd
            for form, post in (("verbatim", v + pred.map_dq @ w), ("realized", w + pred.map_dq @ w)):
                b = cs.post_impact_joint_velocity_rows(Kin(v), pred, bounds, VariableLayout(n), DT, form=form)
                rows_ok = np.all(b.margins(qdd) >= -1e-9)
                inside = np.all(np.abs(post) <= hi + 1e-9)
                agree += rows_ok == inside
        assert agree == 20_000

    def test_impulsive_torque(self):
        rng = np.random.default_rng(3)
        n = 4
        for _ in range(10_000):
            pred = random_maps(rng, n)
            v = rng.normal(size=n)
            hi = rng.uniform(10.0, 100.0, size=n)
            duration = rng.uniform(0.002, 0.01)
            qdd = rng.normal(size=n) * 100
            b = cs.impulsive_torque_rows(Kin(v), pred, (-hi, hi), VariableLayout(n), DT, duration)
            dtau = pred.map_tau @ (v + DT * qdd) / duration
            assert np.all(b.margins(qdd) >= -1e-9) == np.all(np.abs(dtau) <= hi + 1e-9)

    def test_cop_friction_zmp(self):
        rng = np.random.default_rng(4)
        n = 4
        spec = ct.ContactSpec("foot", UNIT_SQUARE * 0.2, mu=0.7)
        poly = ct.polygon_from_points(UNIT_SQUARE * 0.4)
        lay = VariableLayout(n)
        for _ in range(10_000):
            pred = random_maps(rng, n)
            v = rng.normal(size=n) * 0.1
            qdd = rng.normal(size=n) * 20
            duration = 0.005
            F = np.concatenate([rng.normal(size=3) * 2, rng.normal(size=2) * 10, [rng.uniform(50, 200)]])
            fbar = pred.maps["foot"] @ (v + DT * qdd) / duration
            post = F + np.concatenate([np.zeros(3), fbar])

            b = cs.post_impact_cop_rows(Kin(v), pred, spec, F, lay, DT, duration)
            if post[5] > 0:
                inside = np.all(ct.cop_constraint_matrix(spec) @ post <= 1e-9)
                assert np.all(b.margins(qdd) >= -1e-9) == inside

            b = cs.post_impact_friction_rows(Kin(v), pred, spec, F[3:], lay, DT, duration)
            pyr = ct.friction_pyramid_rows(spec.normal, spec.mu)
            assert np.all(b.margins(qdd) >= -1e-9) == np.all(pyr @ post[3:] <= 1e-9)

            point = np.array([0.1, 0.0, 0.8])
            b = cs.post_impact_zmp_rows(Kin(v), pred, poly, [F], {"foot": point}, lay, DT, duration)
            total = F + ct.point_force_wrench_map(point) @ fbar
            if total[5] > 0:
                inside = poly.contains(ct.zmp([total]), tol=1e-9)
                assert np.all(b.margins(qdd) >= -1e-9 * total[5]) == inside or abs(poly.margins(ct.zmp([total])).min()) < 1e-8


class TestImpulsiveTorqueRows:
    def test_rest(self):
        b = cs.impulsive_torque_rows(
            Kin(np.zeros(3)), zero_prediction(3), (np.full(3, -5.0), np.full(3, 5.0)), VariableLayout(3), DT, 0.005
        )
        assert np.all(b.margins(np.zeros(3)) >= 0)

    def test_configured_bounds_verbatim(self):
        model = models.seven_dof_arm()
        lo, hi = model.impulsive_torque_bounds
        b = cs.impulsive_torque_rows(Kin(np.zeros(7)), zero_prediction(7), (lo, hi), VariableLayout(7), DT, 0.005)
        for value in (46.0, 42.85, 85.65):
            assert value in b.h

    def test_bad_duration(self):
        with pytest.raises(ValueError):
            cs.impulsive_torque_rows(Kin([0.0]), zero_prediction(1), ([-1.0], [1.0]), VariableLayout(1), DT, 0.0)

    def test_pendulum_threshold(self):
        # tip impulse I = I_joint (1 + c_r) w / L, torque = L I / duration
        model = models.pendulum(length=1.0, mass=1.0)
        c_r, duration, tmax = 0.02, 0.005, 300.0
        inertia = 1.0 + 1e-6
        w_limit = tmax * duration / (inertia * (1 + c_r))
        for w, ok in ((w_limit * (1 - 1e-6), True), (w_limit * (1 + 1e-6), False)):
            kin = compute(model, RobotState(np.zeros(1), np.array([0.5 * w])))
            spec = ImpactSpec("tip", np.array([0.0, -1.0, 0.0]), c_r, duration)
            pred = impact.predict_impulses(kin, (), spec, DT, predicted=False)
            qdd = np.array([0.5 * w / DT])
            b = cs.impulsive_torque_rows(kin, pred, model.impulsive_torque_bounds, VariableLayout(1), DT, duration)
            assert bool(np.all(b.margins(qdd) >= 0)) == ok
            np.testing.assert_allclose(pred.map_tau @ np.array([w]) / duration, -inertia * (1 + c_r) * w / duration)


class TestContactRows:
    spec = ct.ContactSpec("foot", UNIT_SQUARE)
    lay = VariableLayout(2)

    def pred_with_force(self, fbar, duration=0.005):
        # maps chosen so that f_bar equals ``fbar`` at w = (1, 0)
        m = np.zeros((3, 2))
        m[:, 0] = np.asarray(fbar) * duration
        return FakePrediction(np.zeros((2, 2)), np.zeros((2, 2)), {"foot": m})

    def test_cop_no_impact_limit(self):
        F = ct.Wrench(np.array([1.0, 0.0, 20.0]), np.array([0.5, -1.0, 0.0]))
        b = cs.post_impact_cop_rows(Kin(np.zeros(2)), zero_prediction(2, ["foot"]), self.spec, F, self.lay, DT, 0.005)
        np.testing.assert_array_equal(b.G, 0.0)
        np.testing.assert_allclose(b.h, -ct.cop_constraint_matrix(self.spec) @ F.stacked())

    def test_cop_square_margin(self):
        fn, fz = 40.0, -10.0
        F = np.array([0, 0, 0, 0, 0, fn])
        pred = self.pred_with_force([3.0, -2.0, fz])
        b = cs.post_impact_cop_rows(Kin(np.array([1.0, 0.0])), pred, self.spec, F, self.lay, DT, 0.005)
        np.testing.assert_allclose(b.margins(np.zeros(2)), 0.5 * (fn + fz))

    def test_cop_wrench_impulse(self):
        # a surface-contact prediction carries an impulsive torque: tau_y = -t moves the CoP to x = t / f_n
        fn = 40.0
        F = np.array([0, 0, 0, 0, 0, fn])
        for t, inside in ((10.0, True), (30.0, False)):
            m = np.zeros((6, 2))
            m[1, 0] = -t * 0.005
            pred = FakePrediction(np.zeros((2, 2)), np.zeros((2, 2)), {"foot": m})
            b = cs.post_impact_cop_rows(Kin(np.array([1.0, 0.0])), pred, self.spec, F, self.lay, DT, 0.005)
            post = F + np.array([0, -t, 0, 0, 0, 0])
            np.testing.assert_allclose(b.margins(np.zeros(2)), -ct.cop_constraint_matrix(self.spec) @ post)
            assert (b.margins(np.zeros(2)).min() >= 0) == inside == (abs(t / fn) <= 0.5)

    def test_cop_inactive(self):
        with pytest.raises(ct.ContactInactiveError):
            cs.post_impact_cop_rows(
                Kin(np.zeros(2)), zero_prediction(2, ["foot"]), self.spec, np.zeros(6), self.lay, DT, 0.005
            )

    def test_friction_normal_impulse_loosens(self):
        f = np.array([2.0, 1.0, 20.0])
        base = cs.post_impact_friction_rows(Kin([1.0, 0.0]), zero_prediction(2, ["foot"]), self.spec, f, self.lay, DT, 0.005)
        pushed = cs.post_impact_friction_rows(Kin([1.0, 0.0]), self.pred_with_force([0, 0, 30.0]), self.spec, f, self.lay, DT, 0.005)
        assert np.all(pushed.margins(np.zeros(2)) > base.margins(np.zeros(2)))

    def test_friction_tangential_violation(self):
        f = np.array([0.0, 0.0, 10.0])
        pred = self.pred_with_force([0.8 * 30.0, 0.0, 20.0])  # |f_t| = 24 > 0.7 * 30
        b = cs.post_impact_friction_rows(Kin([1.0, 0.0]), pred, self.spec, f, self.lay, DT, 0.005)
        assert b.margins(np.zeros(2)).min() < 0

    def test_componentwise_rows_match_direct_evaluation(self):
        rng = np.random.default_rng(5)
        p_mu = ct.friction_projector(self.spec.normal, self.spec.mu)
        for _ in range(2000):
            f = np.array([*rng.normal(size=2) * 5, rng.uniform(1, 40)])
            fbar = rng.normal(size=3) * 10
            b = cs.post_impact_friction_rows(
                Kin([1.0, 0.0]), self.pred_with_force(fbar), self.spec, f, self.lay, DT, 0.005, form="componentwise"
            )
            np.testing.assert_array_equal(b.margins(np.zeros(2)) >= 0, p_mu @ (f + fbar) <= 0)

    def test_inactive_friction(self):
        with pytest.raises(ct.ContactInactiveError):
            cs.post_impact_friction_rows(
                Kin(np.zeros(2)), zero_prediction(2, ["foot"]), self.spec, np.array([0, 0, -1.0]), self.lay, DT, 0.005
            )


class TestZmpRows:
    poly = ct.polygon_from_points(UNIT_SQUARE)

    def test_no_impact_limit(self):
        ws = [ct.wrench_about_origin(np.array([0.1, 0.0, 0.0]), np.array([0, 0, 0, 0, 0, 200.0]))]
        b = cs.post_impact_zmp_rows(
            Kin(np.zeros(2)), zero_prediction(2, ["hand"]), self.poly, ws, {"hand": np.zeros(3)}, VariableLayout(2), DT, 0.005
        )
        np.testing.assert_array_equal(b.G, 0.0)
        np.testing.assert_allclose(b.h, -ct.zmp_constraint_matrix(self.poly) @ ws[0])

    def test_point_mass_hand_impulse(self):
        weight = 9.81 * 30.0
        fx = -60.0
        hand = np.array([0.3, 0.0, 1.0])
        m = np.zeros((3, 2))
        m[0, 0] = fx * 0.005
        pred = FakePrediction(np.zeros((2, 2)), np.zeros((2, 2)), {"hand": m})
        ws = [np.array([0, 0, 0, 0, 0, weight])]
        b = cs.post_impact_zmp_rows(Kin([1.0, 0.0]), pred, self.poly, ws, {"hand": hand}, VariableLayout(2), DT, 0.005)
        shift = -hand[2] * fx / weight  # ZMP_x = -tau_y / f_n with tau_y = z f_x
        z = np.array([shift, 0.0])
        np.testing.assert_allclose(ct.zmp([ws[0] + ct.point_force_wrench_map(hand) @ (m[:, 0] / 0.005)]), z)
        np.testing.assert_allclose(b.margins(np.zeros(2)), weight * self.poly.margins(z))

    def test_zero_normal_force(self):
        with pytest.raises(ct.ContactInactiveError):
            cs.post_impact_zmp_rows(
                Kin(np.zeros(2)), zero_prediction(2, ["hand"]), self.poly, [np.zeros(6)], {}, VariableLayout(2), DT, 0.005
            )

    def test_degenerate_polygon(self):
        with pytest.raises(ct.DegeneratePolygonError):
            ct.polygon_from_points([[0, 0], [1, 1], [2, 2]])

    def test_baseline_rows_on_wrench_variables(self):
        lay = VariableLayout(0, (("a", 6), ("b", 6)))
        pos = {"a": np.array([0.2, 0.1, 0.0]), "b": np.array([-0.2, -0.1, 0.0])}
        b = cs.zmp_rows(self.poly, lay, pos)
        x = np.concatenate([[0, 0, 0, 0, 0, 100.0], [0, 0, 0, 0, 0, 50.0]])
        total = sum(ct.wrench_about_origin(pos[k], x[lay.force_slice(k)]) for k in ("a", "b"))
        np.testing.assert_allclose(b.G @ x, ct.zmp_constraint_matrix(self.poly) @ total)


class TestAffinity:
    def test_interpolation(self):
        rng = np.random.default_rng(6)
        pred = random_maps(rng, 3)
        kin = Kin(rng.normal(size=3))
        lay = VariableLayout(3)
        spec = ct.ContactSpec("foot", UNIT_SQUARE * 0.1)
        F = np.array([0.1, 0.2, 0, 1.0, 0.5, 50.0])
        blocks = [
            cs.post_impact_joint_velocity_rows(kin, pred, (np.full(3, -2.0), np.full(3, 2.0)), lay, DT),
            cs.impulsive_torque_rows(kin, pred, (np.full(3, -20.0), np.full(3, 20.0)), lay, DT, 0.005),
            cs.post_impact_cop_rows(kin, pred, spec, F, lay, DT, 0.005),
            cs.post_impact_friction_rows(kin, pred, spec, F[3:], lay, DT, 0.005),
            cs.post_impact_zmp_rows(kin, pred, ct.polygon_from_points(UNIT_SQUARE), [F], {"foot": np.zeros(3)}, lay, DT, 0.005),
        ]
        for b in blocks:
            x1, x2 = rng.normal(size=3), rng.normal(size=3)
            for t in (0.0, 0.3, 1.0):
                lhs = b.G @ (t * x1 + (1 - t) * x2)
                rhs = t * (b.G @ x1) + (1 - t) * (b.G @ x2)
                np.testing.assert_allclose(lhs, rhs, atol=1e-12 * max(1.0, np.abs(b.G).max()))


class TestAssemble:
    def block(self, rows, label, seed, kind="ineq", d=4):
        rng = np.random.default_rng(seed)
        return LinearConstraintBlock(rng.normal(size=(rows, d)), rng.normal(size=rows), kind, label, str(seed))

    def test_empty(self):
        out = cs.assemble([], 4)
        assert out.G.shape == (0, 4) and out.A_eq.shape == (0, 4)

    def test_preserves_order(self):
        a, b = self.block(3, "Eq17", 0), self.block(5, "Eq17", 1)
        out = cs.assemble([a, b], 4)
        assert out.G.shape == (8, 4)
        np.testing.assert_array_equal(out.G[:3], a.G)
        np.testing.assert_array_equal(out.h[3:], b.h)

    def test_permutation_determinism(self):
        blocks = [
            self.block(2, "Eq19", 0),
            self.block(2, "Eq19", 1),
            self.block(3, "Eq3", 2),
            self.block(1, "Eq1", 3, kind="eq"),
            self.block(4, "plumbing", 4),
            self.block(2, "Eq21", 5),
        ]
        ref = cs.assemble(blocks, 4)
        rng = np.random.default_rng(7)
        for _ in range(20):
            order = list(rng.permutation(len(blocks)))
            # same-label blocks keep their relative order
            i0, i1 = order.index(0), order.index(1)
            if i0 > i1:
                order[i0], order[i1] = order[i1], order[i0]
            out = cs.assemble([blocks[i] for i in order], 4)
            assert out.G.tobytes() == ref.G.tobytes()
            assert out.h.tobytes() == ref.h.tobytes()
            assert out.A_eq.tobytes() == ref.A_eq.tobytes()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cs.assemble([self.block(2, "Eq3", 0, d=3)], 4)

    def test_block_lookup_and_margins(self):
        a, b = self.block(3, "Eq18", 0), self.block(2, "Eq3", 1)
        out = cs.assemble([a, b], 4)
        assert out.block_of_row(0) is b
        assert out.block_of_row(4) is a
        m = cs.block_margins([a, b], np.zeros(4))
        assert m["Eq18:0"] == pytest.approx(a.h.min())
