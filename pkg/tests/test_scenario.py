import numpy as np
import pytest

from impact_wbc import models
from impact_wbc import scenario as sc
from impact_wbc.dynamics import RobotState, compute


@pytest.fixture
def raw():
    return sc.read_raw(sc.reference_path())


def error_of(raw_doc):
    with pytest.raises(sc.ScenarioError) as info:
        sc.build_scenario(sc.parse_document(raw_doc))
    return str(info.value)


class TestReference:
    def test_loads(self):
        scenario = sc.load_scenario(sc.reference_path())
        assert scenario.name == "reference_wall_contact"
        assert [f.ee_id for f in scenario.feet] == ["left_foot", "right_foot"]
        assert scenario.controller.impact_constraints == frozenset({"Eq17", "Eq18", "Eq19", "Eq20", "Eq21"})
        kin = compute(scenario.model, scenario.initial_state)
        assert scenario.wall.distance(kin.ee_position("hand")) == pytest.approx(0.06)
        assert scenario.feet[0].vertices.max(axis=0) == pytest.approx([0.11, 0.05])

    def test_toggle_forms(self, raw):
        off = sc.build_scenario(sc.parse_document(sc.set_key(raw, "controller.impact_constraints", "off")))
        assert off.controller.impact_constraints == frozenset()
        some = sc.build_scenario(sc.parse_document(sc.set_key(raw, "controller.impact_constraints", ["Eq17"])))
        assert some.controller.impact_constraints == frozenset({"Eq17"})


class TestValidation:
    def test_unknown_key_names_its_path(self, raw):
        raw["wall"]["colour"] = "red"
        assert "wall.colour" in error_of(raw)

    def test_schema_version(self, raw):
        raw["schema_version"] = "2"
        assert "schema_version" in error_of(raw) and "unsupported" in error_of(raw)

    def test_missing_section(self, raw):
        del raw["wall"]
        assert "wall: Field required" in error_of(raw)

    def test_wall_placement_exclusive(self, raw):
        raw["wall"]["point"] = [0.5, 0.0, 1.0]
        assert "exactly one of 'point' or 'distance'" in error_of(raw)

    def test_bad_label(self, raw):
        raw["controller"]["impact_constraints"] = ["Eq17", "Eq99"]
        assert "Eq99" in error_of(raw)

    def test_unknown_end_effector(self, raw):
        raw["impacting_ee"] = "foot"
        assert "impacting_ee" in error_of(raw)

    def test_unknown_task_kind(self, raw):
        raw["tasks"].append({"kind": "dance"})
        assert "tasks.3.kind" in error_of(raw)

    def test_state_length(self, raw):
        raw["initial_state"] = {"q": [0.0, 1.0]}
        assert "initial_state.q" in error_of(raw)

    def test_not_a_mapping(self):
        with pytest.raises(sc.ScenarioError):
            sc.parse_document([1, 2])

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "x.yaml"
        path.write_text("a: [1, 2\n")
        with pytest.raises(sc.ScenarioError, match="not valid YAML"):
            sc.read_raw(path)

    def test_limits_override(self, raw):
        model = models.planar_biped()
        raw["robot"]["limits"] = {"velocity": {model.dof_names[-1]: 1.5}}
        s = sc.build_scenario(sc.parse_document(raw))
        assert s.model.velocity_bounds[1][-1] == 1.5 and s.model.velocity_bounds[0][-1] == -1.5
        raw["robot"]["limits"] = {"velocity": {"nope": 1.0}}
        assert "robot.limits.velocity.nope" in error_of(raw)


class TestSetKey:
    def test_nested_and_indexed(self, raw):
        out = sc.set_key(raw, "tasks.0.target", 0.3)
        assert out["tasks"][0]["target"] == 0.3
        assert raw["tasks"][0]["target"] == 0.8  # input left alone

    def test_bad_index(self, raw):
        with pytest.raises(sc.ScenarioError):
            sc.set_key(raw, "tasks.9.target", 1.0)


def test_explicit_links_match_builtin():
    arm = models.two_link_arm()
    doc = {
        "schema_version": "1",
        "robot": {
            "links": [
                {"name": lk.name, "mass": lk.mass, "com": lk.com.tolist(), "inertia": lk.inertia.tolist(),
                 "joint": {"type": "revolute", "parent": None if lk.joint.parent < 0 else arm.links[lk.joint.parent].name,
                           "axis": lk.joint.axis.tolist(), "origin_xyz": lk.joint.origin_xyz.tolist()}}
                for lk in arm.links
            ],
            "end_effectors": [{"name": e.name, "link": arm.links[e.link].name, "offset": e.offset.tolist()}
                              for e in arm.end_effectors],
        },
        "initial_state": {"q": [0.3, 0.5]},
        "contacts": [],
        "impacting_ee": "tip",
        "wall": {"normal": [-1.0, 0.0, 0.0], "distance": 0.05},
    }
    model = sc.build_model(sc.parse_document(doc).robot)
    state = RobotState(np.array([0.3, 0.5]), np.array([0.2, -0.1]))
    np.testing.assert_allclose(compute(model, state).mass_matrix, compute(arm, state).mass_matrix, atol=1e-14)
    np.testing.assert_allclose(compute(model, state).ee_position("tip"), compute(arm, state).ee_position("tip"))
