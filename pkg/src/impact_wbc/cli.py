"""Command-line front end: ``impact-wbc simulate | predict | sweep``.

Exit codes: 0 clean run, 1 input error, 2 run aborted (a solver-infeasible
step, or a failed prediction or divergence), 3 singular impact
configuration (``predict``). Log verbosity comes from
the ``IMPACT_WBC_LOG`` environment variable (e.g. ``INFO``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import constraints as cs
from . import impact
from . import scenario as sc
from . import simulator as sim
from .dynamics import RobotState, compute

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_SINGULAR = 0, 1, 2, 3

# short names accepted by ``sweep --param`` and their document keys
ALIASES = {
    "seed": "simulation.seed",
    "reset_mode": "simulation.reset_mode",
    "wall_jitter": "simulation.wall_jitter",
    "duration": "simulation.duration",
    "zmp_set": "controller.zmp_set",
    "impact_constraints": "controller.impact_constraints",
    "c_r": "controller.c_r",
    "wall_c_r": "wall.c_r",
    "distance": "wall.distance",
    "speed": "tasks.0.target",
}

log = logging.getLogger("impact_wbc")


class InputError(Exception):
    pass


def _parse_toggles(text):
    if text in ("on", "off"):
        return text
    labels = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in labels if t not in cs.IMPACT_LABELS]
    if bad or not labels:
        raise InputError(f"--impact-constraints: expected on, off or a comma list of {list(cs.IMPACT_LABELS)}")
    return labels


def _overrides(args):
    out = {}
    if getattr(args, "seed", None) is not None:
        out["simulation.seed"] = args.seed
    if getattr(args, "impact_constraints", None) is not None:
        out["controller.impact_constraints"] = _parse_toggles(args.impact_constraints)
    if getattr(args, "zmp_set", None) is not None:
        out["controller.zmp_set"] = args.zmp_set
    if getattr(args, "reset_mode", None) is not None:
        out["simulation.reset_mode"] = args.reset_mode
    return out


def _load(path, overrides=None):
    raw = sc.read_raw(path)
    for key, value in (overrides or {}).items():
        raw = sc.set_key(raw, key, value)
    return sc.build_scenario(sc.parse_document(raw)), raw


def _write_atomically(out_dir: Path, files: dict):
    """Write all files into a sibling temp dir, then move them into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out_dir, prefix=".partial-"))
    try:
        for name, text in files.items():
            (tmp / name).write_text(text, newline="")
        for name in files:
            os.replace(tmp / name, out_dir / name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def run_files(result):
    return {
        "steps.csv": sim.steps_csv(result),
        "margins.csv": sim.margins_csv(result),
        "summary.json": sim.summary_json(result),
    }


def _exit_code(result):
    # any abort (infeasible QP, failed prediction, divergence) is reported as 2
    return EXIT_INFEASIBLE if result.summary["aborted"] else EXIT_OK


# ----------------------------------------------------------------- commands


def cmd_simulate(args):
    scenario, _ = _load(args.scenario, _overrides(args))
    result = sim.run(scenario)
    _write_atomically(Path(args.out), run_files(result))
    s = result.summary
    print(
        f"{scenario.name}: {s['steps']} steps, impacts={s['impact_events']}, "
        f"infeasible={s['infeasible_steps']}, impact_speed={s['impact_speed']}"
    )
    return _exit_code(result)


def _read_state(path, model):
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"--state: cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise InputError(f"--state: not valid YAML ({exc})") from None
    if not isinstance(doc, dict) or "q" not in doc:
        raise InputError("--state: expected a mapping with q, v and optional qdd, measured")
    unknown = set(doc) - {"q", "v", "qdd", "measured"}
    if unknown:
        raise InputError(f"--state: unknown keys {sorted(unknown)}")
    q = np.asarray(doc["q"], dtype=float)
    v = np.asarray(doc.get("v", np.zeros(model.nv)), dtype=float)
    qdd = np.asarray(doc.get("qdd", np.zeros(model.nv)), dtype=float)
    for name, arr, n in (("q", q, model.nq), ("v", v, model.nv), ("qdd", qdd, model.nv)):
        if arr.shape != (n,):
            raise InputError(f"--state: {name} must have {n} entries, got {arr.size}")
    try:
        state = RobotState(q, v)
    except ValueError as exc:
        raise InputError(f"--state: {exc}") from None
    measured = {k: np.asarray(w, dtype=float) for k, w in (doc.get("measured") or {}).items()}
    return state, qdd, measured


def predict_report(scenario, state, qdd, measured=None):
    """Prediction at ``w = v + dt qdd`` plus the margins of every impact-aware block."""
    controller = sim.build_controller(scenario)
    kin = compute(scenario.model, state)
    if not measured:
        measured = sim._initial_wrenches(controller, kin)
    missing = [f.ee_id for f in scenario.feet if f.ee_id not in measured]
    if missing:
        raise InputError(f"--state: measured wrenches missing for {missing}")
    cfg = controller.config
    spec = controller.impact_spec
    pred = impact.predict_impulses(
        kin, tuple(f.ee_id for f in scenario.feet), spec, cfg.dt,
        surface_contacts=tuple(f.ee_id for f in scenario.feet) if cfg.surface_feet else (),
    )
    evaluated = pred.at(state.v + cfg.dt * qdd)
    layout = controller.layout()
    controller.config = replace(cfg, impact_constraints=frozenset(cs.IMPACT_LABELS))
    notes = []
    polygon = controller.polygon(kin) if scenario.feet else None
    blocks = controller.impact_rows(kin, pred, layout, polygon, measured, notes)
    x = np.zeros(layout.dim)
    x[layout.qdd] = qdd
    margins = cs.block_margins(blocks, x)
    dur = cfg.impact_duration
    return {
        "delta_qdot": evaluated.delta_qdot.tolist(),
        "impulses": {str(e): i.tolist() for e, i in zip(evaluated.ee_ids, evaluated.impulses)},
        "impulsive_forces": {str(e): (i / dur).tolist() for e, i in zip(evaluated.ee_ids, evaluated.impulses)},
        "delta_tau": evaluated.delta_tau.tolist(),
        "margins": margins,
        "diagnostics": notes,
    }


def cmd_predict(args):
    scenario, _ = _load(args.scenario)
    state, qdd, measured = _read_state(args.state, scenario.model)
    try:
        report = predict_report(scenario, state, qdd, measured)
    except (impact.SingularConfigurationError, sim.ControllerAbort) as exc:
        if isinstance(exc, sim.ControllerAbort) and not isinstance(exc.__cause__, impact.SingularConfigurationError):
            raise
        print(f"singular configuration: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def _parse_values(text):
    try:
        return [yaml.safe_load(v) for v in text.split(",") if v.strip() != ""]
    except yaml.YAMLError as exc:
        raise InputError(f"--values: {exc}") from None


def _summary_row(summary):
    row = {}
    for key in sorted(summary):
        value = summary[key]
        if isinstance(value, list):
            for i, x in enumerate(value):
                row[f"{key}_{i}"] = x
        else:
            row[key] = value
    return row


def _cell(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return sim._fmt(x) if np.isfinite(x) else ""
    return str(x)


def _sweep_one(job):
    path, key, value, out_dir = job
    scenario, _ = _load(path, {key: value})
    result = sim.run(scenario)
    return value, result.summary, run_files(result)


def cmd_sweep(args):
    key = ALIASES.get(args.param, args.param)
    values = _parse_values(args.values)
    if not values:
        raise InputError("--values: give at least one value")
    # validate every variant before running anything
    raw = sc.read_raw(args.scenario)
    for v in values:
        sc.build_scenario(sc.parse_document(sc.set_key(raw, key, v)))
    jobs = [(args.scenario, key, v, args.out) for v in values]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]

    files, rows = {}, []
    for i, (value, summary, run) in enumerate(results):
        for name, text in run.items():
            files[f"run_{i:03d}_{name}"] = text
        rows.append({"param": key, "value": json.dumps(value), **_summary_row(summary)})
    columns = ["param", "value"] + sorted({c for r in rows for c in r} - {"param", "value"})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    files["sweep.csv"] = buf.getvalue()
    _write_atomically(Path(args.out), files)
    print(f"{len(rows)} runs over {key}; table in {Path(args.out) / 'sweep.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="impact-wbc", description="Impact-aware whole-body QP control simulator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one scenario and write steps.csv, margins.csv, summary.json")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--impact-constraints", help="on, off or a comma list such as Eq17,Eq18")
    s.add_argument("--zmp-set", choices=("feet", "feet+hand"))
    s.add_argument("--reset-mode", choices=sim.RESET_MODES)
    s.set_defaults(func=cmd_simulate)

    pr = sub.add_parser("predict", help="print the impulse prediction and impact-row margins at a state")
    pr.add_argument("--scenario", required=True)
    pr.add_argument("--state", required=True, help="YAML with q, v and optional qdd, measured wrenches")
    pr.set_defaults(func=cmd_predict)

    sw = sub.add_parser("sweep", help="one run per value of a scenario key; aggregated sweep.csv")
    sw.add_argument("--scenario", required=True)
    sw.add_argument("--param", required=True, help=f"dotted document key or one of {sorted(ALIASES)}")
    sw.add_argument("--values", required=True, help="comma-separated YAML scalars")
    sw.add_argument("--out", required=True)
    sw.add_argument("--jobs", type=int, default=1, help="worker processes")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    level = os.environ.get("IMPACT_WBC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (sc.ScenarioError, InputError) as exc:
        print(f"input error:\n{exc}", file=sys.stderr)
        return EXIT_INPUT
    except sim.ControllerAbort as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
