"""Command-line front end: scenario files, batch runs, CSV/JSON emission.

Scenario files are YAML documents with a strict schema: unknown keys are
rejected with the offending key and line number.  Exit codes: 0 success,
2 validation error, 3 simulation abort (partial log still written).
"""

import argparse
import concurrent.futures
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .controllers import TrackingGains
from .harness import NoiseSpec, Scenario, ScenarioError, SimLog, run_scenario
from .models import PendulumParams, PendulumState, QuadState, VehicleParams
from .trajectories import TrajectorySpec

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ABORT = 3

# None means "any value"; nested dicts are validated recursively.
_SCHEMA = {
    "name": None,
    "description": None,
    "controller": None,
    "duration": None,
    "dt": None,
    "seed": None,
    "vehicle": {
        "mass": None, "inertia": None, "rho": None, "rotor_diameter": None,
        "thrust_coeff": None, "torque_coeff": None, "arm_length": None,
        "gravity": None, "u_min": None, "u_max": None,
    },
    "pendulum": {"half_length": None, "mass": None},
    "gains": {
        "alpha1": None, "alpha2": None, "kp": None, "kd": None,
        "q_care": None, "k1": None, "k2": None, "q_lqr": None,
        "r_lqr": None, "attitude_clamp": None,
    },
    "trajectory": {
        "kind": None, "radius": None, "rate": None, "altitude": None,
        "setpoint": None, "transition_time": None, "blend": None,
        "blend_window": None, "pend_radius": None,
    },
    "initial": {
        "position": None, "velocity": None, "attitude": None,
        "omega": None, "pendulum": None,
    },
    "noise": {
        "enabled": None, "accel_std": None, "ang_accel_std": None,
        "dt_ref": None,
    },
    "batch": None,
}


class ValidationError(Exception):
    pass


def _key_line(text: str, key: str) -> int:
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0]
        if stripped.strip().startswith(f"{key}:"):
            return lineno
    return 0


def _check_keys(doc, schema, raw_text, path=""):
    if not isinstance(doc, dict):
        return
    for key, value in doc.items():
        if key not in schema:
            line = _key_line(raw_text, key)
            where = f" (line {line})" if line else ""
            raise ValidationError(f"unknown key '{path}{key}'{where}")
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict) and value is not None:
                raise ValidationError(f"key '{path}{key}' must be a mapping")
            _check_keys(value or {}, sub, raw_text, path=f"{path}{key}.")


def _vec(value, n, what):
    if np.isscalar(value):
        return tuple(float(value) for _ in range(n))
    value = list(value)
    if len(value) != n:
        raise ValidationError(f"{what} must have {n} components")
    return tuple(float(v) for v in value)


def build_scenario(doc: dict, default_name: str) -> Scenario:
    """Construct a Scenario from a validated scenario document."""
    veh = doc.get("vehicle") or {}
    kw = {}
    mapping = {"mass": "m", "inertia": "I_diag", "rho": "rho",
               "rotor_diameter": "D", "thrust_coeff": "C_T",
               "torque_coeff": "C_Q", "arm_length": "l", "gravity": "g",
               "u_min": "u_min", "u_max": "u_max"}
    for yk, fk in mapping.items():
        if yk in veh:
            v = veh[yk]
            if fk == "I_diag":
                v = _vec(v, 3, "inertia")
            elif fk in ("u_min", "u_max"):
                v = _vec(v, 4, yk)
            else:
                v = float(v)
            kw[fk] = v
    try:
        vehicle = VehicleParams(**kw)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc

    pendulum = None
    if doc.get("pendulum"):
        pd = doc["pendulum"]
        pendulum = PendulumParams(L=float(pd.get("half_length", 0.5)),
                                  m_p=float(pd.get("mass", 0.05)))

    gd = doc.get("gains") or {}
    gains = TrackingGains(
        alpha1=float(gd.get("alpha1", 100.0)),
        alpha2=float(gd.get("alpha2", 20.0)),
        kp=float(gd.get("kp", 4.0)),
        kd=float(gd.get("kd", 4.0)),
        q_care=float(gd.get("q_care", 1.0)),
        k1=float(gd.get("k1", 8.0)),
        k2=float(gd.get("k2", 16.0)),
        q_lqr=_vec(gd.get("q_lqr", (10, 10, 1, 1, 1, 1, 1, 1)), 8, "q_lqr"),
        r_lqr=_vec(gd.get("r_lqr", (100, 100)), 2, "r_lqr"),
        attitude_clamp=float(gd.get("attitude_clamp", 0.5)),
    )

    td = doc.get("trajectory") or {}
    try:
        trajectory = TrajectorySpec(
            kind=td.get("kind", "set-point"),
            radius=float(td.get("radius", 1.0)),
            rate=float(td.get("rate", 0.5)),
            altitude=float(td.get("altitude", -2.0)),
            setpoint=_vec(td.get("setpoint", (0.0, 0.0, -2.0)), 3, "setpoint"),
            transition_time=float(td.get("transition_time", 5.0)),
            blend=bool(td.get("blend", True)),
            blend_window=float(td.get("blend_window", 1.0)),
            pend_radius=float(td.get("pend_radius", 0.1)),
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc

    idoc = doc.get("initial") or {}
    initial_quad = QuadState(
        p=np.array(_vec(idoc.get("position", (0, 0, 0)), 3, "position")),
        v=np.array(_vec(idoc.get("velocity", (0, 0, 0)), 3, "velocity")),
        q=np.array(_vec(idoc.get("attitude", (0, 0, 0)), 3, "attitude")),
        omega=np.array(_vec(idoc.get("omega", (0, 0, 0)), 3, "omega")))
    initial_pend = None
    if "pendulum" in idoc and idoc["pendulum"] is not None:
        pv = _vec(idoc["pendulum"], 4, "initial.pendulum")
        initial_pend = PendulumState(*pv)

    nd = doc.get("noise") or {}
    noise = NoiseSpec(enabled=bool(nd.get("enabled", False)),
                      accel_std=float(nd.get("accel_std", 0.2)),
                      ang_accel_std=float(nd.get("ang_accel_std", 0.1)),
                      dt_ref=float(nd.get("dt_ref", 1e-3)))

    try:
        return Scenario(
            name=str(doc.get("name", default_name)),
            description=str(doc.get("description", "")),
            controller=str(doc.get("controller", "fbl-tracker")),
            vehicle=vehicle, pendulum=pendulum, gains=gains,
            trajectory=trajectory, initial_quad=initial_quad,
            initial_pend=initial_pend,
            duration=float(doc.get("duration", 10.0)),
            dt=float(doc.get("dt", 1e-3)),
            seed=int(doc.get("seed", 0)),
            noise=noise)
    except (ScenarioError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


def apply_override(doc: dict, dotted: str, value):
    """Apply one --set override (dotted.path=value) before validation."""
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        nxt = node.get(k)
        if not isinstance(nxt, dict):
            nxt = {}
            node[k] = nxt
        node = nxt
    node[keys[-1]] = value


def load_scenarios(path: Path, overrides=(), seed=None):
    """Parse a scenario file into one Scenario per batch entry."""
    raw = path.read_text()
    try:
        doc = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse {path.name}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path.name}: document must be a mapping")

    batch = doc.pop("batch", None)
    _check_keys(doc, _SCHEMA, raw)

    variants = [({}, "")]
    if batch is not None:
        if not isinstance(batch, list):
            raise ValidationError("batch must be a list of override entries")
        variants = []
        for i, entry in enumerate(batch):
            if not isinstance(entry, dict) or "set" not in entry:
                raise ValidationError(
                    f"batch entry {i} must be a mapping with a 'set' key")
            suffix = str(entry.get("name", f"b{i}"))
            variants.append((entry["set"], f"-{suffix}"))

    scenarios = []
    for sets, suffix in variants:
        vdoc = yaml.safe_load(yaml.safe_dump(doc))  # deep copy
        for dotted, value in sets.items():
            apply_override(vdoc, dotted, value)
        for dotted, value in overrides:
            apply_override(vdoc, dotted, value)
        if seed is not None:
            vdoc["seed"] = seed
        _check_keys(vdoc, _SCHEMA, raw)
        sc = build_scenario(vdoc, default_name=path.stem)
        if suffix:
            sc = Scenario(**{**sc.__dict__, "name": sc.name + suffix})
        scenarios.append(sc)
    return scenarios


CSV_BASE_COLUMNS = [
    "t", "p_X", "p_Y", "p_Z", "v_X", "v_Y", "v_Z", "phi", "theta", "psi",
    "w_x", "w_y", "w_z", "a", "b", "a_dot", "b_dot",
    "u1", "u2", "u3", "u4", "f_z", "tau_x", "tau_y", "tau_z",
    "phi_d", "theta_d", "psi_d", "p_Xd", "p_Yd", "p_Zd",
]
CSV_PEND_REF_COLUMNS = ["a_d", "b_d"]
CSV_FLAG_COLUMNS = ["clamped", "qp_relaxed", "qp_fault"]


def csv_columns(log: SimLog):
    cols = list(CSV_BASE_COLUMNS)
    if log.ref_pend is not None:
        cols += CSV_PEND_REF_COLUMNS
    return cols + CSV_FLAG_COLUMNS


def _fmt(x) -> str:
    return repr(float(x))


def emit_log(log: SimLog, fmt: str, out_dir: Path):
    """Write the time series and the metrics file; returns the paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    has_pend = log.pend is not None
    cols = csv_columns(log)

    series_path = out_dir / f"{log.scenario_name}.{fmt}"
    if fmt == "csv":
        lines = [",".join(cols)]
        for i in range(log.t.size):
            row = [_fmt(log.t[i])]
            row += [_fmt(v) for v in log.quad[i]]
            if has_pend:
                row += [_fmt(v) for v in log.pend[i]]
            else:
                row += [""] * 4
            row += [_fmt(v) for v in log.u[i]]
            row += [_fmt(v) for v in log.wrench[i]]
            row += [_fmt(v) for v in log.q_d[i]]
            row += [_fmt(v) for v in log.ref_pos[i]]
            if log.ref_pend is not None:
                row += [_fmt(v) for v in log.ref_pend[i]]
            row += [str(int(log.clamped[i])), str(int(log.qp_relaxed[i])),
                    str(int(log.qp_fault[i]))]
            lines.append(",".join(row))
        series_path.write_text("\n".join(lines) + "\n")
    else:
        payload = {
            "scenario": log.scenario_name,
            "columns": cols,
            "t": log.t.tolist(),
            "quad": log.quad.tolist(),
            "pend": log.pend.tolist() if has_pend else None,
            "u": log.u.tolist(),
            "wrench": log.wrench.tolist(),
            "q_d": log.q_d.tolist(),
            "ref_pos": log.ref_pos.tolist(),
            "ref_pend": log.ref_pend.tolist() if log.ref_pend is not None else None,
            "clamped": log.clamped.astype(int).tolist(),
            "qp_relaxed": log.qp_relaxed.astype(int).tolist(),
            "qp_fault": log.qp_fault.astype(int).tolist(),
        }
        series_path.write_text(json.dumps(payload, sort_keys=True))

    metrics = dict(log.metrics)
    metrics["aborted"] = log.aborted
    if log.aborted:
        metrics["abort_time"] = log.abort_time
        metrics["abort_reason"] = log.abort_reason
    metrics_path = out_dir / f"{log.scenario_name}.metrics.json"
    metrics_path.write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    return series_path, metrics_path


def _run_one(args):
    sc, fmt, out_dir = args
    log = run_scenario(sc)
    emit_log(log, fmt, Path(out_dir))
    return sc.name, log.aborted, log.abort_time, log.abort_reason


def shipped_scenarios():
    """Names of the scenario files bundled with the package."""
    base = resources.files("quadpend") / "scenarios"
    return sorted(p.name for p in base.iterdir() if p.name.endswith(".scn"))


def shipped_scenario_path(name: str) -> Path:
    base = resources.files("quadpend") / "scenarios"
    return Path(str(base / name))


def _parse_set(values):
    out = []
    for item in values or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        out.append((key.strip(), yaml.safe_load(val)))
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="quadpend",
        description="Quadrotor + inverted pendulum scenario simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario file")
    run_p.add_argument("scenario", help=".scn file or shipped scenario name")
    run_p.add_argument("--out", default="out", help="output directory")
    run_p.add_argument("--format", choices=("csv", "json"), default="csv")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE", help="override (repeatable)")
    run_p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for batch sweeps")

    val_p = sub.add_parser("validate", help="validate a scenario file")
    val_p.add_argument("scenario")
    val_p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE")

    sub.add_parser("list-scenarios", help="list shipped scenario files")

    args = parser.parse_args(argv)

    if args.command == "list-scenarios":
        for name in shipped_scenarios():
            print(name)
        return EXIT_OK

    path = Path(args.scenario)
    if not path.exists():
        candidate = shipped_scenario_path(path.name)
        if candidate.exists():
            path = candidate
        else:
            print(f"error: scenario file not found: {args.scenario}",
                  file=sys.stderr)
            return EXIT_VALIDATION

    try:
        overrides = _parse_set(args.set)
        seed = getattr(args, "seed", None)
        scenarios = load_scenarios(path, overrides=overrides, seed=seed)
    except ValidationError as exc:
        print(f"error: {path.name}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    if args.command == "validate":
        for sc in scenarios:
            print(f"{sc.name}: ok")
        return EXIT_OK

    out_dir = Path(args.out)
    jobs = max(1, args.jobs)
    work = [(sc, args.format, str(out_dir)) for sc in scenarios]
    if jobs > 1 and len(work) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    else:
        results = [_run_one(w) for w in work]

    status = EXIT_OK
    for name, aborted, abort_time, reason in results:
        if aborted:
            print(f"{name}: aborted at t={abort_time:.4g} s ({reason})",
                  file=sys.stderr)
            status = EXIT_ABORT
        else:
            print(f"{name}: ok")
    return status


if __name__ == "__main__":
    sys.exit(main())
