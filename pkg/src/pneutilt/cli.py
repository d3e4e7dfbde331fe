"""Command-line front end: cloud generation, calibration, scenario runs, metrics.

Every artifact lands under the output directory and is a pure function of
the configuration and the seed, so two runs with the same inputs produce
byte-identical files.  ``run`` exits with status 1 when any configured
assertion fails; the report is written either way.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .calibration import FFModel, PointCloud, build_ffmodel
from .config import ASSERTIONS, SCENARIOS, RunConfig, load_config
from .controller import FFvIController, PIDController, VariableGainLaw
from .errors import PneutiltError
from .plant import generate_point_cloud

CLOUD_FILE = "cloud.csv"
MODEL_FILE = "ffmodel.txt"
FIT_REPORT_FILE = "fit_report.json"
REPORT_FILE = "report.json"
METRICS_FILE = "metrics.json"
TRAJ_DIR = "trajectories"


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _finite(v):
    # inf/None cannot round-trip through strict JSON readers
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return None
    return v


# --------------------------------------------------------------------------- calibration commands

def make_cloud(cfg: RunConfig) -> PointCloud:
    c = cfg.cloud
    return generate_point_cloud(cfg.plant_params(), c.start, c.stop, c.increment, c.noise_deg, cfg.seed)


def make_model(cloud: PointCloud, cfg: RunConfig):
    cal = cfg.calibration
    return build_ffmodel(cloud, cal.levels, cfg.lookup, cal.extent, cal.grid_step)


def cmd_generate_cloud(cfg: RunConfig, out: Path) -> Path:
    cloud = make_cloud(cfg)
    path = out / CLOUD_FILE
    _write(path, cloud.to_csv_text())
    (x0, y0), (x1, y1) = cloud.tilt_extent()
    print(f"{len(cloud)} rows -> {path}")
    print(f"alpha_x [{x0:.3f}, {x1:.3f}] deg, alpha_y [{y0:.3f}, {y1:.3f}] deg")
    return path


def cmd_fit(cloud_path, cfg: RunConfig, out: Path) -> Path:
    cloud = PointCloud.from_csv(cloud_path)
    model, report = make_model(cloud, cfg)
    path = out / MODEL_FILE
    _write(path, model.dumps())
    _write(out / FIT_REPORT_FILE, _json(report.to_dict()))
    worst = max(max(r) for r in report.surface_rms)
    print(f"model -> {path}; {len(report.levels)} levels, worst surface RMS {worst:.4f} bar, "
          f"{report.track_rms.size} tracks")
    return path


# --------------------------------------------------------------------------- scenarios

def _controllers(cfg: RunConfig, model: FFModel, p_agr=None, law=None, params=None):
    ffvi = FFvIController(model, law or cfg.gain_law, cfg.p_agr if p_agr is None else p_agr,
                          params or cfg.ffvi)
    pid = PIDController(cfg.plant_params().geometry, cfg.pid)
    return ffvi, pid


def scenario_step(cfg, model, params):
    trajs, rep = {}, {}
    for ctrl in _controllers(cfg, model):
        tr = ex.run_step_alternation(ctrl, params, model, cfg.p_agr, cfg.step, cfg.loop)
        trajs[f"step_{ctrl.name}"] = tr
        rep[ctrl.name] = ex.step_alternation_metrics(tr, cfg.step)
    return trajs, rep


def scenario_sine(cfg, model, params):
    trajs, rep = {}, {}
    for ctrl in _controllers(cfg, model):
        tr = ex.run_sine_tracking(ctrl, params, model, cfg.p_agr, cfg.sine, cfg.loop)
        trajs[f"sine_{ctrl.name}"] = tr
        rep[ctrl.name] = ex.sine_metrics(tr, cfg.sine)
    return trajs, rep


def scenario_stiffness(cfg, model, params):
    trajs, rep = {}, {}
    for label, sched in (("stepped", replace(cfg.stiffness, ramp=0.0)), ("ramped", cfg.stiffness)):
        ctrl = FFvIController(model, cfg.gain_law, sched.levels[0], cfg.ffvi)
        tr = ex.run_stiffness_change(ctrl, params, model, sched, cfg.loop)
        trajs[f"stiffness_{label}"] = tr
        rep[label] = {"ramp_s": sched.ramp, **ex.stiffness_metrics(tr, sched)}
    return trajs, rep


def scenario_dynload(cfg, model, params):
    d = cfg.dynload
    trajs, cells = {}, []
    for speed in d.speeds:
        mech = d.mechanism(speed)
        for p in d.pressures:
            cell = {"speed_mm_s": speed, "p_agr_bar": p}
            for label, on in (("i_on", True), ("i_off", False)):
                ctrl = FFvIController(model, cfg.gain_law, p, replace(cfg.ffvi, i_enabled=on))
                tr = ex.run_dynamic_load(ctrl, params, model, mech, p, d.duration, d.ref, cfg.loop)
                trajs[f"dynload_v{speed:g}_p{p:g}_{label}"] = tr
                et = tr.total_error
                cell[label] = ex.Metrics(None, None, None, 0.0, float(et.max()), float(et.mean())).to_dict()
            cells.append(cell)
    on = [c["i_on"]["max_total_error"] for c in cells]
    off = [c["i_off"]["max_total_error"] for c in cells]
    table = {f"{c['speed_mm_s']:g}": {} for c in cells}
    for c in cells:
        table[f"{c['speed_mm_s']:g}"][f"{c['p_agr_bar']:g}"] = [c["i_on"]["max_total_error"],
                                                                c["i_off"]["max_total_error"]]
    rep = {"cells": cells, "table_max_total_error_on_off": table,
           "mean_i_on": float(np.mean(on)), "mean_i_off": float(np.mean(off))}
    return trajs, rep


def scenario_gains(cfg, model, params):
    laws = (("variable", cfg.gain_law), ("k75", VariableGainLaw.constant(75.0)),
            ("k350", VariableGainLaw.constant(350.0)))
    trajs, rep = {}, {}
    for sc in ex.GAIN_SCENARIOS:
        rep[sc.name] = {}
        for label, law in laws:
            ctrl = FFvIController(model, law, cfg.p_agr, cfg.ffvi)
            tr = ex.run_gain_scenario(ctrl, params, model, sc, cfg.p_agr, cfg.loop)
            trajs[f"gains_{sc.name}_{label}"] = tr
            rep[sc.name][label] = {k: _finite(v) for k, v in ex.gain_scenario_metrics(tr, sc).items()}
    return trajs, rep


RUNNERS = {"step": scenario_step, "sine": scenario_sine, "stiffness": scenario_stiffness,
           "dynload": scenario_dynload, "gains": scenario_gains}


# --------------------------------------------------------------------------- assertions

def _settle(v):
    return math.inf if v is None else v


def _check_step(rep):
    over = {name: max(ph["overshoot_deg"] for ph in phases) for name, phases in rep.items()}
    wins = sum(_settle(f["metrics"]["settling_time_5pct"]) <= _settle(p["metrics"]["settling_time_5pct"])
               for f, p in zip(rep["ffvi"], rep["pid"]))
    detail = ", ".join(f"{k} {v:.3f}" for k, v in over.items())
    return {"step_overshoot": (all(v <= 2.0 for v in over.values()), f"max overshoot deg: {detail}"),
            "step_settling": (wins >= 3, f"FFvI settles no later than PID in {wins}/{len(rep['ffvi'])} phases")}


def _check_sine(rep):
    f, p = rep["ffvi"], rep["pid"]
    return {"sine_envelope": (f["max_beyond_envelope_deg"] <= 2.0,
                              f"FFvI beyond envelope {f['max_beyond_envelope_deg']:.3f} deg"),
            "sine_rms": (f["rms_error_deg"] < p["rms_error_deg"],
                         f"RMS FFvI {f['rms_error_deg']:.3f} vs PID {p['rms_error_deg']:.3f} deg"),
            "sine_lag": (p["lag_s"] > f["lag_s"], f"lag PID {p['lag_s']:.3f} vs FFvI {f['lag_s']:.3f} s")}


def _check_stiffness(rep):
    st = rep["stepped"]["plateaus"]
    kp = [pl["mean_kp_N_per_mm"] for pl in st]
    recon = all(pl["reconverged"] for v in rep.values() for pl in v["plateaus"])
    a, b = rep["ramped"]["max_transient_deg"], rep["stepped"]["max_transient_deg"]
    return {"stiffness_reconverge": (recon, "every plateau ends within 0.2 deg" if recon else
                                     "a plateau ends outside 0.2 deg"),
            "stiffness_kp_increase": (all(y > x for x, y in zip(kp, kp[1:])),
                                      "mean kp " + ", ".join(f"{v:.4f}" for v in kp)),
            "stiffness_ramp_better": (a < b, f"max transient ramped {a:.3f} vs stepped {b:.3f} deg")}


def _check_dynload(rep):
    cells = rep["cells"]
    every = all(c["i_on"]["max_total_error"] < c["i_off"]["max_total_error"] for c in cells)
    ratio = rep["mean_i_off"] / rep["mean_i_on"] if rep["mean_i_on"] > 0 else math.inf
    fast = max(c["speed_mm_s"] for c in cells)
    row = {c["p_agr_bar"]: c["i_off"]["max_total_error"] for c in cells if c["speed_mm_s"] == fast}
    lo, hi = min(row), max(row)
    return {"dynload_every_cell": (every, f"I-on < I-off in {sum(c['i_on']['max_total_error'] < c['i_off']['max_total_error'] for c in cells)}/{len(cells)} cells"),
            "dynload_mean_ratio": (ratio >= 2.0, f"mean I-off / I-on = {ratio:.3f}"),
            "dynload_stiffness_helps": (row[hi] < row[lo],
                                        f"I-off at {fast:g} mm/s: {hi:g} bar {row[hi]:.3f} vs {lo:g} bar {row[lo]:.3f} deg")}


def _check_gains(rep):
    s_ok, o_ok, notes = True, True, []
    for name, r in rep.items():
        s = _settle(r["variable"]["settling_time_5pct"]) <= _settle(r["k75"]["settling_time_5pct"])
        o = r["variable"]["overshoot_pct"] <= r["k350"]["overshoot_pct"]
        s_ok &= s
        o_ok &= o
        notes.append((f"{name}: {_fmt(r['variable']['settling_time_5pct'])} vs {_fmt(r['k75']['settling_time_5pct'])} s",
                      f"{name}: {r['variable']['overshoot_pct']:.2f} vs {r['k350']['overshoot_pct']:.2f} %"))
    return {"gains_settling": (bool(s_ok), "variable vs K=75 settling " + "; ".join(n[0] for n in notes)),
            "gains_overshoot": (bool(o_ok), "variable vs K=350 overshoot " + "; ".join(n[1] for n in notes))}


def _fmt(v):
    return "never" if v is None else f"{v:.2f}"


CHECKS = {"step": _check_step, "sine": _check_sine, "stiffness": _check_stiffness,
          "dynload": _check_dynload, "gains": _check_gains}


def evaluate_assertions(results: dict, names) -> dict:
    """{assertion: {"passed": bool | None, "detail": str}}; None when its scenario did not run."""
    found = {}
    for scen, rep in results.items():
        found.update(CHECKS[scen](rep))
    out = {}
    for name in names:
        if name in found:
            ok, detail = found[name]
            out[name] = {"passed": bool(ok), "detail": detail}
        else:
            out[name] = {"passed": None, "detail": f"scenario {ASSERTIONS[name]!r} not run"}
    return out


def run_scenarios(cfg: RunConfig, model: FFModel, names, out: Path, timings=None) -> dict:
    """Run scenarios, write trajectories and the report; returns the report."""
    params = cfg.plant_params()
    results = {}
    for name in names:
        t0 = time.perf_counter()
        trajs, rep = RUNNERS[name](cfg, model, params)
        for key, tr in trajs.items():
            _write(out / TRAJ_DIR / f"{key}.csv", tr.to_csv_text())
        results[name] = rep
        if timings is not None:
            timings[name] = time.perf_counter() - t0
    checks = evaluate_assertions(results, cfg.assertions)
    report = {"seed": cfg.seed, "scenarios": list(names), "results": results, "assertions": checks,
              "passed": all(c["passed"] is not False for c in checks.values())}
    _write(out / REPORT_FILE, _json(report))
    return report


def cmd_run(scenario: str, cfg: RunConfig, out: Path, model_path=None, timings=None) -> int:
    if scenario == "all":
        names = list(cfg.scenarios)
    elif scenario in RUNNERS:
        names = [scenario]
    else:
        raise PneutiltError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)} or all")
    if model_path is None:
        # self-contained run: the cloud and model are rebuilt from the seed
        cloud = make_cloud(cfg)
        _write(out / CLOUD_FILE, cloud.to_csv_text())
        model, fit = make_model(cloud, cfg)
        _write(out / MODEL_FILE, model.dumps())
        _write(out / FIT_REPORT_FILE, _json(fit.to_dict()))
    else:
        if not Path(model_path).exists():
            raise PneutiltError(f"missing model file {model_path}; run 'fit' first")
        model = FFModel.load(model_path)
    report = run_scenarios(cfg, model, names, out, timings)
    for name, c in report["assertions"].items():
        state = {True: "PASS", False: "FAIL", None: "SKIP"}[c["passed"]]
        print(f"{state} {name}: {c['detail']}")
    print(f"report -> {out / REPORT_FILE}")
    return 0 if report["passed"] else 1


def cmd_metrics(traj_path, out: Path) -> dict:
    """Recompute step metrics for every reference change found in a trajectory CSV."""
    tr = ex.Trajectory.from_csv(traj_path)
    steps = []
    for axis in (0, 1):
        r = tr.ref[:, axis]
        idx = np.flatnonzero(np.abs(np.diff(r)) > 1.0) + 1
        bounds = list(idx) + [len(r)]
        for k, i in enumerate(idx):
            t_end = tr.t[bounds[k + 1] - 1]
            spec = ex.StepSpec(axis, float(tr.t[i]), float(r[i - 1]), float(r[i]), float(t_end))
            m = ex.compute_metrics(tr, spec)
            steps.append({"axis": "xy"[axis], "t_step": spec.t_step, "initial": spec.initial,
                          "final": spec.final, **m.to_dict()})
    steps.sort(key=lambda s: (s["t_step"], s["axis"]))
    et = tr.total_error
    result = {"source": os.path.basename(str(traj_path)), "steps": steps,
              "max_total_error": float(et.max()), "mean_total_error": float(et.mean())}
    _write(out / METRICS_FILE, _json(result))
    print(_json(result), end="")
    return result


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pneutilt", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (overrides config and environment)")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-cloud", parents=[common], help="simulate the calibration point cloud")
    p = sub.add_parser("fit", parents=[common], help="fit the feed-forward model to a cloud")
    p.add_argument("--cloud", help=f"cloud CSV (default <out>/{CLOUD_FILE})")
    p = sub.add_parser("run", parents=[common], help="run scenarios and check assertions")
    p.add_argument("--scenario", default="all", help=f"{' | '.join(SCENARIOS)} | all")
    p.add_argument("--model", help="ffmodel file; rebuilt from the seed when omitted")
    p = sub.add_parser("metrics", parents=[common], help="recompute metrics from a trajectory CSV")
    p.add_argument("trajectory", help="trajectory CSV")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out = Path(args.out if args.out is not None else cfg.output_dir)
        if args.command == "generate-cloud":
            cmd_generate_cloud(cfg, out)
        elif args.command == "fit":
            cmd_fit(args.cloud or out / CLOUD_FILE, cfg, out)
        elif args.command == "run":
            return cmd_run(args.scenario, cfg, out, args.model)
        else:
            cmd_metrics(args.trajectory, out)
    except (PneutiltError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
