"""Command line entry point: geoctrl <subcommand> [--scenario NAME] [--config PATH] [--set key=value]...

Exit codes: 0 ok, 1 verification failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, EmptyTrappedSet, GeoctrlError
from .geometry import AnnulusDecomposition, build_damping, build_metric
from .halfwave import PhasePoint, as_state, b_pm, principal_symbol, project_states

log = logging.getLogger("geoctrl")

SUBCOMMANDS = ("flows", "trapping", "gcc", "escape-verify", "decay")

DEFAULTS = {
    "scenario": None,
    "metric": {"name": "minkowski", "params": {}},
    "damping": {"name": "zero", "params": {}},
    "seed": 0,
    "output": "geoctrl-out",
    "flows": {"n": 8, "s_max": 20.0, "tol": 1e-9, "branch": "plus", "radius": None},
    "trapping": {"n_samples": 32, "horizon": 1000.0, "step": 0.1},
    "gcc": {"n_samples": 16, "T": 20.0, "threshold": 0.01, "horizon": 200.0,
            "time_shifts": [0.0, 0.25, 0.5, 0.75], "tol": 1e-9},
    "escape": {"n_samples": 8, "cbar_fraction": 0.5, "sigma0": 8.0, "sigma_cap": 1024.0,
               "master_samples": 10000, "local_samples": 10000, "horizon": 200.0},
    "decay": {"T": 102.4, "sample_every": 10,
              "grid": {"n": 128, "L": 6.0, "cfl": 0.4, "sponge_width": 1.5, "sponge_strength": 2.0},
              "init": {"kind": "gaussian", "center": [2.15, 0.0, 0.0], "width": 0.45, "k": [0.0, 10.0, 0.0]}},
}

SCENARIOS = {
    "minkowski": {
        "metric": {"name": "minkowski", "params": {}},
        "damping": {"name": "zero", "params": {}},
        "decay": {"init": {"center": [0.0, 0.0, 0.0], "width": 0.3, "k": [0.0, 0.0, 0.0]}},
    },
    "photon-sphere-bump": {
        "metric": {"name": "photon-sphere", "params": {"A": 0.8, "rc": 3.0, "w": 0.6}},
        "damping": {"name": "annular", "params": {"lo": 1.4, "hi": 3.1, "width": 0.3, "level": 0.1,
                                                  "pulse": 1.0, "period": 1.0, "modulated": True}},
    },
    "photon-sphere-stationary": {
        "metric": {"name": "photon-sphere", "params": {}},
        "damping": {"name": "annular", "params": {"modulated": False}},
    },
    "photon-sphere-disjoint": {
        "metric": {"name": "photon-sphere", "params": {}},
        "damping": {"name": "ball", "params": {"R": 0.5}},
    },
    "photon-sphere-undamped": {
        "metric": {"name": "photon-sphere", "params": {}},
        "damping": {"name": "zero", "params": {}},
    },
    "drift": {
        "metric": {"name": "drift", "params": {}},
        "damping": {"name": "constant", "params": {"level": 0.5}},
    },
}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        here = f"{path}.{k}" if path else k
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "params":
            out[k] = _merge(out[k], v, here)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def load_config(path=None, scenario=None, overrides=()):
    """Defaults <- scenario <- config file <- --set overrides, then validated."""
    cfg = copy.deepcopy(DEFAULTS)
    file_cfg = {}
    if path is not None:
        try:
            file_cfg = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", "config") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}", "config") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config must be a mapping", "config")
    name = scenario or file_cfg.get("scenario")
    if name is not None:
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}", "scenario")
        cfg = _merge(cfg, SCENARIOS[name])
        cfg["scenario"] = name
    cfg = _merge(cfg, file_cfg)
    if scenario:
        cfg["scenario"] = scenario
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", "set")
        key, raw = item.split("=", 1)
        try:
            _set_path(cfg, key.strip(), yaml.safe_load(raw))
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value {raw!r}", key) from exc
    validate(cfg)
    return cfg


def validate(cfg):
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", sorted(unknown)[0])
    for part, builder in (("metric", build_metric), ("damping", build_damping)):
        spec = cfg[part]
        if not isinstance(spec, dict) or "name" not in spec:
            raise ConfigError(f"{part} needs a name", part)
        params = spec.get("params") or {}
        if not isinstance(params, dict):
            raise ConfigError("params must be a mapping", f"{part}.params")
        try:
            builder(spec["name"], **params)
        except KeyError as exc:
            raise ConfigError(f"unknown {part} {spec['name']!r}", f"{part}.name") from exc
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), f"{part}.params") from exc
    positive = [("flows", "s_max"), ("flows", "tol"), ("trapping", "horizon"), ("trapping", "step"),
                ("gcc", "T"), ("gcc", "horizon"), ("gcc", "tol"), ("escape", "sigma0"),
                ("escape", "sigma_cap"), ("escape", "cbar_fraction"), ("decay", "T")]
    for sec, key in positive:
        v = cfg[sec].get(key)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            raise ConfigError(f"{sec}.{key} must be a positive number", f"{sec}.{key}")
    for sec, key in [("flows", "n"), ("trapping", "n_samples"), ("gcc", "n_samples"),
                     ("escape", "n_samples"), ("escape", "master_samples"), ("escape", "local_samples")]:
        v = cfg[sec].get(key)
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise ConfigError(f"{sec}.{key} must be a non-negative integer", f"{sec}.{key}")
    if cfg["flows"]["branch"] not in ("full_p", "plus", "minus"):
        raise ConfigError("flows.branch must be full_p, plus or minus", "flows.branch")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer", "seed")


def _objects(cfg):
    metric = build_metric(cfg["metric"]["name"], **(cfg["metric"].get("params") or {}))
    damping = build_damping(cfg["damping"]["name"], **(cfg["damping"].get("params") or {}))
    return metric, damping


def _write_json(path, obj):
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, PhasePoint):
            return as_state(o).tolist()
        raise TypeError(type(o))

    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return str(o)
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o

    Path(path).write_text(json.dumps(clean(obj), indent=2, default=default) + "\n")


# ---------------------------------------------------------------------------
# subcommands; each returns (report dict, ok flag)
# ---------------------------------------------------------------------------

def _random_states(metric, n, radius, rng, branch):
    x = rng.normal(size=(n, 3))
    x *= (radius * rng.uniform(size=(n, 1)) ** (1 / 3)) / np.linalg.norm(x, axis=-1, keepdims=True)
    xi = rng.normal(size=(n, 3))
    xi /= np.linalg.norm(xi, axis=-1, keepdims=True)
    st = np.zeros((n, 8))
    st[:, 1:4], st[:, 5:8] = x, xi
    return project_states(metric, st, "plus" if branch == "full_p" else branch)


def cmd_flows(cfg, out):
    from .flow import integrate_flow
    metric, _ = _objects(cfg)
    c = cfg["flows"]
    rng = np.random.default_rng(cfg["seed"])
    radius = c["radius"] or metric.R0
    states = _random_states(metric, c["n"], radius, rng, c["branch"])
    rows, drifts = [], []
    for i, y0 in enumerate(states):
        traj = integrate_flow(metric, y0, c["branch"], c["s_max"], c["tol"])
        ys = traj.states
        scale = 1.0 + abs(y0[4]) ** 2 + float(np.sum(y0[5:8] ** 2))
        p = principal_symbol(metric, ys)
        drifts.append({"tau": float(np.max(np.abs(ys[:, 4] - y0[4]))),
                       "p": float(np.max(np.abs(p - p[0])) / scale)})
        rows.append(np.column_stack([np.full(len(ys), i), traj.s, ys]))
    table = np.concatenate(rows) if rows else np.zeros((0, 10))
    np.savetxt(out / "flows.csv", table, delimiter=",", header="traj,s,t,x1,x2,x3,tau,xi1,xi2,xi3",
               comments="", fmt="%.17g")
    worst = max([max(d["tau"], d["p"]) for d in drifts], default=0.0)
    ok = worst <= 1e-6
    return {"n_trajectories": len(states), "max_drift": worst, "drifts": drifts, "passed": ok}, ok


def _trapped(metric, n, horizon, seed, step=0.1):
    try:
        from .trapping import sample_trapped_set
        return sample_trapped_set(metric, n, s_max=horizon, seed=seed, step=step)
    except EmptyTrappedSet:
        return []
    except ValueError:
        return []


def cmd_trapping(cfg, out):
    from .trapping import classify, save_samples_csv
    metric, _ = _objects(cfg)
    c = cfg["trapping"]
    samples = _trapped(metric, c["n_samples"], c["horizon"], cfg["seed"], c["step"])
    save_samples_csv(out / "trapped_samples.csv", samples)
    checks = []
    for w in samples[: min(4, len(samples))]:
        v = classify(metric, w, s_max=c["horizon"])
        checks.append({"forward": v.forward, "backward": v.backward})
    ok = all(ch["forward"] == ch["backward"] == "trapped" for ch in checks)
    return {"n_trapped": len(samples), "adaptive_recheck": checks, "passed": ok}, ok


def cmd_gcc(cfg, out):
    from .gcc import tgcc_check
    metric, damping = _objects(cfg)
    c = cfg["gcc"]
    samples = _trapped(metric, c["n_samples"], c["horizon"], cfg["seed"])
    shifts = tuple(c["time_shifts"]) if not damping.stationary else (0.0,)
    rep = tgcc_check(metric, damping, samples, c["T"], c["threshold"], time_shifts=shifts, tol=c["tol"])
    d = rep.to_dict()
    return d, bool(rep.passed)


def cmd_escape(cfg, out):
    from .escape import escape_search
    from .gcc import tgcc_check
    metric, damping = _objects(cfg)
    c = cfg["escape"]
    g = cfg["gcc"]
    samples = _trapped(metric, c["n_samples"], c["horizon"], cfg["seed"])
    shifts = tuple(g["time_shifts"]) if not damping.stationary else (0.0,)
    gcc = tgcc_check(metric, damping, samples, g["T"], g["threshold"], time_shifts=shifts, tol=g["tol"])
    if not gcc.passed:
        return {"gcc": gcc.to_dict(), "passed": False, "reason": "time-dependent control fails"}, False
    cbar2 = c["cbar_fraction"] * gcc.Cbar_est if samples else 1.0
    rep = escape_search(metric, damping, samples, cbar2, AnnulusDecomposition(),
                        {"n": c["master_samples"], "seed": cfg["seed"]}, c["sigma0"], c["sigma_cap"],
                        c["local_samples"], seed=cfg["seed"])
    d = rep.to_dict()
    d["gcc"] = gcc.to_dict()
    return d, bool(rep.passed)


def cmd_decay(cfg, out):
    from .wavesim import decay_experiment
    metric, damping = _objects(cfg)
    c = cfg["decay"]
    rep = decay_experiment(metric, damping, c["init"], c["T"], c["grid"], c["sample_every"])
    rep.to_csv(out / "decay.csv")
    d = rep.to_dict()
    T_star = 4.0 * rep.crossing_time
    if rep.t[-1] >= 2.0 * T_star - 1e-9:
        d["ratio_T*"] = rep.ratio_at(T_star)
        d["ratio_2T*"] = rep.ratio_at(2.0 * T_star)
        d["plateau_ratio"] = d["ratio_2T*"] / d["ratio_T*"]
    ok = bool(np.all(np.isfinite(rep.energy)))
    d["passed"] = ok
    return d, ok


COMMANDS = {"flows": cmd_flows, "trapping": cmd_trapping, "gcc": cmd_gcc,
            "escape-verify": cmd_escape, "decay": cmd_decay}


def build_parser():
    p = argparse.ArgumentParser(prog="geoctrl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"geoctrl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML experiment config")
        s.add_argument("--scenario", choices=sorted(SCENARIOS))
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted path, YAML value)")
        s.add_argument("--out", help="output directory (overrides config 'output')")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command, cfg):
    """Execute one subcommand; returns the exit status."""
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        report, ok = COMMANDS[command](cfg, out)
    except GeoctrlError as exc:
        report, ok = {"passed": False, "error": type(exc).__name__, "message": str(exc)}, False
    report = {"command": command, "scenario": cfg.get("scenario"), "seed": cfg["seed"], **report}
    _write_json(out / "report.json", report)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    return 0 if ok else 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"output={args.out}")
        cfg = load_config(args.config, args.scenario, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    status = run(args.command, cfg)
    print(json.dumps({"command": args.command, "status": status, "output": str(cfg["output"])}))
    return status


if __name__ == "__main__":
    sys.exit(main())
