"""Experiment configs, reproducible runs and the ``mkvctl`` command line."""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from importlib.metadata import version as _dist_version
from .bsde import LatticeConfig, dpp_check, dual_check, minimal_solution, penalized_tree
from .control_opt import (SimConfig, enumerate_step_controls, joint_product_value, value_direct, value_mkv)
from .errors import CapacityError, ComparisonError, ConfigError, MKVError
from .forward_sim import GaussianSampler, StepControl, TimeGrid, flow_check, gain_estimate, simulate_coupled
from .measures import EmpiricalMeasure, dirac
from .problem import BenchmarkProblem, problem_from_config, registry
from .randomized import MarkIntensity, value_randomized

COMMANDS = ("simulate", "value-direct", "value-mkv", "value-randomized", "bsde", "verify", "bench")

_POS_INT = {"type": "integer", "minimum": 1}
SCHEMA = {
    "type": "object",
    "required": ["problem"],
    "additionalProperties": False,
    "properties": {
        "problem": {
            "type": "object", "required": ["name"],
            "properties": {"name": {"type": "string"}, "dimension": {"const": 1},
                           "horizon": {"type": "number", "exclusiveMinimum": 0},
                           "actions": {"type": "array", "minItems": 1, "items": {"type": "number"}},
                           "lq": {"type": "object"}, "params": {"type": "object"}},
            "additionalProperties": False,
        },
        "t": {"type": "number", "minimum": 0},
        "x": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "pi": {
            "type": "object", "required": ["kind"],
            "properties": {"kind": {"enum": ["gaussian", "atoms", "dirac"]},
                           "mean": {"type": "number"}, "std": {"type": "number", "minimum": 0},
                           "points": {"type": "array"}, "weights": {"type": "array"},
                           "point": {"type": "array"}},
            "additionalProperties": False,
        },
        "catalog": {
            "type": "object",
            "properties": {"k": _POS_INT, "L": _POS_INT, "cap": _POS_INT},
            "additionalProperties": False,
        },
        "sim": {
            "type": "object",
            "properties": {"n_steps": _POS_INT, "N": {"type": "integer", "minimum": 2},
                           "M_inner": {"type": ["integer", "null"], "minimum": 1},
                           "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
                           "repeats": _POS_INT},
            "additionalProperties": False,
        },
        "randomization": {
            "type": "object",
            "properties": {"rate": {"type": "number", "exclusiveMinimum": 0},
                           "rates": {"type": ["array", "null"], "items": {"type": "number", "exclusiveMinimum": 0}},
                           "K_max": {"type": "integer", "minimum": 0},
                           "nu_bounds": {"type": "array", "minItems": 2, "maxItems": 2,
                                         "items": {"type": "number", "exclusiveMinimum": 0}},
                           "schedule": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
                           "initial": {"type": "integer", "minimum": 0},
                           "a0": {"type": ["integer", "null"], "minimum": 0}},
            "additionalProperties": False,
        },
        "verify": {
            "type": "object",
            "properties": {"checks": {"type": "array", "items": {"enum": [
                               "flow", "dual", "equivalence", "feynman-kac", "dpp", "lq"]}},
                           "flow_fractions": {"type": "array", "items": {"type": "number"}},
                           "flow_N": _POS_INT, "dpp_s": {"type": "number"},
                           "dt_levels": {"type": "array", "items": _POS_INT}},
            "additionalProperties": False,
        },
        "out": {"type": "string"},
    },
}

DEFAULTS = {
    "t": 0.0, "x": [0.0], "pi": {"kind": "gaussian", "mean": 0.0, "std": 0.5},
    "catalog": {"k": 2, "L": 1, "cap": 4096},
    "sim": {"n_steps": 20, "N": 2000, "M_inner": None, "seeds": [0], "repeats": 8},
    "randomization": {"rate": 20.0, "rates": None, "K_max": 3, "nu_bounds": [0.1, 50.0],
                      "schedule": [1, 2, 4, 8, 16, 32, 64, 128, 256], "initial": 0, "a0": None},
    "verify": {"checks": ["flow", "dual", "equivalence", "feynman-kac"], "flow_fractions": [0.25, 0.5, 0.75],
               "flow_N": 64, "dpp_s": 0.5, "dt_levels": []},
    "out": "runs",
}


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else ""


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``data`` holds every field explicitly."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object", "")
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as e:
            raise ConfigError(e.message, _pointer(e.absolute_path)) from None
        data = _merge(DEFAULTS, raw)
        names = {p.name for p in registry()}
        if data["problem"]["name"] not in names:
            raise ConfigError(f"unknown problem {data['problem']['name']!r}", "/problem/name")
        lo, hi = data["randomization"]["nu_bounds"]
        if lo > hi:
            raise ConfigError("nu_bounds must satisfy lo <= hi", "/randomization/nu_bounds")
        sched = data["randomization"]["schedule"]
        if any(b <= a for a, b in zip(sched, sched[1:])):
            raise ConfigError("schedule must be increasing", "/randomization/schedule")
        if data["pi"]["kind"] == "atoms":
            w = data["pi"].get("weights")
            if not data["pi"].get("points") or w is None or len(w) != len(data["pi"]["points"]):
                raise ConfigError("atoms need matching points and weights", "/pi")
        return cls(data)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e.msg}", "") from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def with_overrides(self, seed=None, out=None, nu_bounds=None, repeats=None) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        if seed is not None:
            d["sim"]["seeds"] = [int(seed)]
        if out is not None:
            d["out"] = str(out)
        if nu_bounds is not None:
            d["randomization"]["nu_bounds"] = [float(v) for v in nu_bounds]
        if repeats is not None:
            d["sim"]["repeats"] = int(repeats)
        return ExperimentConfig.from_dict(d)

    # derived objects
    def problem(self) -> BenchmarkProblem:
        return problem_from_config(self.data["problem"])

    def pi(self):
        p = self.data["pi"]
        if p["kind"] == "gaussian":
            return GaussianSampler(float(p.get("mean", 0.0)), float(p.get("std", 1.0)), 1)
        if p["kind"] == "dirac":
            return dirac(np.asarray(p.get("point", [0.0]), dtype=float))
        return EmpiricalMeasure(np.asarray(p["points"], dtype=float).reshape(len(p["points"]), -1),
                                np.asarray(p["weights"], dtype=float))

    def x(self):
        return np.asarray(self.data["x"], dtype=float)

    def catalog(self, problem: BenchmarkProblem):
        c = self.data["catalog"]
        return enumerate_step_controls(problem.space, c["k"], c["L"], cap=c["cap"], horizon=problem.horizon)

    def seeds(self) -> list:
        s = self.data["sim"]
        base = s["seeds"]
        if len(base) > 1:
            return list(base)
        return [base[0] + r for r in range(s["repeats"])]

    def sim(self, seed) -> SimConfig:
        s = self.data["sim"]
        return SimConfig(s["n_steps"], s["N"], s["M_inner"], int(seed))

    def lattice(self) -> LatticeConfig:
        r = self.data["randomization"]
        return LatticeConfig(float(r["rate"]), tuple(r["rates"]) if r["rates"] else None, int(r["K_max"]),
                             tuple(r["nu_bounds"]), tuple(r["schedule"]), int(r["initial"]))


@dataclass
class RunRecord:
    command: str
    problem: str
    config_hash: str
    build: str
    results: dict = field(default_factory=dict)      # route -> {value, ci, per_seed}
    residuals: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_dict(self):
        return {"command": self.command, "problem": self.problem, "config_hash": self.config_hash,
                "build": self.build, "results": self.results, "residuals": self.residuals,
                "timings": self.timings}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(d["command"], d["problem"], d["config_hash"], d.get("build", ""), d.get("results", {}),
                   d.get("residuals", {}), d.get("timings", {}))


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    ver = _dist_version("mkvctl")
    return f"{ver}+{rev}" if rev else ver


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: dict, columns, rows) -> str:
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MKVCTL_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    items = list(items)
    n = min(_threads(), len(items))
    if n <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _summary(values) -> dict:
    v = np.asarray(values, dtype=float)
    ci = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return {"value": float(v.mean()), "ci": ci, "per_seed": [float(a) for a in v]}


def _combined(a: dict, b: dict) -> float:
    return math.hypot(a["ci"], b["ci"])


# ----------------------------------------------------------------------------
# pipelines

class Runner:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.problem = cfg.problem()
        self.x = cfg.x()
        self.pi = cfg.pi()
        self.t = float(cfg.data["t"])
        self.seeds = cfg.seeds()
        self.out = Path(cfg.data["out"])
        self.files = {}

    def header(self, seed=None) -> dict:
        h = {"config_hash": self.cfg.hash}
        h["seed"] = ",".join(str(s) for s in self.seeds) if seed is None else seed
        return h

    def write(self, name, text):
        self.files[name] = text
        atomic_write(self.out / name, text)

    def catalog(self):
        return self.cfg.catalog(self.problem)

    # individual routes
    def direct(self, catalog, keep_table=False):
        def one(seed):
            return value_direct(self.problem, self.t, self.x, self.pi, catalog, self.cfg.sim(seed))
        res = _map(one, self.seeds)
        if keep_table:
            s0 = self.seeds[0]
            self.write("direct_table.csv", csv_text(self.header(s0), ["control_id", "mean", "std_error"],
                                                    res[0].table_csv_rows()))
        out = _summary([r.value for r in res])
        out["argmax"] = [int(r.argmax) for r in res]
        return out

    def _lam(self, catalog):
        lat = self.cfg.lattice()
        return MarkIntensity(tuple(range(len(catalog))), lat.rate_vector(len(catalog)))

    def randomized(self, catalog, write_nu=False):
        lat = self.cfg.lattice()
        lam = self._lam(catalog)
        a0 = self.cfg.data["randomization"]["a0"]
        s = self.cfg.data["sim"]

        def one(seed):
            return value_randomized(self.problem, self.t, self.x, self.pi, lam, list(catalog), lat.bounds,
                                    lat.K_max, s["n_steps"], s["N"], int(seed), lat.initial, a0,
                                    with_table=write_nu and seed == self.seeds[0])
        res = _map(one, self.seeds)
        if write_nu:
            self.write("nu_table.json", json.dumps({"seed": self.seeds[0], "config_hash": self.cfg.hash,
                                                    "nu": json.loads(res[0].nu_json())}, sort_keys=True) + "\n")
        out = _summary([r.value for r in res])
        out["truncation_probability"] = res[0].truncation_probability
        return out

    def bsde(self, catalog, write_trace=False):
        lat = self.cfg.lattice()

        def one(seed):
            tree = penalized_tree(self.problem, self.t, self.x, self.pi, list(catalog), self.cfg.sim(seed), lat, seed)
            ms = minimal_solution(tree, lat.schedule)
            duals = [dual_check(n, tree) for n in lat.schedule]
            return ms, max(duals)
        res = _map(one, self.seeds)
        if write_trace:
            rows = [(s, n, y, u) for s, (ms, _d) in zip(self.seeds, res) for n, y, u in ms.trace]
            self.write("value_vs_n.csv", csv_text(self.header(), ["seed", "n", "Y_root", "max_U_plus"], rows))
            self.write("convergence.json", json.dumps(
                {"config_hash": self.cfg.hash, "seeds": self.seeds,
                 "runs": [json.loads(ms.to_json()) for ms, _ in res]}, sort_keys=True, indent=2) + "\n")
            self.write("penalized_trace.csv", res[0][0].final.to_csv(
                "# " + " ".join(f"{k}={v}" for k, v in self.header(self.seeds[0]).items())))
        out = _summary([ms.Y for ms, _ in res])
        out["converged"] = all(ms.converged for ms, _ in res)
        out["constraint_ok"] = all(ms.constraint_ok for ms, _ in res)
        out["dual_max"] = float(max(d for _, d in res))
        return out

    # commands
    def cmd_simulate(self, rec: RunRecord):
        cat = self.catalog()
        ctrl = cat[0]
        s = self.cfg.data["sim"]
        grid = TimeGrid(self.t, self.problem.horizon, s["n_steps"])
        seed = self.seeds[0]
        traj = simulate_coupled(self.problem, self.t, self.x, self.pi, ctrl, grid, s["N"], s["M_inner"], seed)
        rows = []
        for snap in traj:
            rows.append((snap.step, float(snap.time), float(snap.xi_particles.mean()),
                         float(snap.xi_particles.var()), float(snap.x_particles.mean())))
        self.write("trajectory_summary.csv", csv_text(self.header(seed), ["step", "time", "xi_mean", "xi_var",
                                                                          "x_mean"], rows))
        est = [gain_estimate(self.problem, self.t, self.x, self.pi, ctrl, grid, s["N"], sd, s["M_inner"]).mean
               for sd in self.seeds]
        rec.results["gain"] = _summary(est)

    def cmd_value_direct(self, rec):
        rec.results["direct"] = self.direct(self.catalog(), keep_table=True)
        if self.problem.analytic_value is not None and isinstance(self.pi, EmpiricalMeasure):
            rec.results["analytic"] = {"value": float(self.problem.analytic_value(self.t, self.x, self.pi)), "ci": 0.0}

    def cmd_value_mkv(self, rec):
        if not isinstance(self.pi, EmpiricalMeasure):
            raise ConfigError("value-mkv needs a finitely valued initial law", "/pi/kind")
        cat = self.catalog()
        dis = [value_mkv(self.problem, self.t, self.pi, cat, self.cfg.sim(s))["value"] for s in self.seeds]
        joint = [joint_product_value(self.problem, self.t, self.pi, cat, self.cfg.sim(s))["value"] for s in self.seeds]
        rec.results["mkv_disintegrated"] = _summary(dis)
        rec.results["mkv_joint"] = _summary(joint)
        rec.residuals["disintegration"] = abs(rec.results["mkv_joint"]["value"] - rec.results["mkv_disintegrated"]["value"])

    def cmd_value_randomized(self, rec):
        rec.results["randomized"] = self.randomized(self.catalog(), write_nu=True)

    def cmd_bsde(self, rec):
        b = self.bsde(self.catalog(), write_trace=True)
        rec.results["bsde"] = b
        rec.residuals["dual_max"] = b["dual_max"]

    def cmd_verify(self, rec):
        v = self.cfg.data["verify"]
        checks = v["checks"]
        cat = self.catalog()
        s = self.cfg.data["sim"]
        rows = []
        if "flow" in checks:
            grid = TimeGrid(self.t, self.problem.horizon, s["n_steps"])
            worst = 0.0
            for frac in v["flow_fractions"]:
                sv = grid.nodes[int(round(frac * s["n_steps"]))]
                r = flow_check(self.problem, self.t, sv, self.x, self.pi, cat[len(cat) // 2], grid, v["flow_N"],
                               self.seeds[0])
                worst = max(worst, r["max"])
            rec.residuals["flow"] = worst
            rows.append(("flow", worst, 1e-10))
        need_direct = any(c in checks for c in ("equivalence", "feynman-kac", "lq"))
        direct = self.direct(cat) if need_direct else None
        if direct is not None:
            rec.results["direct"] = direct
        if "equivalence" in checks:
            rnd = self.randomized(cat)
            rec.results["randomized"] = rnd
            res = abs(rnd["value"] - direct["value"])
            tol = max(0.02 * abs(direct["value"]), 2 * _combined(rnd, direct))
            rec.residuals["equivalence"] = res
            rows.append(("equivalence", res, tol))
        if "feynman-kac" in checks or "dual" in checks:
            b = self.bsde(cat, write_trace=True)
            rec.results["bsde"] = b
            if "dual" in checks:
                rec.residuals["dual_max"] = b["dual_max"]
                rows.append(("dual", b["dual_max"], 1e-6))
            if "feynman-kac" in checks:
                res = abs(b["value"] - direct["value"])
                tol = max(0.02 * abs(direct["value"]), 2 * _combined(b, direct))
                rec.residuals["feynman_kac"] = res
                rows.append(("feynman-kac", res, tol))
        if "dpp" in checks:
            lat = self.cfg.lattice()
            sv = v["dpp_s"] * self.problem.horizon
            r = dpp_check(self.problem, self.t, sv, self.x, self.pi, list(cat), self.cfg.sim(self.seeds[0]), lat,
                          repeats=len(self.seeds))
            rec.results["dpp"] = {"lhs": r["lhs"], "rhs": r["rhs"], "ci": r["combined_ci"]}
            rec.residuals["dpp"] = r["residual"]
            rows.append(("dpp", r["residual"], max(0.03 * abs(r["lhs"]), 2 * r["combined_ci"])))
        if "lq" in checks:
            if self.problem.analytic_value is None:
                raise ConfigError("lq check needs a problem with an analytic value", "/verify/checks")
            law = self.pi if isinstance(self.pi, EmpiricalMeasure) else _moment_cloud(self.pi)
            oracle = float(self.problem.analytic_value(self.t, self.x, law))
            rec.results["analytic"] = {"value": oracle, "ci": 0.0}
            res = abs(direct["value"] - oracle)
            rec.residuals["lq"] = res
            rows.append(("lq", res, 0.05 * abs(oracle)))
        dt_rows = []
        for n_steps in v["dt_levels"]:
            sub = Runner(self.cfg.with_overrides())
            sub.cfg.data["sim"]["n_steps"] = int(n_steps)
            d = sub.direct(cat)
            b = sub.bsde(cat)
            dt_rows.append((float(self.problem.horizon / n_steps), abs(b["value"] - d["value"])))
        if dt_rows:
            self.write("residual_vs_dt.csv", csv_text(self.header(), ["dt", "feynman_kac_residual"], dt_rows))
        self.write("residuals.csv", csv_text(self.header(), ["check", "residual", "tolerance", "pass"],
                                             [(c, float(r), float(t), bool(r <= t)) for c, r, t in rows]))
        rec.residuals["_pass"] = all(r <= t for _, r, t in rows)

    def cmd_bench(self, rec):
        cat = self.catalog()
        seed = self.seeds[0]
        single = Runner(self.cfg.with_overrides(seed=seed, repeats=1))
        for name, fn in (("direct", lambda: single.direct(cat)), ("randomized", lambda: single.randomized(cat)),
                         ("bsde", lambda: single.bsde(cat))):
            t0 = time.perf_counter()
            rec.results[name] = fn()
            rec.timings[f"{name}_seconds"] = time.perf_counter() - t0


def _moment_cloud(sampler, n=20000):
    from .measures import empirical_from_samples
    return empirical_from_samples(sampler.sample(n, np.random.default_rng(0)))


def run(command: str, config, out=None, seed=None, nu_bounds=None, repeats=None) -> RunRecord:
    """Execute ``command`` for ``config`` (path, dict or ExperimentConfig) and write its artifacts."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}", "")
    if isinstance(config, ExperimentConfig):
        cfg = config
    elif isinstance(config, dict):
        cfg = ExperimentConfig.from_dict(config)
    else:
        cfg = ExperimentConfig.load(config)
    cfg = cfg.with_overrides(seed=seed, out=out, nu_bounds=nu_bounds, repeats=repeats)
    runner = Runner(cfg)
    rec = RunRecord(command, runner.problem.name, cfg.hash, build_id())
    runner.write("config.json", cfg.to_json())
    t0 = time.perf_counter()
    getattr(runner, "cmd_" + command.replace("-", "_"))(rec)
    rec.timings["wall_seconds"] = time.perf_counter() - t0
    runner.write("results.json", rec.to_json())
    return rec


def compare_runs(a, b) -> dict:
    """Per-route value deltas between two records and whether each lies within the combined CI."""
    a = a if isinstance(a, RunRecord) else RunRecord.from_dict(a)
    b = b if isinstance(b, RunRecord) else RunRecord.from_dict(b)
    if a.problem != b.problem:
        raise ComparisonError(f"records are for different problems: {a.problem} vs {b.problem}")
    diff = []
    for route in sorted(set(a.results) & set(b.results)):
        ra, rb = a.results[route], b.results[route]
        if "value" not in ra or "value" not in rb:
            continue
        delta = rb["value"] - ra["value"]
        if delta == 0:
            continue
        ci = math.hypot(ra.get("ci", 0.0), rb.get("ci", 0.0))
        diff.append({"route": route, "delta": delta, "combined_ci": ci, "within": abs(delta) <= 2 * ci})
    return {"problem": a.problem, "diff": diff, "all_within": all(d["within"] for d in diff)}


def shipped_config(name: str) -> Path:
    return Path(str(resources.files("mkvctl") / "configs" / f"{name}.json"))


def _error_payload(e: Exception) -> dict:
    d = {"error": type(e).__name__, "message": str(e.args[0]) if e.args else str(e)}
    if isinstance(e, ConfigError):
        d["pointer"] = e.pointer
    return d


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mkvctl", description="McKean-Vlasov control value routes and checks")
    ap.add_argument("command", choices=COMMANDS + ("compare",))
    ap.add_argument("--config", help="experiment JSON (or name of a shipped config)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    ap.add_argument("--nu-bounds", help="lo,hi")
    ap.add_argument("--repeats", type=int)
    ap.add_argument("records", nargs="*", help="two results.json files for compare")
    args = ap.parse_args(argv)
    try:
        if args.command == "compare":
            if len(args.records) != 2:
                raise ConfigError("compare needs two results.json paths", "")
            recs = [json.loads(Path(p).read_text()) for p in args.records]
            print(json.dumps(compare_runs(*recs), indent=2, sort_keys=True))
            return 0
        if not args.config:
            raise ConfigError("--config is required", "")
        path = Path(args.config)
        if not path.exists() and shipped_config(args.config).exists():
            path = shipped_config(args.config)
        bounds = None
        if args.nu_bounds:
            try:
                bounds = [float(v) for v in args.nu_bounds.split(",")]
            except ValueError:
                raise ConfigError("--nu-bounds must be lo,hi", "/randomization/nu_bounds") from None
            if len(bounds) != 2:
                raise ConfigError("--nu-bounds must be lo,hi", "/randomization/nu_bounds")
        rec = run(args.command, path, out=args.out, seed=args.seed, nu_bounds=bounds, repeats=args.repeats)
        print(json.dumps({"results": rec.results, "residuals": rec.residuals}, indent=2, sort_keys=True))
        return 0
    except (MKVError, OSError) as e:
        payload = _error_payload(e)
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        if args.out:
            try:
                atomic_write(Path(args.out) / "error.json", json.dumps(payload, sort_keys=True) + "\n")
            except OSError:
                pass
        if isinstance(e, ConfigError):
            return 2
        if isinstance(e, CapacityError):
            return 3
        return 1


if __name__ == "__main__":
    sys.exit(main())
