"""Scenario files: schema, built-in scenarios and the task pipeline."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import jsonschema
import numpy as np

from .builtins import builtin_family, list_builtins
from .charts import audit_chart, build_chart, fit_chart
from .errors import DivergenceError, OrbitlabError, ScenarioError
from .expr import Expression
from .fields import FieldFamily
from .flows import integrate_laws
from .involutivity import domain_audit
from .mollify import MollifiedFamily, residual_ladder, wedge_identity_audit
from .multivector import DEFAULT_TOL_REL, lambda_norms, ranks
from .orbits import cc_distance_upper, orbit_sample, random_laws, rank_constancy_audit, rank_stability_audit

SCHEMA_ID = "orbitlab.scenario/1"
REPORT_SCHEMA_ID = "orbitlab.report/1"
TASKS = ("rank", "involutivity", "flow", "orbit", "chart", "ccdist", "stability", "report")
STOCHASTIC = {"involutivity", "flow", "orbit", "chart", "ccdist", "stability", "report"}

_point = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_box = {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}}
_posint = {"type": "integer", "minimum": 1}
_pos = {"type": "number", "exclusiveMinimum": 0}

_PARAMS = {
    "rank": {"points": {"type": "array", "items": _point, "minItems": 1}, "tol_rel": _pos,
             "expect": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
    "involutivity": {"box": _box, "samples": _posint, "coeff_threshold": _pos, "residual_tol": _pos,
                     "nested": {"type": "integer", "minimum": 0}},
    "flow": {"x0": _point, "T": _pos, "paths": _posint, "segments": _posint, "h": _pos,
             "invariant": {"type": "string"}, "tol": _pos},
    "orbit": {"x0": _point, "h_mov": _pos, "depth": _posint, "branching": _posint, "tol_rel": _pos, "h": _pos},
    "chart": {"x0": _point, "p": _posint, "delta": _pos, "sigma": _pos, "h": _pos},
    "ccdist": {"x": _point, "y": _point, "segments": _posint, "restarts": _posint, "tol": _pos,
               "expect": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
    "stability": {"x0": _point, "p": _posint, "paths": _posint, "T": _pos, "segments": _posint,
                  "c_max": _pos, "h": _pos},
    "report": {"box": _box, "pair": {"type": "array", "items": _posint, "minItems": 2, "maxItems": 2},
               "sigmas": {"type": "array", "items": _pos, "minItems": 2}, "samples": _posint,
               "wedge_samples": _posint, "ratio_max": _pos, "wedge_tol": _pos},
}
_REQUIRED = {
    "rank": ["points"], "involutivity": ["box"], "flow": ["x0", "T"], "orbit": ["x0"], "chart": ["x0"],
    "ccdist": ["x", "y"], "stability": ["x0"], "report": ["box"],
}


def _task_schema(kind: str) -> dict:
    props = dict(_PARAMS[kind])
    props["seed"] = {"type": "integer", "minimum": 0}
    return {
        "if": {"properties": {"task": {"const": kind}}, "required": ["task"]},
        "then": {"properties": {"params": {"type": "object", "properties": props,
                                           "required": _REQUIRED[kind], "additionalProperties": False}}},
    }


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema", "family", "tasks"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SCHEMA_ID},
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "family": {
            "oneOf": [
                {"type": "object", "required": ["builtin"], "additionalProperties": False,
                 "properties": {"builtin": {"type": "string"}}},
                {"type": "object", "required": ["dimension", "fields"], "additionalProperties": False,
                 "properties": {
                     "name": {"type": "string"},
                     "dimension": {"type": "integer", "minimum": 1},
                     "fields": {"type": "array", "minItems": 1, "items": {
                         "type": "object", "required": ["components"], "additionalProperties": False,
                         "properties": {"name": {"type": "string"},
                                        "components": {"type": "array", "items": {"type": "string"},
                                                       "minItems": 1}}}},
                 }},
            ]
        },
        "tasks": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["task", "params"],
                "additionalProperties": False,
                "properties": {"task": {"enum": list(TASKS)}, "name": {"type": "string"}, "params": {"type": "object"}},
                "allOf": [_task_schema(k) for k in TASKS],
            },
        },
        "outputs": {"type": "object", "additionalProperties": False,
                    "properties": {"dir": {"type": "string"}, "csv": {"type": "boolean"}}},
    },
}


def _pointer(path) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path) if path else ""


def validate(doc: Any) -> list[ScenarioError]:
    """All schema and semantic errors of a scenario document, each with a JSON pointer."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = [ScenarioError(e.message, _pointer(e.absolute_path))
              for e in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))]
    if errors:
        return errors
    fam = doc["family"]
    n = None
    if "builtin" in fam:
        names = [name for name, _ in list_builtins()]
        if fam["builtin"] not in names:
            errors.append(ScenarioError(f"unknown built-in family {fam['builtin']!r}", "/family/builtin"))
        else:
            n = builtin_family(fam["builtin"]).n
    else:
        n = fam["dimension"]
        for j, f in enumerate(fam["fields"]):
            comps = f["components"]
            if len(comps) != n:
                errors.append(ScenarioError(f"expected {n} components, got {len(comps)}",
                                            f"/family/fields/{j}/components"))
            for a, text in enumerate(comps):
                where = f"/family/fields/{j}/components/{a}"
                try:
                    e = Expression.parse(text)
                except OrbitlabError as exc:
                    errors.append(ScenarioError(str(exc), where))
                    continue
                if e.nvars > n:
                    errors.append(ScenarioError(f"variable x{e.nvars} exceeds dimension {n}", where))
    if n is not None:
        for i, task in enumerate(doc["tasks"]):
            params = task["params"]
            for key in ("points",):
                for k, pt in enumerate(params.get(key, [])):
                    if len(pt) != n:
                        errors.append(ScenarioError(f"point has {len(pt)} coordinates, dimension is {n}",
                                                    f"/tasks/{i}/params/{key}/{k}"))
            for key in ("x0", "x", "y"):
                if key in params and len(params[key]) != n:
                    errors.append(ScenarioError(f"point has {len(params[key])} coordinates, dimension is {n}",
                                                f"/tasks/{i}/params/{key}"))
            if "box" in params and len(params["box"]) != n:
                errors.append(ScenarioError(f"box has {len(params['box'])} intervals, dimension is {n}",
                                            f"/tasks/{i}/params/box"))
            if task["task"] in STOCHASTIC and "seed" not in params and "seed" not in doc:
                errors.append(ScenarioError("stochastic task needs a seed (task or scenario level)",
                                            f"/tasks/{i}/params"))
    return errors


def load(path_or_name: str) -> dict:
    """Scenario document from a JSON file or the name of a built-in scenario."""
    if os.path.exists(path_or_name):
        with open(path_or_name) as fh:
            try:
                return json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"invalid JSON: {exc.msg} (line {exc.lineno})", "") from None
    if path_or_name in BUILTIN_SCENARIOS:
        return builtin_scenario(path_or_name)
    raise ScenarioError(f"no such file or built-in scenario: {path_or_name}", "")


def family_of(doc: dict) -> FieldFamily:
    fam = doc["family"]
    if "builtin" in fam:
        return builtin_family(fam["builtin"])
    return FieldFamily.from_strings([f["components"] for f in fam["fields"]], name=fam.get("name", ""),
                                    n=fam["dimension"])


def canonical(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest(doc: dict) -> str:
    return hashlib.sha256(canonical(doc).encode()).hexdigest()


def clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars and arrays become Python values, non-finite floats become strings."""
    if isinstance(value, dict):
        return {str(k): clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else ("nan" if v != v else ("inf" if v > 0 else "-inf"))
    return value


# ------------------------------------------------------------------ tasks


@dataclass
class TaskResult:
    name: str
    task: str
    verdict: str
    metrics: dict
    artifacts: list[str] = field(default_factory=list)
    diverged: bool = False

    def to_json(self) -> dict:
        return {"name": self.name, "task": self.task, "verdict": self.verdict,
                "metrics": clean(self.metrics), "artifacts": list(self.artifacts)}


@dataclass
class AuditBundle:
    scenario_digest: str
    tasks: list[TaskResult]

    @property
    def verdict(self) -> str:
        return "pass" if all(t.verdict == "pass" for t in self.tasks) else "fail"

    @property
    def diverged(self) -> bool:
        return any(t.diverged for t in self.tasks)

    @property
    def exit_code(self) -> int:
        if self.diverged:
            return 3
        return 0 if self.verdict == "pass" else 1

    def to_json(self) -> dict:
        return {"schema": REPORT_SCHEMA_ID, "scenario_digest": self.scenario_digest, "verdict": self.verdict,
                "tasks": [t.to_json() for t in self.tasks]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _verdict(ok: bool) -> str:
    return "pass" if ok else "fail"


def _task_rank(fam, p, seed, out):
    X = np.asarray(p["points"], dtype=float)
    tol = p.get("tol_rel", DEFAULT_TOL_REL)
    F = fam.frames(X)
    r = ranks(F, tol)
    metrics = {"points": X, "ranks": r, "tol_rel": tol,
               "lambda_norms": [lambda_norms(F, k) for k in range(1, min(fam.n, fam.q) + 1)]}
    ok = True
    if "expect" in p:
        ok = list(map(int, r)) == list(p["expect"])
        metrics["expect"] = p["expect"]
    return _verdict(ok), metrics, []


def _task_involutivity(fam, p, seed, out):
    rep = domain_audit(fam, p["box"], samples=p.get("samples", 2000), seed=seed,
                       coeff_threshold=p.get("coeff_threshold", 25.0), residual_tol=p.get("residual_tol", 1e-8),
                       nested=p.get("nested", 0))
    return ("pass" if rep.verdict == "pass" else "fail"), rep.to_json(), []


def _task_flow(fam, p, seed, out):
    T = p["T"]
    laws = random_laws(fam.q, T, p.get("segments", 8), p.get("paths", 50), seed)
    times, states = integrate_laws(fam, laws, p["x0"], p.get("h"))
    metrics = {"paths": len(laws), "T": T, "endpoint_spread": np.ptp(states[:, -1, :], axis=0),
               "max_displacement": float(np.max(np.linalg.norm(states - states[:, :1], axis=2)))}
    ok = bool(np.all(np.isfinite(states)))
    if "invariant" in p:
        g = Expression.parse(p["invariant"])
        vals = np.abs(g(states.reshape(-1, fam.n).T))
        tol = p.get("tol", 1e-5)
        metrics.update({"invariant": p["invariant"], "max_invariant": float(np.max(vals)), "tol": tol})
        ok = ok and float(np.max(vals)) <= tol
    arts = []
    if out is not None:
        name = out.name_for("flow.csv")
        stride = max(1, (states.shape[1] - 1) // 100)
        with open(out.path(name), "w") as fh:
            fh.write("path,t," + ",".join(f"x{a + 1}" for a in range(fam.n)) + "\n")
            for i in range(states.shape[0]):
                for k in range(0, states.shape[1], stride):
                    fh.write(f"{i},{times[k]!r}," + ",".join(repr(float(v)) for v in states[i, k]) + "\n")
        arts.append(name)
    return _verdict(ok), metrics, arts


def _task_orbit(fam, p, seed, out):
    s = orbit_sample(fam, p["x0"], h_mov=p.get("h_mov", 0.25), depth=p.get("depth", 6),
                     branching=p.get("branching"), seed=seed, h=p.get("h"), tol_rel=p.get("tol_rel", DEFAULT_TOL_REL))
    rep = rank_constancy_audit(s, fam, p.get("tol_rel", DEFAULT_TOL_REL))
    metrics = {"points": len(s.points), "rank_constancy": rep.to_json(), "d_upper_max": float(np.max(s.d_upper))}
    arts = []
    if out is not None:
        name = out.name_for("orbit.csv")
        s.write_csv(out.path(name))
        arts.append(name)
    return _verdict(rep.passed), metrics, arts


def _task_chart(fam, p, seed, out):
    sigma = p.get("sigma", 0.05)
    if "delta" in p:
        chart = build_chart(fam, p["x0"], p=p.get("p"), delta=p["delta"], h=p.get("h"))
        rep = audit_chart(chart, sigma, seed)
    else:
        chart, rep = fit_chart(fam, p["x0"], p=p.get("p"), sigma=sigma, seed=seed, h=p.get("h"))
    metrics = rep.to_json()
    metrics["note"] = "span agreement sampled at chart images; Euclidean-box sampling is unsound for it"
    arts = []
    if out is not None:
        name = out.name_for("chart.csv")
        chart.write_csv(out.path(name))
        arts.append(name)
    return _verdict(rep.passed), metrics, arts


def _task_ccdist(fam, p, seed, out):
    est = cc_distance_upper(fam, p["x"], p["y"], segments=p.get("segments", 4), restarts=p.get("restarts", 4),
                            seed=seed, tol=p.get("tol", 1e-4))
    metrics = est.to_json()
    ok = est.reached
    if "expect" in p:
        lo, hi = p["expect"]
        metrics["expect"] = [lo, hi]
        ok = ok and lo <= est.distance <= hi
    return _verdict(ok), metrics, []


def _task_stability(fam, p, seed, out):
    x0 = np.asarray(p["x0"], dtype=float)
    pp = p.get("p", min(fam.n, fam.q))
    laws = random_laws(fam.q, p.get("T", 0.25), p.get("segments", 4), p.get("paths", 50), seed)
    rec = rank_stability_audit(fam, x0, laws, pp, p.get("h"))
    c_max = p.get("c_max", 10.0)
    metrics = rec.to_json()
    metrics["c_max"] = c_max
    ok = rec.passed and (rec.zero_case or rec.C_hat <= c_max)
    return _verdict(ok), metrics, []


def _task_report(fam, p, seed, out):
    j, k = (v - 1 for v in p.get("pair", [1, 2]))
    ladder = residual_ladder(fam, j, k, p["box"], p.get("sigmas", (0.1, 0.05, 0.025)),
                             samples=p.get("samples", 32), seed=seed)
    mf = MollifiedFamily.of(fam, min(p.get("sigmas", (0.1, 0.05, 0.025))))
    wedge = wedge_identity_audit(mf, samples=p.get("wedge_samples", 5), seed=seed, box=p["box"])
    ratio_max, wedge_tol = p.get("ratio_max", 4.0), p.get("wedge_tol", 1e-5)
    metrics = {"friedrichs": ladder.to_json(), "wedge_defect": wedge, "ratio_max": ratio_max, "wedge_tol": wedge_tol}
    ok = ladder.ratio <= ratio_max and wedge <= wedge_tol
    return _verdict(ok), metrics, []


_RUNNERS: dict[str, Callable] = {
    "rank": _task_rank, "involutivity": _task_involutivity, "flow": _task_flow, "orbit": _task_orbit,
    "chart": _task_chart, "ccdist": _task_ccdist, "stability": _task_stability, "report": _task_report,
}


class _Outputs:
    def __init__(self, root: Path, task_name: str):
        self.root, self.task_name = root, task_name

    def name_for(self, suffix: str) -> str:
        return f"{self.task_name}.{suffix}"

    def path(self, name: str) -> Path:
        return self.root / name


def run_scenario(doc_or_path, out_dir: str | os.PathLike | None = None, seed: int | None = None) -> AuditBundle:
    """Validate and execute a scenario; writes report.json and CSV series when ``out_dir`` is given.

    ``seed`` replaces the scenario-level seed; explicit task seeds still win.
    Task errors are recorded as the task's verdict.
    """
    doc = load(doc_or_path) if isinstance(doc_or_path, (str, os.PathLike)) else copy.deepcopy(doc_or_path)
    if seed is not None:
        doc["seed"] = int(seed)
    errors = validate(doc)
    if errors:
        raise errors[0] if len(errors) == 1 else ScenarioError(
            "; ".join(str(e) for e in errors[1:]), errors[0].pointer) from errors[0]
    fam = family_of(doc)
    root = None
    if out_dir is not None:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
    results = []
    for i, task in enumerate(doc["tasks"]):
        kind, params = task["task"], task["params"]
        name = task.get("name", f"{i + 1:02d}-{kind}")
        task_seed = params.get("seed", doc.get("seed", 0))
        out = _Outputs(root, name) if root is not None else None
        try:
            verdict, metrics, arts = _RUNNERS[kind](fam, params, task_seed, out)
            results.append(TaskResult(name, kind, verdict, metrics, arts))
        except DivergenceError as exc:
            results.append(TaskResult(name, kind, "error", {"error": type(exc).__name__, "message": str(exc)},
                                      diverged=True))
        except (OrbitlabError, ValueError, FloatingPointError) as exc:
            results.append(TaskResult(name, kind, "error", {"error": type(exc).__name__, "message": str(exc)}))
    bundle = AuditBundle(digest(doc), results)
    if root is not None:
        (root / "report.json").write_text(bundle.dumps())
    return bundle


# ------------------------------------------------------------------ built-in scenarios


def _scenario(family: str, tasks: list[dict], seed: int = 0) -> dict:
    return {"schema": SCHEMA_ID, "name": family, "seed": seed, "family": {"builtin": family}, "tasks": tasks}


BUILTIN_SCENARIOS: dict[str, dict] = {
    "example-graph": _scenario("example-graph", [
        {"task": "rank", "name": "rank", "params": {"points": [[0, 0], [0, 1], [0, -1], [0.5, 0.8]],
                                                    "expect": [1, 2, 2, 2]}},
        {"task": "flow", "name": "confinement", "params": {"x0": [0, 0], "T": 1.0, "paths": 20,
                                                           "invariant": "x2 - x1*abs(x1)", "tol": 1e-5}},
        {"task": "orbit", "name": "orbit-origin", "params": {"x0": [0, 0], "depth": 5}},
        {"task": "involutivity", "name": "involutivity", "params": {"box": [[-1, 1], [-1, 1]], "samples": 500}},
        {"task": "chart", "name": "chart", "params": {"x0": [0.5, 0.8], "delta": 0.1}},
        {"task": "stability", "name": "stability", "params": {"x0": [0.5, 0.8], "paths": 20, "T": 0.25}},
    ]),
    "balan": _scenario("balan", [
        {"task": "rank", "name": "rank", "params": {"points": [[0, 0], [0, 1], [0.5, 0.5]], "expect": [0, 2, 2]}},
        {"task": "involutivity", "name": "involutivity",
         "params": {"box": [[-1, 1], [-1, 1]], "samples": 2000, "nested": 2}},
    ]),
    "counterexample": _scenario("counterexample", [
        {"task": "orbit", "name": "orbit", "params": {"x0": [-0.5, 0], "h_mov": 0.25, "depth": 5}},
        {"task": "involutivity", "name": "involutivity", "params": {"box": [[-1, 1], [-1, 1]], "samples": 500}},
        {"task": "chart", "name": "chart", "params": {"x0": [-0.5, 0], "p": 1, "delta": 0.5, "sigma": 0.4}},
    ]),
    "plane": _scenario("plane", [
        {"task": "ccdist", "name": "distance", "params": {"x": [0, 0], "y": [3, 4], "expect": [5.0, 5.05]}},
        {"task": "involutivity", "name": "involutivity", "params": {"box": [[-1, 1], [-1, 1]], "samples": 200}},
        {"task": "report", "name": "friedrichs", "params": {"box": [[0.2, 1], [0.2, 1]], "samples": 8}},
    ]),
    "rotation": _scenario("rotation", [
        {"task": "orbit", "name": "orbit", "params": {"x0": [1, 0], "depth": 5}},
        {"task": "rank", "name": "rank", "params": {"points": [[0, 0], [1, 0]], "expect": [0, 1]}},
    ]),
    "grushin": _scenario("grushin", [
        {"task": "rank", "name": "rank", "params": {"points": [[0, 0], [1, 0]], "expect": [1, 2]}},
        {"task": "orbit", "name": "orbit", "params": {"x0": [0, 0], "depth": 4}},
        {"task": "ccdist", "name": "distance", "params": {"x": [0, 0], "y": [1, 0.5], "restarts": 2}},
    ]),
}


def builtin_scenario(name: str) -> dict:
    try:
        return copy.deepcopy(BUILTIN_SCENARIOS[name])
    except KeyError:
        raise ScenarioError(f"unknown built-in scenario {name!r}; known: {', '.join(BUILTIN_SCENARIOS)}",
                            "") from None
