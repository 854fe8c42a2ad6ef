"""Experiment orchestration and the ``exceedmc`` command line.

A run is described by a JSON config validated against :data:`CONFIG_SCHEMA`
(unknown keys are rejected).  Each experiment produces a list of
:class:`ResultRow` objects, written as CSV or JSON together with the fully
resolved config.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .estimators import (
    BoundaryEvent,
    EstimateReport,
    TailEvent,
    estimate_boundary,
    estimate_direct,
    estimate_first_passage,
    estimate_tail,
    exact_probability_oracle,
    exact_tail_moments,
    make_g,
)
from .exp_family import IidModel, gaussian_model, lattice_model, tilt_for_mean
from .markov_additive import MarkovAdditiveModel, example1_model, example2_model, perron
from .mixing import (
    MixtureSpec,
    build_boundary_grid_mixture,
    build_finite_mixture,
    build_regime_mixture,
    build_tail_grid_mixture,
    build_tilt_mixture,
)
from .regeneration import verify_martingale_exact

logger = logging.getLogger(__name__)

__all__ = [
    "CONFIG_SCHEMA",
    "COLUMNS",
    "ConfigError",
    "ResultRow",
    "COUNTEREXAMPLE_MODEL",
    "blowup_condition",
    "build_model",
    "counterexample_demo",
    "default_config",
    "emit_report",
    "format_display",
    "load_config",
    "main",
    "parse_report",
    "resolve_config",
    "run_experiment",
]

DEFAULT_SEED = 20240501
TABLE1_N = [10, 20, 40, 60, 80, 100]
TABLE2_ROWS = [[20, 5, 50], [25, 5, 50], [30, 5, 50], [35, 5, 50],
               [40, 10, 100], [50, 10, 100], [60, 10, 100], [70, 10, 100]]
# Asymmetric three-point lattice found by grid search: tilting to the cheaper
# level a gives theta_a + theta_{-a} > 0, so the single tilt blows up.
COUNTEREXAMPLE_MODEL = {"type": "iid-lattice", "support": [-2, 0, 1], "probs": [0.3, 0.05, 0.65]}
COUNTEREXAMPLE_LEVEL = 0.5
COUNTEREXAMPLE_LADDER = [20, 30, 40, 60]

COLUMNS = ["experiment_id", "method", "n_or_c", "estimate", "std_error", "runs", "seconds",
           "second_moment_ratio", "truncations", "seed", "display"]


class ConfigError(ValueError):
    """Invalid experiment config (reported before any simulation)."""


# --- config -----------------------------------------------------------------------

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_NUM_LIST = {"type": "array", "items": _NUM}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["type"],
            "properties": {
                "type": {"enum": ["iid-gaussian", "iid-lattice", "markov-additive"]},
                "preset": {"enum": ["example1", "example2"]},
                "mean": _NUM_LIST,
                "support": {"type": "array"},
                "probs": _NUM_LIST,
                "transition": {"type": "array", "items": _NUM_LIST},
                "offsets": {"type": "array"},
                "emission": {"enum": ["deterministic", "gaussian"]},
                "initial": {"oneOf": [{"const": "stationary"}, _INT]},
            },
        },
        "experiment": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["table1", "table2", "counterexample", "estimate", "verify"]},
                "id": {"type": "string"},
                "n_values": {"type": "array", "items": _INT},
                "rows": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}},
                "b": _NUM,
                "level": _NUM,
                "ladder": {"type": "array", "items": _INT},
                "methods": {"type": "array", "items": {"type": "string"}},
                "weight_rates": _NUM_LIST,
                "event": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["type"],
                    "properties": {
                        "type": {"enum": ["tail", "boundary", "first-passage"]},
                        "n": _INT, "b": _NUM, "c": _NUM, "n0": _INT, "n1": _INT,
                        "g": {"enum": ["identity", "sqnorm", "abs", "max", "squared-deviation", "linear"]},
                        "center": {"oneOf": [_NUM, _NUM_LIST]},
                        "normal": _NUM_LIST,
                        "boundary": {"enum": ["level", "halfspace", "max"]},
                        "weights": _NUM_LIST,
                        "max_steps": _INT,
                    },
                },
                "method": {"enum": ["direct", "single-tilt", "finite-mixture", "grid-mixture", "first-passage"]},
                "mixture": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "flavor": {"enum": ["tail-grid", "boundary-grid", "regime-grid", "finite"]},
                        "mus": {"type": "array"},
                        "mu": {"oneOf": [_NUM, _NUM_LIST]},
                        "theta": {"oneOf": [_NUM, _NUM_LIST]},
                        "weights": {"oneOf": [{"const": "exponential"}, _NUM_LIST]},
                        "rates": _NUM_LIST,
                        "spacing": _NUM,
                        "box": {"type": "array", "items": _NUM_LIST, "minItems": 2, "maxItems": 2},
                        "b": _NUM,
                        "delta": _NUM, "r": _NUM, "eps0": _NUM, "eps1": _NUM,
                        "phi_threshold_star": _NUM, "phi_threshold_mass": _NUM,
                    },
                },
            },
        },
        "runs": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"path": {"type": "string"}, "format": {"enum": ["csv", "json"]}},
        },
    },
}


def default_config(kind: str) -> dict:
    """Fully populated config for one of the built-in experiments."""
    base = {"runs": 10_000, "seed": DEFAULT_SEED, "workers": 1, "output": {"format": "csv"}}
    if kind == "table1":
        base["model"] = {"type": "markov-additive", "preset": "example1"}
        base["experiment"] = {"kind": "table1", "id": "table1", "n_values": list(TABLE1_N),
                              "methods": ["direct", "single-tilt", "mixture"]}
    elif kind == "table2":
        base["model"] = {"type": "markov-additive", "preset": "example2"}
        base["experiment"] = {"kind": "table2", "id": "table2", "rows": copy.deepcopy(TABLE2_ROWS), "b": 7.0,
                              "methods": ["direct", "importance"]}
    elif kind == "counterexample":
        base["model"] = copy.deepcopy(COUNTEREXAMPLE_MODEL)
        base["experiment"] = {"kind": "counterexample", "id": "counterexample", "level": COUNTEREXAMPLE_LEVEL,
                              "ladder": list(COUNTEREXAMPLE_LADDER)}
    elif kind == "verify":
        base["model"] = {"type": "markov-additive", "preset": "example1"}
        base["experiment"] = {"kind": "verify", "id": "verify"}
    elif kind == "estimate":
        base["experiment"] = {"kind": "estimate", "id": "estimate"}
    else:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    return base


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(config: dict, kind: Optional[str] = None) -> dict:
    """Validate ``config`` and fill every default, so the result documents the run."""
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    given = config.get("experiment", {}).get("kind")
    if kind is not None and given is not None and given != kind:
        raise ConfigError(f"config describes a {given!r} experiment, not {kind!r}")
    kind = kind or given
    if kind is None:
        raise ConfigError("experiment.kind is required")
    base = default_config(kind)
    if "model" in config and config["model"].get("type") != base.get("model", {}).get("type"):
        base.pop("model", None)
    resolved = _merge(base, config)
    resolved["experiment"]["kind"] = kind
    if "model" not in resolved:
        raise ConfigError("a model block is required")
    build_model(resolved["model"])  # surfaces model errors before simulating
    if kind == "estimate":
        exp = resolved["experiment"]
        if "event" not in exp:
            raise ConfigError("estimate needs an experiment.event block")
        exp.setdefault("method", "first-passage" if exp["event"]["type"] == "first-passage" else "direct")
    return resolved


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def build_model(spec: dict):
    """Model object for a ``model`` config block."""
    kind = spec["type"]
    try:
        if kind == "iid-gaussian":
            return gaussian_model(spec["mean"])
        if kind == "iid-lattice":
            return lattice_model(spec["support"], spec["probs"])
        initial = spec.get("initial", "stationary")
        preset = spec.get("preset")
        if preset == "example1":
            return example1_model(initial)
        if preset == "example2":
            return example2_model(initial)
        return MarkovAdditiveModel(np.asarray(spec["transition"], dtype=float), np.asarray(spec["offsets"], dtype=float),
                                   spec.get("emission", "deterministic"), initial)
    except KeyError as exc:
        raise ConfigError(f"model block of type {kind!r} is missing {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(f"invalid model: {exc}") from None


# --- rows and formatting ----------------------------------------------------------

_SUPERSCRIPT = str.maketrans("-0123456789", "⁻⁰¹²³⁴⁵⁶⁷⁸⁹")


def format_display(estimate: float, std_error: float) -> str:
    """Mantissa(s.e.)×10^k with the s.e. rounded to one significant digit.

    Example:
        >>> format_display(0.0319, 0.0005)
        '3.19(0.05)×10⁻²'
    """
    if not math.isfinite(estimate):
        return "nan"
    if estimate == 0:
        return "0"
    k = math.floor(math.log10(abs(estimate)))
    mant, se = estimate / 10 ** k, std_error / 10 ** k
    if se > 0 and math.isfinite(se):
        dec = max(0, -math.floor(math.log10(float(f"{se:.0e}"))))
    else:
        dec = 2
    if abs(float(f"{mant:.{dec}f}")) >= 10:
        # mantissa rounds up to 10: shift the exponent, keep the digit count
        k += 1
        mant, se = math.copysign(1.0, mant), se / 10
        dec += 1
    body = f"{mant:.{dec}f}({se:.{dec}f})" if se > 0 and math.isfinite(se) else f"{mant:.{dec}f}"
    return body if k == 0 else f"{body}×10{str(k).translate(_SUPERSCRIPT)}"


@dataclass
class ResultRow:
    experiment_id: str
    method: str
    n_or_c: float
    estimate: float
    std_error: float
    runs: int
    seconds: float
    second_moment_ratio: float
    truncations: int
    seed: int
    display: str

    def __post_init__(self):
        for f in dataclasses.fields(self):
            kind = {"float": float, "int": int, "str": str}[f.type]
            object.__setattr__(self, f.name, kind(getattr(self, f.name)))

    @classmethod
    def from_report(cls, experiment_id, method, n_or_c, report: EstimateReport, reference_p=None):
        ref = report.estimate if reference_p is None else reference_p
        ratio = report.second_moment / ref ** 2 if ref > 0 else float("nan")
        return cls(experiment_id, method, n_or_c, report.estimate, report.std_error, report.runs, report.seconds,
                   ratio, report.truncations, report.seed, format_display(report.estimate, report.std_error))

    @classmethod
    def failed(cls, experiment_id, method, n_or_c, seed, exc: Exception):
        nan = float("nan")
        return cls(experiment_id, method, n_or_c, nan, nan, 0, 0.0, nan, 0, seed, f"error: {exc}")


def emit_report(rows, fmt: str = "csv", path=None, config: Optional[dict] = None) -> str:
    """Write rows as CSV (header + one line per row) or a JSON array.

    The resolved config goes into the JSON document (``{"config", "rows"}``)
    or, for CSV written to a file, into ``<path>.config.json``.  Returns the
    main document as text; ``path=None`` only returns it.
    """
    records = [dataclasses.asdict(r) for r in rows]
    if fmt == "csv":
        import io

        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
        text = buf.getvalue()
    elif fmt == "json":
        doc = records if config is None else {"config": config, "rows": records}
        text = json.dumps(doc, indent=2, ensure_ascii=False) + "\n"
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        path = Path(path)
        try:
            path.write_text(text, encoding="utf-8")
            if fmt == "csv" and config is not None:
                Path(f"{path}.config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write report to {path}: {exc.strerror}") from None
    return text


def parse_report(text: str, fmt: str = "json") -> list:
    """Inverse of :func:`emit_report`."""
    if fmt == "json":
        doc = json.loads(text)
        records = doc["rows"] if isinstance(doc, dict) else doc
        return [ResultRow(**rec) for rec in records]
    rows = []
    types = {f.name: f.type for f in dataclasses.fields(ResultRow)}
    for rec in csv.DictReader(text.splitlines()):
        vals = {}
        for k, v in rec.items():
            t = types[k]
            vals[k] = int(v) if t in ("int", int) else float(v) if t in ("float", float) else v
        rows.append(ResultRow(**vals))
    return rows


# --- experiments ------------------------------------------------------------------


def _dump(mixture: MixtureSpec, dump_path, label: str, many: bool):
    if dump_path is None:
        return
    path = Path(dump_path)
    if many:
        path = path.with_name(f"{path.stem}-{label}{path.suffix or '.csv'}")
    rows = mixture.to_rows()
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _table1(cfg, model, dump):
    exp = cfg["experiment"]
    seed, m, workers = cfg["seed"], cfg["runs"], cfg["workers"]
    g = make_g("squared-deviation", center=2.1)
    rows = []
    for n in exp["n_values"]:
        event = TailEvent(n, g, 0.36)
        for i, method in enumerate(exp["methods"]):
            row_seed = seed + 1000 * n + i
            try:
                if method == "direct":
                    rep = estimate_direct(model, event, m, row_seed, workers=workers)
                elif method == "single-tilt":
                    mix = build_finite_mixture(model, [1.5], [1.0])
                    rep = estimate_tail(model, mix, n, event, m, row_seed, workers=workers, method=method)
                elif method == "mixture":
                    mix = build_finite_mixture(model, [1.5, 2.7], "exponential", n=n, rates=exp.get("weight_rates"))
                    _dump(mix, dump, f"n{n}", True)
                    rep = estimate_tail(model, mix, n, event, m, row_seed, workers=workers, method=method)
                else:
                    raise ConfigError(f"unknown table1 method {method!r}")
                rows.append(ResultRow.from_report(exp["id"], method, n, rep))
            except Exception as exc:  # noqa: BLE001 - record the failure, keep going
                logger.error("table1 n=%s %s failed: %s", n, method, exc)
                rows.append(ResultRow.failed(exp["id"], method, n, row_seed, exc))
    return rows


def _table2(cfg, model, dump):
    exp = cfg["experiment"]
    seed, m, workers = cfg["seed"], cfg["runs"], cfg["workers"]
    g = make_g("sqnorm")
    rows = []
    for c, n0, n1 in exp["rows"]:
        n0, n1 = int(n0), int(n1)
        for i, method in enumerate(exp["methods"]):
            row_seed = seed + 1000 * int(c) + i
            try:
                if method == "direct":
                    rep = estimate_direct(model, BoundaryEvent(g, c, n0, n1), m, row_seed, workers=workers)
                elif method == "importance":
                    start = time.perf_counter()
                    mix = build_regime_mixture(model, c, n0, n1, exp["b"])
                    _dump(mix, dump, f"c{c:g}", True)
                    rep = estimate_boundary(model, mix, g, c, n0, n1, m, row_seed, workers=workers)
                    rep.seconds = time.perf_counter() - start
                else:
                    raise ConfigError(f"unknown table2 method {method!r}")
                rows.append(ResultRow.from_report(exp["id"], method, c, rep))
            except Exception as exc:  # noqa: BLE001
                logger.error("table2 c=%s %s failed: %s", c, method, exc)
                rows.append(ResultRow.failed(exp["id"], method, c, row_seed, exc))
    return rows


def blowup_condition(model: IidModel, a: float) -> dict:
    """Tilts and rates at ``±a`` and whether the single-tilt blowup condition holds."""
    tp, tm = tilt_for_mean(model, [a]), tilt_for_mean(model, [-a])
    th_p, th_m = float(tp.theta[0]), float(tm.theta[0])
    return {"theta_a": th_p, "theta_minus_a": th_m, "phi_a": tp.rate, "phi_minus_a": tm.rate,
            "holds": th_p + th_m > 0 and tp.rate < tm.rate}


def counterexample_demo(cfg: dict, dump=None) -> list:
    """Single tilt at the cheaper level versus the two-point mixture on ``{|S_n| >= a n}``.

    For each ``n`` in the ladder emits Monte Carlo rows and exact rows (the
    exact second moment comes from the law of ``S_n``; a Monte Carlo sample
    rarely sees the paths that make the single tilt blow up).
    """
    exp = cfg["experiment"]
    model = build_model(cfg["model"])
    if not isinstance(model, IidModel) or model.dim != 1:
        raise ConfigError("the counterexample needs a one-dimensional i.i.d. model")
    a = float(exp["level"])
    cond = blowup_condition(model, a)
    suffix = "" if cond["holds"] else " (blowup condition unmet)"
    if not cond["holds"]:
        logger.warning("blowup condition unmet: %s", cond)
    # the cheaper of +-a carries the single tilt
    single_mu = a if cond["phi_a"] <= cond["phi_minus_a"] else -a
    tol = 1e-12 * max(1.0, a)

    def region(mu):
        return np.abs(mu[:, 0]) >= a - tol

    rows = []
    seed, m, workers = cfg["seed"], cfg["runs"], cfg["workers"]
    exact_ok = model.family == "lattice" and np.allclose(model.support, np.round(model.support))
    for n in exp["ladder"]:
        single = build_finite_mixture(model, [single_mu], [1.0])
        mix = build_finite_mixture(model, [a, -a], "exponential", n=n)
        _dump(mix, dump, f"n{n}", True)
        ref = exact_tail_moments(model, n, region).probability if exact_ok else None
        for i, (label, spec) in enumerate((("single-tilt", single), ("mixture", mix))):
            row_seed = seed + 1000 * n + i
            try:
                rep = estimate_tail(model, spec, n, TailEvent(n, region=region), m, row_seed, workers=workers,
                                    method=label)
                rows.append(ResultRow.from_report(exp["id"], label + suffix, n, rep, ref))
            except Exception as exc:  # noqa: BLE001
                rows.append(ResultRow.failed(exp["id"], label + suffix, n, row_seed, exc))
            if exact_ok:
                ex = exact_tail_moments(model, n, region, spec)
                rows.append(ResultRow(exp["id"], f"{label}[exact]{suffix}", n, ex.probability, 0.0, 0, 0.0,
                                      ex.second_moment / ex.probability ** 2, 0, row_seed,
                                      format_display(ex.probability, 0.0)))
    return rows


def _estimate(cfg, model, dump):
    exp = cfg["experiment"]
    ev, method = exp["event"], exp["method"]
    seed, m, workers = cfg["seed"], cfg["runs"], cfg["workers"]
    g = None
    if "g" in ev:
        params = {}
        if ev["g"] == "squared-deviation":
            params["center"] = ev.get("center", 0.0)
        if ev["g"] == "linear":
            params["normal"] = ev["normal"]
        g = make_g(ev["g"], **params)
    label = exp["id"]
    if ev["type"] == "first-passage":
        rep = estimate_first_passage(model, ev.get("boundary", "level"), ev["c"], m, seed, normal=ev.get("normal"),
                                     weights=ev.get("weights"), max_steps=ev.get("max_steps"), workers=workers)
        return [ResultRow.from_report(label, rep.method, ev["c"], rep)]
    if ev["type"] == "tail":
        event, size = TailEvent(ev["n"], g, ev["b"]), ev["n"]
    else:
        event, size = BoundaryEvent(g, ev["c"], ev["n0"], ev["n1"]), ev["c"]
    if method == "direct":
        rep = estimate_direct(model, event, m, seed, workers=workers)
        return [ResultRow.from_report(label, "direct", size, rep)]
    mix = _mixture_from_config(model, exp.get("mixture", {}), method, ev, g)
    _dump(mix, dump, "mixture", False)
    if ev["type"] == "tail":
        rep = estimate_tail(model, mix, ev["n"], event, m, seed, workers=workers, method=method)
    else:
        rep = estimate_boundary(model, mix, g, ev["c"], ev["n0"], ev["n1"], m, seed, workers=workers, method=method)
    return [ResultRow.from_report(label, method, size, rep)]


def _mixture_from_config(model, mcfg, method, ev, g) -> MixtureSpec:
    box = mcfg.get("box")
    if method == "single-tilt":
        if "theta" in mcfg:
            return build_tilt_mixture(model, [mcfg["theta"]])
        return build_finite_mixture(model, [mcfg["mu"]], [1.0])
    if method == "finite-mixture":
        return build_finite_mixture(model, mcfg["mus"], mcfg.get("weights", "exponential"),
                                    n=ev.get("n", ev.get("n0")), rates=mcfg.get("rates"))
    flavor = mcfg.get("flavor", "tail-grid" if ev["type"] == "tail" else "boundary-grid")
    if flavor == "tail-grid":
        return build_tail_grid_mixture(model, ev["n"], ev["b"], g, mcfg.get("spacing"), box)
    if flavor == "regime-grid":
        return build_regime_mixture(model, ev["c"], ev["n0"], ev["n1"], mcfg["b"], mcfg.get("spacing"))
    if flavor == "boundary-grid":
        return build_boundary_grid_mixture(
            model, g, ev["c"], ev["n0"], ev["n1"], mcfg.get("delta"), mcfg.get("r", 1.0), mcfg.get("eps0", 0.0),
            mcfg.get("eps1", 0.0), mcfg.get("spacing"), box, mcfg.get("phi_threshold_star"),
            mcfg.get("phi_threshold_mass"))
    raise ConfigError(f"mixture flavor {flavor!r} does not apply to method {method!r}")


def _check_row(exp_id, name, value, limit, seed):
    ok = value <= limit
    return ResultRow(exp_id, name, limit, value, 0.0, 0, 0.0, float("nan"), 0, seed, "pass" if ok else "fail")


def _verify(cfg, model, dump):
    """Exact identities: martingale defects, eigen-residuals, unbiasedness."""
    exp_id, seed = cfg["experiment"]["id"], cfg["seed"]
    rows = []
    mk = example1_model()
    for th in (0.0, -0.50774, 0.81597):
        for variant in ("Z", "W"):
            defect = verify_martingale_exact(mk, [th], lambda t, S, X: S[0] >= 5, horizon=6, variant=variant)
            rows.append(_check_row(exp_id, f"martingale-{variant} example1 theta={th:g}", defect, 1e-10, seed))
        sol = perron(mk, np.array([th]))
        from .markov_additive import tilted_kernel

        resid = float(np.max(np.abs(tilted_kernel(mk, np.array([th])) @ sol.r - sol.eigenvalue * sol.r)))
        rows.append(_check_row(exp_id, f"eigen-residual example1 theta={th:g}", resid, 1e-9, seed))
    two = MarkovAdditiveModel(np.array([[0.7, 0.3], [0.4, 0.6]]), np.array([[[-1.0], [1.0]], [[-1.0], [1.0]]]))
    rows.append(_check_row(exp_id, "martingale-Z two-state T=2", verify_martingale_exact(two, [0.4], 2, horizon=5),
                           1e-10, seed))

    region = lambda mu: (mu[:, 0] >= 2.7 - 1e-12) | (mu[:, 0] <= 1.5 + 1e-12)  # noqa: E731
    g1 = make_g("squared-deviation", center=2.1)
    coin = lattice_model([-1.0, 1.0], [0.5, 0.5])
    cases = [
        ("example1 tail finite", mk, TailEvent(6, region=region), build_finite_mixture(mk, [1.5, 2.7], n=6)),
        ("example1 tail single", mk, TailEvent(6, region=region), build_finite_mixture(mk, [1.5], [1.0])),
        ("example1 tail grid", mk, TailEvent(6, region=region), build_tail_grid_mixture(mk, 6, 0.36, g1)),
        ("example1 boundary finite", mk, BoundaryEvent(make_g("identity"), 13, 2, 5),
         build_finite_mixture(mk, [2.5, 2.8], n=5)),
        ("coin tail grid", coin, TailEvent(6, make_g("abs"), 0.5), build_tail_grid_mixture(coin, 6, 0.5, make_g("abs"),
                                                                                         spacing=0.25)),
        ("coin boundary grid", coin, BoundaryEvent(make_g("identity"), 3, 2, 6),
         build_boundary_grid_mixture(coin, make_g("identity"), 3, 2, 6, spacing=0.25)),
        ("coin boundary single", coin, BoundaryEvent(make_g("identity"), 3, 2, 6), build_finite_mixture(coin, [0.5], [1.0])),
    ]
    for name, mdl, event, mix in cases:
        ex = exact_probability_oracle(mdl, event, mixture=mix)
        rows.append(_check_row(exp_id, f"unbiasedness {name}", abs(ex.weighted - ex.probability), 1e-12, seed))
    return rows


_RUNNERS = {"table1": _table1, "table2": _table2, "estimate": _estimate, "verify": _verify}


def run_experiment(config: dict, dump_mixture=None) -> list:
    """Run one experiment from a (possibly partial) config and return its rows."""
    cfg = resolve_config(config)
    kind = cfg["experiment"]["kind"]
    if kind == "counterexample":
        return counterexample_demo(cfg, dump_mixture)
    return _RUNNERS[kind](cfg, build_model(cfg["model"]), dump_mixture)


# --- command line -----------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exceedmc", description="Importance sampling for exceedance probabilities.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("table1", "three-state chain tail probabilities"),
                            ("table2", "regime-switching Gaussian walk boundary crossing"),
                            ("counterexample", "single tilt versus two-point mixture"),
                            ("estimate", "one user-specified estimate"),
                            ("verify", "exact identity checks")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON config file (required for estimate)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--runs", type=int, help="runs per estimate")
        p.add_argument("--workers", type=int, help="worker threads")
        p.add_argument("--out", type=Path, help="output file (default stdout)")
        p.add_argument("--format", choices=["csv", "json"], help="output format")
        p.add_argument("--dump-mixture", type=Path, metavar="PATH", help="write mixture components as CSV")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = load_config(args.config) if args.config else {}
        if args.command == "estimate" and not raw:
            raise ConfigError("estimate needs --config")
        overrides = {k: v for k, v in (("seed", args.seed), ("runs", args.runs), ("workers", args.workers)) if v is not None}
        raw = _merge(raw, overrides)
        if args.out or args.format:
            raw.setdefault("output", {})
            if args.out:
                raw["output"]["path"] = str(args.out)
            if args.format:
                raw["output"]["format"] = args.format
        cfg = resolve_config(raw, args.command)
    except ConfigError as exc:
        print(f"exceedmc: {exc}", file=sys.stderr)
        return 2
    rows = run_experiment(cfg, args.dump_mixture)
    out = cfg.get("output", {})
    fmt = out.get("format", "csv")
    try:
        text = emit_report(rows, fmt, out.get("path"), cfg)
    except OSError as exc:
        print(f"exceedmc: {exc}", file=sys.stderr)
        return 1
    if out.get("path") is None:
        sys.stdout.write(text)
    if args.command == "verify" and any(r.display == "fail" for r in rows):
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
