"""Batch runner: `transportlab <experiment> --config run.ini [--seed N] [--threads N] [--out DIR]`.

Config files are INI.  Every experiment reads [model] / [state] / [run]
sections as it needs them; unknown keys are schema errors.  Outputs are
CSV (header row with units) and JSON (carrying the config hash), plus a
gnuplot script and manifest.json.  Two runs of the same (config, seed)
write byte-identical CSV/JSON; only the manifest timestamps move.

Exit codes: 0 ok, 2 config invalid, 3 numeric failure, 4 hypothesis violation.
"""
import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_HYPOTHESIS = 0, 2, 3, 4
EXPERIMENTS = ("bands", "critical", "transfer", "largedev", "tracemap", "moments", "dimer")
COMMANDS = EXPERIMENTS + ("validate", "oracle")

# section -> key -> (parser name, default); default None means required
_COMMON_MODEL = {
    "letter0": ("cell", "step 0"),
    "letter1": ("cell", None),
    "p": ("prob", "0.5"),
    "cells": ("int", "131072"),
}
SCHEMA = {
    "bands": {"model": {"letter0": ("cell", "step 0"), "letter1": ("cell", None)},
              "run": {"window": ("pair", "0, 50"), "spacing": ("pos", "1e-3")}},
    "critical": {"model": {"letter0": ("cell", "step 0"), "letter1": ("cell", None)},
                 "run": {"window": ("pair", "1, 50"), "spacing": ("pos", "1e-3")}},
    "transfer": {"model": dict(_COMMON_MODEL),
                 "run": {"energy": ("float", None), "start": ("int", "0"), "stop": ("int", "10000"),
                         "trials": ("count", "100")}},
    "largedev": {"model": dict(_COMMON_MODEL),
                 "run": {"energy": ("float", None), "window": ("pair", None),
                         "alpha": ("pos", "0.3"), "sizes": ("intlist", "100, 1000, 10000"),
                         "trials": ("count", "1000"), "spot_checks": ("int", "0")}},
    "tracemap": {"model": {"letter0": ("cell", "step 0"), "letter1": ("cell", None)},
                 "run": {"rule": ("rule", "TM"), "level": ("int", None), "window": ("pair", "0, 100"),
                         "max_level": ("count", "20"), "probes": ("count", "1000")}},
    "moments": {"model": dict(_COMMON_MODEL, kind=("modelkind", "random")),
                "state": {"kind": ("statekind", "indicator"), "a": ("float", "0"), "b": ("float", "1"),
                          "mode": ("int", "1"), "value": ("float", "1"), "path": ("path", "")},
                "run": {"ps": ("floatlist", "0, 2"), "t_grid": ("tgrid", "100, 1000, 8"),
                        "line": ("line", "half"), "e_max": ("float", ""), "mean": ("mean", "abelian"),
                        "exterior": ("float", ""), "flag_limit": ("int", "0")}},
    "dimer": {"model": {"lam": ("pos", "0.5"), "p": ("prob", "0.5")},
              "run": {"p_moment": ("pos", "2"), "seeds": ("intlist", None),
                      "t_grid": ("tgrid", "100, 1000, 8")}},
}
SEED_SECTION = {"seed": ("int", "0"), "stream": ("int", "0")}


class ConfigError(ValueError):
    """schema violation; message names the file line when known"""


class HypothesisViolation(RuntimeError):
    pass


# -- config --------------------------------------------------------------------

def _line_of(text, section, key):
    cur = None
    for i, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
        elif cur == section and "=" in s and s.split("=", 1)[0].strip().lower() == key:
            return i
    return None


def _split(v):
    return [t.strip() for t in v.replace(";", ",").split(",") if t.strip()]


def _parse_value(kind, raw):
    if kind in ("float", "pos", "prob"):
        x = float(raw)
        if not math.isfinite(x):
            raise ValueError("must be finite")
        if kind == "pos" and x <= 0:
            raise ValueError("must be positive")
        if kind == "prob" and not 0 < x < 1:
            raise ValueError("must lie in (0, 1)")
        return x
    if kind in ("int", "count"):
        x = int(raw)
        if kind == "count" and x < 1:
            raise ValueError("must be >= 1")
        return x
    if kind == "pair":
        a, b = (float(t) for t in _split(raw))
        if not a < b:
            raise ValueError("need lo < hi")
        return (a, b)
    if kind == "intlist":
        out = [int(t) for t in _split(raw)]
        if not out:
            raise ValueError("empty list")
        return out
    if kind == "floatlist":
        out = [float(t) for t in _split(raw)]
        if not out or any(x < 0 for x in out):
            raise ValueError("need a nonempty list of values >= 0")
        return out
    if kind == "tgrid":
        parts = _split(raw)
        if len(parts) == 0:
            raise ValueError("empty T-grid")
        if len(parts) != 3:
            raise ValueError("T-grid is 'T_lo, T_hi, n'")
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
        if not 0 < lo < hi or n < 2:
            raise ValueError("T-grid needs 0 < T_lo < T_hi and n >= 2")
        return (lo, hi, n)
    if kind == "cell":
        parts = raw.split(None, 1)
        if len(parts) != 2 or parts[0] not in ("step", "profile"):
            raise ValueError("cell is 'step <height>' or 'profile <csv path>'")
        if parts[0] == "step":
            return ("step", float(parts[1]))
        if not os.path.exists(parts[1]):
            raise ValueError(f"file not found: {parts[1]}")
        return ("profile", parts[1])
    if kind == "path":
        if raw and not os.path.exists(raw):
            raise ValueError(f"file not found: {raw}")
        return raw
    choices = {"rule": ("TM", "PD"), "line": ("half", "whole"), "mean": ("abelian", "cesaro"),
               "modelkind": ("random", "free"),
               "statekind": ("indicator", "constant", "sine", "cosine", "profile")}[kind]
    if raw not in choices:
        raise ValueError(f"must be one of {', '.join(choices)}")
    return raw


@dataclass
class ExperimentConfig:
    kind: str
    values: dict
    seed: int
    stream: int
    source_text: str = ""
    path: str = ""
    warnings: list = field(default_factory=list)

    def get(self, section, key):
        return self.values[section][key]

    def canonical(self):
        """Effective settings as sorted JSON; the hash input."""
        vals = {s: {k: v for k, v in sorted(d.items())} for s, d in sorted(self.values.items())}
        return json.dumps({"kind": self.kind, "values": vals, "seed": self.seed,
                           "stream": self.stream}, sort_keys=True, default=list)

    @property
    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def load_config(kind, path=None, text=None, seed=None):
    """Parse and type-check an INI config for experiment `kind`."""
    if kind not in SCHEMA:
        raise ConfigError(f"unknown experiment {kind!r}")
    if text is None:
        if path is None:
            raise ConfigError("--config is required")
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
    where = path or "<config>"
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    schema = dict(SCHEMA[kind], seeds=SEED_SECTION)
    allowed = set(schema) | {"experiment"}
    for sec in cp.sections():
        if sec not in allowed:
            raise ConfigError(f"{where}:{_line_of(text, sec, '') or '?'}: unknown section [{sec}]")
    if cp.has_section("experiment"):
        declared = cp.get("experiment", "kind", fallback=kind).strip()
        if declared != kind:
            raise ConfigError(f"{where}:{_line_of(text, 'experiment', 'kind')}: config is for "
                              f"{declared!r}, not {kind!r}")
    values = {}
    for sec, keys in schema.items():
        got = dict(cp.items(sec)) if cp.has_section(sec) else {}
        for key in got:
            if key not in keys:
                raise ConfigError(f"{where}:{_line_of(text, sec, key)}: unknown key "
                                  f"'{key}' in [{sec}]")
        out = {}
        for key, (ptype, default) in keys.items():
            raw = got.get(key, default)
            if raw is None:
                raise ConfigError(f"{where}: [{sec}] {key} is required")
            raw = raw.strip()
            if raw == "" and default == "":
                out[key] = None
                continue
            try:
                out[key] = _parse_value(ptype, raw)
            except (ValueError, TypeError) as exc:
                line = _line_of(text, sec, key)
                at = f"{where}:{line}" if line else where
                raise ConfigError(f"{at}: [{sec}] {key} = {raw!r}: {exc}") from None
        values[sec] = out
    s = values.pop("seeds")
    cfg = ExperimentConfig(kind, values, int(seed if seed is not None else s["seed"]),
                           int(s["stream"]), text, where)
    return cfg


# -- model builders ----------------------------------------------------------------

def _cell(spec):
    from .transfer import LocalPotential
    kind, arg = spec
    return LocalPotential.step(arg) if kind == "step" else LocalPotential.from_csv(arg)


def _cells(cfg):
    m = cfg.values["model"]
    return _cell(m["letter0"]), _cell(m["letter1"])


def _random_model(cfg, seed):
    from .transfer import PotentialModel
    from .words import BernoulliSource, sample_word
    m = cfg.values["model"]
    L = m["cells"]
    w = sample_word(BernoulliSource(m["p"], seed, cfg.stream), -L, L)
    return PotentialModel(_cells(cfg), w)


def _state(cfg):
    from .dynamics import InitialState
    s = cfg.values["state"]
    k = s["kind"]
    if k == "indicator":
        return InitialState.indicator(s["a"], s["b"])
    if k == "constant":
        return InitialState.constant(s["a"], s["b"], s["value"])
    if k == "sine":
        return InitialState.sine(s["a"], s["b"], s["mode"])
    if k == "cosine":
        return InitialState.cosine(s["a"], s["b"], s["mode"])
    if not s["path"]:
        raise ConfigError("[state] kind = profile needs path")
    return InitialState.from_csv(s["path"])


def _tgrid(g):
    return np.geomspace(g[0], g[1], g[2])


# -- outputs ------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


class Outputs:
    def __init__(self, out_dir, cfg):
        self.dir = out_dir
        self.cfg = cfg
        self.files = {}
        os.makedirs(out_dir, exist_ok=True)

    def _write(self, name, text):
        data = text.encode()
        with open(os.path.join(self.dir, name), "wb") as fh:
            fh.write(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def csv(self, name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        self._write(name, buf.getvalue())

    def json(self, name, payload):
        body = dict(_jsonable(payload), config_hash=self.cfg.digest, experiment=self.cfg.kind)
        self._write(name, json.dumps(body, sort_keys=True, indent=1) + "\n")

    def gnuplot(self, name, data, xcol, ycol, xlabel, ylabel, logscale=""):
        lines = [f"# gnuplot script for {data}", "set datafile separator ','",
                 "set key autotitle columnhead", f"set xlabel '{xlabel}'", f"set ylabel '{ylabel}'"]
        if logscale:
            lines.append(f"set logscale {logscale}")
        lines += ["set terminal pngcairo size 800,600",
                  f"set output '{os.path.splitext(data)[0]}.png'",
                  f"plot '{data}' using {xcol}:{ycol} with linespoints"]
        self._write(name, "\n".join(lines) + "\n")


@dataclass
class RunManifest:
    config_hash: str
    version: str
    experiment: str
    started: str
    finished: str
    seeds: dict
    outputs: dict
    exit_code: int

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True, indent=1) + "\n"


# -- experiments ----------------------------------------------------------------------

def run_bands(cfg, out, threads):
    from .floquet import bands
    lo, hi = cfg.get("run", "window")
    rows = []
    for j, g in enumerate(_cells(cfg)):
        for a, b in bands(g, (lo, hi), cfg.get("run", "spacing")):
            rows.append((j, a, b))
    out.csv("bands.csv", ["letter", "E_lo(energy)", "E_hi(energy)"], rows)
    out.json("bands.json", {"bands": [{"letter": j, "E_lo": a, "E_hi": b} for j, a, b in rows]})
    return {}


def run_critical(cfg, out, threads):
    from .floquet import find_critical_energies
    certs = find_critical_energies(*_cells(cfg), cfg.get("run", "window"),
                                   spacing=cfg.get("run", "spacing"))
    out.csv("critical.csv", ["E0(energy)", "eta0(rad)", "eta1(rad)", "commutator_residual(1)",
                             "condition(1)", "phase_gap_ok"],
            [(c.E0, c.eta0, c.eta1, c.commutator_residual, c.condition, c.phase_gap_ok)
             for c in certs])
    out.json("critical.json", {"critical_energies": [c.E0 for c in certs],
                               "certificates": [c.to_record() for c in certs]})
    return {}


def run_transfer(cfg, out, threads):
    from .transfer import max_transfer_norm
    r = cfg.values["run"]
    rows = []
    for t in range(r["trials"]):
        seed = cfg.seed + t
        model = _random_model(cfg, seed)
        rows.append((t, seed, max_transfer_norm(model, r["energy"], r["start"], r["stop"])))
    out.csv("transfer.csv", ["trial", "seed", "sup_norm(1)"], rows)
    out.json("transfer.json", {"energy": r["energy"], "range": [r["start"], r["stop"]],
                               "sup_norm": max(row[2] for row in rows), "trials": len(rows)})
    return {"trials": [row[1] for row in rows]}


def _nearest_cert(cfg):
    from .floquet import find_critical_energies
    r = cfg.values["run"]
    certs = find_critical_energies(*_cells(cfg), r["window"])
    if not certs:
        raise HypothesisViolation("no critical energy in the window")
    return min(certs, key=lambda c: abs(c.E0 - r["energy"]))


def run_largedev(cfg, out, threads):
    from .pruefer import PrueferCoeffs, excluded_set_estimate
    r = cfg.values["run"]
    cert = _nearest_cert(cfg)
    if not cert.phase_gap_ok:
        raise HypothesisViolation(
            f"large-deviation hypothesis fails at E0 = {cert.E0!r}: eta0 - eta1 is a multiple of pi")
    coeffs = PrueferCoeffs.from_certificate(_cells(cfg), cert)
    rows, recs = [], []
    for N in r["sizes"]:
        st = excluded_set_estimate(coeffs, cfg.get("model", "p"), r["alpha"], N, r["trials"],
                                   cfg.seed, cfg.stream, spot_checks=r["spot_checks"])
        rows.append((N, st.fraction, st.exceed_count, st.trials, st.bound, st.bound_violations,
                     st.max_sum))
        recs.append(st.to_record())
    out.csv("largedev.csv", ["N(cells)", "fraction(1)", "exceed_count", "trials", "C_estimate(1)",
                             "bound_violations", "max_sum(1)"], rows)
    out.json("largedev.json", {"E0": cert.E0, "certificate": cert.to_record(), "stats": recs})
    out.gnuplot("largedev.gp", "largedev.csv", 1, 2, "N", "exceedance fraction", "x")
    return {"trials": [cfg.seed, cfg.stream, cfg.stream + r["trials"] - 1]}


def run_tracemap(cfg, out, threads):
    from .tracemap import certify_growth, find_exceptional
    r = cfg.values["run"]
    g0, g1 = _cells(cfg)
    roots = find_exceptional(r["rule"], g0, g1, k=r["level"], window=r["window"])
    if not roots:
        raise HypothesisViolation("no exceptional energy in the window")
    ee = roots[0]
    rep = certify_growth(ee, g0, g1, max_level=r["max_level"], probes=r["probes"], seed=cfg.seed)
    out.csv("tracemap.csv", ["level", "length(cells)", "sup_norm(1)"],
            list(zip(rep.levels.tolist(), rep.lengths.tolist(), rep.sup_norm.tolist())))
    out.json("tracemap.json", {"roots": [e.to_record() for e in roots], "growth": rep.to_record(),
                               "bounded_ok": rep.bounded_ok(), "linear_ok": rep.linear_ok()})
    out.gnuplot("tracemap.gp", "tracemap.csv", 2, 3, "|x - y|", "sup ||M||", "xy")
    return {}


def run_moments(cfg, out, threads):
    from .dynamics import FlaggedSampleError, fit_beta, moment_curves
    from .transfer import PotentialModel
    m, r = cfg.values["model"], cfg.values["run"]
    f = _state(cfg)
    if m["kind"] == "free":
        model = PotentialModel.free(-m["cells"], m["cells"])
    else:
        model = _random_model(cfg, cfg.seed)
    kw = {"threads": threads}
    if r["e_max"] is not None:
        kw["E_max"] = r["e_max"]
    if r["exterior"] is not None:
        kw["exterior"] = r["exterior"]
    curves = moment_curves(model, f, _tgrid(r["t_grid"]), r["ps"], r["line"], r["mean"], **kw)
    fits, flagged = [], 0
    for c in curves:
        tag = f"p{c.p:g}"
        out.csv(f"moments_{tag}.csv", ["T(time)", "M(length^p)", "err(length^p)"], c.rows())
        out.gnuplot(f"moments_{tag}.gp", f"moments_{tag}.csv", 1, 2, "T", f"M(T, {c.p})", "xy")
        flagged += int(c.flags.sum())
        try:
            fits.append(fit_beta(c).to_record())
        except FlaggedSampleError as exc:
            fits.append({"p": c.p, "error": str(exc)})
        except ValueError as exc:
            fits.append({"p": c.p, "skipped": str(exc)})
    out.json("moments.json", {"norm2": f.norm2(), "fits": fits, "flagged_samples": flagged,
                              "samples": [[s.to_record() for s in c.samples] for c in curves],
                              "note": "beta is a top-decade least-squares slope, not a liminf"})
    if flagged > r["flag_limit"]:
        raise NumericFailure(f"{flagged} flagged samples (limit {r['flag_limit']})")
    return {}


def run_dimer(cfg, out, threads):
    from .discrete import dimer_experiment
    m, r = cfg.values["model"], cfg.values["run"]
    seeds = [s + cfg.seed for s in r["seeds"]]
    rep = dimer_experiment(m["lam"], r["p_moment"], seeds, _tgrid(r["t_grid"]), prob=m["p"],
                           stream_id=cfg.stream)
    out.csv("dimer.csv", ["seed", "beta(1)", "residual(1)", "T_lo(time)", "T_hi(time)"],
            [(s, fit.beta_minus, fit.residual, fit.T_lo, fit.T_hi) for s, fit in zip(seeds, rep.fits)])
    out.json("dimer.json", rep.to_record())
    out.gnuplot("dimer.gp", "dimer.csv", 1, 2, "seed", "beta")
    return {"seeds": seeds}


class NumericFailure(RuntimeError):
    pass


RUNNERS = {"bands": run_bands, "critical": run_critical, "transfer": run_transfer,
           "largedev": run_largedev, "tracemap": run_tracemap, "moments": run_moments,
           "dimer": run_dimer}


def validate(cfg):
    """Schema passed already; physics and fit-window checks. Returns [(level, message)]."""
    issues = []
    v = cfg.values
    if cfg.kind in ("moments", "dimer"):
        lo, hi, n = v["run"]["t_grid"]
        if hi < 10 * lo:
            issues.append(("schema", "T-grid spans less than one decade; no exponent fit possible"))
        if n < 8:
            issues.append(("schema", "T-grid has fewer than 8 samples; no exponent fit possible"))
    if cfg.kind == "dimer":
        lam = v["model"]["lam"]
        if not 0 < lam < 1:
            issues.append(("hypothesis", f"dimer lam = {lam}: E0 = +-lam is critical only for "
                                         "0 < lam < 1"))
    if cfg.kind == "largedev":
        try:
            cert = _nearest_cert(cfg)
        except HypothesisViolation as exc:
            issues.append(("hypothesis", str(exc)))
        else:
            if not cert.phase_gap_ok:
                issues.append(("hypothesis", "large-deviation hypothesis: eta0 - eta1 is a multiple "
                                             f"of pi at E0 = {cert.E0!r}"))
    if cfg.kind == "moments" and v["run"]["line"] == "half":
        s = v["state"]
        if s["kind"] != "profile" and s["a"] < 0:
            issues.append(("schema", "half-line state must be supported in [0, inf)"))
    return issues


# -- oracle suite ------------------------------------------------------------------------

def run_oracles(seed=0):
    """Small cross-checks between independent routes. Returns rows (name, error, tol, ok)."""
    from . import _kernels as K
    from .discrete import (DiscretePotential, DiscreteState, cesaro_discrete_moments, cesaro_exact,
                           discrete_moments, time_side_moments)
    from .dynamics import InitialState, solve_resolvent
    from .tracemap import _trace_gap, direct_blocks, orbit
    from .transfer import LocalPotential, PotentialModel, brute_pair_norm, sup_pair_norm, step_matrix
    rng = np.random.default_rng(seed)
    rows = []
    # energy side vs expm time side
    worst = 0.0
    for _ in range(3):
        n = int(rng.integers(20, 60))
        V = DiscretePotential.explicit(rng.uniform(-1, 1, n), first=-(n // 2))
        f = DiscreteState(tuple(rng.normal(size=2)), first=0)
        for T in (1.0, 10.0):
            a = np.array([s.value for s in discrete_moments(V, f, T, (0, 2),
                                                            window=(V.first, V.last)).samples])
            b = time_side_moments(V, f, T, (0, 2), (V.first, V.last))
            worst = max(worst, float(np.max(np.abs(a / b - 1))))
    rows.append(("kato_identity_discrete", worst, 1e-6, worst <= 1e-6))
    # Chebyshev Cesaro vs eigendecomposition
    V = DiscretePotential.explicit(rng.uniform(-1, 1, 61), first=-30)
    f = DiscreteState.delta(1)
    a = cesaro_discrete_moments(V, f, 5.0, (2,), window=(-30, 30))[0].value
    b = cesaro_exact(V, f, 5.0, (2,), (-30, 30))[0]
    err = abs(a / b - 1)
    rows.append(("cesaro_chebyshev_vs_eigen", err, 1e-9, err <= 1e-9))
    # continuum resolvent vs finite differences, free half line at z = i
    from scipy.linalg import solve_banded
    fi = InitialState.indicator(0, 1)
    sol = solve_resolvent(PotentialModel.free(0, 1024), fi, 1j, 64, "half", x_max=10.0)
    errs = []
    for h in (1 / 400, 1 / 800):
        x = np.arange(1, int(40 / h)) * h
        ab = np.zeros((3, x.size), complex)
        ab[0, 1:] = -1 / h ** 2
        ab[1] = 2 / h ** 2 - 1j
        ab[2, :-1] = -1 / h ** 2
        rhs = ((x >= 0) & (x <= 1)).astype(complex)
        rhs[np.isclose(x, 1.0)] = 0.5   # midpoint value at the jump keeps second order
        u = solve_banded((1, 1), ab, rhs)
        errs.append(u[x <= 10])
    xs = np.arange(1, int(10 * 800) + 1) / 800
    rich = (4 * errs[1][1::2][: errs[0].size] - errs[0]) / 3
    ref_x = xs[1::2][: rich.size]
    got = sol.evaluate(ref_x)[:, 0]
    err = float(np.sqrt(np.sum(np.abs(got - rich) ** 2) / np.sum(np.abs(rich) ** 2)))
    rows.append(("resolvent_vs_finite_difference", err, 1e-6, err <= 1e-6))
    # trace recursion vs direct products
    g0, g1 = LocalPotential.step(0.0), LocalPotential.step(1.0)
    o = orbit("TM", g0, g1, 5.0, 12)
    gap = max(_trace_gap(o.xk(k), direct_blocks("TM", g0, g1, 5.0, k)[0]) for k in range(13))
    rows.append(("trace_map_vs_products", gap, 1e-9, gap <= 1e-9))
    # hull support sup vs brute pair scan
    mats = np.array([step_matrix(9.0, 0.0), step_matrix(9.0, 1.0)])
    letters = rng.integers(0, 2, 400).astype(np.uint8)
    prods = K.indexed_prefix_products(np.ascontiguousarray(mats), letters, 64)
    a, b = sup_pair_norm(prods), brute_pair_norm(prods)
    err = abs(a / b - 1)
    rows.append(("pair_sup_hull_vs_brute", err, 1e-10, err <= 1e-10))
    return rows


# -- entry point ---------------------------------------------------------------------------

def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_parser():
    ap = argparse.ArgumentParser(prog="transportlab", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", metavar="PATH")
    ap.add_argument("--seed", type=int, metavar="N")
    ap.add_argument("--threads", type=int, default=1, metavar="N")
    ap.add_argument("--out", default="out", metavar="DIR")
    ap.add_argument("--kind", choices=EXPERIMENTS, help="experiment kind for validate")
    return ap


def _kind_from_text(path):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read(path)
        return cp.get("experiment", "kind").strip()
    except (configparser.Error, OSError):
        return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "oracle":
        started = _now()
        try:
            rows = run_oracles(args.seed or 0)
        except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            print(f"numeric failure in oracle: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        cfg = ExperimentConfig("oracle", {}, args.seed or 0, 0)
        out = Outputs(args.out, cfg)
        out.csv("oracle.csv", ["check", "error(1)", "tolerance(1)", "ok"], rows)
        ok = all(r[3] for r in rows)
        out.json("oracle.json", {"checks": [dict(zip(("check", "error", "tol", "ok"), r))
                                            for r in rows], "all_ok": ok})
        code = EXIT_OK if ok else EXIT_NUMERIC
        _manifest(out, cfg, started, {"oracle": cfg.seed}, code)
        for r in rows:
            print(f"{'PASS' if r[3] else 'FAIL'} {r[0]}: {r[1]:.3e} (tol {r[2]:.0e})")
        return code
    kind = args.command
    if kind == "validate":
        kind = args.kind or (_kind_from_text(args.config) if args.config else None)
        if kind not in EXPERIMENTS:
            print("error: validate needs --kind or [experiment] kind in the config", file=sys.stderr)
            return EXIT_CONFIG
    try:
        cfg = load_config(kind, args.config, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        issues = validate(cfg)
        for level, msg in issues:
            print(f"{level}: {msg}")
        if not issues:
            print("ok")
        if any(lv == "schema" for lv, _ in issues):
            return EXIT_CONFIG
        return EXIT_HYPOTHESIS if issues else EXIT_OK
    started = _now()
    out = Outputs(args.out, cfg)
    code = EXIT_OK
    seeds = {"seed": cfg.seed, "stream": cfg.stream}
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            seeds.update(RUNNERS[kind](cfg, out, args.threads))
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    except HypothesisViolation as exc:
        print(f"hypothesis violation: {exc}", file=sys.stderr)
        code = EXIT_HYPOTHESIS
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except (ArithmeticError, NumericFailure, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numeric failure in {kind}: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    _manifest(out, cfg, started, seeds, code)
    return code


def _manifest(out, cfg, started, seeds, code):
    man = RunManifest(cfg.digest, __version__, cfg.kind, started, _now(), _jsonable(seeds),
                      dict(sorted(out.files.items())), code)
    with open(os.path.join(out.dir, "manifest.json"), "w") as fh:
        fh.write(man.to_json())
    return man


if __name__ == "__main__":
    sys.exit(main())
