"""Command line runner: ``nclab <subcommand> --config FILE --out DIR``.

Subcommands are ``simulate``, ``spectra``, ``cones``, ``llt`` and
``report``. Exit codes: 0 ok, 1 validation failure, 2 compute failure; on a
nonzero exit an error document is printed to stderr as JSON.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
from pathlib import Path
from typing import Dict, List

import jsonschema
import numpy as np
import scipy

from . import __version__
from .errors import NclabError, ValidationError

CACHE_ENV = "NCLAB_CACHE_DIR"

_NUM_LIST = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_T_GRID = {"oneOf": [
    _NUM_LIST,
    {"type": "object", "required": ["start", "stop", "num"],
     "properties": {"start": {"type": "number"}, "stop": {"type": "number"},
                    "num": {"type": "integer", "minimum": 1}, "unit": {"enum": ["pi", "one"]}}},
]}
_TOWER = {"type": "object", "properties": {
    "preset": {"enum": ["golden", "tall"]}, "depth": {"type": "integer", "minimum": 1, "maximum": 12},
    "return_times": {"type": "array", "items": {"type": "integer", "minimum": 1}},
    "masses": _NUM_LIST, "beta": {"type": "number"}}}
_MODEL = {"type": "object", "required": ["kind"],
          "properties": {"kind": {"enum": ["chain", "iid", "two_state", "bernoulli"]}}}

SCHEMAS: Dict[str, Dict] = {
    "simulate": {"type": "object", "required": ["seed", "model", "n_steps"], "properties": {
        "seed": {"type": "integer"}, "model": _MODEL, "n_steps": {"type": "integer", "minimum": 1},
        "r_list": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "p": {"type": "number", "minimum": 1}, "phi_lags": {"type": "array", "items": {"type": "integer", "minimum": 1}}}},
    "spectra": {"type": "object", "required": ["seed", "tower", "t_grid"], "properties": {
        "seed": {"type": "integer"}, "tower": _TOWER, "t_grid": _T_GRID,
        "periodic_word": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "rpf": {"type": "object", "properties": {"n": {"type": "integer", "minimum": 1},
                                                 "step": {"type": "integer", "minimum": 1}}}}},
    "cones": {"type": "object", "required": ["seed", "tower"], "properties": {
        "seed": {"type": "integer"}, "tower": _TOWER,
        "cone": {"type": "object", "properties": {"s": {"type": "integer", "minimum": 1},
                                                  "epsilon0": {"type": "number"}, "sigma": {"type": "number"},
                                                  "scale": {"type": "number"}}},
        "battery": {"type": "integer", "minimum": 2}, "k_max": {"type": "integer", "minimum": 0},
        "z_grid": _NUM_LIST, "env_cell": {"type": "array", "items": {"type": "integer", "minimum": 0}}}},
    "llt": {"type": "object", "required": ["seed", "model", "index_family", "observable", "horizons", "t_grid", "samples"],
            "properties": {
                "seed": {"type": "integer"}, "model": _MODEL,
                "index_family": {"type": "object", "required": ["coeffs"],
                                 "properties": {"coeffs": {"type": "array", "items": {"type": "array"}},
                                                "k": {"type": "integer", "minimum": 0}}},
                "observable": {"type": "object", "required": ["kind"]},
                "horizons": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 4},
                "t_grid": _T_GRID,
                "samples": {"type": "object", "required": ["M"], "properties": {"M": {"type": "integer", "minimum": 1}}},
                "llt": {"type": "object", "properties": {
                    "regime": {"enum": ["DecRate1", "DecRate2", "DecRate3"]}, "delta": {"type": "number"},
                    "mode": {"enum": ["lattice", "box", "triangle"]}, "D2": {"type": ["number", "null"]},
                    "lclt_horizons": {"type": "array", "items": {"type": "integer", "minimum": 1}}}}}},
    "report": {"type": "object", "required": ["inputs"], "properties": {
        "inputs": {"type": "array", "items": {"type": "string"}, "minItems": 1}}},
}


def config_hash(cfg: Dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_default) + "\n")


def _default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(type(x))


def _t_grid(spec) -> np.ndarray:
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    scale = math.pi if spec.get("unit", "one") == "pi" else 1.0
    return np.linspace(spec["start"] * scale, spec["stop"] * scale, int(spec["num"]))


def _tower(spec: Dict):
    from .tower_core import TowerSpec, build_tower, golden_spec, tall_spec

    preset = spec.get("preset")
    depth = spec.get("depth")
    if preset == "golden":
        ts = golden_spec(depth or 8)
    elif preset == "tall":
        ts = tall_spec(depth or 4)
    else:
        if "return_times" not in spec or "masses" not in spec:
            raise ValidationError("tower needs a preset or return_times and masses")
        ts = TowerSpec(tuple(spec["return_times"]), tuple(spec["masses"]), spec.get("beta", 0.5), depth=depth or 6)
    tower = build_tower(ts)
    cache = os.environ.get(CACHE_ENV)
    if cache:
        key = config_hash({"R": list(map(int, ts.return_times)), "w": list(map(float, ts.masses)),
                           "beta": ts.beta, "depth": ts.depth})
        path = Path(cache) / f"h0_{key}.npy"
        if path.exists():
            h0 = np.load(path)
            if h0.shape == (tower.n_cells,):
                tower._h0 = h0
        else:
            Path(cache).mkdir(parents=True, exist_ok=True)
            np.save(path, tower.h0)
    return tower


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def run_simulate(cfg: Dict, out: Path, threads: int) -> Dict[str, str]:
    from .process_models import (BernoulliFunctional, build_bernoulli, estimate_beta, export_trajectory,
                                 model_from_config, phi_report, simulate_chain)

    model = model_from_config(cfg["model"])
    n = int(cfg["n_steps"])
    seed = int(cfg["seed"])
    status = {}
    if isinstance(model, BernoulliFunctional):
        r_list = cfg.get("r_list", [0, 1, 2, 4, 8])
        traj = build_bernoulli(model, n, r_list, seed)
        export_trajectory(traj.primary, str(out / "trajectory.csv"))
        rep = estimate_beta(traj, float(cfg.get("p", 2.0)))
    else:
        states = simulate_chain(model, n, seed)
        export_trajectory(model.values[states], str(out / "trajectory.csv"))
        rep = phi_report(model, cfg.get("phi_lags", [1, 2, 4, 8, 16]))
    (out / "mixing.json").write_text(rep.to_json() + "\n")
    status["simulate"] = "ok"
    return status


def run_spectra(cfg: Dict, out: Path, threads: int) -> Dict[str, str]:
    from .tower_core import periodic_point
    from .transfer_ops import (golden_observable, periodic_operator, pressure, sample_environment,
                               spectral_radius)

    tower = _tower(cfg["tower"])
    G = golden_observable(tower)
    word = cfg.get("periodic_word", [0])
    x, k, n0 = periodic_point(tower, word)
    entries = []
    for t in _t_grid(cfg["t_grid"]):
        rep = spectral_radius(periodic_operator(tower, G, (x, k), n0, float(t)), seed=int(cfg["seed"]))
        entries.append({"t": float(t), **rep})
    _dump(out / "spectra.json", {"periodic_word": word, "period": n0, "entries": entries})
    rp = cfg.get("rpf", {})
    n, step = int(rp.get("n", 32)), int(rp.get("step", 2))
    env = sample_environment(tower, 2, n + 80, int(cfg["seed"]))
    us = [G.centered_last(tower, a) for a in env]
    lam = complex(np.exp(pressure(tower, 0.0, us, step, n) / n))
    _dump(out / "rpf.json", {"n": n, "step": step, "lambda0_geometric_mean": [lam.real, lam.imag]})
    tower.to_csv(tower.h0, str(out / "density.csv"))
    return {"spectra": "ok", "rpf": "ok"}


def run_cones(cfg: Dict, out: Path, threads: int) -> Dict[str, str]:
    from .cone_lab import (FunctionalFamily, comparison_condition, cone_invariance_search, default_params,
                           real_membership, sample_members)
    from .transfer_ops import golden_observable

    tower = _tower(cfg["tower"])
    cs = cfg.get("cone", {})
    cp = default_params(tower, s=int(cs.get("s", 2)), epsilon0=float(cs.get("epsilon0", 0.6)),
                        sigma=float(cs.get("sigma", 0.5)), scale=float(cs.get("scale", 4.0)))
    fam = FunctionalFamily(tower, cp)
    seed = int(cfg["seed"])
    h_in, h_why = real_membership(tower.h, cp, fam)
    one_in, one_why = real_membership(np.ones(tower.n_cells), cp, fam)
    battery = sample_members(tower, cp, fam, int(cfg.get("battery", 200)), seed)
    inv = cone_invariance_search(tower, cp, fam, cp.sigma, int(cfg.get("k_max", 16)), battery, seed)
    G = golden_observable(tower)
    u = G.centered_last(tower, tuple(cfg.get("env_cell", [0])))
    certs = []
    for z in cfg.get("z_grid", [1e-3, 1e-2, 1e-1]):
        c = comparison_condition(tower, cp, fam, complex(z), max(inv.k0, 1), [u] * max(inv.k0, 1), 2,
                                 battery, inv.d0, seed)
        certs.append(json.loads(c.to_json()))
    _dump(out / "certificates.json", {"h_member": h_in, "h_reasons": h_why, "one_member": one_in,
                                      "one_reasons": one_why, "k0": inv.k0, "d0": inv.d0,
                                      "member_fraction": inv.member_fraction, "certificates": certs,
                                      "params": cp.summary()})
    return {"cones": "ok", "certificates": "pass" if all(c["passed"] for c in certs) else "fail"}


def _index_family(spec: Dict):
    from .noncon_engine import IndexFamily

    return IndexFamily.polynomial(spec["coeffs"], k=spec.get("k"), alpha=float(spec.get("alpha", 0.5)))


def run_llt(cfg: Dict, out: Path, threads: int) -> Dict[str, str]:
    from .llt_harness import CharFnTable, _charfn_from_samples, charfn_csv, check_decrate, clt_test, lclt_test
    from .noncon_engine import (FiniteMeasure, asymptotic_variance, decompose, observable_from_config,
                                sample_sums, zeta)
    from .process_models import model_from_config

    model = model_from_config(cfg["model"])
    q = _index_family(cfg["index_family"])
    G = observable_from_config(cfg["observable"])
    if G.ell != q.ell:
        raise ValidationError("observable and index family disagree on ell")
    seed = int(cfg["seed"])
    M = int(cfg["samples"]["M"])
    horizons = sorted(int(n) for n in cfg["horizons"])
    t = _t_grid(cfg["t_grid"])
    opts = cfg.get("llt", {})
    mu = FiniteMeasure.from_model(model)
    dec = decompose(G, mu, k=q.k)
    lclt_h = sorted(int(n) for n in opts.get("lclt_horizons", [horizons[0], horizons[-1]]))
    all_h = sorted(set(horizons) | set(lclt_h))
    S = sample_sums(model, q, G, all_h, M, seed, threads=threads)
    col = {n: i for i, n in enumerate(all_h)}
    ci = 3.0 / math.sqrt(M)
    tables = [CharFnTable(t, _charfn_from_samples(S[:, col[n]], t), ci, n, M) for n in horizons]
    charfn_csv(tables, str(out / "charfn.csv"))
    regime = opts.get("regime", "DecRate3" if G.integer_valued else "DecRate2")
    delta = float(opts.get("delta", 0.5))
    zmax = None
    if regime == "DecRate3":
        win = t[(np.abs(t) >= delta) & (np.abs(t) <= math.pi + 1e-12)]
        zmax = float(np.max(zeta(G, mu, win))) if win.size else None
    rep = check_decrate(tables, regime, delta=delta, zeta_max=zmax)
    (out / "decrate.json").write_text(rep.to_json() + "\n")
    D2 = opts.get("D2")
    if D2 is None:
        D2 = asymptotic_variance(model, q, G, horizons, min(M, 20000), seed + 1, mu=mu).extrapolated
    sub = S[:, [col[n] for n in lclt_h]]
    status = {"charfn": "ok", "decrate": "pass" if rep.passed else "fail"}
    lt = lclt_test(model, q, G, lclt_h, float(D2), dec.g_bar, M, seed, mode=opts.get("mode", "lattice"),
                   samples=sub)
    lt.to_csv(str(out / "lclt.csv"))
    status["lclt"] = "decreasing" if lt.decreasing else "not-decreasing"
    ct = clt_test(model, q, G, horizons, float(D2), dec.g_bar, M, seed, samples=S[:, [col[n] for n in horizons]])
    with open(out / "clt.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["N", "ks", "M", "band"])
        for r in ct.rows:
            wr.writerow([r["N"], repr(r["ks"]), r["M"], repr(r["band"])])
    status["clt"] = "decreasing" if ct.decreasing else "not-decreasing"
    return status


def run_report(cfg: Dict, out: Path, threads: int, base: Path) -> Dict[str, str]:
    docs = {}
    rows: List[List[str]] = []
    for entry in cfg["inputs"]:
        src = (base / entry).resolve() if not os.path.isabs(entry) else Path(entry)
        man = src / "manifest.json"
        if not man.exists():
            raise ValidationError(f"no manifest in {src}")
        m = json.loads(man.read_text())
        key = m.get("subcommand", src.name) + ":" + m.get("config_hash", "")[:12]
        item = {"manifest": {k: m[k] for k in ("subcommand", "config_hash", "status") if k in m}, "outputs": {}}
        for name in sorted(m.get("artifacts", {})):
            if name.endswith(".json"):
                item["outputs"][name] = json.loads((src / name).read_text())
        docs[key] = item
        for task, st in sorted(m.get("status", {}).items()):
            rows.append([key, task, str(st)])
    _dump(out / "report.json", docs)
    with open(out / "report.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["source", "task", "status"])
        wr.writerows(rows)
    return {"report": "ok"}


RUNNERS = {"simulate": run_simulate, "spectra": run_spectra, "cones": run_cones, "llt": run_llt}


def _write_manifest(out: Path, sub: str, cfg: Dict, status: Dict, started: float) -> None:
    artifacts = {p.name: _sha256(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"}
    doc = {
        "subcommand": sub,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed"),
        "versions": {"nclab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_time_s": round(time.time() - started, 3),
        "status": status,
        "artifacts": artifacts,
        "files": sorted(list(artifacts) + ["manifest.json"]),
    }
    _dump(out / "manifest.json", doc)


def run(sub: str, config_path: str, out_dir: str, threads: int = 1, seed_override=None) -> int:
    """Run one subcommand; returns the process exit code."""
    started = time.time()
    try:
        with open(config_path) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise ValidationError("config must be a JSON object")
        if seed_override is not None:
            cfg["seed"] = int(seed_override)
        jsonschema.validate(cfg, SCHEMAS[sub])
    except jsonschema.ValidationError as exc:
        _fail(1, "validation", ValidationError(f"{exc.message} at {list(exc.absolute_path)}"), out_dir)
        return 1
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        _fail(1, "validation", exc, out_dir)
        return 1
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if sub == "report":
            status = run_report(cfg, out, threads, Path(config_path).resolve().parent)
        else:
            status = RUNNERS[sub](cfg, out, threads)
    except ValidationError as exc:
        _fail(1, "validation", exc, out_dir)
        return 1
    except (NclabError, ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        _fail(2, "compute", exc, out_dir)
        return 2
    _write_manifest(out, sub, cfg, status, started)
    return 0


def _fail(code: int, kind: str, exc: Exception, out_dir: str) -> None:
    doc = {"exit_code": code, "kind": kind, "error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nclab", description="Nonconventional limit theorem lab")
    parser.add_argument("subcommand", choices=["simulate", "spectra", "cones", "llt", "report"])
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo chunks")
    parser.add_argument("--seed-override", type=int, default=None, help="replace the config seed")
    args = parser.parse_args(argv)
    if args.threads < 1:
        _fail(1, "validation", ValidationError("--threads must be >= 1"), args.out)
        return 1
    return run(args.subcommand, args.config, args.out, args.threads, args.seed_override)


if __name__ == "__main__":
    sys.exit(main())
