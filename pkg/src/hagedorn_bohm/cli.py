"""Experiment runner.

    hagedorn-bohm run --config exp.cfg [--seed N] [--workers N] [--out DIR]
    hagedorn-bohm sweep --config exp.cfg --eps 0.2,0.1,0.05,0.025

Configs are flat ``key = value`` files; ``#`` starts a comment.  Only
``potential`` and ``eps`` are required, see :data:`SCHEMA` for the rest.
Exit status: 0 success, 2 invalid input, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import functools
import hashlib
import json
import logging
import math
import os
import platform
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import ensemble_stats as es
from .bohmian import SemiclassicalBackend, TrajectoryEnsemble, integrate_ensemble, integrate_exact_ensemble
from .classical_flow import ClassicalState, integrate_flow
from .errors import ConfigError, ContractViolation, NumericalAbort
from .hagedorn import PacketParams, as_multi_index
from .potential import PotentialModel
from .reference_solver import GridSpec, compare_norms, wave_from_packet

log = logging.getLogger("hagedorn_bohm")

CHUNK = 256
# keys that change how a run executes but not what it computes
EXECUTION_KEYS = ("out", "workers")
EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 2, 3


# -- configuration --------------------------------------------------------------------

def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class _Field:
    parse: object
    default: str | None
    doc: str


SCHEMA = {
    "potential": _Field(str, None, "free | harmonic | cosine | gaussian_well, or a sum such as cosine+gaussian_well"),
    "potential_params": _Field(str, "", "comma separated; ';' separates summands"),
    "dim": _Field(int, "1", "spatial dimension 1..3"),
    "k": _Field(_ints, "0", "multi-index, one entry per dimension (a single 0 broadcasts)"),
    "eps": _Field(_floats, None, "comma separated semiclassical parameters"),
    "T": _Field(float, "2.0", "horizon"),
    "n_paths": _Field(int, "2000", "Born-sampled paths per eps"),
    "R": _Field(_floats, "1,2,3,4,5", "radius multipliers for coverage and flux bounds"),
    "coverage_R": _Field(float, "2.0", "radius used for the sweep coverage column and good set"),
    "dt_window": _Field(float, "0.25", "half width of the velocity averaging window"),
    "backend": _Field(str, "semiclassical", "semiclassical | exact"),
    "a0": _Field(_floats, "0.5", "initial centre (one value broadcasts)"),
    "eta0": _Field(_floats, "1.0", "initial momentum (one value broadcasts)"),
    "width": _Field(float, "1.0", "A0 = width I, B0 = I / width"),
    "grid_N": _Field(int, "0", "grid points per axis, 0 = automatic"),
    "grid_L": _Field(float, "0", "box half width, 0 = automatic"),
    "grid_dt": _Field(float, "1e-3", "solver time step"),
    "flow_tol": _Field(float, "1e-10", "classical flow tolerance"),
    "path_tol": _Field(float, "1e-9", "Bohmian path tolerance"),
    "n_record": _Field(int, "201", "samples per path on [0, T]"),
    "node_floor": _Field(float, "1e-6", "abort threshold for eps^(d/4) |psi|"),
    "quantile": _Field(float, "0.95", "deviation quantile used for rate fits"),
    "seed": _Field(int, "0", "base seed"),
    "workers": _Field(int, "1", "worker processes for semiclassical ensembles"),
    "out": _Field(str, "out", "output directory"),
    "export_paths": _Field(int, "20", "paths per eps written to paths.csv"),
    "flux": _Field(_bool, "true", "compute flux bounds"),
    "flux_rtol": _Field(float, "0.01", "flux quadrature refinement tolerance"),
}


def parse_config_text(text: str) -> dict:
    raw = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        raw[key] = value
    return raw


def build_config(raw: dict) -> dict:
    """Apply defaults, parse types and check cross-field constraints."""
    cfg = {}
    for key, f in SCHEMA.items():
        text = raw.get(key, f.default)
        if text is None:
            raise ConfigError(f"missing required key {key!r} ({f.doc})")
        try:
            cfg[key] = f.parse(text)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: {exc}") from None
    d = cfg["dim"]
    if d not in (1, 2, 3):
        raise ConfigError("dim must be 1, 2 or 3")
    if not cfg["eps"] or min(cfg["eps"]) <= 0:
        raise ConfigError("eps must be a nonempty list of positive values")
    if cfg["backend"] not in ("semiclassical", "exact"):
        raise ConfigError("backend must be semiclassical or exact")
    if cfg["backend"] == "exact" and d > 2:
        raise ConfigError("exact backend requires dim <= 2")
    for key in ("a0", "eta0"):
        v = cfg[key]
        if len(v) == 1:
            cfg[key] = v * d
        elif len(v) != d:
            raise ConfigError(f"{key} needs 1 or {d} values")
    if cfg["k"] == (0,):
        cfg["k"] = (0,) * d
    if len(cfg["k"]) != d or min(cfg["k"]) < 0:
        raise ConfigError(f"k needs {d} nonnegative entries")
    if cfg["T"] <= 0 or cfg["n_paths"] < 1 or cfg["n_record"] < 3:
        raise ConfigError("T, n_paths and n_record must be positive (n_record >= 3)")
    if not 0 < cfg["dt_window"] <= cfg["T"] / 2:
        raise ConfigError("dt_window must lie in (0, T/2]")
    if cfg["width"] <= 0 or not 0 < cfg["quantile"] < 1 or cfg["workers"] < 1:
        raise ConfigError("width > 0, 0 < quantile < 1 and workers >= 1 required")
    if min(cfg["R"], default=1.0) <= 0 or cfg["coverage_R"] <= 0:
        raise ConfigError("radii must be positive")
    build_potential(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return build_config(parse_config_text(text))


def canonical(cfg: dict) -> str:
    """Normalized key = value text; the hash of this identifies an experiment."""
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(fmt(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)
    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in sorted(cfg) if k not in EXECUTION_KEYS)


def build_potential(cfg: dict) -> PotentialModel:
    names = cfg["potential"].split("+")
    groups = [g for g in cfg["potential_params"].split(";")] if cfg["potential_params"] else []
    try:
        params = [_floats(g) for g in groups]
    except ValueError as exc:
        raise ConfigError(f"potential_params: {exc}") from None
    if len(names) == 1:
        return PotentialModel.create(names[0], cfg["dim"], params[0] if params else ())
    return PotentialModel.create(cfg["potential"], cfg["dim"], params)


def initial_packet(cfg: dict, eps: float) -> PacketParams:
    d = cfg["dim"]
    eye = np.eye(d, dtype=complex)
    return PacketParams(eps, cfg["a0"], cfg["eta0"], cfg["width"] * eye, eye / cfg["width"])


# -- pipeline --------------------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _trajectory(text: str, eps: float):
    cfg = build_config(parse_config_text(text))
    V = build_potential(cfg)
    p0 = initial_packet(cfg, eps)
    return integrate_flow(ClassicalState.from_packet(p0), V, cfg["T"], tol=cfg["flow_tol"])


def _chunk_job(text: str, eps: float, x0: np.ndarray) -> TrajectoryEnsemble:
    # rebuilt from the canonical text so a worker process needs nothing else
    cfg = build_config(parse_config_text(text))
    b = SemiclassicalBackend(_trajectory(text, eps), eps, cfg["k"])
    return integrate_ensemble(b, x0, cfg["T"], cfg["path_tol"], cfg["n_record"], cfg["node_floor"])


def _semiclassical_ensemble(cfg, text, eps, x0):
    chunks = [x0[i:i + CHUNK] for i in range(0, len(x0), CHUNK)]
    if cfg["workers"] == 1 or len(chunks) == 1:
        parts = [_chunk_job(text, eps, c) for c in chunks]
    else:
        with concurrent.futures.ProcessPoolExecutor(cfg["workers"]) as pool:
            parts = list(pool.map(_chunk_job, [text] * len(chunks), [eps] * len(chunks), chunks))
    return TrajectoryEnsemble.concatenate(parts)


def _grid_for(cfg, traj, eps):
    grid = GridSpec.auto(traj, eps, cfg["k"], dt=cfg["grid_dt"])
    if cfg["grid_N"] or cfg["grid_L"]:
        N = (cfg["grid_N"],) * cfg["dim"] if cfg["grid_N"] else grid.N
        L = (cfg["grid_L"],) * cfg["dim"] if cfg["grid_L"] else grid.L
        grid = GridSpec(cfg["dim"], grid.center, L, N, cfg["grid_dt"])
    return grid


def _exact_ensemble(cfg, traj, eps, p0, x0):
    grid = _grid_for(cfg, traj, eps)
    V = traj.V
    T = cfg["T"]
    n_steps = int(round(T / cfg["grid_dt"]))
    n_rk = n_steps // 2
    if n_rk % (cfg["n_record"] - 1):
        raise ConfigError("T / (2 grid_dt) must be a multiple of n_record - 1")
    stride = n_rk // (cfg["n_record"] - 1)
    final = {}

    def at_snapshot(w):
        if abs(w.t - T) < 1e-9 * max(T, 1.0):
            final["wave"] = w
            final["norms"] = compare_norms(w, traj.packet(T, eps), cfg["k"])
            final["norm"] = w.norm()

    w0 = wave_from_packet(grid, p0, cfg["k"], 0.0)
    ens = integrate_exact_ensemble(w0, V, eps, T, x0, cfg["grid_dt"], stride, cfg["node_floor"],
                                   on_snapshot=at_snapshot)
    info = {"grid_N": list(grid.N), "grid_L": list(grid.L), "grid_center": list(grid.center),
            "dt": grid.dt, "norm_T": final["norm"], **final["norms"]}
    return ens, info


def run_eps(cfg: dict, eps: float, index: int) -> tuple[dict, TrajectoryEnsemble]:
    text = canonical(cfg)
    traj = _trajectory(text, eps)
    p0 = initial_packet(cfg, eps)
    k = as_multi_index(cfg["k"], cfg["dim"])
    rng = np.random.default_rng([cfg["seed"], index])
    x0 = es.born_sample(p0, k, cfg["n_paths"], rng)
    if cfg["backend"] == "exact":
        ens, grid_info = _exact_ensemble(cfg, traj, eps, p0, x0)
    else:
        ens, grid_info = _semiclassical_ensemble(cfg, text, eps, x0), None
    res = es.EnsembleResult.from_ensemble(ens, traj, seed=cfg["seed"])
    se = math.sqrt(eps)
    q = cfg["quantile"]
    Rg = cfg["coverage_R"]
    good = res.max_dev <= Rg * se
    vel = res.max_vel_dev[good] / se
    avg = es.averaged_velocity_stat(ens, traj, cfg["dt_window"])[good]
    out = {
        "eps": eps,
        "n_paths": res.n,
        "aborted": res.aborted,
        "q50": res.scaled_quantile(0.5),
        "q95": res.scaled_quantile(0.95),
        f"q{int(round(100 * q))}": res.scaled_quantile(q),
        "coverage": [es.deviation_stat(ens, traj, R) for R in cfg["R"]],
        "coverage_at_R": res.coverage(Rg),
        "velocity_good_max": float(np.max(vel)) if vel.size else None,
        "velocity_good_q95": float(np.quantile(vel, 0.95)) if vel.size else None,
        "averaged_velocity_max": float(np.max(avg)) if avg.size else None,
        "averaged_velocity_limit": Rg * se / cfg["dt_window"],
        "node_proximity": es.node_proximity_stat(ens),
        "remainder_norm_m3": es.remainder_norm(p0, traj.V, 3, k),
        "grid": grid_info,
    }
    bounds = []
    if cfg["flux"]:
        b = SemiclassicalBackend(traj, eps, k)
        for R in cfg["R"]:
            fb = es.flux_bound(b, traj, R, cfg["T"], rtol=cfg["flux_rtol"])
            ex = es.exit_stat(ens, traj, R)
            bounds.append({**fb, "exit_prob": ex["prob"], "exit_sigma": ex["sigma"]})
    out["bounds"] = bounds
    return out, ens


def sweep_fits(results: list[dict], cfg: dict) -> dict:
    eps = [r["eps"] for r in results]
    if len(eps) < 4:
        warnings.warn("fewer than 4 eps values; slope rows omitted", stacklevel=2)
        return {}
    series = {"q95": [r["q95"] for r in results],
              "remainder_norm_m3": [r["remainder_norm_m3"] for r in results]}
    if all(r["grid"] for r in results):
        for key in ("L2_diff", "Linf_diff", "Linf_grad_diff"):
            series[key] = [r["grid"][key] for r in results]
    fits = {}
    for name, vals in series.items():
        if max(vals) < 1e-12:
            warnings.warn(f"{name} is at rounding level; no rate fit", stacklevel=2)
            continue
        try:
            f = es.rate_fit(vals, eps)
        except ContractViolation as exc:
            warnings.warn(f"rate fit for {name} skipped: {exc}", stacklevel=2)
            continue
        fits[name] = {"slope": f.slope, "ci_low": f.ci_low, "ci_high": f.ci_high, "stderr": f.stderr}
    return fits


def _clean(obj):
    # JSON has no inf/nan; numpy scalars become Python floats
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def execute(cfg: dict, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = canonical(cfg)
    results, ensembles = [], []
    for i, eps in enumerate(cfg["eps"]):
        log.info("eps = %g", eps)
        r, ens = run_eps(cfg, eps, i)
        results.append(r)
        ensembles.append(ens)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fits = sweep_fits(results, cfg)
    notes = [str(w.message) for w in caught]
    if cfg["dim"] == 3:
        notes.append("d = 3: exact dynamics not computed; semiclassical backend only")
    report = {
        "config": {k: cfg[k] for k in sorted(cfg) if k not in EXECUTION_KEYS},
        "config_text": text,
        "config_hash": hashlib.sha256(text.encode()).hexdigest(),
        "seed": cfg["seed"],
        "versions": {"hagedorn_bohm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "backend": cfg["backend"],
        "results": results,
        "fits": fits,
        "notes": notes,
    }
    for n in notes:
        log.warning(n)
    (out / "report.json").write_text(json.dumps(_clean(report), indent=1, sort_keys=True) + "\n")
    _write_paths(out / "paths.csv", cfg, ensembles)
    _write_sweep(out / "sweep.csv", results, fits)
    _write_bounds(out / "bounds.csv", results)
    return report


def _write_paths(path, cfg, ensembles):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps"] + ensembles[0].header())
        for ens in ensembles:
            ids = range(min(cfg["export_paths"], ens.n_paths))
            for row in ens.rows(ids):
                w.writerow([repr(ens.eps)] + row)


def _r(v):
    return "" if v is None else repr(float(v))


def _write_sweep(path, results, fits):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "q50", "q95", "coverage_at_R", "L2_diff", "Linf_diff", "Linf_grad_diff"])
        for r in results:
            g = r["grid"] or {}
            w.writerow([_r(r["eps"]), _r(r["q50"]), _r(r["q95"]), _r(r["coverage_at_R"]),
                        _r(g.get("L2_diff")), _r(g.get("Linf_diff")), _r(g.get("Linf_grad_diff"))])
        for name, f in fits.items():
            w.writerow(["slope", name, _r(f["slope"]), _r(f["ci_low"]), _r(f["ci_high"])])


def _write_bounds(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "R", "tail", "flux", "bound", "exit_prob", "exit_sigma"])
        for r in results:
            for b in r["bounds"]:
                w.writerow([_r(r["eps"]), _r(b["R"]), _r(b["tail"]), _r(b["flux"]), _r(b["bound"]),
                            _r(b["exit_prob"]), _r(b["exit_sigma"])])


# -- entry point --------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hagedorn-bohm", description="Bohmian ensembles of Hagedorn packets")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out")
        p.add_argument("--backend-override", choices=("semiclassical", "exact"))
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            p.add_argument("--eps", help="comma separated eps list replacing the config's")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s: %(message)s")
    try:
        raw = parse_config_text(_read(args.config))
        if args.seed is not None:
            raw["seed"] = str(args.seed)
        workers = args.workers or os.environ.get("HB_WORKERS")
        if workers:
            raw["workers"] = str(workers)
        if args.backend_override:
            raw["backend"] = args.backend_override
        if getattr(args, "eps", None):
            raw["eps"] = args.eps
        if args.out:
            raw["out"] = args.out
        cfg = build_config(raw)
        execute(cfg, cfg["out"])
    except ContractViolation as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_ABORT
    return EXIT_OK


def _read(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None


if __name__ == "__main__":
    sys.exit(main())
