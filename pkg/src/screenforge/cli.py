"""Batch command-line front end.

Verbs: solve | audit | identity | oracle | sample.  Every command reads
a JSON config, writes CSV/JSON reports into an output directory, and is
byte-reproducible given the config and seed.  Exit codes: 0 success,
2 config error, 3 tolerance or audit failure, 4 solver failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import mech as mechmod
from . import model as modelmod
from . import oracle as oraclemod
from .errors import ConfigError, RegularityError, ScreenforgeError
from .numerics import RngStream, uniform_draws

_FLOAT_FMT = "%.17g"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    raw: dict
    command: str
    out_dir: str
    seed: int
    quiet: bool
    threads: int
    config_hash: str = ""
    model: object = None
    section: dict = field(default_factory=dict)


def _hash_config(raw: dict, command: str, seed: int) -> str:
    canon = json.dumps({"config": raw, "command": command, "seed": seed},
                       sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path: str, command: str, out_override=None, seed_override=None,
                quiet: bool = False) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict) or "family" not in raw:
        raise ConfigError("config must be a JSON object with a 'family' block")
    seed = int(seed_override if seed_override is not None else raw.get("seed", 20240101))
    if seed <= 0:
        raise ConfigError("seed must be positive")
    out_dir = str(out_override if out_override is not None else raw.get("out", "screenforge_out"))
    threads = max(1, int(os.environ.get("SCREENFORGE_THREADS", "1")))
    section = dict(raw.get(command, {}))
    cfg = RunConfig(
        raw=raw,
        command=command,
        out_dir=out_dir,
        seed=seed,
        quiet=quiet,
        threads=threads,
        config_hash=_hash_config(raw, command, seed),
        section=section,
    )
    cfg.model = modelmod.build_model(dict(raw["family"]))
    for key in ("gamma_grid", "count", "cycles"):
        if key in section and int(section[key]) <= 0:
            raise ConfigError(f"{key} must be positive")
    return cfg


# ---------------------------------------------------------------------------
# deterministic writers
# ---------------------------------------------------------------------------


def _write_csv(path: str, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(
                _FLOAT_FMT % v if isinstance(v, float) else str(v) for v in row
            ) + "\n")


def _write_json(path: str, payload: dict, cfg: RunConfig):
    payload = dict(payload)
    payload["config_hash"] = cfg.config_hash
    payload["version"] = __version__
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_mechanism_csv(path: str, mech: mechmod.ThresholdMechanism):
    n = mech.n_goods
    header = ["gamma", "t1"] + [f"p_{j + 1}" for j in range(n)]
    fees = mech.upfront if mech.upfront is not None else np.full(len(mech.gamma_grid), np.nan)
    rows = [
        [float(g), float(t)] + [float(p) for p in prow]
        for g, t, prow in zip(mech.gamma_grid, fees, mech.strikes)
    ]
    _write_csv(path, header, rows)


def read_mechanism_csv(path: str, box_top=None) -> mechmod.ThresholdMechanism:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = [list(map(float, line.strip().split(","))) for line in fh if line.strip()]
    arr = np.asarray(data, dtype=float)
    n = len(header) - 2
    if n < 1 or header[:2] != ["gamma", "t1"]:
        raise ConfigError(f"{path} is not a mechanism table")
    return mechmod.ThresholdMechanism(
        gamma_grid=arr[:, 0], strikes=arr[:, 2:2 + n], upfront=arr[:, 1], box_top=box_top
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _solved_mechanism(cfg: RunConfig, grid_size: int):
    grid = np.linspace(cfg.model.prior.lo, cfg.model.prior.hi, grid_size)
    mech = mechmod.solve_thresholds(cfg.model, grid, threads=cfg.threads)
    return mechmod.upfront_t1(cfg.model, mech)


def cmd_solve(cfg: RunConfig) -> int:
    report = mechmod.regularity_report(cfg.model)
    _write_json(os.path.join(cfg.out_dir, "regularity.json"), {
        "ok": report.ok,
        "worst_f_gamma": report.worst_f_gamma,
        "worst_gamma_monotonicity": report.worst_gamma_monotonicity,
        "crossing_violations": report.crossing_violations,
        "locations": report.locations,
    }, cfg)
    if not report.ok:
        _say(cfg, f"regularity violated; see {cfg.out_dir}/regularity.json")
        return 3
    grid_size = int(cfg.section.get("gamma_grid", mechmod.DEFAULT_GRID_SIZE))
    mech = _solved_mechanism(cfg, grid_size)
    write_mechanism_csv(os.path.join(cfg.out_dir, "mechanism.csv"), mech)
    direct = mechmod.revenue_direct(cfg.model, mech)
    functional = mechmod.revenue_functional(cfg.model, mech)
    payload = {
        "revenue_direct": direct,
        "revenue_functional": functional,
        "residual_functional_rel": abs(functional - direct) / max(abs(direct), 1e-300),
        "gamma_grid": grid_size,
        "family": cfg.model.label,
    }
    if cfg.model.invariant_flag:
        impulse = mechmod.revenue_impulse_form(cfg.model, mech)
        payload["revenue_impulse"] = impulse
        payload["residual_impulse_rel"] = abs(impulse - direct) / max(abs(direct), 1e-300)
    _write_json(os.path.join(cfg.out_dir, "revenue.json"), payload, cfg)
    _say(cfg, f"revenue {direct:.9g}; files in {cfg.out_dir}")
    return 0


def cmd_audit(cfg: RunConfig) -> int:
    sec = cfg.section
    grid_size = int(sec.get("gamma_grid", 51))
    csv_path = sec.get("mechanism_csv")
    if csv_path:
        box_top = np.array([m.support[1] for m in cfg.model.marginals])
        mech = read_mechanism_csv(csv_path, box_top=box_top)
    else:
        mech = _solved_mechanism(cfg, grid_size)
    audit = mechmod.ic_audit(cfg.model, mech, threads=cfg.threads)
    surplus = _continuum_surplus(cfg.model)
    gain_tol = float(sec.get("tolerance_gain_rel", 1e-6)) * max(surplus, 1e-12)
    ir_tol = float(sec.get("ir_tol", 1e-8))
    n_cycles = int(sec.get("cycles", 1000))
    cyc_len = int(sec.get("cycle_length", 5))
    stream = RngStream(seed=cfg.seed, stream_id=2)
    cycles = mechmod.random_cycles(cfg.model.box, n_cycles, cyc_len, stream)
    gammas = mech.gamma_grid[:: max(1, len(mech.gamma_grid) // 8)]
    cycle_max = max(mechmod.cyclic_monotonicity_check(mech, float(g), cycles) for g in gammas)
    bottom = float(audit.curve.values[0])
    nondecreasing = bool(np.all(np.diff(audit.curve.values) >= -1e-8))
    ok = bool(
        audit.max_gain <= gain_tol
        and audit.ir_slack >= -ir_tol
        and abs(bottom) <= 1e-8
        and nondecreasing
        and cycle_max <= 1e-10
    )
    _write_json(os.path.join(cfg.out_dir, "audit.json"), {
        "max_gain": audit.max_gain,
        "gain_argmax": list(audit.gain_argmax),
        "ir_slack": audit.ir_slack,
        "rent_at_bottom": bottom,
        "rent_nondecreasing": nondecreasing,
        "cycle_max": float(cycle_max),
        "gain_tolerance": gain_tol,
        "scale": surplus,
        "ok": ok,
    }, cfg)
    _write_csv(
        os.path.join(cfg.out_dir, "u_curve.csv"),
        ["gamma", "U"],
        [[float(g), float(u)] for g, u in zip(audit.curve.gamma_grid, audit.curve.values)],
    )
    _say(cfg, f"max gain {audit.max_gain:.3g} (tol {gain_tol:.3g}); ok={ok}")
    return 0 if ok else 3


def _continuum_surplus(model) -> float:
    """Expected efficient surplus, used as the audit scale."""
    from .numerics import gauss_rule

    grule = gauss_rule(64, model.prior.lo, model.prior.hi)
    total = 0.0
    for g, w in zip(grule.nodes, grule.weights):
        dens = float(model.prior.pdf(g))
        inner = 0.0
        for j, m in enumerate(model.marginals):
            s = float(np.clip(m.cdf(0.0, g), 0.0, 1.0))
            if s >= 1.0 - 1e-14:
                continue
            rule = gauss_rule(64, s, 1.0)
            inner += float(np.dot(rule.weights, np.asarray(m.quantile(rule.nodes, g))))
        total += w * dens * inner
    return total


def cmd_identity(cfg: RunConfig) -> int:
    sec = cfg.section
    fams = sec.get("families")
    models = [modelmod.build_model(dict(f)) for f in fams] if fams else [cfg.model]
    points = int(sec.get("points", 100))
    div_tol = float(sec.get("divergence_tol", 1e-4))
    bnd_tol = float(sec.get("boundary_tol", 1e-6))
    inv_tol = float(sec.get("invariance_tol", 1e-2))
    pair = sec.get("gamma_pair")
    rows = []
    failed = False
    for mdl in models:
        lo, hi = mdl.prior.lo, mdl.prior.hi
        gpair = tuple(pair) if pair else (lo, hi)
        stream = RngStream(seed=cfg.seed, stream_id=7)
        draws = uniform_draws(stream, points, mdl.n + 1)
        resids = []
        for row in draws:
            g = lo + (0.1 + 0.8 * row[0]) * (hi - lo)
            z = 0.1 + 0.8 * row[1:]
            theta = modelmod.sample_theta(mdl, g, z)
            resids.append(modelmod.divergence_residual(mdl, g, theta))
        resids = np.asarray(resids)
        gammas = np.linspace(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo), 9)
        bnd = max(modelmod.boundary_residual(mdl, float(g)) for g in gammas)
        inv = modelmod.invariance_residual(mdl, 9, gpair)
        ok = bool(
            (not mdl.invariant_flag)
            or (resids.max() <= div_tol and bnd <= bnd_tol and inv <= 1e-8)
        )
        failed = failed or not ok
        rows.append({
            "family": mdl.label,
            "invariant_flag": mdl.invariant_flag,
            "divergence_max": float(resids.max()),
            "divergence_mean": float(resids.mean()),
            "boundary_max": float(bnd),
            "invariance_residual": float(inv),
            "ok": ok,
        })
    _write_json(os.path.join(cfg.out_dir, "identity.json"), {
        "families": rows,
        "tolerances": {"divergence": div_tol, "boundary": bnd_tol, "invariance": inv_tol},
    }, cfg)
    _say(cfg, f"{len(rows)} families checked; ok={not failed}")
    return 3 if failed else 0


def cmd_oracle(cfg: RunConfig) -> int:
    sec = cfg.section
    gcells = int(sec.get("gamma_cells", 3))
    ladder = sec.get("theta_cells", [2, 3, 4])
    if not isinstance(ladder, list):
        ladder = [ladder]
    specs = [{"gamma_cells": gcells, "theta_cells": k} for k in ladder]
    table = []
    inst = None
    try:
        for spec in specs:
            inst = oraclemod.discretize(cfg.model, spec["gamma_cells"], spec["theta_cells"])
            reports = {
                "simultaneous": oraclemod.solve_simultaneous(inst),
                "sequential": oraclemod.solve_sequential(inst),
                "relaxed": oraclemod.solve_relaxed(inst),
            }
            for regime, rep in reports.items():
                _write_mech_table(
                    os.path.join(cfg.out_dir, f"mech_{regime}_k{spec['theta_cells']}.csv"),
                    inst, rep.mechanism,
                )
            v_sim = reports["simultaneous"].value
            v_sep = oraclemod.separate_selling_value(inst)
            table.append({
                "theta_cells": spec["theta_cells"],
                "gamma_cells": spec["gamma_cells"],
                "iterations": {k: r.iterations for k, r in reports.items()},
                "v_simultaneous": v_sim,
                "v_sequential": reports["sequential"].value,
                "v_relaxed": reports["relaxed"].value,
                "v_separate": v_sep,
                "full_surplus": oraclemod.full_surplus(inst),
                "gap_separate": v_sim - v_sep,
                "gap_sequential": reports["sequential"].value - v_sim,
                "gap_relaxed": reports["relaxed"].value - v_sim,
            })
    except ScreenforgeError as exc:
        # dump the instance that failed so the run can be replayed
        if inst is not None:
            _write_json(os.path.join(cfg.out_dir, "instance_fail.json"),
                        {"instance": inst.to_jsonable(), "error": str(exc)}, cfg)
        _say(cfg, f"oracle failure: {exc}")
        return 4
    _write_json(os.path.join(cfg.out_dir, "oracle.json"), {"refinements": table}, cfg)
    _say(cfg, f"{len(table)} refinements solved")
    return 0


def _write_mech_table(path: str, inst, mech):
    n = inst.n_goods
    header = (["gamma"] + [f"theta_{j + 1}" for j in range(n)]
              + [f"q_{j + 1}" for j in range(n)] + ["t2", "t1"])
    reps = inst.cell_values
    rows = []
    for m, g in enumerate(inst.gamma_values):
        for c in range(inst.n_cells):
            rows.append(
                [float(g)] + [float(v) for v in reps[c]]
                + [float(q) for q in mech.q[m, c]]
                + [float(mech.t2[m, c]), float(mech.t1[m])]
            )
    _write_csv(path, header, rows)


def cmd_sample(cfg: RunConfig) -> int:
    sec = cfg.section
    count = int(sec.get("count", 1000))
    gammas = sec.get("gammas", [0.5 * (cfg.model.prior.lo + cfg.model.prior.hi)])
    corners = bool(sec.get("corners", False))
    n = cfg.model.n
    rows = []
    ks_rows = []
    for gi, g in enumerate(gammas):
        stream = RngStream(seed=cfg.seed, stream_id=100 + gi)
        z = uniform_draws(stream, count, n)
        if corners:
            corner_z = np.array(np.meshgrid(*([[0.0, 1.0]] * n), indexing="ij")).reshape(n, -1).T
            z = np.vstack([corner_z, z])
        theta = modelmod.sample_theta(cfg.model, float(g), z)
        for zr, tr in zip(z, theta):
            rows.append([float(g)] + [float(v) for v in zr] + [float(v) for v in tr])
        for j in range(n):
            ks_rows.append({
                "gamma": float(g),
                "good": j + 1,
                "ks": _ks_stat(cfg.model.marginals[j], float(g), theta[:, j]),
            })
    header = (["gamma"] + [f"z_{j + 1}" for j in range(n)]
              + [f"theta_{j + 1}" for j in range(n)])
    _write_csv(os.path.join(cfg.out_dir, "draws.csv"), header, rows)
    _write_json(os.path.join(cfg.out_dir, "ks.json"),
                {"count": count, "statistics": ks_rows}, cfg)
    worst = max(r["ks"] for r in ks_rows)
    _say(cfg, f"{len(rows)} draws written; worst KS {worst:.4f}")
    return 0


def _ks_stat(marginal, gamma: float, sample: np.ndarray) -> float:
    x = np.sort(np.asarray(sample, dtype=float))
    n = len(x)
    cdf = np.asarray(marginal.cdf(x, gamma), dtype=float)
    hi = np.max(np.arange(1, n + 1) / n - cdf)
    lo = np.max(cdf - np.arange(0, n) / n)
    return float(max(hi, lo))


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "solve": cmd_solve,
    "audit": cmd_audit,
    "identity": cmd_identity,
    "oracle": cmd_oracle,
    "sample": cmd_sample,
}


def _say(cfg: RunConfig, message: str):
    if not cfg.quiet:
        print(message)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="screenforge",
        description="Option-contract solver and verifier for sequential screening",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to a JSON run config")
    parser.add_argument("--out", default=None, help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.command, args.out, args.seed, args.quiet)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(cfg.out_dir, exist_ok=True)
    try:
        return _COMMANDS[args.command](cfg)
    except RegularityError as exc:
        print(f"regularity failure: {exc}", file=sys.stderr)
        return 3
    except ScreenforgeError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
