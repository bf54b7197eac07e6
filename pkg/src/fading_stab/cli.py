"""Command-line front end: ``fading-stab {check,lambda-max,min-power,sweep,simulate}``.

Configuration is one JSON document holding the problem (``plant``,
``channel``, ``fading``), an optional ``policy`` and optional run settings
(``seed``, ``trials``, ``blocks``, ``tol``, ``uniform``, ``sweep_var``,
``grid``, ``out``, ``svg``, ``start_state``).  Flags override the file.

Exit codes: 0 stabilizable / success, 1 not stabilizable, 2 input error,
3 solver did not converge, 4 simulation disagrees with the analysis.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import sim, stability
from .core import (ConvergenceError, FadingProcess, InfeasibleError, Problem, ValidationError,
                   policy_from_dict, problem_from_dict)
from .power import min_power, min_power_uniform
from .sim import config_hash

EXIT_OK, EXIT_UNSTABLE, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_MISMATCH = 0, 1, 2, 3, 4

DEFAULTS = {"seed": 0, "trials": 10_000, "blocks": 20, "tol": 1e-12, "uniform": False,
            "sweep_var": "pi_1", "grid": None, "out": None, "svg": None, "start_state": None}
SWEEP_VARS = ("pi_1", "lambda", "n", "noise")


class InputError(Exception):
    pass


def parse_grid(text: str) -> np.ndarray:
    """``START:STOP:STEP`` with STOP included when it lies on the grid."""
    try:
        start, stop, step = (float(t) for t in text.split(":"))
    except ValueError as exc:
        raise InputError(f"grid must be START:STOP:STEP, got {text!r}") from exc
    if not (step > 0 and stop >= start) or not all(map(math.isfinite, (start, stop, step))):
        raise InputError("grid needs STEP > 0 and STOP >= START")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(count), 12)


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config: {exc}") from exc
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    return cfg


def _problem(cfg: dict) -> Problem:
    missing = [k for k in ("plant", "channel", "fading") if k not in cfg]
    if missing:
        raise InputError(f"config lacks {', '.join(missing)}")
    return problem_from_dict(cfg)


def _policy(cfg: dict):
    if "policy" not in cfg:
        raise InputError("this command needs a 'policy' entry")
    return policy_from_dict(cfg["policy"])


def _with_value(cfg: dict, var: str, value: float) -> dict:
    c = json.loads(json.dumps({k: cfg[k] for k in ("plant", "channel", "fading")}))
    if var == "pi_1":
        if "iid" not in c["fading"] or len(c["fading"]["iid"]) != 2:
            raise InputError("pi_1 sweeps need two-state i.i.d. fading")
        c["fading"]["iid"] = [value, 1.0 - value]
    elif var == "lambda":
        c["plant"]["eigenvalues"] = [value] * len(c["plant"]["eigenvalues"])
    elif var == "n":
        c["channel"]["block_len"] = int(round(value))
    elif var == "noise":
        c["channel"]["noise_var"] = value
    return c


def _csv_writer(path, cfg):
    fh = open(path, "w", newline="")
    fh.write(f"# config_sha256={config_hash(cfg)}\n")
    return fh, csv.writer(fh)


def _threads() -> int:
    env = os.environ.get("FADING_STAB_THREADS")
    return max(1, int(env)) if env else 1


def cmd_check(cfg: dict) -> int:
    problem, policy = _problem(cfg), _policy(cfg)
    v = stability.check(problem, policy)
    print(f"verdict: {'stabilizable' if v.stabilizable else 'not stabilizable'}")
    print(f"condition: {v.condition_used.value}")
    print(f"margin: {v.margin:.12g}")
    return EXIT_OK if v.stabilizable else EXIT_UNSTABLE


def cmd_lambda_max(cfg: dict) -> int:
    problem, policy = _problem(cfg), _policy(cfg)
    lam = stability.lambda_max(problem, policy, tol=float(cfg["tol"]))
    print(f"lambda_max: {lam:.13g}")
    return EXIT_OK


def _solve(problem, uniform: bool, tol: float):
    return min_power_uniform(problem) if uniform else min_power(problem, tol=tol)


def cmd_min_power(cfg: dict) -> int:
    problem = _problem(cfg)
    try:
        sol = _solve(problem, bool(cfg["uniform"]), float(cfg["tol"]))
    except ConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        inc = exc.incumbent
        if inc is not None:
            print(f"incumbent objective: {inc.objective:.12g}")
        return EXIT_CONVERGENCE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    print(f"mode: {'uniform' if cfg['uniform'] else 'adapted'}")
    print(f"P*: {sol.p_star:.12g}")
    slots = sol.policy.slot_powers(problem.dim)
    for s, row in enumerate(slots):
        print(f"state {s}: " + " ".join(f"{p:.12g}" for p in row))
    for key, val in sorted(sol.solver_stats.items()):
        print(f"stat {key}: {val}")
    if cfg["out"]:
        fh, wr = _csv_writer(cfg["out"], cfg)
        with fh:
            wr.writerow(["state"] + [f"power_slot_{i}" for i in range(problem.dim)])
            for s, row in enumerate(slots):
                wr.writerow([s] + [repr(float(p)) for p in row])
    return EXIT_OK


def _sweep_point(cfg: dict, var: str, value: float):
    try:
        problem = problem_from_dict(_with_value(cfg, var, value))
        adapted = min_power(problem, tol=float(cfg["tol"])).p_star
        uniform = min_power_uniform(problem).p_star
        return adapted, uniform, "ok"
    except (ConvergenceError, InfeasibleError, ValidationError) as exc:
        return math.nan, math.nan, type(exc).__name__


def cmd_sweep(cfg: dict) -> int:
    var = cfg["sweep_var"]
    if var not in SWEEP_VARS:
        raise InputError(f"--sweep-var must be one of {', '.join(SWEEP_VARS)}")
    if not cfg["grid"]:
        raise InputError("sweep needs --grid START:STOP:STEP")
    grid = parse_grid(cfg["grid"])
    _problem(cfg)
    with ThreadPoolExecutor(_threads()) as pool:
        rows = list(pool.map(lambda v: _sweep_point(cfg, var, float(v)), grid))
    ok = [(a, u) for a, u, st in rows if st == "ok"]
    dominated = all(a <= u * (1 + 1e-9) + 1e-9 for a, u in ok)
    out = sys.stdout if not cfg["out"] else None
    if out is None:
        fh, wr = _csv_writer(cfg["out"], cfg)
    else:
        out.write(f"# config_sha256={config_hash(cfg)}\n")
        fh, wr = None, csv.writer(out)
    wr.writerow([var, "adapted_p_star", "uniform_p_star", "status"])
    for v, (a, u, st) in zip(grid, rows):
        wr.writerow([repr(float(v)), repr(a), repr(u), st])
    if fh is not None:
        fh.close()
    print(f"# summary: {len(ok)}/{len(rows)} points solved; adapted <= uniform everywhere: {dominated}",
          file=sys.stderr if out is not None else sys.stdout)
    if cfg["svg"]:
        write_svg(cfg["svg"], grid, [r[0] for r in rows], [r[1] for r in rows], var)
    return EXIT_OK if len(ok) == len(rows) else EXIT_CONVERGENCE


def cmd_simulate(cfg: dict) -> int:
    problem, policy = _problem(cfg), _policy(cfg)
    trace = sim.run_closed_loop(problem, policy, cfg.get("gain"), trials=int(cfg["trials"]),
                                horizon_blocks=int(cfg["blocks"]), seed=int(cfg["seed"]),
                                start_state=cfg["start_state"])
    if cfg["out"]:
        sim.write_trace_csv(trace, cfg["out"], cfg)
    ms = trace.mean_square_state
    final = ms[-1]
    label = "stabilized" if np.isfinite(final) and final < ms[0] else "diverged"
    print(f"summary: {label}")
    print(f"initial mean square: {ms[0]:.6g}; final mean square: {final:.6g}")
    print(f"divergence fraction: {trace.divergence_fraction:.4f}")
    try:
        rep = sim.empirical_vs_analytic(trace)
    except sim.InsufficientTrials as exc:
        print(f"comparison skipped: {exc}")
        return EXIT_OK
    print(f"max alpha deviation: {rep.max_relative_deviation:.4g} "
          f"(band z={rep.z:.3f}; alpha z={rep.max_alpha_z:.3f}, error-mean z={rep.max_error_z:.3f}, "
          f"power z={rep.max_power_z:.3f})")
    if not rep.consistent:
        print("empirical statistics fall outside the analytic confidence bands", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def write_svg(path, x, y1, y2, xlabel: str, labels=("adapted", "uniform")) -> None:
    """Two-curve line chart with a legend; NaN points break the line."""
    W, H, pad = 640, 420, 60
    x = np.asarray(x, float)
    ys = [np.asarray(y1, float), np.asarray(y2, float)]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys])
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    xlo, xhi = x.min(), x.max() if x.max() > x.min() else x.min() + 1.0

    def px(v):
        return pad + (v - xlo) / (xhi - xlo) * (W - 2 * pad)

    def py(v):
        return H - pad - (v - lo) / (hi - lo) * (H - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
             f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle">{xlabel}</text>',
             f'<text x="15" y="{H / 2}" transform="rotate(-90 15 {H / 2})" text-anchor="middle">P*</text>']
    for val, anchor in ((lo, "end"), (hi, "end")):
        parts.append(f'<text x="{pad - 5}" y="{py(val) + 4:.1f}" text-anchor="{anchor}" '
                     f'font-size="11">{val:.3g}</text>')
    for val in (xlo, xhi):
        parts.append(f'<text x="{px(val):.1f}" y="{H - pad + 16}" text-anchor="middle" '
                     f'font-size="11">{val:.3g}</text>')
    colors = ("#1f77b4", "#d62728")
    for k, (y, color, name) in enumerate(zip(ys, colors, labels)):
        segs, cur = [], []
        for xv, yv in zip(x, y):
            if np.isfinite(yv):
                cur.append(f"{px(xv):.1f},{py(yv):.1f}")
            elif cur:
                segs.append(cur)
                cur = []
        if cur:
            segs.append(cur)
        dash = ' stroke-dasharray="6 4"' if k else ""
        for seg in segs:
            parts.append(f'<polyline points="{" ".join(seg)}" fill="none" stroke="{color}" '
                         f'stroke-width="2"{dash}/>')
        ly = pad + 18 * k
        parts.append(f'<line x1="{W - pad - 110}" y1="{ly}" x2="{W - pad - 80}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"{dash}/>')
        parts.append(f'<text x="{W - pad - 74}" y="{ly + 4}" font-size="12">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


COMMANDS = {"check": cmd_check, "lambda-max": cmd_lambda_max, "min-power": cmd_min_power,
            "sweep": cmd_sweep, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fading-stab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", metavar="PATH")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--trials", type=int)
    ap.add_argument("--blocks", type=int)
    ap.add_argument("--tol", type=float)
    ap.add_argument("--uniform", action="store_true", default=None)
    ap.add_argument("--sweep-var", dest="sweep_var", choices=SWEEP_VARS)
    ap.add_argument("--grid", metavar="START:STOP:STEP")
    ap.add_argument("--out", metavar="PATH")
    ap.add_argument("--svg", metavar="PATH", help="also draw the sweep as an SVG chart")
    ap.add_argument("--start-state", dest="start_state", type=int,
                    help="force the first channel state of every simulated path")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (InputError, ValidationError, sim.NonSchurGain) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
