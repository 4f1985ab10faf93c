"""Command-line entry point: ``metasense {validate,greens,design,sweep,peb}``.

Exit codes: 0 success, 1 failed self-check, 2 configuration error,
3 solver failure in single-design mode.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import harness
from .errors import ConfigError, MetasenseError, PlacementError, SolverStatusError

log = logging.getLogger("metasense")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        harness.set_path(out, key.strip(), val)
    return out


def _config(args) -> dict:
    over = _parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        harness.set_path(over, "sweep.trials", args.trials)
    if getattr(args, "n", None) is not None and args.command == "sweep":
        harness.set_path(over, "sweep.n_values", args.n)
    if getattr(args, "placement", None) is not None and args.command == "sweep":
        harness.set_path(over, "sweep.placements", args.placement)
    return harness.load_config(args.config, over)


def _single_scenario(cfg, args):
    kind = args.placement or cfg["sweep"]["placements"][0]
    n = args.n if args.n is not None else int(cfg["sweep"]["n_values"][0])
    if kind not in harness.PLACEMENTS:
        raise ConfigError(f"unknown placement {kind!r}")
    streams = harness.trial_streams(int(cfg["seed"]), 0, args.trial)
    return harness.build_scenario(cfg, kind, n, streams), streams


def _emit(obj, out):
    text = json.dumps(obj, indent=2, default=_json_default)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _finite(x):
    return x if math.isfinite(x) else None


# --------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    from .selfcheck import run_checks

    results = run_checks()
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_CHECK


def cmd_greens(args) -> int:
    from .em_core import build_coupling_matrix, dump_complex_csv, excitation_vector

    cfg = _config(args)
    sc, _ = _single_scenario(cfg, args)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    G = build_coupling_matrix(sc.op, sc.panel).G
    h = excitation_vector(sc.op, sc.panel).h_f
    dump_complex_csv(out / "G.csv", G)
    dump_complex_csv(out / "h_f.csv", h)
    np.savetxt(out / "positions.csv", sc.panel.positions, delimiter=",", fmt="%.17g", header="x,y", comments="")
    print(f"wrote G ({G.shape[0]}x{G.shape[1]}), h_f and positions to {out}")
    return EXIT_OK


def cmd_design(args) -> int:
    from .designer import design

    cfg = _config(args)
    sc, streams = _single_scenario(cfg, args)
    dc = cfg["design"]
    try:
        out = design(
            sc,
            mode=dc["extraction"],
            seed=streams["extraction"],
            full_lambda=bool(dc.get("full_lambda", False)),
            refine=bool(dc.get("refine", True)),
        )
    except SolverStatusError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    report = {
        "n_elements": sc.panel.n_elements,
        "sdp_status": out.sdp.status,
        "sdp_residuals": out.sdp.residuals,
        "bound_peb": out.sdp.bound,
        "physical_bound_peb": out.physical_bound,
        "digital_peb": _finite(out.digital_peb),
        "retracted_peb": _finite(out.retracted_peb),
        "achieved_peb": _finite(out.evaluation.achieved),
        "refined": out.refined,
        "passive": out.evaluation.passive,
        "min_passivity_margin": out.evaluation.min_margin,
        "status": out.result.status,
        "strengths": out.result.strengths,
        "positions": sc.panel.positions,
    }
    _emit(report, args.out)
    if not math.isfinite(out.evaluation.achieved):
        return EXIT_SOLVER
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    workers = args.workers if args.workers is not None else cfg.get("workers", 1)
    done = [0]
    total = len(harness.sweep_cells(cfg)) * int(cfg["sweep"]["trials"])

    def progress(row):
        done[0] += 1
        log.info("[%d/%d] %s N=%d trial %d: %s", done[0], total, row.placement, row.n_elements, row.trial, row.status)

    rows = harness.run_sweep(cfg, workers=workers, timing=args.timing, progress=progress)
    out = Path(args.out or "sweep.csv")
    harness.write_csv(rows, out, include_timing=args.timing)
    print(f"wrote {len(rows)} rows to {out} (summary: {harness.summary_path(out)})")
    if args.svg:
        harness.write_svg(rows, args.svg)
    return EXIT_OK


def cmd_peb(args) -> int:
    from .designer import DesignResult, evaluate_design

    cfg = _config(args)
    sc, _ = _single_scenario(cfg, args)
    data = json.loads(Path(args.design).read_text())
    F = np.asarray(data["strengths"] if isinstance(data, dict) else data, dtype=float)
    if F.shape != (sc.panel.n_elements,):
        raise ConfigError(f"design has {F.size} strengths, scenario has {sc.panel.n_elements} elements")
    if isinstance(data, dict) and "positions" in data:
        pos = np.asarray(data["positions"], dtype=float)
        sc.panel.positions = pos
        sc.panel.validate()
    res = DesignResult(F, 1.0 / F, np.zeros(F.size, complex), np.zeros(F.size, complex), math.nan)
    ev = evaluate_design(sc, res, math.nan)
    _emit({"achieved_peb": _finite(ev.achieved), "passive": ev.passive, "min_passivity_margin": ev.min_margin}, args.out)
    return EXIT_OK if math.isfinite(ev.achieved) else EXIT_SOLVER


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metasense", description="Metasurface bistatic sensing design toolkit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, single=True):
        sp.add_argument("-c", "--config", help="JSON or YAML config (defaults to the reference setup)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", help="output path")
        if single:
            sp.add_argument("--placement", choices=harness.PLACEMENTS)
            sp.add_argument("--n", type=int, help="number of elements")
            sp.add_argument("--trial", type=int, default=0, help="trial index for the random streams")

    sub.add_parser("validate", help="run the built-in invariant checks")
    common(sub.add_parser("greens", help="dump G, h_f and element positions"))
    common(sub.add_parser("design", help="single-scenario design with report"))
    sp = sub.add_parser("sweep", help="PEB-vs-N Monte Carlo sweep")
    common(sp, single=False)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--n", type=int, nargs="+", help="N values")
    sp.add_argument("--placement", nargs="+", choices=harness.PLACEMENTS)
    sp.add_argument("--workers", type=int, help="worker processes (output does not depend on this)")
    sp.add_argument("--timing", action="store_true", help="record wall time per row (breaks bit-identity)")
    sp.add_argument("--svg", help="also write a PEB-vs-N plot")
    sp = sub.add_parser("peb", help="evaluate a given design (JSON with 'strengths')")
    common(sp)
    sp.add_argument("design", help="design JSON, e.g. the output of 'design'")
    return p


COMMANDS = {
    "validate": cmd_validate,
    "greens": cmd_greens,
    "design": cmd_design,
    "sweep": cmd_sweep,
    "peb": cmd_peb,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PlacementError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverStatusError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except MetasenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
