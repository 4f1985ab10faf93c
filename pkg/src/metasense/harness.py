"""Monte Carlo orchestration: configuration, element placement, PEB-vs-N sweep.

Every random quantity of a trial (layout, combiner column order, reflection
phases, random-strength baseline) is drawn from generators spawned off
``SeedSequence([master, cell, trial])``, so a sweep is a pure function of its
configuration no matter how many worker processes execute it.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .channel import RxArray, Scenario, Target, dbm_to_watt, dft_combiner
from .crb import peb_of_moments
from .em_core import (
    LorentzianParams,
    OperatingPoint,
    PanelGeometry,
    build_coupling_matrix,
    excitation_vector,
    max_strength,
    min_pairwise_distance,
    passivity_limit,
    resonant_polarizability,
    solve_dipoles_exact,
)
from .errors import ConfigError, MetasenseError, PlacementError

log = logging.getLogger(__name__)

PLACEMENTS = ("random", "uniform-grid", "gaussian-cluster")
REJECTION_BUDGET = 100_000
HEX_DENSITY = math.pi / (2.0 * math.sqrt(3.0))

REFERENCE_CONFIG = {
    "frequency": 20e9,
    "n_pilots": 100,
    "tx_power_dbm": 1.0,
    "noise_dbm": -80.0,
    "damping_ratio": 0.01,
    "panel": {"width": 0.5, "depth": 0.5, "height_wavelengths": 0.2, "feed": [0.0, 0.0]},
    "targets": [[5.4, 5.3, 4.0], [7.1, 3.5, 5.25]],
    "rx": {"center": [10.0, 5.0, 5.0], "n_antennas": 16, "layout": "planar"},
    "design": {"extraction": "rank-one", "full_lambda": False, "refine": True},
    "sweep": {
        "n_values": [16, 64, 256],
        "placements": ["random"],
        "trials": 50,
        "min_spacing_wavelengths": 0.25,
        "feed_exclusion_wavelengths": 0.25,
        "gaussian_variance": 0.05,
        "baselines": {"digital": True, "random": True},
    },
    "seed": 20240521,
    "workers": 1,
}


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Reference configuration, updated from a JSON/YAML file and overrides."""
    cfg = copy.deepcopy(REFERENCE_CONFIG)
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            if path.suffix.lower() in (".yaml", ".yml"):
                import yaml

                user = yaml.safe_load(text) or {}
            else:
                user = json.loads(text)
        except Exception as exc:  # noqa: BLE001 - any parse failure is a config error
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must hold a mapping at top level")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    check_config(cfg)
    return cfg


def set_path(cfg: dict, dotted: str, value) -> dict:
    """Set ``a.b.c = value`` in a nested dict (used for ``--set`` flags)."""
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a mapping")
    node[keys[-1]] = value
    return cfg


def check_config(cfg: dict):
    try:
        if not cfg["frequency"] > 0:
            raise ConfigError("frequency must be positive")
        if int(cfg["n_pilots"]) < 1:
            raise ConfigError("n_pilots must be >= 1")
        if not cfg["damping_ratio"] > 0:
            raise ConfigError("damping_ratio must be positive")
        p = cfg["panel"]
        if not (p["width"] > 0 and p["depth"] > 0 and p["height_wavelengths"] > 0):
            raise ConfigError("panel extents must be positive")
        tg = np.asarray(cfg["targets"], dtype=float)
        if tg.ndim != 2 or tg.shape[1] != 3 or len(tg) < 1:
            raise ConfigError("targets must be a non-empty list of [x, y, z]")
        if int(cfg["rx"]["n_antennas"]) < len(tg):
            raise ConfigError("need at least as many RX antennas as targets")
        sw = cfg["sweep"]
        if int(sw["trials"]) < 1:
            raise ConfigError("sweep.trials must be >= 1")
        bad = [k for k in sw["placements"] if k not in PLACEMENTS]
        if bad:
            raise ConfigError(f"unknown placement kind(s) {bad}; choose from {PLACEMENTS}")
        if any(int(n) < len(tg) for n in sw["n_values"]):
            raise ConfigError("every N must be at least the number of targets")
        if cfg["design"]["extraction"] not in ("rank-one", "sample"):
            raise ConfigError("design.extraction must be rank-one or sample")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed config: {exc!r}") from exc


# --------------------------------------------------------------------------
# placement


@dataclass
class PlacementSpec:
    kind: str
    n_elements: int
    width: float
    depth: float
    min_spacing: float
    feed_exclusion: float
    variance: float = 0.05
    seed: object = None
    feed: tuple = (0.0, 0.0)


def _packing_check(spec: PlacementSpec):
    if spec.n_elements < 1:
        raise PlacementError("need at least one element")
    if spec.min_spacing <= 0:
        return
    # disks of diameter s around each point, hex packing with a half-spacing margin
    area = (spec.width + spec.min_spacing) * (spec.depth + spec.min_spacing)
    cap = HEX_DENSITY * area / (math.pi * spec.min_spacing**2 / 4.0)
    if spec.n_elements > cap:
        raise PlacementError(f"N={spec.n_elements} exceeds the packing estimate {cap:.0f} for this aperture")


def _rejection(spec: PlacementSpec, draw) -> np.ndarray:
    feed = np.asarray(spec.feed, dtype=float)
    pts = np.empty((spec.n_elements, 2))
    count = 0
    s2 = spec.min_spacing**2
    for _ in range(REJECTION_BUDGET):
        p = draw()
        if p is None:
            continue
        if np.sum((p - feed) ** 2) < spec.feed_exclusion**2:
            continue
        if count and np.min(np.sum((pts[:count] - p) ** 2, axis=1)) < s2:
            continue
        pts[count] = p
        count += 1
        if count == spec.n_elements:
            return pts
    raise PlacementError(
        f"rejection budget of {REJECTION_BUDGET} attempts exhausted after placing {count}/{spec.n_elements}"
    )


def gaussian_candidates(rng, variance: float, n: int) -> np.ndarray:
    """Raw (unclipped) centred normal draws with per-axis ``variance`` in m^2."""
    return rng.normal(0.0, math.sqrt(variance), (n, 2))


def _grid(spec: PlacementSpec) -> np.ndarray:
    N = spec.n_elements
    rows = math.ceil(math.sqrt(N))
    cols = math.ceil(N / rows)
    xs = (np.arange(cols) + 0.5) * spec.width / cols - spec.width / 2
    ys = (np.arange(rows) + 0.5) * spec.depth / rows - spec.depth / 2
    pts = np.array([(x, y) for y in ys for x in xs])[:N]
    # push lattice points out of the feed exclusion zone, radially (or along +x
    # for a point sitting on the feed)
    feed = np.asarray(spec.feed, dtype=float)
    d = pts - feed
    r = np.hypot(d[:, 0], d[:, 1])
    for i in np.flatnonzero(r < spec.feed_exclusion):
        u = d[i] / r[i] if r[i] > 0 else np.array([1.0, 0.0])
        pts[i] = feed + u * spec.feed_exclusion
    return pts


def generate_placement(spec: PlacementSpec, height: float) -> PanelGeometry:
    _packing_check(spec)
    rng = np.random.default_rng(spec.seed)
    hw, hd = spec.width / 2, spec.depth / 2
    if spec.kind == "random":
        pts = _rejection(spec, lambda: rng.uniform((-hw, -hd), (hw, hd)))
    elif spec.kind == "uniform-grid":
        pts = _grid(spec)
    elif spec.kind == "gaussian-cluster":
        if not spec.variance > 0:
            raise PlacementError("gaussian variance must be positive")
        def draw():
            p = gaussian_candidates(rng, spec.variance, 1)[0]
            # truncation: draws falling outside the aperture are redrawn
            return p if (abs(p[0]) <= hw and abs(p[1]) <= hd) else None

        pts = _rejection(spec, draw)
    else:
        raise PlacementError(f"unknown placement kind {spec.kind!r}")
    panel = PanelGeometry(spec.width, spec.depth, height, pts, spec.feed, spec.min_spacing)
    try:
        panel.validate()
    except MetasenseError as exc:
        raise PlacementError(f"{spec.kind} layout violates panel invariants: {exc}") from exc
    if spec.n_elements > 1 and min_pairwise_distance(pts) < spec.min_spacing * (1 - 1e-12):
        raise PlacementError("minimum spacing violated")
    return panel


# --------------------------------------------------------------------------
# scenarios


def trial_streams(master: int, cell: int, trial: int) -> dict:
    """Independent generators for one trial, keyed by purpose."""
    ss = np.random.SeedSequence([int(master), int(cell), int(trial)])
    names = ("placement", "combiner", "phases", "baseline", "extraction")
    return {n: np.random.default_rng(s) for n, s in zip(names, ss.spawn(len(names)))}


def trial_seed(master: int, cell: int, trial: int) -> int:
    return int(np.random.SeedSequence([int(master), int(cell), int(trial)]).generate_state(1, np.uint64)[0])


def operating_point(cfg: dict) -> OperatingPoint:
    return OperatingPoint(float(cfg["frequency"]))


def build_scenario(cfg: dict, placement: str, n_elements: int, streams: dict) -> Scenario:
    op = operating_point(cfg)
    lam = op.wavelength
    pc, sw = cfg["panel"], cfg["sweep"]
    h = pc["height_wavelengths"] * lam
    spec = PlacementSpec(
        kind=placement,
        n_elements=int(n_elements),
        width=float(pc["width"]),
        depth=float(pc["depth"]),
        min_spacing=sw["min_spacing_wavelengths"] * lam,
        feed_exclusion=sw["feed_exclusion_wavelengths"] * lam,
        variance=float(sw["gaussian_variance"]),
        seed=streams["placement"],
        feed=tuple(pc["feed"]),
    )
    panel = generate_placement(spec, h)
    damping = cfg["damping_ratio"] * op.omega
    F_max = max_strength(op, h, damping)
    elements = LorentzianParams(np.full(panel.n_elements, F_max), op.omega, damping)
    tg = np.asarray(cfg["targets"], dtype=float)
    phases = streams["phases"].uniform(0.0, 2.0 * math.pi, len(tg))
    targets = [Target(p, np.exp(1j * ph)) for p, ph in zip(tg, phases)]
    rc = cfg["rx"]
    M = int(rc["n_antennas"])
    rx = RxArray(
        rc["center"], M, lam,
        layout=rc.get("layout", "planar"),
        axis=tuple(rc.get("axis", (0.0, 1.0, 0.0))),
        axis2=tuple(rc.get("axis2", (0.0, 0.0, 1.0))),
        combiner=dft_combiner(M, streams["combiner"]),
    )
    sc = Scenario(
        op, panel, elements, targets, rx,
        noise_var=float(dbm_to_watt(cfg["noise_dbm"])),
        n_pilots=int(cfg["n_pilots"]),
        tx_power=float(dbm_to_watt(cfg["tx_power_dbm"])),
    )
    return sc.validate()


def random_strength_peb(sc: Scenario, rng, G=None, h_f=None) -> float:
    """PEB with F_n ~ Uniform(0, F_max] drawn independently per element."""
    if G is None:
        G = build_coupling_matrix(sc.op, sc.panel).G
    if h_f is None:
        h_f = excitation_vector(sc.op, sc.panel).h_f
    damping = np.broadcast_to(np.asarray(sc.elements.damping, dtype=float), (sc.panel.n_elements,))
    F_max = damping / (sc.op.omega * passivity_limit(sc.op, sc.panel.height))
    F = F_max * (1.0 - rng.random(sc.panel.n_elements))
    alpha = resonant_polarizability(F, sc.op.omega, damping)
    m = solve_dipoles_exact(G, alpha, h_f).moments
    return peb_of_moments(sc, m)


# --------------------------------------------------------------------------
# sweep


@dataclass
class SweepRow:
    placement: str
    n_elements: int
    trial: int
    seed: int
    bound_peb: float = math.nan
    physical_bound_peb: float = math.nan
    achieved_peb: float = math.nan
    retracted_peb: float = math.nan
    digital_peb: float = math.nan
    random_peb: float = math.nan
    status: str = "ok"
    wall_time: float | None = None

    def sort_key(self, order: dict):
        return (order.get(self.placement, len(order)), self.n_elements, self.trial)


ROW_FIELDS = [f.name for f in fields(SweepRow)]
PEB_FIELDS = ("bound_peb", "physical_bound_peb", "achieved_peb", "retracted_peb", "digital_peb", "random_peb")


def sweep_cells(cfg: dict) -> list:
    sw = cfg["sweep"]
    return [(kind, int(n)) for kind in sw["placements"] for n in sw["n_values"]]


def run_trial(cfg: dict, cell: int, placement: str, n_elements: int, trial: int, timing: bool = False) -> SweepRow:
    """One (placement, N, trial) cell: layout, design, evaluation and baselines."""
    from .designer import design

    t0 = time.perf_counter()
    master = int(cfg["seed"])
    row = SweepRow(placement, n_elements, trial, trial_seed(master, cell, trial))
    streams = trial_streams(master, cell, trial)
    statuses = []
    try:
        sc = build_scenario(cfg, placement, n_elements, streams)
        dc = cfg["design"]
        out = design(
            sc,
            mode=dc["extraction"],
            seed=streams["extraction"],
            full_lambda=bool(dc.get("full_lambda", False)),
            refine=bool(dc.get("refine", True)),
        )
        row.bound_peb = out.sdp.bound
        row.physical_bound_peb = out.physical_bound
        row.achieved_peb = out.evaluation.achieved
        row.retracted_peb = out.retracted_peb
        if out.result.status != "ok":
            statuses.append(out.result.status)
        if not out.evaluation.passive:
            statuses.append("passivity-audit-failed")
        bl = cfg["sweep"]["baselines"]
        if bl.get("digital", True):
            row.digital_peb = out.digital_peb
        if bl.get("random", True):
            try:
                row.random_peb = random_strength_peb(sc, streams["baseline"])
            except MetasenseError as exc:
                row.random_peb = math.inf
                statuses.append(f"random:{type(exc).__name__}")
    except Exception as exc:  # noqa: BLE001 - failures are recorded, never raised
        log.warning("cell %s N=%d trial %d failed: %s", placement, n_elements, trial, exc)
        statuses.append(f"{type(exc).__name__}: {exc}")
    for name in PEB_FIELDS:
        if math.isinf(getattr(row, name)) and "unobservable" not in statuses:
            statuses.append("unobservable")
    row.status = "ok" if not statuses else ";".join(statuses)
    if timing:
        row.wall_time = time.perf_counter() - t0
    return row


def _worker_init():
    # one BLAS thread per process: results must not depend on the thread count
    from threadpoolctl import threadpool_limits

    global _LIMITS
    _LIMITS = threadpool_limits(1)


def _run_job(args):
    return run_trial(*args)


def run_sweep(cfg: dict, workers: int | None = None, timing: bool = False, progress=None) -> list:
    """Run every (placement, N, trial) cell; rows come back in canonical order."""
    check_config(cfg)
    trials = int(cfg["sweep"]["trials"])
    jobs = [
        (cfg, ci, kind, n, t, timing)
        for ci, (kind, n) in enumerate(sweep_cells(cfg))
        for t in range(trials)
    ]
    workers = int(workers if workers is not None else cfg.get("workers", 1))
    rows = []
    if workers <= 1:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(1):
            for job in jobs:
                rows.append(_run_job(job))
                if progress:
                    progress(rows[-1])
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init) as pool:
            for row in pool.map(_run_job, jobs, chunksize=1):
                rows.append(row)
                if progress:
                    progress(row)
    order = {k: i for i, k in enumerate(cfg["sweep"]["placements"])}
    rows.sort(key=lambda r: r.sort_key(order))
    return rows


# --------------------------------------------------------------------------
# output


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_csv(rows, path, include_timing: bool = False) -> Path:
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    path = Path(path)
    cols = ROW_FIELDS if include_timing else [c for c in ROW_FIELDS if c != "wall_time"]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                d = asdict(r)
                w.writerow([_fmt(d[c]) for c in cols])
        write_summary(rows, summary_path(path))
    except OSError as exc:
        raise OSError(f"writing sweep output to {path} failed: {exc}") from exc
    return path


def summary_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".summary.csv")


def read_csv(path) -> list:
    out = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for f in fields(SweepRow):
                if f.name not in rec:
                    continue
                v = rec[f.name]
                if f.name in ("n_elements", "trial", "seed"):
                    kw[f.name] = int(v)
                elif f.name in PEB_FIELDS or f.name == "wall_time":
                    kw[f.name] = float(v) if v != "" else None
                else:
                    kw[f.name] = v
            out.append(SweepRow(**kw))
    return out


def summarize(rows) -> list:
    """Per-cell mean and median of every PEB column, plus the win fraction."""
    cells: dict = {}
    for r in rows:
        cells.setdefault((r.placement, r.n_elements), []).append(r)
    out = []
    for (kind, n), rs in cells.items():
        rec = {"placement": kind, "n_elements": n, "trials": len(rs)}
        for name in PEB_FIELDS:
            v = np.array([getattr(r, name) for r in rs], dtype=float)
            v = v[~np.isnan(v)]
            rec[f"{name}_mean"] = float(np.mean(v)) if v.size else math.nan
            rec[f"{name}_median"] = float(np.median(v)) if v.size else math.nan
        a = np.array([r.achieved_peb for r in rs], dtype=float)
        b = np.array([r.random_peb for r in rs], dtype=float)
        ok = ~(np.isnan(a) | np.isnan(b))
        rec["optimized_wins"] = float(np.mean(a[ok] < b[ok])) if ok.any() else math.nan
        rec["failures"] = sum(r.status != "ok" for r in rs)
        out.append(rec)
    return out


def write_summary(rows, path) -> Path:
    recs = summarize(rows)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(recs[0].keys()))
        for rec in recs:
            w.writerow([_fmt(v) for v in rec.values()])
    return path


def write_svg(rows, path) -> Path:
    """Minimal static PEB-vs-N plot (log-log), one curve per placement and column."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    recs = summarize(rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in dict.fromkeys(r["placement"] for r in recs):
        rs = sorted((r for r in recs if r["placement"] == kind), key=lambda r: r["n_elements"])
        n = [r["n_elements"] for r in rs]
        for name, style in (("achieved_peb", "-o"), ("random_peb", "--x"), ("digital_peb", ":s"), ("bound_peb", "-.")):
            ax.loglog(n, [r[f"{name}_mean"] for r in rs], style, label=f"{kind} {name.replace('_peb', '')}")
    ax.set_xlabel("number of elements N")
    ax.set_ylabel("PEB [m]")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def cpu_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))
