"""Command-line entry point wiring configs to the simulator and optimizer.

Subcommands: optimize-weights, simulate, bound, sweep, summarize. All
randomness flows from seeds in the config; outputs are line-delimited JSON
records for traces and plain JSON documents for everything else, each
embedding the canonicalized config and tool version so artifacts are
self-describing and byte-reproducible.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from pathlib import Path
from typing import Any, Iterable

import numpy as np

import colrel
from colrel.analysis import SummaryTable, bound_constants, bound_value, summarize
from colrel.config import (
    ConfigError,
    RunConfig,
    build_ensemble_from_config,
    build_graph_from_config,
    build_simulation_config,
    canonical_dict,
    canonical_text,
    parse_config,
)
from colrel.objectives import suboptimality
from colrel.protocol import COLREL, AlgorithmVariant, DivergenceError, run_simulation
from colrel.topology import GraphValidationError
from colrel.weights import (
    BisectionError,
    InfeasibleColumnError,
    OptimizationResult,
    check_unbiasedness,
    optimize_weights,
)

TRACE_FIELDS = ("variant", "seed", "r", "suboptimality", "num_connected", "eta_r")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config-error", exc)
    except InfeasibleColumnError as exc:
        return _fail("infeasible-error", exc)
    except BisectionError as exc:
        return _fail("optimizer-error", exc)
    except DivergenceError as exc:
        return _fail("divergence-error", exc)
    except (GraphValidationError, ValueError) as exc:
        return _fail("validation-error", exc)
    except OSError as exc:
        return _fail("io-error", exc)


def _fail(kind: str, exc: Exception) -> int:
    detail = " ".join(str(exc).split())
    print(f"{kind}: {detail}", file=sys.stderr)
    return 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colrel", description=__doc__)
    parser.add_argument("--version", action="version", version=f"colrel {colrel.__version__}")
    sub = parser.add_subparsers(required=True, metavar="command")

    ow = sub.add_parser("optimize-weights", help="optimize relay weights for the config's graph")
    ow.add_argument("--config", required=True)
    ow.add_argument("--out", default=None, help="directory for weights.json")
    ow.set_defaults(func=cmd_optimize_weights)

    sim = sub.add_parser("simulate", help="run the configured variants over all seeds")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", default=None, help="output directory (default: config experiment.out)")
    sim.add_argument("--seeds", type=int, default=None, help="override: use seeds 0..k-1")
    sim.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sim.set_defaults(func=cmd_simulate)

    bnd = sub.add_parser("bound", help="print convergence-bound constants and values")
    bnd.add_argument("--config", required=True)
    bnd.add_argument("--rounds", default=None, help="comma-separated round indices")
    bnd.add_argument("--out", default=None, help="directory for bound.json")
    bnd.set_defaults(func=cmd_bound)

    sw = sub.add_parser("sweep", help="repeat the simulation while varying one config axis")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", required=True, help="dotted config path, e.g. graph.p")
    sw.add_argument("--values", required=True, help="JSON list or comma-separated values")
    sw.add_argument("--out", default=None, help="output directory (default: config experiment.out)")
    sw.add_argument("--seeds", type=int, default=None, help="override: use seeds 0..k-1")
    sw.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sw.set_defaults(func=cmd_sweep)

    summ = sub.add_parser("summarize", help="aggregate trace files across seeds")
    summ.add_argument("traces", nargs="+", help="trace .jsonl files")
    summ.add_argument("--tail", type=float, default=0.1, help="tail fraction for the slope fit")
    summ.add_argument("--out", default=None, help="directory for summary.csv and slopes.json")
    summ.set_defaults(func=cmd_summarize)
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = parse_config(Path(args.config))
    if getattr(args, "seeds", None):
        cfg = parse_config({**canonical_dict(cfg), "experiment": {
            "seeds": {"count": int(args.seeds), "start": 0},
            "out": cfg.experiment.out,
        }})
    return cfg


def _out_dir(args: argparse.Namespace, cfg: RunConfig | None, required: bool) -> Path | None:
    out = args.out or (cfg.experiment.out if cfg is not None else None)
    if out is None:
        if required:
            raise ConfigError("no output directory: pass --out or set experiment.out")
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump_json(path: Path, doc: dict[str, Any]) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_optimize_weights(args: argparse.Namespace) -> int:
    cfg = parse_config(Path(args.config))
    g = build_graph_from_config(cfg)
    result = _optimize_for(cfg, g)
    report = check_unbiasedness(g, result.weights, tol=10.0 * cfg.optimizer.bisect_tol)

    out = _out_dir(args, cfg, required=False)
    doc = {
        "version": colrel.__version__,
        "config": canonical_dict(cfg),
        "n": g.n,
        "matrix": [[float(v) for v in row] for row in result.weights.matrix],
        "s_history": list(result.s_history),
        "final_s": result.s_history[-1],
        "sweeps": result.sweeps,
        "converged": result.converged,
        "residuals": [float(v) for v in report.residuals],
        "max_residual": float(report.residuals.max()),
        "support_ok": report.structural_ok,
    }
    if out is not None:
        _dump_json(out / "weights.json", doc)

    print(f"optimize-weights: n={g.n} sweeps={result.sweeps} converged={result.converged}")
    print(f"  S: initial={result.s_history[0]:.6g} final={result.s_history[-1]:.6g}")
    print(f"  max unbiasedness residual: {doc['max_residual']:.3e}")
    if out is not None:
        print(f"  wrote {out / 'weights.json'}")
    return 0


def _optimize_for(cfg: RunConfig, g) -> OptimizationResult:
    return optimize_weights(
        g,
        max_sweeps=cfg.optimizer.max_sweeps,
        bisect_tol=cfg.optimizer.bisect_tol,
        stall_tol=cfg.optimizer.stall_tol,
    )


def _simulate_task(cfg_doc: dict[str, Any], variant_kind: str, seed: int) -> list[dict[str, Any]]:
    """Run one (variant, seed) cell; rebuilds state so it can run anywhere."""
    cfg = parse_config(cfg_doc)
    g = build_graph_from_config(cfg)
    ens = build_ensemble_from_config(cfg)
    if variant_kind == COLREL:
        variant = AlgorithmVariant.colrel(_optimize_for(cfg, g).weights)
    else:
        variant = AlgorithmVariant(variant_kind)
    records = run_simulation(ens, g, variant, build_simulation_config(cfg), seed)
    return [
        {
            "type": "round",
            "variant": rec.variant,
            "seed": rec.seed,
            "r": rec.r,
            "suboptimality": rec.suboptimality,
            "num_connected": rec.num_connected,
            "eta_r": rec.eta,
        }
        for rec in records
    ]


def _run_matrix(cfg: RunConfig, jobs: int) -> dict[str, list[dict[str, Any]]]:
    """All (variant, seed) cells, grouped per variant in deterministic order."""
    cfg_doc = canonical_dict(cfg)
    tasks = [(variant, seed) for variant in cfg.protocol.variants for seed in cfg.experiment.seeds]
    results: dict[tuple[str, int], list[dict[str, Any]]] = {}
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(_simulate_task, cfg_doc, variant, seed): (variant, seed)
                for variant, seed in tasks
            }
            for future in concurrent.futures.as_completed(futures):
                results[futures[future]] = future.result()
    else:
        for variant, seed in tasks:
            results[(variant, seed)] = _simulate_task(cfg_doc, variant, seed)

    grouped: dict[str, list[dict[str, Any]]] = {v: [] for v in cfg.protocol.variants}
    for variant in cfg.protocol.variants:
        for seed in cfg.experiment.seeds:
            grouped[variant].extend(results[(variant, seed)])
    return grouped


def _write_traces(out: Path, cfg: RunConfig, grouped: dict[str, list[dict[str, Any]]]) -> list[Path]:
    paths = []
    for variant, records in grouped.items():
        path = out / f"traces_{variant}.jsonl"
        meta = {
            "type": "meta",
            "version": colrel.__version__,
            "variant": variant,
            "config": canonical_dict(cfg),
        }
        lines = [json.dumps(meta, sort_keys=True)]
        lines.extend(json.dumps(rec, sort_keys=True) for rec in records)
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg, required=True)
    grouped = _run_matrix(cfg, args.jobs)
    paths = _write_traces(out, cfg, grouped)

    print(
        f"simulate: n={cfg.graph.n} variants={list(cfg.protocol.variants)} "
        f"seeds={len(cfg.experiment.seeds)} R={cfg.protocol.R}"
    )
    for variant, records in grouped.items():
        final_r = cfg.protocol.R - 1
        finals = [rec["suboptimality"] for rec in records if rec["r"] == final_r]
        print(f"  {variant}: mean final suboptimality = {float(np.mean(finals)):.6g}")
    for path in paths:
        print(f"  wrote {path}")
    return 0


def cmd_bound(args: argparse.Namespace) -> int:
    cfg = parse_config(Path(args.config))
    g = build_graph_from_config(cfg)
    ens = build_ensemble_from_config(cfg)
    result = _optimize_for(cfg, g)
    consts = bound_constants(ens, g, result.weights, cfg.protocol.T)
    init_gap = suboptimality(ens, np.zeros(ens.d))

    if args.rounds:
        rounds = sorted({int(tok) for tok in str(args.rounds).split(",") if tok.strip()})
        below = [r for r in rounds if r < consts.r0]
        if below:
            raise ConfigError(f"rounds {below} lie below r0 = {consts.r0:.3f}")
    else:
        start = int(np.ceil(consts.r0))
        rounds = sorted({int(round(v)) for v in np.geomspace(start, 100 * start, 8)})

    rows = [{"r": r, "bound": bound_value(consts, init_gap, cfg.protocol.T, r)} for r in rounds]

    print(f"bound: S={consts.S:.6g} B={consts.B:.6g} C1={consts.C1:.6g} "
          f"C2={consts.C2:.6g} C3={consts.C3:.6g} r0={consts.r0:.6g}")
    print(f"  init_gap={init_gap:.6g} T={cfg.protocol.T}")
    print(f"  {'r':>10} {'bound':>14}")
    for row in rows:
        print(f"  {row['r']:>10d} {row['bound']:>14.6g}")

    out = _out_dir(args, cfg, required=False)
    if out is not None:
        _dump_json(out / "bound.json", {
            "version": colrel.__version__,
            "config": canonical_dict(cfg),
            "constants": {
                "S": consts.S, "B": consts.B, "C1": consts.C1, "C2": consts.C2,
                "C3": consts.C3, "r0": consts.r0,
            },
            "init_gap": init_gap,
            "rows": rows,
        })
        print(f"  wrote {out / 'bound.json'}")
    return 0


_SWEEP_AXES = {
    "graph.p": ("graph", "p"),
    "graph.topology.k": ("graph", "topology", "k"),
    "objective.d": ("objective", "d"),
    "objective.mu": ("objective", "mu"),
    "objective.L": ("objective", "L"),
    "objective.sigma": ("objective", "sigma"),
    "objective.heterogeneity": ("objective", "heterogeneity"),
    "objective.seed": ("objective", "seed"),
    "protocol.T": ("protocol", "T"),
    "protocol.R": ("protocol", "R"),
    "protocol.momentum": ("protocol", "momentum"),
    "protocol.eta.value": ("protocol", "eta", "value"),
}


def _parse_sweep_values(text: str) -> list[Any]:
    try:
        values = json.loads(text)
        if not isinstance(values, list):
            raise ConfigError(f"sweep values must form a list, got {values!r}")
        return values
    except json.JSONDecodeError:
        pass
    out: list[Any] = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(int(tok))
        except ValueError:
            try:
                out.append(float(tok))
            except ValueError as exc:
                raise ConfigError(f"cannot parse sweep value {tok!r}") from exc
    if not out:
        raise ConfigError("no sweep values given")
    return out


def cmd_sweep(args: argparse.Namespace) -> int:
    base = _load_config(args)
    out = _out_dir(args, base, required=True)
    if args.axis not in _SWEEP_AXES:
        raise ConfigError(f"unsupported sweep axis {args.axis!r}; choose from {sorted(_SWEEP_AXES)}")
    values = _parse_sweep_values(args.values)

    manifest_points = []
    for idx, value in enumerate(values):
        doc = canonical_dict(base)
        node: Any = doc
        *parents, leaf = _SWEEP_AXES[args.axis]
        for key in parents:
            node = node[key]
        node[leaf] = value
        cfg = parse_config(doc)

        point_dir = out / f"point_{idx:03d}"
        point_dir.mkdir(parents=True, exist_ok=True)
        grouped = _run_matrix(cfg, args.jobs)
        _write_traces(point_dir, cfg, grouped)
        manifest_points.append({"index": idx, "value": value, "dir": point_dir.name})
        print(f"sweep point {idx}: {args.axis} = {value} -> {point_dir}")

    _dump_json(out / "manifest.json", {
        "version": colrel.__version__,
        "config": canonical_dict(base),
        "axis": args.axis,
        "values": values,
        "points": manifest_points,
    })
    print(f"sweep: wrote {out / 'manifest.json'}")
    return 0


def _read_trace_records(paths: Iterable[str]) -> list[dict[str, Any]]:
    records = []
    for raw in paths:
        path = Path(raw)
        with path.open() as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}:{line_no}: invalid JSON record: {exc}") from exc
                if doc.get("type") == "meta":
                    continue
                records.append(doc)
    return records


def cmd_summarize(args: argparse.Namespace) -> int:
    records = _read_trace_records(args.traces)
    table = summarize(records, tail_fraction=args.tail)

    csv_lines = ["variant,r,mean,stderr,ci_lo,ci_hi,count"]
    csv_lines.extend(
        f"{row.variant},{row.r},{row.mean!r},{row.stderr!r},{row.ci_lo!r},{row.ci_hi!r},{row.count}"
        for row in table.rows
    )

    out = _out_dir(args, None, required=False) if args.out else None
    if out is not None:
        (out / "summary.csv").write_text("\n".join(csv_lines) + "\n")
        _dump_json(out / "slopes.json", {
            "version": colrel.__version__,
            "tail_fraction": args.tail,
            "slopes": [
                {"variant": f.variant, "slope": f.slope, "r_lo": f.r_lo, "r_hi": f.r_hi,
                 "points": f.points}
                for f in table.slopes
            ],
        })
        print(f"summarize: {len(table.rows)} cells from {len(args.traces)} file(s)")
        for fit in table.slopes:
            print(f"  {fit.variant}: tail slope {fit.slope:.3f} over r in [{fit.r_lo}, {fit.r_hi}]")
        print(f"  wrote {out / 'summary.csv'} and {out / 'slopes.json'}")
    else:
        print("\n".join(csv_lines))
        for fit in table.slopes:
            print(f"# slope variant={fit.variant} slope={fit.slope!r} "
                  f"window=[{fit.r_lo},{fit.r_hi}] points={fit.points}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
