"""Command-line entry point: ``binpick {simulate,tune,compare,fuse}``.

Exit codes: 0 success, 2 bad configuration or input file, 3 simulation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .cycle_sim import ExperimentConfig, Strategy, run_experiment
from .depth_io import MalformedDepthFile, load_view, save_view
from .fusion import ViewSet, fuse_detailed
from .geometry import GeometryError
from .scene import PlacementFailure
from .timing import TimingBreakdown
from .tuner import run_sweep, select_parameters, trials_table

logger = logging.getLogger("binpick")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SIMULATION = 3


class InputError(Exception):
    pass


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], fields: list[str] | None = None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, experiment=replace(cfg.experiment, seed=args.seed))
    return cfg


def _timing_block(cfg: ExperimentConfig) -> dict:
    return TimingBreakdown(cfg.path.n, cfg.path.t_ms).as_dict()


def cmd_simulate(args, out: Path) -> int:
    from .plotting import plot_cycles

    cfg = _config(args).experiment
    dump = None
    if args.dump_depth:
        def dump(rep, res):
            ref_pose = res.capture[0].views[0][1]
            save_view(out / f"fused_r{rep:03d}_c{res.cycle:03d}.pgm", res.fused, cfg.camera, ref_pose,
                      drop_out_of_range=True)
    metrics = run_experiment(cfg, on_cycle=dump)
    summary = metrics.summary()
    summary["strategy"] = cfg.strategy.value
    summary["seed"] = cfg.seed
    summary["sensing_timing_ms"] = _timing_block(cfg)
    _write_json(out / "metrics.json", summary)
    _write_csv(out / "cycles.csv", metrics.cycles)
    if metrics.cycles:
        plot_cycles(metrics.cycles, out / "cycles.png")
    print(f"complete_rate={metrics.complete_rate:.4f} searches/experiment={metrics.searches_triggered:.3f} "
          f"cycles={metrics.cycles_run}")
    return EXIT_OK


def cmd_tune(args, out: Path) -> int:
    from .plotting import plot_tuning

    run = _config(args)
    t = run.tuning
    trials = run_sweep(t.env, t.object, run.experiment.seed)
    chosen = select_parameters(trials, t.strict_sigma_band, t.env.working_distance)
    other = select_parameters(trials, not t.strict_sigma_band, t.env.working_distance)
    rows = trials_table(trials)
    report = {
        "seed": run.experiment.seed,
        "object": {"shape": t.object.shape, "dims": list(t.object.dims), "count": t.object.count},
        "strict_sigma_band": t.strict_sigma_band,
        "selected": chosen.as_dict(),
        "selected_other_band": other.as_dict(),
        "trials": len(trials),
    }
    _write_json(out / "metrics.json", report)
    _write_csv(out / "tuning.csv", rows, ["path_id", "v", "t_ms", "n", "recognized_count"])
    plot_tuning(rows, out / "tuning.png", chosen.as_dict())
    print(f"selected n={chosen.n} v={chosen.v:.1f} t={chosen.t_ms} ms "
          f"alpha={np.rad2deg(chosen.alpha):.3f} deg beta={np.rad2deg(chosen.beta):.3f} deg")
    return EXIT_OK


def sign_test(active: list[float], other: list[float]) -> tuple[int, int, float | None]:
    """Wins and losses of ``active`` over paired runs, with a one-sided sign-test p-value.

    Ties are dropped; the p-value is None when fewer than two pairs exist.
    """
    wins = sum(a > b for a, b in zip(active, other))
    losses = sum(a < b for a, b in zip(active, other))
    if len(active) < 2:
        return wins, losses, None
    if wins + losses == 0:
        return wins, losses, 1.0
    return wins, losses, float(binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue)


def compare_strategies(cfg: ExperimentConfig) -> list[dict]:
    results = {s: run_experiment(cfg, strategy=s) for s in Strategy}
    active = [r["complete_rate"] for r in results[Strategy.ACTIVE_MULTIVIEW].per_repetition]
    table = []
    for s, m in results.items():
        row = {
            "strategy": s.value,
            "complete_rate": round(m.complete_rate, 6),
            "searches_per_experiment": round(m.searches_triggered, 6),
            "mean_charged_takt_ms": round(m.mean_charged_takt_ms, 6),
            "cycles": m.cycles_run,
        }
        if s is Strategy.ACTIVE_MULTIVIEW:
            row.update(wins="", losses="", p_value="")
        else:
            wins, losses, p = sign_test(active, [r["complete_rate"] for r in m.per_repetition])
            row.update(wins=wins, losses=losses, p_value="n/a" if p is None else round(p, 6))
        row["per_repetition"] = [r["complete_rate"] for r in m.per_repetition]
        table.append(row)
    return table


def cmd_compare(args, out: Path) -> int:
    from .plotting import plot_compare

    cfg = _config(args).experiment
    table = compare_strategies(cfg)
    _write_json(out / "metrics.json", {"seed": cfg.seed, "repetitions": cfg.repetitions, "strategies": table})
    flat = [{k: v for k, v in r.items() if k != "per_repetition"} for r in table]
    _write_csv(out / "compare.csv", flat)
    plot_compare(table, out / "compare.png")
    cols = ["strategy", "complete_rate", "searches_per_experiment", "mean_charged_takt_ms", "wins", "losses",
            "p_value"]
    heads = ["strategy", "complete_rate", "searches/exp", "takt_ms", "wins", "losses", "p_value"]
    print("  ".join([f"{heads[0]:>24}"] + [f"{h:>13}" for h in heads[1:]]))
    for r in flat:
        print("  ".join([f"{r['strategy']:>24}"] + [f"{str(r[c]):>13}" for c in cols[1:]]))
    return EXIT_OK


def cmd_fuse(args, out: Path) -> int:
    from .plotting import plot_fused

    fusion_cfg = _config(args).experiment.fusion
    views = []
    k = None
    for p in args.inputs:
        if not Path(p).is_file():
            raise InputError(f"{p}: no such depth file")
        try:
            img, ki, pose = load_view(p)
        except MalformedDepthFile as exc:
            raise MalformedDepthFile(f"{p}: {exc}") from None
        if k is None:
            k = ki
        elif ki != k:
            raise InputError(f"{p}: intrinsics differ from {args.inputs[0]}")
        views.append((img, pose))
    res = fuse_detailed(ViewSet(views, k, 0), fusion_cfg)
    save_view(out / "fused_0.pgm", res.image, k, views[0][1])
    diag = {
        "inputs": [Path(p).name for p in args.inputs],
        "votes_histogram": {str(v): c for v, c in res.votes_histogram().items()},
        "dropped_samples": res.dropped,
        "skipped_views": res.skipped_views,
        "invalid_fraction": res.image.invalid_fraction(),
        "input_invalid_fractions": [img.invalid_fraction() for img, _ in views],
    }
    _write_json(out / "metrics.json", diag)
    plot_fused(res.image, res.votes, out / "fused.png")
    print(f"fused {len(views)} view(s): invalid fraction {res.image.invalid_fraction():.4f}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "tune": cmd_tune, "compare": cmd_compare, "fuse": cmd_fuse}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--out", default="out", help="output directory (created if absent)")
    common.add_argument("--dump-depth", action="store_true", help="write fused depth PGMs for every cycle")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="binpick", description="Sensor-on-hand bin-picking simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run picking experiments")
    sub.add_parser("tune", parents=[common], help="sweep (n, v, t) and select parameters")
    sub.add_parser("compare", parents=[common], help="compare the three sensing strategies on paired seeds")
    fp = sub.add_parser("fuse", parents=[common], help="fuse depth PGMs into the first view")
    fp.add_argument("inputs", nargs="+", help="depth PGM files, each with a .txt sidecar")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, out)
    except (ConfigError, MalformedDepthFile, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (GeometryError, PlacementFailure, ValueError, RuntimeError) as exc:
        logger.debug("simulation failed", exc_info=True)
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
