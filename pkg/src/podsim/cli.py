"""Command-line frontend: ``podsim {schedule,simulate,dse,ict-bench}``.

Every flag may also be set through an environment variable named
``PODSIM_`` plus the flag in upper case with dashes as underscores, e.g.
``PODSIM_PODS=16``. Command-line values win over the environment.
Failures print one JSON error record on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import random
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .dse import (
    FULL_PRESET,
    REDUCED_PRESET,
    sweep_banks,
    sweep_granularity,
    sweep_interconnect,
    sweep_partition,
    sweep_shape,
    sweep_tenancy,
    write_csv,
)
from .interconnect import TOPOLOGIES, InterconnectConfig, cost_model, feasibility_rate
from .powermodel import EnergyParams, peak_power, pods_for_tdp
from .scheduler import PodConfig, Schedule, schedule, validate
from .simulator import BankConfig, simulate
from .tiling import TileGraph
from .workload import ModelGraph, load_builtin, load_model, merge_models

ENV_PREFIX = "PODSIM_"
DSE_PRESETS = ("shape", "granularity", "partition", "banks", "tenancy", "interconnect")


class CliError(Exception):
    """Bad invocation; reported as a usage error record."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit(2)
        raise CliError(message)


# --------------------------------------------------------------------------
# argument handling


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", action="append", help="shipped model name or model file; repeat to co-schedule")
    p.add_argument("--batch", type=int, default=None, help="batch size override")
    p.add_argument("--rows", type=int, default=32, help="array rows r")
    p.add_argument("--cols", type=int, default=32, help="array columns c")
    p.add_argument("--u", type=int, default=16, help="columns filled per cycle")
    p.add_argument("--v", type=int, default=16, help="rows drained per cycle")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pods", type=int, default=None, help="pod count (default 64)")
    g.add_argument("--tdp", type=float, default=None, help="power budget in W; picks the pod count")
    p.add_argument("--topology", choices=TOPOLOGIES, default="butterfly", help="network topology")
    p.add_argument("--expansion", type=int, default=2, help="butterfly plane count k")
    p.add_argument("--bank-size", type=int, default=256, help="bank capacity in KB")
    p.add_argument("--kpart", type=int, default=None, help="X row-block length; 0 disables partitioning")
    p.add_argument("--params", default=None, help="JSON file overriding energy parameters")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="podsim", description="Systolic pod accelerator scheduler, simulator and design-space sweeps.")
    parser.add_argument("--version", action="version", version=f"podsim {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("schedule", help="tile and schedule a model; writes schedule.json")
    _add_common(p)
    p.add_argument("--dump-tiles", action="store_true", help="also write tiles.json with every tile op")
    p.add_argument("--validate", action="store_true", help="run the schedule validator")

    p = sub.add_parser("simulate", help="simulate a schedule; writes stats.json and occupancy.csv")
    _add_common(p)
    p.add_argument("--schedule", default=None, help="schedule.json from the schedule command")

    p = sub.add_parser("dse", help="run a design-space sweep; writes <preset>.csv")
    _add_common(p)
    p.add_argument("--preset", choices=DSE_PRESETS, default="granularity", help="which sweep")
    p.add_argument("--full", action="store_true", help="use the full benchmark set instead of the reduced one")
    p.add_argument("--workers", type=int, default=1, help="worker processes")

    p = sub.add_parser("ict-bench", help="routing feasibility and cost per network; writes ict_bench.csv")
    _add_common(p)
    p.add_argument("--ports", type=int, action="append", help="port counts (default 8 16 64 256)")
    p.add_argument("--trials", type=int, default=200, help="random demand sets per point")
    p.add_argument("--max-fanout", type=int, default=0, help="multicast fan-out bound (0 = unbounded)")
    return parser


def _apply_env(parser: argparse.ArgumentParser, environ) -> None:
    """Use PODSIM_* environment variables as defaults for matching flags."""
    subs = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    parsers = [parser] + [p for a in subs for p in a.choices.values()]
    for p in parsers:
        for action in p._actions:
            long = [o for o in action.option_strings if o.startswith("--")]
            if not long or action.dest in ("help", "version"):
                continue
            key = ENV_PREFIX + long[0][2:].upper().replace("-", "_")
            if key not in environ:
                continue
            raw = environ[key]
            if isinstance(action, argparse._StoreTrueAction):
                value = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(action, argparse._AppendAction):
                conv = action.type or str
                value = [conv(x) for x in raw.split(",") if x]
            else:
                conv = action.type or str
                try:
                    value = conv(raw)
                except ValueError as exc:
                    raise CliError(f"{key}: {exc}") from exc
                if action.choices is not None and value not in action.choices:
                    raise CliError(f"{key}: {value!r} not in {list(action.choices)}")
            p.set_defaults(**{action.dest: value})


# --------------------------------------------------------------------------
# shared helpers


def _load_one(ref: str, batch: Optional[int]) -> ModelGraph:
    if os.path.exists(ref):
        return load_model(ref, batch)
    return load_builtin(ref, batch)


def _load_models(refs: Optional[Sequence[str]], batch: Optional[int]) -> ModelGraph:
    if not refs:
        raise CliError("--model is required")
    models = [_load_one(r, batch) for r in refs]
    return models[0] if len(models) == 1 else merge_models(models)


def _params(args) -> EnergyParams:
    if args.params is None:
        return EnergyParams()
    if not os.path.exists(args.params):
        raise CliError(f"parameter file {args.params} does not exist")
    return EnergyParams.from_file(args.params)


def _pod_count(args, params: EnergyParams) -> int:
    if args.tdp is not None:
        return pods_for_tdp(args.rows, args.cols, InterconnectConfig(args.topology, 1, args.expansion), params, args.tdp)
    return 64 if args.pods is None else args.pods


def _configs(args, params: EnergyParams):
    P = _pod_count(args, params)
    pods = PodConfig(pods=P, rows=args.rows, cols=args.cols, U=min(args.u, args.cols), V=min(args.v, args.rows))
    nets = InterconnectConfig(args.topology, max(P, 1), args.expansion)
    return pods, nets


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(record: dict) -> None:
    print(json.dumps(record, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# commands


def cmd_schedule(args) -> int:
    params = _params(args)
    model = _load_models(args.model, args.batch)
    pods, nets = _configs(args, params)
    tg = TileGraph(model, args.rows, args.cols, args.kpart)
    s = schedule(tg, pods, pods.pods, nets)
    out = _outdir(args)
    dump = s.to_json()
    dump["source"] = {"models": list(args.model), "batch": args.batch}
    with open(out / "schedule.json", "w") as fh:
        json.dump(dump, fh, separators=(",", ":"))
    if args.dump_tiles:
        tiles = [
            {"tile": t.id, "layer": t.layer, "index": [t.b, t.i, t.j, t.k], "dims": [t.m, t.n, t.p], "group": list(t.group)}
            for t in tg.ops()
        ]
        with open(out / "tiles.json", "w") as fh:
            json.dump(tiles, fh, indent=1)
    record = {
        "model": model.name,
        "pods": pods.pods,
        "tile_ops": s.n_ops,
        "slices": s.n_slices,
        "chained": s.n_chained,
        "adds": s.n_adds,
        "schedule": str(out / "schedule.json"),
    }
    if args.validate:
        problems = validate(s, tg)
        record["violations"] = problems
        if problems:
            _emit(record)
            return 1
    _emit(record)
    return 0


def _schedule_from_file(path: str, args) -> Schedule:
    with open(path) as fh:
        data = json.load(fh)
    src = data.get("source") or {}
    refs = src.get("models") or args.model
    model = _load_models(refs, src.get("batch", args.batch))
    cfg = data["config"]
    tg = TileGraph(model, cfg["rows"], cfg["cols"], cfg["k_part"])
    return Schedule.from_json(data, tg)


def cmd_simulate(args) -> int:
    params = _params(args)
    if args.schedule:
        if not os.path.exists(args.schedule):
            raise CliError(f"schedule file {args.schedule} does not exist")
        s = _schedule_from_file(args.schedule, args)
    else:
        model = _load_models(args.model, args.batch)
        pods, nets = _configs(args, params)
        s = schedule(TileGraph(model, args.rows, args.cols, args.kpart), pods, pods.pods, nets)
    banks = BankConfig(s.n_banks, args.bank_size * 1024)
    stats = simulate(s, banks, s.nets, params)
    record = stats.as_dict()
    if s.pods.pods > 0:
        rep = peak_power(s.pods, s.n_banks, s.nets, params)
        rep.utilization = stats.utilization
        record["power"] = rep.as_dict()
    out = _outdir(args)
    with open(out / "stats.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    occ = s.occupancy()
    with open(out / "occupancy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pod"] + [f"s{i}" for i in range(occ.shape[1])])
        for q in range(occ.shape[0]):
            w.writerow([q] + [int(v) for v in occ[q]])
    _emit(record)
    return 0


def cmd_dse(args) -> int:
    params = _params(args)
    models = list(args.model) if args.model else list(FULL_PRESET if args.full else REDUCED_PRESET)
    P = _pod_count(args, params)
    preset = args.preset
    if preset == "shape":
        grid = [(r, c) for r in (16, 32, 64, 128) for c in (16, 32, 64, 128)]
        rows = sweep_shape(grid, models, args.tdp or 400.0, P if args.pods else 64, args.topology, args.expansion, params, args.workers)
    elif preset == "granularity":
        rows = sweep_granularity(models=models, tdp_w=args.tdp or 400.0, topology=args.topology, expansion=args.expansion, params=params, workers=args.workers)
    elif preset == "partition":
        r = args.rows
        rows = sweep_partition([r // 2, r, 2 * r, 0], models if args.model else ["resnet50_224"], P, r, args.cols, args.topology, args.expansion, params, args.workers)
    elif preset == "banks":
        model = models[0] if args.model else "resnet152_224"
        rows = sweep_banks(model=model, batch=args.batch or 8, pods=P, topology=args.topology, expansion=args.expansion, params=params)
    elif preset == "tenancy":
        sets = [tuple(models)] if args.model else [("resnet152_224",), ("bert_medium_s100",), ("resnet152_224", "bert_medium_s100")]
        rows = sweep_tenancy(sets, (args.batch or 1,), P, args.topology, args.expansion, params)
    else:
        rows = sweep_interconnect(models=models, pods=P, params=params, workers=args.workers)
    out = _outdir(args) / f"{preset}.csv"
    write_csv(rows, out)
    _emit({"preset": preset, "rows": len(rows), "csv": str(out)})
    return 0


def cmd_ict_bench(args) -> int:
    ports = args.ports or [8, 16, 64, 256]
    rows: List[dict] = []
    seed = random.Random(args.seed).randrange(1 << 30)
    for N in ports:
        for topo, k in (("butterfly", 1), ("butterfly", 2), ("butterfly", 4), ("crossbar", 1), ("benes_copy", 1)):
            cfg = InterconnectConfig(topo, N, k)
            cost = cost_model(cfg)
            rows.append(
                {
                    "topology": topo,
                    "N": N,
                    "k": k,
                    "feasibility": feasibility_rate(cfg, args.trials, seed, args.max_fanout),
                    "latency": cost["latency"],
                    "mw_per_byte": cost["power_per_byte_mw"],
                    "switches": cost["switches"],
                }
            )
    out = _outdir(args) / "ict_bench.csv"
    write_csv(rows, out)
    _emit({"rows": len(rows), "csv": str(out)})
    return 0


COMMANDS = {"schedule": cmd_schedule, "simulate": cmd_simulate, "dse": cmd_dse, "ict-bench": cmd_ict_bench}


def main(argv: Optional[Sequence[str]] = None, environ=None) -> int:
    environ = os.environ if environ is None else environ
    try:
        parser = build_parser()
        _apply_env(parser, environ)
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # report every failure as a record, not a traceback
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
