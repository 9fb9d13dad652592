"""Command-line entry point: ``agvsched run | sweep | channel-check | replay``.

Every subcommand reads one YAML file (a path or the name of a bundled
preset) and accepts ``--set dotted.key=value`` overrides. On failure the
last stderr line is a JSON object ``{"error": kind, "message": ...}`` and the
exit code tells the kind apart.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import (ConfigError, channel_from_dict, config_kind, load_yaml, scenario_from_dict,
                     sweep_from_dict)
from .experiments import ResultTable, channel_check, crossovers, emit, run_sweep
from .orchestrator import (Metrics, build_scenario, graph_from_config, read_events, run_world,
                           write_events)

log = logging.getLogger("agvsched")

EXIT_OK = 0
EXIT_FAILURE = 1  # unexpected error
EXIT_CONFIG = 2   # bad arguments or configuration
EXIT_IO = 3       # cannot read or write a file
EXIT_MISMATCH = 4  # replay verification found a difference


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


def preset_names() -> list[str]:
    root = resources.files("agvsched") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_config_source(name: str) -> dict:
    """YAML mapping from a file path, or from a bundled preset name."""
    path = Path(name)
    if path.suffix in (".yaml", ".yml") or path.exists():
        return load_yaml(path)
    res = resources.files("agvsched") / "presets" / f"{name}.yaml"
    if not res.is_file():
        raise ConfigError(f"config {name!r} is neither a file nor a preset "
                          f"(presets: {', '.join(preset_names())})")
    with resources.as_file(res) as p:
        return load_yaml(p)


def _write_text(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text)
    except OSError as exc:
        raise CliError("io", f"cannot write {out}: {exc.strerror}", EXIT_IO) from None


def _emit(table: ResultTable, out: str | None, fmt: str) -> None:
    _write_text(emit(table, None, fmt), out)


# --------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    data = load_config_source(args.config)
    if config_kind(data) != "scenario":
        raise ConfigError(f"{args.config}: 'run' needs a scenario config, got a {config_kind(data)} config")
    config = scenario_from_dict(data, args.set)
    seed = config.seeds[0] if args.seed is None else args.seed
    world = build_scenario(config, seed)
    metrics = run_world(world)
    if args.events:
        buf = io.StringIO()
        meta = {"meta": {"version": __version__, "seed": seed, "config": config.model_dump(mode="json")}}
        write_events([meta], buf)
        write_events(world.events, buf)
        _write_text(buf.getvalue(), args.events)
    if args.format == "json":
        _write_text(json.dumps({"seed": seed, **metrics.row()}, sort_keys=True) + "\n", args.out)
    else:
        table = ResultTable("run", ["seed"] + Metrics.columns(), [{"seed": seed, **metrics.row()}])
        _emit(table, args.out, "csv")
    log.info("seed %d: makespan %d%s", seed, metrics.makespan,
             " (slot cap reached)" if metrics.timeout else "")
    return EXIT_OK


def cmd_sweep(args) -> int:
    data = load_config_source(args.config)
    if config_kind(data) != "sweep":
        raise ConfigError(f"{args.config}: 'sweep' needs a config with 'axis' and 'values'")
    spec = sweep_from_dict(data, args.set)

    def progress(curve, x, seed, m):
        log.info("%s %s=%s seed %d: makespan %d%s", curve, spec.axis, x, seed, m.makespan,
                 " TIMEOUT" if m.timeout else "")

    table = run_sweep(spec, progress=progress)
    _emit(table, args.out, args.format)
    return EXIT_OK


def cmd_channel_check(args) -> int:
    data = load_config_source(args.config)
    if config_kind(data) != "channel":
        raise ConfigError(f"{args.config}: 'channel-check' needs a config with kind: channel")
    spec = channel_from_dict(data, args.set)
    table = channel_check(spec)
    if args.format == "plot":
        from .experiments import plot_data, to_csv
        _write_text(to_csv(plot_data(table, spec.y, spec.curve)), args.out)
    else:
        _emit(table, args.out, "csv")
    n_pass = sum(1 for r in table.rows if r["pass"])
    log.info("%d of %d points agree within 3 standard errors", n_pass, len(table.rows))
    for c in crossovers(table):
        log.info("C=%d D=%d: S=1 overtakes S=2 at K=%s analytically, K=%s in simulation",
                 c["C"], c["D"], c["analytic"], c["mc"])
    return EXIT_OK


def render_slot(graph, positions: Sequence[int]) -> str:
    """Text picture of one slot, north row first.

    Digits count AGVs per cell, ``#`` is a production cell and ``r`` an
    empty resupply station.
    """
    counts: dict[int, int] = {}
    for v in positions:
        counts[v] = counts.get(v, 0) + 1
    resupply = set(graph.resupply_nodes)
    lines = []
    for y in reversed(range(graph.height)):
        row = []
        for x in range(graph.width):
            v = graph.index((x, y))
            n = counts.get(v, 0)
            if n:
                row.append(str(n) if n < 10 else "+")
            elif not graph.traversable(v):
                row.append("#")
            else:
                row.append("r" if v in resupply else ".")
        lines.append("".join(row))
    return "\n".join(lines)


def cmd_replay(args) -> int:
    try:
        with open(args.events) as fh:
            records = read_events(fh)
    except OSError as exc:
        raise CliError("io", f"cannot read {args.events}: {exc.strerror}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError("format", f"{args.events}: not a JSON-lines event log ({exc.msg})",
                       EXIT_CONFIG) from None
    meta = records[0]["meta"] if records and "meta" in records[0] else None
    events = records[1:] if meta else records
    if meta is None:
        raise CliError("format", f"{args.events}: missing meta header", EXIT_CONFIG)
    config = scenario_from_dict(meta["config"])
    graph = graph_from_config(config)

    if args.verify:
        world = build_scenario(config, meta["seed"])
        run_world(world)
        a, b = io.StringIO(), io.StringIO()
        write_events(world.events, a)
        write_events(events, b)
        if a.getvalue() != b.getvalue():
            raise CliError("mismatch", "re-running the logged config gave a different event log",
                           EXIT_MISMATCH)
        log.info("event log reproduced exactly (%d slots)", len(events))

    lo = args.start if args.start is not None else 0
    hi = args.stop if args.stop is not None else (events[-1]["t"] if events else 0)
    out = []
    for rec in events:
        if lo <= rec["t"] <= hi:
            head = f"t={rec['t']}"
            for key in ("pickups", "deliveries", "conflicts"):
                if key in rec:
                    head += f" {key}={len(rec[key])}"
            out.append(head)
            out.append(render_slot(graph, rec["pos"]))
    _write_text("\n".join(out) + ("\n" if out else ""), args.out)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agvsched", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"agvsched {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, formats):
        sp.add_argument("--config", required=True, help="YAML file or preset name")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key (repeatable)")
        sp.add_argument("--out", help="output file (default: stdout)")
        sp.add_argument("--format", choices=formats, default=formats[0])

    r = sub.add_parser("run", help="run one scenario for one seed")
    common(r, ["csv", "json"])
    r.add_argument("--seed", type=int, help="default: first seed of the config")
    r.add_argument("--events", help="write the per-slot event log (JSON lines) here")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="sweep one axis over seeds and variants")
    common(s, ["csv", "plot"])
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("channel-check", help="analytic vs Monte Carlo uplink success")
    common(c, ["csv", "plot"])
    c.set_defaults(func=cmd_channel_check)

    rp = sub.add_parser("replay", help="render an event log as text grids")
    rp.add_argument("--events", required=True)
    rp.add_argument("--out")
    rp.add_argument("--start", type=int)
    rp.add_argument("--stop", type=int)
    rp.add_argument("--verify", action="store_true",
                    help="re-run the logged config and seed and compare")
    rp.set_defaults(func=cmd_replay)

    sub.add_parser("presets", help="list bundled presets").set_defaults(
        func=lambda args: (print("\n".join(preset_names())), EXIT_OK)[1])
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        return _fail("usage", "invalid command line (see usage above)", EXIT_CONFIG)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_IO)
    except Exception as exc:  # noqa: BLE001 - last-resort report
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
