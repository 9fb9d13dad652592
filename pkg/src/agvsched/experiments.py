"""Sweeps, analytic vs Monte Carlo comparison, and CSV / plot-data output."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .config import ChannelCheckSpec, ScenarioConfig, SweepSpec, scenario_from_dict, set_dotted
from .netsim import ChannelConfig, crossover_k, monte_carlo_success, p_success_analytic
from .orchestrator import Metrics, run_scenario

CSV_VERSION = 1
CSV_MAGIC = "# agvsched-table"
PLOT_MAGIC = "# agvsched-plot"

RUN, MEAN = "run", "mean"


@dataclass
class ResultTable:
    """Rows of plain values under a fixed column order."""
    kind: str
    columns: list[str]
    rows: list[dict[str, Any]] = field(default_factory=list)

    def column(self, name: str, row_type: str | None = None) -> list[Any]:
        return [r[name] for r in self.rows
                if row_type is None or r.get("row_type") == row_type]

    def select(self, **match) -> list[dict[str, Any]]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def __eq__(self, other):
        if not isinstance(other, ResultTable):
            return NotImplemented
        return (self.kind, self.columns, self.rows) == (other.kind, other.columns, other.rows)


# --------------------------------------------------------------------------
# sweeps

SWEEP_KEYS = ["row_type", "curve", "axis", "x", "seed"]
AGG_EXTRA = ["makespan_sd", "n"]


def sweep_points(spec: SweepSpec) -> list[tuple[str, Any, ScenarioConfig]]:
    """(curve name, axis value, config) for every point of the sweep."""
    base = spec.base.model_dump()
    variants = spec.variants or []
    curves = [(v.name, v.set) for v in variants] or [("base", {})]
    out = []
    for name, overrides in curves:
        d = base
        for k, v in overrides.items():
            d = set_dotted(d, k, v)
        for x in spec.values:
            out.append((name, x, scenario_from_dict(set_dotted(d, spec.axis, x))))
    return out


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def _sd(xs: Sequence[float]) -> float:
    if len(xs) < 2:
        return 0.0
    m = _mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def aggregate(rows: Sequence[dict], metric_cols: Sequence[str]) -> dict:
    """Mean row over seeds; ``timeout`` becomes the fraction that timed out."""
    first = rows[0]
    agg = {k: first[k] for k in ("curve", "axis", "x")}
    agg.update(row_type=MEAN, seed="")
    for c in metric_cols:
        agg[c] = _mean([float(r[c]) for r in rows])
    agg["makespan_sd"] = _sd([float(r["makespan"]) for r in rows])
    agg["n"] = len(rows)
    return agg


def run_sweep(spec: SweepSpec,
              runner: Callable[[ScenarioConfig, int], Metrics] = run_scenario,
              progress: Callable[[str, Any, int, Metrics], None] | None = None) -> ResultTable:
    """Every (curve, axis value, seed) run plus one mean row per point.

    Rows are sorted by their position in the sweep definition, never by execution order,
    so replications could run in any order and give the same table.
    """
    metric_cols = Metrics.columns()
    columns = SWEEP_KEYS + metric_cols + AGG_EXTRA
    seeds = spec.seeds()
    points = sweep_points(spec)
    runs: dict[tuple[int, int], dict] = {}
    for pi, (curve, x, config) in enumerate(points):
        for si, seed in enumerate(seeds):
            m = runner(config, seed)
            if progress is not None:
                progress(curve, x, seed, m)
            row = {"row_type": RUN, "curve": curve, "axis": spec.axis, "x": x, "seed": seed}
            row.update(m.row())
            row.update({c: "" for c in AGG_EXTRA})
            runs[(pi, si)] = row
    ordered = [runs[key] for key in sorted(runs)]
    means = [aggregate([runs[(pi, si)] for si in range(len(seeds))], metric_cols)
             for pi in range(len(points))]
    return ResultTable("sweep", columns, ordered + means)


def curve_stats(table: ResultTable, curve: str, y: str = "makespan") -> list[tuple[Any, float, float, int]]:
    """``(x, mean, sd, n)`` per axis value of one curve, from the mean rows."""
    out = []
    for r in table.select(row_type=MEAN, curve=curve):
        sd = r["makespan_sd"] if y == "makespan" else _sd(
            [float(q[y]) for q in table.select(row_type=RUN, curve=curve, x=r["x"])])
        out.append((r["x"], float(r[y]), float(sd), int(r["n"])))
    return out


# --------------------------------------------------------------------------
# channel check

CHANNEL_COLUMNS = ["K", "C", "S", "D", "sigma", "p_analytic", "throughput_analytic",
                   "p_mc", "p_mc_se", "throughput_mc", "throughput_mc_se", "z", "pass"]


def compare_analytic_mc(points: Iterable[tuple[int, int, int, int]], slots: int,
                        seed: int = 0, sigma: float = 0.0, tolerance: float = 3.0) -> ResultTable:
    """Analytic vs simulated per-AGV success for each (K, C, S, D) point.

    A point passes when the two agree within ``tolerance`` standard errors.
    When every sampled slot gave the same fraction the sample spread is
    zero, which says nothing at rates near 0 or 1; the binomial error at
    the analytic rate stands in for it then. Only a rate of exactly 0 or 1
    demands exact agreement (up to 1e-12).
    """
    rows = []
    for i, (K, C, S, D) in enumerate(points):
        cfg = ChannelConfig(C=C, S=S, D=D, sigma=sigma)
        pa = p_success_analytic(K, cfg)
        mc = monte_carlo_success(K, cfg, slots, seed + i)
        # the estimate is a per-slot mean of K Bernoulli outcomes; its
        # standard error comes from the per-slot fraction spread
        se = mc.stderr
        if se == 0.0:
            se = math.sqrt(max(0.0, pa * (1.0 - pa)) / (K * slots))
        diff = mc.rate - pa
        if se > 0:
            z = diff / se
            ok = abs(z) <= tolerance
        else:
            z = 0.0 if abs(diff) <= 1e-12 else math.inf
            ok = abs(diff) <= 1e-12
        rows.append({"K": K, "C": C, "S": S, "D": D, "sigma": sigma,
                     "p_analytic": pa, "throughput_analytic": K * pa,
                     "p_mc": mc.rate, "p_mc_se": se,
                     "throughput_mc": K * mc.rate, "throughput_mc_se": K * se,
                     "z": z, "pass": ok})
    return ResultTable("channel", list(CHANNEL_COLUMNS), rows)


def channel_check(spec: ChannelCheckSpec) -> ResultTable:
    return compare_analytic_mc(spec.points(), spec.slots, spec.seed, spec.sigma)


def crossovers(table: ResultTable, multi_s: int = 2) -> list[dict[str, Any]]:
    """Analytic and simulated S=1 vs ``multi_s`` throughput crossovers per (C, D).

    The simulated crossover is the smallest K where the S=1 estimate exceeds
    the multi-link one; None when the table holds no such K.
    """
    out = []
    keys = sorted({(r["C"], r["D"]) for r in table.rows})
    for C, D in keys:
        one = {r["K"]: r for r in table.select(C=C, D=D, S=1)}
        many = {r["K"]: r for r in table.select(C=C, D=D, S=multi_s)}
        common = sorted(set(one) & set(many))
        if not common:
            continue
        mc = next((k for k in common
                   if one[k]["throughput_mc"] > many[k]["throughput_mc"]), None)
        out.append({"C": C, "D": D, "analytic": crossover_k(C, D, multi_s), "mc": mc})
    return out


# --------------------------------------------------------------------------
# plot data

PLOT_COLUMNS = ["curve", "x", "mean", "ci", "n"]


def plot_data(table: ResultTable, y: str | None = None, curve_key: str = "S") -> ResultTable:
    """One (curve, x, mean, ci, n) row per plotted point.

    ``ci`` is the half-width of a normal 95% interval. Sweeps plot mean
    rows grouped by curve; channel tables plot against K, one curve per
    value of ``curve_key``.
    """
    rows = []
    if table.kind == "sweep":
        y = y or "makespan"
        curves = list(dict.fromkeys(r["curve"] for r in table.rows))
        for c in curves:
            for x, mean, sd, n in curve_stats(table, c, y):
                rows.append({"curve": c, "x": x, "mean": mean,
                             "ci": 1.96 * sd / math.sqrt(n) if n else 0.0, "n": n})
    elif table.kind == "channel":
        y = y or "throughput"
        col = "throughput_mc" if y == "throughput" else "p_mc"
        se_col = "throughput_mc_se" if y == "throughput" else "p_mc_se"
        others = [k for k in ("C", "S", "D") if k != curve_key]
        for r in table.rows:
            label = f"{curve_key}={r[curve_key]}," + ",".join(f"{k}={r[k]}" for k in others)
            rows.append({"curve": label, "x": r["K"], "mean": r[col],
                         "ci": 1.96 * r[se_col], "n": 1})
        rows.sort(key=lambda r: (r["curve"], r["x"]))
    else:
        raise ValueError(f"no plot data for table kind {table.kind!r}")
    return ResultTable("plot", list(PLOT_COLUMNS), rows)


# --------------------------------------------------------------------------
# CSV

def _cell(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _parse(text: str) -> Any:
    if text == "":
        return ""
    if text in ("true", "false"):
        return text == "true"
    if text in ("inf", "-inf", "nan"):
        return float(text)
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def to_csv(table: ResultTable) -> str:
    """CSV text: a ``# agvsched-table v1 kind=...`` line, then header and rows.

    Floats use ``repr`` so that parsing gives the same value back.
    """
    buf = io.StringIO()
    magic = PLOT_MAGIC if table.kind == "plot" else CSV_MAGIC
    buf.write(f"{magic} v{CSV_VERSION} kind={table.kind}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for r in table.rows:
        w.writerow([_cell(r.get(c, "")) for c in table.columns])
    return buf.getvalue()


def from_csv(text: str) -> ResultTable:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# agvsched-"):
        raise ValueError("missing agvsched table header")
    parts = dict(p.split("=", 1) for p in lines[0].split() if "=" in p)
    version = lines[0].split()[2]
    if version != f"v{CSV_VERSION}":
        raise ValueError(f"unsupported table version {version}")
    reader = csv.reader(lines[1:])
    try:
        columns = next(reader)
    except StopIteration:
        raise ValueError("missing column header") from None
    rows = [{c: _parse(v) for c, v in zip(columns, rec)} for rec in reader]
    return ResultTable(parts.get("kind", ""), columns, rows)


def emit(table: ResultTable, path: str | os.PathLike | None, fmt: str = "csv") -> str:
    """Write ``table`` (or its plot data) to ``path``; ``None`` or ``-`` returns text only."""
    if fmt == "plot":
        table = plot_data(table)
    elif fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    text = to_csv(table)
    if path is not None and str(path) != "-":
        Path(path).write_text(text)
    return text


def read_csv(path: str | os.PathLike) -> ResultTable:
    return from_csv(Path(path).read_text())
