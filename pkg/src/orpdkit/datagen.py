"""Dataset pipeline: time-series ingestion, synthetic sampling, oracle labeling,
splits, normalization statistics, and descriptive statistics.

Table files are plain columnar text with a '#' preamble declaring units and
headers of the form <elem>_<bus>_<quantity> (e.g. load_12_p, vgen_3_vset,
comp_40_q). All pipeline randomness flows through explicit seeds; re-running
any stage with the same seed reproduces its output byte for byte.
"""

from __future__ import annotations

import concurrent.futures
import datetime
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .grid import Grid
from .orpd import OrpdOptions, solve_orpd
from .powerflow import (
    COL_LOAD_P,
    COL_LOAD_Q,
    COL_QR,
    COL_STAT_P,
    COL_STAT_Q,
    COL_VGEN_P,
    COL_VSET,
    ControlVector,
    InputVector,
    control_mask,
    solve_pf,
)

log = logging.getLogger(__name__)

_TABLE_MAGIC = "# orpdkit-table v1"
_DATASET_MAGIC = "# orpdkit-dataset v1"

# Quantity suffix -> physical unit accepted in table preambles.
_KNOWN_UNITS = {"MW", "MVar", "pu"}


class DataError(ValueError):
    """A data file violates the batch-table or dataset conventions."""


@dataclass
class IngestReport:
    dropped_columns: list[str] = field(default_factory=list)
    unmatched_timestamps: int = 0
    gap_rows: int = 0


@dataclass
class TimeSeriesTable:
    """Columnar series: strictly increasing ISO-8601 timestamps, named columns."""

    timestamps: list[str]
    columns: list[str]
    values: np.ndarray  # (T, C)
    units: dict[str, str]  # quantity suffix -> unit
    report: Optional[IngestReport] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.timestamps), len(self.columns)):
            raise DataError(
                f"value matrix {self.values.shape} inconsistent with "
                f"{len(self.timestamps)} timestamps x {len(self.columns)} columns"
            )
        for a, b in zip(self.timestamps, self.timestamps[1:]):
            if b <= a:
                raise DataError(f"timestamps not strictly increasing at {b!r}")


def _fmt(value: float) -> str:
    if np.isnan(value):
        return ""
    return repr(float(value))


def write_table(table: TimeSeriesTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_TABLE_MAGIC + "\n")
        units = " ".join(f"{k}={v}" for k, v in sorted(table.units.items()))
        fh.write(f"# units: {units}\n")
        fh.write("timestamp," + ",".join(table.columns) + "\n")
        for t, row in zip(table.timestamps, table.values):
            fh.write(t + "," + ",".join(_fmt(v) for v in row) + "\n")


def read_table(path) -> TimeSeriesTable:
    units: dict[str, str] = {}
    header: Optional[list[str]] = None
    stamps: list[str] = []
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# units:"):
                    for pair in line[len("# units:"):].split():
                        key, _, unit = pair.partition("=")
                        if unit not in _KNOWN_UNITS:
                            raise DataError(f"{path}:{lineno}: unknown unit {unit!r} for {key!r}")
                        units[key] = unit
                continue
            if header is None:
                header = line.split(",")
                if not header or header[0] != "timestamp":
                    raise DataError(f"{path}:{lineno}: first column must be 'timestamp'")
                continue
            parts = line.split(",")
            if len(parts) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
            stamps.append(parts[0])
            rows.append([float(p) if p != "" else np.nan for p in parts[1:]])
    if header is None:
        raise DataError(f"{path}: no header row")
    if not units:
        raise DataError(f"{path}: unit preamble missing")
    values = np.array(rows, dtype=float) if rows else np.zeros((0, len(header) - 1))
    return TimeSeriesTable(stamps, header[1:], values, units)


def _column_parts(name: str) -> Optional[tuple[str, int, str]]:
    parts = name.split("_")
    if len(parts) != 3 or parts[0] not in ("load", "stat", "vgen", "comp"):
        return None
    try:
        bus = int(parts[1])
    except ValueError:
        return None
    return parts[0], bus, parts[2]


# (element kind, quantity) -> input matrix column.
_X_CHANNELS = {
    ("load", "p"): COL_LOAD_P,
    ("load", "q"): COL_LOAD_Q,
    ("stat", "p"): COL_STAT_P,
    ("stat", "q"): COL_STAT_Q,
    ("vgen", "p"): COL_VGEN_P,
}


def _element_buses(grid: Grid) -> dict[str, set[int]]:
    return {
        "load": {l.bus for l in grid.loads},
        "stat": {g.bus for g in grid.stat_gens},
        "vgen": {g.bus for g in grid.volt_gens},
        "comp": {c.bus for c in grid.compensators},
    }


def _to_pu(values: np.ndarray, column: str, units: dict[str, str], grid: Grid) -> np.ndarray:
    parts = _column_parts(column)
    quantity = parts[2] if parts else column
    unit = units.get(quantity, units.get(column))
    if unit is None:
        raise DataError(f"column {column!r}: no unit declared for quantity {quantity!r}")
    if unit == "pu":
        return values
    return values / grid.base_mva  # MW and MVar share the MVA base


def _hourly(stamp: str) -> bool:
    t = datetime.datetime.fromisoformat(stamp)
    return t.minute == 0 and t.second == 0 and t.microsecond == 0


def ingest_timeseries(generation_file, load_file, grid: Grid) -> TimeSeriesTable:
    """Align generation and load series on shared exact-hour timestamps.

    Output values are per-unit. Columns that do not follow the naming scheme
    are dropped and reported; columns naming a missing element raise DataError.
    Rows with gaps after alignment are dropped and counted.
    """
    report = IngestReport()
    hosts = _element_buses(grid)
    tables = [read_table(generation_file), read_table(load_file)]

    kept: list[tuple[TimeSeriesTable, list[int]]] = []
    for table in tables:
        cols = []
        for ci, name in enumerate(table.columns):
            parts = _column_parts(name)
            if parts is None:
                report.dropped_columns.append(name)
                continue
            kind, bus, _ = parts
            if bus not in hosts[kind]:
                raise DataError(f"column {name!r} references a missing {kind} element at bus {bus}")
            cols.append(ci)
        kept.append((table, cols))

    stamp_sets = [
        {s for s in table.timestamps if _hourly(s)} for table, _ in kept
    ]
    shared = sorted(stamp_sets[0] & stamp_sets[1])
    for table, _ in kept:
        report.unmatched_timestamps += sum(1 for s in table.timestamps if s not in shared)

    columns: list[str] = []
    blocks: list[np.ndarray] = []
    for table, cols in kept:
        index = {s: i for i, s in enumerate(table.timestamps)}
        rows = np.array([index[s] for s in shared], dtype=int) if shared else np.zeros(0, dtype=int)
        block = table.values[rows][:, cols] if shared else np.zeros((0, len(cols)))
        for k, ci in enumerate(cols):
            name = table.columns[ci]
            columns.append(name)
            block[:, k] = _to_pu(block[:, k], name, table.units, grid)
        blocks.append(block)

    values = np.hstack(blocks) if shared else np.zeros((0, len(columns)))
    if len(shared):
        good = ~np.isnan(values).any(axis=1)
        report.gap_rows = int((~good).sum())
        values = values[good]
        shared = [s for s, g in zip(shared, good) if g]

    if not shared:
        log.warning("ingest produced 0 aligned rows (disjoint or gap-ridden sources)")
    out = TimeSeriesTable(shared, columns, values, {"p": "pu", "q": "pu", "vset": "pu"})
    out.report = report
    return out


def table_to_inputs(table: TimeSeriesTable, grid: Grid) -> list[InputVector]:
    """Map per-unit table rows onto (N, 5) input matrices."""
    n = grid.n_buses
    targets = []
    for name in table.columns:
        parts = _column_parts(name)
        if parts is None:
            raise DataError(f"column {name!r} does not follow <elem>_<bus>_<quantity>")
        kind, bus, qty = parts
        channel = _X_CHANNELS.get((kind, qty))
        if channel is None:
            raise DataError(f"column {name!r} is not an input channel")
        if bus >= n:
            raise DataError(f"column {name!r} references bus {bus} outside the grid")
        targets.append((bus, channel))
    out = []
    for t, row in zip(table.timestamps, table.values):
        x = np.zeros((n, 5))
        for (bus, channel), value in zip(targets, row):
            x[bus, channel] = value
        out.append(InputVector(x, timestamp=t))
    return out


def inputs_to_table(inputs: Sequence[InputVector], grid: Grid) -> TimeSeriesTable:
    """Inverse of table_to_inputs over the grid's defined input channels."""
    columns, coords = _input_columns(grid)
    stamps = [x.timestamp for x in inputs]
    if any(s is None for s in stamps):
        stamps = [_synthetic_stamp(k) for k in range(len(inputs))]
    values = np.array([[x.values[bus, ch] for bus, ch in coords] for x in inputs])
    if len(inputs) == 0:
        values = np.zeros((0, len(columns)))
    return TimeSeriesTable(list(stamps), columns, values, {"p": "pu", "q": "pu", "vset": "pu"})


def _input_columns(grid: Grid) -> tuple[list[str], list[tuple[int, int]]]:
    columns, coords = [], []
    for l in grid.loads:
        columns += [f"load_{l.bus}_p", f"load_{l.bus}_q"]
        coords += [(l.bus, COL_LOAD_P), (l.bus, COL_LOAD_Q)]
    for g in grid.stat_gens:
        columns += [f"stat_{g.bus}_p", f"stat_{g.bus}_q"]
        coords += [(g.bus, COL_STAT_P), (g.bus, COL_STAT_Q)]
    for g in grid.volt_gens:
        columns.append(f"vgen_{g.bus}_p")
        coords.append((g.bus, COL_VGEN_P))
    return columns, coords


def _output_columns(grid: Grid) -> tuple[list[str], list[tuple[int, int]]]:
    columns, coords = [], []
    for g in grid.volt_gens:
        columns.append(f"vgen_{g.bus}_vset")
        coords.append((g.bus, COL_VSET))
    for c in grid.compensators:
        columns.append(f"comp_{c.bus}_q")
        coords.append((c.bus, COL_QR))
    return columns, coords


def nominal_profile(table: TimeSeriesTable, grid: Grid) -> InputVector:
    """Column-wise arithmetic mean of a per-unit table as an input matrix."""
    if len(table.timestamps) == 0:
        raise DataError("cannot take the nominal profile of an empty table")
    mean = TimeSeriesTable(
        [table.timestamps[0]], table.columns, table.values.mean(axis=0, keepdims=True), table.units
    )
    x = table_to_inputs(mean, grid)[0]
    x.timestamp = None
    return x


def sample_synthetic(nominal: InputVector, count: int, spread: float, seed: int) -> list[InputVector]:
    """Uniform per-feature draws within +/- spread of the nominal value.

    Undefined (zero) entries stay exactly zero; reproducible under the seed.
    """
    if not 0.0 <= spread < 1.0:
        raise ValueError(f"spread must lie in [0, 1), got {spread}")
    rng = np.random.default_rng(seed)
    base = nominal.values
    draws = rng.uniform(-1.0, 1.0, size=(count,) + base.shape)
    samples = base[None, :, :] * (1.0 + spread * draws)
    return [InputVector(samples[k]) for k in range(count)]


def _synthetic_stamp(k: int, start: str = "2021-01-01T00:00:00") -> str:
    t0 = datetime.datetime.fromisoformat(start)
    return (t0 + datetime.timedelta(hours=k)).isoformat()


@dataclass
class LabeledRow:
    timestamp: str
    x: np.ndarray  # (N, 5)
    y_star: Optional[np.ndarray]  # (N, 2) or None when not converged
    converged: bool
    p_loss_star: float  # nan when not converged
    split: str = "train"


@dataclass
class LabeledDataset:
    rows: list[LabeledRow]
    norm_stats: Optional[dict] = None  # {"vset": {"mean","std"}, "qr": {...}}

    def by_split(self, tag: str) -> list[LabeledRow]:
        return [r for r in self.rows if r.split == tag and r.converged]

    def converged_fraction(self) -> float:
        if not self.rows:
            return 0.0
        return sum(r.converged for r in self.rows) / len(self.rows)


@dataclass
class LabelOptions:
    orpd: OrpdOptions = field(default_factory=OrpdOptions)
    workers: int = 1


_WORKER_STATE: dict = {}


def _label_init(grid: Grid, options: OrpdOptions) -> None:
    _WORKER_STATE["grid"] = grid
    _WORKER_STATE["options"] = options


def _label_one(payload: tuple[str, np.ndarray]) -> tuple[str, Optional[np.ndarray], bool, float]:
    stamp, values = payload
    grid = _WORKER_STATE["grid"]
    options = _WORKER_STATE["options"]
    x = InputVector(values)
    sol = solve_orpd(grid, x, options)
    if not sol.converged:
        return stamp, None, False, float("nan")
    # Store the label's realized loss under the standard power-flow options so
    # that replaying the label at evaluation time reproduces it bit for bit.
    replay = solve_pf(grid, x, sol.y_star)
    loss = replay.p_loss if replay.converged else sol.p_loss
    return stamp, sol.y_star.values, True, loss


def label_dataset(grid: Grid, inputs: Sequence[InputVector], options: LabelOptions | None = None) -> LabeledDataset:
    """Run the dispatch oracle over every input; non-convergence is data, not error.

    Labeling fans out across a worker pool; results are gathered in input
    order, so the output is identical for any worker count.
    """
    options = options or LabelOptions()
    payloads = []
    for k, x in enumerate(inputs):
        stamp = x.timestamp if x.timestamp is not None else _synthetic_stamp(k)
        payloads.append((stamp, x.values))

    if options.workers > 1 and len(payloads) > 1:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=options.workers,
            initializer=_label_init,
            initargs=(grid, options.orpd),
        ) as pool:
            chunk = max(1, len(payloads) // (8 * options.workers))
            results = list(pool.map(_label_one, payloads, chunksize=chunk))
    else:
        _label_init(grid, options.orpd)
        results = [_label_one(p) for p in payloads]

    rows = [
        LabeledRow(timestamp=stamp, x=payloads[k][1], y_star=y, converged=conv, p_loss_star=loss)
        for k, (stamp, y, conv, loss) in enumerate(results)
    ]
    dataset = LabeledDataset(rows)
    dataset.norm_stats = compute_norm_stats(dataset, grid)
    fraction = dataset.converged_fraction()
    log.info("labeled %d rows, %.1f%% converged", len(rows), 100.0 * fraction)
    return dataset


def compute_norm_stats(dataset: LabeledDataset, grid: Grid) -> dict:
    """Per-output-column mean/std over masked entries of converged train rows."""
    mask = control_mask(grid)
    vset_vals, qr_vals = [], []
    for row in dataset.rows:
        if row.split != "train" or not row.converged or row.y_star is None:
            continue
        vset_vals.extend(row.y_star[mask[:, COL_VSET], COL_VSET].tolist())
        qr_vals.extend(row.y_star[mask[:, COL_QR], COL_QR].tolist())

    def stats(values: list[float]) -> dict:
        if not values:
            return {"mean": 0.0, "std": 1.0}
        arr = np.array(values)
        return {"mean": float(arr.mean()), "std": float(arr.std())}

    return {"vset": stats(vset_vals), "qr": stats(qr_vals)}


def split(
    dataset: LabeledDataset,
    fractions: tuple[float, float, float],
    scheme: str,
    seed: int,
    grid: Grid,
) -> LabeledDataset:
    """Tag rows train/val/test and recompute normalization statistics.

    Chronological blocks follow timestamp order; the random scheme permutes
    rows under the seed. Raises on any empty block.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be three positive values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    if scheme not in ("chronological", "random"):
        raise ValueError(f"unknown split scheme {scheme!r}")

    n = len(dataset.rows)
    order = sorted(range(n), key=lambda i: dataset.rows[i].timestamp)
    if scheme == "random":
        rng = np.random.default_rng(seed)
        order = list(rng.permutation(n))
    b1 = int(round(fractions[0] * n))
    b2 = int(round((fractions[0] + fractions[1]) * n))
    blocks = {"train": order[:b1], "val": order[b1:b2], "test": order[b2:]}
    for tag, idx in blocks.items():
        if not idx:
            raise ValueError(f"empty {tag} block for fractions {fractions} over {n} rows")
    for tag, idx in blocks.items():
        for i in idx:
            dataset.rows[i].split = tag
    dataset.norm_stats = compute_norm_stats(dataset, grid)
    return dataset


def save_dataset(dataset: LabeledDataset, grid: Grid, path) -> None:
    """Write the labeled dataset plus its stats sidecar and drop manifest."""
    path = str(path)
    x_cols, x_coords = _input_columns(grid)
    y_cols, y_coords = _output_columns(grid)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_DATASET_MAGIC + "\n")
        fh.write("# units: p=pu q=pu vset=pu\n")
        fh.write("timestamp," + ",".join(x_cols + y_cols) + ",converged,p_loss_star,split\n")
        for row in dataset.rows:
            xs = [_fmt(row.x[bus, ch]) for bus, ch in x_coords]
            if row.y_star is None:
                ys = ["" for _ in y_coords]
            else:
                ys = [_fmt(row.y_star[bus, ch]) for bus, ch in y_coords]
            fields = [row.timestamp] + xs + ys + [
                "1" if row.converged else "0",
                _fmt(row.p_loss_star),
                row.split,
            ]
            fh.write(",".join(fields) + "\n")
    with open(path + ".stats.json", "w", encoding="utf-8") as fh:
        json.dump({"norm_stats": dataset.norm_stats}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    dropped = [r.timestamp for r in dataset.rows if not r.converged]
    with open(path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "rows": len(dataset.rows),
                "converged": sum(r.converged for r in dataset.rows),
                "non_converged_timestamps": dropped,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")


def load_dataset(path, grid: Grid) -> LabeledDataset:
    path = str(path)
    x_cols, x_coords = _input_columns(grid)
    y_cols, y_coords = _output_columns(grid)
    expected = ["timestamp"] + x_cols + y_cols + ["converged", "p_loss_star", "split"]
    rows: list[LabeledRow] = []
    header = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                if header != expected:
                    raise DataError(f"{path}: header does not match the grid's element layout")
                continue
            parts = line.split(",")
            if len(parts) != len(expected):
                raise DataError(f"{path}:{lineno}: expected {len(expected)} fields")
            x = np.zeros((grid.n_buses, 5))
            for (bus, ch), v in zip(x_coords, parts[1 : 1 + len(x_cols)]):
                x[bus, ch] = float(v)
            y_fields = parts[1 + len(x_cols) : 1 + len(x_cols) + len(y_cols)]
            converged = parts[-3] == "1"
            if converged:
                y = np.zeros((grid.n_buses, 2))
                for (bus, ch), v in zip(y_coords, y_fields):
                    y[bus, ch] = float(v)
            else:
                y = None
            p_loss = float(parts[-2]) if parts[-2] != "" else float("nan")
            rows.append(LabeledRow(parts[0], x, y, converged, p_loss, parts[-1]))
    dataset = LabeledDataset(rows)
    try:
        with open(path + ".stats.json", "r", encoding="utf-8") as fh:
            dataset.norm_stats = json.load(fh)["norm_stats"]
    except FileNotFoundError:
        dataset.norm_stats = compute_norm_stats(dataset, grid)
    return dataset


# Meteorological quarters, southern hemisphere: DJF is summer.
_SEASONS = ("summer", "autumn", "winter", "spring")
_MONTH_SEASON = {12: 0, 1: 0, 2: 0, 3: 1, 4: 1, 5: 1, 6: 2, 7: 2, 8: 2, 9: 3, 10: 3, 11: 3}


@dataclass
class ColumnStats:
    name: str
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    season_hour: np.ndarray  # (4, 24) means, nan where empty


@dataclass
class StatReport:
    columns: list[ColumnStats]
    n_rows: int


def dataset_stats(table: TimeSeriesTable, bins: int = 50) -> StatReport:
    """Histograms and season-by-hour mean matrices for every column."""
    stamps = [datetime.datetime.fromisoformat(s) for s in table.timestamps]
    seasons = np.array([_MONTH_SEASON[t.month] for t in stamps], dtype=int)
    hours = np.array([t.hour for t in stamps], dtype=int)
    out = []
    for ci, name in enumerate(table.columns):
        col = table.values[:, ci]
        counts, edges = np.histogram(col, bins=bins)
        matrix = np.full((4, 24), np.nan)
        for s in range(4):
            for h in range(24):
                pick = col[(seasons == s) & (hours == h)]
                if len(pick):
                    matrix[s, h] = float(pick.mean())
        out.append(ColumnStats(name, counts, edges, matrix))
    return StatReport(out, len(table.timestamps))


def write_stat_report(report: StatReport, outdir) -> list[str]:
    """Emit per-column histogram and season-hour plot-data files."""
    import os

    written = []
    for col in report.columns:
        hist_path = os.path.join(str(outdir), f"hist_{col.name}.csv")
        with open(hist_path, "w", encoding="utf-8") as fh:
            fh.write("bin_left,bin_right,count\n")
            for k in range(len(col.hist_counts)):
                fh.write(
                    f"{_fmt(col.hist_edges[k])},{_fmt(col.hist_edges[k + 1])},{int(col.hist_counts[k])}\n"
                )
        written.append(hist_path)
        sh_path = os.path.join(str(outdir), f"season_hour_{col.name}.csv")
        with open(sh_path, "w", encoding="utf-8") as fh:
            fh.write("season,hour,mean\n")
            for s, season in enumerate(_SEASONS):
                for h in range(24):
                    fh.write(f"{season},{h},{_fmt(col.season_hour[s, h])}\n")
        written.append(sh_path)
    return written
