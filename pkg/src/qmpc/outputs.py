"""File emission: per-run CSV time series, tables, JSON summary, SVG plots and
the run manifest.

CSV is the source of truth. Plots are rendered by reading the CSV files back,
never from in-memory records.

Record CSV columns, in order::

    time_ns, u_1..u_m, rho_<j><k>_re, rho_<j><k>_im (row-major over j, k),
    infidelity, flags

The last row is the final state and has empty control and flag cells.
Floats are written with ``repr`` so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import json
import os
import platform
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, qcore
from .mpc import TrajectoryRecord

PLOTS = ("controls", "populations", "infidelity")


class OutputError(OSError):
    pass


def ensure_writable(out_dir) -> Path:
    """Create ``out_dir`` if needed and prove a file can be written there."""
    path = Path(out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=path, prefix=".qmpc-probe-"):
            pass
    except OSError as exc:
        raise OutputError(f"output directory {str(path)!r} is not writable: {exc}") from exc
    return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def record_columns(rec: TrajectoryRecord) -> list[str]:
    m = rec.controls.shape[1] if rec.controls.ndim == 2 else 1
    d = int(round(np.sqrt(rec.states.shape[1] / 2)))
    cols = ["time_ns"] + [f"u_{j + 1}" for j in range(m)]
    for j in range(d):
        for k in range(d):
            cols += [f"rho_{j}{k}_re", f"rho_{j}{k}_im"]
    return cols + ["infidelity", "flags"]


def record_rows(rec: TrajectoryRecord) -> list[list]:
    U = np.asarray(rec.controls, dtype=float).reshape(len(rec.controls), -1)
    m = sum(c.startswith("u_") for c in record_columns(rec))
    rows = []
    for k, t in enumerate(rec.times):
        rho = qcore.x_to_state(rec.states[k])
        entries = np.column_stack([rho.real.ravel(), rho.imag.ravel()]).ravel()
        if k < len(U):
            u, flags = list(U[k]), ";".join(rec.flags[k]) if k < len(rec.flags) else ""
        else:
            u, flags = [None] * m, None
        rows.append([float(t), *u, *entries.tolist(), float(rec.infidelity[k]), flags])
    return rows


def write_record_csv(rec: TrajectoryRecord, path) -> Path:
    path = Path(path)
    _write_rows(path, record_columns(rec), record_rows(rec))
    return path


def write_table_csv(table, path) -> Path:
    path = Path(path)
    _write_rows(path, table.columns, table.rows)
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def _column(header, rows, name) -> np.ndarray:
    j = header.index(name)
    return np.array([float(r[j]) if r[j] != "" else np.nan for r in rows])


def plot_from_csv(csv_paths: dict, kind: str, path) -> Path:
    """Overlay one quantity from several record CSVs into a static SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if kind not in PLOTS:
        raise ValueError(f"unknown plot {kind!r}; expected one of {PLOTS}")
    path = Path(path)
    with matplotlib.rc_context({"svg.hashsalt": "qmpc", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        for label, csv_path in csv_paths.items():
            header, rows = read_csv(csv_path)
            t = _column(header, rows, "time_ns")
            if kind == "controls":
                for name in (c for c in header if c.startswith("u_")):
                    ax.step(t, _column(header, rows, name), where="post", label=f"{label} {name}")
                ax.set_ylabel("control (rad/ns)")
            elif kind == "populations":
                for name in (c for c in header if c.endswith("_re") and c[4] == c[5]):
                    ax.plot(t, _column(header, rows, name), label=f"{label} {name[:-3]}")
                ax.set_ylabel("population")
            else:
                inf = np.clip(_column(header, rows, "infidelity"), 1e-16, None)
                ax.semilogy(t, inf, label=label)
                ax.set_ylabel("infidelity")
        ax.set_xlabel("time (ns)")
        ax.legend(fontsize="x-small", loc="best")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Manifest and emission
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    scenario: str
    config: dict
    seed: int | None
    version: str = __version__
    files: list = field(default_factory=list)
    timings_s: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    python: str = field(default_factory=platform.python_version)
    numpy: str = np.__version__

    def to_dict(self) -> dict:
        return asdict(self)


def emit_outputs(result, manifest: RunManifest, out_dir) -> list[Path]:
    """Write every artifact of ``result`` into ``out_dir``; returns the file list.

    The manifest is written last and lists every other emitted file.
    """
    out = ensure_writable(out_dir)
    files: list[Path] = []
    record_csvs = {}
    for label, rec in result.records.items():
        record_csvs[label] = write_record_csv(rec, out / f"{label}.csv")
        files.append(record_csvs[label])
    for label, table in result.tables.items():
        files.append(write_table_csv(table, out / f"{label}.csv"))
    summary = {"scenario": result.name, "params": result.params, "results": result.summary}
    files.append(write_json(summary, out / "summary.json"))
    if record_csvs:
        for kind in PLOTS:
            try:
                files.append(plot_from_csv(record_csvs, kind, out / f"{kind}.svg"))
            except Exception as exc:  # plots are best effort
                manifest.warnings.append(f"{kind}.svg not rendered: {exc}")
    manifest.files = [p.name for p in files] + ["manifest.json"]
    write_json(manifest.to_dict(), out / "manifest.json")
    return files + [out / "manifest.json"]


def default_out_dir(scenario: str) -> Path:
    """``$QMPC_OUT/<scenario>`` if the variable is set, else ``./qmpc-out/<scenario>``."""
    return Path(os.environ.get("QMPC_OUT", "qmpc-out")) / scenario
