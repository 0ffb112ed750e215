"""Strategy comparison tables and run manifests.

The comparison works on plain arrays so that ``fpfuse eval`` can rebuild every
number from the per-epoch CSV files written by ``fpfuse run``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from fpfuse.core import ErrorStats, correlation, error_stats
from fpfuse.fai import STRATEGIES
from fpfuse.fusion import FixRecord, FusionOutput
from fpfuse.mapping import atomic_write_text
from fpfuse.traceio import GroundTruth

STAT_COLUMNS = ("std", "mean", "rms", "p80", "p95", "max")
FIX_COLUMNS = ("t", "modality", "x", "y", "error", *STRATEGIES, "eta", "applied", "fallback")


def tool_version() -> str:
    from fpfuse import __version__

    return __version__


@dataclass
class RunManifest:
    """Everything that determines a command's output files."""

    command: str
    config_hash: str
    seed: int | None
    strategies: list[str]
    inputs: list[str]
    output_dir: str
    version: str = field(default_factory=tool_version)
    config: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def id(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def reference(self, filename: str) -> str:
        """String embedded in output files: manifest file name and content id."""
        return f"{filename} {self.id}"

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.dumps())


# ---------------------------------------------------------------------------
# comparison


@dataclass
class Comparison:
    stats: dict[str, ErrorStats]
    improvement: dict[str, dict[str, float]]  # strategy -> stat -> percent reduction vs reference
    correlations: dict[str, dict[str, float]]  # modality -> strategy -> Pearson coefficient
    reference: str = "ct"
    n_epochs: int = 0
    n_fixes: dict[str, int] = field(default_factory=dict)

    def stats_csv(self, manifest: str | None = None) -> str:
        buf = io.StringIO()
        if manifest:
            buf.write(f"# manifest: {manifest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", *STAT_COLUMNS, "rms_improvement_pct", "max_improvement_pct"])
        for s, st in self.stats.items():
            imp = self.improvement.get(s, {})
            w.writerow([s, *(_fmt(getattr(st, f"{c}_m")) for c in STAT_COLUMNS),
                        _fmt(imp.get("rms", float("nan"))), _fmt(imp.get("max", float("nan")))])
        return buf.getvalue()

    def correlation_csv(self, manifest: str | None = None) -> str:
        buf = io.StringIO()
        if manifest:
            buf.write(f"# manifest: {manifest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["modality", "n", *STRATEGIES])
        for mod, row in self.correlations.items():
            w.writerow([mod, self.n_fixes.get(mod, 0), *(_fmt(row.get(s, float("nan"))) for s in STRATEGIES)])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else f"{v:.6f}"


def _error_array(out, truth: GroundTruth | None) -> NDArray[np.float64]:
    if isinstance(out, FusionOutput):
        if out.error is not None:
            return np.asarray(out.error, dtype=float)
        if truth is None:
            raise ValueError(f"strategy {out.strategy} has no errors and no truth was given")
        return np.linalg.norm(out.position - truth.position_at(out.t), axis=1)
    return np.asarray(out, dtype=float).ravel()


def percent_reduction(reference: float, value: float) -> float:
    return 100.0 * (reference - value) / reference if reference > 0 else 0.0


def compare_strategies(outputs: Mapping[str, FusionOutput | Sequence[float]], truth: GroundTruth | None = None,
                       fixes: Mapping[str, Mapping[str, Sequence[float]]] | None = None,
                       reference: str = "ct") -> Comparison:
    """Error statistics per strategy, improvements over ``reference`` and FAI correlations.

    ``outputs`` maps strategy name to a :class:`FusionOutput` or a per-epoch error
    series; all series must cover the same epochs.  ``fixes`` maps modality to a
    table with an ``error`` column and one column per FAI strategy; by default it
    is taken from the reference output's fix records.
    """
    if not outputs:
        raise ValueError("no strategy outputs to compare")
    errs = {s: _error_array(o, truth) for s, o in outputs.items()}
    lengths = {s: len(e) for s, e in errs.items()}
    if len(set(lengths.values())) != 1:
        raise ValueError(f"misaligned strategy outputs: epoch counts {lengths}")
    times = [o.t for o in outputs.values() if isinstance(o, FusionOutput)]
    if any(not np.array_equal(times[0], t) for t in times[1:]):
        raise ValueError("misaligned strategy outputs: epoch times differ")
    stats = {}
    for s, e in errs.items():
        finite = e[np.isfinite(e)]
        if len(finite) == 0:
            raise ValueError(f"strategy {s} has no finite errors")
        stats[s] = error_stats(finite)
    improvement = {}
    if reference in stats:
        ref = stats[reference]
        for s, st in stats.items():
            improvement[s] = {c: percent_reduction(getattr(ref, f"{c}_m"), getattr(st, f"{c}_m")) for c in STAT_COLUMNS}
    if fixes is None:
        src = outputs.get(reference)
        fixes = {}
        if isinstance(src, FusionOutput):
            for mod in ("wifi", "magnetic"):
                tab = fix_columns(src.fixes, mod, truth)
                if len(tab["error"]):
                    fixes[mod] = tab
    corr, n_fix = {}, {}
    for mod, tab in fixes.items():
        actual = np.asarray(tab["error"], dtype=float)
        ok = np.isfinite(actual)
        row = {}
        for s in STRATEGIES:
            if s not in tab:
                continue
            pred = np.asarray(tab[s], dtype=float)
            if len(pred) != len(actual):
                raise ValueError(f"{mod} FAI series {s} has {len(pred)} values for {len(actual)} errors")
            m = ok & np.isfinite(pred)
            row[s] = correlation(actual[m], pred[m]).coef if m.sum() >= 2 else float("nan")
        corr[mod] = row
        n_fix[mod] = int(ok.sum())
    return Comparison(stats, improvement, corr, reference, lengths[next(iter(lengths))], n_fix)


def fix_columns(fixes: Sequence[FixRecord], modality: str, truth: GroundTruth | None = None) -> dict[str, NDArray]:
    recs = [f for f in fixes if f.modality == modality]
    err = np.array([f.error for f in recs], dtype=float)
    if truth is not None and len(recs):
        tp = truth.position_at([f.t for f in recs])
        err = np.linalg.norm(np.array([f.position for f in recs]) - tp, axis=1)
    out = {"t": np.array([f.t for f in recs], dtype=float), "error": err}
    for s in STRATEGIES:
        out[s] = np.array([f.fai.get(s, np.nan) for f in recs], dtype=float)
    return out


# ---------------------------------------------------------------------------
# CSV artifacts


def fixes_csv(fixes: Sequence[FixRecord], manifest: str | None = None) -> str:
    buf = io.StringIO()
    if manifest:
        buf.write(f"# manifest: {manifest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIX_COLUMNS)
    for f in fixes:
        err = repr(float(f.error)) if np.isfinite(f.error) else ""
        w.writerow([repr(float(f.t)), f.modality, repr(float(f.position[0])), repr(float(f.position[1])), err,
                    *(repr(float(f.fai[s])) for s in STRATEGIES), repr(float(f.eta)), int(f.applied),
                    int(f.fallback)])
    return buf.getvalue()


def summary_csv(out: FusionOutput, trace_id: str, manifest: str | None = None) -> str:
    buf = io.StringIO()
    if manifest:
        buf.write(f"# manifest: {manifest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trace", "mode", "strategy", "epochs", *STAT_COLUMNS, "wifi_updates", "mag_updates"])
    if out.error is not None and np.any(np.isfinite(out.error)):
        st = out.stats()
        vals = [_fmt(getattr(st, f"{c}_m")) for c in STAT_COLUMNS]
    else:
        vals = [""] * len(STAT_COLUMNS)
    w.writerow([trace_id, out.mode, out.strategy, len(out.t), *vals, out.counts.get("wifi", 0),
                out.counts.get("mag", 0)])
    return buf.getvalue()


def read_csv_table(path: str | os.PathLike) -> tuple[list[str], list[list[str]]]:
    """Header and rows of a CSV file, skipping ``#`` comment lines."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise ValueError(f"{os.fspath(path)} is empty")
    return rows[0], rows[1:]


def read_column(path, name: str) -> NDArray[np.float64]:
    header, rows = read_csv_table(path)
    if name not in header:
        raise ValueError(f"{os.fspath(path)} has no column {name!r}")
    j = header.index(name)
    return np.array([float(r[j]) if r[j] != "" else np.nan for r in rows], dtype=float)


def read_fixes(path) -> dict[str, dict[str, NDArray]]:
    header, rows = read_csv_table(path)
    col = {h: i for i, h in enumerate(header)}
    out: dict[str, dict[str, list]] = {}
    for r in rows:
        tab = out.setdefault(r[col["modality"]], {k: [] for k in ("t", "error", *STRATEGIES)})
        for k in tab:
            v = r[col[k]]
            tab[k].append(float(v) if v != "" else np.nan)
    return {m: {k: np.asarray(v, dtype=float) for k, v in tab.items()} for m, tab in out.items()}
