"""Report documents, flat CSV, manifests, and rendered summaries.

All file outputs render floats with 17 significant digits, so a report
regenerated from the same (config, seed) is byte-identical.  Wall-clock
time and library versions live in the manifest only, keeping the report
document and CSV deterministic.

The ``report`` command renders a text summary table plus one figure per
stored experiment document (written next to the delimited output).
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from pathlib import Path

from .verify import ExperimentReport

CSV_HEADER = ["experiment", "model", "t", "statistic", "estimate", "stderr",
              "oracle", "provenance", "verdict"]

_FLOAT_MARK = "%%F17%%"
_FLOAT_RE = re.compile(f'"{_FLOAT_MARK}([^"]*){_FLOAT_MARK}"')


def fmt17(x) -> str:
    """17-significant-digit decimal rendering."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _mark_floats(obj):
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, float):               # includes numpy float scalars
        obj = float(obj)
        if math.isnan(obj) or math.isinf(obj):
            return fmt17(obj)                # JSON has no nan/inf literals
        return f"{_FLOAT_MARK}{format(obj, '.17g')}{_FLOAT_MARK}"
    if isinstance(obj, dict):
        return {k: _mark_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_mark_floats(v) for v in obj]
    if hasattr(obj, "item"):                 # numpy integer scalars
        return _mark_floats(obj.item())
    return obj


def dumps17(obj) -> str:
    """json.dumps with floats rendered to 17 significant digits."""
    text = json.dumps(_mark_floats(obj), indent=2, sort_keys=True)
    return _FLOAT_RE.sub(lambda m: m.group(1), text) + "\n"


def report_to_dict(report: ExperimentReport) -> dict:
    return {
        "experiment": report.name,
        "model": report.model_id,
        "seed": report.base_seed,
        "sample_sizes": report.sample_sizes,
        "thresholds": report.thresholds,
        "passed": report.passed,
        "hypothesis_met": report.hypothesis_met,
        "notes": list(report.notes),
        "rows": [
            {
                "statistic": r.statistic,
                "t": r.t,
                "estimate": r.estimate,
                "stderr": r.stderr,
                "oracle": r.oracle,
                "provenance": r.provenance,
                "tolerance": r.tolerance,
                "deviation": r.deviation,
                "verdict": r.verdict,
            }
            for r in report.rows
        ],
        "series": report.series,
    }


def rows_to_csv(reports: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for report in reports:
        for r in report.rows:
            writer.writerow([
                report.name, report.model_id, fmt17(r.t), r.statistic,
                fmt17(r.estimate), fmt17(r.stderr), fmt17(r.oracle),
                r.provenance or "", r.verdict,
            ])
    return buf.getvalue()


def write_outputs(out_dir, reports: list, config: dict, seed: int,
                  wall_clock: float, command: str) -> None:
    """Write report.json, results.csv, and manifest.json (manifest holds
    the non-deterministic fields: wall clock and versions)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs = [report_to_dict(r) for r in reports]
    payload = docs[0] if len(docs) == 1 else {"experiments": docs}
    (out / "report.json").write_text(dumps17(payload))
    (out / "results.csv").write_text(rows_to_csv(reports))
    import numpy
    import scipy
    import sys
    from . import __version__

    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "versions": {
            "bhp_lab": __version__,
            "numpy": numpy.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "wall_clock_seconds": wall_clock,
    }
    (out / "manifest.json").write_text(dumps17(manifest))


# ---------------------------------------------------------------------------
# forest / spine record files
# ---------------------------------------------------------------------------

def _label_str(label) -> str:
    return ".".join(str(i) for i in label) if label else "-"


def forest_records(forest) -> str:
    """One line per node: label birth fission offspring cause x_birth x_end."""
    lines = ["# label birth_time end_time offspring cause x_birth x_end"]
    for label in sorted(forest.nodes):
        nd = forest.nodes[label]
        lines.append(" ".join([
            _label_str(label), fmt17(nd.birth_time), fmt17(nd.end_time),
            str(nd.offspring_count), nd.cause,
            fmt17(nd.birth_position), fmt17(nd.end_position),
        ]))
    return "\n".join(lines) + "\n"


def spine_records(tree) -> str:
    """Forest records extended with a spine flag, plus the ledger series."""
    spine = set(tree.spine_labels)
    lines = ["# label birth_time end_time offspring cause x_birth x_end spine"]
    for label in sorted(tree.forest.nodes):
        nd = tree.forest.nodes[label]
        lines.append(" ".join([
            _label_str(label), fmt17(nd.birth_time), fmt17(nd.end_time),
            str(nd.offspring_count), nd.cause,
            fmt17(nd.birth_position), fmt17(nd.end_position),
            "1" if label in spine else "0",
        ]))
    led = tree.ledger
    lines.append("# ledger: t eta eta_tilde Z pcaf")
    for i, t in enumerate(led.times):
        lines.append("ledger " + " ".join(fmt17(v) for v in
                                          (t, led.eta[i], led.eta_tilde[i],
                                           led.Z[i], led.pcaf_qm1[i])))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# rendered summaries (report command)
# ---------------------------------------------------------------------------

def _load_docs(directory: Path) -> list[dict]:
    docs = []
    for path in sorted(directory.glob("**/report.json")):
        doc = json.loads(path.read_text())
        docs.extend(doc.get("experiments", [doc]))
    return docs


def summary_table(docs: list[dict]) -> str:
    cols = ["experiment", "statistic", "t", "estimate", "stderr", "oracle", "verdict"]
    rows = [cols]
    for doc in docs:
        for r in doc["rows"]:
            rows.append([
                doc["experiment"], r["statistic"],
                "" if r["t"] is None else f"{r['t']:g}",
                "" if r["estimate"] is None else f"{r['estimate']:.6g}",
                "" if r["stderr"] is None else f"{r['stderr']:.3g}",
                "" if r["oracle"] is None else f"{r['oracle']:.6g}",
                r["verdict"],
            ])
    widths = [max(len(row[j]) for row in rows) for j in range(len(cols))]
    out = []
    for i, row in enumerate(rows):
        out.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0:
            out.append("  ".join("-" * widths[j] for j in range(len(cols))))
    return "\n".join(out) + "\n"


def _figure_for(doc: dict, out_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    name = doc["experiment"]
    series = doc.get("series", {})
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    if name == "wlln" and "D" in series:
        ax.semilogy(series["t_grid"], series["D"], "o-", label="D(t)")
        ax.set_xlabel("t")
        ax.set_ylabel("mean absolute deviation")
        ax.set_title("normalized mass deviation from the proxy limit")
        ax.legend()
    elif name == "slln" and "r_median" in series:
        ts = series["lattice"]
        ax.plot(ts, series["r_median"], "-", label="median r_n")
        ax.fill_between(ts, series["r_q10"], series["r_q90"], alpha=0.25,
                        label="10-90% band")
        ax.axhline(1.0, color="k", lw=0.8)
        ax.set_xlabel("lattice time")
        ax.set_ylabel("ratio r_n")
        ax.set_title("per-path ratio stabilization")
        ax.legend()
    elif name == "spectral" and "h_nodes" in series:
        ax.plot(series["h_nodes"], series["h_values"], "-", label="grid h")
        if "h_oracle" in series:
            ax.plot(series["h_nodes"], series["h_oracle"], "--", label="closed form")
        ax.set_xlabel("x")
        ax.set_ylabel("h(x)")
        ax.set_title("ground state")
        ax.legend()
    else:
        rows = [r for r in doc["rows"]
                if r["t"] is not None and r["estimate"] is not None
                and r["stderr"] is not None]
        if not rows:
            plt.close(fig)
            return
        ts = [r["t"] for r in rows]
        est = [r["estimate"] for r in rows]
        err = [3.0 * r["stderr"] for r in rows]
        ax.errorbar(ts, est, yerr=err, fmt="o", capsize=3, label="estimate (3 SE)")
        oracles = [(r["t"], r["oracle"]) for r in rows if r["oracle"] is not None]
        if oracles:
            ax.plot([o[0] for o in oracles], [o[1] for o in oracles], "x--",
                    label="oracle")
        ax.set_xlabel("t")
        ax.set_title(name)
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_report_dir(directory) -> int:
    """Render summary.txt and one PNG per experiment document.

    Returns the number of documents rendered (0 means nothing found).
    """
    directory = Path(directory)
    if not directory.is_dir():
        return 0
    docs = _load_docs(directory)
    if not docs:
        return 0
    (directory / "summary.txt").write_text(summary_table(docs))
    for i, doc in enumerate(docs):
        _figure_for(doc, directory / f"{doc['experiment']}_{i}.png")
    return len(docs)
