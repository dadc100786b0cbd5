"""Writes a pipeline's tables, summary, traces and figures to a directory."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .defense import save_traces  # noqa: E402


class ReportError(ValueError):
    pass


def format_value(v) -> str:
    """Deterministic text for table cells and summary values."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}"
    return str(v)


def table_tsv(table) -> str:
    lines = ["\t".join(table.columns)]
    lines += ["\t".join(format_value(v) for v in row) for row in table.rows]
    return "\n".join(lines) + "\n"


def summary_text(summary: dict) -> str:
    return "".join(f"{k}={format_value(summary[k])}\n" for k in sorted(summary))


def _rows(table, **match):
    idx = {c: i for i, c in enumerate(table.columns)}
    return [r for r in table.rows if all(r[idx[k]] == v for k, v in match.items())], idx


def _fig_sweep(table, path: Path):
    fig, ax = plt.subplots(figsize=(6, 4))
    idx = {c: i for i, c in enumerate(table.columns)}
    series = sorted({(r[idx["reformer"]], r[idx["scenario"]]) for r in table.rows})
    for tag, sc in series:
        rows, _ = _rows(table, reformer=tag, scenario=sc)
        ks = [r[idx["K"]] for r in rows]
        if sc == "NA":
            ax.plot(ks, [r[idx["GenEER"]] for r in rows], marker="o", label=f"{tag} GenEER")
        ax.plot(ks, [r[idx["AdvFAR"]] for r in rows], marker="^", linestyle="--", label=f"{tag} {sc} AdvFAR")
        ax.plot(ks, [r[idx["AdvFRR"]] for r in rows], marker="v", linestyle=":", label=f"{tag} {sc} AdvFRR")
    ax.set_xlabel("cascade length K")
    ax.set_ylabel("rate")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_bars(table, value_cols, path: Path, label_col: str):
    idx = {c: i for i, c in enumerate(table.columns)}
    labels = [str(r[idx[label_col]]) for r in table.rows]
    x = np.arange(len(labels))
    width = 0.8 / len(value_cols)
    fig, ax = plt.subplots(figsize=(max(5, len(labels) * 0.9), 4))
    for j, col in enumerate(value_cols):
        ax.bar(x + j * width, [r[idx[col]] for r in table.rows], width, label=col)
    ax.set_xticks(x + width * (len(value_cols) - 1) / 2, labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_ratio(table, path: Path):
    idx = {c: i for i, c in enumerate(table.columns)}
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in dict.fromkeys(r[idx["system"]] for r in table.rows):
        rows, _ = _rows(table, system=name)
        ratios = [r[idx["ratio"]] for r in rows]
        ax.plot(ratios, [r[idx["jFAR"]] for r in rows], marker="o", label=f"{name} jFAR")
        ax.plot(ratios, [r[idx["jFRR"]] for r in rows], marker="s", linestyle="--", label=f"{name} jFRR")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("adversarial : genuine pooling ratio")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_traces(traces: dict, path: Path, n: int = 20):
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, style in (("genuine", "-"), ("NA", "--")):
        name = next((k for k in sorted(traces) if k.endswith(f"_{key}")), None)
        if name is None:
            continue
        for i, t in enumerate(traces[name][:n]):
            ax.plot(t.scores, linestyle=style, color="tab:blue" if key == "genuine" else "tab:red",
                    alpha=0.5, label=name if i == 0 else None)
    ax.set_xlabel("reformer passes")
    ax.set_ylabel("score")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(bundle, output_dir) -> list[Path]:
    """Write everything in ``bundle`` under ``output_dir``; returns the written paths.

    Figures are drawn only for tables present in the bundle.
    """
    if bundle is None or bundle.is_empty():
        raise ReportError("nothing to report")
    out = Path(output_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name in sorted(bundle.tables):
        path = out / "tables" / f"{name}.tsv"
        path.write_text(table_tsv(bundle.tables[name]), encoding="utf-8")
        written.append(path)
    if bundle.summary:
        path = out / "summary.txt"
        path.write_text(summary_text(bundle.summary), encoding="utf-8")
        written.append(path)
    if bundle.traces:
        (out / "traces").mkdir(exist_ok=True)
        for name in sorted(bundle.traces):
            path = out / "traces" / f"{name}.txt"
            save_traces(path, bundle.traces[name])
            written.append(path)
    figures = out / "figures"
    plots = []
    t = bundle.tables
    if "purification_sweep" in t:
        plots.append(("purification_sweep.png", lambda p: _fig_sweep(t["purification_sweep"], p)))
    if "table2_purification" in t:
        plots.append(("purification_systems.png",
                      lambda p: _fig_bars(t["table2_purification"], ["AdvFAR", "AdvFRR", "GenEER"], p, "system")))
    if "table5_detection" in t:
        plots.append(("detection_eer.png", lambda p: _fig_bars(t["table5_detection"], ["EER_det"], p, "moment_order")))
    if "pooling_ratio" in t:
        plots.append(("pooling_ratio.png", lambda p: _fig_ratio(t["pooling_ratio"], p)))
    if bundle.traces:
        plots.append(("score_traces.png", lambda p: _fig_traces(bundle.traces, p)))
    if plots:
        figures.mkdir(exist_ok=True)
    for name, draw in plots:
        draw(figures / name)
        written.append(figures / name)
    return written
