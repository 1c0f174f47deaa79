"""Report figures.

Every renderer draws on an Agg canvas and writes a PNG; nothing here
needs or touches a display. Each returns the path it wrote.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure  # noqa: E402  (backend pinned first)


def _new_axes(title, xlabel, ylabel, figsize=(7.0, 4.0)):
    fig = Figure(figsize=figsize)
    ax = fig.add_subplot(111)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return fig, ax


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    return str(path)


def save_filter_gap_figure(report, path):
    """Horizontal bars: pooled target gap (TV) per region/filter channel."""
    items = sorted(report.filter_tv.items())
    fig, ax = _new_axes("Histogram match per channel", "TV distance", "",
                        figsize=(7.0, max(2.5, 0.45 * len(items) + 1.5)))
    if items:
        names = [k for k, _ in items]
        ax.barh(range(len(items)), [v for _, v in items], color="#4878a8")
        ax.set_yticks(range(len(items)))
        ax.set_yticklabels(names, fontsize=8)
        ax.invert_yaxis()
    else:
        ax.text(0.5, 0.5, "no implicit channels", ha="center", va="center",
                transform=ax.transAxes)
    return _finish(fig, path)


def save_frame_error_figure(report, path):
    """Per-frame explicit and implicit errors as lines over frame index."""
    fig, ax = _new_axes("Per-frame error", "frame", "error")
    drew = False
    for label, series in (("explicit |I_syn - I_obs| / range", report.frame_err_ex),
                          ("implicit histogram L1 gap", report.frame_err_im)):
        pts = [(t, v) for t, v in enumerate(series) if v is not None]
        if pts:
            ax.plot([t for t, _ in pts], [v for _, v in pts], marker="o",
                    label=label)
            drew = True
    if drew:
        ax.legend(fontsize=8)
        ax.set_ylim(bottom=0.0)
    else:
        ax.text(0.5, 0.5, "no per-frame errors", ha="center", va="center",
                transform=ax.transAxes)
    return _finish(fig, path)


def save_convergence_figure(report, path):
    """Final sampling TV per channel, frame by frame."""
    series = {}
    for row in report.convergence:
        key = f"region{row['region']}/{row['channel']}"
        series.setdefault(key, []).append((row["frame"], row["tv"]))
    fig, ax = _new_axes("Sampler convergence", "frame", "final TV")
    if series:
        for key in sorted(series):
            pts = sorted(series[key])
            ax.plot([t for t, _ in pts], [v for _, v in pts], marker=".",
                    label=key)
        ax.legend(fontsize=7)
        ax.set_ylim(bottom=0.0)
    else:
        ax.text(0.5, 0.5, "no sampling channels", ha="center", va="center",
                transform=ax.transAxes)
    return _finish(fig, path)


def save_type_report_figure(counts, path):
    """Grouped bars: blob-like vs edge-like among the first N placements."""
    cutoffs = sorted(counts)
    blobs = [counts[n][0] for n in cutoffs]
    edges = [counts[n][1] for n in cutoffs]
    fig, ax = _new_axes("Primitive types in pursuit order", "first N placements",
                        "count")
    xs = range(len(cutoffs))
    ax.bar([x - 0.2 for x in xs], blobs, width=0.4, label="blob-like",
           color="#b8860b")
    ax.bar([x + 0.2 for x in xs], edges, width=0.4, label="edge-like",
           color="#4878a8")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([str(n) for n in cutoffs])
    ax.legend(fontsize=8)
    return _finish(fig, path)
