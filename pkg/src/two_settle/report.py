"""Deterministic result emission: CSV/JSON writers and report figures.

Numbers are formatted to 12 significant digits so identical runs produce
byte-identical files; every file embeds the config hash and tool version.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import __version__

__all__ = ["fmt", "write_csv", "write_json", "sweep_figure", "curve_figure",
           "settlement_figure", "spread_figure", "ratio_figure"]


def fmt(x) -> str:
    """12-significant-digit rendering shared by every writer."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.12g" % float(x)
    return str(x)


def _meta_lines(meta: dict):
    base = {"tool": "two-settle", "version": __version__}
    base.update(meta or {})
    return [f"# {k}={fmt(v)}" for k, v in base.items()]


def write_csv(path, columns, rows, meta=None):
    """Rows are sequences aligned with columns; meta goes in '#' comments."""
    lines = _meta_lines(meta)
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _round_floats(obj):
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        return float(fmt(float(obj)))
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _round_floats(obj.tolist())
    return obj


def write_json(path, obj, meta=None):
    payload = {"meta": {"tool": "two-settle", "version": __version__, **(meta or {})}}
    payload.update(_round_floats(obj))
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def sweep_figure(rows, path):
    """Gap and prices versus trader count."""
    counts = [r["n_v"] for r in rows]
    labels = [("inf" if not np.isfinite(c) else str(int(c))) for c in np.asarray(counts, float)]
    x = np.arange(len(counts))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.plot(x, [r["gap"] for r in rows], "o-")
    ax1.set_xticks(x, labels)
    ax1.set_xlabel("virtual traders")
    ax1.set_ylabel("E[p_s] - p_f")
    ax1.set_title("price gap")
    ax1.axhline(0.0, color="grey", lw=0.8)
    ax2.plot(x, [r["p_f"] for r in rows], "s-", label="p_f")
    ax2.plot(x, [r["e_ps"] for r in rows], "d-", label="E[p_s]")
    ax2.set_xticks(x, labels)
    ax2.set_xlabel("virtual traders")
    ax2.set_ylabel("price")
    ax2.legend()
    ax2.set_title("price convergence")
    _save(fig, path)


def curve_figure(grid_p, grid_q, path, breakpoints=None, title="supply function"):
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.plot(grid_q, grid_p, "-")
    if breakpoints is not None:
        for g in np.atleast_1d(breakpoints):
            ax.axhline(g, color="grey", lw=0.6, ls="--")
    ax.set_xlabel("quantity (MWh)")
    ax.set_ylabel("price")
    ax.set_title(title)
    _save(fig, path)


def settlement_figure(reports, path):
    """Distribution of RT prices and per-scenario LSE cost."""
    ps = np.concatenate([r.p_s for r in reports])
    costs = [r.lse_total_cost() for r in reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.hist(ps, bins=40)
    ax1.set_xlabel("RT price")
    ax1.set_title("real-time prices")
    ax2.hist(costs, bins=40)
    ax2.set_xlabel("LSE total cost")
    ax2.set_title("settled LSE cost")
    _save(fig, path)


def _pre_post_bars(table, ycol_pre, ycol_post, ylabel, title, path):
    x = table["hour"].to_numpy()
    w = 0.4
    fig, ax = plt.subplots(figsize=(7.5, 3.6))
    ax.bar(x - w / 2, table[ycol_pre], width=w, label="pre")
    ax.bar(x + w / 2, table[ycol_post], width=w, label="post")
    ax.set_xlabel("hour of day")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def spread_figure(table, path):
    _pre_post_bars(table, "pre_mean", "post_mean", "RT - DA spread", "hourly price spreads", path)


def ratio_figure(table, path):
    _pre_post_bars(table, "pre_mean", "post_mean", "DA / RT demand", "hourly demand ratios", path)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
