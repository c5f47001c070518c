"""Six-panel figure set for a batch: localization, map quality, dispersion.

Each panel overlays every experiment arm found beside the main table; the
main arm draws solid, a known-dispersion arm draws dashed, further arms
cycle the remaining styles. Dispersion panels add dotted horizontal lines
at the true spread values recorded in the table metadata.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .tables import MissingColumnError, ResultTable

_ARM_STYLES = {"unknown": "-", "known": "--"}
_EXTRA_STYLES = ("-.", ":")
_PSI_PANELS = (
    ("psi_d_rmse_m_", 0, "psi_d.png", "delay spread RMSE (m)", 1.0),
    ("psi_theta_rmse_deg_", 1, "psi_theta.png", "arrival spread RMSE (deg)", 1.0),
    ("psi_vartheta_rmse_deg_", 2, "psi_vartheta.png", "departure spread RMSE (deg)", 1.0),
)


def _style(label: str, index: int) -> str:
    if label in _ARM_STYLES:
        return _ARM_STYLES[label]
    if index == 0:
        return "-"
    return _EXTRA_STYLES[(index - 1) % len(_EXTRA_STYLES)]


def _column(table: ResultTable, name: str) -> np.ndarray:
    if name not in table.columns:
        raise MissingColumnError(name, table.path)
    return table.columns[name]


def _series_panel(tables, column, ylabel, out_path, log_y=False) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for i, table in enumerate(tables):
        ax.plot(
            table.time,
            _column(table, column),
            _style(table.label, i),
            color="C0",
            label=table.label,
        )
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel("time step")
    ax.set_ylabel(ylabel)
    ax.grid(True, which="both", alpha=0.3)
    if len(tables) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def _psi_panel(tables, prefix, truth_index, ylabel, scale, out_path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    labels = tables[0].feature_labels
    colors = {lab: f"C{k}" for k, lab in enumerate(labels)}
    for i, table in enumerate(tables):
        for lab in labels:
            series = _column(table, prefix + lab)
            name = lab if i == 0 else f"{lab} ({table.label})"
            ax.plot(table.time, series, _style(table.label, i), color=colors[lab], label=name)
    drawn = set()
    for lab in labels:
        truth = tables[0].psi_true.get(lab)
        if truth is None:
            continue
        value = float(truth[truth_index]) * scale
        if value not in drawn:
            ax.axhline(value, linestyle=":", color="0.4", linewidth=1.0)
            drawn.add(value)
    ax.set_xlabel("time step")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_all(tables: list[ResultTable], out_dir) -> list[str]:
    """Write the six panels; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, "rmse_pos.png")
    _series_panel(tables, "rmse_pos_m", "agent position RMSE (m)", path, log_y=True)
    written.append(path)

    path = os.path.join(out_dir, "mospa.png")
    _series_panel(tables, "mospa_m", "mean OSPA (m)", path)
    written.append(path)

    path = os.path.join(out_dir, "card_err.png")
    _series_panel(tables, "card_err", "mean cardinality error", path)
    written.append(path)

    for prefix, truth_index, name, ylabel, scale in _PSI_PANELS:
        path = os.path.join(out_dir, name)
        _psi_panel(tables, prefix, truth_index, ylabel, scale, path)
        written.append(path)
    return written
