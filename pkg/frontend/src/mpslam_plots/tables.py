"""Parsing of aggregated batch result tables.

A results file is a CSV with one leading metadata comment line::

    # seed=1 runs=20 label=unknown psi_true_va2=0.2,10,10 ...
    t,rmse_pos_m,mospa_m,ospa_card_m,card_err,psi_d_rmse_m_pa,...
    1,0.31,...

The metadata line carries the experiment label and the true dispersion
triple per feature (spread in meters, both angle spreads in degrees).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

BASE_COLUMNS = ("t", "rmse_pos_m", "mospa_m", "ospa_card_m", "card_err")
PSI_PREFIXES = ("psi_d_rmse_m_", "psi_theta_rmse_deg_", "psi_vartheta_rmse_deg_")


class MissingColumnError(ValueError):
    """A required column is absent from a results table."""

    def __init__(self, column: str, path: str):
        self.column = column
        super().__init__(f"results table {path} is missing column {column!r}")


@dataclass
class ResultTable:
    """One experiment's aggregated series keyed by column name."""

    label: str
    path: str
    time: np.ndarray
    columns: dict[str, np.ndarray]
    psi_true: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def feature_labels(self) -> list[str]:
        prefix = PSI_PREFIXES[0]
        return [c[len(prefix):] for c in self.columns if c.startswith(prefix)]

    def __len__(self) -> int:
        return len(self.time)


def _parse_metadata(line: str) -> dict[str, str]:
    out = {}
    for token in line.lstrip("#").split():
        if "=" in token:
            key, value = token.split("=", 1)
            out[key] = value
    return out


def load_results_csv(path) -> ResultTable:
    """Parse one results file; raises on a malformed or incomplete header."""
    with open(path, newline="") as fh:
        meta_line = fh.readline()
        meta = _parse_metadata(meta_line) if meta_line.startswith("#") else {}
        if not meta_line.startswith("#"):
            fh.seek(0)
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MissingColumnError(BASE_COLUMNS[0], str(path))
        rows = [row for row in reader if row]

    for col in BASE_COLUMNS:
        if col not in header:
            raise MissingColumnError(col, str(path))

    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    columns = {name: data[:, i] for i, name in enumerate(header)}

    psi_true = {}
    for key, value in meta.items():
        if key.startswith("psi_true_"):
            psi_true[key[len("psi_true_"):]] = np.array(
                [float(v) for v in value.split(",")], dtype=float
            )

    label = meta.get("label", os.path.basename(str(path)))
    return ResultTable(
        label=label,
        path=str(path),
        time=columns["t"],
        columns=columns,
        psi_true=psi_true,
    )


def load_results_dir(results_dir) -> list[ResultTable]:
    """All result tables in a directory, the main experiment first.

    The main table is results.csv; any results_<label>.csv beside it is an
    additional experiment arm to overlay.
    """
    main = os.path.join(results_dir, "results.csv")
    if not os.path.exists(main):
        raise FileNotFoundError(f"no results.csv in {results_dir}")
    tables = [load_results_csv(main)]
    for name in sorted(os.listdir(results_dir)):
        if name.startswith("results_") and name.endswith(".csv"):
            tables.append(load_results_csv(os.path.join(results_dir, name)))
    return tables
