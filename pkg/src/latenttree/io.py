"""CSV and Newick file helpers.

Matrix files are square and numeric with an optional header row of leaf
names.  Data files hold one observation per row and one named variable per
column.  Numbers are written with 17 significant digits so they round-trip.
"""

from __future__ import annotations

import csv
import os
import re
from typing import Sequence

import numpy as np

from .geometry import SymMatrix
from .trees import Tree, parse_newick

__all__ = [
    "FormatError",
    "read_matrix_csv",
    "write_matrix_csv",
    "read_data_csv",
    "write_data_csv",
    "read_tree",
]


class FormatError(ValueError):
    """Malformed input file; carries 1-based ``line`` and ``column``."""

    def __init__(self, path, line: int, column: int, msg: str):
        super().__init__(f"{path}:{line}:{column}: {msg}")
        self.path, self.line, self.column = path, line, column


def _is_number(x: str) -> bool:
    try:
        float(x)
    except ValueError:
        return False
    return True


_INT = re.compile(r"[+-]?[0-9]+")


def _looks_like_header(first: list[str], rest: list[list[str]], square: bool) -> bool:
    if not all(_is_number(c) for c in first):
        return True
    labels = [c.strip() for c in first]
    if not all(_INT.fullmatch(c) for c in labels) or len(set(labels)) != len(labels):
        return False
    if square and len(rest) == len(first):
        return True
    return any(not _INT.fullmatch(c.strip()) for row in rest for c in row)


def _read_table(path, header: bool | None = None,
                square: bool = False) -> tuple[list[str] | None, np.ndarray, int]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [(i, r) for i, r in enumerate(csv.reader(fh), start=1)
                    if any(c.strip() for c in r)]
    except UnicodeDecodeError as exc:
        raise FormatError(path, 1, 1, f"not UTF-8: {exc}") from None
    if not rows:
        raise FormatError(path, 1, 1, "empty file")
    first_line, first = rows[0]
    if header is None:
        header = _looks_like_header(first, [r for _, r in rows[1:]], square)
    if header:
        header = [c.strip() for c in first]
        for col, name in enumerate(header, start=1):
            if not name:
                raise FormatError(path, first_line, col, "empty column name")
        if len(set(header)) != len(header):
            raise FormatError(path, first_line, 1, "duplicate column names")
        rows = rows[1:]
    else:
        header = None
    if not rows:
        raise FormatError(path, first_line + 1, 1, "no numeric rows")
    width = len(header) if header else len(rows[0][1])
    body = np.empty((len(rows), width))
    for r, (line, cells) in enumerate(rows):
        if len(cells) != width:
            raise FormatError(path, line, min(len(cells), width) + 1,
                              f"expected {width} fields, found {len(cells)}")
        for c, cell in enumerate(cells):
            try:
                body[r, c] = float(cell)
            except ValueError:
                raise FormatError(path, line, c + 1, f"not a number: {cell!r}") from None
            if not np.isfinite(body[r, c]):
                raise FormatError(path, line, c + 1, f"non-finite value {cell!r}")
    return header, body, rows[0][0]


def read_matrix_csv(path, role: str = "covariance", header: bool | None = None) -> SymMatrix:
    """Square symmetric matrix.

    A first row is taken as leaf names when it is not numeric, or when it
    consists of distinct integers and is followed by exactly as many rows as
    it has fields.  Pass ``header`` to override the guess.
    """
    header, body, line = _read_table(path, header, square=True)
    if body.shape[0] != body.shape[1]:
        raise FormatError(path, line, 1, f"matrix is {body.shape[0]}x{body.shape[1]}, not square")
    if not np.allclose(body, body.T, rtol=1e-9, atol=1e-12):
        i, j = np.unravel_index(np.argmax(np.abs(body - body.T)), body.shape)
        raise FormatError(path, line + int(i), int(j) + 1, "matrix is not symmetric")
    return SymMatrix(body, role, header)


def write_matrix_csv(path, m: SymMatrix | np.ndarray, names: Sequence[str] | None = None) -> None:
    if isinstance(m, SymMatrix):
        names = list(m.names) if names is None else list(names)
        values = m.values
    else:
        values = np.asarray(m, dtype=float)
    _write(path, names, values)


def read_data_csv(path, header: bool | None = None) -> tuple[np.ndarray, list[str]]:
    """Observations by variables.

    A first row of distinct integers counts as a header when the remaining
    rows contain any non-integer value; pass ``header`` to override.
    """
    header, body, _ = _read_table(path, header)
    names = header if header else [str(i + 1) for i in range(body.shape[1])]
    return body, names


def write_data_csv(path, x: np.ndarray, names: Sequence[str]) -> None:
    _write(path, list(names), np.asarray(x, dtype=float))


def _write(path, names, values) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        if names is not None:
            out.writerow(names)
        for row in values:
            out.writerow([format(float(v), ".17g") for v in row])


def read_tree(path) -> Tree:
    """Tree from a Newick file, or from an inline Newick string ending in ``;``."""
    text = str(path).strip()
    if text.endswith(";") and not os.path.exists(text):
        return parse_newick(text)
    with open(path, encoding="utf-8") as fh:
        return parse_newick(fh.read().strip())
