"""CSV ingestion and output writers for the command-line tool.

Input formats (UTF-8, LF):
  counts.csv      header row of species names, then one row of integer
                  counts per site
  covariates.csv  header row of covariate names, float cells, rows
                  aligned with counts.csv
  offsets.csv     same shape contract as counts.csv, float cells
  cliques file    one clique per line, comma-separated species names;
                  a file with r lines specifies one candidate of r
                  cliques for a fit with r hidden actors

Parse failures raise InvalidInputError naming file and line.  Every
output CSV starts with a schema comment line so downstream scripts can
detect format drift.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError

SCHEMAS = {
    "edges": "# schema nestor/edges/v1",
    "hidden_means": "# schema nestor/hidden_means/v1",
    "trace": "# schema nestor/trace/v1",
    "pcl": "# schema nestor/pcl/v1",
    "benchmark": "# schema nestor/benchmark/v1",
    "counts": "# schema nestor/counts/v1",
}


def _rows(path: Path) -> list:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return [
                (lineno, row)
                for lineno, row in enumerate(csv.reader(fh), start=1)
                if row and not row[0].lstrip().startswith("#")
            ]
    except OSError as err:
        raise InvalidInputError(f"{path}: {err.strerror or err}") from err
    except UnicodeDecodeError as err:
        raise InvalidInputError(f"{path}: not valid UTF-8 ({err.reason})") from err


def _parse_cell(path, lineno, name, text, kind):
    try:
        if kind is int:
            return int(text)
        return float(text)
    except ValueError:
        raise InvalidInputError(
            f"{path}:{lineno}: {name} cell {text!r} is not {'an integer' if kind is int else 'a number'}"
        ) from None


def _read_table(path, kind, label):
    rows = _rows(Path(path))
    if len(rows) < 2:
        raise InvalidInputError(f"{path}: expected a header row and data rows")
    _, header = rows[0]
    names = [h.strip() for h in header]
    if any(not name for name in names):
        raise InvalidInputError(f"{path}:{rows[0][0]}: empty column name in header")
    if len(set(names)) != len(names):
        raise InvalidInputError(f"{path}:{rows[0][0]}: duplicate column names")
    data = []
    for lineno, row in rows[1:]:
        if len(row) != len(names):
            raise InvalidInputError(
                f"{path}:{lineno}: expected {len(names)} cells, found {len(row)}"
            )
        data.append(
            [_parse_cell(path, lineno, label, cell.strip(), kind) for cell in row]
        )
    return names, np.asarray(data, dtype=float)


def read_counts(path):
    """Counts matrix and species names from counts.csv."""
    names, table = _read_table(path, int, "count")
    if (table < 0).any():
        raise InvalidInputError(f"{path}: negative counts present")
    return table, tuple(names)


def read_covariates(path, n_sites):
    names, table = _read_table(path, float, "covariate")
    if table.shape[0] != n_sites:
        raise InvalidInputError(
            f"{path}: {table.shape[0]} rows but counts file has {n_sites} sites"
        )
    return table, tuple(names)


def read_offsets(path, n_sites, n_species):
    _, table = _read_table(path, float, "offset")
    if table.shape != (n_sites, n_species):
        raise InvalidInputError(
            f"{path}: shape {table.shape} does not match counts {(n_sites, n_species)}"
        )
    return table


def read_cliques(path, species):
    """One candidate (a tuple of cliques) from a species-name clique file."""
    index = {name: j for j, name in enumerate(species)}
    cliques = []
    for lineno, row in _rows(Path(path)):
        members = []
        for cell in row:
            name = cell.strip()
            if name not in index:
                raise InvalidInputError(
                    f"{path}:{lineno}: unknown species {name!r}"
                )
            members.append(index[name])
        if not members:
            raise InvalidInputError(f"{path}:{lineno}: empty clique")
        if len(set(members)) != len(members):
            raise InvalidInputError(f"{path}:{lineno}: repeated species in clique")
        cliques.append(tuple(sorted(members)))
    if not cliques:
        raise InvalidInputError(f"{path}: no cliques found")
    return tuple(cliques)


def write_csv(path, schema_key, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(SCHEMAS[schema_key] + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def fmt(value, digits=8):
    """Fixed-format floats so reruns produce byte-identical files."""
    if value is None:
        return ""
    value = float(value)
    if not np.isfinite(value):
        return repr(value)
    return f"{value:.{digits}g}"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir, payload) -> Path:
    """manifest.json with digests of every other file in the directory."""
    out_dir = Path(out_dir)
    outputs = {
        f.name: sha256_file(f)
        for f in sorted(out_dir.iterdir())
        if f.is_file() and f.name != "manifest.json"
    }
    payload = dict(payload, outputs=outputs)
    target = out_dir / "manifest.json"
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return target
