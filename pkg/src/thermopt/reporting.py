"""Artifact writers: legacy ASCII VTK fields, facet CSV, JSON run report."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fields import Control, Field
from .mesh import facet_centroids

REPORT_SCHEMA_VERSION = 1

_VTK_CELL_TYPE = {2: 5, 3: 10}  # triangle, tetrahedron


def write_vtk(field: Field, path: str, name: str) -> None:
    """Legacy ASCII VTK unstructured grid with one point scalar."""
    mesh = field.mesh
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{name}\n")
        fh.write("ASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for v in mesh.vertices:
            coords = list(v) + [0.0] * (3 - mesh.dim)
            fh.write(" ".join(repr(float(c)) for c in coords) + "\n")
        k = mesh.dim + 1
        fh.write(f"CELLS {mesh.n_cells} {mesh.n_cells * (k + 1)}\n")
        for c in mesh.cells:
            fh.write(f"{k} " + " ".join(str(int(i)) for i in c) + "\n")
        fh.write(f"CELL_TYPES {mesh.n_cells}\n")
        ctype = _VTK_CELL_TYPE[mesh.dim]
        for _ in range(mesh.n_cells):
            fh.write(f"{ctype}\n")
        fh.write(f"POINT_DATA {mesh.n_vertices}\n")
        fh.write(f"SCALARS {name} double 1\n")
        fh.write("LOOKUP_TABLE default\n")
        for val in field.values:
            fh.write(repr(float(val)) + "\n")


def write_beta_csv(beta: Control, path: str) -> None:
    """One row per Robin facet: centroid coordinates and the control value."""
    mesh = beta.mesh
    centroids = facet_centroids(mesh)[beta.facet_ids]
    header = ",".join(["x", "y", "z"][: mesh.dim] + ["beta"])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for c, b in zip(centroids, beta.values):
            fh.write(",".join(repr(float(x)) for x in c)
                     + f",{repr(float(b))}\n")


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_report(report: dict, path: str) -> None:
    payload = dict(report)
    payload.setdefault("schema_version", REPORT_SCHEMA_VERSION)
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def ensure_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
