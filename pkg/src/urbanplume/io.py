"""Output writers: legacy VTK, GeoJSON concentration contours, CSV tables.

All writers format floats with ``repr`` (shortest round-trip form), so byte
content is reproducible across runs with identical inputs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon
from shapely.ops import unary_union

from .fem import Field
from .geo import local_to_lonlat
from .mesh import TriMesh

_VTK_TRIANGLE = 5
_VTK_LINE = 3


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_vtk_header(fh, title: str, points: np.ndarray) -> None:
    fh.write("# vtk DataFile Version 2.0\n")
    fh.write(f"{title}\n")
    fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
    fh.write(f"POINTS {len(points)} double\n")
    for x, y in points:
        fh.write(f"{_fmt(x)} {_fmt(y)} 0.0\n")


def _write_vtk_cells(fh, cells: list[tuple[int, ...]], types: list[int]) -> None:
    size = sum(len(c) + 1 for c in cells)
    fh.write(f"CELLS {len(cells)} {size}\n")
    for cell in cells:
        fh.write(f"{len(cell)} " + " ".join(str(v) for v in cell) + "\n")
    fh.write(f"CELL_TYPES {len(cells)}\n")
    for t in types:
        fh.write(f"{t}\n")


def write_vtk(fields: dict[str, Field], mesh: TriMesh, path, *,
              subdivide_p2: bool = False, title: str = "urbanplume") -> None:
    """Write fields on the mesh as legacy ASCII VTK.

    Scalar P1 fields map directly onto the vertices.  Quadratic fields are
    sampled on the vertex sub-grid by default; ``subdivide_p2`` writes the
    refined grid (vertices plus edge midpoints, four triangles per parent)
    so no quadratic information is lost.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if subdivide_p2:
        points = np.vstack([mesh.vertices, mesh.edge_midpoints])
        nv = mesh.num_vertices
        cells = []
        for t in range(mesh.num_triangles):
            a, b, c = (int(v) for v in mesh.triangles[t])
            e_ab, e_bc, e_ca = (int(nv + e) for e in mesh.triangle_edges[t])
            cells += [(a, e_ab, e_ca), (e_ab, b, e_bc), (e_ca, e_bc, c), (e_ab, e_bc, e_ca)]
    else:
        points = mesh.vertices
        cells = [tuple(int(v) for v in tri) for tri in mesh.triangles]

    with open(path, "w") as fh:
        _write_vtk_header(fh, title, points)
        _write_vtk_cells(fh, cells, [_VTK_TRIANGLE] * len(cells))
        fh.write(f"POINT_DATA {len(points)}\n")
        for name, fld in fields.items():
            values = _sample_on_points(fld, mesh, len(points))
            if values.ndim == 1:
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in values:
                    fh.write(f"{_fmt(v)}\n")
            else:
                fh.write(f"VECTORS {name} double\n")
                for vx, vy in values:
                    fh.write(f"{_fmt(vx)} {_fmt(vy)} 0.0\n")


def _sample_on_points(fld: Field, mesh: TriMesh, n_points: int) -> np.ndarray:
    space = fld.dofmap
    nv = mesh.num_vertices
    ns = space.n_scalar
    if space.is_vector:
        ux, uy = fld.velocity_components()
        full = np.column_stack([ux, uy])
        return full[:n_points] if n_points <= ns else full
    if n_points <= len(fld.values):
        return fld.values[:n_points]
    # P1 field on a subdivided grid: edge midpoints get averaged values
    mid = 0.5 * (fld.values[mesh.edges[:, 0]] + fld.values[mesh.edges[:, 1]])
    return np.concatenate([fld.values[:nv], mid])


def write_mesh_vtk(mesh: TriMesh, path, title: str = "urbanplume mesh") -> None:
    """Mesh geometry plus boundary edges; tags go into an integer cell array.

    Triangles carry tag 0; boundary line cells carry their BoundaryTag value.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cells = [tuple(int(v) for v in tri) for tri in mesh.triangles]
    types = [_VTK_TRIANGLE] * len(cells)
    tags = [0] * len(cells)
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        cells.append((int(a), int(b)))
        types.append(_VTK_LINE)
        tags.append(int(tag))
    with open(path, "w") as fh:
        _write_vtk_header(fh, title, mesh.vertices)
        _write_vtk_cells(fh, cells, types)
        fh.write(f"CELL_DATA {len(cells)}\n")
        fh.write("SCALARS boundary_tag int 1\nLOOKUP_TABLE default\n")
        for t in tags:
            fh.write(f"{t}\n")


# ---------------------------------------------------------------------------
# GeoJSON contours
# ---------------------------------------------------------------------------

def _triangle_upper_region(pts: np.ndarray, vals: np.ndarray, level: float):
    """Polygon (<= 4 corners) of the sub-triangle where vals >= level."""
    above = vals >= level
    if not above.any():
        return None
    if above.all():
        return pts
    poly = []
    for i in range(3):
        j = (i + 1) % 3
        if above[i]:
            poly.append(pts[i])
        if above[i] != above[j]:
            t = (level - vals[i]) / (vals[j] - vals[i])
            poly.append(pts[i] + t * (pts[j] - pts[i]))
    return np.asarray(poly)


def contour_multipolygons(mesh: TriMesh, values: np.ndarray, levels) -> dict[float, list]:
    """Marching-triangles regions where the nodal P1 field exceeds each level.

    Returns level -> list of (exterior_ring, holes) in mesh coordinates.
    """
    out: dict[float, list] = {}
    for level in levels:
        pieces = []
        for tri in mesh.triangles:
            pts = mesh.vertices[tri]
            vals = values[tri]
            region = _triangle_upper_region(pts, vals, float(level))
            if region is not None and len(region) >= 3:
                shp = ShapelyPolygon(region)
                if shp.area > 0:
                    pieces.append(shp)
        if not pieces:
            out[float(level)] = []
            continue
        merged = unary_union(pieces)
        polys = [merged] if merged.geom_type == "Polygon" else [
            g for g in merged.geoms if g.geom_type == "Polygon"]
        rings = []
        for poly in polys:
            exterior = np.asarray(poly.exterior.coords)
            holes = [np.asarray(ring.coords) for ring in poly.interiors]
            rings.append((exterior, holes))
        out[float(level)] = rings
    return out


def contours_geojson(mesh: TriMesh, values: np.ndarray, levels, time_s: float,
                     origin: tuple[float, float] | None = None) -> dict:
    """GeoJSON FeatureCollection: one MultiPolygon feature per level.

    Coordinates are inverse-projected to lon/lat when the local-frame origin
    is given, else left in local meters.
    """
    regions = contour_multipolygons(mesh, values, levels)
    features = []
    for level in levels:
        multi = []
        for exterior, holes in regions[float(level)]:
            coords = [_ring_coords(exterior, origin)]
            coords += [_ring_coords(h, origin) for h in holes]
            multi.append(coords)
        features.append({
            "type": "Feature",
            "properties": {"level_ppm": float(level), "time_s": float(time_s)},
            "geometry": {"type": "MultiPolygon", "coordinates": multi},
        })
    return {"type": "FeatureCollection", "features": features}


def _ring_coords(ring: np.ndarray, origin) -> list:
    pts = local_to_lonlat(ring, origin) if origin is not None else np.asarray(ring)
    return [[float(x), float(y)] for x, y in pts]


def write_geojson(doc: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_csv(path, header: list[str], rows) -> None:
    """CSV with repr-formatted floats for byte-reproducible output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
