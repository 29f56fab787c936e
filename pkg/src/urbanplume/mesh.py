"""Triangle mesh container, size fields, boundary tagging, and quality stats."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property

import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon

from .errors import MeshTopologyError
from .geo import BuildingSet, DomainSpec
from .triangulation import triangulate_pslg


class BoundaryTag(IntEnum):
    INFLOW = 1
    OUTFLOW = 2
    NOSLIP_WALL = 3
    BUILDING_WALL = 4


@dataclass(frozen=True)
class SizeField:
    """Three-tier target edge length: building boundary, gap zone, buffer zone.

    ``gap_distance`` is the distance from any building below which the gap
    tier applies; tiers blend linearly with distance to avoid abrupt size
    jumps.
    """

    lc_building: float
    lc_gap: float
    lc_far: float
    gap_distance: float

    def __post_init__(self):
        if not (0.0 < self.lc_building <= self.lc_gap <= self.lc_far):
            raise ValueError(
                "size tiers must satisfy 0 < lc_building <= lc_gap <= lc_far, got "
                f"{self.lc_building}, {self.lc_gap}, {self.lc_far}")
        if self.gap_distance <= 0.0:
            raise ValueError("gap_distance must be positive")


def _building_segments(buildings: BuildingSet) -> np.ndarray:
    segs = []
    for poly in buildings.polygons:
        ring = poly.ring
        for k in range(len(ring) - 1):
            segs.append((ring[k, 0], ring[k, 1], ring[k + 1, 0], ring[k + 1, 1]))
    return np.asarray(segs, dtype=float)


def _distance_to_segments(x: float, y: float, segs: np.ndarray) -> float:
    px = segs[:, 0]
    py = segs[:, 1]
    dx = segs[:, 2] - px
    dy = segs[:, 3] - py
    len2 = dx * dx + dy * dy
    t = np.clip(((x - px) * dx + (y - py) * dy) / np.where(len2 > 0, len2, 1.0), 0.0, 1.0)
    qx = px + t * dx - x
    qy = py + t * dy - y
    return float(np.sqrt(np.min(qx * qx + qy * qy)))


def make_size_function(size: SizeField, buildings: BuildingSet | None):
    """Local circumradius target as a function of position.

    lc_building on building boundaries, ramping to lc_gap at gap_distance,
    then to lc_far over a blend band of max(gap_distance, lc_far).
    """
    if buildings is None or not buildings.polygons:
        return lambda x, y: size.lc_far
    segs = _building_segments(buildings)
    blend = max(size.gap_distance, size.lc_far)

    def size_at(x: float, y: float) -> float:
        d = _distance_to_segments(x, y, segs)
        if d <= size.gap_distance:
            return size.lc_building + (size.lc_gap - size.lc_building) * d / size.gap_distance
        s = min((d - size.gap_distance) / blend, 1.0)
        return size.lc_gap + (size.lc_far - size.lc_gap) * s

    return size_at


@dataclass(frozen=True)
class TriMesh:
    """Conforming triangle mesh with tagged boundary edges.

    ``triangles`` rows are CCW vertex index triples.  ``boundary_edges`` is
    an (nb, 2) array of vertex pairs (sorted low-high) and ``boundary_tags``
    the matching BoundaryTag values.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs, in first-occurrence order."""
        seen: dict[tuple[int, int], int] = {}
        for tri in self.triangles:
            for k in range(3):
                a, b = int(tri[k]), int(tri[(k + 1) % 3])
                key = (a, b) if a < b else (b, a)
                if key not in seen:
                    seen[key] = len(seen)
        out = np.empty((len(seen), 2), dtype=np.int64)
        for key, idx in seen.items():
            out[idx] = key
        return out

    @cached_property
    def edge_index(self) -> dict[tuple[int, int], int]:
        return {(int(a), int(b)): i for i, (a, b) in enumerate(self.edges)}

    @cached_property
    def triangle_edges(self) -> np.ndarray:
        """Edge ids per triangle in local order (v0v1, v1v2, v2v0)."""
        idx = self.edge_index
        out = np.empty((self.num_triangles, 3), dtype=np.int64)
        for t, tri in enumerate(self.triangles):
            for k in range(3):
                a, b = int(tri[k]), int(tri[(k + 1) % 3])
                out[t, k] = idx[(a, b) if a < b else (b, a)]
        return out

    @cached_property
    def edge_midpoints(self) -> np.ndarray:
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p0 = self.vertices[self.triangles[:, 0]]
        p1 = self.vertices[self.triangles[:, 1]]
        p2 = self.vertices[self.triangles[:, 2]]
        return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                      - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))

    @cached_property
    def edge_triangle_count(self) -> np.ndarray:
        counts = np.zeros(len(self.edges), dtype=np.int64)
        for t in range(self.num_triangles):
            for e in self.triangle_edges[t]:
                counts[e] += 1
        return counts

    def boundary_dof_edges(self, tag: BoundaryTag) -> np.ndarray:
        return self.boundary_edges[self.boundary_tags == int(tag)]

    def validate(self) -> None:
        """Raise MeshTopologyError on broken invariants (conformity, tags)."""
        if (self.signed_areas <= 0.0).any():
            bad = int(np.argmin(self.signed_areas))
            raise MeshTopologyError(f"triangle {bad} has non-positive area")
        counts = self.edge_triangle_count
        if (counts > 2).any():
            raise MeshTopologyError("an edge is shared by more than two triangles")
        boundary = set(map(tuple, self.edges[counts == 1]))
        tagged = set(map(tuple, np.sort(self.boundary_edges, axis=1)))
        if boundary != tagged:
            raise MeshTopologyError(
                "tagged boundary edges do not match topological boundary "
                f"({len(boundary)} topological vs {len(tagged)} tagged)")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        h.update(np.ascontiguousarray(self.boundary_edges).tobytes())
        h.update(np.ascontiguousarray(self.boundary_tags).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class MeshQualityReport:
    min_angle_deg: float
    max_circumradius_ratio: float
    triangle_count: int
    vertex_count: int


def triangle_angles(mesh: TriMesh) -> np.ndarray:
    """Interior angles in degrees, shape (num_triangles, 3)."""
    p = [mesh.vertices[mesh.triangles[:, k]] for k in range(3)]
    out = np.empty((mesh.num_triangles, 3))
    for k in range(3):
        u = p[(k + 1) % 3] - p[k]
        v = p[(k + 2) % 3] - p[k]
        cosang = np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        out[:, k] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return out


def circumradii(mesh: TriMesh) -> np.ndarray:
    p0 = mesh.vertices[mesh.triangles[:, 0]]
    p1 = mesh.vertices[mesh.triangles[:, 1]]
    p2 = mesh.vertices[mesh.triangles[:, 2]]
    a = np.linalg.norm(p2 - p1, axis=1)
    b = np.linalg.norm(p2 - p0, axis=1)
    c = np.linalg.norm(p1 - p0, axis=1)
    return a * b * c / (4.0 * np.abs(mesh.signed_areas))


def mesh_quality(mesh: TriMesh) -> MeshQualityReport:
    """Aggregate quality statistics (exact per-triangle recomputation)."""
    angles = triangle_angles(mesh)
    p0 = mesh.vertices[mesh.triangles[:, 0]]
    p1 = mesh.vertices[mesh.triangles[:, 1]]
    p2 = mesh.vertices[mesh.triangles[:, 2]]
    lmin = np.minimum(np.linalg.norm(p1 - p0, axis=1),
                      np.minimum(np.linalg.norm(p2 - p1, axis=1),
                                 np.linalg.norm(p2 - p0, axis=1)))
    ratio = circumradii(mesh) / lmin
    return MeshQualityReport(
        min_angle_deg=float(angles.min()),
        max_circumradius_ratio=float(ratio.max()),
        triangle_count=mesh.num_triangles,
        vertex_count=mesh.num_vertices,
    )


# ---------------------------------------------------------------------------
# mesh generation and tagging
# ---------------------------------------------------------------------------

def _side_tag(side: str, domain: DomainSpec) -> BoundaryTag:
    if side == domain.inflow_edge:
        return BoundaryTag.INFLOW
    if side == domain.outflow_edge:
        return BoundaryTag.OUTFLOW
    return BoundaryTag.NOSLIP_WALL


def triangulate(domain: DomainSpec, buildings: BuildingSet | None, size: SizeField,
                *, min_angle_deg: float = 20.0, max_triangles: int = 200_000) -> TriMesh:
    """Mesh the domain rectangle minus the building interiors.

    Constrained Delaunay refinement until every triangle satisfies the
    minimum-angle bound and its circumradius is below the local size-field
    target.  Boundary edges carry physical tags (inflow/outflow/no-slip
    walls and building walls).
    """
    rings = []
    if buildings is not None and buildings.polygons:
        xmin, ymin, xmax, ymax = domain.bounds
        for poly in buildings.polygons:
            v = poly.vertices
            if (v[:, 0] <= xmin).any() or (v[:, 0] >= xmax).any() \
                    or (v[:, 1] <= ymin).any() or (v[:, 1] >= ymax).any():
                raise MeshTopologyError(
                    f"building {poly.id} is not strictly inside the domain bounds")
            rings.append(poly.ring)
        shapes = [ShapelyPolygon(r) for r in rings]
        for i in range(len(shapes)):
            for j in range(i + 1, len(shapes)):
                if shapes[i].intersection(shapes[j]).area > 0.0:
                    raise MeshTopologyError(
                        "building polygons overlap; clean the BuildingSet first")

    size_fn = make_size_function(size, buildings)
    verts, tris, boundary = triangulate_pslg(
        domain.bounds, rings, size_fn,
        min_angle_deg=min_angle_deg, max_triangles=max_triangles)

    edges = np.array([e for e, _ in boundary], dtype=np.int64).reshape(-1, 2)
    tags = np.array(
        [int(_side_tag(t[1], domain)) if t[0] == "rect" else int(BoundaryTag.BUILDING_WALL)
         for _, t in boundary], dtype=np.int64)
    mesh = TriMesh(vertices=verts, triangles=tris, boundary_edges=edges, boundary_tags=tags)
    mesh.validate()
    return mesh


def tag_boundaries(mesh: TriMesh, domain: DomainSpec,
                   buildings: BuildingSet | None = None) -> TriMesh:
    """Re-derive boundary edges from topology and tag them geometrically.

    Edges on a rectangle side get the side's physical tag; the rest must lie
    on a building perimeter (verified when ``buildings`` is given) and become
    building walls.  Returns a new TriMesh; tagging is per edge, so a corner
    vertex can sit on two differently tagged edges.
    """
    counts = mesh.edge_triangle_count
    boundary = mesh.edges[counts == 1]
    tol = 1e-9 * max(domain.width, domain.height)
    xmin, ymin, xmax, ymax = domain.bounds
    side_coord = {"bottom": (1, ymin), "top": (1, ymax), "left": (0, xmin), "right": (0, xmax)}

    segs = _building_segments(buildings) if buildings is not None else None
    tags = np.empty(len(boundary), dtype=np.int64)
    for i, (a, b) in enumerate(boundary):
        pa, pb = mesh.vertices[a], mesh.vertices[b]
        tag = None
        for side, (axis, coord) in side_coord.items():
            if abs(pa[axis] - coord) <= tol and abs(pb[axis] - coord) <= tol:
                tag = _side_tag(side, domain)
                break
        if tag is None:
            if segs is not None:
                da = _distance_to_segments(pa[0], pa[1], segs)
                db = _distance_to_segments(pb[0], pb[1], segs)
                dm = _distance_to_segments(*(0.5 * (pa + pb)), segs)
                if max(da, db, dm) > tol:
                    raise MeshTopologyError(
                        f"boundary edge ({a}, {b}) lies on no rectangle side and "
                        "no building perimeter")
            tag = BoundaryTag.BUILDING_WALL
        tags[i] = int(tag)
    return TriMesh(vertices=mesh.vertices, triangles=mesh.triangles,
                   boundary_edges=np.asarray(boundary, dtype=np.int64), boundary_tags=tags)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_mesh(path, mesh: TriMesh, domain: DomainSpec | None = None,
              origin: tuple[float, float] | None = None) -> None:
    payload = {
        "vertices": mesh.vertices,
        "triangles": mesh.triangles,
        "boundary_edges": mesh.boundary_edges,
        "boundary_tags": mesh.boundary_tags,
    }
    meta: dict = {}
    if domain is not None:
        meta["domain"] = {
            "bounds": list(domain.bounds),
            "wind_direction": list(domain.wind_direction),
            "inflow_edge": domain.inflow_edge,
            "outflow_edge": domain.outflow_edge,
            "noslip_edges": list(domain.noslip_edges),
            "characteristic_length": domain.characteristic_length,
        }
    if origin is not None:
        meta["origin"] = [float(origin[0]), float(origin[1])]
    if meta:
        payload["meta_json"] = np.frombuffer(
            json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_mesh(path) -> tuple[TriMesh, DomainSpec | None, tuple[float, float] | None]:
    with np.load(path) as data:
        mesh = TriMesh(
            vertices=data["vertices"],
            triangles=data["triangles"],
            boundary_edges=data["boundary_edges"],
            boundary_tags=data["boundary_tags"],
        )
        domain = None
        origin = None
        if "meta_json" in data:
            meta = json.loads(bytes(data["meta_json"]).decode())
            if "domain" in meta:
                doc = meta["domain"]
                domain = DomainSpec(
                    bounds=tuple(doc["bounds"]),
                    wind_direction=tuple(doc["wind_direction"]),
                    inflow_edge=doc["inflow_edge"],
                    outflow_edge=doc["outflow_edge"],
                    noslip_edges=tuple(doc["noslip_edges"]),
                    characteristic_length=doc["characteristic_length"],
                )
            if "origin" in meta:
                origin = (meta["origin"][0], meta["origin"][1])
    return mesh, domain, origin


def structured_rectangle_mesh(bounds, nx: int, ny: int) -> TriMesh:
    """Uniform right-triangle mesh of a rectangle (untagged boundary).

    Mostly useful for convergence studies on nested grids; run
    :func:`tag_boundaries` afterwards to attach physical tags.
    """
    xmin, ymin, xmax, ymax = bounds
    xs = np.linspace(xmin, xmax, nx + 1)
    ys = np.linspace(ymin, ymax, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    mesh = TriMesh(vertices=verts, triangles=np.asarray(tris, dtype=np.int64),
                   boundary_edges=np.empty((0, 2), dtype=np.int64),
                   boundary_tags=np.empty(0, dtype=np.int64))
    return mesh
