"""Building-footprint ingestion and simulation-domain sizing.

Takes GeoJSON building footprints (lon/lat), cleans and normalizes the
polygon rings, projects them to a local metric frame, and sizes an
axis-aligned rectangular domain around the cluster so that the blockage
ratio stays below the admissibility bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon
from shapely.ops import unary_union

from .errors import (
    DomainTooLargeError,
    EmptyBuildingSetError,
    GeoJsonParseError,
    UnsupportedWindDirectionError,
)

EARTH_RADIUS_M = 6_371_000.0

#: default admissible blockage ratio
BR_MAX_DEFAULT = 0.17

_EDGE_NAMES = ("bottom", "top", "left", "right")


@dataclass(frozen=True)
class GeoPolygon:
    """A single building footprint: closed CCW ring plus an opaque id.

    ``ring`` has shape (n, 2) with ring[0] == ring[-1]; coordinates are
    either (lon, lat) degrees before projection or meters after.
    """

    ring: np.ndarray
    id: str

    @property
    def vertices(self) -> np.ndarray:
        """Distinct vertices (closing duplicate dropped)."""
        return self.ring[:-1]

    def signed_area(self) -> float:
        x, y = self.ring[:, 0], self.ring[:, 1]
        return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


@dataclass(frozen=True)
class BuildingSet:
    """Cleaned, pairwise non-overlapping building polygons.

    ``origin`` is (latitude, longitude) of the local-frame origin once the
    set has been projected to meters, and None while still in degrees.
    """

    polygons: tuple[GeoPolygon, ...]
    origin: tuple[float, float] | None = None

    @property
    def in_local_frame(self) -> bool:
        return self.origin is not None

    def all_vertices(self) -> np.ndarray:
        return np.vstack([p.vertices for p in self.polygons])


@dataclass(frozen=True)
class RejectedFeature:
    """Diagnostic record for a feature dropped during parsing."""

    feature_id: str
    reason: str


@dataclass(frozen=True)
class DomainSpec:
    """Axis-aligned rectangular simulation domain around the buildings.

    ``bounds`` is (xmin, ymin, xmax, ymax) in meters.  The inflow edge is
    the rectangle side whose inward normal equals ``wind_direction``; the
    outflow edge is opposite; the remaining two sides are no-slip.
    ``characteristic_length`` is the crosswind domain width, used in the
    Reynolds number.
    """

    bounds: tuple[float, float, float, float]
    wind_direction: tuple[float, float]
    inflow_edge: str
    outflow_edge: str
    noslip_edges: tuple[str, str]
    characteristic_length: float

    @property
    def width(self) -> float:
        return self.bounds[2] - self.bounds[0]

    @property
    def height(self) -> float:
        return self.bounds[3] - self.bounds[1]

    def edge_coordinate(self, name: str) -> float:
        """Fixed coordinate of a named rectangle side."""
        xmin, ymin, xmax, ymax = self.bounds
        return {"bottom": ymin, "top": ymax, "left": xmin, "right": xmax}[name]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _normalize_ring(coords) -> np.ndarray | None:
    """Close the ring, drop consecutive duplicates, enforce CCW.

    Returns None when fewer than 3 distinct vertices remain.
    """
    pts = np.asarray(coords, dtype=float)
    if pts.ndim != 2 or pts.shape[1] < 2:
        return None
    pts = pts[:, :2]
    # drop closing duplicate if present, then consecutive duplicates
    if len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    keep = [0]
    for i in range(1, len(pts)):
        if not np.array_equal(pts[i], pts[keep[-1]]):
            keep.append(i)
    pts = pts[keep]
    if len(pts) < 3:
        return None
    ring = np.vstack([pts, pts[:1]])
    x, y = ring[:, 0], ring[:, 1]
    area2 = np.sum(x[:-1] * y[1:] - x[1:] * y[:-1])
    if area2 == 0.0:
        return None
    if area2 < 0.0:
        ring = ring[::-1].copy()
    return ring


def _is_simple(ring: np.ndarray) -> bool:
    try:
        return ShapelyPolygon(ring).is_valid
    except Exception:
        return False


def parse_building_file(content: bytes) -> tuple[BuildingSet, list[RejectedFeature]]:
    """Parse a GeoJSON FeatureCollection of building footprints.

    Every feature with Polygon geometry yields one GeoPolygon (outer ring
    only, normalized to a closed CCW ring).  Features that cannot be
    repaired are reported in the returned rejection list instead of
    aborting the parse.  Overlapping footprints are merged by union.

    Raises GeoJsonParseError for malformed JSON and EmptyBuildingSetError
    when no usable polygon survives.
    """
    try:
        text = content.decode("utf-8")
        doc = json.loads(text)
    except UnicodeDecodeError as exc:
        raise GeoJsonParseError("input is not UTF-8 text", exc.start) from exc
    except json.JSONDecodeError as exc:
        raise GeoJsonParseError(exc.msg, exc.pos) from exc

    features = doc.get("features", []) if isinstance(doc, dict) else []
    polygons: list[GeoPolygon] = []
    rejected: list[RejectedFeature] = []
    for i, feat in enumerate(features):
        fid = str(feat.get("id", feat.get("properties", {}).get("id", i)))
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            rejected.append(RejectedFeature(fid, f"unsupported geometry type {geom.get('type')!r}"))
            continue
        coords = geom.get("coordinates") or []
        if not coords:
            rejected.append(RejectedFeature(fid, "empty coordinates"))
            continue
        ring = _normalize_ring(coords[0])
        if ring is None:
            rejected.append(RejectedFeature(fid, "fewer than 3 distinct vertices"))
            continue
        if not _is_simple(ring):
            rejected.append(RejectedFeature(fid, "self-intersecting ring"))
            continue
        polygons.append(GeoPolygon(ring=ring, id=fid))

    polygons = _merge_overlaps(polygons)
    if not polygons:
        raise EmptyBuildingSetError("no usable building polygons in input")
    return BuildingSet(polygons=tuple(polygons)), rejected


def _merge_overlaps(polygons: list[GeoPolygon]) -> list[GeoPolygon]:
    """Union footprints whose interiors overlap; touching ones stay separate."""
    if len(polygons) < 2:
        return polygons
    shapes = [ShapelyPolygon(p.ring) for p in polygons]
    overlapping = set()
    for i in range(len(shapes)):
        for j in range(i + 1, len(shapes)):
            if shapes[i].intersection(shapes[j]).area > 0.0:
                overlapping.add(i)
                overlapping.add(j)
    if not overlapping:
        return polygons
    keep = [p for i, p in enumerate(polygons) if i not in overlapping]
    merged_ids = "+".join(polygons[i].id for i in sorted(overlapping))
    union = unary_union([shapes[i] for i in sorted(overlapping)])
    parts = [union] if union.geom_type == "Polygon" else list(union.geoms)
    out = list(keep)
    for k, part in enumerate(parts):
        ring = _normalize_ring(np.asarray(part.exterior.coords))
        if ring is not None:
            out.append(GeoPolygon(ring=ring, id=f"{merged_ids}#{k}"))
    out.sort(key=lambda p: (p.ring[0, 0], p.ring[0, 1], p.id))
    return out


def to_geojson(buildings: BuildingSet) -> str:
    """Serialize a degree-frame BuildingSet back to GeoJSON text."""
    features = []
    for poly in buildings.polygons:
        features.append({
            "type": "Feature",
            "id": poly.id,
            "properties": {},
            "geometry": {
                "type": "Polygon",
                "coordinates": [poly.ring.tolist()],
            },
        })
    return json.dumps({"type": "FeatureCollection", "features": features})


def format_rejections(rejections: list[RejectedFeature]) -> str:
    """Human-readable diagnostic block for rejected features."""
    if not rejections:
        return "all features accepted"
    lines = [f"rejected {len(rejections)} feature(s):"]
    lines += [f"  - feature {r.feature_id}: {r.reason}" for r in rejections]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_to_local(buildings: BuildingSet) -> BuildingSet:
    """Project lon/lat footprints to a local metric frame.

    Equirectangular projection about the vertex centroid:
    x = R * dlon * cos(lat0), y = R * dlat (angles in radians).  Valid for
    sub-degree extents; wider inputs raise DomainTooLargeError.
    """
    if buildings.in_local_frame:
        return buildings
    pts = buildings.all_vertices()
    lon_span = float(pts[:, 0].max() - pts[:, 0].min())
    lat_span = float(pts[:, 1].max() - pts[:, 1].min())
    if lon_span >= 1.0 or lat_span >= 1.0:
        raise DomainTooLargeError(
            f"bounding box spans {lon_span:.3f} x {lat_span:.3f} degrees; "
            "must be below 1 degree for the local projection")
    lon0 = float(pts[:, 0].mean())
    lat0 = float(pts[:, 1].mean())
    projected = []
    for poly in buildings.polygons:
        xy = lonlat_to_local(poly.ring, (lat0, lon0))
        projected.append(replace(poly, ring=xy))
    return BuildingSet(polygons=tuple(projected), origin=(lat0, lon0))


def lonlat_to_local(lonlat: np.ndarray, origin: tuple[float, float]) -> np.ndarray:
    """(lon, lat) degrees -> (x, y) meters about ``origin`` = (lat0, lon0)."""
    lat0, lon0 = origin
    pts = np.asarray(lonlat, dtype=float)
    rad = math.pi / 180.0
    x = EARTH_RADIUS_M * (pts[..., 0] - lon0) * rad * math.cos(lat0 * rad)
    y = EARTH_RADIUS_M * (pts[..., 1] - lat0) * rad
    return np.stack([x, y], axis=-1)


def local_to_lonlat(xy: np.ndarray, origin: tuple[float, float]) -> np.ndarray:
    """Inverse of :func:`lonlat_to_local`."""
    lat0, lon0 = origin
    pts = np.asarray(xy, dtype=float)
    deg = 180.0 / math.pi
    lon = lon0 + pts[..., 0] / (EARTH_RADIUS_M * math.cos(lat0 * math.pi / 180.0)) * deg
    lat = lat0 + pts[..., 1] / EARTH_RADIUS_M * deg
    return np.stack([lon, lat], axis=-1)


# ---------------------------------------------------------------------------
# blockage ratio and domain sizing
# ---------------------------------------------------------------------------

def _crosswind_axis(wind_direction) -> np.ndarray:
    w = np.asarray(wind_direction, dtype=float)
    return np.array([-w[1], w[0]])


def _union_length(intervals: list[tuple[float, float]]) -> float:
    """Total length of the union of 1D intervals."""
    if not intervals:
        return 0.0
    intervals = sorted(intervals)
    total = 0.0
    cur_lo, cur_hi = intervals[0]
    for lo, hi in intervals[1:]:
        if lo > cur_hi:
            total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    total += cur_hi - cur_lo
    return total


def blockage_ratio(buildings: BuildingSet, domain: DomainSpec) -> float:
    """Occluded fraction of the domain edge perpendicular to the wind.

    Projects every footprint onto the crosswind axis and returns the length
    of the union of the projection intervals divided by the length of the
    inflow edge.  Overlapping projections count once.
    """
    if not buildings.polygons:
        return 0.0
    t = _crosswind_axis(domain.wind_direction)
    intervals = []
    for poly in buildings.polygons:
        proj = poly.vertices @ t
        intervals.append((float(proj.min()), float(proj.max())))
    xmin, ymin, xmax, ymax = domain.bounds
    corners = np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]])
    edge = corners @ t
    edge_len = float(edge.max() - edge.min())
    return _union_length(intervals) / edge_len


def _cardinal_direction(wind_direction) -> np.ndarray:
    w = np.asarray(wind_direction, dtype=float)
    norm = float(np.hypot(w[0], w[1]))
    if abs(norm - 1.0) > 1e-6:
        raise UnsupportedWindDirectionError(
            f"wind direction {tuple(w)} is not a unit vector (|w| = {norm:.8f})")
    w = w / norm
    if min(abs(w[0]), abs(w[1])) > 1e-9:
        raise UnsupportedWindDirectionError(
            "wind direction must be axis-aligned (the domain rectangle is "
            f"axis-aligned); got {tuple(w)}")
    return np.round(w)


def domain_from_bounds(bounds, wind_direction) -> DomainSpec:
    """DomainSpec for explicitly given rectangle bounds (edge tags from wind)."""
    w = _cardinal_direction(wind_direction)
    xmin, ymin, xmax, ymax = (float(v) for v in bounds)
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"degenerate domain bounds {bounds}")
    if w[1] > 0.5:
        inflow, outflow = "bottom", "top"
    elif w[1] < -0.5:
        inflow, outflow = "top", "bottom"
    elif w[0] > 0.5:
        inflow, outflow = "left", "right"
    else:
        inflow, outflow = "right", "left"
    noslip = tuple(e for e in _EDGE_NAMES if e not in (inflow, outflow))
    t = _crosswind_axis(w)
    crosswind_width = float(abs(np.array([xmax - xmin, ymax - ymin]) @ t))
    return DomainSpec(bounds=(xmin, ymin, xmax, ymax),
                      wind_direction=(float(w[0]), float(w[1])),
                      inflow_edge=inflow, outflow_edge=outflow,
                      noslip_edges=noslip,  # type: ignore[arg-type]
                      characteristic_length=crosswind_width)


def compute_domain_bounds(buildings: BuildingSet,
                          wind_direction,
                          br_max: float = BR_MAX_DEFAULT,
                          min_clearance: float = 0.0) -> DomainSpec:
    """Size the rectangular domain so the blockage ratio is strictly below br_max.

    The rectangle is the building bounding box expanded uniformly by a
    clearance; the clearance is the smallest value that keeps the crosswind
    occlusion strictly under ``br_max`` (upstream/downstream clearances are
    set equal to the crosswind one).  The characteristic length is the
    crosswind domain width.
    """
    if not buildings.polygons:
        raise EmptyBuildingSetError("cannot size a domain around zero buildings")
    if not 0.0 < br_max < 1.0:
        raise ValueError(f"br_max must lie in (0, 1), got {br_max}")
    w = _cardinal_direction(wind_direction)
    pts = buildings.all_vertices()
    t = _crosswind_axis(w)
    proj = pts @ t
    width_p = float(proj.max() - proj.min())
    if width_p <= 0.0:
        raise EmptyBuildingSetError("buildings have zero crosswind extent")
    # strict inequality: tiny headroom on top of the exact-threshold width
    clearance = max(float(min_clearance),
                    0.5 * width_p * ((1.0 + 1e-6) / br_max - 1.0))
    xmin, ymin = pts.min(axis=0) - clearance
    xmax, ymax = pts.max(axis=0) + clearance

    if w[1] > 0.5:
        inflow, outflow = "bottom", "top"
    elif w[1] < -0.5:
        inflow, outflow = "top", "bottom"
    elif w[0] > 0.5:
        inflow, outflow = "left", "right"
    else:
        inflow, outflow = "right", "left"
    noslip = tuple(e for e in _EDGE_NAMES if e not in (inflow, outflow))
    crosswind_width = float(abs(np.array([xmax - xmin, ymax - ymin]) @ t))
    return DomainSpec(
        bounds=(float(xmin), float(ymin), float(xmax), float(ymax)),
        wind_direction=(float(w[0]), float(w[1])),
        inflow_edge=inflow,
        outflow_edge=outflow,
        noslip_edges=noslip,  # type: ignore[arg-type]
        characteristic_length=crosswind_width,
    )
