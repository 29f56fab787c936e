"""Constrained Delaunay triangulation with Ruppert-style refinement.

The engine triangulates an axis-aligned rectangle with polygonal holes
(building footprints) kept as internal constrained boundaries, then refines
by circumcenter insertion until every triangle outside the holes meets the
minimum-angle bound and the local size target.  Encroached constrained
subsegments are split at their midpoints, Ruppert style, so constrained
edges survive every insertion and boundary tags stay attached to their
subsegments through splits.

All incidence decisions go through the robust predicates; coordinates are
never perturbed.
"""

from __future__ import annotations

import heapq
import math

import numpy as np
from shapely.geometry import Point as ShapelyPoint
from shapely.geometry import Polygon as ShapelyPolygon
from shapely.prepared import prep

from .errors import MeshTopologyError, SegmentConflictError, TriangleBudgetError
from .predicates import incircle, orient2d

_WALK_LIMIT = 20000


def _seg_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


class _Engine:
    """Mutable triangulation state; one instance per meshing run."""

    def __init__(self, rect, size_fn, min_angle_deg, max_triangles):
        self.size_fn = size_fn
        self.max_triangles = max_triangles
        # skinny iff circumradius / shortest edge > 1 / (2 sin(min_angle))
        self.ratio_bound = 1.0 / (2.0 * math.sin(math.radians(min_angle_deg)))

        xmin, ymin, xmax, ymax = rect
        self.points: list[tuple[float, float]] = []
        self._pts_buf = np.empty((256, 2), dtype=float)
        for p in ((xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)):
            self._append_point(p)
        # triangle -> [a, b, c] CCW, or None when dead
        self.tris: list[list[int] | None] = [[0, 1, 2], [0, 2, 3]]
        # neighbor triangle across the edge opposite local vertex k
        self.adj: list[list[int]] = [[-1, 1, -1], [-1, -1, 0]]
        self.region: list[int] = [0, 0]  # 0 = flow domain, 1+i = inside hole i
        self.alive_count = 2
        # constrained subsegment -> boundary tag
        self.seg_tag: dict[tuple[int, int], object] = {}
        # encroachment geometry per subsegment, grown in parallel buffers
        self._seg_slot: dict[tuple[int, int], int] = {}
        self._slot_seg: list[tuple[int, int] | None] = []
        self._seg_mid = np.empty((256, 2), dtype=float)
        self._seg_r2 = np.empty(256, dtype=float)
        self._seg_alive = np.zeros(256, dtype=bool)
        self.n_segs = 0
        self.split_queue: list[tuple[int, int]] = []
        self._hint = 0
        self._heap: list[tuple[float, int, int, tuple[int, int, int]]] = []
        self._heap_seq = 0
        self.refining = False

        for side, (a, b) in zip(("bottom", "right", "top", "left"),
                                ((0, 1), (1, 2), (2, 3), (3, 0))):
            self._register_constraint(a, b, ("rect", side))

    # -- storage helpers ------------------------------------------------------

    def _append_point(self, p):
        n = len(self.points)
        if n == len(self._pts_buf):
            self._pts_buf = np.vstack([self._pts_buf, np.empty_like(self._pts_buf)])
        self._pts_buf[n] = p
        self.points.append((float(p[0]), float(p[1])))
        return n

    def _tri_pts(self, t):
        a, b, c = self.tris[t]
        return self.points[a], self.points[b], self.points[c]

    def _circumcenter(self, t):
        (ax, ay), (bx, by), (cx, cy) = self._tri_pts(t)
        bx_, by_ = bx - ax, by - ay
        cx_, cy_ = cx - ax, cy - ay
        d = 2.0 * (bx_ * cy_ - by_ * cx_)
        if d == 0.0:
            return None, math.inf
        b2 = bx_ * bx_ + by_ * by_
        c2 = cx_ * cx_ + cy_ * cy_
        ux = (cy_ * b2 - by_ * c2) / d
        uy = (bx_ * c2 - cx_ * b2) / d
        return (ax + ux, ay + uy), math.hypot(ux, uy)

    def _tri_quality(self, t):
        """(circumradius, shortest edge length, centroid)."""
        (ax, ay), (bx, by), (cx, cy) = self._tri_pts(t)
        la = math.hypot(cx - bx, cy - by)
        lb = math.hypot(cx - ax, cy - ay)
        lc = math.hypot(bx - ax, by - ay)
        area2 = abs((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))
        if area2 == 0.0:
            return math.inf, min(la, lb, lc), ((ax + bx + cx) / 3.0, (ay + by + cy) / 3.0)
        r = la * lb * lc / (2.0 * area2)
        return r, min(la, lb, lc), ((ax + bx + cx) / 3.0, (ay + by + cy) / 3.0)

    # -- constrained segment bookkeeping ---------------------------------------

    def _register_constraint(self, a, b, tag):
        key = _seg_key(a, b)
        self.seg_tag[key] = tag
        (ax, ay), (bx, by) = self.points[a], self.points[b]
        slot = self.n_segs
        if slot == len(self._seg_r2):
            self._seg_mid = np.vstack([self._seg_mid, np.empty_like(self._seg_mid)])
            self._seg_r2 = np.concatenate([self._seg_r2, np.empty_like(self._seg_r2)])
            self._seg_alive = np.concatenate([self._seg_alive, np.zeros_like(self._seg_alive)])
        self._seg_mid[slot] = ((ax + bx) / 2.0, (ay + by) / 2.0)
        self._seg_r2[slot] = ((ax - bx) ** 2 + (ay - by) ** 2) / 4.0
        self._seg_alive[slot] = True
        self._slot_seg.append(key)
        self._seg_slot[key] = slot
        self.n_segs += 1

    def _drop_constraint(self, key):
        tag = self.seg_tag.pop(key)
        slot = self._seg_slot.pop(key)
        self._slot_seg[slot] = None
        self._seg_alive[slot] = False
        return tag

    def _encroached_by(self, x, y, exclude=()):
        """Constrained subsegments whose open diametral disk contains (x, y)."""
        n = self.n_segs
        d2 = (self._seg_mid[:n, 0] - x) ** 2 + (self._seg_mid[:n, 1] - y) ** 2
        hits = np.nonzero(self._seg_alive[:n] & (d2 < self._seg_r2[:n] * (1.0 - 1e-12)))[0]
        out = []
        for slot in hits:
            key = self._slot_seg[slot]
            if key in exclude:
                continue
            a, b = key
            if (x, y) != self.points[a] and (x, y) != self.points[b]:
                out.append(key)
        return out

    def _segment_encroached(self, key):
        """True when any existing vertex sits strictly inside the diametral disk."""
        slot = self._seg_slot[key]
        mx, my = self._seg_mid[slot]
        r2 = self._seg_r2[slot] * (1.0 - 1e-12)
        n = len(self.points)
        pts = self._pts_buf[:n]
        d2 = (pts[:, 0] - mx) ** 2 + (pts[:, 1] - my) ** 2
        d2[list(key)] = np.inf
        return bool((d2 < r2).any())

    # -- point location ---------------------------------------------------------

    def locate(self, x, y, hint=None):
        """Walk to the triangle containing (x, y).

        Returns (tri, kind, k): kind is "in", "edge" (on edge opposite local
        vertex k) or "vertex" (at local vertex k).
        """
        t = hint if hint is not None and self.tris[hint] is not None else self._hint
        if self.tris[t] is None:
            t = next(i for i, tri in enumerate(self.tris) if tri is not None)
        prev = -1
        for _ in range(_WALK_LIMIT):
            res = self._classify_in_triangle(t, x, y)
            if res is not None:
                self._hint = t
                return (t, *res)
            a, b, c = self.tris[t]
            pa, pb, pc = self.points[a], self.points[b], self.points[c]
            o0 = orient2d(pb[0], pb[1], pc[0], pc[1], x, y)
            o1 = orient2d(pc[0], pc[1], pa[0], pa[1], x, y)
            o2 = orient2d(pa[0], pa[1], pb[0], pb[1], x, y)
            candidates = sorted((o, k) for k, o in enumerate((o0, o1, o2)) if o < 0)
            moved = False
            for _, k in candidates:
                nxt = self.adj[t][k]
                if nxt != -1 and nxt != prev:
                    prev, t = t, nxt
                    moved = True
                    break
            if not moved:
                nxt = self.adj[t][candidates[0][1]] if candidates else -1
                if nxt == -1:
                    raise MeshTopologyError(
                        f"point ({x}, {y}) lies outside the triangulated domain")
                prev, t = t, nxt
        for t, tri in enumerate(self.tris):  # degenerate walk: full scan
            if tri is None:
                continue
            res = self._classify_in_triangle(t, x, y)
            if res is not None:
                return (t, *res)
        raise MeshTopologyError(f"point ({x}, {y}) could not be located")

    def _classify_in_triangle(self, t, x, y):
        a, b, c = self.tris[t]
        pa, pb, pc = self.points[a], self.points[b], self.points[c]
        o0 = orient2d(pb[0], pb[1], pc[0], pc[1], x, y)
        o1 = orient2d(pc[0], pc[1], pa[0], pa[1], x, y)
        o2 = orient2d(pa[0], pa[1], pb[0], pb[1], x, y)
        if o0 < 0 or o1 < 0 or o2 < 0:
            return None
        zeros = [k for k, o in enumerate((o0, o1, o2)) if o == 0]
        if not zeros:
            return ("in", -1)
        if len(zeros) == 1:
            return ("edge", zeros[0])
        return ("vertex", ({0, 1, 2} - set(zeros)).pop())

    # -- Bowyer-Watson insertion -------------------------------------------------

    def insert_point(self, x, y, *, on_segment=None, hint=None):
        """Insert (x, y); returns the new vertex index and new triangle ids.

        ``on_segment`` names a constrained subsegment key being split so its
        constraint is replaced by the two halves (tag inherited).
        """
        tag = None
        if on_segment is not None:
            tag = self._drop_constraint(on_segment)

        t, kind, k = self.locate(x, y, hint=hint)
        if kind == "vertex":
            if tag is not None:  # degenerate split: restore the constraint
                self._register_constraint(*on_segment, tag)
            return self.tris[t][k], []
        if kind == "edge" and on_segment is None:
            # landed exactly on an edge; if constrained it must be split properly
            tri = self.tris[t]
            key = _seg_key(tri[(k + 1) % 3], tri[(k + 2) % 3])
            if key in self.seg_tag:
                tag = self._drop_constraint(key)
                on_segment = key

        seeds = [t]
        if kind == "edge":
            n = self.adj[t][k]
            if n != -1:
                seeds.append(n)

        # grow the cavity: circumcircle contains p, never crossing constraints
        in_cavity = set(seeds)
        stack = list(seeds)
        while stack:
            cur = stack.pop()
            tri = self.tris[cur]
            for kk in range(3):
                n = self.adj[cur][kk]
                if n == -1 or n in in_cavity:
                    continue
                u, v = tri[(kk + 1) % 3], tri[(kk + 2) % 3]
                if _seg_key(u, v) in self.seg_tag:
                    continue
                a, b, c = self.tris[n]
                pa, pb, pc = self.points[a], self.points[b], self.points[c]
                if incircle(pa[0], pa[1], pb[0], pb[1], pc[0], pc[1], x, y) > 0:
                    in_cavity.add(n)
                    stack.append(n)

        # directed cavity boundary (interior on the left), with outside links
        boundary = []
        degenerate_skips = 0
        for cur in sorted(in_cavity):
            tri = self.tris[cur]
            for kk in range(3):
                n = self.adj[cur][kk]
                if n in in_cavity:
                    continue
                u, v = tri[(kk + 1) % 3], tri[(kk + 2) % 3]
                pu, pv = self.points[u], self.points[v]
                if orient2d(pu[0], pu[1], pv[0], pv[1], x, y) == 0:
                    # p lies on this hull edge: it is replaced by two sub-edges
                    degenerate_skips += 1
                    continue
                boundary.append((u, v, n, self.region[cur]))

        vi = self._append_point((x, y))

        for cur in in_cavity:
            self.tris[cur] = None
            self.alive_count -= 1

        new_ids = []
        edge_owner: dict[tuple[int, int], tuple[int, int]] = {}
        for (u, v, outer, reg) in boundary:
            ti = len(self.tris)
            self.tris.append([u, v, vi])
            self.adj.append([-1, -1, outer])  # edge 2 = (u, v) faces outward
            self.region.append(reg)
            self.alive_count += 1
            new_ids.append(ti)
            if outer != -1:
                out_tri = self.tris[outer]
                for kk in range(3):
                    if _seg_key(out_tri[(kk + 1) % 3], out_tri[(kk + 2) % 3]) == _seg_key(u, v):
                        self.adj[outer][kk] = ti
                        break
            # internal fan edges: (v, vi) opposite slot 0, (u, vi) opposite slot 1
            for key, slot in ((_seg_key(v, vi), 0), (_seg_key(u, vi), 1)):
                if key in edge_owner:
                    other_ti, other_slot = edge_owner.pop(key)
                    self.adj[ti][slot] = other_ti
                    self.adj[other_ti][other_slot] = ti
                else:
                    edge_owner[key] = (ti, slot)
        if edge_owner and not degenerate_skips:
            raise MeshTopologyError("cavity retriangulation left unmatched edges")
        for key in edge_owner:  # hull sub-edges created by a degenerate skip
            if vi not in key:
                raise MeshTopologyError("cavity retriangulation left unmatched edges")

        if self.alive_count > self.max_triangles:
            raise TriangleBudgetError(
                f"triangle budget of {self.max_triangles} exceeded during refinement")

        if tag is not None:
            a, b = on_segment
            for u in (a, b):
                key = _seg_key(u, vi)
                self._register_constraint(u, vi, tag)
                if self._segment_encroached(key):
                    self.split_queue.append(key)
        # the new vertex may encroach other constrained subsegments
        for key in self._encroached_by(x, y):
            self.split_queue.append(key)

        if self.refining:
            for ti in new_ids:
                self._push_triangle(ti)
        self._hint = new_ids[0] if new_ids else self._hint
        return vi, new_ids

    # -- constraint recovery -------------------------------------------------------

    def recover_segment(self, a, b, tag, depth=0):
        """Force (a, b) into the triangulation by recursive midpoint splits."""
        if depth > 48:
            raise MeshTopologyError(
                f"segment recovery between vertices {a} and {b} did not terminate")
        if self._edge_exists(a, b):
            self._register_constraint(a, b, tag)
            return
        (ax, ay), (bx, by) = self.points[a], self.points[b]
        vi, _ = self.insert_point((ax + bx) / 2.0, (ay + by) / 2.0)
        self.recover_segment(a, vi, tag, depth + 1)
        self.recover_segment(vi, b, tag, depth + 1)

    def _edge_exists(self, a, b):
        target = _seg_key(a, b)
        for tri in self.tris:
            if tri is None:
                continue
            for kk in range(3):
                if _seg_key(tri[kk], tri[(kk + 1) % 3]) == target:
                    return True
        return False

    # -- splitting and refinement -----------------------------------------------

    def split_segment(self, key):
        if key not in self.seg_tag:
            return
        a, b = key
        (ax, ay), (bx, by) = self.points[a], self.points[b]
        self.insert_point((ax + bx) / 2.0, (ay + by) / 2.0, on_segment=key)

    def process_split_queue(self):
        while self.split_queue:
            self.split_segment(self.split_queue.pop())

    def _push_triangle(self, t):
        tri = self.tris[t]
        if tri is None or self.region[t] != 0:
            return
        r, lmin, centroid = self._tri_quality(t)
        h = self.size_fn(centroid[0], centroid[1])
        if r > self.ratio_bound * lmin or r > h:
            heapq.heappush(self._heap, (-r, self._heap_seq, t, tuple(tri)))
            self._heap_seq += 1

    def refine(self):
        """Ruppert loop: split encroached segments, then bad triangles."""
        self.refining = True
        self.process_split_queue()
        for t, tri in enumerate(self.tris):
            if tri is not None:
                self._push_triangle(t)
        while self._heap:
            _, _, t, stamp = heapq.heappop(self._heap)
            tri = self.tris[t]
            if tri is None or tuple(tri) != stamp or self.region[t] != 0:
                continue
            r, lmin, centroid = self._tri_quality(t)
            h = self.size_fn(centroid[0], centroid[1])
            if r <= self.ratio_bound * lmin and r <= h:
                continue
            center, _ = self._circumcenter(t)
            if center is None:
                continue
            cx, cy = center
            progress = False
            encroached = self._encroached_by(cx, cy)
            if encroached:
                for key in encroached:
                    self.split_segment(key)
                progress = True
            elif self._center_insertable(cx, cy):
                _, new_ids = self.insert_point(cx, cy, hint=t)
                progress = bool(new_ids)
            else:
                key = self._blocking_segment(centroid, (cx, cy))
                if key is not None:
                    self.split_segment(key)
                    progress = True
            self.process_split_queue()
            if progress and self.tris[t] is not None and tuple(self.tris[t]) == stamp:
                self._push_triangle(t)

    def _center_insertable(self, cx, cy):
        """Center must stay inside the rectangle and in the flow region."""
        xmin, ymin = self.points[0]
        xmax, ymax = self.points[2]
        if not (xmin < cx < xmax and ymin < cy < ymax):
            return False
        try:
            t, _, _ = self.locate(cx, cy, hint=self._hint)
        except MeshTopologyError:
            return False
        return self.region[t] == 0

    def _blocking_segment(self, src, dst):
        """First constrained subsegment crossed walking from src toward dst."""
        best = None
        best_t = math.inf
        sx, sy = src
        dx, dy = dst
        for key in self.seg_tag:
            a, b = key
            (ax, ay), (bx, by) = self.points[a], self.points[b]
            o1 = orient2d(sx, sy, dx, dy, ax, ay)
            o2 = orient2d(sx, sy, dx, dy, bx, by)
            o3 = orient2d(ax, ay, bx, by, sx, sy)
            o4 = orient2d(ax, ay, bx, by, dx, dy)
            if o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4):
                denom = (bx - ax) * (dy - sy) - (by - ay) * (dx - sx)
                tpar = (((sx - ax) * (dy - sy) - (sy - ay) * (dx - sx)) / denom
                        if denom != 0.0 else 0.5)
                if tpar < best_t:
                    best_t = tpar
                    best = key
        return best

    # -- setup passes ---------------------------------------------------------------

    def presplit_constraints(self):
        """Subdivide constrained subsegments down to the local size target."""
        work = True
        while work:
            work = False
            for key in list(self.seg_tag.keys()):
                if key not in self.seg_tag:
                    continue
                a, b = key
                (ax, ay), (bx, by) = self.points[a], self.points[b]
                length = math.hypot(bx - ax, by - ay)
                h = self.size_fn((ax + bx) / 2.0, (ay + by) / 2.0)
                if length > h * 1.0000001:
                    self.split_segment(key)
                    work = True
            self.process_split_queue()

    def fix_initial_encroachment(self):
        for key in list(self.seg_tag.keys()):
            if key in self.seg_tag and self._segment_encroached(key):
                self.split_queue.append(key)
        self.process_split_queue()

    def classify_regions(self, building_rings):
        """Flag triangles inside each hole polygon (constraints all present)."""
        if not building_rings:
            return
        prepared = [prep(ShapelyPolygon(r)) for r in building_rings]
        for t, tri in enumerate(self.tris):
            if tri is None:
                continue
            pa, pb, pc = self._tri_pts(t)
            cx = (pa[0] + pb[0] + pc[0]) / 3.0
            cy = (pa[1] + pb[1] + pc[1]) / 3.0
            pt = ShapelyPoint(cx, cy)
            for bi, poly in enumerate(prepared):
                if poly.contains(pt):
                    self.region[t] = bi + 1
                    break

    # -- export -----------------------------------------------------------------------

    def export(self):
        """Compact live flow-region triangles plus tagged boundary subsegments."""
        live = [t for t, tri in enumerate(self.tris) if tri is not None and self.region[t] == 0]
        used = sorted({v for t in live for v in self.tris[t]})
        remap = {old: new for new, old in enumerate(used)}
        verts = np.array([self.points[i] for i in used], dtype=float)
        tris = np.array([[remap[v] for v in self.tris[t]] for t in live], dtype=np.int64)

        edge_count: dict[tuple[int, int], int] = {}
        for tri in tris:
            for kk in range(3):
                key = _seg_key(int(tri[kk]), int(tri[(kk + 1) % 3]))
                edge_count[key] = edge_count.get(key, 0) + 1
        boundary = []
        for key, cnt in sorted(edge_count.items()):
            if cnt != 1:
                continue
            old_key = _seg_key(used[key[0]], used[key[1]])
            tag = self.seg_tag.get(old_key)
            if tag is None:
                raise MeshTopologyError(
                    f"boundary edge {key} lies on no rectangle side and no building perimeter")
            boundary.append((key, tag))
        return verts, tris, boundary


# ---------------------------------------------------------------------------
# input validation and the public entry point
# ---------------------------------------------------------------------------

def _segments_conflict(p1, p2, p3, p4) -> bool:
    """Proper crossing or collinear overlap between two segments."""
    o1 = orient2d(*p1, *p2, *p3)
    o2 = orient2d(*p1, *p2, *p4)
    o3 = orient2d(*p3, *p4, *p1)
    o4 = orient2d(*p3, *p4, *p2)
    if o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4):
        return True
    if o1 == 0 and o2 == 0:  # collinear: overlapping extents conflict
        ax = sorted((p1[0], p2[0]))
        bx = sorted((p3[0], p4[0]))
        ay = sorted((p1[1], p2[1]))
        by = sorted((p3[1], p4[1]))
        if min(ax[1], bx[1]) - max(ax[0], bx[0]) > 0:
            return True
        if min(ay[1], by[1]) - max(ay[0], by[0]) > 0:
            return True
    return False


def _check_input_segments(segments):
    """Reject crossing input segments (shared endpoints are fine)."""
    for i in range(len(segments)):
        for j in range(i + 1, len(segments)):
            (a, b) = segments[i]
            (c, d) = segments[j]
            if a in (c, d) or b in (c, d):
                continue
            if _segments_conflict(a, b, c, d):
                raise SegmentConflictError((a, b), (c, d))


def triangulate_pslg(rect, building_rings, size_fn, *,
                     min_angle_deg=20.0, max_triangles=200_000):
    """Mesh the rectangle minus the given hole polygons.

    ``rect`` is (xmin, ymin, xmax, ymax); ``building_rings`` are closed CCW
    rings strictly inside the rectangle.  ``size_fn(x, y)`` is the local
    circumradius target.  Returns (vertices, triangles, boundary) where
    boundary pairs vertex-index edges with ("rect", side) or
    ("building", index) tags.
    """
    segments = []
    xmin, ymin, xmax, ymax = rect
    corners = [(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)]
    for k in range(4):
        segments.append((corners[k], corners[(k + 1) % 4]))
    for ring in building_rings:
        pts = [tuple(p) for p in np.asarray(ring, dtype=float)[:-1]]
        for k in range(len(pts)):
            segments.append((pts[k], pts[(k + 1) % len(pts)]))
    _check_input_segments(segments)

    eng = _Engine(rect, size_fn, min_angle_deg, max_triangles)
    ring_vertex_ids = []
    for ring in building_rings:
        ids = []
        for (x, y) in np.asarray(ring, dtype=float)[:-1]:
            vi, _ = eng.insert_point(float(x), float(y))
            ids.append(vi)
        ring_vertex_ids.append(ids)
    for bi, ids in enumerate(ring_vertex_ids):
        for k in range(len(ids)):
            a, b = ids[k], ids[(k + 1) % len(ids)]
            if _seg_key(a, b) in eng.seg_tag:
                continue
            eng.recover_segment(a, b, ("building", bi))
    eng.classify_regions([np.asarray(r, dtype=float) for r in building_rings])
    eng.presplit_constraints()
    eng.fix_initial_encroachment()
    eng.refine()
    return eng.export()
