"""Constrained Delaunay refinement kernel used by :mod:`amber.mesher`.

Pure-Python incremental triangulation: ear-clipped initial triangulation,
Lawson flips, Bowyer-Watson insertion that never crosses boundary
segments, and Ruppert-style refinement driven by a size function.
"""

from __future__ import annotations

import heapq
import math
from collections import deque

import numpy as np

_EPS = 1e-13


class RefinementError(RuntimeError):
    pass


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _orient_tol(ax, ay, bx, by, cx, cy):
    # sign with a forward error bound; 0 means "too close to call"
    l = (bx - ax) * (cy - ay)
    r = (by - ay) * (cx - ax)
    det = l - r
    bound = 1e-14 * (abs(l) + abs(r))
    if det > bound:
        return 1
    if det < -bound:
        return -1
    return 0


def _incircle(ax, ay, bx, by, cx, cy, dx, dy):
    """>0 when d is strictly inside the circumcircle of ccw (a, b, c)."""
    adx, ady = ax - dx, ay - dy
    bdx, bdy = bx - dx, by - dy
    cdx, cdy = cx - dx, cy - dy
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    bc = bdx * cdy - cdx * bdy
    ca = cdx * ady - adx * cdy
    ab = adx * bdy - bdx * ady
    det = alift * bc + blift * ca + clift * ab
    perm = (alift * (abs(bdx * cdy) + abs(cdx * bdy))
            + blift * (abs(cdx * ady) + abs(adx * cdy))
            + clift * (abs(adx * bdy) + abs(bdx * ady)))
    if det > 1e-12 * perm:
        return 1
    if det < -1e-12 * perm:
        return -1
    return 0


def _circumcenter(ax, ay, bx, by, cx, cy):
    bx -= ax
    by -= ay
    cx -= ax
    cy -= ay
    d = 2.0 * (bx * cy - by * cx)
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (cy * b2 - by * c2) / d
    uy = (bx * c2 - cx * b2) / d
    return ax + ux, ay + uy


def ear_clip(poly: np.ndarray) -> list[tuple[int, int, int]]:
    """Triangulate a simple ccw polygon given as an (n, 2) array."""
    idx = list(range(len(poly)))
    out = []
    guard = 0
    while len(idx) > 3:
        guard += 1
        if guard > 10 * len(poly) ** 2:
            raise RefinementError("ear clipping failed; polygon not simple?")
        n = len(idx)
        best = None
        for k in range(n):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % n]
            a, b, c = poly[i0], poly[i1], poly[i2]
            if _orient(a[0], a[1], b[0], b[1], c[0], c[1]) <= _EPS:
                continue
            clear = True
            for j in idx:
                if j in (i0, i1, i2):
                    continue
                p = poly[j]
                if (_orient(a[0], a[1], b[0], b[1], p[0], p[1]) >= 0
                        and _orient(b[0], b[1], c[0], c[1], p[0], p[1]) >= 0
                        and _orient(c[0], c[1], a[0], a[1], p[0], p[1]) >= 0):
                    clear = False
                    break
            if clear:
                best = k
                break
        if best is None:
            raise RefinementError("no ear found; polygon not simple?")
        n = len(idx)
        out.append((idx[best - 1], idx[best], idx[(best + 1) % n]))
        del idx[best]
    out.append((idx[0], idx[1], idx[2]))
    return out


class Triangulation:
    """Mutable constrained triangulation of a polygonal domain.

    ``nbr[t][k]`` is the triangle across the edge opposite local vertex k,
    -1 on the domain boundary.
    """

    def __init__(self, points, triangles, segments):
        self.x = [float(p[0]) for p in points]
        self.y = [float(p[1]) for p in points]
        self.tv: list[tuple[int, int, int]] = []
        self.nbr: list[list[int]] = []
        self.alive: list[bool] = []
        self.n_alive = 0
        self.seg: set[tuple[int, int]] = {(min(a, b), max(a, b)) for a, b in segments}
        self.seg_tri: dict[tuple[int, int], int] = {}
        self.vtri: list[int] = [-1] * len(self.x)
        edge_owner = {}
        for t in triangles:
            tid = self._new_triangle(*t)
            for k in range(3):
                u, w = t[(k + 1) % 3], t[(k + 2) % 3]
                edge_owner[(u, w)] = (tid, k)
        for (u, w), (tid, k) in edge_owner.items():
            other = edge_owner.get((w, u))
            if other is not None:
                self.nbr[tid][k] = other[0]
        self._lawson_all()

    # -- bookkeeping -----------------------------------------------------------
    def _new_triangle(self, a, b, c):
        tid = len(self.tv)
        self.tv.append((a, b, c))
        self.nbr.append([-1, -1, -1])
        self.alive.append(True)
        self.n_alive += 1
        for k, (u, w) in enumerate(((b, c), (c, a), (a, b))):
            key = (u, w) if u < w else (w, u)
            if key in self.seg:
                self.seg_tri[key] = tid
        self.vtri[a] = tid
        self.vtri[b] = tid
        self.vtri[c] = tid
        return tid

    def _kill(self, t):
        self.alive[t] = False
        self.n_alive -= 1

    def add_point(self, x, y):
        self.x.append(x)
        self.y.append(y)
        self.vtri.append(-1)
        return len(self.x) - 1

    def is_seg(self, u, w):
        return ((u, w) if u < w else (w, u)) in self.seg

    def triangles(self):
        return [self.tv[t] for t in range(len(self.tv)) if self.alive[t]]

    # -- Delaunay restoration --------------------------------------------------
    def _lawson_all(self):
        stack = [(t, k) for t in range(len(self.tv)) for k in range(3)]
        guard = 0
        while stack:
            guard += 1
            if guard > 100000:
                raise RefinementError("flip loop did not terminate")
            t, k = stack.pop()
            if not self.alive[t]:
                continue
            o = self.nbr[t][k]
            if o < 0:
                continue
            a = self.tv[t][k]
            u, w = self.tv[t][(k + 1) % 3], self.tv[t][(k + 2) % 3]
            if self.is_seg(u, w):
                continue
            ko = self._local_opposite(o, t)
            d = self.tv[o][ko]
            X, Y = self.x, self.y
            if _incircle(X[a], Y[a], X[u], Y[u], X[w], Y[w], X[d], Y[d]) <= 0:
                continue
            if (_orient(X[a], Y[a], X[u], Y[u], X[d], Y[d]) <= _EPS
                    or _orient(X[a], Y[a], X[d], Y[d], X[w], Y[w]) <= _EPS):
                continue
            # flip edge (u, w) -> (a, d)
            n_au = self.nbr[t][(k + 2) % 3]  # across (a, u)
            n_wa = self.nbr[t][(k + 1) % 3]  # across (w, a)
            n_ud = self._across(o, u, d)
            n_dw = self._across(o, d, w)
            self._kill(t)
            self._kill(o)
            t1 = self._new_triangle(a, u, d)
            t2 = self._new_triangle(a, d, w)
            self.nbr[t1] = [n_ud, t2, n_au]
            self.nbr[t2] = [n_dw, n_wa, t1]
            self._relink(n_ud, o, t1)
            self._relink(n_au, t, t1)
            self._relink(n_dw, o, t2)
            self._relink(n_wa, t, t2)
            stack.extend([(t1, 0), (t1, 2), (t2, 0), (t2, 1)])

    def _local_opposite(self, o, t):
        return self.nbr[o].index(t)

    def _across(self, t, u, w):
        tv = self.tv[t]
        for k in range(3):
            if {tv[(k + 1) % 3], tv[(k + 2) % 3]} == {u, w}:
                return self.nbr[t][k]
        raise RefinementError("edge not in triangle")

    def _relink(self, n, old, new):
        if n >= 0:
            row = self.nbr[n]
            row[row.index(old)] = new

    # -- point location ----------------------------------------------------------
    def walk(self, t, px, py):
        """Visibility walk toward (px, py).

        Returns ``(t, None)`` when t contains the point, or ``(t, (u, w))`` when
        the walk is stopped by the boundary segment (u, w) of triangle t.
        """
        X, Y = self.x, self.y
        limit = 4 * len(self.tv) + 16
        for _ in range(limit):
            tv = self.tv[t]
            step = None
            for k in range(3):
                u, w = tv[(k + 1) % 3], tv[(k + 2) % 3]
                if _orient_tol(X[u], Y[u], X[w], Y[w], px, py) < 0:
                    step = k
                    break
            if step is None:
                return t, None
            u, w = tv[(step + 1) % 3], tv[(step + 2) % 3]
            nxt = self.nbr[t][step]
            if nxt < 0 or self.is_seg(u, w):
                return t, (u, w)
            t = nxt
        raise RefinementError("point location walk did not terminate")

    # -- insertion -------------------------------------------------------------
    def cavity(self, t0, px, py, skip_edge=None):
        """Triangles whose circumcircle strictly contains p, grown from t0.

        The cavity never crosses segments and is trimmed until every boundary
        edge sees p on its inner side.  ``skip_edge`` is a segment that p lies on.
        """
        X, Y = self.x, self.y
        cav = {t0}
        order = [t0]
        queue = deque([t0])
        while queue:
            t = queue.popleft()
            tv = self.tv[t]
            for k in range(3):
                o = self.nbr[t][k]
                if o < 0 or o in cav:
                    continue
                u, w = tv[(k + 1) % 3], tv[(k + 2) % 3]
                if self.is_seg(u, w):
                    continue
                a, b, c = self.tv[o]
                if _incircle(X[a], Y[a], X[b], Y[b], X[c], Y[c], px, py) > 0:
                    cav.add(o)
                    order.append(o)
                    queue.append(o)
        # star-shape repair
        for _ in range(len(order) + 4):
            bad = None
            for t in order:
                if t not in cav:
                    continue
                tv = self.tv[t]
                for k in range(3):
                    o = self.nbr[t][k]
                    if o in cav:
                        continue
                    u, w = tv[(k + 1) % 3], tv[(k + 2) % 3]
                    if skip_edge is not None and {u, w} == set(skip_edge):
                        continue
                    if _orient_tol(X[u], Y[u], X[w], Y[w], px, py) <= 0:
                        bad = (t, k)
                        break
                if bad:
                    break
            if bad is None:
                return [t for t in order if t in cav]
            t, k = bad
            if t == t0:
                o = self.nbr[t][k]
                u, w = self.tv[t][(k + 1) % 3], self.tv[t][(k + 2) % 3]
                if o < 0 or self.is_seg(u, w) or o in cav:
                    return None
                cav.add(o)
                order.append(o)
            else:
                cav.discard(t)
                cav = self._connected(t0, cav)
        return None

    def _connected(self, t0, cav):
        keep = {t0}
        stack = [t0]
        while stack:
            t = stack.pop()
            for k, o in enumerate(self.nbr[t]):
                if o in cav and o not in keep:
                    u, w = self.tv[t][(k + 1) % 3], self.tv[t][(k + 2) % 3]
                    if not self.is_seg(u, w):
                        keep.add(o)
                        stack.append(o)
        return keep

    def boundary_segments(self, cav):
        """Segments on the rim of a cavity."""
        cavset = set(cav)
        out = []
        for t in cav:
            tv = self.tv[t]
            for k in range(3):
                if self.nbr[t][k] in cavset:
                    continue
                u, w = tv[(k + 1) % 3], tv[(k + 2) % 3]
                if self.is_seg(u, w):
                    out.append((u, w))
        return out

    def insert(self, px, py, cav, split_seg=None):
        """Insert p, retriangulating the cavity as a star around it.

        Returns (vertex id, new triangle ids).
        """
        v = self.add_point(px, py)
        cavset = set(cav)
        rim = []
        for t in cav:
            tv = self.tv[t]
            for k in range(3):
                o = self.nbr[t][k]
                if o in cavset:
                    continue
                u, w = tv[(k + 1) % 3], tv[(k + 2) % 3]
                if split_seg is not None and {u, w} == set(split_seg):
                    continue
                rim.append((u, w, o, t))
        if split_seg is not None:
            a, b = split_seg
            self.seg.discard((min(a, b), max(a, b)))
            self.seg_tri.pop((min(a, b), max(a, b)), None)
            self.seg.add((min(a, v), max(a, v)))
            self.seg.add((min(b, v), max(b, v)))
        for t in cav:
            self._kill(t)
        new = []
        spoke = {}
        for u, w, o, old in rim:
            tid = self._new_triangle(u, w, v)
            new.append(tid)
            self.nbr[tid][2] = o
            self._relink(o, old, tid)
            spoke[(w, v)] = (tid, 0)  # edge (w, v) opposite u
            spoke[(v, u)] = (tid, 1)  # edge (v, u) opposite w
        for (p, q), (tid, k) in spoke.items():
            other = spoke.get((q, p))
            if other is not None:
                self.nbr[tid][k] = other[0]
        return v, new


class Refiner:
    """Ruppert-style refinement of a triangulated polygon.

    ``size_fn`` maps an (n, 2) array of points to target sizes.  A triangle is
    refined when its smallest angle is below ``min_angle`` or its longest edge
    exceeds ``size_factor`` times the target size at its centroid.
    """

    def __init__(self, polygon: np.ndarray, size_fn, min_angle=20.0, size_factor=1.4,
                 max_elements=200_000):
        self.size_fn = size_fn
        self.size_factor = size_factor
        self.max_elements = max_elements
        self.ratio_bound = 1.0 / (2.0 * math.sin(math.radians(min_angle)))
        n = len(polygon)
        segs = [(i, (i + 1) % n) for i in range(n)]
        self.tri = Triangulation(polygon, ear_clip(polygon), segs)
        self.heap = []
        self.seg_queue = deque()
        self.unfixable = set()

    def _severity(self, t, size):
        tri = self.tri
        a, b, c = tri.tv[t]
        X, Y = tri.x, tri.y
        la = math.hypot(X[c] - X[b], Y[c] - Y[b])
        lb = math.hypot(X[a] - X[c], Y[a] - Y[c])
        lc = math.hypot(X[b] - X[a], Y[b] - Y[a])
        area = 0.5 * _orient(X[a], Y[a], X[b], Y[b], X[c], Y[c])
        lmin = min(la, lb, lc)
        lmax = max(la, lb, lc)
        if area <= 0:
            return math.inf
        circ_r = la * lb * lc / (4.0 * area)
        quality = (circ_r / lmin) / self.ratio_bound
        return max(quality, lmax / (self.size_factor * size))

    def _enqueue(self, tids):
        tri = self.tri
        if not tids:
            return
        X, Y = tri.x, tri.y
        cent = np.empty((len(tids), 2))
        for i, t in enumerate(tids):
            a, b, c = tri.tv[t]
            cent[i, 0] = (X[a] + X[b] + X[c]) / 3.0
            cent[i, 1] = (Y[a] + Y[b] + Y[c]) / 3.0
        sizes = self.size_fn(cent)
        for t, s in zip(tids, sizes):
            sev = self._severity(t, float(s))
            if sev > 1.0:
                heapq.heappush(self.heap, (-sev, t))
            tv = tri.tv[t]
            for k in range(3):
                u, w = tv[(k + 1) % 3], tv[(k + 2) % 3]
                if tri.is_seg(u, w) and self._seg_needs_split(u, w, tv[k]):
                    self.seg_queue.append((u, w))

    def _seg_needs_split(self, u, w, apex):
        X, Y = self.tri.x, self.tri.y
        dot = (X[u] - X[apex]) * (X[w] - X[apex]) + (Y[u] - Y[apex]) * (Y[w] - Y[apex])
        if dot < -1e-14 * ((X[u] - X[w]) ** 2 + (Y[u] - Y[w]) ** 2):
            return True
        return False

    def _encroaches(self, u, w, px, py):
        X, Y = self.tri.x, self.tri.y
        dot = (X[u] - px) * (X[w] - px) + (Y[u] - py) * (Y[w] - py)
        return dot < 0.0

    def split_segment(self, u, w):
        tri = self.tri
        key = (min(u, w), max(u, w))
        if key not in tri.seg:
            return False
        t0 = tri.seg_tri[key]
        mx = 0.5 * (tri.x[u] + tri.x[w])
        my = 0.5 * (tri.y[u] + tri.y[w])
        cav = tri.cavity(t0, mx, my, skip_edge=(u, w))
        if cav is None:
            raise RefinementError("segment split produced an invalid cavity")
        _, new = tri.insert(mx, my, cav, split_seg=(u, w))
        self._enqueue(new)
        return True

    def run(self):
        tri = self.tri
        self._enqueue([t for t in range(len(tri.tv)) if tri.alive[t]])
        # segments too long for the size function are split up front
        self._split_long_segments()
        steps = 0
        cap = 50 * self.max_elements + 1000
        while self.seg_queue or self.heap:
            steps += 1
            if steps > cap:
                raise RefinementError("refinement did not terminate")
            if tri.n_alive > self.max_elements:
                raise RefinementError(
                    f"element cap of {self.max_elements} exceeded; sizing field too fine")
            if self.seg_queue:
                u, w = self.seg_queue.popleft()
                key = (min(u, w), max(u, w))
                if key in tri.seg:
                    t = tri.seg_tri[key]
                    apex = [v for v in tri.tv[t] if v not in key][0]
                    if self._seg_needs_split(u, w, apex):
                        self.split_segment(u, w)
                continue
            _, t = heapq.heappop(self.heap)
            if not tri.alive[t] or t in self.unfixable:
                continue
            a, b, c = tri.tv[t]
            X, Y = tri.x, tri.y
            cx, cy = _circumcenter(X[a], Y[a], X[b], Y[b], X[c], Y[c])
            host, blocked = tri.walk(t, cx, cy)
            if blocked is not None:
                self.split_segment(*blocked)
                self._requeue(t)
                continue
            cav = tri.cavity(host, cx, cy)
            if cav is None:
                self.unfixable.add(t)
                continue
            enc = [s for s in tri.boundary_segments(cav) if self._encroaches(s[0], s[1], cx, cy)]
            if enc:
                for s in enc:
                    self.split_segment(*s)
                self._requeue(t)
                continue
            if self._too_close(host, cx, cy):
                self.unfixable.add(t)
                continue
            _, new = tri.insert(cx, cy, cav)
            self._enqueue(new)
        return tri

    def _requeue(self, t):
        if self.tri.alive[t]:
            self._enqueue([t])

    def _too_close(self, t, px, py):
        tri = self.tri
        scale = 0.0
        dmin = math.inf
        for v in tri.tv[t]:
            d = math.hypot(tri.x[v] - px, tri.y[v] - py)
            dmin = min(dmin, d)
            scale = max(scale, d)
        return dmin <= 1e-10 * max(scale, 1e-300)

    def _split_long_segments(self):
        tri = self.tri
        changed = True
        while changed:
            changed = False
            segs = sorted(tri.seg)
            mids = np.array([[0.5 * (tri.x[u] + tri.x[w]), 0.5 * (tri.y[u] + tri.y[w])]
                             for u, w in segs])
            sizes = self.size_fn(mids)
            for (u, w), s in zip(segs, sizes):
                length = math.hypot(tri.x[u] - tri.x[w], tri.y[u] - tri.y[w])
                if length > self.size_factor * float(s):
                    self.split_segment(u, w)
                    changed = True
            if tri.n_alive > self.max_elements:
                raise RefinementError(
                    f"element cap of {self.max_elements} exceeded; sizing field too fine")

    def result(self):
        tri = self.tri
        tris = np.array(tri.triangles(), dtype=np.int64).reshape(-1, 3)
        used = np.unique(tris)
        remap = -np.ones(len(tri.x), dtype=np.int64)
        remap[used] = np.arange(len(used))
        pts = np.column_stack([np.asarray(tri.x)[used], np.asarray(tri.y)[used]])
        return pts, remap[tris]
