"""Random Poisson problem instances: L-shaped domains and Gaussian-mixture loads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

N_COMPONENTS = 3
_MAX_MEAN_ATTEMPTS = 10_000
_BOUNDARY_TOL = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; every sampler in the package draws from one of these."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class Polygon2:
    """Simple counter-clockwise polygon without holes."""

    vertices: np.ndarray  # (n, 2)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("polygon needs at least 3 two-dimensional vertices")
        object.__setattr__(self, "vertices", v)

    @property
    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    @property
    def edges(self) -> np.ndarray:
        """(n, 2, 2) array of consecutive vertex pairs, closing edge included."""
        return np.stack([self.vertices, np.roll(self.vertices, -1, axis=0)], axis=1)

    def bbox(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def is_simple(self) -> bool:
        n = len(self.vertices)
        e = self.edges
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if _segments_intersect(e[i, 0], e[i, 1], e[j, 0], e[j, 1]):
                    return False
        return True

    def to_json(self) -> dict:
        return {"vertices": [[float(x), float(y)] for x, y in self.vertices]}

    @classmethod
    def from_json(cls, obj: dict) -> Polygon2:
        return cls(np.array(obj["vertices"], dtype=float))


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_intersect(p1, p2, q1, q2) -> bool:
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 < 0 and d3 * d4 < 0:
        return True
    return False


def lshape(corner) -> Polygon2:
    """Unit square minus the rectangle spanned by ``corner`` and (1, 1)."""
    px, py = float(corner[0]), float(corner[1])
    return Polygon2(np.array([
        [0.0, 0.0], [1.0, 0.0], [1.0, py], [px, py], [px, 1.0], [0.0, 1.0],
    ]))


def sample_lshape(rng: np.random.Generator) -> Polygon2:
    corner = rng.uniform(0.2, 0.95, size=2)
    return lshape(corner)


def point_segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    d = p - (a + t * ab)
    return math.hypot(d[0], d[1])


def contains(domain: Polygon2, p) -> bool:
    """Boundary-inclusive point-in-polygon test (even-odd rule)."""
    p = np.asarray(p, dtype=float)
    verts = domain.vertices
    n = len(verts)
    for i in range(n):
        if point_segment_distance(p, verts[i], verts[(i + 1) % n]) <= _BOUNDARY_TOL:
            return True
    x, y = p
    inside = False
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


@dataclass(frozen=True)
class GmmLoad:
    """Gaussian mixture used as the right-hand side of the Poisson problem."""

    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, 2)
    covariances: np.ndarray  # (k, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "covariances",
                           np.asarray(self.covariances, dtype=float).reshape(-1, 2, 2))
        k = len(self.weights)
        if self.means.shape[0] != k or self.covariances.shape[0] != k:
            raise ValueError("inconsistent mixture component counts")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to one")
        for c in self.covariances:
            if np.any(np.linalg.eigvalsh(c) <= 0):
                raise ValueError("covariance matrices must be positive definite")

    def to_json(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "means": [[float(x), float(y)] for x, y in self.means],
            # row-major 2x2 blocks
            "covariances": [[float(v) for v in c.reshape(-1)] for c in self.covariances],
        }

    @classmethod
    def from_json(cls, obj: dict) -> GmmLoad:
        return cls(
            np.array(obj["weights"], dtype=float),
            np.array(obj["means"], dtype=float),
            np.array(obj["covariances"], dtype=float).reshape(-1, 2, 2),
        )

    def transformed(self, rotation: np.ndarray, shift) -> GmmLoad:
        """Load pushed forward by x -> R x + shift."""
        rot = np.asarray(rotation, dtype=float)
        means = self.means @ rot.T + np.asarray(shift, dtype=float)
        covs = np.einsum("ij,kjl,ml->kim", rot, self.covariances, rot)
        return GmmLoad(self.weights.copy(), means, covs)


def sample_gmm_load(rng: np.random.Generator, domain: Polygon2) -> GmmLoad:
    means = np.empty((N_COMPONENTS, 2))
    for k in range(N_COMPONENTS):
        for _ in range(_MAX_MEAN_ATTEMPTS):
            mu = rng.uniform(0.1, 0.9, size=2)
            if contains(domain, mu):
                means[k] = mu
                break
        else:
            raise RuntimeError("could not place a mixture mean inside the domain")
    covs = np.empty((N_COMPONENTS, 2, 2))
    for k in range(N_COMPONENTS):
        diag = np.exp(rng.uniform(math.log(1e-4), math.log(1e-3), size=2))
        angle = rng.uniform(0.0, math.pi)
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        cov = rot @ np.diag(diag) @ rot.T
        covs[k] = 0.5 * (cov + cov.T)
    raw = np.exp(rng.normal(0.0, 1.0, size=N_COMPONENTS)) + 1.0
    weights = raw / raw.sum()
    return GmmLoad(weights, means, covs)


def eval_load(load: GmmLoad, points) -> np.ndarray | float:
    """Mixture density at one point (returns float) or at an (n, 2) array of points."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    out = np.zeros(len(pts))
    for w, mu, cov in zip(load.weights, load.means, load.covariances):
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
        inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]]) / det
        d = pts - mu
        q = np.einsum("ni,ij,nj->n", d, inv, d)
        out += w * np.exp(-0.5 * q) / (2.0 * math.pi * math.sqrt(det))
    return float(out[0]) if single else out
