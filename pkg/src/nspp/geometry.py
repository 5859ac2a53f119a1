"""Spatial domains, Voronoi partitions, and region assignment on the plane.

Everything operates on plain ``(n, 2)`` float arrays.  A study region is
either an axis-aligned rectangle or a simple polygon; areas come from the
shoelace formula and uniform draws use bounding-box rejection, so no
tessellation cell ever needs its own area computed.

Two locations closer than ``MERGE_TOL`` are treated as the same point
throughout the package (candidate deduplication, anchor lookups).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MERGE_TOL = 1e-9


class InvalidDomainError(ValueError):
    """Raised for degenerate domains: zero area, self-intersection, bad bounds."""


@dataclass(frozen=True)
class Location:
    """A point of the plane.  Convenience wrapper used at API edges."""

    x: float
    y: float

    def as_array(self):
        return np.array([self.x, self.y], dtype=float)


def location_key(x, y, tol=MERGE_TOL):
    """Quantised integer key identifying a location up to the merge tolerance."""
    return (int(round(x / tol)), int(round(y / tol)))


def as_points(points):
    """Coerce input to a C-contiguous (n, 2) float array."""
    pts = np.ascontiguousarray(points, dtype=float)
    if pts.ndim == 1:
        if pts.shape[0] != 2:
            raise ValueError("a single location must have two coordinates")
        pts = pts.reshape(1, 2)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) array of locations, got shape {pts.shape}")
    return pts


def shoelace_area(vertices):
    """Signed-area magnitude of a polygon given as an (m, 2) vertex array."""
    v = as_points(vertices)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _segments_intersect(p1, p2, p3, p4):
    """True when open segments p1-p2 and p3-p4 properly cross."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


class SpatialDomain:
    """Compact planar study region: axis-aligned rectangle or simple polygon.

    Parameters
    ----------
    vertices : array-like, shape (m, 2)
        Polygon vertices in order (either orientation); the closing edge back
        to the first vertex is implicit.  Not passed for rectangles.
    bounds : tuple (xmin, xmax, ymin, ymax)
        Rectangle bounds.  Exactly one of ``vertices``/``bounds`` is given.

    Raises
    ------
    InvalidDomainError
        If the region has zero area, collapsed bounds, fewer than three
        polygon vertices, or a self-intersecting outline.
    """

    def __init__(self, vertices=None, bounds=None):
        if (vertices is None) == (bounds is None):
            raise InvalidDomainError("pass exactly one of vertices or bounds")
        if bounds is not None:
            xmin, xmax, ymin, ymax = (float(b) for b in bounds)
            if not np.all(np.isfinite([xmin, xmax, ymin, ymax])):
                raise InvalidDomainError("rectangle bounds must be finite")
            if xmax <= xmin or ymax <= ymin:
                raise InvalidDomainError("rectangle bounds must satisfy xmin < xmax and ymin < ymax")
            self.kind = "rectangle"
            self.bounds = (xmin, xmax, ymin, ymax)
            self.vertices = np.array(
                [[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]], dtype=float
            )
        else:
            v = as_points(vertices)
            if v.shape[0] < 3:
                raise InvalidDomainError("a polygon needs at least three vertices")
            if not np.all(np.isfinite(v)):
                raise InvalidDomainError("polygon vertices must be finite")
            # drop an explicitly repeated closing vertex
            if np.allclose(v[0], v[-1]):
                v = v[:-1]
                if v.shape[0] < 3:
                    raise InvalidDomainError("a polygon needs at least three distinct vertices")
            if shoelace_area(v) <= 0.0:
                raise InvalidDomainError("polygon has zero area")
            m = v.shape[0]
            edges = [(v[i], v[(i + 1) % m]) for i in range(m)]
            for i in range(m):
                for j in range(i + 1, m):
                    # adjacent edges share an endpoint; skip those pairs
                    if j == i or (j + 1) % m == i or (i + 1) % m == j:
                        continue
                    if _segments_intersect(*edges[i], *edges[j]):
                        raise InvalidDomainError("polygon outline self-intersects")
            self.kind = "polygon"
            self.vertices = v
            self.bounds = (
                float(v[:, 0].min()),
                float(v[:, 0].max()),
                float(v[:, 1].min()),
                float(v[:, 1].max()),
            )
        self._volume = shoelace_area(self.vertices)

    @classmethod
    def rectangle(cls, xmin, xmax, ymin, ymax):
        return cls(bounds=(xmin, xmax, ymin, ymax))

    @classmethod
    def polygon(cls, vertices):
        return cls(vertices=vertices)

    @property
    def volume(self):
        """Area of the region (shoelace formula; width * height for rectangles)."""
        return self._volume

    def contains(self, points):
        """Boolean mask of which points fall inside the region.

        Uses even-odd ray casting for polygons.  Points exactly on the
        boundary are not guaranteed a particular side.
        """
        pts = as_points(points)
        xmin, xmax, ymin, ymax = self.bounds
        inside_box = (
            (pts[:, 0] >= xmin) & (pts[:, 0] <= xmax) & (pts[:, 1] >= ymin) & (pts[:, 1] <= ymax)
        )
        if self.kind == "rectangle":
            return inside_box
        v = self.vertices
        x1, y1 = v[:, 0], v[:, 1]
        x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
        px = pts[:, 0][:, None]
        py = pts[:, 1][:, None]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        hit = crosses & (px < x_at)
        return inside_box & (hit.sum(axis=1) % 2 == 1)

    def sample_uniform(self, n, rng):
        """Draw n points uniformly over the region.

        Rectangles sample directly; polygons sample the bounding box and
        reject, which needs no decomposition of the region.
        """
        n = int(n)
        if n < 0:
            raise ValueError("n must be nonnegative")
        xmin, xmax, ymin, ymax = self.bounds
        if self.kind == "rectangle":
            out = np.empty((n, 2))
            out[:, 0] = rng.uniform(xmin, xmax, size=n)
            out[:, 1] = rng.uniform(ymin, ymax, size=n)
            return out
        # acceptance rate is area / box area, bounded away from zero for a
        # valid polygon, so the batch loop terminates with probability one
        frac = self._volume / ((xmax - xmin) * (ymax - ymin))
        chunks = []
        got = 0
        while got < n:
            m = max(32, int(1.5 * (n - got) / frac))
            cand = np.empty((m, 2))
            cand[:, 0] = rng.uniform(xmin, xmax, size=m)
            cand[:, 1] = rng.uniform(ymin, ymax, size=m)
            keep = cand[self.contains(cand)]
            chunks.append(keep)
            got += keep.shape[0]
        return np.concatenate(chunks, axis=0)[:n]


@dataclass
class Partition:
    """Voronoi tessellation of a domain, held implicitly by its generators.

    Cells are never materialised: membership of any point is resolved by
    nearest-generator lookup, ties going to the lowest region index.
    """

    generators: np.ndarray

    def __post_init__(self):
        self.generators = as_points(self.generators)
        if self.generators.shape[0] < 1:
            raise ValueError("a partition needs at least one generator")

    @property
    def L(self):
        return self.generators.shape[0]

    def assign(self, points):
        return assign_region(points, self.generators)


def assign_region(points, generators):
    """Nearest-generator region index for each point.

    Parameters
    ----------
    points : array-like, shape (n, 2)
    generators : array-like, shape (L, 2)

    Returns
    -------
    ndarray of int, shape (n,)
        Indices in 0..L-1.  Exact distance ties resolve to the lowest index
        (numpy argmin convention), so the cells partition the plane.
    """
    pts = as_points(points)
    gen = as_points(generators)
    if pts.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    # squared distances suffice for the argmin; the difference form keeps
    # mirror-symmetric configurations bit-exact so ties resolve reproducibly
    d2 = np.empty((pts.shape[0], gen.shape[0]))
    for l in range(gen.shape[0]):
        d2[:, l] = (pts[:, 0] - gen[l, 0]) ** 2 + (pts[:, 1] - gen[l, 1]) ** 2
    return np.argmin(d2, axis=1)


def region_changed_points(points, generators_a, generators_b):
    """Identify points whose Voronoi cell differs between two generator sets.

    Returns
    -------
    changed : ndarray of bool, shape (n,)
    regions_a, regions_b : ndarray of int
        Assignments under each generator configuration.

    Raises
    ------
    ValueError
        If the two configurations have different numbers of generators.
    """
    gen_a = as_points(generators_a)
    gen_b = as_points(generators_b)
    if gen_a.shape[0] != gen_b.shape[0]:
        raise ValueError("generator configurations must have the same number of regions")
    ra = assign_region(points, gen_a)
    rb = assign_region(points, gen_b)
    return ra != rb, ra, rb


def load_polygon_csv(path):
    """Read polygon vertices from a two-column CSV with header ``x,y``."""
    from .model import load_points_csv  # shares the strict CSV parsing

    return load_points_csv(path)
