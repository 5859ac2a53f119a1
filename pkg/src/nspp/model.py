"""Model state, link, priors, and densities for the partitioned Cox process.

The intensity surface over a compact domain S is

    lambda(s) = sum_l  lambda*_l * F(beta_l(s) + w(s)'alpha) * 1(s in S_l),

with S_1..S_L the Voronoi cells of random generators, beta_l independent
GPs defined on all of S, F the standard normal CDF, lambda*_l per-cell rate
ceilings, and an optional global regression alpha on raster covariates w.

The augmented representation attaches to each region a thinned process
(tilde points, rate lambda*_l * (1 - F) inside the cell) and a homogeneous
complement process (z points, rate lambda*_l outside the cell), which makes
every conditional used by the sampler tractable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr

from .geometry import as_points, assign_region, location_key


class DataError(ValueError):
    """Raised for malformed input data: bad CSV, points off the domain or raster."""


# -- link ---------------------------------------------------------------


def link_F(t):
    """Standard normal CDF link, accurate to double precision."""
    return ndtr(np.asarray(t, dtype=float))


def log_link_F(t):
    """log F(t), stable far into the lower tail."""
    return log_ndtr(np.asarray(t, dtype=float))


def expected_link_mean(mean, var):
    """E[F(X)] for X ~ N(mean, var): the probit identity Phi(mean / sqrt(1 + var))."""
    return ndtr(np.asarray(mean, dtype=float) / np.sqrt(1.0 + np.asarray(var, dtype=float)))


# -- priors -------------------------------------------------------------


@dataclass(frozen=True)
class PriorConfig:
    """Prior settings shared across the sampler.

    lambda_shape, lambda_rate : Gamma(a, b) prior on each rate ceiling.
    eta, nu : repulsion strength and decay of the generator prior.
    alpha_prior_var : per-coordinate variance of the diffuse Gaussian prior
        on the covariate coefficients.
    """

    lambda_shape: float = 0.001
    lambda_rate: float = 0.001
    eta: float = 1.5
    nu: float = 4.0
    alpha_prior_var: float = 1e6

    def __post_init__(self):
        for name in ("lambda_shape", "lambda_rate", "eta", "nu", "alpha_prior_var"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def repulsive_log_prior(generators, eta=1.5, nu=4.0, domain=None):
    """Log of the pairwise repulsion factor of the generator prior.

    The prior is uniform over the domain per generator times
    prod over unordered pairs of (1 - exp(-eta * ||u_i - u_j||**nu)).
    This returns the log pair product only (the uniform base constant cancels
    in every ratio the sampler forms).  Coincident generators give -inf, as
    does any generator outside ``domain`` when one is supplied.
    """
    gen = as_points(generators)
    L = gen.shape[0]
    if domain is not None and not bool(np.all(domain.contains(gen))):
        return -np.inf
    if L < 2:
        return 0.0
    diff = gen[:, None, :] - gen[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    iu = np.triu_indices(L, k=1)
    x = eta * d[iu] ** nu
    with np.errstate(divide="ignore"):
        terms = np.log1p(-np.exp(-x))
    return float(np.sum(terms))


def sample_generators_repulsive(domain, L, eta=1.5, nu=4.0, rng=None, max_proposals=10**6):
    """Draw one generator configuration from the repulsive prior by rejection.

    Proposes L iid uniform locations and accepts with probability equal to
    the pair product, which lies in [0, 1], so accepted draws are exact.

    Raises
    ------
    RuntimeError
        If no proposal is accepted within ``max_proposals`` attempts.
    """
    if L < 1:
        raise ValueError("L must be at least 1")
    if L == 1:
        return domain.sample_uniform(1, rng)
    iu = np.triu_indices(L, k=1)
    used = 0
    while used < max_proposals:
        batch = min(512, max_proposals - used)
        cand = domain.sample_uniform(batch * L, rng).reshape(batch, L, 2)
        diff = cand[:, :, None, :] - cand[:, None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=3))[:, iu[0], iu[1]]
        accept_prob = np.prod(-np.expm1(-eta * d**nu), axis=1)
        u = rng.uniform(size=batch)
        hits = np.nonzero(u < accept_prob)[0]
        if hits.size:
            return cand[hits[0]]
        used += batch
    raise RuntimeError(f"repulsive prior rejection sampler exhausted {max_proposals} proposals")


# -- covariates ----------------------------------------------------------


class CovariateField:
    """Raster covariates on a regular lattice, standardised at ingestion.

    Built from a CSV with header ``x,y,<band names...>`` listing every cell
    centre of a full rectangular grid.  Lookup maps arbitrary locations to
    the nearest cell (default) or bilinear interpolation between centres.
    """

    def __init__(self, xs, ys, values, interp="nearest"):
        if interp not in ("nearest", "bilinear"):
            raise DataError(f"unknown covariate interpolation {interp!r}")
        self.xs = np.asarray(xs, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        self.values = np.asarray(values, dtype=float)  # (ny, nx, p), standardised
        self.interp = interp
        for grid in (self.xs, self.ys):
            if grid.size > 1:
                steps = np.diff(grid)
                if not np.allclose(steps, steps[0], rtol=1e-6):
                    raise DataError("raster grid spacing must be uniform")
        self.dx = float(self.xs[1] - self.xs[0]) if self.xs.size > 1 else 1.0
        self.dy = float(self.ys[1] - self.ys[0]) if self.ys.size > 1 else 1.0

    @property
    def n_bands(self):
        return self.values.shape[2]

    @classmethod
    def from_csv(cls, path, interp="nearest"):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty raster file") from None
            names = [h.strip().lower() for h in header]
            if len(names) < 3 or names[0] != "x" or names[1] != "y":
                raise DataError(f"{path}: raster header must be x,y,<band>[,...]")
            rows = []
            for i, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(names):
                    raise DataError(f"{path}:{i}: expected {len(names)} columns")
                try:
                    rows.append([float(c) for c in row])
                except ValueError:
                    raise DataError(f"{path}:{i}: non-numeric value") from None
        if not rows:
            raise DataError(f"{path}: raster has no cells")
        arr = np.array(rows, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise DataError(f"{path}: raster contains non-finite values")
        xs = np.unique(arr[:, 0])
        ys = np.unique(arr[:, 1])
        nx, ny, p = xs.size, ys.size, arr.shape[1] - 2
        if arr.shape[0] != nx * ny:
            raise DataError(f"{path}: raster rows do not form a full {nx} x {ny} grid")
        ix = np.searchsorted(xs, arr[:, 0])
        iy = np.searchsorted(ys, arr[:, 1])
        values = np.full((ny, nx, p), np.nan)
        values[iy, ix, :] = arr[:, 2:]
        if np.any(np.isnan(values)):
            raise DataError(f"{path}: raster grid has duplicate or missing cells")
        means = values.reshape(-1, p).mean(axis=0)
        sds = values.reshape(-1, p).std(axis=0)
        if np.any(sds == 0.0):
            raise DataError(f"{path}: constant covariate band cannot be standardised")
        std = (values - means) / sds
        out = cls(xs, ys, std, interp=interp)
        out.band_means = means
        out.band_sds = sds
        return out

    def lookup(self, points):
        """Standardised covariate vectors at each location, shape (n, p)."""
        pts = as_points(points)
        x0, x1 = self.xs[0] - 0.5 * self.dx, self.xs[-1] + 0.5 * self.dx
        y0, y1 = self.ys[0] - 0.5 * self.dy, self.ys[-1] + 0.5 * self.dy
        ok = (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        if not np.all(ok):
            bad = pts[~ok][0]
            raise DataError(f"location ({bad[0]:g}, {bad[1]:g}) lies outside the raster extent")
        if self.interp == "nearest":
            ix = np.clip(np.rint((pts[:, 0] - self.xs[0]) / self.dx).astype(int), 0, self.xs.size - 1)
            iy = np.clip(np.rint((pts[:, 1] - self.ys[0]) / self.dy).astype(int), 0, self.ys.size - 1)
            return self.values[iy, ix, :]
        fx = np.clip((pts[:, 0] - self.xs[0]) / self.dx, 0.0, self.xs.size - 1.0)
        fy = np.clip((pts[:, 1] - self.ys[0]) / self.dy, 0.0, self.ys.size - 1.0)
        ix = np.clip(np.floor(fx).astype(int), 0, max(self.xs.size - 2, 0))
        iy = np.clip(np.floor(fy).astype(int), 0, max(self.ys.size - 2, 0))
        tx = (fx - ix)[:, None]
        ty = (fy - iy)[:, None]
        ix1 = np.minimum(ix + 1, self.xs.size - 1)
        iy1 = np.minimum(iy + 1, self.ys.size - 1)
        v00 = self.values[iy, ix, :]
        v10 = self.values[iy, ix1, :]
        v01 = self.values[iy1, ix, :]
        v11 = self.values[iy1, ix1, :]
        return (1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10 + (1 - tx) * ty * v01 + tx * ty * v11


# -- marked point bookkeeping ---------------------------------------------


@dataclass
class MarkedPointSet:
    """Per-region point lists of the augmented model.

    y[l] are the observed points in cell l, y_tilde[l] the thinned latent
    points in cell l, z[l] the homogeneous latent points outside cell l.
    All entries are (n, 2) arrays.
    """

    y: list = field(default_factory=list)
    y_tilde: list = field(default_factory=list)
    z: list = field(default_factory=list)

    @classmethod
    def from_observed(cls, points, regions, L):
        """Split an observed pattern into per-region y lists, empty latents."""
        pts = as_points(points)
        regions = np.asarray(regions)
        y = [pts[regions == l].copy() for l in range(L)]
        empty = lambda: [np.zeros((0, 2)) for _ in range(L)]
        return cls(y=y, y_tilde=empty(), z=empty())

    @property
    def L(self):
        return len(self.y)

    def counts(self):
        """(n_y, n_tilde, n_z) arrays of per-region cardinalities."""
        ny = np.array([a.shape[0] for a in self.y])
        nt = np.array([a.shape[0] for a in self.y_tilde])
        nz = np.array([a.shape[0] for a in self.z])
        return ny, nt, nz

    def t_counts(self):
        """Total per-region counts T_l = |y_l| + |y_tilde_l| + |z_l|."""
        ny, nt, nz = self.counts()
        return ny + nt + nz

    def observed(self):
        """The observed pattern: union of the per-region y lists."""
        return np.concatenate(self.y, axis=0) if self.L else np.zeros((0, 2))

    def flatten_latent(self):
        """All latent points with labels: (points, kind, region).

        kind 1 marks tilde points, kind 2 marks z points; region is the
        process index the point currently belongs to (not necessarily the
        cell containing it, for z points).
        """
        pts, kinds, regs = [], [], []
        for l in range(self.L):
            for kind, arr in ((1, self.y_tilde[l]), (2, self.z[l])):
                if arr.shape[0]:
                    pts.append(arr)
                    kinds.append(np.full(arr.shape[0], kind, dtype=np.int64))
                    regs.append(np.full(arr.shape[0], l, dtype=np.int64))
        if not pts:
            return np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.concatenate(pts), np.concatenate(kinds), np.concatenate(regs)


@dataclass
class ParamState:
    """Full parameter state of the model.

    Holds the domain, the generator configuration, per-region rate ceilings,
    per-region GP states, and the optional covariate regression.
    """

    domain: object
    generators: np.ndarray
    lambda_star: np.ndarray
    gps: list
    alpha: np.ndarray | None = None
    covariates: CovariateField | None = None

    def __post_init__(self):
        self.generators = as_points(self.generators)
        self.lambda_star = np.asarray(self.lambda_star, dtype=float)
        if self.lambda_star.shape != (self.L,):
            raise ValueError("lambda_star must have one entry per region")
        if np.any(self.lambda_star < 0):
            raise ValueError("rate ceilings must be nonnegative")
        if len(self.gps) != self.L:
            raise ValueError("need one GP state per region")
        if (self.alpha is None) != (self.covariates is None):
            raise ValueError("alpha and covariates must be supplied together")

    @property
    def L(self):
        return self.generators.shape[0]

    def region_of(self, points):
        return assign_region(points, self.generators)

    def covariate_offset(self, points):
        """w(s)'alpha at each location; zeros when no covariates are attached."""
        pts = as_points(points)
        if self.covariates is None:
            return np.zeros(pts.shape[0])
        return self.covariates.lookup(pts) @ self.alpha

    def intensity_at(self, points, rng):
        """Evaluate the intensity, revealing GP values where needed.

        Locations must lie inside the domain.  The reveals are recorded in
        the per-region GP states, so repeated evaluation at the same
        location returns the same value.
        """
        pts = as_points(points)
        if not bool(np.all(self.domain.contains(pts))):
            raise DataError("intensity requested outside the domain")
        regions = self.region_of(pts)
        out = np.empty(pts.shape[0])
        offs = self.covariate_offset(pts)
        for l in np.unique(regions):
            sel = regions == l
            beta = self.gps[l].reveal(pts[sel], rng)
            out[sel] = self.lambda_star[l] * link_F(beta + offs[sel])
        return out


# -- densities ------------------------------------------------------------


def allocation_prob(lambda_target, lambda_host, beta_target, offset=0.0):
    """Probability that a relocated latent point joins the target cell's
    thinned process rather than falling back to the host region's z process.

    For a point entering cell l from region k this is
    p = lambda*_l (1 - F(beta_l(s) + off)) / (lambda*_k + lambda*_l (1 - F(beta_l(s) + off))).
    """
    one_minus_f = np.exp(log_ndtr(-(np.asarray(beta_target, dtype=float) + offset)))
    num = lambda_target * one_minus_f
    return num / (lambda_host + num)


def augmented_loglik(observed, mps, params):
    """Log of the augmented likelihood, up to the fixed superposition constant.

    Checks that the union of the per-region observed lists equals the
    observed pattern (returning -inf otherwise), then sums for each region

        T_l log lambda*_l - lambda*_l |S|
        + sum over y_l of log F(beta_l + off)
        + sum over y_tilde_l of log(1 - F(beta_l + off)).

    GP values must already be revealed at every y and tilde location.
    """
    obs = as_points(observed)
    want = {location_key(x, y) for x, y in obs}
    got = {location_key(x, y) for l in range(mps.L) for x, y in mps.y[l]}
    if want != got or obs.shape[0] != sum(a.shape[0] for a in mps.y):
        return -np.inf
    vol = params.domain.volume
    total = 0.0
    t_counts = mps.t_counts()
    for l in range(mps.L):
        lam = params.lambda_star[l]
        if t_counts[l] > 0:
            if lam == 0.0:
                return -np.inf
            total += t_counts[l] * np.log(lam)
        total -= lam * vol
        if mps.y[l].shape[0]:
            beta = params.gps[l].values_at(mps.y[l])
            total += float(np.sum(log_ndtr(beta + params.covariate_offset(mps.y[l]))))
        if mps.y_tilde[l].shape[0]:
            beta = params.gps[l].values_at(mps.y_tilde[l])
            total += float(np.sum(log_ndtr(-(beta + params.covariate_offset(mps.y_tilde[l])))))
    return total


def lambda_conditional(prior, t_count, volume):
    """Shape and rate of the Gamma full conditional of one rate ceiling."""
    return prior.lambda_shape + t_count, prior.lambda_rate + volume


# -- file I/O --------------------------------------------------------------


def load_points_csv(path):
    """Read an (n, 2) point array from a CSV with header ``x,y``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        names = [h.strip().lower() for h in header]
        if names[:2] != ["x", "y"] or len(names) != 2:
            raise DataError(f"{path}: expected header x,y")
        rows = []
        for i, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{i}: expected two columns")
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                raise DataError(f"{path}:{i}: non-numeric coordinate") from None
    pts = np.array(rows, dtype=float).reshape(len(rows), 2)
    if not np.all(np.isfinite(pts)):
        raise DataError(f"{path}: coordinates must be finite")
    return pts


def save_points_csv(path, points, header="x,y"):
    pts = as_points(points)
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for x, y in pts:
            fh.write(f"{x:.17g},{y:.17g}\n")
