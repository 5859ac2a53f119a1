"""Posterior and prior functionals of the intensity surface.

Mesh evaluation works from the per-iteration snapshots stored alongside the
trace: each snapshot carries enough (generators, rates, anchor values,
hyperparameters) to rebuild the parameter state and reveal the fields at any
new locations.  Two evaluation styles are provided: full conditional draws
of lambda on the mesh (one joint Gaussian draw per region, used for
pointwise quantiles), and the analytically averaged surface
lambda* Phi((m + off) / sqrt(1 + v)) with (m, v) the conditional field
moments, which integrates the field out of the posterior mean and needs no
simulation.  Neither touches the chain's own revelation cache.

The prior covariance evaluators implement the tessellation-averaged
formulas for the fields and the intensity by Monte Carlo over the generator
prior, with the inner Gaussian expectations computed in closed form.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import multivariate_normal

from .geometry import as_points, assign_region
from .gp import GPHyper, GPRegionState, correlation
from .model import ParamState, expected_link_mean, link_F, sample_generators_repulsive

QUANTILE_RESERVOIR_CAP = 2000


class MeshGrid:
    """Regular lattice of evaluation points with per-point accumulators.

    Points are cell centers of an nx-by-ny grid over the domain's bounding
    box, dropped where they fall outside the domain.  Accumulators track a
    running mean and second moment plus a reservoir of stored surfaces for
    exact quantiles at desk scale (capped, with reservoir replacement past
    the cap).
    """

    def __init__(self, points, nx, ny, inside, domain):
        self.points = as_points(points)
        if self.points.shape[0] < 1:
            raise ValueError("mesh must contain at least one point")
        self.nx = nx
        self.ny = ny
        self.inside = np.asarray(inside, dtype=bool)
        self.domain = domain
        self.n_added = 0
        self._mean = np.zeros(self.points.shape[0])
        self._m2 = np.zeros(self.points.shape[0])
        self._reservoir = []
        self._reservoir_rng = np.random.Generator(np.random.Philox(0xA11CE))

    @property
    def M(self):
        return self.points.shape[0]

    @classmethod
    def from_domain(cls, domain, nx=75, ny=75):
        xlo, xhi, ylo, yhi = domain.bounds
        xs = xlo + (np.arange(nx) + 0.5) * (xhi - xlo) / nx
        ys = ylo + (np.arange(ny) + 0.5) * (yhi - ylo) / ny
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        inside = domain.contains(pts)
        return cls(pts[inside], nx, ny, inside, domain)

    def add_surface(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (self.M,):
            raise ValueError("surface length does not match mesh size")
        self.n_added += 1
        delta = values - self._mean
        self._mean += delta / self.n_added
        self._m2 += delta * (values - self._mean)
        if len(self._reservoir) < QUANTILE_RESERVOIR_CAP:
            self._reservoir.append(values.copy())
        else:
            j = self._reservoir_rng.integers(self.n_added)
            if j < QUANTILE_RESERVOIR_CAP:
                self._reservoir[j] = values.copy()

    def mean_surface(self):
        if self.n_added == 0:
            raise ValueError("no surfaces accumulated")
        return self._mean.copy()

    def var_surface(self):
        if self.n_added < 2:
            raise ValueError("need at least two surfaces for a variance")
        return self._m2 / (self.n_added - 1)

    def quantile_surface(self, q):
        if not self._reservoir:
            raise ValueError("no surfaces accumulated")
        return np.quantile(np.array(self._reservoir), q, axis=0)


def params_from_snapshot(snapshot, domain, covariates=None):
    """Rebuild a ParamState from one stored trace snapshot."""
    gps = []
    for (mu, sigma2, gamma, phi), (locs, vals) in zip(snapshot["hypers"], snapshot["anchors"]):
        gp = GPRegionState(GPHyper(mu=mu, sigma2=sigma2, gamma=gamma, phi=phi))
        gp.set_anchors(locs, vals)
        gps.append(gp)
    return ParamState(
        domain=domain,
        generators=snapshot["generators"].copy(),
        lambda_star=snapshot["lambda_star"].copy(),
        gps=gps,
        alpha=None if snapshot["alpha"] is None else snapshot["alpha"].copy(),
        covariates=covariates,
    )


def mesh_intensity_draw(params, mesh_points, rng):
    """One conditional draw of lambda at every mesh point.

    Fields are revealed per region in a single joint conditional Gaussian
    draw through non-recording peeks, so the state's cache is untouched and
    repeated calls give independent draws of the unrevealed remainder.
    """
    mesh = as_points(mesh_points)
    regions = params.region_of(mesh)
    out = np.zeros(mesh.shape[0])
    for l in np.unique(regions):
        sel = regions == l
        pts = mesh[sel]
        beta = params.gps[l].peek(pts, rng)
        off = params.covariate_offset(pts)
        out[sel] = params.lambda_star[l] * link_F(beta + off)
    return out


def mesh_conditional_mean(params, mesh_points):
    """Field-averaged intensity surface at the mesh points.

    At each point the field is Gaussian given the anchors, so the expected
    link value has the closed form Phi((m + off) / sqrt(1 + v)) and the
    surface needs no sampling.
    """
    mesh = as_points(mesh_points)
    regions = params.region_of(mesh)
    out = np.zeros(mesh.shape[0])
    for l in np.unique(regions):
        sel = regions == l
        pts = mesh[sel]
        m, v = params.gps[l].conditional_mean_var(pts)
        off = params.covariate_offset(pts)
        out[sel] = params.lambda_star[l] * expected_link_mean(m + off, v)
    return out


def posterior_mean_surface(snapshots, domain, mesh, covariates=None, min_iteration=0):
    """Average the field-integrated surface over stored iterations."""
    total = np.zeros(mesh.M)
    n = 0
    for snap in snapshots:
        if snap["iteration"] < min_iteration:
            continue
        params = params_from_snapshot(snap, domain, covariates)
        total += mesh_conditional_mean(params, mesh.points)
        n += 1
    if n == 0:
        raise ValueError("no snapshots past the requested burn-in")
    return total / n


def accumulate_draw_surfaces(snapshots, domain, mesh, rng, covariates=None, min_iteration=0, max_draws=200):
    """Fill the mesh accumulators with conditional intensity draws.

    One draw per snapshot, using an evenly spaced subsample when more
    snapshots are available than ``max_draws``.
    """
    eligible = [s for s in snapshots if s["iteration"] >= min_iteration]
    if not eligible:
        raise ValueError("no snapshots past the requested burn-in")
    if len(eligible) > max_draws:
        idx = np.linspace(0, len(eligible) - 1, max_draws).round().astype(int)
        eligible = [eligible[i] for i in idx]
    for snap in eligible:
        params = params_from_snapshot(snap, domain, covariates)
        mesh.add_surface(mesh_intensity_draw(params, mesh.points, rng))
    return mesh


def integral_estimate(params, region, subdivisions, rng):
    """Stratified unbiased estimate of the intensity integral over a region.

    The region, a rectangle inside the domain, is split into equal-width
    vertical strips; one uniform location per strip evaluates the field
    through a joint non-recording reveal, giving
    sum_j |A_j| lambda(u_j).  Unbiasedness holds conditionally on the
    revealed part of the field, with the unrevealed remainder integrated
    out by the conditional draw.
    """
    if region.kind != "rectangle":
        raise ValueError("stratified integration expects a rectangular region")
    xlo, xhi, ylo, yhi = region.bounds
    if not (xhi > xlo and yhi > ylo):
        raise ValueError("integration region has no area")
    if subdivisions < 1:
        raise ValueError("need at least one stratum")
    k = int(subdivisions)
    edges = np.linspace(xlo, xhi, k + 1)
    xs = edges[:-1] + rng.uniform(size=k) * np.diff(edges)
    ys = ylo + rng.uniform(size=k) * (yhi - ylo)
    pts = np.column_stack([xs, ys])
    if not bool(np.all(params.domain.contains(pts))):
        raise ValueError("integration region exceeds the domain")
    strip_area = (xhi - xlo) * (yhi - ylo) / k
    regions = params.region_of(pts)
    lam = np.zeros(k)
    for l in np.unique(regions):
        sel = regions == l
        beta = params.gps[l].peek(pts[sel], rng)
        off = params.covariate_offset(pts[sel])
        lam[sel] = params.lambda_star[l] * link_F(beta + off)
    return float(strip_area * np.sum(lam))


def mse_indicator(true_values, estimated_values):
    """Mean squared difference between two surfaces on the same mesh."""
    t = np.asarray(true_values, dtype=float)
    e = np.asarray(estimated_values, dtype=float)
    if t.shape != e.shape:
        raise ValueError("surface lengths differ")
    return float(np.mean((t - e) ** 2))


# -- prior covariance structure ------------------------------------------------


def prior_beta_cov(s, s_prime, hypers, eta, nu, L, n_mc, rng, domain):
    """Monte Carlo evaluation of the prior field covariance at two points.

    Draws generator sets from the repulsive prior, estimates the
    co-membership weights, and plugs them into the tessellation-averaged
    covariance: sum_l w_l(s,s') sigma2_l rho_l(h), plus the mean
    interaction term sum_{l,m} mu_l mu_m [P(s in S_l, s' in S_m) -
    P(s in S_l) P(s' in S_m)] when region means are nonzero.

    Returns (estimate, standard error); the standard error covers the
    zero-mean term analytically and switches to a bootstrap when any
    region mean is nonzero.
    """
    if isinstance(hypers, GPHyper):
        hypers = [hypers] * L
    if len(hypers) != L:
        raise ValueError("need one GPHyper per region")
    s = as_points(s)[0]
    s_prime = as_points(s_prime)[0]
    h = float(np.hypot(*(s - s_prime)))
    rho = np.array([correlation(np.array([h]), hyp.gamma, hyp.phi)[0] for hyp in hypers])
    sig2 = np.array([hyp.sigma2 for hyp in hypers])
    mus = np.array([hyp.mu for hyp in hypers])

    pair = np.vstack([s, s_prime])
    reg = np.empty((n_mc, 2), dtype=np.int64)
    for i in range(n_mc):
        gens = sample_generators_repulsive(domain, L, eta, nu, rng)
        reg[i] = assign_region(pair, gens)

    co = reg[:, 0] == reg[:, 1]
    per_draw = np.where(co, sig2[reg[:, 0]] * rho[reg[:, 0]], 0.0)
    est = float(np.mean(per_draw))
    se = float(np.std(per_draw, ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else np.inf

    if np.any(mus != 0.0):
        def mean_term(r):
            joint = np.zeros((L, L))
            np.add.at(joint, (r[:, 0], r[:, 1]), 1.0)
            joint /= r.shape[0]
            p_s = joint.sum(axis=1)
            p_sp = joint.sum(axis=0)
            return float(mus @ (joint - np.outer(p_s, p_sp)) @ mus)

        est += mean_term(reg)
        boot = np.empty(200)
        for bidx in range(200):
            take = rng.integers(n_mc, size=n_mc)
            boot[bidx] = np.mean(per_draw[take]) + mean_term(reg[take])
        se = float(np.std(boot, ddof=1))
    return est, se


def _pair_link_expectation(hyper, h):
    """E[F(b1) F(b2)] for a bivariate field pair at distance h.

    With X standard normal independent of the field, F(b) = P(X < b | b),
    so the expectation is the orthant probability of a bivariate normal
    with variance 1 + sigma2 and covariance sigma2 rho(h).
    """
    c = hyper.sigma2 * correlation(np.array([h]), hyper.gamma, hyper.phi)[0]
    v = 1.0 + hyper.sigma2
    cov = np.array([[v, c], [c, v]])
    return float(multivariate_normal(mean=[-hyper.mu, -hyper.mu], cov=cov).cdf([0.0, 0.0]))


def prior_lambda_cov(s, s_prime, lambda_star, hypers, eta, nu, n_mc, rng, domain):
    """Monte Carlo evaluation of the prior intensity covariance at two points.

    Outer Monte Carlo over the generator prior; given the tessellation both
    terms are exact: the within-cell term uses the orthant-probability form
    of E[F F'] and the closed-form link mean, and the between-draw term is
    the empirical covariance of the per-draw conditional means.

    Returns (estimate, standard error), the latter from a bootstrap over
    the outer draws.
    """
    lambda_star = np.asarray(lambda_star, dtype=float)
    L = lambda_star.shape[0]
    if isinstance(hypers, GPHyper):
        hypers = [hypers] * L
    if len(hypers) != L:
        raise ValueError("need one GPHyper per region")
    s = as_points(s)[0]
    s_prime = as_points(s_prime)[0]
    h = float(np.hypot(*(s - s_prime)))

    link_mean = np.array([expected_link_mean(np.array([hyp.mu]), np.array([hyp.sigma2]))[0] for hyp in hypers])
    pair_mean = np.array([_pair_link_expectation(hyp, h) for hyp in hypers])

    pair = np.vstack([s, s_prime])
    reg = np.empty((n_mc, 2), dtype=np.int64)
    for i in range(n_mc):
        gens = sample_generators_repulsive(domain, L, eta, nu, rng)
        reg[i] = assign_region(pair, gens)

    co = reg[:, 0] == reg[:, 1]
    l0 = reg[:, 0]
    within = np.where(co, lambda_star[l0] ** 2 * (pair_mean[l0] - link_mean[l0] ** 2), 0.0)
    g_s = lambda_star[reg[:, 0]] * link_mean[reg[:, 0]]
    g_sp = lambda_star[reg[:, 1]] * link_mean[reg[:, 1]]

    def total(w, a, b):
        if a.shape[0] > 1:
            between = float(np.mean(a * b) - np.mean(a) * np.mean(b))
        else:
            between = 0.0
        return float(np.mean(w)) + between

    est = total(within, g_s, g_sp)
    boot = np.empty(200)
    for bidx in range(200):
        take = rng.integers(n_mc, size=n_mc)
        boot[bidx] = total(within[take], g_s[take], g_sp[take])
    se = float(np.std(boot, ddof=1)) if n_mc > 1 else np.inf
    return est, se


def posterior_correlation_map(draws, ref_index):
    """Pearson correlation of lambda at a reference point with every mesh point.

    ``draws`` is an (iterations, mesh points) array of stored intensity
    draws.  Mesh points with zero variance get correlation 0; a
    zero-variance reference is an error.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[0] < 30:
        raise ValueError("need at least 30 stored draws")
    ref = draws[:, ref_index]
    ref_c = ref - ref.mean()
    ref_ss = float(ref_c @ ref_c)
    if ref_ss <= 0.0:
        raise ValueError("reference point has zero variance across draws")
    centered = draws - draws.mean(axis=0)
    ss = np.sum(centered**2, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (ref_c @ centered) / np.sqrt(ref_ss * ss)
    corr[ss <= 0.0] = 0.0
    return np.clip(corr, -1.0, 1.0)


# -- scalar posterior tables and geometry summaries ---------------------------


def lambda_star_table(columns, data, L, burnin=0):
    """Posterior mean and central 95% interval per region rate ceiling.

    Returns a list of (region, mean, q025, q975) rows from trace data,
    using iterations strictly past the burn-in.
    """
    it = data[:, columns.index("iteration")]
    keep = it > burnin if burnin else np.ones(it.shape[0], dtype=bool)
    rows = []
    for l in range(L):
        col = data[keep, columns.index(f"lambda_{l + 1}")]
        rows.append((l + 1, float(np.mean(col)), float(np.quantile(col, 0.025)), float(np.quantile(col, 0.975))))
    return rows


def midline_crossings(generators, domain, n=2001):
    """x positions where the cell assignment changes along the horizontal midline.

    Scans the horizontal line through the middle of the domain's bounding
    box and returns the midpoint of every consecutive sample pair whose
    nearest generator differs.
    """
    xlo, xhi, ylo, yhi = domain.bounds
    ymid = 0.5 * (ylo + yhi)
    xs = np.linspace(xlo, xhi, n)
    pts = np.column_stack([xs, np.full(n, ymid)])
    reg = assign_region(pts, generators)
    change = np.nonzero(reg[1:] != reg[:-1])[0]
    return 0.5 * (xs[change] + xs[change + 1])


def write_xyv_csv(path, points, values, header="x,y,value"):
    points = as_points(points)
    values = np.asarray(values, dtype=float)
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for (x, y), v in zip(points, values):
            fh.write(f"{x:.17g},{y:.17g},{v:.17g}\n")
