"""Exact simulation of the partitioned Cox process by Poisson thinning.

A pattern with intensity lambda*_l F(beta_l + w'alpha) on cell l is drawn by
proposing a homogeneous Poisson(lambda*_l) pattern over the whole domain,
discarding proposals outside the cell, and retaining each remaining proposal
with probability F evaluated at a retrospectively revealed GP value.  The
GP states are kept with the dataset, so the true intensity that generated
the data can be evaluated exactly at any later query point by further
conditional revelation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import as_points, assign_region
from .gp import GPRegionState
from .model import DataError, link_F, sample_generators_repulsive


def thinning_sample(domain, bound, intensity_fn, rng):
    """Sample one inhomogeneous Poisson pattern with intensity <= bound.

    Parameters
    ----------
    domain : SpatialDomain
    bound : float
        Dominating constant rate.  ``intensity_fn`` must never exceed it
        (a relative slack of 1e-9 is tolerated for round-off).
    intensity_fn : callable
        Vectorised map from an (n, 2) array to n intensity values.
    rng : numpy Generator

    Returns
    -------
    ndarray, shape (m, 2)
        The retained points.
    """
    if bound < 0:
        raise ValueError("the dominating rate must be nonnegative")
    k = rng.poisson(bound * domain.volume)
    if k == 0:
        return np.zeros((0, 2))
    cand = domain.sample_uniform(k, rng)
    lam = np.asarray(intensity_fn(cand), dtype=float)
    if lam.shape != (k,):
        raise ValueError("intensity_fn must return one value per candidate")
    if np.any(lam < 0):
        raise ValueError("intensity_fn returned a negative rate")
    if np.any(lam > bound * (1.0 + 1e-9)):
        worst = float(lam.max())
        raise ValueError(
            f"intensity_fn exceeded its stated bound ({worst:.6g} > {bound:.6g}); "
            "the thinning contract is violated"
        )
    keep = rng.uniform(size=k) * bound < lam
    return cand[keep]


@dataclass
class SyntheticDataset:
    """A simulated pattern together with everything that generated it.

    The per-region GP states hold every field value revealed while
    simulating; ``true_intensity`` extends them by exact conditional draws,
    so later queries (mesh evaluation, MSE against truth) see the same
    underlying field realisation that produced the points.
    """

    domain: object
    generators: np.ndarray
    lambda_star: np.ndarray
    gps: list
    observed: np.ndarray
    seed: int
    alpha: np.ndarray | None = None
    covariates: object | None = None
    config: dict = field(default_factory=dict)
    _truth_rng: object = None

    @property
    def L(self):
        return self.generators.shape[0]

    def covariate_offset(self, points):
        pts = as_points(points)
        if self.covariates is None:
            return np.zeros(pts.shape[0])
        return self.covariates.lookup(pts) @ self.alpha

    def true_intensity(self, points):
        """True generating intensity at arbitrary domain locations.

        Reveals further GP values conditionally on everything revealed so
        far (simulation candidates included), hence exact and repeatable:
        asking twice for the same location gives the same value.
        """
        pts = as_points(points)
        if not bool(np.all(self.domain.contains(pts))):
            raise DataError("true intensity requested outside the domain")
        regions = assign_region(pts, self.generators)
        offs = self.covariate_offset(pts)
        out = np.empty(pts.shape[0])
        for l in np.unique(regions):
            sel = regions == l
            beta = self.gps[l].reveal(pts[sel], self._truth_rng)
            out[sel] = self.lambda_star[l] * link_F(beta + offs[sel])
        return out


def simulate_dataset(
    domain,
    lambda_star,
    hypers,
    seed,
    generators=None,
    eta=1.5,
    nu=4.0,
    covariates=None,
    alpha=None,
    _candidate_order="natural",
):
    """Simulate one dataset from the partitioned Cox process.

    Parameters
    ----------
    domain : SpatialDomain
    lambda_star : array-like, shape (L,)
        Per-region rate ceilings; L is taken from its length.
    hypers : list of GPHyper, length L
        Per-region GP hyperparameters.
    seed : int
        Single seed; all randomness flows from it through per-region
        splittable streams, so the draw is reproducible bit for bit.
    generators : array-like (L, 2), optional
        Fixed generator configuration.  By default generators are drawn
        from the repulsive prior with the given eta and nu.
    covariates, alpha : optional raster covariates and true coefficients.

    Returns
    -------
    SyntheticDataset
    """
    lambda_star = np.asarray(lambda_star, dtype=float)
    L = lambda_star.shape[0]
    if len(hypers) != L:
        raise ValueError("need one GPHyper per region")
    if np.any(lambda_star < 0):
        raise ValueError("rate ceilings must be nonnegative")
    if (alpha is None) != (covariates is None):
        raise ValueError("alpha and covariates must be supplied together")
    if _candidate_order not in ("natural", "sorted"):
        raise ValueError("candidate order must be 'natural' or 'sorted'")

    ss = np.random.SeedSequence(seed)
    children = ss.spawn(L + 2)
    main_rng = np.random.Generator(np.random.Philox(children[0]))
    region_rngs = [np.random.Generator(np.random.Philox(c)) for c in children[1 : L + 1]]
    truth_rng = np.random.Generator(np.random.Philox(children[L + 1]))

    if generators is None:
        generators = sample_generators_repulsive(domain, L, eta, nu, main_rng)
    else:
        generators = as_points(generators)
        if generators.shape != (L, 2):
            raise ValueError("generators must be an (L, 2) array")
        if not bool(np.all(domain.contains(generators))):
            raise ValueError("generators must lie inside the domain")

    gps = [GPRegionState(h) for h in hypers]
    kept = []
    vol = domain.volume
    for l in range(L):
        rng = region_rngs[l]
        k = rng.poisson(lambda_star[l] * vol)
        cand = domain.sample_uniform(k, rng)
        cand = cand[assign_region(cand, generators) == l]
        if _candidate_order == "sorted" and cand.shape[0]:
            cand = cand[np.lexsort((cand[:, 1], cand[:, 0]))]
        if cand.shape[0] == 0:
            kept.append(np.zeros((0, 2)))
            continue
        beta = gps[l].reveal(cand, rng)
        offs = (
            covariates.lookup(cand) @ alpha if covariates is not None else np.zeros(cand.shape[0])
        )
        keep = rng.uniform(size=cand.shape[0]) < link_F(beta + offs)
        kept.append(cand[keep])

    observed = np.concatenate(kept, axis=0) if kept else np.zeros((0, 2))
    cfg = {
        "L": L,
        "lambda_star": lambda_star.tolist(),
        "hypers": [(h.mu, h.sigma2, h.gamma, h.phi) for h in hypers],
        "eta": eta,
        "nu": nu,
        "seed": int(seed),
    }
    return SyntheticDataset(
        domain=domain,
        generators=generators,
        lambda_star=lambda_star,
        gps=gps,
        observed=observed,
        seed=int(seed),
        alpha=None if alpha is None else np.asarray(alpha, dtype=float),
        covariates=covariates,
        config=cfg,
        _truth_rng=truth_rng,
    )
