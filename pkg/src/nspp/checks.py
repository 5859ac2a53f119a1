"""Verification harnesses for the sampler's exactness claims.

Every harness here recomputes its target quantity through a deliberately
separate code path from the production implementation: the partition-move
oracle assembles both full augmented densities and both proposal densities
from scratch, the tessellation-averaged covariance check simulates the
composite field directly, and the getting-it-right harness compares forward
prior-predictive simulation against the sampler's successive-conditional
output moment by moment.  The test suite and the ``check`` subcommand both
run these.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .geometry import SpatialDomain, assign_region, location_key
from .gp import GPHyper, GPRegionState, covariance_matrix
from .mcmc import (
    ChainState,
    TuningConfig,
    apply_partition,
    evaluate_partition,
    propose_partition,
    sweep,
)
from .model import (
    CovariateField,
    MarkedPointSet,
    ParamState,
    PriorConfig,
    sample_generators_repulsive,
)
from .simulate import thinning_sample
from .summaries import prior_beta_cov


# -- partition move acceptance oracle ----------------------------------------


def _oracle_offsets(params, pts):
    if params.covariates is None or pts.shape[0] == 0:
        return np.zeros(pts.shape[0])
    return params.covariates.lookup(pts) @ params.alpha


def _oracle_log_mass(params, y, y_tilde, z, generators):
    """Full augmented density of one labelled configuration, from scratch.

    Product over regions of lambda*^T exp(-lambda* |S|), the link at
    observed points and its complement at thinned points, with the field
    values read from the (pre-revealed) region stores and the probit link
    evaluated through scipy's normal CDF rather than the model helpers.
    Inconsistent labellings (a point outside the cell its label requires)
    get mass zero.
    """
    vol = params.domain.volume
    total = 0.0
    for l in range(params.lambda_star.shape[0]):
        lam = params.lambda_star[l]
        t_count = y[l].shape[0] + y_tilde[l].shape[0] + z[l].shape[0]
        if lam == 0.0 and t_count > 0:
            return -np.inf
        if t_count:
            total += t_count * np.log(lam)
        total -= lam * vol
        for pts in (y[l], y_tilde[l]):
            if pts.shape[0] and np.any(assign_region(pts, generators) != l):
                return -np.inf
        if z[l].shape[0] and np.any(assign_region(z[l], generators) == l):
            return -np.inf
        if y[l].shape[0]:
            vals = params.gps[l].values_at(y[l]) + _oracle_offsets(params, y[l])
            total += float(np.sum(norm.logcdf(vals)))
        if y_tilde[l].shape[0]:
            vals = params.gps[l].values_at(y_tilde[l]) + _oracle_offsets(params, y_tilde[l])
            total += float(np.sum(norm.logcdf(-vals)))
    return total


def _oracle_repulsive(generators, eta, nu):
    total = 0.0
    n = generators.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.hypot(*(generators[i] - generators[j])))
            if d == 0.0:
                return -np.inf
            total += np.log(1.0 - np.exp(-eta * d**nu))
    return total


def _oracle_disk_logdensity(step, tuning):
    """Mixture-of-disks density of one generator displacement."""
    r = tuning.radius
    big = r * tuning.radius_multiplier
    p = tuning.small_radius_weight
    d = float(np.hypot(*step))
    dens = 0.0
    if d <= r:
        dens += p / (np.pi * r**2)
    if d <= big:
        dens += (1.0 - p) / (np.pi * big**2)
    if dens == 0.0:
        return -np.inf
    return float(np.log(dens))


def _oracle_alloc_logprob(params, point, host_k, target_l, landed_tilde):
    """Log probability of one latent reallocation outcome, from scratch."""
    lam_l = params.lambda_star[target_l]
    lam_k = params.lambda_star[host_k]
    beta = float(params.gps[target_l].values_at(point)[0]) + float(_oracle_offsets(params, point.reshape(1, 2))[0])
    p = lam_l * norm.cdf(-beta) / (lam_k + lam_l * norm.cdf(-beta))
    return float(np.log(p)) if landed_tilde else float(np.log1p(-p))


def _label_index(y_tilde, z):
    """Map location key -> (kind, region) for a latent configuration."""
    out = {}
    for l, arr in enumerate(y_tilde):
        for pt in arr:
            out[location_key(pt[0], pt[1])] = (1, l)
    for l, arr in enumerate(z):
        for pt in arr:
            out[location_key(pt[0], pt[1])] = (2, l)
    return out


def _oracle_alloc_side(params, pre_tilde, pre_z, post_labels, gens_from, gens_to):
    """Total log proposal mass of the realised reallocations in one direction.

    Scans the pre-side latent points, rederives which of them the move from
    ``gens_from`` to ``gens_to`` forces to redraw, and scores the outcome
    actually landed in ``post_labels``.
    """
    total = 0.0
    for kind, lists in ((1, pre_tilde), (2, pre_z)):
        for proc, arr in enumerate(lists):
            for pt in arr:
                new_geo = int(assign_region(pt, gens_to)[0])
                if kind == 1:
                    if new_geo == proc:
                        continue
                    host, target = proc, new_geo
                else:
                    if new_geo != proc:
                        continue
                    host = int(assign_region(pt, gens_from)[0])
                    target = new_geo
                out_kind, out_proc = post_labels[location_key(pt[0], pt[1])]
                landed_tilde = out_kind == 1
                expected_proc = target if landed_tilde else host
                if out_proc != expected_proc:
                    raise AssertionError("realised outcome inconsistent with redraw rule")
                total += _oracle_alloc_logprob(params, pt, host, target, landed_tilde)
    return total


def oracle_partition_log_ratio(params, pre, post, old_gens, new_gens, proposal, tuning, prior):
    """Brute-force MH log ratio for a realised partition move.

    Assembles the complete augmented densities of both configurations, the
    repulsive prior on both generator sets, the disk proposal densities in
    both directions, and the realised reallocation masses in both
    directions; nothing is assumed to cancel.
    """
    from .mcmc import neighbor_set

    b = tuning.neighbor_count(params.lambda_star.shape[0])
    fwd_set = neighbor_set(old_gens, proposal.l_star, b)
    rev_set = neighbor_set(new_gens, proposal.l_star, b)
    if not np.array_equal(fwd_set, rev_set):
        return -np.inf

    log_num = _oracle_log_mass(params, post["y"], post["y_tilde"], post["z"], new_gens)
    log_num += _oracle_repulsive(new_gens, prior.eta, prior.nu)
    log_den = _oracle_log_mass(params, pre["y"], pre["y_tilde"], pre["z"], old_gens)
    log_den += _oracle_repulsive(old_gens, prior.eta, prior.nu)

    q_fwd = q_rev = 0.0
    for l in proposal.moved:
        step = new_gens[l] - old_gens[l]
        q_fwd += _oracle_disk_logdensity(step, tuning)
        q_rev += _oracle_disk_logdensity(-step, tuning)

    q_fwd += _oracle_alloc_side(
        params, pre["y_tilde"], pre["z"], _label_index(post["y_tilde"], post["z"]), old_gens, new_gens
    )
    q_rev += _oracle_alloc_side(
        params, post["y_tilde"], post["z"], _label_index(pre["y_tilde"], pre["z"]), new_gens, old_gens
    )
    return (log_num + q_rev) - (log_den + q_fwd)


def _random_points_in(domain, n, rng, region=None, generators=None, want_inside=True):
    """Uniform points conditioned on falling inside (or outside) one cell."""
    out = []
    guard = 0
    while len(out) < n:
        guard += 1
        if guard > 100000:
            raise RuntimeError("could not place conditioned points")
        pt = domain.sample_uniform(1, rng)[0]
        if region is None:
            out.append(pt)
            continue
        inside = int(assign_region(pt, generators)[0]) == region
        if inside == want_inside:
            out.append(pt)
    return np.array(out).reshape(n, 2)


def random_oracle_state(rng, with_covariates=False):
    """Small random sampler state for the acceptance-ratio oracle suite."""
    L = int(rng.integers(1, 4))
    side = float(rng.uniform(1.5, 3.0))
    domain = SpatialDomain.rectangle(0.0, side, 0.0, side)
    prior = PriorConfig(eta=1.5, nu=4.0)
    gens = sample_generators_repulsive(domain, L, prior.eta, prior.nu, rng)
    hypers = [
        GPHyper(
            mu=float(rng.choice([-0.5, 0.0, 0.5])),
            sigma2=float(rng.uniform(0.5, 4.0)),
            gamma=float(rng.choice([1.0, 1.5, 1.9])),
            phi=float(rng.uniform(0.2, 1.5)),
        )
        for _ in range(L)
    ]
    lam = rng.uniform(0.2, 2.5, size=L)

    budget = 12
    y, y_tilde, z = [], [], []
    for l in range(L):
        y.append(_random_points_in(domain, int(rng.integers(0, 4)), rng, l, gens, True))
        n_t = min(int(rng.integers(0, 3)), budget)
        y_tilde.append(_random_points_in(domain, n_t, rng, l, gens, True))
        budget -= n_t
        n_z = min(int(rng.integers(0, 3)), budget) if L > 1 else 0
        z.append(_random_points_in(domain, n_z, rng, l, gens, False))
        budget -= n_z
    mps = MarkedPointSet(y=y, y_tilde=y_tilde, z=z)

    covariates = alpha = None
    if with_covariates:
        xs = np.linspace(0.0, side, 6)
        ys = np.linspace(0.0, side, 6)
        vals = rng.normal(size=(6, 6, 1))
        covariates = CovariateField(xs, ys, vals)
        alpha = rng.normal(scale=0.3, size=1)

    gps = [GPRegionState(hypers[l]) for l in range(L)]
    params = ParamState(
        domain=domain,
        generators=gens,
        lambda_star=lam,
        gps=gps,
        alpha=alpha,
        covariates=covariates,
    )
    all_pts = np.concatenate([arr for lst in (y, y_tilde, z) for arr in lst if arr.shape[0]] or [np.zeros((0, 2))])
    for l in range(L):
        anchors = np.concatenate([y[l], y_tilde[l]], axis=0)
        if anchors.shape[0]:
            vals0 = params.gps[l].reveal(anchors, rng)
            params.gps[l].set_anchors(anchors, vals0)
        if all_pts.shape[0]:
            params.gps[l].reveal(all_pts, rng)
    state = ChainState(
        params=params,
        mps=mps,
        prior=prior,
        rng_main=rng,
        rng_regions=[rng] * L,
    )
    return state


@dataclass
class OracleSuiteResult:
    n_configs: int
    max_rel_err: float
    worst_config: int
    errors: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_err < 1e-8

    def summary(self):
        return (
            f"partition acceptance oracle: {self.n_configs} configurations, "
            f"max relative error {self.max_rel_err:.3e} (worst at config {self.worst_config})"
        )


def run_acceptance_oracle_suite(n_configs=100, seed=20240915):
    """Compare the sampler's partition log ratio with the brute-force oracle.

    Each configuration draws a random small state, realises one valid
    partition proposal through the production seams, deep-copies the
    labelling before and after, and checks the two ratio computations to
    relative precision.
    """
    import copy

    rng = np.random.Generator(np.random.Philox(seed))
    tuning = TuningConfig(radius=0.6, iterations=1, burnin=0, thin=1)
    errors = []
    for idx in range(n_configs):
        state = random_oracle_state(rng, with_covariates=(idx % 3 == 2))
        proposal = None
        for _ in range(200):
            cand = propose_partition(state.params, tuning, rng)
            if cand.in_domain and cand.neighbors_match:
                proposal = cand
                break
        if proposal is None:
            raise RuntimeError("no valid proposal found; tuning too aggressive for the domain")
        pre = {
            "y": copy.deepcopy(state.mps.y),
            "y_tilde": copy.deepcopy(state.mps.y_tilde),
            "z": copy.deepcopy(state.mps.z),
        }
        old_gens = state.params.generators.copy()
        plan = evaluate_partition(state, proposal, rng)
        apply_partition(state, proposal, plan)
        post = {
            "y": copy.deepcopy(state.mps.y),
            "y_tilde": copy.deepcopy(state.mps.y_tilde),
            "z": copy.deepcopy(state.mps.z),
        }
        log_oracle = oracle_partition_log_ratio(
            state.params, pre, post, old_gens, proposal.new_generators, proposal, tuning, state.prior
        )
        err = abs(plan.log_ratio - log_oracle) / max(1.0, abs(log_oracle))
        errors.append(err)
    errors = np.array(errors)
    worst = int(np.argmax(errors))
    return OracleSuiteResult(n_configs=n_configs, max_rel_err=float(errors[worst]), worst_config=worst, errors=list(errors))


# -- getting-it-right harness -------------------------------------------------

GEWEKE_MONITORS = np.array([[0.5, 0.5], [1.5, 1.0], [1.0, 1.7]])


def _geweke_config():
    domain = SpatialDomain.rectangle(0.0, 2.0, 0.0, 2.0)
    prior = PriorConfig(lambda_shape=5.0, lambda_rate=1.0)
    hyper = GPHyper(mu=0.0, sigma2=4.0, gamma=1.9, phi=0.5)
    tuning = TuningConfig(radius=0.4, iterations=1, burnin=0, thin=1)
    phi_bounds = (0.05, 5.0)
    return domain, prior, hyper, tuning, phi_bounds


def _geweke_joint_draw(domain, prior, hyper, phi_bounds, rng, L=2):
    """One draw of (phi, U, lambda*, fields, y, tilde, z) from the joint prior."""
    phi = rng.uniform(*phi_bounds)
    h = hyper.with_phi(float(phi))
    gens = sample_generators_repulsive(domain, L, prior.eta, prior.nu, rng)
    lam = rng.gamma(prior.lambda_shape, 1.0 / prior.lambda_rate, size=L)
    gps = [GPRegionState(h) for _ in range(L)]
    y, y_tilde, z = [], [], []
    for l in range(L):
        k = rng.poisson(lam[l] * domain.volume)
        cand = domain.sample_uniform(k, rng)
        inside = assign_region(cand, gens) == l if k else np.zeros(0, dtype=bool)
        z.append(cand[~inside])
        cin = cand[inside]
        if cin.shape[0]:
            beta = gps[l].reveal(cin, rng)
            keep = rng.uniform(size=cin.shape[0]) < norm.cdf(beta)
            y.append(cin[keep])
            y_tilde.append(cin[~keep])
        else:
            y.append(np.zeros((0, 2)))
            y_tilde.append(np.zeros((0, 2)))
        gps[l].rebind_anchors(np.concatenate([y[l], y_tilde[l]], axis=0))
    params = ParamState(domain=domain, generators=gens, lambda_star=lam, gps=gps)
    mps = MarkedPointSet(y=y, y_tilde=y_tilde, z=z)
    return params, mps


def _geweke_stats(params, mps, rng):
    stats = list(params.lambda_star)
    stats += [float(mps.y_tilde[l].shape[0]) for l in range(params.L)]
    regions = params.region_of(GEWEKE_MONITORS)
    for j in range(GEWEKE_MONITORS.shape[0]):
        stats.append(float(params.gps[int(regions[j])].peek(GEWEKE_MONITORS[j], rng)[0]))
    return stats


def _geweke_redraw_data(state):
    """Replace (y, tilde, z) by a fresh draw given the current parameters."""
    params, mps = state.params, state.mps
    for l in range(params.L):
        rng = state.rng_regions[l]
        k = rng.poisson(params.lambda_star[l] * params.domain.volume)
        cand = params.domain.sample_uniform(k, rng)
        inside = assign_region(cand, params.generators) == l if k else np.zeros(0, dtype=bool)
        mps.z[l] = cand[~inside]
        cin = cand[inside]
        if cin.shape[0]:
            beta = params.gps[l].reveal(cin, rng)
            off = params.covariate_offset(cin)
            keep = rng.uniform(size=cin.shape[0]) < norm.cdf(beta + off)
            mps.y[l] = cin[keep]
            mps.y_tilde[l] = cin[~keep]
        else:
            mps.y[l] = np.zeros((0, 2))
            mps.y_tilde[l] = np.zeros((0, 2))
        params.gps[l].rebind_anchors(np.concatenate([mps.y[l], mps.y_tilde[l]], axis=0))


STAT_NAMES = (
    "lambda_1",
    "lambda_2",
    "n_tilde_1",
    "n_tilde_2",
    "beta_mon_1",
    "beta_mon_2",
    "beta_mon_3",
)


@dataclass
class GewekeResult:
    names: list
    z_scores: np.ndarray
    mc_means: np.ndarray
    sc_means: np.ndarray

    @property
    def passed(self):
        return bool(np.all(np.abs(self.z_scores) < 4.0))

    def summary(self):
        lines = ["getting-it-right harness (marginal vs successive conditional):"]
        for name, zval, a, b in zip(self.names, self.z_scores, self.mc_means, self.sc_means):
            lines.append(f"  {name:<22} forward={a:9.4f} sampler={b:9.4f} z={zval:+.2f}")
        lines.append(f"  max |z| = {np.max(np.abs(self.z_scores)):.2f} (threshold 4)")
        return "\n".join(lines)


def _batch_se(x, n_batches=100):
    x = np.asarray(x, dtype=float)
    usable = (x.shape[0] // n_batches) * n_batches
    means = x[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(n_batches))


def geweke_run(n_samples=20000, seed=20240916, progress=None):
    """Joint-distribution consistency check of the full sampler.

    Forward side: independent draws from the prior and the data-generating
    mechanism.  Sampler side: alternating full Gibbs sweeps with
    re-simulation of the data given the parameters.  If every block targets
    its exact conditional, both sides share the same joint law, so the
    first and second moments of the tracked statistics must agree.
    """
    domain, prior, hyper, tuning, phi_bounds = _geweke_config()
    L = 2

    rng_mc = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    mc = np.empty((n_samples, len(STAT_NAMES)))
    for i in range(n_samples):
        params, mps = _geweke_joint_draw(domain, prior, hyper, phi_bounds, rng_mc, L=L)
        mc[i] = _geweke_stats(params, mps, rng_mc)
        if progress and (i + 1) % progress == 0:
            print(f"  forward draw {i + 1}/{n_samples}", flush=True)

    ss = np.random.SeedSequence(seed + 1)
    children = ss.spawn(L + 2)
    rng_main = np.random.Generator(np.random.Philox(children[0]))
    rng_regions = [np.random.Generator(np.random.Philox(c)) for c in children[1:-1]]
    rng_init = np.random.Generator(np.random.Philox(children[-1]))
    params, mps = _geweke_joint_draw(domain, prior, hyper, phi_bounds, rng_init, L=L)
    state = ChainState(
        params=params,
        mps=mps,
        prior=prior,
        rng_main=rng_main,
        rng_regions=rng_regions,
        phi_sampled=True,
        phi_bounds=phi_bounds,
    )
    sc = np.empty((n_samples, len(STAT_NAMES)))
    for i in range(n_samples):
        sweep(state, tuning)
        _geweke_redraw_data(state)
        sc[i] = _geweke_stats(state.params, state.mps, state.rng_main)
        if progress and (i + 1) % progress == 0:
            print(f"  sampler sweep {i + 1}/{n_samples}", flush=True)

    names, zs, mc_means, sc_means = [], [], [], []
    for j, name in enumerate(STAT_NAMES):
        for moment, transform in (("mean", lambda v: v), ("second moment", lambda v: v**2)):
            a, b = transform(mc[:, j]), transform(sc[:, j])
            se = np.sqrt(np.var(a, ddof=1) / a.shape[0] + _batch_se(b) ** 2)
            names.append(f"{name} ({moment})")
            zs.append((np.mean(a) - np.mean(b)) / se)
            mc_means.append(np.mean(a))
            sc_means.append(np.mean(b))
    return GewekeResult(
        names=names,
        z_scores=np.array(zs),
        mc_means=np.array(mc_means),
        sc_means=np.array(sc_means),
    )


# -- thinning dispersion -------------------------------------------------------


@dataclass
class DispersionResult:
    ratio: float
    mean_count: float
    expected_mean: float
    n_reps: int

    @property
    def passed(self):
        return 0.9 <= self.ratio <= 1.1

    def summary(self):
        return (
            f"thinning dispersion: variance/mean = {self.ratio:.4f} over {self.n_reps} replicates "
            f"(empirical mean {self.mean_count:.2f}, target {self.expected_mean:.2f})"
        )


def thinning_dispersion_suite(n_reps=2000, seed=20240917):
    """Count dispersion of the thinning sampler under a piecewise-constant rate.

    The subwindow count of an inhomogeneous Poisson pattern is Poisson with
    mean equal to the exact integral, so its variance/mean ratio over
    replicates must sit near one.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    domain = SpatialDomain.rectangle(0.0, 10.0, 0.0, 10.0)

    def intensity(pts):
        return np.where(pts[:, 0] < 4.0, 3.0, 8.0)

    xlo, xhi, ylo, yhi = 2.0, 7.0, 1.0, 9.0
    expected = 3.0 * (4.0 - xlo) * (yhi - ylo) + 8.0 * (xhi - 4.0) * (yhi - ylo)
    counts = np.empty(n_reps)
    for i in range(n_reps):
        pts = thinning_sample(domain, 8.0, intensity, rng)
        sel = (pts[:, 0] >= xlo) & (pts[:, 0] < xhi) & (pts[:, 1] >= ylo) & (pts[:, 1] < yhi)
        counts[i] = np.sum(sel)
    ratio = float(np.var(counts, ddof=1) / np.mean(counts))
    return DispersionResult(ratio=ratio, mean_count=float(np.mean(counts)), expected_mean=expected, n_reps=n_reps)


# -- field covariance formula vs direct simulation ----------------------------


@dataclass
class FieldCovResult:
    pairs: np.ndarray
    formula: np.ndarray
    direct: np.ndarray
    combined_se: np.ndarray

    @property
    def passed(self):
        return bool(np.all(np.abs(self.formula - self.direct) < 4.0 * self.combined_se))

    def summary(self):
        lines = ["composite-field covariance: formula vs direct simulation"]
        for i in range(self.pairs.shape[0]):
            gap = abs(self.formula[i] - self.direct[i]) / self.combined_se[i]
            lines.append(
                f"  pair {i + 1}: formula={self.formula[i]:+.4f} direct={self.direct[i]:+.4f} "
                f"gap={gap:.2f} se"
            )
        return "\n".join(lines)


def field_cov_consistency(n_pairs=10, n_formula=3000, n_direct=20000, seed=20240918):
    """Check the tessellation-averaged covariance formula against simulation.

    The direct side draws generator sets and then the two field values with
    their exact conditional joint law (correlated when co-resident, and
    independent across regions), estimating the covariance empirically in
    batches; the formula side is the Monte-Carlo weight evaluation.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    domain = SpatialDomain.rectangle(0.0, 10.0, 0.0, 10.0)
    L = 3
    eta, nu = 1.5, 4.0
    hyper = GPHyper(mu=0.0, sigma2=4.0, gamma=1.9, phi=2.0)

    pairs = np.empty((n_pairs, 2, 2))
    for i in range(n_pairs):
        base = domain.sample_uniform(1, rng)[0]
        angle = rng.uniform(0.0, 2.0 * np.pi)
        step = rng.uniform(0.3, 2.5) * np.array([np.cos(angle), np.sin(angle)])
        other = np.clip(base + step, 0.05, 9.95)
        pairs[i, 0], pairs[i, 1] = base, other

    gen_draws = [sample_generators_repulsive(domain, L, eta, nu, rng) for _ in range(n_direct)]

    formula = np.empty(n_pairs)
    formula_se = np.empty(n_pairs)
    direct = np.empty(n_pairs)
    direct_se = np.empty(n_pairs)
    n_batches = 50
    for i in range(n_pairs):
        s, sp = pairs[i, 0], pairs[i, 1]
        est, se = prior_beta_cov(s, sp, hyper, eta, nu, L, n_formula, rng, domain)
        formula[i], formula_se[i] = est, se

        h = float(np.hypot(*(s - sp)))
        rho = float(np.exp(-(h**hyper.gamma) / (2.0 * hyper.phi)))
        cov_same = hyper.sigma2 * np.array([[1.0, rho], [rho, 1.0]])
        chol_same = np.linalg.cholesky(cov_same)
        vals = np.empty((n_direct, 2))
        zs = rng.standard_normal((n_direct, 2))
        for d in range(n_direct):
            reg = assign_region(np.vstack([s, sp]), gen_draws[d])
            if reg[0] == reg[1]:
                vals[d] = hyper.mu + chol_same @ zs[d]
            else:
                vals[d] = hyper.mu + np.sqrt(hyper.sigma2) * zs[d]
        per_batch = vals.reshape(n_batches, n_direct // n_batches, 2)
        covs = np.array(
            [np.cov(per_batch[bidx, :, 0], per_batch[bidx, :, 1], ddof=1)[0, 1] for bidx in range(n_batches)]
        )
        direct[i] = float(np.mean(covs))
        direct_se[i] = float(np.std(covs, ddof=1) / np.sqrt(n_batches))

    combined = np.sqrt(formula_se**2 + direct_se**2)
    return FieldCovResult(pairs=pairs, formula=formula, direct=direct, combined_se=combined)
