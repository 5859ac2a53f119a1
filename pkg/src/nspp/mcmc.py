"""Metropolis within Gibbs sampler for the partitioned Cox process.

One sweep updates, in order:

1. latent refresh: per region, the thinned points and the homogeneous
   complement points are redrawn by Poisson thinning given the fields;
2. partition move: a joint MH update of a few generators together with the
   deterministic relabelling of observed points and a probabilistic
   reallocation of latent points whose labels the new tessellation
   invalidates;
3. field refresh: per region, the GP values at the region's observed and
   thinned points are resampled through one probit augmentation sweep, and
   the rest of the field is implicitly redrawn from its conditional prior;
4. covariate coefficients (when a raster is attached): conjugate Gaussian
   draw under the same augmentation;
5. rate ceilings: conjugate Gamma draws;
6. range parameter (optional): random walk on log phi shared across
   regions, accepted against the GP prior density of the anchor values,
   jointly redrawing the field remainder.

GP values revealed while evaluating a rejected proposal are kept: they are
exact conditional draws of the same field realisation regardless of the
accept decision, and discarding them would break the retrospective scheme.

All randomness flows from one 64 bit seed through splittable counter based
streams, one per region plus one for everything else, so a fixed seed gives
bit identical traces.
"""

from __future__ import annotations

import math
import pickle
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.stats import truncnorm

from .geometry import as_points, assign_region
from .gp import (
    JITTER_LADDER,
    GPHyper,
    GPRegionState,
    NumericalError,
    chol_jittered,
    covariance_matrix,
    gp_logdensity,
)
from .model import (
    MarkedPointSet,
    ParamState,
    allocation_prob,
    lambda_conditional,
    log_link_F,
    repulsive_log_prior,
    sample_generators_repulsive,
)

CHECKPOINT_FORMAT = "nspp-checkpoint-1"


@dataclass(frozen=True)
class TuningConfig:
    """Sampler tuning knobs.

    radius : small proposal disk radius for generator moves.
    radius_multiplier : factor for the occasional larger disk.
    small_radius_weight : mixture weight of the small disk.
    neighbors : how many generators move together (the chosen one plus its
        nearest co-generators); None picks max(1, ceil(log L)).
    phi_rw_sd : standard deviation of the random walk on log phi.
    iterations, burnin, thin : chain length bookkeeping.
    seed : master seed for the whole run.
    """

    radius: float = 0.5
    radius_multiplier: float = 2.0
    small_radius_weight: float = 0.95
    neighbors: int | None = None
    phi_rw_sd: float = 0.3
    iterations: int = 10000
    burnin: int = 2000
    thin: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("proposal radius must be positive")
        if self.radius_multiplier <= 1.0:
            raise ValueError("radius multiplier must exceed 1")
        if not (0.0 < self.small_radius_weight < 1.0):
            raise ValueError("small radius weight must lie strictly in (0, 1)")
        if self.neighbors is not None and self.neighbors < 1:
            raise ValueError("neighbor count must be at least 1")
        if self.iterations < 0 or self.burnin < 0 or self.burnin > self.iterations:
            raise ValueError("need 0 <= burnin <= iterations")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")

    def neighbor_count(self, L):
        if self.neighbors is None:
            return min(L, max(1, math.ceil(math.log(L)))) if L > 1 else 1
        if self.neighbors > L:
            raise ValueError(f"neighbor count {self.neighbors} exceeds L={L}")
        return self.neighbors


@dataclass
class ChainState:
    """Everything the sampler carries between sweeps."""

    params: ParamState
    mps: MarkedPointSet
    prior: PriorConfig
    rng_main: np.random.Generator
    rng_regions: list
    phi_sampled: bool = False
    phi_bounds: tuple = (0.05, 5.0)
    iteration: int = 0


# -- block 1: latent refresh ------------------------------------------------


def update_tilde_z(state):
    """Redraw the thinned and complement points of every region.

    One homogeneous Poisson(lambda*_l) pattern is proposed over the whole
    domain per region; proposals outside the cell become the new z_l
    unthinned, proposals inside are retained into the new tilde list with
    probability 1 - F(beta + off) at retrospectively revealed field values.
    """
    params, mps = state.params, state.mps
    vol = params.domain.volume
    for l in range(params.L):
        rng = state.rng_regions[l]
        k = rng.poisson(params.lambda_star[l] * vol)
        cand = params.domain.sample_uniform(k, rng)
        inside = assign_region(cand, params.generators) == l if k else np.zeros(0, dtype=bool)
        mps.z[l] = cand[~inside]
        cin = cand[inside]
        if cin.shape[0]:
            beta = params.gps[l].reveal(cin, rng)
            retain = np.exp(log_link_F(-(beta + params.covariate_offset(cin))))
            mps.y_tilde[l] = cin[rng.uniform(size=cin.shape[0]) < retain]
        else:
            mps.y_tilde[l] = np.zeros((0, 2))
        anchors = np.concatenate([mps.y[l], mps.y_tilde[l]], axis=0)
        params.gps[l].rebind_anchors(anchors)


# -- block 2: partition move -------------------------------------------------


@dataclass
class PartitionProposal:
    l_star: int
    moved: np.ndarray
    new_generators: np.ndarray
    in_domain: bool
    neighbors_match: bool


@dataclass
class PartitionPlan:
    """Realised relabelling attached to an evaluated proposal."""

    obs_points: np.ndarray
    obs_new_region: np.ndarray
    lat_points: np.ndarray
    lat_kind: np.ndarray
    lat_proc: np.ndarray
    redraw_idx: np.ndarray
    redraw_target: np.ndarray
    redraw_host: np.ndarray
    redraw_to_tilde: np.ndarray
    log_ratio: float = -np.inf


def neighbor_set(generators, l_star, b):
    """Indices of l_star and its b-1 nearest co-generators, ties to low index."""
    gen = as_points(generators)
    d = np.sqrt(np.sum((gen - gen[l_star]) ** 2, axis=1))
    order = np.argsort(d, kind="stable")
    return np.sort(order[:b])


def propose_partition(params, tuning, rng):
    """Draw the generator part of a partition proposal.

    The chosen generator and its nearest co-generators each jump inside a
    disk whose radius is the small one with the configured weight and the
    multiplied one otherwise; the disk density depends only on the jump
    distance, so proposal densities for the generator coordinates cancel in
    the acceptance ratio.  Two validity flags accompany the draw: proposals
    leaving the domain have prior zero, and proposals under which the chosen
    generator's neighbor set differs are rejected outright, because the
    reverse move could not select the same coordinates.
    """
    L = params.L
    b = tuning.neighbor_count(L)
    l_star = int(rng.integers(L))
    moved = neighbor_set(params.generators, l_star, b)
    new_gens = params.generators.copy()
    for l in moved:
        small = rng.uniform() < tuning.small_radius_weight
        r = tuning.radius if small else tuning.radius * tuning.radius_multiplier
        theta = rng.uniform(0.0, 2.0 * np.pi)
        tau = r * np.sqrt(rng.uniform())
        new_gens[l, 0] += tau * np.cos(theta)
        new_gens[l, 1] += tau * np.sin(theta)
    in_domain = bool(np.all(params.domain.contains(new_gens[moved])))
    match = in_domain and np.array_equal(neighbor_set(new_gens, l_star, b), moved)
    return PartitionProposal(l_star, moved, new_gens, in_domain, match)


def evaluate_partition(state, proposal, rng):
    """Realise the relabelling under a proposal and compute the MH log ratio.

    Observed points relabel deterministically to their new cells.  A latent
    point whose label the new tessellation invalidates (a tilde point whose
    cell changed, or a z point that entered its own region's cell) is
    reallocated: with the allocation probability it joins the thinned list
    of its new cell, otherwise it falls back to the z list of its host
    region.  Field values needed by either direction are revealed here and
    persist whatever the accept decision.
    """
    params, mps = state.params, state.mps
    lam = params.lambda_star
    old_gens = params.generators
    new_gens = proposal.new_generators

    obs_pts_list, obs_old = [], []
    for l in range(mps.L):
        if mps.y[l].shape[0]:
            obs_pts_list.append(mps.y[l])
            obs_old.append(np.full(mps.y[l].shape[0], l, dtype=np.int64))
    obs_pts = np.concatenate(obs_pts_list) if obs_pts_list else np.zeros((0, 2))
    obs_old = np.concatenate(obs_old) if obs_pts_list else np.zeros(0, dtype=np.int64)
    obs_new = assign_region(obs_pts, new_gens)

    lat_pts, lat_kind, lat_proc = mps.flatten_latent()
    lat_old_geo = assign_region(lat_pts, old_gens)
    lat_new_geo = assign_region(lat_pts, new_gens)
    redraw = ((lat_kind == 1) & (lat_new_geo != lat_proc)) | (
        (lat_kind == 2) & (lat_new_geo == lat_proc)
    )
    redraw_idx = np.nonzero(redraw)[0]
    target = lat_new_geo[redraw_idx]
    host = np.where(lat_kind[redraw_idx] == 1, lat_proc[redraw_idx], lat_old_geo[redraw_idx])

    # reveal every field value either direction needs, one joint draw per
    # region, in fixed region order for reproducibility
    need = {}
    moved_obs = obs_new != obs_old
    for i in np.nonzero(moved_obs)[0]:
        need.setdefault(int(obs_new[i]), []).append(obs_pts[i])
    for j, i in enumerate(redraw_idx):
        need.setdefault(int(target[j]), []).append(lat_pts[i])
        if lat_kind[i] == 2:
            need.setdefault(int(host[j]), []).append(lat_pts[i])
    for l in sorted(need):
        params.gps[l].reveal(np.array(need[l]), rng)

    log_ratio = repulsive_log_prior(new_gens, state.prior.eta, state.prior.nu) - repulsive_log_prior(
        old_gens, state.prior.eta, state.prior.nu
    )

    with np.errstate(divide="ignore"):
        # observed points that changed cell: rate and link mass ratio
        for i in np.nonzero(moved_obs)[0]:
            k, l = int(obs_old[i]), int(obs_new[i])
            s = obs_pts[i]
            off = float(params.covariate_offset(s)[0])
            b_new = float(params.gps[l].values_at(s)[0])
            b_old = float(params.gps[k].values_at(s)[0])
            log_ratio += float(np.log(lam[l]) - np.log(lam[k]))
            log_ratio += float(log_link_F(b_new + off) - log_link_F(b_old + off))

        to_tilde = np.zeros(redraw_idx.shape[0], dtype=bool)
        if redraw_idx.shape[0]:
            u = rng.uniform(size=redraw_idx.shape[0])
            for j, i in enumerate(redraw_idx):
                l, k = int(target[j]), int(host[j])
                s = lat_pts[i]
                off = float(params.covariate_offset(s)[0])
                beta_l = float(params.gps[l].values_at(s)[0])
                beta_k = float(params.gps[k].values_at(s)[0])
                p_fwd = float(allocation_prob(lam[l], lam[k], beta_l, off))
                tilde = bool(u[j] < p_fwd)
                to_tilde[j] = tilde
                # forward allocation mass enters the proposal denominator;
                # the new-state point mass enters the target numerator
                if tilde:
                    log_ratio -= np.log(p_fwd)
                    log_ratio += float(np.log(lam[l]) + log_link_F(-(beta_l + off)))
                else:
                    log_ratio -= np.log1p(-p_fwd)
                    log_ratio += float(np.log(lam[k]))
                # current-state point mass
                if lat_kind[i] == 1:
                    log_ratio -= float(np.log(lam[k]) + log_link_F(-(beta_k + off)))
                else:
                    log_ratio -= float(np.log(lam[l]))
                # reverse allocation mass: the backward move must land the
                # point on its current label
                p_rev = float(allocation_prob(lam[k], lam[l], beta_k, off))
                log_ratio += np.log(p_rev) if lat_kind[i] == 1 else np.log1p(-p_rev)

    plan = PartitionPlan(
        obs_points=obs_pts,
        obs_new_region=obs_new,
        lat_points=lat_pts,
        lat_kind=lat_kind,
        lat_proc=lat_proc,
        redraw_idx=redraw_idx,
        redraw_target=target,
        redraw_host=host,
        redraw_to_tilde=to_tilde,
        log_ratio=float(log_ratio),
    )
    return plan


def apply_partition(state, proposal, plan):
    """Install an accepted partition proposal: generators, labels, anchors."""
    params, mps = state.params, state.mps
    L = params.L
    params.generators = proposal.new_generators

    mps.y = [plan.obs_points[plan.obs_new_region == l].copy() for l in range(L)]

    new_proc = plan.lat_proc.copy()
    new_kind = plan.lat_kind.copy()
    new_proc[plan.redraw_idx] = np.where(plan.redraw_to_tilde, plan.redraw_target, plan.redraw_host)
    new_kind[plan.redraw_idx] = np.where(plan.redraw_to_tilde, 1, 2)
    mps.y_tilde = [
        plan.lat_points[(new_kind == 1) & (new_proc == l)].copy() for l in range(L)
    ]
    mps.z = [plan.lat_points[(new_kind == 2) & (new_proc == l)].copy() for l in range(L)]

    for l in range(L):
        params.gps[l].rebind_anchors(np.concatenate([mps.y[l], mps.y_tilde[l]], axis=0))


def update_partition_block(state, tuning):
    """One MH step on (generators, labels).  Returns True when accepted."""
    rng = state.rng_main
    proposal = propose_partition(state.params, tuning, rng)
    if not proposal.in_domain or not proposal.neighbors_match:
        return False
    plan = evaluate_partition(state, proposal, rng)
    u = rng.uniform()
    if np.log(u) < plan.log_ratio:
        apply_partition(state, proposal, plan)
        return True
    return False


# -- block 3: field refresh ---------------------------------------------------


def update_beta_anchors(state):
    """Resample each region's anchor field values by probit augmentation.

    Given the current values, latent normals V are drawn truncated positive
    at observed points and negative at thinned points around beta + off;
    the new anchor vector is then a draw from the Gaussian with precision
    Sigma^{-1} + I (prior precision plus one unit per augmented point),
    realised by the covariance-split identity
    beta = a + Sigma (Sigma + I)^{-1} (b - a) with a a prior draw and
    b = V - off a unit-variance perturbation of the augmented data.
    The region's conditioning set is then reset to these anchors, which
    implicitly redraws the rest of the field from its conditional prior.
    """
    params, mps = state.params, state.mps
    for l in range(params.L):
        rng = state.rng_regions[l]
        gp = params.gps[l]
        n_y = mps.y[l].shape[0]
        locs = np.concatenate([mps.y[l], mps.y_tilde[l]], axis=0)
        n = locs.shape[0]
        if n == 0:
            gp.set_anchors(np.zeros((0, 2)), np.zeros(0))
            continue
        h = gp.hyper
        cur = gp.values_at(locs)
        off = params.covariate_offset(locs)
        t = cur + off
        v = np.empty(n)
        if n_y:
            v[:n_y] = truncnorm.rvs(-t[:n_y], np.inf, loc=t[:n_y], scale=1.0, random_state=rng)
        if n > n_y:
            v[n_y:] = truncnorm.rvs(-np.inf, -t[n_y:], loc=t[n_y:], scale=1.0, random_state=rng)
        w = v - off

        cov = covariance_matrix(locs, hyper=h)
        L_sig, jit_idx = chol_jittered(cov, h.sigma2)
        # the jittered matrix is the prior covariance actually in force; use
        # it coherently in the prior draw, the solve, and the final product
        sig = cov + np.eye(n) * (h.sigma2 * JITTER_LADDER[jit_idx])
        a_draw = h.mu + L_sig @ rng.standard_normal(n)
        b_draw = w + rng.standard_normal(n)
        try:
            L_a = np.linalg.cholesky(sig + np.eye(n))
        except np.linalg.LinAlgError as exc:  # pragma: no cover - Sigma + I is well conditioned
            raise NumericalError("augmentation solve failed") from exc
        beta_new = a_draw + sig @ cho_solve((L_a, True), b_draw - a_draw, check_finite=False)
        gp.set_anchors(locs, beta_new, factor=L_sig, jit_idx=jit_idx)


def update_alpha(state):
    """Conjugate draw of the covariate coefficients under augmentation.

    Draws fresh truncated normals V around beta + w'alpha at every anchor
    point, then alpha from its Gaussian conditional given V and beta:
    precision W'W + I / prior_var, mean solved from W'(V - beta).
    """
    params, mps = state.params, state.mps
    if params.covariates is None:
        return
    rng = state.rng_main
    locs_all, beta_all, is_obs = [], [], []
    for l in range(params.L):
        locs = np.concatenate([mps.y[l], mps.y_tilde[l]], axis=0)
        if locs.shape[0] == 0:
            continue
        locs_all.append(locs)
        beta_all.append(params.gps[l].values_at(locs))
        flags = np.zeros(locs.shape[0], dtype=bool)
        flags[: mps.y[l].shape[0]] = True
        is_obs.append(flags)
    if not locs_all:
        return
    locs = np.concatenate(locs_all)
    beta = np.concatenate(beta_all)
    obs = np.concatenate(is_obs)
    W = params.covariates.lookup(locs)
    p = W.shape[1]
    if locs.shape[0] < p or np.linalg.matrix_rank(W) < p:
        raise NumericalError("covariate design is singular at the current anchor set")
    t = beta + W @ params.alpha
    v = np.empty(locs.shape[0])
    v[obs] = truncnorm.rvs(-t[obs], np.inf, loc=t[obs], scale=1.0, random_state=rng)
    v[~obs] = truncnorm.rvs(-np.inf, -t[~obs], loc=t[~obs], scale=1.0, random_state=rng)
    params.alpha = alpha_conditional_draw(W, v - beta, state.prior.alpha_prior_var, rng)


def alpha_conditional_draw(W, resid, prior_var, rng):
    """Draw the coefficients given augmented residuals V - beta.

    Standard Gaussian linear-model conditional with a diffuse independent
    prior: precision W'W + I/prior_var, mean its solve against W'resid.
    """
    p = W.shape[1]
    prec = W.T @ W + np.eye(p) / prior_var
    L_p = np.linalg.cholesky(prec)
    mean = cho_solve((L_p, True), W.T @ resid, check_finite=False)
    return mean + solve_triangular(L_p.T, rng.standard_normal(p), lower=False)


# -- blocks 4 and 5: ceilings and range ---------------------------------------


def update_lambda_star(state):
    """Conjugate Gamma draw of each region's rate ceiling."""
    params, mps = state.params, state.mps
    vol = params.domain.volume
    t_counts = mps.t_counts()
    for l in range(params.L):
        shape, rate = lambda_conditional(state.prior, t_counts[l], vol)
        params.lambda_star[l] = state.rng_regions[l].gamma(shape, 1.0 / rate)


def phi_log_ratio(state, phi_new):
    """Log MH ratio for moving the shared range to phi_new.

    GP prior density ratio of every region's anchor values plus the
    log-scale proposal Jacobian; the truncated-uniform prior contributes
    nothing inside its support.
    """
    params = state.params
    phi = params.gps[0].hyper.phi
    log_ratio = np.log(phi_new) - np.log(phi)
    for l in range(params.L):
        gp = params.gps[l]
        locs, vals = gp.anchor_locs(), gp.anchor_vals()
        log_ratio += gp_logdensity(vals, locs, gp.hyper.with_phi(phi_new))
        log_ratio -= gp_logdensity(vals, locs, gp.hyper)
    return float(log_ratio)


def update_phi(state, tuning):
    """Random walk MH on the shared log range parameter.

    On acceptance every region installs the new range, dropping its cache:
    that is the joint redraw of the field away from the anchors.  Proposals
    outside the truncation interval reject immediately.
    """
    if not state.phi_sampled:
        return False
    params = state.params
    rng = state.rng_main
    phi = params.gps[0].hyper.phi
    phi_new = phi * np.exp(rng.normal(0.0, tuning.phi_rw_sd))
    lo, hi = state.phi_bounds
    if not (lo <= phi_new <= hi):
        return False
    log_ratio = phi_log_ratio(state, phi_new)
    if np.log(rng.uniform()) < log_ratio:
        for l in range(params.L):
            params.gps[l].set_hyper(params.gps[l].hyper.with_phi(phi_new))
        return True
    return False


# -- trace ---------------------------------------------------------------------


class Trace:
    """Chain trace: scalar rows per stored iteration plus field snapshots.

    Rows hold iteration index, rate ceilings, generator coordinates, the
    sampled range and coefficients when present, per-region cardinalities,
    field values peeked at monitor locations, and the block acceptance
    flags.  Snapshots carry everything needed to reveal the fields of a
    stored iteration later (anchors with values, hyperparameters).
    """

    def __init__(self, L, n_monitors=0, phi_sampled=False, n_alpha=0):
        self.L = L
        self.n_monitors = n_monitors
        self.phi_sampled = phi_sampled
        self.n_alpha = n_alpha
        self.columns = ["iteration"]
        self.columns += [f"lambda_{l + 1}" for l in range(L)]
        self.columns += [f"u{l + 1}_x" for l in range(L)]
        self.columns += [f"u{l + 1}_y" for l in range(L)]
        if phi_sampled:
            self.columns.append("phi")
        self.columns += [f"alpha_{j + 1}" for j in range(n_alpha)]
        self.columns += [f"n_y_{l + 1}" for l in range(L)]
        self.columns += [f"n_tilde_{l + 1}" for l in range(L)]
        self.columns += [f"n_z_{l + 1}" for l in range(L)]
        self.columns += [f"beta_mon_{j + 1}" for j in range(n_monitors)]
        self.columns += ["acc_partition", "acc_phi"]
        self.rows = []
        self.snapshots = []

    def record(self, state, monitors=None, acc_partition=0, acc_phi=0):
        params, mps = state.params, state.mps
        row = [float(state.iteration)]
        row += list(params.lambda_star)
        row += list(params.generators[:, 0])
        row += list(params.generators[:, 1])
        if self.phi_sampled:
            row.append(params.gps[0].hyper.phi)
        if self.n_alpha:
            row += list(params.alpha)
        ny, nt, nz = mps.counts()
        row += [float(v) for v in ny] + [float(v) for v in nt] + [float(v) for v in nz]
        if self.n_monitors:
            mons = as_points(monitors)
            regions = params.region_of(mons)
            for j in range(mons.shape[0]):
                l = int(regions[j])
                row.append(float(params.gps[l].peek(mons[j], state.rng_main)[0]))
        row += [float(acc_partition), float(acc_phi)]
        self.rows.append(row)
        self.snapshots.append(snapshot_state(state))

    def as_array(self):
        return np.array(self.rows, dtype=float).reshape(len(self.rows), len(self.columns))

    def column(self, name):
        return self.as_array()[:, self.columns.index(name)]

    def write_csv(self, path, append=False):
        mode = "a" if append else "w"
        with open(path, mode, newline="") as fh:
            if not append:
                fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def snapshot_state(state):
    """Lightweight copy of everything summaries need from one iteration."""
    params = state.params
    return {
        "iteration": state.iteration,
        "generators": params.generators.copy(),
        "lambda_star": params.lambda_star.copy(),
        "alpha": None if params.alpha is None else params.alpha.copy(),
        "hypers": [
            (g.hyper.mu, g.hyper.sigma2, g.hyper.gamma, g.hyper.phi) for g in params.gps
        ],
        "anchors": [(g.anchor_locs().copy(), g.anchor_vals().copy()) for g in params.gps],
    }


def read_trace_csv(path):
    """Load a trace CSV back into (column names, float array)."""
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        if not header:
            raise ValueError(f"{path}: empty trace file")
        columns = header.split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        data = np.zeros((0, len(columns)))
    return columns, data


# -- driver ----------------------------------------------------------------


def init_chain(observed, domain, L, hypers, prior, tuning, phi_sampled=False, phi_bounds=(0.05, 5.0), covariates=None):
    """Build the initial chain state.

    Generators come from the repulsive prior, rate ceilings start at the
    prior mean floored at one, anchors start at zero field values at the
    observed points, and one latent refresh pass fills the tilde and z
    lists.
    """
    obs = as_points(observed)
    if obs.shape[0] and not bool(np.all(domain.contains(obs))):
        raise ValueError("observed points must lie inside the domain")
    if isinstance(hypers, GPHyper):
        hypers = [hypers] * L
    if len(hypers) != L:
        raise ValueError("need one GPHyper per region")
    if phi_sampled and len({h.phi for h in hypers}) != 1:
        raise ValueError("sampling phi requires a single shared starting value")

    ss = np.random.SeedSequence(tuning.seed)
    children = ss.spawn(L + 1)
    rng_main = np.random.Generator(np.random.Philox(children[0]))
    rng_regions = [np.random.Generator(np.random.Philox(c)) for c in children[1:]]

    generators = sample_generators_repulsive(domain, L, prior.eta, prior.nu, rng_main)
    lam0 = max(prior.lambda_shape / prior.lambda_rate, 1.0)
    gps = [GPRegionState(h) for h in hypers]
    regions = assign_region(obs, generators)
    mps = MarkedPointSet.from_observed(obs, regions, L)
    for l in range(L):
        gps[l].set_anchors(mps.y[l], np.zeros(mps.y[l].shape[0]))
    alpha = None
    if covariates is not None:
        alpha = np.zeros(covariates.n_bands)
    params = ParamState(
        domain=domain,
        generators=generators,
        lambda_star=np.full(L, lam0),
        gps=gps,
        alpha=alpha,
        covariates=covariates,
    )
    state = ChainState(
        params=params,
        mps=mps,
        prior=prior,
        rng_main=rng_main,
        rng_regions=rng_regions,
        phi_sampled=phi_sampled,
        phi_bounds=phi_bounds,
    )
    update_tilde_z(state)
    return state


def sweep(state, tuning):
    """One full Gibbs sweep.  Returns the two MH acceptance flags."""
    update_tilde_z(state)
    acc_u = update_partition_block(state, tuning)
    update_beta_anchors(state)
    update_alpha(state)
    update_lambda_star(state)
    acc_phi = update_phi(state, tuning)
    state.iteration += 1
    return acc_u, acc_phi


def run_chain(
    observed,
    domain,
    L,
    hypers,
    prior,
    tuning,
    phi_sampled=False,
    phi_bounds=(0.05, 5.0),
    covariates=None,
    monitors=None,
    resume_state=None,
    progress=None,
):
    """Run the sampler and return (trace, final state).

    With ``resume_state`` (a state restored from a checkpoint) the chain
    continues from its stored iteration up to ``tuning.iterations`` total,
    producing exactly the rows an unbroken run would have produced from
    that point; the returned trace then contains only the new rows.
    """
    n_mon = 0 if monitors is None else as_points(monitors).shape[0]
    if resume_state is None:
        state = init_chain(
            observed, domain, L, hypers, prior, tuning,
            phi_sampled=phi_sampled, phi_bounds=phi_bounds, covariates=covariates,
        )
    else:
        state = resume_state
    n_alpha = 0 if state.params.alpha is None else state.params.alpha.shape[0]
    trace = Trace(L=state.params.L, n_monitors=n_mon, phi_sampled=state.phi_sampled, n_alpha=n_alpha)
    if state.iteration == 0:
        trace.record(state, monitors=monitors)
    acc_u_total = acc_phi_total = 0
    start = state.iteration
    for it in range(start + 1, tuning.iterations + 1):
        acc_u, acc_phi = sweep(state, tuning)
        acc_u_total += int(acc_u)
        acc_phi_total += int(acc_phi)
        if it % tuning.thin == 0:
            trace.record(state, monitors=monitors, acc_partition=int(acc_u), acc_phi=int(acc_phi))
        if progress is not None and it % progress == 0:
            done = it - start
            print(f"  iteration {it}/{tuning.iterations} "
                  f"(acc partition {acc_u_total / max(done, 1):.3f})", flush=True)
    n_done = max(tuning.iterations - start, 1)
    trace.acceptance = {
        "partition": acc_u_total / n_done,
        "phi": acc_phi_total / n_done if state.phi_sampled else None,
    }
    return trace, state


# -- checkpointing ---------------------------------------------------------


def save_checkpoint(path, state, tuning, monitors=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "state": state,
        "tuning": tuning,
        "monitors": None if monitors is None else as_points(monitors),
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=pickle.HIGHEST_PROTOCOL)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a recognised checkpoint file")
    return payload
