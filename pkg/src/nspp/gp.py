"""Gaussian process machinery with retrospective (lazy) revelation.

Each tessellation region carries an independent stationary GP defined on the
whole domain, with power exponential correlation

    rho(h) = exp(-h**gamma / (2 * phi)),   0 < gamma <= 2,  phi > 0.

Field values are revealed only at the finitely many locations a sampler
touches.  Every reveal is an exact conditional Gaussian draw given everything
revealed before, so the finite revealed vector is always a valid projection
of one underlying field realisation.  The lower Cholesky factor of the
revealed-set covariance is grown in place as locations are appended; it is
rebuilt from scratch only when the conditioning set itself is replaced
(anchor resampling, hyperparameter moves, jitter escalation).

A small diagonal jitter of ``1e-10 * sigma2`` stabilises factorisations and
escalates tenfold on failure up to ``1e-6 * sigma2``, beyond which a
:class:`NumericalError` is raised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky as _cholesky
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from .geometry import as_points, location_key

JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class NumericalError(RuntimeError):
    """Raised when a covariance factorisation fails at the maximum jitter."""


@dataclass(frozen=True)
class GPHyper:
    """Hyperparameters of one region's GP.

    mu and sigma2 are the stationary mean and variance, gamma the power
    exponential smoothness exponent, phi the range parameter.
    """

    mu: float = 0.0
    sigma2: float = 4.0
    gamma: float = 1.9
    phi: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.gamma <= 2.0):
            raise ValueError(f"gamma must lie in (0, 2], got {self.gamma}")
        if self.phi <= 0.0:
            raise ValueError(f"phi must be positive, got {self.phi}")
        if self.sigma2 <= 0.0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")

    def with_phi(self, phi):
        return GPHyper(self.mu, self.sigma2, self.gamma, float(phi))


def correlation(h, gamma=1.9, phi=0.5):
    """Power exponential correlation of separation distance h (vectorised)."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("distances must be nonnegative")
    return np.exp(-(h**gamma) / (2.0 * phi))


def covariance_matrix(locs_a, locs_b=None, hyper=GPHyper()):
    """Covariance sigma2 * rho(||a - b||) between two location sets.

    With ``locs_b`` omitted returns the square covariance of ``locs_a`` with
    itself (no jitter; factorisation adds it).
    """
    a = as_points(locs_a)
    b = a if locs_b is None else as_points(locs_b)
    d = cdist(a, b)
    return hyper.sigma2 * correlation(d, hyper.gamma, hyper.phi)


def chol_jittered(cov, sigma2, start_idx=0):
    """Lower Cholesky factor of ``cov + j * sigma2 * I``, escalating j.

    Returns ``(L, jit_idx)`` where ``JITTER_LADDER[jit_idx]`` is the jitter
    that succeeded.  Raises :class:`NumericalError` past the ladder end.
    """
    n = cov.shape[0]
    if n == 0:
        return np.zeros((0, 0)), start_idx
    eye = np.eye(n)
    for idx in range(start_idx, len(JITTER_LADDER)):
        try:
            L = _cholesky(cov + JITTER_LADDER[idx] * sigma2 * eye, lower=True, check_finite=False)
            return L, idx
        except np.linalg.LinAlgError:
            continue
    cond = float(np.linalg.cond(cov + JITTER_LADDER[-1] * sigma2 * eye))
    raise NumericalError(
        f"covariance factorisation failed at maximum jitter "
        f"{JITTER_LADDER[-1]:g} * sigma2 (n={n}, cond~{cond:.3e})"
    )


def gp_logdensity(values, locs, hyper):
    """Log density of a finite GP restriction under the stationary prior.

    Evaluates the multivariate normal N(mu * 1, C + j * sigma2 * I) log pdf
    where C is the power exponential covariance of ``locs`` and j the first
    jitter on the ladder that factorises.
    """
    vals = np.asarray(values, dtype=float)
    pts = as_points(locs)
    n = pts.shape[0]
    if vals.shape != (n,):
        raise ValueError("values and locs must have matching length")
    if n == 0:
        return 0.0
    L, _ = chol_jittered(covariance_matrix(pts, hyper=hyper), hyper.sigma2)
    resid = solve_triangular(L, vals - hyper.mu, lower=True, check_finite=False)
    return -0.5 * (
        n * np.log(2.0 * np.pi) + 2.0 * np.sum(np.log(np.diag(L))) + float(resid @ resid)
    )


class GPRegionState:
    """Revealed restriction of one region's GP, with exact lazy extension.

    The conditioning set is kept in insertion order.  ``anchor_mask`` marks
    the rows that currently carry the model's anchor values (field values at
    the region's accepted and thinned points); everything else is the
    retrospective cache of values revealed along the way.  ``set_anchors``
    replaces the whole set (the caller has just resampled the field),
    ``set_hyper`` keeps only anchors (the remainder of the field is
    notionally redrawn under the new hyperparameters), and ``reveal`` grows
    the set with exact conditional draws.

    Single-writer: instances are not thread safe.
    """

    def __init__(self, hyper):
        self.hyper = hyper
        self.locs = np.zeros((0, 2))
        self.vals = np.zeros(0)
        self.anchor_mask = np.zeros(0, dtype=bool)
        self._index = {}
        self._jit_idx = 0
        self._L = np.zeros((0, 0))
        # whitened residual w = L^{-1} (vals - mu); the conditional mean at
        # new locations is then mu + V' w with V the half-solved cross block
        self._w = np.zeros(0)

    # -- basic queries ----------------------------------------------------

    @property
    def n(self):
        return self.locs.shape[0]

    @property
    def n_anchors(self):
        return int(self.anchor_mask.sum())

    @property
    def jitter(self):
        """Jitter currently baked into the factor, as a multiple of sigma2."""
        return JITTER_LADDER[self._jit_idx]

    @property
    def factor(self):
        """Lower Cholesky factor of the revealed-set covariance plus jitter."""
        return self._L

    def anchor_locs(self):
        return self.locs[self.anchor_mask]

    def anchor_vals(self):
        return self.vals[self.anchor_mask]

    def is_known(self, x, y):
        return location_key(x, y) in self._index

    def values_at(self, locs):
        """Stored values at already revealed locations (KeyError if unknown)."""
        pts = as_points(locs)
        out = np.empty(pts.shape[0])
        for i, (x, y) in enumerate(pts):
            out[i] = self.vals[self._index[location_key(x, y)]]
        return out

    def fork(self):
        """Independent copy sharing nothing mutable with the original."""
        other = GPRegionState(self.hyper)
        other.locs = self.locs.copy()
        other.vals = self.vals.copy()
        other.anchor_mask = self.anchor_mask.copy()
        other._index = dict(self._index)
        other._jit_idx = self._jit_idx
        other._L = self._L.copy()
        other._w = self._w.copy()
        return other

    # -- internal linear algebra ------------------------------------------

    def _rebuild(self):
        """Refactorise the full conditioning set at the current jitter."""
        self._L, self._jit_idx = chol_jittered(
            covariance_matrix(self.locs, hyper=self.hyper), self.hyper.sigma2, self._jit_idx
        )
        if self.n:
            self._w = solve_triangular(
                self._L, self.vals - self.hyper.mu, lower=True, check_finite=False
            )
        else:
            self._w = np.zeros(0)

    def _conditional_parts(self, new_pts):
        """Cross solve, conditional mean and posterior covariance factor pieces.

        Returns (V, mean, S) for the new points given the revealed set, where
        S includes the state's diagonal jitter, matching what a full
        refactorisation of the extended set would produce.  Escalates jitter
        (rebuilding the existing factor) if the posterior block fails to
        factorise, so callers see a consistent jitter level throughout.
        """
        k = new_pts.shape[0]
        h = self.hyper
        while True:
            c22 = covariance_matrix(new_pts, hyper=h)
            if self.n:
                c12 = covariance_matrix(self.locs, new_pts, hyper=h)
                V = solve_triangular(self._L, c12, lower=True, check_finite=False)
                mean = h.mu + V.T @ self._w
                S = c22 - V.T @ V
            else:
                V = np.zeros((0, k))
                mean = np.full(k, h.mu)
                S = c22
            S[np.diag_indices_from(S)] += self.jitter * h.sigma2
            try:
                Ls = _cholesky(S, lower=True, check_finite=False)
                return V, mean, Ls
            except np.linalg.LinAlgError:
                if self._jit_idx + 1 >= len(JITTER_LADDER):
                    raise NumericalError(
                        f"conditional factorisation failed at maximum jitter (k={k}, n={self.n})"
                    ) from None
                self._jit_idx += 1
                self._rebuild()

    def _dedup(self, pts):
        """Split a request into known rows and unique new rows.

        Returns (order, known_idx, new_pts) where ``order`` maps each request
        row to either ('k', index into stored vals) or ('n', index into the
        unique new block).  Duplicate requests within the merge tolerance
        share one draw.
        """
        order = []
        new_keys = {}
        new_rows = []
        for x, y in pts:
            key = location_key(x, y)
            hit = self._index.get(key)
            if hit is not None:
                order.append(("k", hit))
            elif key in new_keys:
                order.append(("n", new_keys[key]))
            else:
                new_keys[key] = len(new_rows)
                new_rows.append((x, y))
                order.append(("n", new_keys[key]))
        new_pts = np.array(new_rows, dtype=float).reshape(len(new_rows), 2)
        return order, new_pts, new_keys

    def _assemble(self, order, new_draws):
        out = np.empty(len(order))
        for i, (tag, idx) in enumerate(order):
            out[i] = self.vals[idx] if tag == "k" else new_draws[idx]
        return out

    # -- public operations -------------------------------------------------

    def reveal(self, locs, rng):
        """Reveal the field at requested locations, recording the draws.

        Locations already revealed (within the merge tolerance) return their
        stored values exactly; genuinely new locations receive one joint
        conditional Gaussian draw and join the conditioning set as cache.
        """
        pts = as_points(locs)
        if pts.shape[0] == 0:
            return np.zeros(0)
        order, new_pts, new_keys = self._dedup(pts)
        k = new_pts.shape[0]
        if k == 0:
            return self._assemble(order, np.zeros(0))
        V, mean, Ls = self._conditional_parts(new_pts)
        z = rng.standard_normal(k)
        draws = mean + Ls @ z
        n = self.n
        # grow the factor in place: [[L, 0], [V', Ls]] is the lower factor of
        # the extended jittered covariance, and the appended whitened
        # residual block is exactly the standard normal draw z
        L_ext = np.zeros((n + k, n + k))
        L_ext[:n, :n] = self._L
        L_ext[n:, :n] = V.T
        L_ext[n:, n:] = Ls
        self._L = L_ext
        self._w = np.concatenate([self._w, z])
        self.locs = np.concatenate([self.locs, new_pts], axis=0)
        self.vals = np.concatenate([self.vals, draws])
        self.anchor_mask = np.concatenate([self.anchor_mask, np.zeros(k, dtype=bool)])
        for key, j in new_keys.items():
            self._index[key] = n + j
        return self._assemble(order, draws)

    def peek(self, locs, rng):
        """Like :meth:`reveal` but without recording the new draws.

        Used for monitoring and mesh evaluation, where recording every query
        would grow the conditioning set without bound across iterations.
        """
        pts = as_points(locs)
        if pts.shape[0] == 0:
            return np.zeros(0)
        order, new_pts, _ = self._dedup(pts)
        if new_pts.shape[0] == 0:
            return self._assemble(order, np.zeros(0))
        V, mean, Ls = self._conditional_parts(new_pts)
        draws = mean + Ls @ rng.standard_normal(new_pts.shape[0])
        return self._assemble(order, draws)

    def conditional_moments(self, locs):
        """Conditional mean vector and covariance matrix at new locations.

        The covariance carries the state's diagonal jitter, matching what a
        reveal at these locations would use.  Known locations are fine: they
        come back with their stored value and (near) zero variance.
        """
        pts = as_points(locs)
        V, mean, Ls = self._conditional_parts(pts)
        return mean, Ls @ Ls.T

    def conditional_mean_var(self, locs):
        """Marginal conditional means and variances, skipping the dense block.

        Cheaper than :meth:`conditional_moments` when only pointwise moments
        are needed (posterior mean surfaces): cost is one triangular solve.
        """
        pts = as_points(locs)
        h = self.hyper
        if self.n == 0:
            return np.full(pts.shape[0], h.mu), np.full(pts.shape[0], h.sigma2)
        c12 = covariance_matrix(self.locs, pts, hyper=h)
        V = solve_triangular(self._L, c12, lower=True, check_finite=False)
        mean = h.mu + V.T @ self._w
        var = h.sigma2 - np.einsum("ij,ij->j", V, V)
        return mean, np.maximum(var, 0.0)

    def set_anchors(self, locs, values, factor=None, jit_idx=None):
        """Replace the whole conditioning set with freshly resampled anchors.

        Drops the retrospective cache: the caller has just redrawn the field
        at the anchor locations, and the remainder of the field is implicitly
        redrawn from its conditional prior (future reveals realise it).  A
        precomputed Cholesky ``factor`` of the anchor covariance (with its
        ladder index) can be passed to avoid refactorising.
        """
        pts = as_points(locs)
        vals = np.asarray(values, dtype=float).reshape(pts.shape[0])
        self.locs = pts.copy()
        self.vals = vals.copy()
        self.anchor_mask = np.ones(pts.shape[0], dtype=bool)
        self._index = {location_key(x, y): i for i, (x, y) in enumerate(pts)}
        if len(self._index) != pts.shape[0]:
            raise ValueError("anchor locations must be distinct at the merge tolerance")
        if factor is not None:
            self._L = factor
            self._jit_idx = self._jit_idx if jit_idx is None else jit_idx
            if self.n:
                self._w = solve_triangular(
                    self._L, self.vals - self.hyper.mu, lower=True, check_finite=False
                )
            else:
                self._w = np.zeros(0)
        else:
            self._jit_idx = 0
            self._rebuild()

    def set_hyper(self, hyper):
        """Install new hyperparameters, keeping anchors and dropping the cache.

        The cached (non-anchor) values belong to the part of the field the
        hyperparameter block redraws jointly with the move, so they are
        discarded; anchors survive with their values.
        """
        keep = self.anchor_mask
        locs = self.locs[keep]
        vals = self.vals[keep]
        self.hyper = hyper
        self.locs = locs.copy()
        self.vals = vals.copy()
        self.anchor_mask = np.ones(locs.shape[0], dtype=bool)
        self._index = {location_key(x, y): i for i, (x, y) in enumerate(locs)}
        self._jit_idx = 0
        self._rebuild()

    def rebind_anchors(self, locs):
        """Re-mark which already revealed rows are the current anchors.

        Keeps every revealed value (nothing is redrawn here); only the
        bookkeeping of anchor versus cache changes, e.g. after point labels
        move between regions.  All requested locations must be known.
        """
        pts = as_points(locs)
        mask = np.zeros(self.n, dtype=bool)
        for x, y in pts:
            idx = self._index.get(location_key(x, y))
            if idx is None:
                raise KeyError(f"cannot anchor unrevealed location ({x}, {y})")
            mask[idx] = True
        self.anchor_mask = mask
