"""INI-style run configuration: parsing, validation, canonical serialization.

A run file has up to six sections (domain, model, priors, tuning, io,
simulate).  Every key is known ahead of time and carries a default; unknown
sections or keys are rejected with their full path so typos fail loudly
instead of silently running with defaults.  Serialization is canonical
(fixed section and key order, normalized value spelling), which gives the
round-trip identity parse(serialize(parse(text))) == parse(text) and makes
config echoes diff-friendly.
"""

from __future__ import annotations

import configparser
import io

import numpy as np

from .geometry import SpatialDomain, load_polygon_csv
from .gp import GPHyper
from .mcmc import TuningConfig
from .model import PriorConfig


class ConfigError(ValueError):
    """Invalid, unknown, or inconsistent configuration input."""


# section -> key -> default (as canonical string; empty string means unset)
SCHEMA = {
    "domain": {
        "kind": "rectangle",
        "xmin": "0.0",
        "xmax": "10.0",
        "ymin": "0.0",
        "ymax": "10.0",
        "polygon_file": "",
    },
    "model": {
        "l": "2",
        "mu": "0.0",
        "sigma2": "4.0",
        "gamma": "1.9",
        "phi": "0.5",
        "phi_mode": "fixed",
        "phi_lower": "0.05",
        "phi_upper": "5.0",
        "covariates_file": "",
        "covariate_interp": "nearest",
    },
    "priors": {
        "lambda_shape": "0.001",
        "lambda_rate": "0.001",
        "eta": "1.5",
        "nu": "4.0",
        "alpha_prior_var": "1e6",
    },
    "tuning": {
        "radius": "0.5",
        "radius_multiplier": "2.0",
        "small_radius_weight": "0.95",
        "neighbors": "",
        "phi_rw_sd": "0.3",
        "iterations": "10000",
        "burnin": "2000",
        "thin": "10",
        "seed": "1",
    },
    "io": {
        "output_dir": "out",
        "mesh_nx": "75",
        "mesh_ny": "75",
        "monitors": "",
    },
    "simulate": {
        "lambda_star": "",
        "phi_per_region": "",
        "generators": "",
        "seed": "42",
        "truth_mesh": "false",
    },
}


class RunConfig:
    """Parsed configuration with typed accessors and builders."""

    def __init__(self, values):
        self.values = values

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    # -- raw typed getters ---------------------------------------------------

    def _get(self, section, key):
        return self.values[section][key]

    def _float(self, section, key):
        raw = self._get(section, key)
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected a number, got {raw!r}") from None

    def _int(self, section, key):
        raw = self._get(section, key)
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected an integer, got {raw!r}") from None

    def _bool(self, section, key):
        raw = self._get(section, key).strip().lower()
        if raw in ("true", "yes", "1", "on"):
            return True
        if raw in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{section}.{key}: expected a boolean, got {raw!r}")

    def _float_list(self, section, key):
        raw = self._get(section, key).strip()
        if not raw:
            return []
        try:
            return [float(tok) for tok in raw.split(",")]
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected comma-separated numbers, got {raw!r}") from None

    def _point_list(self, section, key):
        raw = self._get(section, key).strip()
        if not raw:
            return np.zeros((0, 2))
        pts = []
        for chunk in raw.split(";"):
            toks = chunk.split(",")
            if len(toks) != 2:
                raise ConfigError(f"{section}.{key}: expected 'x,y; x,y; ...', got {raw!r}")
            try:
                pts.append((float(toks[0]), float(toks[1])))
            except ValueError:
                raise ConfigError(f"{section}.{key}: bad coordinate in {chunk!r}") from None
        return np.array(pts)

    # -- builders --------------------------------------------------------------

    def to_domain(self):
        kind = self._get("domain", "kind").strip().lower()
        if kind == "rectangle":
            try:
                return SpatialDomain.rectangle(
                    self._float("domain", "xmin"),
                    self._float("domain", "xmax"),
                    self._float("domain", "ymin"),
                    self._float("domain", "ymax"),
                )
            except ValueError as exc:
                raise ConfigError(f"domain: {exc}") from None
        if kind == "polygon":
            path = self._get("domain", "polygon_file").strip()
            if not path:
                raise ConfigError("domain.polygon_file: required when kind = polygon")
            return SpatialDomain.polygon(load_polygon_csv(path))
        raise ConfigError(f"domain.kind: expected rectangle or polygon, got {kind!r}")

    @property
    def L(self):
        L = self._int("model", "l")
        if L < 1:
            raise ConfigError("model.l: need at least one region")
        return L

    def to_hyper(self, phi=None):
        try:
            return GPHyper(
                mu=self._float("model", "mu"),
                sigma2=self._float("model", "sigma2"),
                gamma=self._float("model", "gamma"),
                phi=self._float("model", "phi") if phi is None else phi,
            )
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None

    def to_hypers(self):
        """Per-region hyperparameters; phi_per_region overrides the shared phi."""
        per_region = self._float_list("simulate", "phi_per_region")
        if per_region and len(per_region) != self.L:
            raise ConfigError("simulate.phi_per_region: length must equal model.l")
        if per_region:
            return [self.to_hyper(phi=p) for p in per_region]
        return [self.to_hyper() for _ in range(self.L)]

    @property
    def phi_sampled(self):
        mode = self._get("model", "phi_mode").strip().lower()
        if mode not in ("fixed", "sample"):
            raise ConfigError(f"model.phi_mode: expected fixed or sample, got {mode!r}")
        return mode == "sample"

    @property
    def phi_bounds(self):
        lo = self._float("model", "phi_lower")
        hi = self._float("model", "phi_upper")
        if not (0.0 < lo < hi):
            raise ConfigError("model.phi_lower/phi_upper: need 0 < lower < upper")
        return (lo, hi)

    def to_prior(self):
        try:
            return PriorConfig(
                lambda_shape=self._float("priors", "lambda_shape"),
                lambda_rate=self._float("priors", "lambda_rate"),
                eta=self._float("priors", "eta"),
                nu=self._float("priors", "nu"),
                alpha_prior_var=self._float("priors", "alpha_prior_var"),
            )
        except ValueError as exc:
            raise ConfigError(f"priors: {exc}") from None

    def to_tuning(self):
        raw_b = self._get("tuning", "neighbors").strip()
        try:
            return TuningConfig(
                radius=self._float("tuning", "radius"),
                radius_multiplier=self._float("tuning", "radius_multiplier"),
                small_radius_weight=self._float("tuning", "small_radius_weight"),
                neighbors=int(raw_b) if raw_b else None,
                phi_rw_sd=self._float("tuning", "phi_rw_sd"),
                iterations=self._int("tuning", "iterations"),
                burnin=self._int("tuning", "burnin"),
                thin=self._int("tuning", "thin"),
                seed=self._int("tuning", "seed"),
            )
        except ValueError as exc:
            raise ConfigError(f"tuning: {exc}") from None

    def monitors(self):
        return self._point_list("io", "monitors")

    def simulate_lambda_star(self):
        lam = self._float_list("simulate", "lambda_star")
        if not lam:
            raise ConfigError("simulate.lambda_star: required for simulation")
        if len(lam) != self.L:
            raise ConfigError("simulate.lambda_star: length must equal model.l")
        if any(v < 0 for v in lam):
            raise ConfigError("simulate.lambda_star: rates must be nonnegative")
        return np.array(lam)

    def simulate_generators(self):
        pts = self._point_list("simulate", "generators")
        if pts.shape[0] == 0:
            return None
        if pts.shape[0] != self.L:
            raise ConfigError("simulate.generators: need one generator per region")
        return pts


def parse_config(text):
    """Parse INI text into a RunConfig, rejecting unknown sections and keys."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    values = {section: dict(defaults) for section, defaults in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            values[section][key] = raw.strip()
    return RunConfig(values)


def load_config(path):
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def serialize_config(config):
    """Canonical INI text for a RunConfig (fixed order, every key explicit)."""
    out = io.StringIO()
    for section, defaults in SCHEMA.items():
        out.write(f"[{section}]\n")
        for key in defaults:
            out.write(f"{key} = {config.values[section][key]}\n")
        out.write("\n")
    return out.getvalue()
