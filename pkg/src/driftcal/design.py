"""Priors, Latin-hypercube designs, and unit-interval scaling utilities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import ndtri

__all__ = [
    "Prior",
    "DesignSpec",
    "latin_hypercube",
    "scale_design",
    "unscale_design",
    "sample_prior",
    "to_unit",
    "from_unit",
]

_LOG_2PI = math.log(2.0 * math.pi)
_PPF_CLIP = 1e-15

_KINDS = ("uniform", "normal", "inverse_gamma", "log_normal")


@dataclass(frozen=True)
class Prior:
    """One-dimensional prior; kind is uniform, normal, inverse_gamma or log_normal.

    ``p1``/``p2`` hold (lo, hi), (mean, sd), (shape, scale) or (mu, sigma)
    depending on the kind. Build instances through the named constructors.
    """

    kind: str
    p1: float
    p2: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "p1", float(self.p1))
        object.__setattr__(self, "p2", float(self.p2))
        if self.kind not in _KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not (math.isfinite(self.p1) and math.isfinite(self.p2)):
            raise ValueError("prior parameters must be finite")
        if self.kind == "uniform" and self.p1 > self.p2:
            raise ValueError(f"uniform prior needs lo <= hi, got ({self.p1}, {self.p2})")
        if self.kind == "normal" and self.p2 <= 0:
            raise ValueError("normal prior needs sd > 0")
        if self.kind == "inverse_gamma" and (self.p1 <= 0 or self.p2 <= 0):
            raise ValueError("inverse_gamma prior needs shape > 0 and scale > 0")
        if self.kind == "log_normal" and self.p2 <= 0:
            raise ValueError("log_normal prior needs sigma > 0")

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "Prior":
        return cls("uniform", lo, hi)

    @classmethod
    def normal(cls, mean: float, sd: float) -> "Prior":
        return cls("normal", mean, sd)

    @classmethod
    def inverse_gamma(cls, shape: float, scale: float) -> "Prior":
        return cls("inverse_gamma", shape, scale)

    @classmethod
    def log_normal(cls, mu: float, sigma: float) -> "Prior":
        return cls("log_normal", mu, sigma)

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "uniform":
            if self.p1 == self.p2:
                return self.p1
            return float(rng.uniform(self.p1, self.p2))
        if self.kind == "normal":
            return float(rng.normal(self.p1, self.p2))
        if self.kind == "inverse_gamma":
            # X ~ Gamma(shape=a, scale=1/b)  =>  1/X ~ InvGamma(a, scale=b)
            return 1.0 / float(rng.gamma(self.p1, 1.0 / self.p2))
        return float(rng.lognormal(self.p1, self.p2))

    def logpdf(self, x: float) -> float:
        x = float(x)
        if self.kind == "uniform":
            lo, hi = self.p1, self.p2
            if lo == hi:
                return 0.0 if x == lo else -math.inf
            return -math.log(hi - lo) if lo <= x <= hi else -math.inf
        if self.kind == "normal":
            z = (x - self.p1) / self.p2
            return -0.5 * z * z - math.log(self.p2) - 0.5 * _LOG_2PI
        if x <= 0:
            return -math.inf
        if self.kind == "inverse_gamma":
            a, b = self.p1, self.p2
            return a * math.log(b) - math.lgamma(a) - (a + 1.0) * math.log(x) - b / x
        mu, sig = self.p1, self.p2
        z = (math.log(x) - mu) / sig
        return -math.log(x) - math.log(sig) - 0.5 * _LOG_2PI - 0.5 * z * z

    def ppf(self, q) -> np.ndarray | float:
        """Inverse CDF; quantiles of unbounded kinds are clipped away from {0, 1}."""
        q = np.clip(np.asarray(q, dtype=float), _PPF_CLIP, 1.0 - _PPF_CLIP)
        if self.kind == "uniform":
            out = self.p1 + q * (self.p2 - self.p1)
        elif self.kind == "normal":
            out = self.p1 + self.p2 * ndtri(q)
        elif self.kind == "inverse_gamma":
            out = stats.invgamma.ppf(q, self.p1, scale=self.p2)
        else:
            out = np.exp(self.p1 + self.p2 * ndtri(q))
        return float(out) if np.ndim(out) == 0 else out

    def cdf(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        if self.kind == "uniform":
            if self.p1 == self.p2:
                out = np.where(x >= self.p1, 1.0, 0.0)
            else:
                out = np.clip((x - self.p1) / (self.p2 - self.p1), 0.0, 1.0)
        elif self.kind == "normal":
            out = stats.norm.cdf(x, self.p1, self.p2)
        elif self.kind == "inverse_gamma":
            out = stats.invgamma.cdf(x, self.p1, scale=self.p2)
        else:
            out = stats.lognorm.cdf(x, self.p2, scale=math.exp(self.p1))
        return float(out) if np.ndim(out) == 0 else out

    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.p1 + self.p2)
        if self.kind == "normal":
            return self.p1
        if self.kind == "inverse_gamma":
            return self.p2 / (self.p1 - 1.0) if self.p1 > 1.0 else math.inf
        return math.exp(self.p1 + 0.5 * self.p2**2)

    def median(self) -> float:
        return float(self.ppf(0.5))

    def support(self) -> tuple[float, float]:
        if self.kind == "uniform":
            return (self.p1, self.p2)
        if self.kind == "normal":
            return (-math.inf, math.inf)
        return (0.0, math.inf)

    def to_dict(self) -> dict:
        names = {
            "uniform": ("lo", "hi"),
            "normal": ("mean", "sd"),
            "inverse_gamma": ("shape", "scale"),
            "log_normal": ("mu", "sigma"),
        }[self.kind]
        return {"kind": self.kind, names[0]: self.p1, names[1]: self.p2}

    @classmethod
    def from_dict(cls, d: dict) -> "Prior":
        kind = d.get("kind")
        names = {
            "uniform": ("lo", "hi"),
            "normal": ("mean", "sd"),
            "inverse_gamma": ("shape", "scale"),
            "log_normal": ("mu", "sigma"),
        }.get(kind)
        if names is None:
            raise ValueError(f"unknown prior kind {kind!r}")
        missing = [n for n in names if n not in d]
        if missing:
            raise ValueError(f"prior {kind!r} missing parameters {missing}")
        return cls(kind, d[names[0]], d[names[1]])


def sample_prior(p: Prior, rng: np.random.Generator) -> float:
    """Draw a single variate from ``p`` using the supplied generator."""
    return p.sample(rng)


@dataclass(frozen=True)
class DesignSpec:
    """Design specification: domain bounds for x, priors for theta, sample count."""

    domain_bounds: tuple[tuple[float, float], ...]
    theta_priors: tuple[Prior, ...]
    n_samples: int
    seed: int = 0

    def __post_init__(self) -> None:
        db = tuple((float(lo), float(hi)) for lo, hi in self.domain_bounds)
        object.__setattr__(self, "domain_bounds", db)
        object.__setattr__(self, "theta_priors", tuple(self.theta_priors))
        if len(db) < 1:
            raise ValueError("domain_bounds must have at least one dimension")
        for lo, hi in db:
            if not lo < hi:
                raise ValueError(f"domain bound ({lo}, {hi}) needs lo < hi")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")

    @property
    def dx(self) -> int:
        return len(self.domain_bounds)

    @property
    def dtheta(self) -> int:
        return len(self.theta_priors)


def latin_hypercube(n: int, d: int, seed: int) -> np.ndarray:
    """Stratified n-by-d design on [0, 1): each column hits every width-1/n bin once.

    Bin permutation and in-bin jitter both derive from the single seed.
    """
    if n < 1 or d < 1:
        raise ValueError(f"latin_hypercube needs n >= 1 and d >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    out = np.empty((n, d))
    for j in range(d):
        perm = rng.permutation(n)
        out[:, j] = (perm + rng.uniform(size=n)) / n
    return out


def scale_design(unit: np.ndarray, spec: DesignSpec) -> np.ndarray:
    """Map a unit design to physical units: x columns affinely, theta via prior ppf."""
    U = np.atleast_2d(np.asarray(unit, dtype=float))
    if U.min() < 0.0 or U.max() >= 1.0:
        raise ValueError("unit design entries must lie in [0, 1)")
    d = spec.dx + spec.dtheta
    if U.shape[1] != d:
        raise ValueError(f"design has {U.shape[1]} columns, spec expects {d}")
    out = np.empty_like(U)
    for j, (lo, hi) in enumerate(spec.domain_bounds):
        out[:, j] = lo + U[:, j] * (hi - lo)
    for k, prior in enumerate(spec.theta_priors):
        out[:, spec.dx + k] = prior.ppf(U[:, spec.dx + k])
    return out


def unscale_design(physical: np.ndarray, spec: DesignSpec) -> np.ndarray:
    """Inverse of :func:`scale_design` through the stored bounds and prior CDFs."""
    P = np.atleast_2d(np.asarray(physical, dtype=float))
    out = np.empty_like(P)
    for j, (lo, hi) in enumerate(spec.domain_bounds):
        out[:, j] = (P[:, j] - lo) / (hi - lo)
    for k, prior in enumerate(spec.theta_priors):
        out[:, spec.dx + k] = prior.cdf(P[:, spec.dx + k])
    return out


def to_unit(values, bounds) -> np.ndarray:
    """Affine map of physical columns onto [0, 1] using per-column (lo, hi) bounds."""
    V = np.atleast_2d(np.asarray(values, dtype=float))
    out = np.empty_like(V)
    for j, (lo, hi) in enumerate(bounds):
        out[:, j] = (V[:, j] - lo) / (hi - lo)
    return out


def from_unit(unit, bounds) -> np.ndarray:
    """Inverse of :func:`to_unit`."""
    U = np.atleast_2d(np.asarray(unit, dtype=float))
    out = np.empty_like(U)
    for j, (lo, hi) in enumerate(bounds):
        out[:, j] = lo + U[:, j] * (hi - lo)
    return out
