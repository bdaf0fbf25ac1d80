"""Calibration with per-parameter drift fields embedded in the emulator.

Each calibration parameter gets a zero-mean GP field d_k(x) over the
application domain; the emulator is queried at theta*(x) = theta + d(x),
so all systematic observation/simulator mismatch is expressed as
input-parameter drift rather than an additive output correction. Inference
runs Metropolis-Hastings sweeps over the field knot values (with
prior-preconditioned proposals and per-block adaptive step sizes) and the
field hyperparameters, plus a conjugate Gibbs draw for the observation
noise variance. An optional additive output-discrepancy field turns the
sampler into the combined formulation.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .design import Prior, from_unit, to_unit
from .gp import KernelParams, PredictiveDistribution, build_covariance, _as_matrix
from .samples import PosteriorSamples
from .simulators import CalibrationDataset

__all__ = [
    "DiscrepancyField",
    "ThetaStar",
    "ChainState",
    "CalibrationPriors",
    "McmcConfig",
    "embedded_log_posterior",
    "propose_field_update",
    "mh_accept",
    "update_hyperparams",
    "gibbs_sigma2",
    "run_integrated_delta",
    "run_combined",
    "posterior_predictive",
    "delta_field_curves",
    "StepAdapter",
]

log = logging.getLogger("driftcal.embedded")

_LOG_2PI = math.log(2.0 * math.pi)
FIELD_JITTER = 1e-10


def _chol(K: np.ndarray) -> np.ndarray:
    """Cholesky with jitter escalation for near-singular field covariances."""
    jitter = 0.0
    for _ in range(8):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(K.shape[0]))
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-12)
    raise np.linalg.LinAlgError("field covariance not positive definite")


def _mvn_logpdf_zero(values: np.ndarray, L: np.ndarray) -> float:
    w = solve_triangular(L, values, lower=True, check_finite=False)
    return float(-0.5 * (w @ w) - np.log(np.diag(L)).sum() - 0.5 * values.size * _LOG_2PI)


def gaussian_loglik(resid: np.ndarray, var: np.ndarray) -> float:
    """Sum of independent N(0, var_i) log-densities at the residuals."""
    return float(-0.5 * np.sum(resid * resid / var + np.log(2.0 * math.pi * var)))


def _predict_std(emulator, Q: np.ndarray):
    """Emulator mean/variance on its standardized target scale."""
    from .gp import ExactEmulator, GPModel, predict_standardized

    if isinstance(emulator, GPModel):
        mean, var, _ = predict_standardized(emulator, Q)
        return mean, var
    if isinstance(emulator, ExactEmulator):
        mean = emulator.mean_at(Q)
        return mean, np.zeros_like(mean)
    pred = emulator.predict(Q)
    shift = getattr(emulator, "y_shift", 0.0)
    scale = getattr(emulator, "y_scale", 1.0)
    return (pred.mean - shift) / scale, pred.variance / (scale * scale)


def _box_distances(Q: np.ndarray) -> np.ndarray:
    """Euclidean distance of each row beyond the training unit box."""
    excess = np.maximum(Q - 1.0, 0.0) + np.maximum(-Q, 0.0)
    return np.sqrt(np.sum(excess * excess, axis=1))


def _exact_matches(X: np.ndarray, knots: np.ndarray):
    """Row indices of X that coincide bitwise with a knot, plus the knot index."""
    eq = np.all(X[:, None, :] == knots[None, :, :], axis=2)
    rows, cols = np.nonzero(eq)
    keep = np.unique(rows, return_index=True)[1]
    return rows[keep], cols[keep]


@dataclass(frozen=True)
class DiscrepancyField:
    """One drift field: knot locations, knot values, and its GP prior.

    Values are in normalized units (theta-box units for parameter fields,
    standardized-y units for an additive output field). Conditioning on the
    knot values is noise-free, so predictions at knot locations reproduce
    the stored values exactly.
    """

    knots: np.ndarray
    values: np.ndarray
    hyper: KernelParams

    def __post_init__(self) -> None:
        k = _as_matrix(self.knots)
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)
        if v.size != k.shape[0]:
            raise ValueError("one value per knot required")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")

    @property
    def n_knots(self) -> int:
        return int(self.values.size)

    def prior_cov(self) -> np.ndarray:
        return build_covariance(self.knots, None, replace(self.hyper, nugget=FIELD_JITTER))

    def prior_chol(self) -> np.ndarray:
        return _chol(self.prior_cov())

    def log_prior(self) -> float:
        """Zero-mean GP prior log-density of the knot values."""
        return _mvn_logpdf_zero(self.values, self.prior_chol())

    def conditional(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Noise-free conditional mean and variance of the field at ``x``."""
        X = _as_matrix(x)
        L = self.prior_chol()
        kxk = build_covariance(X, self.knots, replace(self.hyper, nugget=0.0))
        mean = kxk @ cho_solve((L, True), self.values)
        v = solve_triangular(L, kxk.T, lower=True, check_finite=False)
        var = np.maximum(self.hyper.variance_scale - np.einsum("ij,ij->j", v, v), 0.0)
        rows, cols = _exact_matches(X, self.knots)
        mean[rows] = self.values[cols]
        var[rows] = 0.0
        return mean, var

    def conditional_mean(self, x) -> np.ndarray:
        return self.conditional(x)[0]


@dataclass(frozen=True)
class ThetaStar:
    """Drift-corrected parameter map theta*(x) = theta + d(x)."""

    base_theta: np.ndarray
    fields: tuple[DiscrepancyField, ...]

    def __post_init__(self) -> None:
        bt = np.atleast_1d(np.asarray(self.base_theta, dtype=float))
        object.__setattr__(self, "base_theta", bt)
        object.__setattr__(self, "fields", tuple(self.fields))
        if len(self.fields) != bt.size:
            raise ValueError("need one drift field per parameter")

    def evaluate(self, x) -> np.ndarray:
        """theta*(x) at a single normalized input; exact at knot locations."""
        x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
        drift = np.array([float(f.conditional_mean(x)[0]) for f in self.fields])
        return self.base_theta + drift


@dataclass
class ChainState:
    """Mutable MCMC chain state for the embedded sampler."""

    theta_star: ThetaStar
    noise_var: float
    step_sizes: dict[str, float]
    log_post: float
    iteration: int = 0
    eta_field: DiscrepancyField | None = None

    def __post_init__(self) -> None:
        if not self.noise_var > 0:
            raise ValueError("noise_var must be positive")
        for name, s in self.step_sizes.items():
            if not s > 0:
                raise ValueError(f"step size for {name!r} must be positive")


@dataclass(frozen=True)
class CalibrationPriors:
    """Priors shared by the calibrators.

    Field hyperpriors default to log-normals (lengthscale median 0.3 of the
    unit domain, variance median 0.05 on the normalized value scale); the
    noise prior must be inverse-gamma so the Gibbs step stays conjugate.
    """

    field_variance: Prior = Prior.log_normal(math.log(0.05), 0.75)
    field_lengthscale: Prior = Prior.log_normal(math.log(0.3), 0.5)
    eta_variance: Prior = Prior.log_normal(math.log(0.05), 0.75)
    eta_lengthscale: Prior = Prior.log_normal(math.log(0.3), 0.5)
    noise: Prior = Prior.inverse_gamma(3.0, 0.005)
    theta: tuple[Prior, ...] | None = None

    def __post_init__(self) -> None:
        if self.noise.kind != "inverse_gamma":
            raise ValueError("noise prior must be inverse_gamma (Gibbs conjugacy)")
        if self.theta is not None:
            object.__setattr__(self, "theta", tuple(self.theta))


@dataclass(frozen=True)
class McmcConfig:
    """Chain-length, adaptation, and block-selection settings."""

    iterations: int = 4000
    burn_in: int = 1500
    thin: int = 2
    chains: int = 2
    seed: int = 0
    adapt_target: float = 0.3
    initial_step: float = 0.5
    sample_hyper: bool = True
    sample_sigma2: bool = True
    # None resolves per calibrator: False for the embedded sampler (theta
    # stays at its initial estimate), True for the baseline.
    sample_theta: bool | None = None
    theta0: tuple[float, ...] | None = None
    refine_knots: int = 0
    audit_every: int = 1000
    grid_points: int = 101

    def __post_init__(self) -> None:
        if not (self.iterations > self.burn_in >= 0):
            raise ValueError(
                f"need iterations > burn_in >= 0, got iterations={self.iterations}, "
                f"burn_in={self.burn_in}"
            )
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0.0 < self.adapt_target < 1.0:
            raise ValueError("adapt_target must lie in (0, 1)")
        if self.grid_points < 1:
            raise ValueError("grid_points must be >= 1")


class StepAdapter:
    """Robbins-Monro scaling of a proposal step toward a target acceptance rate."""

    def __init__(self, step: float, target: float = 0.3, decay: float = 0.66):
        self.step = float(step)
        self.target = float(target)
        self.decay = float(decay)
        self._n = 0

    def update(self, accepted: bool) -> None:
        self._n += 1
        gain = self._n ** (-self.decay)
        self.step *= math.exp(gain * ((1.0 if accepted else 0.0) - self.target))
        self.step = min(max(self.step, 1e-6), 1e3)


def mh_accept(log_post_new: float, log_post_old: float, rng: np.random.Generator) -> bool:
    """Metropolis decision: accept with probability min(1, exp(new - old))."""
    if math.isnan(log_post_new) or log_post_new == -math.inf:
        return False
    if log_post_new >= log_post_old:
        return True
    return math.log(rng.uniform()) < log_post_new - log_post_old


def propose_field_update(
    field: DiscrepancyField, step: float, rng: np.random.Generator
) -> DiscrepancyField:
    """Prior-preconditioned random walk: values + step * L z with L the prior Cholesky.

    The proposal is symmetric, so no q-ratio enters the acceptance decision.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    if step == 0:
        return field
    z = rng.standard_normal(field.n_knots)
    return replace(field, values=field.values + step * (field.prior_chol() @ z))


def gibbs_sigma2(residuals, prior: Prior, rng: np.random.Generator) -> float:
    """Draw the noise variance from its conjugate inverse-gamma conditional.

    With prior IG(a0, b0) and N residuals, the conditional is
    IG(a0 + N/2, b0 + sum(r^2)/2).
    """
    if prior.kind != "inverse_gamma":
        raise ValueError("gibbs_sigma2 requires an inverse_gamma prior")
    r = np.atleast_1d(np.asarray(residuals, dtype=float))
    if not np.all(np.isfinite(r)):
        raise ValueError("residuals must be finite")
    a = prior.p1 + 0.5 * r.size
    b = prior.p2 + 0.5 * float(r @ r)
    return 1.0 / float(rng.gamma(a, 1.0 / b))


def _hyper_logprior(hyper: KernelParams, var_prior: Prior, len_prior: Prior) -> float:
    out = var_prior.logpdf(hyper.variance_scale)
    for ell in hyper.lengthscales:
        out += len_prior.logpdf(float(ell))
    return out


def _theta_logprior(base_theta_unit: np.ndarray, priors: CalibrationPriors, theta_bounds) -> float:
    if priors.theta is None:
        return 0.0
    phys = from_unit(base_theta_unit[None, :], theta_bounds)[0]
    return float(sum(p.logpdf(v) for p, v in zip(priors.theta, phys)))


def embedded_log_posterior(
    state: ChainState,
    data: CalibrationDataset,
    emulator,
    priors: CalibrationPriors,
) -> float:
    """Joint log-posterior of the embedded-discrepancy model.

    Likelihood: y_i ~ N(eta(x_i, theta*(x_i)) [+ delta_eta(x_i)],
    sigma^2 + emulator variance), evaluated on the emulator's standardized
    target scale; plus GP priors of every field's knot values, the field
    hyperpriors, the noise prior, and (when configured) the theta prior.
    Non-finite emulator output maps to -inf.
    """
    x_unit = data.obs_x_unit()
    theta_star = np.vstack([state.theta_star.evaluate(x) for x in x_unit])
    Q = np.hstack([x_unit, theta_star])
    mean, var = _predict_std(emulator, Q)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
        log.warning("emulator returned non-finite output; state rejected")
        return -math.inf

    shift = getattr(emulator, "y_shift", 0.0)
    scale = getattr(emulator, "y_scale", 1.0)
    y_std = (data.obs_y - shift) / scale
    eta_at_obs = (
        state.eta_field.conditional_mean(x_unit) if state.eta_field is not None else 0.0
    )
    total = gaussian_loglik(y_std - mean - eta_at_obs, state.noise_var + var)
    for f in state.theta_star.fields:
        total += f.log_prior()
    if state.eta_field is not None:
        total += state.eta_field.log_prior()
    for f in state.theta_star.fields:
        total += _hyper_logprior(f.hyper, priors.field_variance, priors.field_lengthscale)
    if state.eta_field is not None:
        total += _hyper_logprior(state.eta_field.hyper, priors.eta_variance, priors.eta_lengthscale)
    total += priors.noise.logpdf(state.noise_var)
    total += _theta_logprior(state.theta_star.base_theta, priors, data.theta_bounds)
    return total


def _hyper_move(field, step, var_prior, len_prior, rng):
    """One log-space RW proposal on a field's (variance, lengthscales).

    Returns (proposal, d_field_prior, d_hyper_prior, log_ratio) where
    log_ratio includes the log-space Jacobian correction.
    """
    logp = np.log(np.r_[field.hyper.variance_scale, field.hyper.lengthscales])
    logp2 = logp + step * rng.standard_normal(logp.size)
    hyper2 = KernelParams(
        variance_scale=math.exp(logp2[0]),
        lengthscales=np.exp(logp2[1:]),
        nugget=field.hyper.nugget,
    )
    prop = replace(field, hyper=hyper2)
    d_field = prop.log_prior() - field.log_prior()
    d_hyper = _hyper_logprior(hyper2, var_prior, len_prior) - _hyper_logprior(
        field.hyper, var_prior, len_prior
    )
    log_ratio = d_field + d_hyper + float(logp2.sum() - logp.sum())
    return prop, d_field, d_hyper, log_ratio


def update_hyperparams(
    state: ChainState,
    data: CalibrationDataset,
    priors: CalibrationPriors,
    rng: np.random.Generator,
) -> ChainState:
    """One MH pass over every field's (variance, lengthscale) pair.

    The likelihood does not depend on the hyperparameters given the knot
    values, so only the field GP prior and the hyperprior terms enter the
    acceptance ratio; ``data`` is untouched.
    """
    fields = list(state.theta_star.fields)
    for k, f in enumerate(fields):
        step = state.step_sizes.get(f"hyper:{k}", 0.2)
        prop, d_field, d_hyper, log_ratio = _hyper_move(
            f, step, priors.field_variance, priors.field_lengthscale, rng
        )
        if mh_accept(log_ratio, 0.0, rng):
            fields[k] = prop
            state.log_post += d_field + d_hyper
    if state.eta_field is not None:
        step = state.step_sizes.get("hyper:eta", 0.2)
        prop, d_field, d_hyper, log_ratio = _hyper_move(
            state.eta_field, step, priors.eta_variance, priors.eta_lengthscale, rng
        )
        if mh_accept(log_ratio, 0.0, rng):
            state.eta_field = prop
            state.log_post += d_field + d_hyper
    state.theta_star = replace(state.theta_star, fields=tuple(fields))
    return state


class _BlockStats:
    __slots__ = ("proposed", "accepted")

    def __init__(self) -> None:
        self.proposed = 0
        self.accepted = 0

    def rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


def _field_chol(knots: np.ndarray, hyper: KernelParams) -> np.ndarray:
    return _chol(build_covariance(knots, None, replace(hyper, nugget=FIELD_JITTER)))


class _EmbeddedChain:
    """Single-chain sampler; owns its state and RNG, shares data read-only.

    Field values and prior Cholesky factors are kept as raw arrays (one
    factorization per hyperparameter change) so that per-proposal work is a
    matrix-vector product, an emulator query, and two Gaussian densities.
    """

    def __init__(self, data, emulator, priors, config, rng, additive: bool,
                 knots: np.ndarray, obs_idx: np.ndarray):
        self.data = data
        self.emulator = emulator
        self.priors = priors
        self.cfg = config
        self.rng = rng
        self.additive = additive
        self.knots = knots
        self.obs_idx = obs_idx

        self.x_obs_unit = data.obs_x_unit()
        shift = getattr(emulator, "y_shift", 0.0)
        scale = getattr(emulator, "y_scale", 1.0)
        self.y_std = (data.obs_y - shift) / scale
        self.dtheta = data.dtheta
        self.pnames = data.param_names
        K = len(knots)
        dx = knots.shape[1]

        hyper0 = KernelParams(
            priors.field_variance.median(), np.full(dx, priors.field_lengthscale.median()),
            FIELD_JITTER,
        )
        self.values = [np.zeros(K) for _ in range(self.dtheta)]
        self.hypers = [hyper0] * self.dtheta
        chol0 = _field_chol(knots, hyper0)
        self.chols = [chol0] * self.dtheta
        if additive:
            self.eta_hyper = KernelParams(
                priors.eta_variance.median(), np.full(dx, priors.eta_lengthscale.median()),
                FIELD_JITTER,
            )
            self.eta_values = np.zeros(K)
            self.eta_chol = _field_chol(knots, self.eta_hyper)
            self.eta_at_obs = self.eta_values[obs_idx]
        else:
            self.eta_values = None
            self.eta_at_obs = 0.0

        if config.theta0 is not None:
            t0 = to_unit(np.asarray(config.theta0, float)[None, :], data.theta_bounds)[0]
        elif priors.theta is not None:
            med = np.array([p.median() for p in priors.theta])
            t0 = to_unit(med[None, :], data.theta_bounds)[0]
        else:
            t0 = np.full(self.dtheta, 0.5)
        self.base_theta = t0
        self.theta_mat = np.column_stack(
            [t0[k] + self.values[k][obs_idx] for k in range(self.dtheta)]
        )

        s0 = priors.noise.mean()
        self.sigma2 = s0 if math.isfinite(s0) else priors.noise.median()

        self.block_names = [f"delta:{n}" for n in self.pnames]
        if additive:
            self.block_names.append("delta:eta")
        self.block_names += [f"hyper:{n}" for n in self.pnames]
        if additive:
            self.block_names.append("hyper:eta")
        if config.sample_theta:
            self.block_names.append("theta")
        self.adapters = {
            n: StepAdapter(config.initial_step, config.adapt_target) for n in self.block_names
        }
        self.stats = {n: _BlockStats() for n in self.block_names}
        self.extrap_count = 0
        self.extrap_max = 0.0
        self.iteration = 0

        self._init_parts()

    # -- cached log-posterior parts -------------------------------------

    def _emulate(self, Q: np.ndarray):
        mean, var = _predict_std(self.emulator, Q)
        d = _box_distances(Q)
        n_out = int(np.count_nonzero(d > 0))
        if n_out:
            self.extrap_count += n_out
            dmax = float(d.max())
            if dmax > self.extrap_max:
                self.extrap_max = dmax
            log.debug("emulator extrapolation: %d points, max box distance %.3g",
                      n_out, dmax)
        ok = bool(np.all(np.isfinite(mean)) and np.all(np.isfinite(var)))
        return mean, var, ok

    def _init_parts(self) -> None:
        Q = np.hstack([self.x_obs_unit, self.theta_mat])
        mean, var, ok = self._emulate(Q)
        if not ok:
            raise RuntimeError("non-finite emulator output at initialization")
        self.emu_mean, self.emu_var = mean, var
        self.loglik = gaussian_loglik(
            self.y_std - mean - self.eta_at_obs, self.sigma2 + var
        )
        self.field_prior = np.array(
            [_mvn_logpdf_zero(self.values[k], self.chols[k]) for k in range(self.dtheta)]
        )
        self.hyper_prior = np.array([
            _hyper_logprior(h, self.priors.field_variance, self.priors.field_lengthscale)
            for h in self.hypers
        ])
        if self.additive:
            self.eta_prior = _mvn_logpdf_zero(self.eta_values, self.eta_chol)
            self.eta_hyper_prior = _hyper_logprior(
                self.eta_hyper, self.priors.eta_variance, self.priors.eta_lengthscale
            )
        else:
            self.eta_prior = 0.0
            self.eta_hyper_prior = 0.0
        self.sigma2_prior = self.priors.noise.logpdf(self.sigma2)
        self.theta_prior = _theta_logprior(self.base_theta, self.priors, self.data.theta_bounds)
        if not math.isfinite(self.total()):
            raise RuntimeError("non-finite log posterior at initialization")

    def total(self) -> float:
        return (
            self.loglik
            + float(self.field_prior.sum())
            + self.eta_prior
            + float(self.hyper_prior.sum())
            + self.eta_hyper_prior
            + self.sigma2_prior
            + self.theta_prior
        )

    def snapshot(self) -> ChainState:
        fields = tuple(
            DiscrepancyField(self.knots, self.values[k].copy(), self.hypers[k])
            for k in range(self.dtheta)
        )
        eta = (
            DiscrepancyField(self.knots, self.eta_values.copy(), self.eta_hyper)
            if self.additive else None
        )
        return ChainState(
            theta_star=ThetaStar(self.base_theta, fields),
            noise_var=self.sigma2,
            step_sizes={n: a.step for n, a in self.adapters.items()},
            log_post=self.total(),
            iteration=self.iteration,
            eta_field=eta,
        )

    # -- MCMC blocks ------------------------------------------------------

    def _track(self, name: str, accepted: bool, adapting: bool) -> None:
        if adapting:
            self.adapters[name].update(accepted)
        else:
            st = self.stats[name]
            st.proposed += 1
            st.accepted += accepted

    def _update_field(self, k: int, adapting: bool) -> None:
        name = f"delta:{self.pnames[k]}"
        L = self.chols[k]
        z = self.rng.standard_normal(len(self.values[k]))
        vals_new = self.values[k] + self.adapters[name].step * (L @ z)
        theta_new = self.theta_mat.copy()
        theta_new[:, k] = self.base_theta[k] + vals_new[self.obs_idx]
        mean, var, ok = self._emulate(np.hstack([self.x_obs_unit, theta_new]))
        accepted = False
        if ok:
            loglik_new = gaussian_loglik(
                self.y_std - mean - self.eta_at_obs, self.sigma2 + var
            )
            fp_new = _mvn_logpdf_zero(vals_new, L)
            delta = (loglik_new + fp_new) - (self.loglik + self.field_prior[k])
            accepted = mh_accept(delta, 0.0, self.rng)
            if accepted:
                self.values[k] = vals_new
                self.theta_mat = theta_new
                self.emu_mean, self.emu_var = mean, var
                self.loglik = loglik_new
                self.field_prior[k] = fp_new
        self._track(name, accepted, adapting)

    def _update_eta(self, adapting: bool) -> None:
        z = self.rng.standard_normal(len(self.eta_values))
        vals_new = self.eta_values + self.adapters["delta:eta"].step * (self.eta_chol @ z)
        loglik_new = gaussian_loglik(
            self.y_std - self.emu_mean - vals_new[self.obs_idx], self.sigma2 + self.emu_var
        )
        fp_new = _mvn_logpdf_zero(vals_new, self.eta_chol)
        delta = (loglik_new + fp_new) - (self.loglik + self.eta_prior)
        accepted = mh_accept(delta, 0.0, self.rng)
        if accepted:
            self.eta_values = vals_new
            self.eta_at_obs = vals_new[self.obs_idx]
            self.loglik = loglik_new
            self.eta_prior = fp_new
        self._track("delta:eta", accepted, adapting)

    def _update_theta(self, adapting: bool) -> None:
        step = self.adapters["theta"].step
        base_new = self.base_theta + step * self.rng.standard_normal(self.dtheta)
        tp_new = _theta_logprior(base_new, self.priors, self.data.theta_bounds)
        accepted = False
        if math.isfinite(tp_new):
            theta_new = self.theta_mat + (base_new - self.base_theta)
            mean, var, ok = self._emulate(np.hstack([self.x_obs_unit, theta_new]))
            if ok:
                loglik_new = gaussian_loglik(
                    self.y_std - mean - self.eta_at_obs, self.sigma2 + var
                )
                delta = (loglik_new + tp_new) - (self.loglik + self.theta_prior)
                accepted = mh_accept(delta, 0.0, self.rng)
                if accepted:
                    self.base_theta = base_new
                    self.theta_mat = theta_new
                    self.emu_mean, self.emu_var = mean, var
                    self.loglik = loglik_new
                    self.theta_prior = tp_new
        self._track("theta", accepted, adapting)

    def _hyper_proposal(self, hyper: KernelParams, step: float):
        logp = np.log(np.r_[hyper.variance_scale, hyper.lengthscales])
        logp2 = logp + step * self.rng.standard_normal(logp.size)
        hyper2 = KernelParams(math.exp(logp2[0]), np.exp(logp2[1:]), hyper.nugget)
        return hyper2, float(logp2.sum() - logp.sum())

    def _update_hyper(self, k: int, adapting: bool) -> None:
        name = f"hyper:{self.pnames[k]}"
        hyper2, d_jac = self._hyper_proposal(self.hypers[k], self.adapters[name].step)
        chol2 = _field_chol(self.knots, hyper2)
        fp_new = _mvn_logpdf_zero(self.values[k], chol2)
        hp_new = _hyper_logprior(hyper2, self.priors.field_variance,
                                 self.priors.field_lengthscale)
        log_ratio = (fp_new - self.field_prior[k]) + (hp_new - self.hyper_prior[k]) + d_jac
        accepted = mh_accept(log_ratio, 0.0, self.rng)
        if accepted:
            self.hypers[k] = hyper2
            self.chols[k] = chol2
            self.field_prior[k] = fp_new
            self.hyper_prior[k] = hp_new
        self._track(name, accepted, adapting)

    def _update_hyper_eta(self, adapting: bool) -> None:
        hyper2, d_jac = self._hyper_proposal(self.eta_hyper, self.adapters["hyper:eta"].step)
        chol2 = _field_chol(self.knots, hyper2)
        fp_new = _mvn_logpdf_zero(self.eta_values, chol2)
        hp_new = _hyper_logprior(hyper2, self.priors.eta_variance, self.priors.eta_lengthscale)
        log_ratio = (fp_new - self.eta_prior) + (hp_new - self.eta_hyper_prior) + d_jac
        accepted = mh_accept(log_ratio, 0.0, self.rng)
        if accepted:
            self.eta_hyper = hyper2
            self.eta_chol = chol2
            self.eta_prior = fp_new
            self.eta_hyper_prior = hp_new
        self._track("hyper:eta", accepted, adapting)

    def _gibbs_sigma2(self) -> None:
        resid = self.y_std - self.emu_mean - self.eta_at_obs
        self.sigma2 = gibbs_sigma2(resid, self.priors.noise, self.rng)
        self.loglik = gaussian_loglik(resid, self.sigma2 + self.emu_var)
        self.sigma2_prior = self.priors.noise.logpdf(self.sigma2)

    def _audit(self) -> None:
        recomputed = embedded_log_posterior(self.snapshot(), self.data, self.emulator, self.priors)
        cached = self.total()
        if abs(recomputed - cached) > 1e-9:
            raise RuntimeError(
                f"log-posterior audit failed: cached {cached!r} vs recomputed {recomputed!r}"
            )

    def run(self):
        cfg = self.cfg
        n_stored = (cfg.iterations - cfg.burn_in + cfg.thin - 1) // cfg.thin
        K = len(self.knots)
        out_delta = {n: np.empty((n_stored, K)) for n in self.pnames}
        if self.additive:
            out_delta["eta"] = np.empty((n_stored, K))
        dx = self.knots.shape[1]
        out_hyper = {n: np.empty((n_stored, 1 + dx)) for n in out_delta}
        out_sigma2 = np.empty(n_stored)
        out_theta = np.empty((n_stored, self.dtheta)) if cfg.sample_theta else None

        stored = 0
        for it in range(cfg.iterations):
            self.iteration = it
            adapting = it < cfg.burn_in
            for k in range(self.dtheta):
                self._update_field(k, adapting)
            if self.additive:
                self._update_eta(adapting)
            if cfg.sample_theta:
                self._update_theta(adapting)
            if cfg.sample_hyper:
                for k in range(self.dtheta):
                    self._update_hyper(k, adapting)
                if self.additive:
                    self._update_hyper_eta(adapting)
            if cfg.sample_sigma2:
                self._gibbs_sigma2()
            if cfg.audit_every and (it + 1) % cfg.audit_every == 0:
                self._audit()
            if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
                for k, n in enumerate(self.pnames):
                    out_delta[n][stored] = self.values[k]
                    out_hyper[n][stored] = np.r_[
                        self.hypers[k].variance_scale, self.hypers[k].lengthscales
                    ]
                if self.additive:
                    out_delta["eta"][stored] = self.eta_values
                    out_hyper["eta"][stored] = np.r_[
                        self.eta_hyper.variance_scale, self.eta_hyper.lengthscales
                    ]
                out_sigma2[stored] = self.sigma2
                if out_theta is not None:
                    out_theta[stored] = self.base_theta
                stored += 1
        return {
            "delta": out_delta,
            "hyper": out_hyper,
            "sigma2": out_sigma2,
            "theta": out_theta,
            "stats": self.stats,
            "extrap_count": self.extrap_count,
            "extrap_max": self.extrap_max,
            "base_theta": self.base_theta,
        }


def _build_knots(data: CalibrationDataset, refine: int):
    """Knots at the (deduplicated) observation inputs plus an optional uniform grid."""
    x_unit = data.obs_x_unit()
    knots = np.unique(x_unit, axis=0)
    if refine > 0:
        if data.dx != 1:
            raise ValueError("knot grid refinement requires a 1-D domain")
        grid = np.linspace(0.0, 1.0, refine)[:, None]
        extra = [g for g in grid if np.min(np.abs(knots[:, 0] - g[0])) > 1e-9]
        if extra:
            knots = np.vstack([knots, np.array(extra)])
        order = np.lexsort(knots.T[::-1])
        knots = knots[order]
    obs_idx = np.empty(x_unit.shape[0], dtype=int)
    for i, row in enumerate(x_unit):
        obs_idx[i] = int(np.where(np.all(knots == row, axis=1))[0][0])
    return knots, obs_idx


def _n_workers(chains: int) -> int:
    try:
        env = int(os.environ.get("DRIFTCAL_THREADS", "1"))
    except ValueError:
        env = 1
    return max(1, min(env, chains))


def _run_embedded(data, emulator, priors, config, additive: bool, kind: str) -> PosteriorSamples:
    knots, obs_idx = _build_knots(data, config.refine_knots)
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)

    def one_chain(i: int):
        rng = np.random.default_rng(seeds[i])
        return _EmbeddedChain(
            data, emulator, priors, config, rng, additive, knots, obs_idx
        ).run()

    workers = _n_workers(config.chains)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_chain, range(config.chains)))
    else:
        results = [one_chain(i) for i in range(config.chains)]

    names = list(results[0]["delta"])
    delta = {n: np.vstack([r["delta"][n] for r in results]) for n in names}
    hyper = {n: np.vstack([r["hyper"][n] for r in results]) for n in names}
    sigma2 = np.concatenate([r["sigma2"] for r in results])
    theta = (
        np.vstack([r["theta"] for r in results]) if results[0]["theta"] is not None else None
    )
    acceptance = {}
    for block in results[0]["stats"]:
        proposed = sum(r["stats"][block].proposed for r in results)
        accepted = sum(r["stats"][block].accepted for r in results)
        acceptance[block] = accepted / proposed if proposed else 0.0

    samples = PosteriorSamples(
        kind=kind,
        param_names=data.param_names,
        knots=knots,
        delta_draws=delta,
        hyper_draws=hyper,
        sigma2_draws=sigma2,
        theta_draws=theta,
        base_theta=results[0]["base_theta"],
        acceptance_rates=acceptance,
        chains=config.chains,
        domain_bounds=data.domain_bounds,
        theta_bounds=data.theta_bounds,
        y_shift=float(getattr(emulator, "y_shift", 0.0)),
        y_scale=float(getattr(emulator, "y_scale", 1.0)),
        grid=np.linspace(0.0, 1.0, config.grid_points),
        extrapolation_count=sum(r["extrap_count"] for r in results),
        extrapolation_max_distance=max(r["extrap_max"] for r in results),
        seed=config.seed,
    )
    _attach_summaries(samples, emulator)
    return samples


SUMMARY_MAX_DRAWS = 2000


def _attach_summaries(samples: PosteriorSamples, emulator) -> None:
    grid = samples.grid
    samples.summaries["x_norm"] = grid
    for name in samples.delta_draws:
        mean_c, var_c = delta_field_curves(samples, name, grid, max_draws=SUMMARY_MAX_DRAWS)
        samples.summaries[f"delta_mean:{name}"] = mean_c.mean(axis=0)
        samples.summaries[f"delta_sd:{name}"] = np.sqrt(
            mean_c.var(axis=0) + var_c.mean(axis=0)
        )
    query = from_unit(grid[:, None], samples.domain_bounds)
    pred = posterior_predictive(samples, emulator, query, max_draws=SUMMARY_MAX_DRAWS)
    samples.summaries["predictive_mean"] = pred.mean
    samples.summaries["predictive_sd"] = pred.sd


def run_integrated_delta(
    data: CalibrationDataset,
    emulator,
    priors: CalibrationPriors,
    mcmc_config: McmcConfig,
) -> PosteriorSamples:
    """Run the embedded-discrepancy sampler.

    Per iteration: MH sweep over each parameter's drift-field knot values
    (prior-preconditioned proposals), MH updates of each field's
    (variance, lengthscale), an optional theta block, and a conjugate Gibbs
    draw of the noise variance. Step sizes adapt toward the target
    acceptance rate during burn-in only; draws after burn-in are stored
    with the configured stride. Deterministic for a fixed seed.
    """
    return _run_embedded(data, emulator, priors, mcmc_config, additive=False,
                         kind="integrated_delta")


def run_combined(
    data: CalibrationDataset,
    emulator,
    priors: CalibrationPriors,
    mcmc_config: McmcConfig,
) -> PosteriorSamples:
    """Embedded drift fields plus one additive output-discrepancy field.

    The extra field acts on the standardized observation scale like a
    classic additive discrepancy; everything else matches
    :func:`run_integrated_delta`. Experimental.
    """
    return _run_embedded(data, emulator, priors, mcmc_config, additive=True, kind="combined")


def _draw_subset(n_draws: int, max_draws: int | None) -> np.ndarray:
    if max_draws is None or n_draws <= max_draws:
        return np.arange(n_draws)
    return np.unique(np.linspace(0, n_draws - 1, max_draws).astype(int))


def _conditional_curves(knots, X, values_rows, hyper_rows):
    """Noise-free field conditionals for a stack of draws.

    ``values_rows`` is (T, K), ``hyper_rows`` is (T, 1 + dx); returns (T, G)
    mean and variance arrays, with exact overrides where grid points
    coincide with knots.
    """
    diff_xk = X[:, None, :] - knots[None, :, :]
    diff_kk = knots[:, None, :] - knots[None, :, :]
    rows, cols = _exact_matches(X, knots)
    T = values_rows.shape[0]
    K = knots.shape[0]
    means = np.empty((T, X.shape[0]))
    vars_ = np.empty((T, X.shape[0]))
    eye = FIELD_JITTER * np.eye(K)
    for t in range(T):
        v, ls = hyper_rows[t, 0], hyper_rows[t, 1:]
        Kk = v * np.exp(-np.sum((diff_kk / ls) ** 2, axis=2)) + eye
        kxk = v * np.exp(-np.sum((diff_xk / ls) ** 2, axis=2))
        L = _chol(Kk)
        means[t] = kxk @ cho_solve((L, True), values_rows[t])
        s = solve_triangular(L, kxk.T, lower=True, check_finite=False)
        vars_[t] = np.maximum(v - np.einsum("ij,ij->j", s, s), 0.0)
        means[t, rows] = values_rows[t, cols]
        vars_[t, rows] = 0.0
    return means, vars_


def delta_field_curves(
    samples: PosteriorSamples,
    name: str,
    grid_norm: np.ndarray,
    max_draws: int | None = None,
):
    """Per-draw conditional mean and variance of one field on a normalized grid.

    Returns two (T, G) arrays (optionally a strided subset of draws).
    """
    X = np.atleast_1d(np.asarray(grid_norm, dtype=float))[:, None]
    if samples.knots.shape[1] != 1:
        raise ValueError("grid summaries require a 1-D domain")
    sel = _draw_subset(samples.n_draws, max_draws)
    return _conditional_curves(
        samples.knots, X, samples.delta_draws[name][sel], samples.hyper_draws[name][sel]
    )


def posterior_predictive(
    samples: PosteriorSamples,
    emulator,
    query_x,
    max_draws: int | None = None,
) -> PredictiveDistribution:
    """Monte-Carlo posterior predictive at physical query inputs.

    For every stored draw the drift fields are conditioned on their knot
    values, the emulator is queried at (x, theta + d(x)), and the noise and
    emulator variances are added; the reported variance combines the spread
    of the per-draw means with the average per-draw variance. KOH-style
    sample sets (constant theta draws plus an additive field) are handled
    with the same integral.
    """
    T = samples.n_draws
    if T == 0:
        raise ValueError("posterior_predictive needs at least one stored draw")
    sel = _draw_subset(T, max_draws)

    X = np.atleast_2d(np.asarray(query_x, dtype=float))
    if X.shape[1] != len(samples.domain_bounds):
        X = X.T if X.shape[0] == len(samples.domain_bounds) else X
    x_unit = to_unit(X, samples.domain_bounds)
    G = x_unit.shape[0]
    dtheta = len(samples.theta_bounds)

    field_names = [n for n in samples.param_names if n in samples.delta_draws]
    drift = {
        name: _conditional_curves(
            samples.knots, x_unit, samples.delta_draws[name][sel],
            samples.hyper_draws[name][sel],
        )[0]
        for name in field_names
    }
    eta_curves = None
    if "eta" in samples.delta_draws:
        eta_curves = _conditional_curves(
            samples.knots, x_unit, samples.delta_draws["eta"][sel],
            samples.hyper_draws["eta"][sel],
        )[0]

    means = np.empty((sel.size, G))
    vars_ = np.empty((sel.size, G))
    for j, t in enumerate(sel):
        if samples.theta_draws is not None:
            theta = np.tile(samples.theta_draws[t], (G, 1))
        else:
            theta = np.tile(samples.base_theta, (G, 1))
        for k, name in enumerate(field_names):
            theta[:, k] += drift[name][j]
        Q = np.hstack([x_unit, theta]) if dtheta else x_unit
        m, v = _predict_std(emulator, Q)
        if eta_curves is not None:
            m = m + eta_curves[j]
        means[j] = m
        vars_[j] = v + samples.sigma2_draws[t]

    mean_std = means.mean(axis=0)
    var_std = means.var(axis=0) + vars_.mean(axis=0)
    return PredictiveDistribution(
        mean=samples.y_shift + samples.y_scale * mean_std,
        variance=(samples.y_scale**2) * var_std,
    )
