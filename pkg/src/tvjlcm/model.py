"""Submodel densities and the complete-data joint likelihood.

Conventions: class labels are 0-based internally, parameters are stored
class-major (row k belongs to class k) and everything is evaluated in
log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate
from scipy.special import gammaln

from .data import Dataset, ModelSpec, time_basis
from .errors import DesignError, DomainError, NumericError, StateError

LOG_2PI = math.log(2.0 * math.pi)
SMALL_SLOPE = 1e-10


@dataclass
class ParamState:
    """One full draw: parameters, random effects and latent labels."""

    xi: np.ndarray  # (K, dim_x1) membership coefficients
    beta: np.ndarray  # (K, dim_x2) longitudinal fixed effects
    omega: np.ndarray  # (K, dim_x3) survival covariate effects
    delta: np.ndarray  # (K, q) association with random effects
    tau: np.ndarray  # (K,) residual variances
    lambda0: np.ndarray  # (K, S) baseline hazard step heights
    sigma_u: np.ndarray  # (q, q) random-effect covariance
    u: np.ndarray  # (N, q) random effects
    r: np.ndarray  # (n,) labels in 0..K-1

    def __post_init__(self):
        for name in ("xi", "beta", "omega", "delta", "lambda0", "sigma_u", "u"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        self.tau = np.asarray(self.tau, dtype=float).reshape(-1)
        self.r = np.asarray(self.r, dtype=np.intp).reshape(-1)

    @property
    def K(self) -> int:
        return self.beta.shape[0]

    def copy(self) -> "ParamState":
        return ParamState(**{f: np.array(getattr(self, f), copy=True) for f in _FIELDS})

    def validate(self, spec: ModelSpec, data: Dataset | None = None) -> None:
        K = spec.K
        shapes = {
            "xi": (K, spec.dim_x1),
            "beta": (K, spec.dim_x2),
            "omega": (K, spec.dim_x3),
            "delta": (K, spec.q),
            "tau": (K,),
            "lambda0": (K, spec.n_steps),
            "sigma_u": (spec.q, spec.q),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise StateError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if np.any(self.tau <= 0):
            raise StateError("residual variances must be positive")
        if np.any(self.lambda0 <= 0):
            raise StateError("baseline hazard steps must be positive")
        if not np.allclose(self.sigma_u, self.sigma_u.T):
            raise StateError("sigma_u must be symmetric")
        if np.linalg.eigvalsh(self.sigma_u).min() <= 0:
            raise StateError("sigma_u must be positive definite")
        if spec.reference_class_constraint and np.any(self.xi[-1] != 0):
            raise StateError("reference class constraint requires xi[K-1] == 0")
        if data is not None:
            if self.u.shape != (data.N, spec.q):
                raise StateError(f"u has shape {self.u.shape}, expected {(data.N, spec.q)}")
            if self.r.shape != (data.n,):
                raise StateError("a latent label is required for every visit")
            if data.n and (self.r.min() < 0 or self.r.max() >= K):
                raise StateError("labels out of range")


_FIELDS = ("xi", "beta", "omega", "delta", "tau", "lambda0", "sigma_u", "u", "r")


@dataclass
class Priors:
    """Hyperparameters; defaults are vague, see ``Priors.default``."""

    beta_mean: np.ndarray
    beta_cov: np.ndarray
    lambda_shape: float = 0.01
    lambda_rate: float = 0.01
    tau_shape: float = 0.01
    tau_rate: float = 0.01
    sigma_df: float = 4.0
    sigma_scale: np.ndarray = field(default_factory=lambda: np.eye(2))
    am_normal_sd: float = 1.0

    def __post_init__(self):
        self.beta_mean = np.asarray(self.beta_mean, dtype=float).reshape(-1)
        self.beta_cov = np.atleast_2d(np.asarray(self.beta_cov, dtype=float))
        self.sigma_scale = np.atleast_2d(np.asarray(self.sigma_scale, dtype=float))
        for name in ("lambda_shape", "lambda_rate", "tau_shape", "tau_rate", "am_normal_sd"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        q = self.sigma_scale.shape[0]
        if not self.sigma_df > q - 1:
            raise DomainError("sigma_df must exceed q - 1")
        for name in ("beta_cov", "sigma_scale"):
            m = getattr(self, name)
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() <= 0:
                raise DomainError(f"{name} must be symmetric positive definite")

    @classmethod
    def default(cls, spec: ModelSpec, **overrides) -> "Priors":
        kw = dict(
            beta_mean=np.zeros(spec.dim_x2),
            beta_cov=100.0 * np.eye(spec.dim_x2),
            sigma_df=spec.q + 2.0,
            sigma_scale=np.eye(spec.q),
        )
        kw.update(overrides)
        return cls(**kw)


# ----------------------------------------------------------------------
# Membership submodel
# ----------------------------------------------------------------------


def membership_probs(design, xi) -> np.ndarray:
    """Multinomial-logit class probabilities.

    ``design`` is the membership covariate vector at one visit (or an
    (n, p) matrix of them); ``xi`` is (K, p). Returns shape (K,) or (n, K).
    """
    return np.exp(log_membership_probs(design, xi))


def log_membership_probs(design, xi) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if design.shape[-1] != xi.shape[1]:
        raise DesignError(
            f"membership design has {design.shape[-1]} columns but xi has {xi.shape[1]}"
        )
    eta = design @ xi.T
    eta = eta - eta.max(axis=-1, keepdims=True)
    return eta - np.log(np.exp(eta).sum(axis=-1, keepdims=True))


# ----------------------------------------------------------------------
# Longitudinal submodel
# ----------------------------------------------------------------------


def longitudinal_logdensity(y, x2, z, beta_k, u_i, tau_k) -> float:
    """log N(y; x2'beta_k + z'u_i, tau_k) for a single visit."""
    if not tau_k > 0:
        raise DomainError("residual variance must be positive")
    resid = y - np.dot(x2, beta_k) - np.dot(z, u_i)
    return -0.5 * (LOG_2PI + math.log(tau_k) + resid * resid / tau_k)


def row_logdens(data: Dataset, beta, tau, u) -> np.ndarray:
    """(n, K) longitudinal log-densities of every row under every class."""
    mean = data.X2 @ beta.T + np.einsum("nq,nq->n", data.Z, u[data.subject])[:, None]
    resid = data.y[:, None] - mean
    return -0.5 * (LOG_2PI + np.log(tau) + resid * resid / tau)


# ----------------------------------------------------------------------
# Survival submodel
# ----------------------------------------------------------------------


def exp_integral(a, b, lo, hi):
    """Closed-form integral of exp(a + b*s) for s from lo to hi (hi >= lo)."""
    a, b, lo, hi = (np.asarray(v, dtype=float) for v in (a, b, lo, hi))
    width = hi - lo
    small = np.abs(b) < SMALL_SLOPE
    b_safe = np.where(small, 1.0, b)
    with np.errstate(over="ignore", invalid="ignore"):
        shape = np.where(small, width, np.expm1(b_safe * width) / b_safe)
        return np.exp(a + b * lo) * shape


def _step_bounds(knots_k):
    hi = np.append(knots_k[1:], np.inf)
    return knots_k, hi


def hazard_linear_terms(x3, omega_k, delta_k, u_i):
    """Intercept a and time slope b of the log-hazard, valid for q <= 2."""
    q = np.shape(delta_k)[-1]
    if q > 2:
        raise DesignError("closed-form hazard terms need q <= 2")
    a = np.dot(x3, omega_k) + delta_k[..., 0] * u_i[..., 0]
    b = delta_k[..., 1] * u_i[..., 1] if q == 2 else np.zeros_like(a)
    return a, b


def _step_index(knots_k, t):
    # step s holds t in (knots[s], knots[s+1]]
    return np.clip(np.searchsorted(knots_k, t, side="left") - 1, 0, len(knots_k) - 1)


def log_hazard(t, x3, omega_k, delta_k, u_i, lambda0_k, knots_k) -> float:
    if not t > 0:
        raise DomainError("hazard requires t > 0")
    knots_k = np.asarray(knots_k, dtype=float)
    z = time_basis(t, len(delta_k))
    lp = np.dot(x3, omega_k) + np.dot(z, np.asarray(delta_k) * np.asarray(u_i))
    return float(math.log(np.asarray(lambda0_k)[_step_index(knots_k, t)]) + lp)


def hazard(t, x3, omega_k, delta_k, u_i, lambda0_k, knots_k) -> float:
    """Class-specific hazard at time t > 0."""
    with np.errstate(over="ignore"):
        return float(np.exp(log_hazard(t, x3, omega_k, delta_k, u_i, lambda0_k, knots_k)))


def cumulative_hazard(t, x3, omega_k, delta_k, u_i, lambda0_k, knots_k, rtol=1e-10) -> float:
    """Integrated hazard from 0 to t.

    Uses the closed form when q <= 2 (log-hazard linear in time), else
    adaptive quadrature on each step.
    """
    if not t > 0:
        raise DomainError("cumulative hazard requires t > 0")
    delta_k = np.asarray(delta_k, dtype=float)
    u_i = np.asarray(u_i, dtype=float)
    lam = np.asarray(lambda0_k, dtype=float)
    lo, hi = _step_bounds(np.asarray(knots_k, dtype=float))
    active = t > lo
    upper = np.minimum(t, hi[active])
    if delta_k.shape[0] <= 2:
        a, b = hazard_linear_terms(x3, omega_k, delta_k, u_i)
        return float(np.sum(lam[active] * exp_integral(a, b, lo[active], upper)))
    base = float(np.dot(x3, omega_k))
    du = delta_k * u_i

    def f(s):
        return math.exp(base + float(time_basis(s, len(du)) @ du))

    total = 0.0
    for lam_s, l, h in zip(lam[active], lo[active], upper):
        total += lam_s * integrate.quad(f, l, h, epsrel=rtol, epsabs=0.0, limit=200)[0]
    return total


def survival_logdensity(followup, event, x3, omega_k, delta_k, u_i, lambda0_k, knots_k) -> float:
    """event * log hazard(T) - H(T) for one subject in one class."""
    H = cumulative_hazard(followup, x3, omega_k, delta_k, u_i, lambda0_k, knots_k)
    if event:
        return log_hazard(followup, x3, omega_k, delta_k, u_i, lambda0_k, knots_k) - H
    return -H


def survival_terms(data: Dataset, state: ParamState, spec: ModelSpec, times=None):
    """Log-hazard and cumulative hazard at ``times`` (default follow-up).

    Returns two (N, K) arrays.
    """
    T = data.followup if times is None else np.asarray(times, dtype=float)
    if spec.q > 2:
        return _survival_terms_quad(data, state, spec, T)
    a = data.X3 @ state.omega.T + state.u[:, :1] * state.delta[:, 0]
    b = state.u[:, 1:2] * state.delta[:, 1] if spec.q == 2 else np.zeros_like(a)
    H, idx = _piecewise_integral(a, b, spec.knots, state.lambda0, T)
    lam_at = state.lambda0[np.arange(spec.K), idx]
    with np.errstate(divide="ignore"):
        log_h = np.log(lam_at) + a + b * T[:, None]
    return log_h, H


def _piecewise_integral(a, b, knots, lam, T):
    """Sum over baseline steps of lambda_s * int exp(a + b s) ds up to T.

    ``a``, ``b`` are (N, K) (or (N,) with per-subject knots/lam of shape
    (N, S)); returns the integral and the index of the step holding T.
    """
    lo = knots
    hi = np.concatenate([knots[..., 1:], np.full(knots.shape[:-1] + (1,), np.inf)], axis=-1)
    Tb = T.reshape((-1,) + (1,) * a.ndim)
    upper = np.minimum(Tb, hi)
    width = np.maximum(upper - lo, 0.0)
    active = width > 0
    if lo.shape[-1] == 1:
        integ = exp_integral(a[..., None], b[..., None], lo, lo + width)
    else:
        integ = np.where(active, exp_integral(a[..., None], b[..., None], lo, lo + width), 0.0)
    H = np.sum(lam * integ, axis=-1)
    idx = np.clip((lo < Tb).sum(axis=-1) - 1, 0, lo.shape[-1] - 1)
    return H, idx


def _survival_terms_quad(data, state, spec, T):
    log_h = np.empty((data.N, spec.K))
    H = np.empty((data.N, spec.K))
    for i in range(data.N):
        for k in range(spec.K):
            args = (data.X3[i], state.omega[k], state.delta[k], state.u[i], state.lambda0[k], spec.knots[k])
            H[i, k] = cumulative_hazard(T[i], *args)
            log_h[i, k] = log_hazard(T[i], *args)
    return log_h, H


def step_exposure(data: Dataset, state: ParamState, spec: ModelSpec) -> np.ndarray:
    """(N, K, S) hazard integrals over each step, without the step height."""
    T = data.followup
    out = np.zeros((data.N, spec.K, spec.n_steps))
    unit = state.copy()
    for s in range(spec.n_steps):
        # isolate one step by giving it height 1 and all others 0
        unit.lambda0 = np.zeros_like(state.lambda0)
        unit.lambda0[:, s] = 1.0
        with np.errstate(divide="ignore"):
            _, H = survival_terms(data, unit, spec)
        out[:, :, s] = H
    return out


def event_step(data: Dataset, spec: ModelSpec) -> np.ndarray:
    """(N, K) index of the step containing each follow-up time."""
    return np.stack([_step_index(spec.knots[k], data.followup) for k in range(spec.K)], axis=1)


def subject_survival_logdens(data: Dataset, state: ParamState, spec: ModelSpec, cls, u=None) -> np.ndarray:
    """(N,) survival log-density with subject i evaluated in class cls[i].

    ``u`` overrides the random effects (used for per-subject proposals).
    """
    u = state.u if u is None else u
    cls = np.asarray(cls, dtype=np.intp)
    T = data.followup
    if spec.q > 2:
        out = np.empty(data.N)
        for i in range(data.N):
            k = cls[i]
            out[i] = survival_logdensity(
                T[i], data.event[i], data.X3[i], state.omega[k], state.delta[k], u[i],
                state.lambda0[k], spec.knots[k],
            )
        return out
    delta = state.delta[cls]
    a = np.einsum("np,np->n", data.X3, state.omega[cls]) + delta[:, 0] * u[:, 0]
    b = delta[:, 1] * u[:, 1] if spec.q == 2 else np.zeros_like(a)
    lam = state.lambda0[cls]  # (N, S)
    H, idx = _piecewise_integral(a, b, spec.knots[cls], lam, T)
    with np.errstate(divide="ignore"):
        log_h = np.log(lam[np.arange(data.N), idx]) + a + b * T
    return np.where(data.event == 1, log_h, 0.0) - H


def survival_logdens(data: Dataset, state: ParamState, spec: ModelSpec) -> np.ndarray:
    """(N, K) survival log-density of every subject under every class."""
    log_h, H = survival_terms(data, state, spec)
    return np.where(data.event[:, None] == 1, log_h, 0.0) - H


# ----------------------------------------------------------------------
# Random effects and the joint likelihood
# ----------------------------------------------------------------------


def mvn_logpdf_zero_mean(u, cov) -> np.ndarray:
    """Row-wise log N(u_i; 0, cov) for u of shape (N, q)."""
    u = np.atleast_2d(u)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError("random-effect covariance is not positive definite") from exc
    sol = np.linalg.solve(L, u.T)
    q = cov.shape[0]
    return -0.5 * (q * LOG_2PI + np.sum(sol * sol, axis=0)) - np.sum(np.log(np.diag(L)))


def membership_logprob_rows(data: Dataset, state: ParamState) -> np.ndarray:
    """(n, K) log prior class probabilities per visit."""
    return log_membership_probs(data.X1, state.xi)


def class_logdens(data: Dataset, state: ParamState, spec: ModelSpec, survival: bool = True) -> np.ndarray:
    """(n, K) log P_ijk: membership + longitudinal, + survival at last visits.

    Under subject-level labels the membership term sits on first rows
    only, so that summing a subject's rows counts it once.
    """
    logp = row_logdens(data, state.beta, state.tau, state.u)
    log_pi = membership_logprob_rows(data, state)
    if spec.subject_level_labels:
        logp[data.first_row] += log_pi[data.first_row]
    else:
        logp += log_pi
    if survival and data.N:
        logp[data.last_row] += survival_logdens(data, state, spec)
    return logp


def joint_log_likelihood(
    data: Dataset, state: ParamState, spec: ModelSpec, survival: bool = True
) -> float:
    """Complete-data log-likelihood given labels r and random effects u."""
    if data.N == 0:
        return 0.0
    if state.r.shape != (data.n,):
        raise StateError("a latent label is required for every visit")
    if np.any((state.r < 0) | (state.r >= spec.K)):
        raise StateError("labels out of range")
    if spec.subject_level_labels and np.any(state.r != state.r[data.first_row][data.subject]):
        raise StateError("subject-level model requires constant labels within subject")
    logp = class_logdens(data, state, spec, survival=survival)
    picked = logp[np.arange(data.n), state.r]
    return float(picked.sum() + mvn_logpdf_zero_mean(state.u, state.sigma_u).sum())


def marginal_log_likelihood(data: Dataset, state: ParamState, spec: ModelSpec) -> float:
    """Log-likelihood with the labels summed out (random effects kept)."""
    if data.N == 0:
        return 0.0
    logp = class_logdens(data, state, spec)
    if spec.subject_level_labels:
        per_subject = np.add.reduceat(logp, data.starts, axis=0)
        total = _logsumexp_rows(per_subject).sum()
    else:
        total = _logsumexp_rows(logp).sum()
    return float(total + mvn_logpdf_zero_mean(state.u, state.sigma_u).sum())


def _logsumexp_rows(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def with_params(state: ParamState, **changes) -> ParamState:
    return replace(state.copy(), **changes)
