"""Hybrid Gibbs / adaptive-Metropolis sampler.

One sweep updates, in order: latent labels, beta (conjugate normal),
Sigma_u (conjugate inverse-Wishart), the joint AM block over
(omega, delta, xi, tau, lambda) and finally the per-subject AM blocks
for the random effects. With ``gibbs_tau_lambda`` the residual
variances and hazard steps get their conjugate updates instead and
leave the AM block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import gammaln
from scipy.stats import invwishart

from .am import AmState, am_accept, am_propose
from .data import Dataset, ModelSpec
from .errors import NumericError, StateError
from .model import (
    LOG_2PI,
    _logsumexp_rows,
    ParamState,
    Priors,
    class_logdens,
    exp_integral,
    log_membership_probs,
    mvn_logpdf_zero_mean,
    subject_survival_logdens,
    survival_logdens,
)

log = logging.getLogger(__name__)


@dataclass
class MCMCConfig:
    iterations: int = 5000
    burn_in: int = 2000
    seed: int = 0
    gibbs_tau_lambda: bool = False
    am_sigma2: float = 2.38**2
    am_alpha: float = 0.05
    am_ridge: float = 1e-8
    relabel: bool = True
    relabel_index: int | None = None  # beta column ordering the classes
    theta_steps: int = 6  # AM steps on the theta block per sweep
    joint_beta_u: bool = True  # extra collapsed (beta, U) move per sweep
    collapse_labels: bool = True  # theta target sums the labels out
    refine_init: bool = True  # start U at BLUPs rather than zero
    am_restarts: tuple[int, ...] = (200, 500)  # sweeps where AM history is dropped

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must be smaller than iterations")


# ----------------------------------------------------------------------
# Conjugate full conditionals
# ----------------------------------------------------------------------


def _cho(matrix, what):
    try:
        return linalg.cho_factor(matrix, lower=True)
    except linalg.LinAlgError as exc:
        cond = np.linalg.cond(matrix)
        raise NumericError(f"{what} is not positive definite (condition number {cond:.3g})") from exc


def beta_conditional(k: int, data: Dataset, state: ParamState, priors: Priors):
    """Mean and covariance of beta_k given everything else.

    With no visit assigned to class k this is the prior.
    """
    mask = state.r == k
    if not np.any(mask):
        return priors.beta_mean.copy(), priors.beta_cov.copy()
    prior_prec = np.linalg.inv(priors.beta_cov)
    X = data.X2[mask]
    resid = data.y[mask] - np.einsum("nq,nq->n", data.Z[mask], state.u[data.subject[mask]])
    tau = state.tau[k]
    A = X.T @ X / tau + prior_prec
    B = X.T @ resid / tau + prior_prec @ priors.beta_mean
    c = _cho(A, "beta precision")
    cov = linalg.cho_solve(c, np.eye(A.shape[0]))
    return linalg.cho_solve(c, B), 0.5 * (cov + cov.T)


def sample_beta(k, data, state, priors, rng) -> np.ndarray:
    mean, cov = beta_conditional(k, data, state, priors)
    L = np.linalg.cholesky(cov)
    return mean + L @ rng.standard_normal(mean.shape[0])


def class_step_exposure(k: int, data: Dataset, state: ParamState, spec: ModelSpec) -> np.ndarray:
    """(N, S) integral of exp(linear predictor) over each step of class k."""
    T = data.followup
    if spec.q > 2:
        raise NotImplementedError("conjugate hazard update requires q <= 2")
    a = data.X3 @ state.omega[k] + state.delta[k, 0] * state.u[:, 0]
    b = state.delta[k, 1] * state.u[:, 1] if spec.q == 2 else np.zeros(data.N)
    knots = spec.knots[k]
    out = np.zeros((data.N, spec.n_steps))
    for s in range(spec.n_steps):
        lo = knots[s]
        hi = knots[s + 1] if s + 1 < spec.n_steps else np.inf
        active = T > lo
        if np.any(active):
            out[active, s] = exp_integral(a[active], b[active], lo, np.minimum(T[active], hi))
    return out


def lambda_conditional(k: int, s: int, data: Dataset, state: ParamState, spec: ModelSpec, priors: Priors):
    """Shape and rate of the Gamma conditional of step s of class k.

    Subjects belong to the class of their final visit. Without members
    the result is the prior.
    """
    members = state.r[data.last_row] == k
    if not np.any(members):
        return priors.lambda_shape, priors.lambda_rate
    sub = np.flatnonzero(members)
    knots = spec.knots[k]
    T = data.followup[sub]
    step = np.clip(np.searchsorted(knots, T, side="left") - 1, 0, spec.n_steps - 1)
    events = np.sum((data.event[sub] == 1) & (step == s))
    exposure = class_step_exposure(k, data, state, spec)[sub, s].sum()
    return priors.lambda_shape + events, priors.lambda_rate + exposure


def sample_lambda_step(k, s, data, state, spec, priors, rng) -> float:
    shape, rate = lambda_conditional(k, s, data, state, spec, priors)
    return rng.gamma(shape) / rate


def sigma_u_conditional(state: ParamState, priors: Priors):
    """Degrees of freedom and scale matrix of the pooled inverse-Wishart."""
    u = state.u
    return priors.sigma_df + u.shape[0], priors.sigma_scale + u.T @ u


def sample_sigma_u(state, priors, rng) -> np.ndarray:
    df, scale = sigma_u_conditional(state, priors)
    _cho(scale, "inverse-Wishart scale")
    draw = np.atleast_2d(invwishart.rvs(df=df, scale=scale, random_state=rng))
    return 0.5 * (draw + draw.T)


def tau_conditional(k: int, data: Dataset, state: ParamState, priors: Priors):
    """Shape and rate of the inverse-gamma conditional of tau_k."""
    mask = state.r == k
    if not np.any(mask):
        return priors.tau_shape, priors.tau_rate
    resid = (
        data.y[mask]
        - data.X2[mask] @ state.beta[k]
        - np.einsum("nq,nq->n", data.Z[mask], state.u[data.subject[mask]])
    )
    return priors.tau_shape + mask.sum() / 2.0, priors.tau_rate + 0.5 * resid @ resid


def sample_tau(k, data, state, priors, rng) -> float:
    shape, rate = tau_conditional(k, data, state, priors)
    return rate / rng.gamma(shape)


def label_logprobs(data: Dataset, state: ParamState, spec: ModelSpec) -> np.ndarray:
    """Normalised log posterior label probabilities.

    Shape (n, K) for visit-level labels, (N, K) for subject-level ones.
    """
    logp = class_logdens(data, state, spec)
    if spec.subject_level_labels:
        logp = np.add.reduceat(logp, data.starts, axis=0)
    m = logp.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        bad = int(np.flatnonzero(~np.isfinite(m[:, 0]))[0])
        raise StateError(f"all class probabilities vanish for row {bad}")
    logp = logp - m
    return logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))


def sample_labels(data: Dataset, state: ParamState, spec: ModelSpec, rng) -> np.ndarray:
    if data.n == 0:
        return np.zeros(0, dtype=np.intp)
    if spec.K == 1:
        return np.zeros(data.n, dtype=np.intp)
    p = np.exp(label_logprobs(data, state, spec))
    cdf = np.cumsum(p, axis=1)
    draw = rng.random(p.shape[0])[:, None]
    labels = np.minimum((draw > cdf).sum(axis=1), spec.K - 1)
    if spec.subject_level_labels:
        labels = labels[data.subject]
    return labels.astype(np.intp)


def beta_u_conditional(data: Dataset, state: ParamState, priors: Priors):
    """Joint Gaussian of (beta, U) from the longitudinal part and priors.

    The random effects are integrated out per subject (Woodbury) to get
    the marginal precision of the stacked class coefficients; U_i given
    beta is then Gaussian with per-subject precision C_i.
    Returns (beta mean, beta cov, C_inv (N,q,q), ZtWX (N,q,P), ZtWy (N,q)).
    """
    K, p = state.beta.shape
    q = data.q
    P = K * p
    r = state.r
    w = 1.0 / state.tau[r]
    Xr = np.zeros((data.n, K, p))
    Xr[np.arange(data.n), r] = data.X2
    Xr = Xr.reshape(data.n, P)
    Zw = data.Z * w[:, None]
    starts = data.starts
    ZtWZ = np.add.reduceat(Zw[:, :, None] * data.Z[:, None, :], starts, axis=0)
    ZtWX = np.add.reduceat(Zw[:, :, None] * Xr[:, None, :], starts, axis=0)
    ZtWy = np.add.reduceat(Zw * data.y[:, None], starts, axis=0)
    XtWX = (Xr * w[:, None]).T @ Xr
    XtWy = (Xr * w[:, None]).T @ data.y
    C = np.linalg.inv(state.sigma_u)[None] + ZtWZ
    C_inv = np.linalg.inv(C)
    CiZX = C_inv @ ZtWX  # (N, q, P)
    prior_prec = np.linalg.inv(priors.beta_cov)
    prec = XtWX - np.einsum("nqa,nqb->ab", ZtWX, CiZX) + np.kron(np.eye(K), prior_prec)
    rhs = XtWy - np.einsum("nqa,nq->a", CiZX, ZtWy) + np.tile(prior_prec @ priors.beta_mean, K)
    c = _cho(0.5 * (prec + prec.T), "joint beta precision")
    cov = linalg.cho_solve(c, np.eye(P))
    return linalg.cho_solve(c, rhs), 0.5 * (cov + cov.T), C_inv, ZtWX, ZtWy


def sample_beta_u(data, state, spec, priors, rng):
    """Independence MH move on (beta, U) using the Gaussian part as proposal.

    The survival factor is the only term the proposal omits, so the
    acceptance ratio reduces to its ratio. Returns (beta, u, accepted).
    """
    K, p = state.beta.shape
    mean, cov, C_inv, ZtWX, ZtWy = beta_u_conditional(data, state, priors)
    b = mean + np.linalg.cholesky(cov) @ rng.standard_normal(mean.size)
    u_mean = np.einsum("nij,nj->ni", C_inv, ZtWy - ZtWX @ b)
    L = np.linalg.cholesky(C_inv)
    u = u_mean + np.einsum("nij,nj->ni", L, rng.standard_normal((data.N, data.q)))
    last = state.r[data.last_row]
    old = subject_survival_logdens(data, state, spec, last).sum()
    new = subject_survival_logdens(data, state, spec, last, u=u).sum()
    if np.log(rng.random()) < new - old:
        return b.reshape(K, p), u, True
    return state.beta, state.u, False


# ----------------------------------------------------------------------
# Adaptive Metropolis blocks
# ----------------------------------------------------------------------


def _log_gamma_pdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x


def _log_invgamma_pdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) - (shape + 1) * np.log(x) - rate / x


class ThetaLayout:
    """Packs (omega, delta, xi, tau, lambda) into one flat vector."""

    def __init__(self, spec: ModelSpec, with_tau_lambda: bool = True):
        self.spec = spec
        self.with_tau_lambda = with_tau_lambda
        K = spec.K
        sizes = [
            ("omega", K * spec.dim_x3),
            ("delta", K * spec.q),
            ("xi", spec.free_xi_rows * spec.dim_x1),
        ]
        if with_tau_lambda:
            sizes += [("tau", K), ("lambda0", K * spec.n_steps)]
        self.slices = {}
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.dim = start
        self.normal = slice(0, self.slices["xi"].stop)

    def pack(self, state: ParamState) -> np.ndarray:
        parts = [state.omega.ravel(), state.delta.ravel(), state.xi[: self.spec.free_xi_rows].ravel()]
        if self.with_tau_lambda:
            parts += [state.tau, state.lambda0.ravel()]
        return np.concatenate(parts)

    def unpack(self, vec, state: ParamState) -> ParamState:
        spec = self.spec
        out = ParamState.__new__(ParamState)
        out.__dict__.update(state.__dict__)
        out.omega = vec[self.slices["omega"]].reshape(spec.K, spec.dim_x3)
        out.delta = vec[self.slices["delta"]].reshape(spec.K, spec.q)
        xi = np.zeros((spec.K, spec.dim_x1))
        xi[: spec.free_xi_rows] = vec[self.slices["xi"]].reshape(spec.free_xi_rows, spec.dim_x1)
        out.xi = xi
        if self.with_tau_lambda:
            out.tau = vec[self.slices["tau"]].copy()
            out.lambda0 = vec[self.slices["lambda0"]].reshape(spec.K, spec.n_steps)
        return out

    def names(self) -> list[str]:
        spec = self.spec
        out = [f"omega[{k},{j}]" for k in range(spec.K) for j in range(spec.dim_x3)]
        out += [f"delta[{k},{j}]" for k in range(spec.K) for j in range(spec.q)]
        out += [f"xi[{k},{j}]" for k in range(spec.free_xi_rows) for j in range(spec.dim_x1)]
        if self.with_tau_lambda:
            out += [f"tau[{k}]" for k in range(spec.K)]
            out += [f"lambda0[{k},{s}]" for k in range(spec.K) for s in range(spec.n_steps)]
        return out


class ThetaTarget:
    """Log full conditional of the theta block with beta, U and labels fixed.

    Terms constant in theta (the random-effect density, longitudinal
    residuals' dependence on beta and U) are precomputed per sweep.
    """

    def __init__(self, data, state, spec, priors, layout: ThetaLayout):
        self.data, self.state, self.spec, self.priors, self.layout = data, state, spec, priors, layout
        r = state.r
        resid = (
            data.y
            - np.einsum("np,np->n", data.X2, state.beta[r])
            - np.einsum("nq,nq->n", data.Z, state.u[data.subject])
        )
        self.n_k = np.bincount(r, minlength=spec.K)
        self.ssr_k = np.bincount(r, weights=resid * resid, minlength=spec.K)
        rows = data.first_row if spec.subject_level_labels else np.arange(data.n)
        self.memb_rows = rows
        self.memb_labels = r[rows]
        self.memb_X = data.X1[rows]
        self.last_class = r[data.last_row]

    def __call__(self, vec) -> float:
        lay, pr = self.layout, self.priors
        st = lay.unpack(vec, self.state)
        if lay.with_tau_lambda:
            if np.any(st.tau <= 0) or np.any(st.lambda0 <= 0):
                return -np.inf
        total = 0.0
        if lay.with_tau_lambda:
            tau = st.tau
            total += -0.5 * np.sum(self.n_k * (LOG_2PI + np.log(tau)) + self.ssr_k / tau)
            total += np.sum(_log_invgamma_pdf(tau, pr.tau_shape, pr.tau_rate))
            total += np.sum(_log_gamma_pdf(st.lambda0, pr.lambda_shape, pr.lambda_rate))
        if self.spec.K > 1 and self.memb_X.shape[0]:
            lp = log_membership_probs(self.memb_X, st.xi)
            total += lp[np.arange(lp.shape[0]), self.memb_labels].sum()
        if self.data.N:
            total += subject_survival_logdens(self.data, st, self.spec, self.last_class).sum()
        theta_p = vec[lay.normal]
        sd = pr.am_normal_sd
        total += -0.5 * np.sum(theta_p * theta_p) / sd**2 - theta_p.size * (0.5 * LOG_2PI + np.log(sd))
        return float(total)


class CollapsedThetaTarget:
    """Log density of the theta block given beta and U with labels summed out.

    Drawing theta from this and then the labels from their conditional is
    a joint (theta, labels) update, which avoids the slow interplay of
    the membership coefficients with sampled labels.
    """

    def __init__(self, data, state, spec, priors, layout: ThetaLayout):
        self.data, self.state, self.spec, self.priors, self.layout = data, state, spec, priors, layout
        mean = data.X2 @ state.beta.T + np.einsum("nq,nq->n", data.Z, state.u[data.subject])[:, None]
        self.sq = (data.y[:, None] - mean) ** 2  # (n, K)
        if not layout.with_tau_lambda:
            self.rows = -0.5 * (LOG_2PI + np.log(state.tau) + self.sq / state.tau)

    def __call__(self, vec) -> float:
        lay, pr, d, spec = self.layout, self.priors, self.data, self.spec
        st = lay.unpack(vec, self.state)
        total = 0.0
        if lay.with_tau_lambda:
            if np.any(st.tau <= 0) or np.any(st.lambda0 <= 0):
                return -np.inf
            logp = -0.5 * (LOG_2PI + np.log(st.tau) + self.sq / st.tau)
            total += np.sum(_log_invgamma_pdf(st.tau, pr.tau_shape, pr.tau_rate))
            total += np.sum(_log_gamma_pdf(st.lambda0, pr.lambda_shape, pr.lambda_rate))
        else:
            logp = self.rows.copy()
        surv = survival_logdens(d, st, spec) if d.N else np.zeros((0, spec.K))
        if spec.subject_level_labels:
            per = np.add.reduceat(logp, d.starts, axis=0) + surv
            per += log_membership_probs(d.X1[d.first_row], st.xi)
            total += _logsumexp_rows(per).sum()
        else:
            logp += log_membership_probs(d.X1, st.xi)
            logp[d.last_row] += surv
            total += _logsumexp_rows(logp).sum()
        theta_p = vec[lay.normal]
        sd = pr.am_normal_sd
        total += -0.5 * np.sum(theta_p * theta_p) / sd**2 - theta_p.size * (0.5 * LOG_2PI + np.log(sd))
        return float(total) if np.isfinite(total) else -np.inf


class RandomEffectTarget:
    """Per-subject log full conditional of U_i; vectorised over subjects."""

    def __init__(self, data, state, spec):
        self.data, self.state, self.spec = data, state, spec
        r = state.r
        self.base = data.y - np.einsum("np,np->n", data.X2, state.beta[r])
        self.inv_tau = 1.0 / state.tau[r]
        self.last_class = r[data.last_row]

    def __call__(self, u) -> np.ndarray:
        d = self.data
        u = np.asarray(u).reshape(d.N, self.spec.q)
        resid = self.base - np.einsum("nq,nq->n", d.Z, u[d.subject])
        out = np.bincount(d.subject, weights=-0.5 * resid * resid * self.inv_tau, minlength=d.N)
        out += subject_survival_logdens(d, self.state, self.spec, self.last_class, u=u)
        out += mvn_logpdf_zero_mean(u, self.state.sigma_u)
        return out


# ----------------------------------------------------------------------
# Chain container
# ----------------------------------------------------------------------

_DRAW_FIELDS = ("xi", "beta", "omega", "delta", "tau", "lambda0", "sigma_u", "u", "r")


@dataclass
class Chain:
    """All recorded sweeps plus sampler bookkeeping."""

    spec: ModelSpec
    draws: dict
    burn_in: int
    seed: int
    acceptance: dict = field(default_factory=dict)  # block -> [accepted, proposed]
    am_trace: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self) and not 0 <= self.burn_in < len(self):
            raise StateError("burn-in must be smaller than the number of draws")

    def __len__(self) -> int:
        return int(self.draws["beta"].shape[0]) if "beta" in self.draws else 0

    def state(self, i: int) -> ParamState:
        return ParamState(**{f: self.draws[f][i] for f in _DRAW_FIELDS})

    def __iter__(self):
        return (self.state(i) for i in range(len(self)))

    def post(self, name: str) -> np.ndarray:
        return self.draws[name][self.burn_in:]

    @property
    def n_post(self) -> int:
        return len(self) - self.burn_in

    def acceptance_rates(self) -> dict:
        return {b: (a / p if p else float("nan")) for b, (a, p) in self.acceptance.items()}

    def label_frequencies(self) -> np.ndarray:
        """(n, K) post-burn-in frequency of each label at each visit."""
        r = self.post("r")
        return np.stack([(r == k).mean(axis=0) for k in range(self.spec.K)], axis=1)

    def posterior_mean(self) -> ParamState:
        """Posterior means of all continuous quantities, modal labels."""
        if self.n_post <= 0:
            raise StateError("chain has no post-burn-in draws")
        kw = {f: self.post(f).mean(axis=0) for f in _DRAW_FIELDS if f != "r"}
        freq = self.label_frequencies()
        kw["r"] = np.argmax(freq, axis=1)
        return ParamState(**kw)


def relabel_chain(chain: Chain, index: int) -> Chain:
    """Permute classes within each draw so beta[:, index] is ascending."""
    spec = chain.spec
    K = spec.K
    if K == 1:
        return chain
    if not np.all(spec.knots == spec.knots[0]):
        log.warning("class-specific knot grids; relabelling skipped")
        return chain
    d = {f: np.array(v, copy=True) for f, v in chain.draws.items()}
    order = np.argsort(d["beta"][:, :, index], axis=1, kind="stable")  # (M, K) new -> old
    rows = np.arange(len(chain))[:, None]
    for name in ("xi", "beta", "omega", "delta", "tau", "lambda0"):
        d[name] = d[name][rows, order]
    if spec.reference_class_constraint:
        d["xi"] = d["xi"] - d["xi"][:, -1:, :]
    inverse = np.argsort(order, axis=1)  # old -> new
    d["r"] = np.take_along_axis(inverse, d["r"].astype(np.intp), axis=1).astype(chain.draws["r"].dtype)
    meta = dict(chain.meta)
    meta["relabel"] = f"ascending beta[:,{index}]"
    return Chain(spec, d, chain.burn_in, chain.seed, dict(chain.acceptance), chain.am_trace, meta)


# ----------------------------------------------------------------------
# Initialisation and the driver
# ----------------------------------------------------------------------


def _kmeans_1d(x: np.ndarray, K: int, iters: int = 100) -> np.ndarray:
    centers = np.quantile(x, (np.arange(K) + 0.5) / K)
    labels = np.zeros(x.size, dtype=np.intp)
    for _ in range(iters):
        labels = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        new = np.array([x[labels == k].mean() if np.any(labels == k) else centers[k] for k in range(K)])
        if np.allclose(new, centers):
            break
        centers = new
    order = np.argsort(centers)
    return np.argsort(order)[labels]


def initial_state(data: Dataset, spec: ModelSpec, refine: bool = True) -> ParamState:
    """Deterministic start: k-means on subject mean responses.

    With ``refine`` the random effects start at their BLUPs and beta, tau
    are refitted around them; otherwise U starts at zero.
    """
    K = spec.K
    subj_mean = np.add.reduceat(data.y, data.starts) / data.counts if data.N else np.zeros(0)
    cluster = _kmeans_1d(subj_mean, K) if data.N else np.zeros(0, dtype=np.intp)
    r = cluster[data.subject] if data.n else np.zeros(0, dtype=np.intp)
    pooled = np.linalg.lstsq(data.X2, data.y, rcond=None)[0] if data.n else np.zeros(spec.dim_x2)
    beta = np.zeros((K, spec.dim_x2))
    tau = np.ones(K)
    for k in range(K):
        rows = r == k
        if rows.sum() > spec.dim_x2:
            beta[k] = np.linalg.lstsq(data.X2[rows], data.y[rows], rcond=None)[0]
            res = data.y[rows] - data.X2[rows] @ beta[k]
        else:
            beta[k] = pooled
            res = data.y - data.X2 @ pooled if data.n else np.ones(2)
        tau[k] = max(float(np.var(res)), 1e-3) if res.size > 1 else 1.0
    u = np.zeros((data.N, spec.q))
    if refine and data.N:
        u, beta, tau = _refine_start(data, r, beta, tau, K)
    lam = np.ones((K, spec.n_steps))
    for k in range(K):
        members = cluster == k
        exposure = data.followup[members].sum() if np.any(members) else data.followup.sum()
        events = data.event[members].sum() if np.any(members) else data.event.sum()
        lam[k] = max(float(events), 0.5) / max(float(exposure), 1e-8)
    return ParamState(
        xi=np.zeros((K, spec.dim_x1)),
        beta=beta,
        omega=np.zeros((K, spec.dim_x3)),
        delta=np.zeros((K, spec.q)),
        tau=tau,
        lambda0=lam,
        sigma_u=np.eye(spec.q),
        u=u,
        r=r,
    )


def _refine_start(data, r, beta, tau, K, rounds=3):
    """A few alternations of random-effect BLUPs and class refits.

    Starting U at zero leaves tau inflated by the between-subject
    variance, which the sampler then takes long to shed.
    """
    q = data.q
    u = np.zeros((data.N, q))
    for _ in range(rounds):
        w = 1.0 / tau[r]
        resid = data.y - np.einsum("np,np->n", data.X2, beta[r])
        Zw = data.Z * w[:, None]
        C = np.eye(q)[None] + np.add.reduceat(Zw[:, :, None] * data.Z[:, None, :], data.starts, axis=0)
        rhs = np.add.reduceat(Zw * resid[:, None], data.starts, axis=0)
        u = np.linalg.solve(C, rhs[:, :, None])[:, :, 0]
        y_adj = data.y - np.einsum("nq,nq->n", data.Z, u[data.subject])
        for k in range(K):
            rows = r == k
            if rows.sum() > data.X2.shape[1]:
                beta[k] = np.linalg.lstsq(data.X2[rows], y_adj[rows], rcond=None)[0]
                res = y_adj[rows] - data.X2[rows] @ beta[k]
                tau[k] = max(float(np.var(res)), 1e-3)
    return u, beta, tau


def _theta_block(data, state, spec, priors, layout, am, config, rng, acceptance, it, target_cls):
    target = target_cls(data, state, spec, priors, layout)
    cur = layout.pack(state)
    cur_logp = np.array([target(cur)])
    if not np.isfinite(cur_logp[0]):
        raise StateError(f"non-finite log target at draw {it}")
    for _ in range(config.theta_steps):
        prop = am_propose(cur, am, rng)
        acc, cur, cur_logp = am_accept(lambda v: np.array([target(v.reshape(-1))]), cur, cur_logp, prop, rng)
        acceptance["theta"][0] += int(acc[0])
        acceptance["theta"][1] += 1
        am.update(cur)
    upd = layout.unpack(cur, state)
    state.omega, state.delta, state.xi = upd.omega.copy(), upd.delta.copy(), np.array(upd.xi)
    state.tau, state.lambda0 = np.array(upd.tau), np.array(upd.lambda0)


def run_chain(
    data: Dataset,
    spec: ModelSpec,
    priors: Priors | None = None,
    config: MCMCConfig | None = None,
    seed: int | None = None,
    init: ParamState | None = None,
) -> Chain:
    """Run the sampler; deterministic given the seed."""
    spec.check(data)
    priors = priors or Priors.default(spec)
    config = config or MCMCConfig()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    state = (init or initial_state(data, spec, refine=config.refine_init)).copy()
    state.validate(spec, data)

    layout = ThetaLayout(spec, with_tau_lambda=not config.gibbs_tau_lambda)
    am_theta = AmState(layout.dim, sigma2=config.am_sigma2, alpha_prop=config.am_alpha, ridge=config.am_ridge)
    am_theta.update(layout.pack(state))
    am_u = AmState(spec.q, batch=data.N, sigma2=config.am_sigma2, alpha_prop=config.am_alpha, ridge=config.am_ridge)
    am_u.update(state.u)

    M = config.iterations
    label_dtype = np.int8 if spec.K < 128 else np.int32
    draws = {
        "xi": np.empty((M,) + state.xi.shape),
        "beta": np.empty((M,) + state.beta.shape),
        "omega": np.empty((M,) + state.omega.shape),
        "delta": np.empty((M,) + state.delta.shape),
        "tau": np.empty((M, spec.K)),
        "lambda0": np.empty((M,) + state.lambda0.shape),
        "sigma_u": np.empty((M, spec.q, spec.q)),
        "u": np.empty((M, data.N, spec.q)),
        "r": np.empty((M, data.n), dtype=label_dtype),
    }
    acceptance = {"theta": [0, 0], "u": [0, 0], "beta_u": [0, 0]}
    am_trace = np.empty(M)

    restarts = {t for t in config.am_restarts if t < config.burn_in}
    for it in range(M):
        if it in restarts:
            am_theta = AmState(layout.dim, sigma2=config.am_sigma2, alpha_prop=config.am_alpha, ridge=config.am_ridge)
            am_theta.update(layout.pack(state))
            am_u = AmState(spec.q, batch=data.N, sigma2=config.am_sigma2, alpha_prop=config.am_alpha, ridge=config.am_ridge)
            am_u.update(state.u)
        if config.collapse_labels:
            _theta_block(data, state, spec, priors, layout, am_theta, config, rng, acceptance, it, CollapsedThetaTarget)
        state.r = sample_labels(data, state, spec, rng)
        if config.joint_beta_u and data.N:
            state.beta, state.u, ok = sample_beta_u(data, state, spec, priors, rng)
            state.beta = np.array(state.beta)
            acceptance["beta_u"][0] += int(ok)
            acceptance["beta_u"][1] += 1
        for k in range(spec.K):
            state.beta[k] = sample_beta(k, data, state, priors, rng)
        state.sigma_u = sample_sigma_u(state, priors, rng)
        if config.gibbs_tau_lambda:
            for k in range(spec.K):
                state.tau[k] = sample_tau(k, data, state, priors, rng)
                for s in range(spec.n_steps):
                    state.lambda0[k, s] = sample_lambda_step(k, s, data, state, spec, priors, rng)

        if not config.collapse_labels:
            _theta_block(data, state, spec, priors, layout, am_theta, config, rng, acceptance, it, ThetaTarget)

        if data.N:
            u_target = RandomEffectTarget(data, state, spec)
            u_logp = u_target(state.u)
            if not np.all(np.isfinite(u_logp)):
                raise StateError(f"non-finite random-effect target at draw {it}")
            u_prop = am_propose(state.u, am_u, rng)
            acc_u, state.u, _ = am_accept(u_target, state.u, u_logp, u_prop, rng)
            acceptance["u"][0] += int(acc_u.sum())
            acceptance["u"][1] += data.N
            am_u.update(state.u)

        for name in draws:
            draws[name][it] = getattr(state, name)
        am_trace[it] = np.trace(am_theta.empirical_cov()[0])

    chain = Chain(
        spec,
        draws,
        config.burn_in,
        seed,
        acceptance,
        am_trace,
        meta={"relabel": "none", "gibbs_tau_lambda": config.gibbs_tau_lambda},
    )
    if config.relabel and spec.K > 1:
        index = config.relabel_index
        if index is None:
            index = 1 if spec.dim_x2 > 1 else 0
        chain = relabel_chain(chain, index)
    return chain
