"""Posterior summaries, classification, DIC, dynamic prediction and AUC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from .data import Dataset, ModelSpec
from .errors import DomainError, StateError, UndefinedAUCError, UndefinedWeightError
from .mcmc import Chain
from .model import (
    ParamState,
    _logsumexp_rows,
    class_logdens,
    joint_log_likelihood,
    log_membership_probs,
    marginal_log_likelihood,
    row_logdens,
    survival_terms,
)

SUMMARY_FIELDS = ("beta", "tau", "lambda0", "omega", "delta", "xi", "sigma_u")


# ----------------------------------------------------------------------
# Posterior summaries
# ----------------------------------------------------------------------


@dataclass
class PosteriorSummary:
    names: list[str]
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.89

    def to_frame(self) -> pd.DataFrame:
        tail = (1 - self.level) / 2
        return pd.DataFrame(
            {
                "parameter": self.names,
                "mean": self.mean,
                "sd": self.sd,
                f"q{tail:.3f}": self.lower,
                f"q{1 - tail:.3f}": self.upper,
            }
        )

    def covers(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return (self.lower <= values) & (values <= self.upper)


def _flat_names(name, shape):
    if len(shape) == 1:
        return [f"{name}[{i + 1}]" for i in range(shape[0])]
    return [f"{name}[{i + 1},{j + 1}]" for i in range(shape[0]) for j in range(shape[1])]


def flatten_params(state: ParamState, fields=SUMMARY_FIELDS) -> np.ndarray:
    return np.concatenate([np.ravel(getattr(state, f)) for f in fields])


def param_names(state_or_chain, fields=SUMMARY_FIELDS) -> list[str]:
    names = []
    for f in fields:
        if isinstance(state_or_chain, Chain):
            shape = state_or_chain.draws[f].shape[1:]
        else:
            shape = np.shape(getattr(state_or_chain, f))
        names += _flat_names(f, shape)
    return names


def summarize(chain: Chain, level: float = 0.89, fields=SUMMARY_FIELDS) -> PosteriorSummary:
    """Mean, sd and equal-tailed interval of every continuous parameter."""
    if chain.n_post <= 0:
        raise StateError("chain has no post-burn-in draws")
    if not 0 < level < 1:
        raise DomainError("credible level must lie in (0, 1)")
    draws = np.concatenate([chain.post(f).reshape(chain.n_post, -1) for f in fields], axis=1)
    tail = (1 - level) / 2
    lo, hi = np.quantile(draws, [tail, 1 - tail], axis=0)
    return PosteriorSummary(
        names=param_names(chain, fields),
        mean=draws.mean(axis=0),
        sd=draws.std(axis=0, ddof=1) if chain.n_post > 1 else np.zeros(draws.shape[1]),
        lower=lo,
        upper=hi,
        level=level,
    )


# ----------------------------------------------------------------------
# Classification
# ----------------------------------------------------------------------


def membership_from_state(data: Dataset, state: ParamState, spec: ModelSpec) -> np.ndarray:
    """(n, K) class probabilities per visit at fixed parameters.

    Membership prior times the longitudinal density, times the survival
    density at each subject's last visit. Under subject-level labels all
    visits of a subject share one probability vector.
    """
    logp = class_logdens(data, state, spec)
    if spec.subject_level_labels:
        per = np.add.reduceat(logp, data.starts, axis=0)
        per = per - _logsumexp_rows(per)[:, None]
        return np.exp(per)[data.subject]
    return np.exp(logp - _logsumexp_rows(logp)[:, None])


def posterior_membership(data: Dataset, chain: Chain, spec: ModelSpec | None = None) -> np.ndarray:
    """Class probabilities evaluated at the posterior means."""
    spec = spec or chain.spec
    return membership_from_state(data, chain.posterior_mean(), spec)


def assign_labels(probs) -> np.ndarray:
    return np.argmax(np.asarray(probs), axis=1)


def error_rate(assigned, true) -> float:
    """Share of visits whose assigned class differs from the true one."""
    assigned, true = np.asarray(assigned), np.asarray(true)
    if assigned.shape != true.shape:
        raise DomainError("label arrays must have the same shape")
    if assigned.size == 0:
        return 0.0
    return float(np.mean(assigned != true))


def matched_error_rate(assigned, true) -> float:
    """Error rate after the best one-to-one matching of class indices.

    Fitted classes left without a partner (more fitted than true classes,
    or vice versa) count as misclassified.
    """
    assigned, true = np.asarray(assigned, dtype=np.intp), np.asarray(true, dtype=np.intp)
    if assigned.shape != true.shape:
        raise DomainError("label arrays must have the same shape")
    if assigned.size == 0:
        return 0.0
    Ka, Kt = assigned.max() + 1, true.max() + 1
    table = np.zeros((Ka, Kt))
    np.add.at(table, (assigned, true), 1)
    rows, cols = linear_sum_assignment(-table)
    return float(1.0 - table[rows, cols].sum() / assigned.size)


# ----------------------------------------------------------------------
# DIC
# ----------------------------------------------------------------------


@dataclass
class DicResult:
    dic: float
    mean_deviance: float
    p_d: float
    deviance_at_mean: float
    variant: str
    formula: str = field(default="")


_DIC_FORMULA = {
    "conditional": "D = -2 log p(y, T, R, U | params); plug-in at posterior means with modal labels",
    "marginal": "D = -2 log p(y, T, U | params) with labels summed out; plug-in at posterior means",
}


def deviance(data: Dataset, state: ParamState, spec: ModelSpec, variant: str = "conditional") -> float:
    if variant == "conditional":
        return -2.0 * joint_log_likelihood(data, state, spec)
    if variant == "marginal":
        return -2.0 * marginal_log_likelihood(data, state, spec)
    raise DomainError(f"unknown DIC variant {variant!r}")


def dic(data: Dataset, chain: Chain, spec: ModelSpec | None = None, variant: str = "conditional") -> DicResult:
    """DIC = mean deviance + p_D, p_D = mean deviance - deviance at the means."""
    spec = spec or chain.spec
    if chain.n_post <= 0:
        raise StateError("chain has no post-burn-in draws")
    devs = np.array([deviance(data, chain.state(i), spec, variant) for i in range(chain.burn_in, len(chain))])
    mean_dev = float(devs.mean())
    at_mean = deviance(data, chain.posterior_mean(), spec, variant)
    p_d = mean_dev - at_mean
    return DicResult(mean_dev + p_d, mean_dev, p_d, at_mean, variant, _DIC_FORMULA[variant])


# ----------------------------------------------------------------------
# Dynamic prediction
# ----------------------------------------------------------------------


def _times(data, t):
    t = np.broadcast_to(np.asarray(t, dtype=float), (data.N,))
    if np.any(t < 0):
        raise DomainError("prediction times must be non-negative")
    return t


def class_conditional_survival(data: Dataset, state: ParamState, spec: ModelSpec, t, dt) -> np.ndarray:
    """(N, K) exp(-[H_ik(t + dt) - H_ik(t)]) for every subject and class."""
    if np.any(np.asarray(dt) < 0):
        raise DomainError("horizon dt must be non-negative")
    t = _times(data, t)
    end = t + np.broadcast_to(np.asarray(dt, dtype=float), t.shape)
    with np.errstate(divide="ignore"):
        _, H_t = survival_terms(data, state, spec, times=t)
        _, H_end = survival_terms(data, state, spec, times=end)
    return np.where((end == t)[:, None], 1.0, np.exp(-(H_end - H_t)))


def conditional_survival(data: Dataset, state: ParamState, spec: ModelSpec, i: int, t: float, dt: float, k: int) -> float:
    """Survival of subject i (0-based) in class k to t + dt given alive at t."""
    sub = data.subset([i])
    st = state.copy()
    st.u = state.u[i : i + 1]
    return float(class_conditional_survival(sub, st, spec, t, dt)[0, k])


def final_visit_weights(data: Dataset, state: ParamState, spec: ModelSpec) -> np.ndarray:
    """(N, K) posterior class probabilities at each subject's last visit."""
    return membership_from_state(data, state, spec)[data.last_row]


def landmark_weights(data: Dataset, state: ParamState, spec: ModelSpec, t) -> np.ndarray:
    """(N, K) class probabilities at the last visit no later than t.

    Uses only the responses observed by t and the fact that the subject
    is still event-free at t, so no follow-up information leaks in.
    Subjects without a visit by t fall back to their first visit's
    membership prior.
    """
    t = _times(data, t)
    logf = row_logdens(data, state.beta, state.tau, state.u)
    log_pi = log_membership_probs(data.X1, state.xi)
    seen = data.visit_time <= t[data.subject]
    with np.errstate(divide="ignore"):
        _, H_t = survival_terms(data, state, spec, times=t)
    out = np.empty((data.N, spec.K))
    for i, (s, c) in enumerate(zip(data.starts, data.counts)):
        rows = np.flatnonzero(seen[s : s + c]) + s
        if rows.size == 0:
            lp = log_pi[s].copy()
        elif spec.subject_level_labels:
            lp = log_pi[s] + logf[rows].sum(axis=0)
        else:
            j = rows[-1]
            lp = log_pi[j] + logf[j]
        lp = lp - H_t[i]
        lp -= lp.max()
        out[i] = np.exp(lp) / np.exp(lp).sum()
    return out


def predictive_survival(
    data: Dataset, state: ParamState, spec: ModelSpec, t, dt, weights=None
) -> np.ndarray:
    """(N,) mixture over classes of conditional survival to t + dt.

    ``weights`` defaults to the final-visit class probabilities.
    """
    surv = class_conditional_survival(data, state, spec, t, dt)
    w = final_visit_weights(data, state, spec) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != surv.shape:
        raise DomainError("weights must have shape (N, K)")
    if np.any(w < 0):
        raise DomainError("weights must be non-negative")
    total = w.sum(axis=1)
    if np.any(total <= 0):
        raise DomainError("each subject needs positive total weight")
    # normalise after mixing so identical class curves pass through unchanged
    return np.clip(np.sum(w * surv, axis=1) / total, 0.0, 1.0)


WEIGHTINGS = ("final", "landmark")


def class_weights(data: Dataset, state: ParamState, spec: ModelSpec, t, weighting: str = "final") -> np.ndarray:
    """Mixture weights for prediction: final-visit membership or landmark filtering at t."""
    if weighting == "final":
        return final_visit_weights(data, state, spec)
    if weighting == "landmark":
        return landmark_weights(data, state, spec, t)
    raise DomainError(f"unknown weighting {weighting!r}; choose from {', '.join(WEIGHTINGS)}")


def prediction_curves(
    data: Dataset, state: ParamState, spec: ModelSpec, t: float, horizons, weights=None, weighting: str = "final"
) -> pd.DataFrame:
    """Long table of predictive survival over a grid of horizons."""
    horizons = np.asarray(horizons, dtype=float)
    if weights is None:
        weights = class_weights(data, state, spec, t, weighting)
    rows = []
    for dt in horizons:
        s = predictive_survival(data, state, spec, t, dt, weights=weights)
        rows.append(pd.DataFrame({"subject": data.subject_ids, "t": t, "dt": dt, "survival": s}))
    return pd.concat(rows, ignore_index=True)


def risk_scores(
    data: Dataset, state: ParamState, spec: ModelSpec, t: float, dt: float, weighting: str = "final"
) -> np.ndarray:
    """1 - predictive survival over (t, t + dt]."""
    w = class_weights(data, state, spec, t, weighting)
    return 1.0 - predictive_survival(data, state, spec, t, dt, weights=w)


# ----------------------------------------------------------------------
# Kaplan-Meier and IPCW AUC
# ----------------------------------------------------------------------


@dataclass
class KaplanMeier:
    """Right-continuous product-limit step function."""

    times: np.ndarray  # distinct event times
    surv: np.ndarray  # value on [times[j], times[j+1])

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        vals = np.where(idx >= 0, self.surv[np.clip(idx, 0, None)] if self.surv.size else 1.0, 1.0)
        return vals if vals.ndim else float(vals)

    def conditional(self, u, s) -> np.ndarray:
        """G(u | s) = G(u) / G(s)."""
        g_s = np.asarray(self(s), dtype=float)
        if np.any(g_s <= 0):
            raise UndefinedWeightError(f"estimated survival is zero at conditioning time {s}")
        return np.asarray(self(u), dtype=float) / g_s


def kaplan_meier(times, events) -> KaplanMeier:
    times = np.asarray(times, dtype=float)
    events = np.asarray(events).astype(bool)
    if times.shape != events.shape:
        raise DomainError("times and events must have the same length")
    if np.any(times <= 0):
        raise DomainError("times must be positive")
    uniq, d = np.unique(times[events], return_counts=True)
    if uniq.size == 0:
        return KaplanMeier(np.zeros(0), np.zeros(0))
    at_risk = times.size - np.searchsorted(np.sort(times), uniq, side="left")
    return KaplanMeier(uniq, np.cumprod(1.0 - d / at_risk))


def ipcw_weights(followup, event, t: float, dt: float, censor_km: KaplanMeier | None = None):
    """Case indicator and inverse-probability-of-censoring weights.

    Controls (T >= t + dt) get 1/G(t + dt | t); observed events in
    [t, t + dt) get 1/G(T | t); everyone else gets weight 0.
    """
    T = np.asarray(followup, dtype=float)
    delta = np.asarray(event).astype(bool)
    km = censor_km or kaplan_meier(T, ~delta)
    case = (T >= t) & (T < t + dt)
    control = T >= t + dt
    w = np.zeros(T.size)
    if np.any(control):
        w[control] = 1.0 / km.conditional(t + dt, t)
    ev = case & delta
    if np.any(ev):
        w[ev] = 1.0 / km.conditional(T[ev], t)
    return case, w


def auc_ipcw(risk, followup, event, t: float, dt: float, censor_km: KaplanMeier | None = None) -> float:
    """Weighted share of (case, control) pairs ordered correctly by risk.

    Ties count as discordant (strict indicator).
    """
    risk = np.asarray(risk, dtype=float)
    if dt <= 0:
        raise DomainError("dt must be positive for AUC")
    case, w = ipcw_weights(followup, event, t, dt, censor_km)
    wc = np.where(case, w, 0.0)
    wk = np.where(~case, w, 0.0)
    denom = wc.sum() * wk.sum()
    if denom <= 0:
        raise UndefinedAUCError(
            f"no weighted case/control pair at t={t}, dt={dt}: "
            f"{int((wc > 0).sum())} cases, {int((wk > 0).sum())} controls"
        )
    ci, ki = np.flatnonzero(wc > 0), np.flatnonzero(wk > 0)
    greater = risk[ci][:, None] > risk[ki][None, :]
    num = (wc[ci][:, None] * wk[ki][None, :] * greater).sum()
    return float(num / denom)
