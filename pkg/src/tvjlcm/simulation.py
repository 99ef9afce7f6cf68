"""Synthetic data from the two-class time-varying design.

Each subject gets a standard-normal baseline covariate X1, a Bernoulli
treatment indicator X3 and bivariate standard-normal random effects.
At every grid time a class is drawn from the multinomial-logit
membership model, then the response from that class's regression.
The event time comes from the hazard of the subject's final observed
class, by inverting the closed-form cumulative hazard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import Dataset
from .errors import DomainError
from .model import SMALL_SLOPE, ParamState


@dataclass(frozen=True)
class ClassParams:
    xi: tuple[float, float]  # membership coefficients on (X1, time)
    beta: tuple[float, float]  # response coefficients on (X1, time)
    tau: float  # residual variance
    lambda0: float  # constant baseline hazard
    w: float  # treatment effect on the hazard
    delta: tuple[float, float]  # association with (U1, U2 * t)


def default_classes() -> tuple[ClassParams, ...]:
    return (
        ClassParams(xi=(0.01, 0.2), beta=(2.0, 0.5), tau=0.1, lambda0=0.2, w=0.5, delta=(-0.5, -0.8)),
        ClassParams(xi=(0.0, 1.0), beta=(4.0, 3.0), tau=0.5, lambda0=0.1, w=0.8, delta=(-1.5, -0.4)),
    )


def default_grid() -> tuple[float, ...]:
    return tuple(round(0.05 * j, 2) for j in range(18))


@dataclass
class SimDesign:
    n_subjects: int = 50
    time_grid: tuple[float, ...] = field(default_factory=default_grid)
    min_visits: int = 6
    classes: tuple[ClassParams, ...] = field(default_factory=default_classes)
    censor_mean: float = 6.0
    study_end: float | None = 1.5  # administrative censoring; None = last grid time
    treatment_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.censor_mean <= 0:
            raise DomainError("censor_mean must be positive")
        grid = np.asarray(self.time_grid, dtype=float)
        if grid.ndim != 1 or grid.size < 1 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
            raise DomainError("time grid must be non-negative and strictly increasing")
        if not 1 <= self.min_visits <= grid.size:
            raise DomainError("min_visits must lie between 1 and the grid length")
        if len({len(c.xi) for c in self.classes} | {2}) != 1:
            raise DomainError("class parameters must use the (X1, time) design")

    @property
    def end(self) -> float:
        return float(self.time_grid[-1]) if self.study_end is None else float(self.study_end)


def invert_survival_time(uniform, x3, u1, u2, lambda0, w) -> float:
    """Event time with H(T) = -log(uniform) for a constant baseline hazard.

    The log-hazard is log(lambda0) + w*x3 + u1 + u2*t, where u1 and u2
    are the association-weighted random effects (delta_1*U_1, delta_2*U_2).
    Returns inf when the cumulative hazard stays below -log(uniform).
    """
    if not 0.0 < uniform < 1.0:
        raise DomainError("uniform draw must lie in (0, 1)")
    if not lambda0 > 0:
        raise DomainError("baseline hazard must be positive")
    target = -math.log(uniform)
    scale = lambda0 * math.exp(w * x3 + u1)
    if abs(u2) < SMALL_SLOPE:
        return target / scale
    arg = u2 * target / scale
    if arg <= -1.0:
        return math.inf
    return math.log1p(arg) / u2


def _softmax(a):
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def simulate_dataset(design: SimDesign) -> tuple[Dataset, ParamState]:
    """Draw one dataset and the exact parameter state that generated it."""
    rng = np.random.default_rng(design.seed)
    grid = np.asarray(design.time_grid, dtype=float)
    K = len(design.classes)
    xi = np.array([c.xi for c in design.classes])
    beta = np.array([c.beta for c in design.classes])
    tau = np.array([c.tau for c in design.classes])
    lam = np.array([c.lambda0 for c in design.classes])
    w = np.array([c.w for c in design.classes])
    delta = np.array([c.delta for c in design.classes])

    rows = {k: [] for k in ("subject", "time", "y", "x1", "r")}
    followup, event, x3s, us = [], [], [], []
    for i in range(design.n_subjects):
        while True:
            x1 = rng.standard_normal()
            x3 = float(rng.random() < design.treatment_prob)
            u = rng.standard_normal(2)
            design_rows = np.column_stack([np.full(grid.size, x1), grid])
            probs = _softmax(design_rows @ xi.T)
            labels = (rng.random(grid.size)[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
            labels = np.minimum(labels, K - 1)
            mean = np.einsum("jp,jp->j", design_rows, beta[labels]) + u[0] + u[1] * grid
            y = mean + np.sqrt(tau[labels]) * rng.standard_normal(grid.size)
            end = min(rng.exponential(design.censor_mean), design.end)
            uniform = rng.random()
            final, T, d = _resolve_followup(grid, labels, end, uniform, x3, u, lam, w, delta)
            if final is None or final + 1 < design.min_visits:
                continue
            break
        keep = slice(0, final + 1)
        rows["subject"].append(np.full(final + 1, i))
        rows["time"].append(grid[keep])
        rows["y"].append(y[keep])
        rows["x1"].append(np.full(final + 1, x1))
        rows["r"].append(labels[keep])
        followup.append(T)
        event.append(d)
        x3s.append(x3)
        us.append(u)

    subject = np.concatenate(rows["subject"])
    time = np.concatenate(rows["time"])
    x1 = np.concatenate(rows["x1"])
    design_mat = np.column_stack([x1, time])
    data = Dataset(
        subject_ids=list(range(1, design.n_subjects + 1)),
        subject=subject,
        visit_time=time,
        y=np.concatenate(rows["y"]),
        X1=design_mat,
        X2=design_mat.copy(),
        Z=np.column_stack([np.ones_like(time), time]),
        followup=np.array(followup),
        event=np.array(event),
        X3=np.array(x3s)[:, None],
    )
    truth = ParamState(
        xi=xi,
        beta=beta,
        omega=w[:, None],
        delta=delta,
        tau=tau,
        lambda0=lam[:, None],
        sigma_u=np.eye(2),
        u=np.array(us),
        r=np.concatenate(rows["r"]),
    )
    return data, truth


def _resolve_followup(grid, labels, end, uniform, x3, u, lam, w, delta):
    """Walk the visit grid until the current class's event time or the
    censoring time falls before the next visit.

    Returns (final visit index, follow-up time, event flag), or
    (None, None, None) when the final class's event time precedes its
    own visit, which has no consistent resolution.
    """
    for j, k in enumerate(labels):
        T = invert_survival_time(uniform, x3, delta[k, 0] * u[0], delta[k, 1] * u[1], lam[k], w[k])
        obs = min(T, end)
        if obs < grid[j]:
            return None, None, None
        if j + 1 == grid.size or obs < grid[j + 1]:
            return j, obs, int(T <= end)
    raise AssertionError("unreachable")


def jump_pattern(labels) -> str:
    """'none', 'single' or 'multiple' class changes along a label path."""
    labels = np.asarray(labels)
    changes = int(np.sum(labels[1:] != labels[:-1]))
    if changes == 0:
        return "none"
    return "single" if changes == 1 else "multiple"


def subject_jump_patterns(data: Dataset, labels) -> list[str]:
    labels = np.asarray(labels)
    return [jump_pattern(labels[s : s + c]) for s, c in zip(data.starts, data.counts)]


# ----------------------------------------------------------------------
# AIDS-schema synthetic data
# ----------------------------------------------------------------------

AIDS_VISITS = (0.0, 2.0, 6.0, 12.0, 18.0)


def simulate_aids_like(n_subjects: int = 467, seed: int = 0, visit_prob: float = 0.8) -> pd.DataFrame:
    """Long-format table with the columns of the ddI/ddC trial data.

    Two CD4 levels with time-varying membership; the low-CD4 class has
    the higher death hazard. Visits after baseline are observed with
    probability ``visit_prob``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for pid in range(1, n_subjects + 1):
        drug = rng.choice(["ddC", "ddI"])
        gender = rng.choice(["female", "male"], p=[0.2, 0.8])
        prev = rng.choice(["AIDS", "noAIDS"], p=[0.65, 0.35])
        azt = rng.choice(["failure", "intolerance"], p=[0.4, 0.6])
        u = rng.normal(0.0, [1.5, 0.05])
        is_aids = prev == "AIDS"
        # membership: logit of the high class declines with time
        logit_high = 0.8 - 1.2 * is_aids - 0.03 * np.array(AIDS_VISITS)
        high = rng.random(len(AIDS_VISITS)) < 1.0 / (1.0 + np.exp(-logit_high))
        level = np.where(high, 11.0, 5.0) - 0.15 * np.array(AIDS_VISITS) - 1.5 * is_aids
        cd4 = np.maximum(level + u[0] + u[1] * np.array(AIDS_VISITS) + rng.normal(0, 1.8, len(AIDS_VISITS)), 0.0)
        # hazard per month from the class at baseline, with covariate effects
        rate = (0.012 if high[0] else 0.035) * np.exp(0.6 * is_aids + 0.2 * (azt == "failure") - 0.25 * u[0])
        death_time = rng.exponential(1.0 / rate)
        censor = rng.uniform(12.0, 21.5)
        T = max(min(death_time, censor), 0.1)
        death = int(death_time <= censor)
        for j, t in enumerate(AIDS_VISITS):
            if t > T:
                break
            if j > 0 and rng.random() > visit_prob:
                continue
            out.append(
                dict(
                    patient=pid,
                    Time=round(T, 4),
                    death=death,
                    CD4=round(float(cd4[j]), 4),
                    obstime=t,
                    drug=drug,
                    gender=gender,
                    prevOI=prev,
                    AZT=azt,
                )
            )
    return pd.DataFrame(out)
