"""Replicate studies on simulated data: recovery, selection and AUC.

Each study works on a :class:`ReplicateCache`, so one fit of a given
(seed, variant, K) is shared by every study that needs it.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import UndefinedAUCError
from .inference import auc_ipcw, flatten_params, ipcw_weights, param_names, risk_scores
from .mcmc import MCMCConfig
from .model import ParamState
from .simulation import SimDesign, simulate_dataset
from .workflow import BASIC, TIME_VARYING, Fit, SelectionRow, best_by, evaluate_fit, fit_model

log = logging.getLogger(__name__)

RECOVERY_FIELDS = ("beta", "tau", "lambda0", "omega", "delta", "xi")


@dataclass
class ReplicateCache:
    design: SimDesign = field(default_factory=SimDesign)
    config: MCMCConfig = field(default_factory=MCMCConfig)
    reference_class_constraint: bool = False
    _data: dict = field(default_factory=dict, repr=False)
    _fits: dict = field(default_factory=dict, repr=False)
    seconds: dict = field(default_factory=dict)

    def dataset(self, seed: int) -> tuple[Dataset, ParamState]:
        if seed not in self._data:
            self._data[seed] = simulate_dataset(replace(self.design, seed=seed))
        return self._data[seed]

    def fit(self, seed: int, variant: str, K: int) -> Fit:
        key = (seed, variant, K)
        if key not in self._fits:
            data, _ = self.dataset(seed)
            start = time.perf_counter()
            self._fits[key] = fit_model(
                data,
                K,
                variant,
                config=replace(self.config, seed=seed),
                reference_class_constraint=self.reference_class_constraint,
            )
            self.seconds[key] = time.perf_counter() - start
            log.info("fit %s took %.1fs", key, self.seconds[key])
        return self._fits[key]


# ----------------------------------------------------------------------
# recovery
# ----------------------------------------------------------------------


@dataclass
class RecoveryResult:
    names: list[str]
    truth: np.ndarray  # (R, P)
    mean: np.ndarray  # (R, P)
    covered: np.ndarray  # (R, P) bool

    @property
    def coverage_counts(self) -> np.ndarray:
        return self.covered.sum(axis=0)

    @property
    def bias(self) -> np.ndarray:
        return (self.mean - self.truth).mean(axis=0)

    def field_mask(self, prefix: str) -> np.ndarray:
        return np.array([n.split("[")[0] == prefix for n in self.names])


def recovery_study(cache: ReplicateCache, seeds, level: float = 0.89) -> RecoveryResult:
    lo_q, hi_q = (1 - level) / 2, (1 + level) / 2
    truth, mean, covered = [], [], []
    names = None
    for seed in seeds:
        _, true_state = cache.dataset(seed)
        chain = cache.fit(seed, TIME_VARYING, len(true_state.tau)).chain
        post = np.array([flatten_params(chain.state(i), RECOVERY_FIELDS) for i in range(chain.burn_in, len(chain))])
        lo, hi = np.quantile(post, [lo_q, hi_q], axis=0)
        t = flatten_params(true_state, RECOVERY_FIELDS)
        truth.append(t)
        mean.append(post.mean(axis=0))
        covered.append((lo <= t) & (t <= hi))
        names = names or param_names(true_state, RECOVERY_FIELDS)
    return RecoveryResult(names, np.array(truth), np.array(mean), np.array(covered))


# ----------------------------------------------------------------------
# selection
# ----------------------------------------------------------------------

CANDIDATES = tuple((TIME_VARYING, k) for k in (1, 2, 3)) + tuple((BASIC, k) for k in (1, 2, 3, 4))


@dataclass
class SelectionOutcome:
    seed: int
    rows: list[SelectionRow]

    def winner(self, key: str) -> tuple[str, int]:
        best = best_by(self.rows, key)
        return best.variant, best.K


def selection_study(cache: ReplicateCache, seeds, candidates=CANDIDATES, dic_variant: str = "conditional"):
    out = []
    for seed in seeds:
        _, true_state = cache.dataset(seed)
        rows = [evaluate_fit(cache.fit(seed, v, k), true_state.r, dic_variant) for v, k in candidates]
        out.append(SelectionOutcome(seed, rows))
    return out


# ----------------------------------------------------------------------
# prediction
# ----------------------------------------------------------------------


def auc_defined(data: Dataset, t: float, dt: float) -> bool:
    """True when the window holds at least one weighted case and control."""
    try:
        case, w = ipcw_weights(data.followup, data.event, t, dt)
    except ZeroDivisionError:
        return False
    return bool(np.any(w[case] > 0) and np.any(w[~case] > 0))


def evaluable_seeds(cache: ReplicateCache, n: int, t: float, dt: float, start: int = 0, limit: int = 1000) -> list[int]:
    """First n seeds whose simulated data admit an AUC at (t, dt)."""
    seeds = []
    for seed in range(start, start + limit):
        if auc_defined(cache.dataset(seed)[0], t, dt):
            seeds.append(seed)
            if len(seeds) == n:
                return seeds
    raise UndefinedAUCError(f"only {len(seeds)} of {limit} seeds have cases and controls in the window")


@dataclass
class AucComparison:
    seed: int
    time_varying: float
    basic: float


def auc_study(
    cache: ReplicateCache, seeds, t: float = 0.5, dt: float = 0.3, K: int = 2, basic_K: int = 2, weighting: str = "final"
):
    out = []
    for seed in seeds:
        data, _ = cache.dataset(seed)
        vals = []
        for variant, k in ((TIME_VARYING, K), (BASIC, basic_K)):
            fit = cache.fit(seed, variant, k)
            risk = risk_scores(fit.data, fit.chain.posterior_mean(), fit.spec, t, dt, weighting)
            vals.append(auc_ipcw(risk, data.followup, data.event, t, dt))
        out.append(AucComparison(seed, *vals))
    return out
