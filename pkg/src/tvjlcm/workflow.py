"""Fit-and-compare helpers shared by the CLI and the experiment scripts."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, ModelSpec
from .inference import assign_labels, dic, matched_error_rate, posterior_membership
from .mcmc import Chain, MCMCConfig, run_chain
from .model import Priors

TIME_VARYING = "time-varying"
BASIC = "basic"


def time_free_design(data: Dataset) -> Dataset:
    """Keep only membership columns that are constant within every subject."""
    if data.n == 0:
        return data
    keep = []
    for j in range(data.X1.shape[1]):
        col = data.X1[:, j]
        first = col[data.first_row][data.subject]
        if np.array_equal(col, first):
            keep.append(j)
    if not keep:
        # an all-time-varying design still needs one column for xi
        return replace(data, X1=np.ones((data.n, 1)))
    return data.with_membership_design(keep)


@dataclass
class Fit:
    variant: str
    K: int
    data: Dataset
    spec: ModelSpec
    chain: Chain

    @property
    def label(self) -> str:
        return f"{self.variant} K={self.K}"


def fit_model(
    data: Dataset,
    K: int,
    variant: str = TIME_VARYING,
    config: MCMCConfig | None = None,
    reference_class_constraint: bool = True,
    n_steps: int = 1,
    priors: Priors | None = None,
) -> Fit:
    """Fit the time-varying model or its subject-level (basic) counterpart."""
    if variant == BASIC:
        data = time_free_design(data)
        spec = ModelSpec.for_data(
            data, K, n_steps=n_steps, reference_class_constraint=reference_class_constraint, subject_level_labels=True
        )
    elif variant == TIME_VARYING:
        spec = ModelSpec.for_data(data, K, n_steps=n_steps, reference_class_constraint=reference_class_constraint)
    else:
        raise ValueError(f"unknown model variant {variant!r}")
    chain = run_chain(data, spec, priors=priors, config=config)
    return Fit(variant, K, data, spec, chain)


@dataclass
class SelectionRow:
    variant: str
    K: int
    dic: float
    p_d: float
    mean_deviance: float
    error_rate: float  # nan when true labels are unknown


def evaluate_fit(fit: Fit, true_labels=None, dic_variant: str = "conditional") -> SelectionRow:
    d = dic(fit.data, fit.chain, fit.spec, variant=dic_variant)
    err = float("nan")
    if true_labels is not None:
        assigned = assign_labels(posterior_membership(fit.data, fit.chain, fit.spec))
        err = matched_error_rate(assigned, true_labels)
    return SelectionRow(fit.variant, fit.K, d.dic, d.p_d, d.mean_deviance, err)


def select_models(
    data: Dataset,
    tv_range=(1, 2, 3),
    basic_range=(),
    config: MCMCConfig | None = None,
    true_labels=None,
    dic_variant: str = "conditional",
    reference_class_constraint: bool = True,
) -> tuple[list[SelectionRow], list[Fit]]:
    """Fit every candidate and tabulate DIC and (if known) error rate."""
    rows, fits = [], []
    for variant, ks in ((TIME_VARYING, tv_range), (BASIC, basic_range)):
        for K in ks:
            fit = fit_model(data, K, variant, config=config, reference_class_constraint=reference_class_constraint)
            fits.append(fit)
            rows.append(evaluate_fit(fit, true_labels, dic_variant))
    return rows, fits


def best_by(rows: list[SelectionRow], key: str) -> SelectionRow:
    vals = [getattr(r, key) for r in rows]
    if all(np.isnan(vals)):
        raise ValueError(f"no finite {key} values to compare")
    return rows[int(np.nanargmin(vals))]


def with_seed(config: MCMCConfig | None, seed: int) -> MCMCConfig:
    return replace(config or MCMCConfig(), seed=seed)
