"""Adaptive Metropolis with a fixed-scale safety component.

``AmState`` tracks a batch of independent chains of the same dimension,
so per-subject random-effect blocks adapt and propose in one vectorised
call. At iteration m <= 2d every proposal is N(x, 0.1^2 I / d); after
that, with probability 1 - alpha_prop it is N(x, sigma2 * Sigma_m / d)
with Sigma_m the running empirical covariance of the chain history.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import StateError

log = logging.getLogger(__name__)

FIXED_SCALE = 0.1


@dataclass
class AmState:
    dim: int
    batch: int = 1
    sigma2: float = 2.38**2
    alpha_prop: float = 0.05
    ridge: float = 1e-8
    m: int = 0  # samples absorbed so far
    mean: np.ndarray = field(default=None, repr=False)
    m2: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 < self.alpha_prop <= 1:
            raise ValueError("alpha_prop must lie in (0, 1]")
        if self.mean is None:
            self.mean = np.zeros((self.batch, self.dim))
        if self.m2 is None:
            self.m2 = np.zeros((self.batch, self.dim, self.dim))

    @property
    def seed_cov(self) -> np.ndarray:
        return (FIXED_SCALE**2 / self.dim) * np.eye(self.dim)

    @property
    def adapting(self) -> bool:
        return self.m > 2 * self.dim

    def empirical_cov(self) -> np.ndarray:
        """(batch, d, d) covariance of the absorbed history plus ridge."""
        n = max(self.m - 1, 1)
        return self.m2 / n + self.ridge * np.eye(self.dim)

    def update(self, x) -> None:
        """Absorb the chain's current value (shape (batch, d) or (d,))."""
        x = np.asarray(x, dtype=float).reshape(self.batch, self.dim)
        self.m += 1
        delta = x - self.mean
        self.mean += delta / self.m
        self.m2 += delta[:, :, None] * (x - self.mean)[:, None, :]

    def proposal_covariance(self) -> np.ndarray:
        """Covariance of the adaptive component, or the fixed one before m > 2d."""
        if not self.adapting:
            return np.broadcast_to(self.seed_cov, (self.batch, self.dim, self.dim)).copy()
        return self.sigma2 * self.empirical_cov() / self.dim


def am_propose(current, am: AmState, rng: np.random.Generator) -> np.ndarray:
    """Draw a proposal for every chain in the batch."""
    current = np.asarray(current, dtype=float)
    shape = current.shape
    x = current.reshape(am.batch, am.dim)
    z = rng.standard_normal((am.batch, am.dim))
    fixed_step = z * (FIXED_SCALE / np.sqrt(am.dim))
    if not am.adapting:
        return (x + fixed_step).reshape(shape)
    use_fixed = rng.random(am.batch) < am.alpha_prop
    cov = am.sigma2 * am.empirical_cov() / am.dim
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        log.warning("empirical covariance not positive definite; using fixed component")
        return (x + fixed_step).reshape(shape)
    adaptive_step = np.einsum("bij,bj->bi", L, z)
    step = np.where(use_fixed[:, None], fixed_step, adaptive_step)
    return (x + step).reshape(shape)


def am_accept(
    log_target: Callable[[np.ndarray], np.ndarray],
    current,
    current_logp,
    proposal,
    rng: np.random.Generator,
):
    """Metropolis accept/reject for a batch of symmetric proposals.

    Returns ``(accepted, new_values, new_logp)``; ``accepted`` is a bool
    array of length batch. Proposals outside the support must evaluate
    to -inf and are then rejected with certainty.
    """
    current = np.asarray(current, dtype=float)
    current_logp = np.atleast_1d(np.asarray(current_logp, dtype=float))
    if not np.all(np.isfinite(current_logp)):
        raise StateError("target log-density is not finite at the current state")
    prop_logp = np.atleast_1d(np.asarray(log_target(proposal), dtype=float))
    prop_logp = np.where(np.isnan(prop_logp), -np.inf, prop_logp)
    log_u = np.log(rng.random(prop_logp.shape[0]))
    accepted = log_u < prop_logp - current_logp
    batch = accepted.shape[0]
    cur = current.reshape(batch, -1)
    new = np.where(accepted[:, None], np.asarray(proposal, dtype=float).reshape(batch, -1), cur)
    return accepted, new.reshape(current.shape), np.where(accepted, prop_logp, current_logp)


def adaptive_metropolis(
    log_target: Callable[[np.ndarray], float],
    x0,
    n_iter: int,
    rng: np.random.Generator,
    sigma2: float = 2.38**2,
    alpha_prop: float = 0.05,
) -> tuple[np.ndarray, float]:
    """Stand-alone AM sampler for a single vector target.

    Returns the (n_iter, d) draws and the acceptance rate.
    """
    x = np.asarray(x0, dtype=float).copy()
    am = AmState(dim=x.size, sigma2=sigma2, alpha_prop=alpha_prop)
    am.update(x)

    def batched(v):
        return np.array([log_target(np.asarray(v).reshape(-1))])

    logp = batched(x)
    out = np.empty((n_iter, x.size))
    n_acc = 0
    for i in range(n_iter):
        prop = am_propose(x, am, rng)
        acc, x, logp = am_accept(batched, x, logp, prop, rng)
        n_acc += int(acc[0])
        am.update(x)
        out[i] = x
    return out, n_acc / max(n_iter, 1)
