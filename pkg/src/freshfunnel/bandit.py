"""Per-item Bernoulli bandit with Beta posteriors over good-CTR.

Each arm is one content item. Its reward is drawn from
``Beta(alpha0 + x, beta0 + n - x)`` where ``x`` counts good clicks and ``n``
impressions in the dedicated slot, and the global prior ``(alpha0, beta0)`` is
fitted by maximum likelihood on items with enough impressions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import betaln, digamma, polygamma

from ._util import scatter_add


log = logging.getLogger(__name__)

PRIOR_BOUNDS = (1e-3, 1e6)


@dataclass(frozen=True)
class ArmStats:
    item_id: int
    x: int = 0
    n: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.x <= self.n:
            raise ValueError(f"arm {self.item_id}: need 0 <= x <= n, got x={self.x}, n={self.n}")


@dataclass(frozen=True)
class GlobalPrior:
    alpha0: float = 1.0
    beta0: float = 1.0
    clamped: bool = False

    def __post_init__(self) -> None:
        for v in (self.alpha0, self.beta0):
            if not (np.isfinite(v) and v > 0):
                raise ValueError("prior parameters must be positive and finite")

    @property
    def mean(self) -> float:
        return self.alpha0 / (self.alpha0 + self.beta0)


def beta_binomial_loglik(alpha: float, beta: float, x, n) -> float:
    """Marginal log-likelihood up to the binomial coefficients."""
    x = np.asarray(x, dtype=float)
    n = np.asarray(n, dtype=float)
    return float(np.sum(betaln(alpha + x, beta + n - x) - betaln(alpha, beta)))


def _derivatives(alpha: float, beta: float, x: np.ndarray, n: np.ndarray):
    s = alpha + beta
    da = np.sum(digamma(alpha + x) - digamma(s + n) - digamma(alpha) + digamma(s))
    db = np.sum(digamma(beta + n - x) - digamma(s + n) - digamma(beta) + digamma(s))
    t_sn = polygamma(1, s + n)
    t_s = polygamma(1, s)
    haa = np.sum(polygamma(1, alpha + x) - t_sn - polygamma(1, alpha) + t_s)
    hbb = np.sum(polygamma(1, beta + n - x) - t_sn - polygamma(1, beta) + t_s)
    hab = np.sum(t_s - t_sn)
    # chain rule onto (log alpha, log beta)
    grad = np.array([alpha * da, beta * db])
    hess = np.array(
        [
            [alpha * alpha * haa + alpha * da, alpha * beta * hab],
            [alpha * beta * hab, beta * beta * hbb + beta * db],
        ]
    )
    return grad, hess


def _moment_init(x: np.ndarray, n: np.ndarray, lo: float, hi: float) -> tuple[float, float]:
    p = x / n
    m = float(np.clip(p.mean(), 1e-6, 1 - 1e-6))
    between = p.var(ddof=1) - m * (1 - m) * float(np.mean(1.0 / n))
    if between <= 0:
        total = hi
    else:
        total = max(m * (1 - m) / between - 1.0, 2 * lo)
    return float(np.clip(m * total, lo, hi)), float(np.clip((1 - m) * total, lo, hi))


def fit_prior(
    observations: Sequence[tuple[int, int]],
    *,
    min_impressions: int = 100,
    bounds: tuple[float, float] = PRIOR_BOUNDS,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> GlobalPrior:
    """Maximum-likelihood Beta-Binomial prior from (good clicks, impressions) pairs.

    Newton iterations on (log alpha0, log beta0) from a method-of-moments start,
    with a backtracking line search. A fit that ends on a bound, or degenerate
    data (every x = 0 or every x = n), comes back with ``clamped=True``.
    """
    obs = np.asarray(observations, dtype=float).reshape(-1, 2)
    if len(obs) < 2:
        raise ValueError("fit_prior needs at least two observations")
    x, n = obs[:, 0], obs[:, 1]
    if np.any(n < min_impressions):
        raise ValueError(f"every observation needs at least {min_impressions} impressions")
    if np.any(x < 0) or np.any(x > n):
        raise ValueError("observations need 0 <= x <= n")
    lo, hi = bounds
    if np.all(x == 0):
        log.warning("degenerate prior data: no good clicks at all")
        return GlobalPrior(lo, hi, clamped=True)
    if np.all(x == n):
        log.warning("degenerate prior data: every impression was a good click")
        return GlobalPrior(hi, lo, clamped=True)

    log_lo, log_hi = np.log(lo), np.log(hi)
    theta = np.log(_moment_init(x, n, lo, hi))

    def ll(t):
        return beta_binomial_loglik(np.exp(t[0]), np.exp(t[1]), x, n)

    current = ll(theta)
    for _ in range(max_iter):
        grad, hess = _derivatives(np.exp(theta[0]), np.exp(theta[1]), x, n)
        # gradient components pushing past an active bound do not count
        free = ~(((theta <= log_lo) & (grad < 0)) | ((theta >= log_hi) & (grad > 0)))
        if np.linalg.norm(grad[free]) < tol:
            break
        try:
            eig = np.linalg.eigvalsh(hess)
            step = -np.linalg.solve(hess, grad) if eig.max() < 0 else None
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.all(np.isfinite(step)):
            step = grad / max(1.0, np.abs(np.diag(hess)).max())
        step = np.where(free, step, 0.0)
        step *= min(1.0, 5.0 / max(np.abs(step).max(), 1e-300))
        t = 1.0
        while t > 1e-10:
            cand = np.clip(theta + t * step, log_lo, log_hi)
            value = ll(cand)
            if value >= current - 1e-12 * abs(current):
                break
            t *= 0.5
        else:
            break
        moved = np.abs(cand - theta).max()
        theta, current = cand, value
        if moved < 1e-14:
            break
    at_bound = bool(np.any(theta <= log_lo + 1e-9) or np.any(theta >= log_hi - 1e-9))
    if at_bound:
        log.warning("prior fit reached the parameter bounds")
    alpha0, beta0 = np.exp(theta)
    return GlobalPrior(float(alpha0), float(beta0), clamped=at_bound)


def sample_reward(prior: GlobalPrior, arm: ArmStats, rng: np.random.Generator) -> float:
    return float(rng.beta(prior.alpha0 + arm.x, prior.beta0 + arm.n - arm.x))


def sample_rewards(prior: GlobalPrior, x, n, rng: np.random.Generator) -> np.ndarray:
    """Vectorised Thompson draws for arrays of arm statistics."""
    x = np.asarray(x, dtype=float)
    n = np.asarray(n, dtype=float)
    return rng.beta(prior.alpha0 + x, prior.beta0 + n - x)


def _as_arms(candidates) -> list[ArmStats]:
    if isinstance(candidates, Mapping):
        return [ArmStats(int(k), int(v[0]), int(v[1])) for k, v in candidates.items()]
    return list(candidates)


def select_top(prior: GlobalPrior, candidates, m: int, rng: np.random.Generator) -> list[int]:
    """Thompson sampling: one reward per candidate, the ``m`` highest win.

    Draws are assigned in item-id order, so the selected set does not depend
    on how the candidates were ordered by the caller.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    arms = sorted(_as_arms(candidates), key=lambda a: a.item_id)
    if not arms:
        return []
    rewards = sample_rewards(prior, [a.x for a in arms], [a.n for a in arms], rng)
    ids = np.array([a.item_id for a in arms])
    order = np.lexsort((ids, -rewards))[:m]
    return ids[order].tolist()


def update_arm(arm: ArmStats, impressed: bool, good_click: bool) -> ArmStats:
    if good_click and not impressed:
        raise ValueError("a good click requires an impression")
    return ArmStats(arm.item_id, arm.x + int(good_click), arm.n + int(impressed))


class ArmTable:
    """Dedicated-slot sufficient statistics for every item row."""

    def __init__(self) -> None:
        self.x = np.zeros(0, dtype=np.int64)
        self.n = np.zeros(0, dtype=np.int64)

    def grow(self, size: int) -> None:
        if size > len(self.n):
            pad = size - len(self.n)
            self.x = np.concatenate([self.x, np.zeros(pad, dtype=np.int64)])
            self.n = np.concatenate([self.n, np.zeros(pad, dtype=np.int64)])

    def update(self, rows, impressed, good_click) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        impressed = np.asarray(impressed, dtype=bool)
        good_click = np.asarray(good_click, dtype=bool)
        if np.any(good_click & ~impressed):
            raise ValueError("a good click requires an impression")
        scatter_add(self.n, rows, impressed.astype(np.int64))
        scatter_add(self.x, rows, good_click.astype(np.int64))
