"""Dedicated fresh-content slot: nominate -> graduation filter -> bandit -> rank.

Each request picks one nominator (query-division multiplexing, optionally
contextual on the user's activity level), retrieves the top 50 from that
funnel's index, drops graduated items using live counters, keeps the bandit's
top 10 by Thompson draw and lets the shared ranker return one item.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import realtime as rt
from . import two_tower as tt
from .bandit import ArmTable, GlobalPrior
from .index import ExactIndex
from .main_recsys import MainModel
from .world import ACTIVITY_LEVELS, TICKS_PER_DAY, Corpus, SimUser, UserBase

LOW_FUNNEL = "low_funnel"
MID_FUNNEL = "mid_funnel"
CORE = ACTIVITY_LEVELS.index("core")


@dataclass(frozen=True)
class StackConfig:
    graduation_threshold: int = 1000
    n_low: int = 200
    p_two_tower: float = 80.0
    contextual_mode: bool = False
    q_core_realtime: float = 40.0
    freshness_window_days: int = 7
    k_nominate: int = 50
    m_prescore: int = 10
    lambda_rank: float = 0.5

    def __post_init__(self) -> None:
        if self.graduation_threshold < 1:
            raise ValueError("graduation_threshold must be >= 1")
        if not 0 <= self.n_low <= self.graduation_threshold:
            raise ValueError("need 0 <= n_low <= graduation_threshold")
        for name in ("p_two_tower", "q_core_realtime"):
            if not 0.0 <= getattr(self, name) <= 100.0:
                raise ValueError(f"{name} must be a percentage in [0, 100]")
        if self.uses_low and self.uses_mid and not 0 < self.n_low < self.graduation_threshold:
            raise ValueError("with both funnels active, need 0 < n_low < graduation_threshold")
        if self.freshness_window_days <= 0 or self.k_nominate < 1 or self.m_prescore < 1:
            raise ValueError("freshness window, k_nominate and m_prescore must be positive")
        if self.lambda_rank < 0:
            raise ValueError("lambda_rank must be >= 0")

    @property
    def uses_low(self) -> bool:
        if self.contextual_mode:
            return True
        return self.p_two_tower > 0

    @property
    def uses_mid(self) -> bool:
        if self.contextual_mode:
            return self.q_core_realtime > 0
        return self.p_two_tower < 100

    @property
    def freshness_ticks(self) -> int:
        return self.freshness_window_days * TICKS_PER_DAY

    @classmethod
    def single_two_tower(cls, graduation_threshold: int = 1000, **kw) -> "StackConfig":
        """Two-tower only; its cap equals the graduation threshold."""
        return cls(graduation_threshold=graduation_threshold, n_low=graduation_threshold, p_two_tower=100.0, **kw)

    @classmethod
    def single_real_time(cls, graduation_threshold: int = 1000, **kw) -> "StackConfig":
        """Real-time nominator only, indexing every sub-graduation fresh item."""
        return cls(graduation_threshold=graduation_threshold, n_low=0, p_two_tower=0.0, **kw)


@dataclass
class RankerModel:
    """Shared ranker: main-system relevance with its own popularity knob."""

    main: MainModel
    lambda_r: float = 0.5

    def __post_init__(self) -> None:
        if self.lambda_r < 0:
            raise ValueError("lambda_r must be >= 0")


def _positives_of(c) -> int:
    if hasattr(c, "positive_interactions"):
        return int(c.positive_interactions)
    return int(c[1])


def graduation_filter(candidates: Sequence, graduation_threshold: int) -> list:
    """Drop candidates with at least ``graduation_threshold`` positives, order kept.

    Candidates are ContentItem-like objects or ``(item_id, positives)`` pairs.
    """
    return [c for c in candidates if _positives_of(c) < graduation_threshold]


def mid_funnel_mask(levels, u, config: StackConfig) -> np.ndarray:
    """True where the request goes to the real-time nominator, given uniforms ``u``."""
    levels = np.asarray(levels)
    u = np.asarray(u, dtype=float)
    if config.contextual_mode:
        return (levels == CORE) & (u < config.q_core_realtime / 100.0)
    return u >= config.p_two_tower / 100.0


def choose_nominator(user: SimUser, rng: np.random.Generator, config: StackConfig) -> str:
    level = ACTIVITY_LEVELS.index(user.activity_level)
    return MID_FUNNEL if mid_funnel_mask([level], [rng.random()], config)[0] else LOW_FUNNEL


def rank_scores(ranker: RankerModel, pref, rows) -> np.ndarray:
    """Relevance x (1 + lambda_r log(1 + positives)) for (users, candidates) rows."""
    main = ranker.main
    pref = np.atleast_2d(np.asarray(pref, dtype=float))
    rows = np.atleast_2d(np.asarray(rows, dtype=np.int64))
    safe = np.maximum(rows, 0)
    rel = np.einsum("bt,bmt->bm", pref, main.profile(safe))
    return rel * (1.0 + ranker.lambda_r * np.log1p(main.positives[safe]))


def rank_final(ranker: RankerModel, user: SimUser, candidates: Sequence[int]) -> int | None:
    """Top-1 candidate item id; ties go to the smaller id. None when empty."""
    if not candidates:
        return None
    rows = np.array([ranker.main.row_of[int(c)] for c in candidates], dtype=np.int64)
    scores = rank_scores(ranker, user.pref_vector[None, :], rows[None, :])[0]
    ids = ranker.main.item_ids[rows]
    best = np.lexsort((ids, -scores))[0]
    return int(ids[best])


# --------------------------------------------------------------------------
# batched serving


@dataclass
class StackModels:
    """What one request needs: index/model snapshots, arm stats and the ranker."""

    ranker: RankerModel
    arms: ArmTable
    prior: GlobalPrior = field(default_factory=GlobalPrior)
    two_tower: tt.TwoTowerModel | None = None
    low_index: ExactIndex | None = None
    user_phi: np.ndarray | None = None
    sequence: rt.SequenceModel | None = None
    tt_history_window: int = 50
    # optional cache: user rows -> two-tower user vectors
    low_user_vectors: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass
class ServeResult:
    rows: np.ndarray  # served item row per user, -1 if the slot stayed empty
    provenance: np.ndarray  # 0 none, 1 low funnel, 2 mid funnel
    index_positives: np.ndarray
    n_nominated: np.ndarray
    n_filtered: np.ndarray
    n_prescored: np.ndarray


def _retrieve(index: ExactIndex | None, queries: np.ndarray, k: int):
    if index is None or len(index) == 0 or len(queries) == 0:
        return np.full((len(queries), k), -1, dtype=np.int64), np.full((len(queries), k), -1, dtype=np.int64)
    cols, _ = index.search_batch(queries, k)
    rows = np.where(cols >= 0, index.rows[np.maximum(cols, 0)], -1)
    pos = np.where(cols >= 0, index.positives[np.maximum(cols, 0)], -1)
    return rows, pos


def serve_dedicated_batch(
    user_rows,
    users: UserBase,
    corpus: Corpus,
    models: StackModels,
    config: StackConfig,
    now_tick: int,
    u_choose,
    rng_bandit: np.random.Generator,
) -> ServeResult:
    """Run the full dedicated-slot pipeline for every user in ``user_rows``.

    Random draws are consumed in fixed shapes, whatever the outcome, so runs
    with different stack settings still share their random streams.
    """
    user_rows = np.asarray(user_rows, dtype=np.int64)
    B, k = len(user_rows), config.k_nominate
    cand = np.full((B, k), -1, dtype=np.int64)
    cand_pos = np.full((B, k), -1, dtype=np.int64)
    prov = np.zeros(B, dtype=np.int8)
    is_mid = mid_funnel_mask(users.level[user_rows], u_choose, config)
    if len(corpus) == 0:
        rng_bandit.beta(1.0, 1.0, size=(B, k))  # keep the stream position
        z = np.zeros(B, dtype=np.int64)
        return ServeResult(np.full(B, -1, dtype=np.int64), np.zeros(B, dtype=np.int8), np.full(B, -1, dtype=np.int64), z, z, z)

    low = np.flatnonzero(~is_mid)
    if len(low) and models.two_tower is not None and models.low_index is not None:
        if models.low_user_vectors is not None:
            q = models.low_user_vectors(user_rows[low])
        else:
            hist, mask = users.history.recent_items(user_rows[low], models.tt_history_window)
            q = tt.embed_users(models.two_tower, corpus, hist, mask, phi=models.user_phi)
        cand[low], cand_pos[low] = _retrieve(models.low_index, q, k)
    prov[low] = 1

    mid = np.flatnonzero(is_mid)
    snap = models.sequence
    if len(mid) and snap is not None:
        if snap.checkpoint_tick > now_tick:
            raise rt.StaleSnapshotError("serving a snapshot before its checkpoint tick")
        hist, dwell, ticks, rank, mask = users.history.recent(user_rows[mid])
        q = rt.user_states(snap, corpus, hist, dwell, ticks, rank, mask, now_tick, users.level[user_rows[mid]])
        cand[mid], cand_pos[mid] = _retrieve(snap.index, q, k)
    prov[mid] = 2

    valid = cand >= 0
    n_nominated = valid.sum(axis=1)
    # graduation filter on live counters
    safe = np.maximum(cand, 0)
    valid &= corpus.positives[safe] < config.graduation_threshold
    n_filtered = valid.sum(axis=1)

    # Thompson draws in item-id order per request
    ids = np.where(valid, corpus.item_id[safe], np.iinfo(np.int64).max)
    order = np.argsort(ids, axis=1, kind="stable")
    cand = np.take_along_axis(cand, order, axis=1)
    cand_pos = np.take_along_axis(cand_pos, order, axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    safe = np.maximum(cand, 0)
    x = np.where(valid, models.arms.x[safe], 0)
    n = np.where(valid, models.arms.n[safe], 0)
    draws = rng_bandit.beta(models.prior.alpha0 + x, models.prior.beta0 + n - x)
    draws = np.where(valid, draws, -np.inf)
    m = min(config.m_prescore, k)
    top = np.argsort(-draws, axis=1, kind="stable")[:, :m]
    pre = np.take_along_axis(cand, top, axis=1)
    pre_pos = np.take_along_axis(cand_pos, top, axis=1)
    pre_valid = np.take_along_axis(valid, top, axis=1)
    n_prescored = pre_valid.sum(axis=1)

    served = np.full(B, -1, dtype=np.int64)
    idx_pos = np.full(B, -1, dtype=np.int64)
    has = n_prescored > 0
    if has.any():
        scores = rank_scores(models.ranker, users.pref[user_rows[has]], pre[has])
        scores = np.where(pre_valid[has], scores, -np.inf)
        pre_ids = np.where(pre_valid[has], corpus.item_id[np.maximum(pre[has], 0)], np.iinfo(np.int64).max)
        # argmax with ties to the smaller id: sort by id, then stable argmax
        o = np.argsort(pre_ids, axis=1, kind="stable")
        s_sorted = np.take_along_axis(scores, o, axis=1)
        best = np.take_along_axis(o, np.argmax(s_sorted, axis=1)[:, None], axis=1)[:, 0]
        served[has] = pre[has][np.arange(has.sum()), best]
        idx_pos[has] = pre_pos[has][np.arange(has.sum()), best]
    prov = np.where(served >= 0, prov, 0).astype(np.int8)
    return ServeResult(served, prov, idx_pos, n_nominated, n_filtered, n_prescored)


def serve_dedicated_slot(
    user_row: int,
    users: UserBase,
    corpus: Corpus,
    models: StackModels,
    rng: np.random.Generator,
    config: StackConfig,
    now_tick: int,
) -> tuple[int, str] | None:
    """Single-request wrapper: (item_id, provenance) or None when the slot empties."""
    res = serve_dedicated_batch([user_row], users, corpus, models, config, now_tick, rng.random(1), rng)
    if res.rows[0] < 0:
        return None
    return int(corpus.item_id[res.rows[0]]), (LOW_FUNNEL if res.provenance[0] == 1 else MID_FUNNEL)
