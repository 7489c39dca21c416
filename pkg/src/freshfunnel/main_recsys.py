"""Popularity-biased baseline recommender that fills the main slots.

Only items with at least ``min_interactions_for_recall`` positive interactions
can be recalled, and scores grow with ``log(1 + positives)``. Together these
close the rich-get-richer loop that fresh uploads cannot break on their own.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ._util import scatter_add, topk_rows
from .eventlog import EventLog
from .world import GOOD_CLICK_SECONDS, SimUser


@dataclass(frozen=True)
class MainConfig:
    lambda_pop: float = 0.5
    min_interactions_for_recall: int | None = None  # None: the graduation threshold
    main_slots_per_session: int = 4
    affinity_blend: float = 0.5
    exclude_consumed: bool = True

    def __post_init__(self) -> None:
        if self.lambda_pop < 0:
            raise ValueError("lambda_pop must be >= 0")
        if not 0.0 <= self.affinity_blend <= 1.0:
            raise ValueError("affinity_blend must lie in [0, 1]")
        if self.main_slots_per_session < 0:
            raise ValueError("main_slots_per_session must be >= 0")


class MainModel:
    """Item score table: counters plus the audience's summed topic preferences."""

    def __init__(self, n_topics: int, min_interactions_for_recall: int, lambda_pop: float = 0.5,
                 affinity_blend: float = 0.5, exclude_consumed: bool = True, user_ids=None, user_pref=None):
        self.n_topics = n_topics
        self.min_interactions_for_recall = int(min_interactions_for_recall)
        self.lambda_pop = float(lambda_pop)
        self.affinity_blend = float(affinity_blend)
        self.exclude_consumed = exclude_consumed
        self.item_ids = np.zeros(0, dtype=np.int64)
        self.topic = np.zeros(0, dtype=np.int64)
        self.positives = np.zeros(0, dtype=np.int64)
        self.impressions = np.zeros(0, dtype=np.int64)
        self.aud_sum = np.zeros((0, n_topics))
        self.aud_count = np.zeros(0, dtype=np.int64)
        self.row_of: dict[int, int] = {}
        self.last_event_id = -1
        self._user_row = {}
        self._user_pref = np.zeros((0, n_topics))
        if user_ids is not None:
            self._user_row = {int(u): r for r, u in enumerate(user_ids)}
            self._user_pref = np.asarray(user_pref, dtype=float)

    def __len__(self) -> int:
        return len(self.item_ids)

    def add_items(self, item_ids, topics, positives=None, impressions=None) -> None:
        item_ids = np.asarray(item_ids, dtype=np.int64)
        m = len(item_ids)
        if m == 0:
            return
        start = len(self)
        for r, i in enumerate(item_ids.tolist()):
            if i in self.row_of:
                raise ValueError(f"duplicate item id {i}")
            self.row_of[i] = start + r
        zeros = np.zeros(m, dtype=np.int64)
        self.item_ids = np.concatenate([self.item_ids, item_ids])
        self.topic = np.concatenate([self.topic, np.asarray(topics, dtype=np.int64)])
        self.positives = np.concatenate([self.positives, zeros if positives is None else np.asarray(positives, np.int64)])
        self.impressions = np.concatenate([self.impressions, zeros if impressions is None else np.asarray(impressions, np.int64)])
        self.aud_sum = np.vstack([self.aud_sum, np.zeros((m, self.n_topics))])
        self.aud_count = np.concatenate([self.aud_count, zeros])

    def eligible_rows(self) -> np.ndarray:
        return np.flatnonzero(self.positives >= self.min_interactions_for_recall)

    def profile(self, rows) -> np.ndarray:
        """Per-item topic profile Z with relevance(pref, item) = pref . Z[item].

        Z blends the item's one-hot topic with the mean preference vector of
        its positive audience (the one-hot again while it has no audience).
        """
        rows = np.asarray(rows, dtype=np.int64)
        onehot = np.zeros(rows.shape + (self.n_topics,))
        np.put_along_axis(onehot, self.topic[rows][..., None], 1.0, axis=-1)
        cnt = self.aud_count[rows][..., None]
        centroid = np.where(cnt > 0, self.aud_sum[rows] / np.maximum(cnt, 1), onehot)
        b = self.affinity_blend
        return b * onehot + (1.0 - b) * centroid

    def relevance(self, pref, rows) -> np.ndarray:
        """Topic preference blended with the item's audience affinity, shape (users, items)."""
        pref = np.atleast_2d(np.asarray(pref, dtype=float))
        return pref @ self.profile(rows).T

    def popularity_factor(self, rows, lam: float | None = None) -> np.ndarray:
        lam = self.lambda_pop if lam is None else lam
        return 1.0 + lam * np.log1p(self.positives[np.asarray(rows, dtype=np.int64)])

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.item_ids, self.topic, self.positives, self.impressions, self.aud_sum, self.aud_count):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.last_event_id).encode())
        return h.hexdigest()


def recommend_main_slates(model: MainModel, pref, k: int, exclude_rows=None, exclude_mask=None):
    """Top-k eligible rows per user (-1 padded), ties to the smaller item id.

    ``exclude_rows``/``exclude_mask`` (users, L) list item rows a user must not
    be shown again (their consumed history).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pref = np.atleast_2d(np.asarray(pref, dtype=float))
    elig = model.eligible_rows()
    if len(elig) == 0:
        return np.full((len(pref), k), -1, dtype=np.int64)
    scores = model.relevance(pref, elig) * model.popularity_factor(elig)[None, :]
    if exclude_rows is not None and exclude_rows.size:
        pos = np.searchsorted(elig, exclude_rows)
        pos = np.clip(pos, 0, len(elig) - 1)
        hit = (elig[pos] == exclude_rows) & exclude_mask
        r, c = np.nonzero(hit)
        scores[r, pos[r, c]] = -np.inf
    cols, _ = topk_rows(scores, model.item_ids[elig], k)
    return np.where(cols >= 0, elig[np.maximum(cols, 0)], -1)


def recommend_main_slate(model: MainModel, user: SimUser, k: int) -> list[int]:
    exclude_rows = exclude_mask = None
    if model.exclude_consumed and user.history:
        ids = [r.item_id for r in user.history if r.item_id in model.row_of]
        exclude_rows = np.array([[model.row_of[i] for i in ids]], dtype=np.int64)
        exclude_mask = np.ones_like(exclude_rows, dtype=bool)
    rows = recommend_main_slates(model, user.pref_vector[None, :], k, exclude_rows, exclude_mask)[0]
    return model.item_ids[rows[rows >= 0]].tolist()


def ingest_main_feedback(model: MainModel, events: EventLog) -> MainModel:
    """Fold new events into the counters; events already seen are skipped."""
    c = events.columns
    fresh = c["event_id"] > model.last_event_id
    if not fresh.any():
        return model
    item_ids = c["item_id"][fresh]
    unknown = [int(i) for i in np.unique(item_ids) if int(i) not in model.row_of]
    if unknown:
        raise KeyError(f"events reference unknown items {unknown[:5]}")
    rows = np.array([model.row_of[int(i)] for i in item_ids], dtype=np.int64)
    good = c["clicked"][fresh] & (c["dwell_seconds"][fresh] >= GOOD_CLICK_SECONDS)
    imp = c["impressed"][fresh]
    ingest_rows(model, rows, imp, good, c["user_id"][fresh])
    model.last_event_id = int(c["event_id"][fresh].max())
    return model


def ingest_rows(model: MainModel, rows, impressed, good, user_ids) -> None:
    """Row-level ingest used by the simulator's tick loop."""
    rows = np.asarray(rows, dtype=np.int64)
    scatter_add(model.impressions, rows, np.asarray(impressed, dtype=np.int64))
    good = np.asarray(good, dtype=bool)
    if good.any():
        g_rows = rows[good]
        scatter_add(model.positives, g_rows, 1)
        if model._user_row:
            scatter_add(model.aud_count, g_rows, 1)
            u_rows = np.array([model._user_row[int(u)] for u in np.asarray(user_ids)[good]], dtype=np.int64)
            scatter_add(model.aud_sum, g_rows, model._user_pref[u_rows])
