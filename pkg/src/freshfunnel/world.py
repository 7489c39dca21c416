"""Synthetic platform: providers, uploads, users and the user-response model.

One tick is 15 simulated minutes, so a day is 96 ticks. Everything random is
driven by an explicit ``numpy.random.Generator`` so runs are reproducible.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from ._util import Column, substream

TICKS_PER_DAY = 96
GOOD_CLICK_SECONDS = 10.0
HISTORY_CAPACITY = 500
ACTIVITY_LEVELS = ("core", "casual", "emerging")
MAX_FINE_PER_ITEM = 3


@dataclass(frozen=True)
class WorldConfig:
    n_providers: int = 200
    n_users: int = 10_000
    n_topics: int = 20
    n_languages: int = 4
    topic_zipf_exponent: float = 0.6
    fine_vocab_size: int = 2000
    fine_zipf_exponent: float = 1.1
    broad_fine_share: float = 0.4
    home_topic_share: float = 0.8
    # core, casual, emerging
    activity_mix: tuple[float, float, float] = (0.25, 0.45, 0.30)
    arrival_probs: tuple[float, float, float] = (0.06, 0.02, 0.005)
    pref_concentration: float = 0.15
    click_relevance_coef: float = 6.0
    click_quality_coef: float = 3.0
    click_intercept: float = -4.5
    dwell_log_base: float = 2.0
    dwell_log_slope: float = 3.0
    dwell_log_sigma: float = 0.8
    quality_concentration: float = 4.0
    provider_quality_a: float = 2.0
    provider_quality_b: float = 3.0
    rating_noise: float = 0.15
    upload_rate_mean: float = 0.5
    upload_rate_sigma: float = 0.8
    responsiveness: float = 1.0
    exposure_ceiling: float = 300.0
    catalog_per_provider: float = 6.0
    catalog_min_positives: int = 30
    catalog_positives_median: float = 300.0
    catalog_positives_sigma: float = 1.2
    catalog_min_age_days: int = 8
    catalog_max_age_days: int = 365

    def __post_init__(self) -> None:
        if self.n_providers < 1 or self.n_users < 0 or self.n_topics < 1:
            raise ValueError("world needs at least one provider and one topic")
        if len(self.activity_mix) != 3 or len(self.arrival_probs) != 3:
            raise ValueError("activity_mix and arrival_probs need one entry per activity level")
        if abs(sum(self.activity_mix) - 1.0) > 1e-9 or min(self.activity_mix) < 0:
            raise ValueError("activity_mix must be a distribution")
        if not all(0.0 <= p <= 1.0 for p in self.arrival_probs):
            raise ValueError("arrival probabilities must lie in [0, 1]")
        if self.exposure_ceiling <= 0:
            raise ValueError("exposure_ceiling must be positive")


@dataclass
class Provider:
    provider_id: int
    base_upload_rate: float
    responsiveness: float
    quality_mean: float
    home_topic: int = 0
    language_id: int = 0

    def __post_init__(self) -> None:
        if self.base_upload_rate < 0:
            raise ValueError("base_upload_rate must be >= 0")
        if self.responsiveness < 0:
            raise ValueError("responsiveness must be >= 0")
        if not 0.0 < self.quality_mean < 1.0:
            raise ValueError("quality_mean must lie in (0, 1)")


@dataclass
class ContentItem:
    item_id: int
    provider_id: int
    upload_tick: int
    topic_id: int
    fine_category_ids: tuple[int, ...]
    language_id: int
    avg_rating: float
    latent_quality: float
    positive_interactions: int = 0
    impressions: int = 0

    def __post_init__(self) -> None:
        if not self.fine_category_ids:
            raise ValueError("fine_category_ids must be non-empty")
        if not 0 <= self.positive_interactions <= self.impressions:
            raise ValueError("need 0 <= positive_interactions <= impressions")


@dataclass(frozen=True)
class InteractionRecord:
    item_id: int
    dwell_seconds: float
    tick: int
    position: int


@dataclass
class SimUser:
    user_id: int
    pref_vector: np.ndarray
    activity_level: str
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_CAPACITY))

    def __post_init__(self) -> None:
        self.pref_vector = np.asarray(self.pref_vector, dtype=float)
        if self.activity_level not in ACTIVITY_LEVELS:
            raise ValueError(f"unknown activity level {self.activity_level!r}")
        if np.any(self.pref_vector < 0) or abs(self.pref_vector.sum() - 1.0) > 1e-9:
            raise ValueError("pref_vector must be a distribution over topics")
        if not isinstance(self.history, deque) or self.history.maxlen != HISTORY_CAPACITY:
            self.history = deque(self.history, maxlen=HISTORY_CAPACITY)
        self._next_position = len(self.history)

    def record(self, item_id: int, dwell_seconds: float, tick: int) -> InteractionRecord:
        if self.history and tick < self.history[-1].tick:
            raise ValueError("history records must be appended in tick order")
        rec = InteractionRecord(item_id, float(dwell_seconds), tick, self._next_position)
        self._next_position += 1
        self.history.append(rec)
        return rec


class Response(NamedTuple):
    clicked: bool
    dwell_seconds: float


# --------------------------------------------------------------------------
# Sampling helpers


@lru_cache(maxsize=32)
def _zipf_cdf(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=float) ** exponent
    cdf = np.cumsum(w)
    return cdf / cdf[-1]


def zipf_draw(rng: np.random.Generator, n: int, exponent: float, size: int | None = None):
    """Rank in [0, n) with P(r) proportional to 1 / (r + 1)**exponent."""
    cdf = _zipf_cdf(n, float(exponent))
    u = rng.random(size)
    return np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def draw_content(provider: Provider, rng: np.random.Generator, config: WorldConfig):
    """Content attributes of one new item from ``provider``."""
    if rng.random() < config.home_topic_share:
        topic = provider.home_topic
    else:
        topic = int(zipf_draw(rng, config.n_topics, config.topic_zipf_exponent))
    n_fine = int(rng.integers(1, MAX_FINE_PER_ITEM + 1))
    per_topic = max(1, config.fine_vocab_size // config.n_topics)
    fine = set()
    for _ in range(n_fine):
        if rng.random() < config.broad_fine_share:
            fine.add(int(zipf_draw(rng, config.fine_vocab_size, config.fine_zipf_exponent)))
        else:
            k = int(zipf_draw(rng, per_topic, config.fine_zipf_exponent))
            fine.add(min(topic + config.n_topics * k, config.fine_vocab_size - 1))
    kappa = config.quality_concentration
    q_m = provider.quality_mean
    quality = float(rng.beta(2 * q_m * kappa, 2 * (1 - q_m) * kappa))
    rating = float(np.clip(quality + config.rating_noise * rng.standard_normal(), 0.0, 1.0))
    return topic, tuple(sorted(fine)), provider.language_id, rating, quality


def upload_rates_per_tick(providers: Sequence[Provider], recent_exposure=None, config: WorldConfig | None = None):
    """Expected uploads per tick for each provider."""
    config = config or WorldConfig()
    base = np.array([p.base_upload_rate for p in providers], dtype=float)
    resp = np.array([p.responsiveness for p in providers], dtype=float)
    if recent_exposure is None:
        norm = np.zeros_like(base)
    else:
        norm = np.clip(np.asarray(recent_exposure, dtype=float) / config.exposure_ceiling, 0.0, 1.0)
    return base * (1.0 + resp * norm) / TICKS_PER_DAY


def spawn_uploads(
    tick: int,
    providers: Sequence[Provider],
    rng: np.random.Generator,
    *,
    config: WorldConfig | None = None,
    recent_exposure=None,
    start_id: int = 0,
) -> list[ContentItem]:
    """New uploads this tick; each provider draws a Poisson count.

    ``recent_exposure`` holds each provider's dedicated-slot impressions over
    the trailing seven days; it is normalised by ``config.exposure_ceiling``.
    """
    if tick < 0:
        raise ValueError("tick must be >= 0")
    config = config or WorldConfig()
    counts = rng.poisson(upload_rates_per_tick(providers, recent_exposure, config))
    items: list[ContentItem] = []
    if not counts.any():
        return items
    next_id = start_id
    for provider, count in zip(providers, counts):
        for _ in range(int(count)):
            topic, fine, lang, rating, quality = draw_content(provider, rng, config)
            items.append(ContentItem(next_id, provider.provider_id, tick, topic, fine, lang, rating, quality))
            next_id += 1
    return items


def respond(relevance, quality, rng: np.random.Generator, config: WorldConfig):
    """Vectorised response model; returns (clicked, dwell_seconds) arrays.

    Always consumes one uniform and one normal per impression so the stream
    position does not depend on outcomes.
    """
    relevance = np.asarray(relevance, dtype=float)
    quality = np.asarray(quality, dtype=float)
    p_click = sigmoid(
        config.click_relevance_coef * relevance + config.click_quality_coef * quality + config.click_intercept
    )
    u = rng.random(relevance.shape)
    z = rng.standard_normal(relevance.shape)
    clicked = u < p_click
    mu = config.dwell_log_base + config.dwell_log_slope * relevance * quality
    dwell = np.where(clicked, np.exp(mu + config.dwell_log_sigma * z), 0.0)
    return clicked, dwell


def click_probability(relevance, quality, config: WorldConfig):
    return sigmoid(
        config.click_relevance_coef * np.asarray(relevance, dtype=float)
        + config.click_quality_coef * np.asarray(quality, dtype=float)
        + config.click_intercept
    )


def user_response(user: SimUser, item: ContentItem, rng: np.random.Generator, config: WorldConfig | None = None) -> Response:
    config = config or WorldConfig()
    relevance = user.pref_vector[item.topic_id]
    clicked, dwell = respond(np.array([relevance]), np.array([item.latent_quality]), rng, config)
    return Response(bool(clicked[0]), float(dwell[0]))


def session_arrivals(tick: int, users, rng: np.random.Generator, arrival_probs=(0.06, 0.02, 0.005)) -> list[int]:
    """Ids of users who open a session this tick (at most once each)."""
    if isinstance(users, UserBase):
        levels, ids = users.level, users.ids
    else:
        levels = np.array([ACTIVITY_LEVELS.index(u.activity_level) for u in users], dtype=np.int8)
        ids = np.array([u.user_id for u in users], dtype=np.int64)
    p = np.asarray(arrival_probs, dtype=float)[levels]
    return ids[rng.random(len(ids)) < p].tolist()


# --------------------------------------------------------------------------
# Columnar state used by the simulator


class HistoryBuffer:
    """Per-user ring buffers of engaged items, oldest records evicted first."""

    def __init__(self, n_users: int, capacity: int = HISTORY_CAPACITY):
        self.capacity = capacity
        self.item = np.zeros((n_users, capacity), dtype=np.int32)
        self.dwell = np.zeros((n_users, capacity), dtype=np.float32)
        self.tick = np.zeros((n_users, capacity), dtype=np.int32)
        self.total = np.zeros(n_users, dtype=np.int64)

    def lengths(self, users=None) -> np.ndarray:
        t = self.total if users is None else self.total[users]
        return np.minimum(t, self.capacity)

    def append(self, users, items, dwell, ticks) -> None:
        """Append records; within one call, records keep their given order per user."""
        users = np.asarray(users, dtype=np.int64)
        if users.size == 0:
            return
        order = np.argsort(users, kind="stable")
        users = users[order]
        first = np.searchsorted(users, users, side="left")
        offset = np.arange(users.size) - first
        pos = (self.total[users] + offset) % self.capacity
        self.item[users, pos] = np.asarray(items)[order]
        self.dwell[users, pos] = np.asarray(dwell)[order]
        self.tick[users, pos] = np.asarray(ticks)[order]
        np.add.at(self.total, users, 1)

    def recent(self, users, max_len: int | None = None):
        """Last ``max_len`` records per user, oldest first.

        Returns (items, dwell, ticks, recency_rank, mask), each (len(users), L).
        """
        users = np.asarray(users, dtype=np.int64)
        lens = self.lengths(users)
        if max_len is not None:
            lens = np.minimum(lens, max_len)
        width = int(lens.max()) if lens.size else 0
        j = np.arange(width)[None, :]
        mask = j < lens[:, None]
        idx = (self.total[users][:, None] - lens[:, None] + j) % self.capacity
        rows = users[:, None]
        items = np.where(mask, self.item[rows, idx], 0)
        dwell = np.where(mask, self.dwell[rows, idx], 0.0)
        ticks = np.where(mask, self.tick[rows, idx], 0)
        rank = np.where(mask, lens[:, None] - 1 - j, 0)
        return items, dwell, ticks, rank, mask


    def recent_items(self, users, max_len: int | None = None):
        """Item part of ``recent``: (items, mask)."""
        users = np.asarray(users, dtype=np.int64)
        lens = self.lengths(users)
        if max_len is not None:
            lens = np.minimum(lens, max_len)
        width = int(lens.max()) if lens.size else 0
        j = np.arange(width)[None, :]
        mask = j < lens[:, None]
        idx = (self.total[users][:, None] - lens[:, None] + j) % self.capacity
        return np.where(mask, self.item[users[:, None], idx], 0), mask


class UserBase:
    """Columnar user table: ids, topic preferences, activity level, history."""

    def __init__(self, ids, pref, level, capacity: int = HISTORY_CAPACITY):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.pref = np.asarray(pref, dtype=float)
        self.level = np.asarray(level, dtype=np.int8)
        self.history = HistoryBuffer(len(self.ids), capacity)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, rows) -> "UserBase":
        rows = np.asarray(rows, dtype=np.int64)
        return UserBase(self.ids[rows], self.pref[rows].copy(), self.level[rows].copy(), self.history.capacity)

    def user(self, row: int, corpus: "Corpus | None" = None) -> SimUser:
        """Object view of one user; history item ids need the corpus."""
        u = SimUser(int(self.ids[row]), self.pref[row].copy(), ACTIVITY_LEVELS[int(self.level[row])])
        items, dwell, ticks, _, mask = self.history.recent([row])
        start = int(self.history.total[row]) - int(mask.sum())
        for j in range(int(mask.sum())):
            item = int(items[0, j]) if corpus is None else int(corpus.item_id[items[0, j]])
            u.history.append(InteractionRecord(item, float(dwell[0, j]), int(ticks[0, j]), start + j))
        u._next_position = int(self.history.total[row])
        return u


class Corpus:
    """Columnar content table; models and indexes address items by row."""

    def __init__(self, n_fine: int = MAX_FINE_PER_ITEM):
        self.n_fine = n_fine
        self._item_id = Column(np.int64)
        self._provider = Column(np.int64)
        self._upload_tick = Column(np.int64)
        self._topic = Column(np.int32)
        self._fine = Column(np.int32, width=n_fine, fill=-1)
        self._fine_count = Column(np.int32)
        self._language = Column(np.int32)
        self._rating = Column(np.float64)
        self._quality = Column(np.float64)
        self.positives = np.zeros(0, dtype=np.int64)
        self.impressions = np.zeros(0, dtype=np.int64)
        self.base_positives = np.zeros(0, dtype=np.int64)
        self.base_impressions = np.zeros(0, dtype=np.int64)
        self.row_of: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._item_id)

    item_id = property(lambda self: self._item_id.view)
    provider_id = property(lambda self: self._provider.view)
    upload_tick = property(lambda self: self._upload_tick.view)
    topic = property(lambda self: self._topic.view)
    fine = property(lambda self: self._fine.view)
    fine_count = property(lambda self: self._fine_count.view)
    language = property(lambda self: self._language.view)
    avg_rating = property(lambda self: self._rating.view)
    quality = property(lambda self: self._quality.view)

    def add(self, items: Sequence[ContentItem], baseline: bool = False) -> np.ndarray:
        """Append items; with ``baseline`` their counters are pre-experiment history."""
        start = len(self)
        if not items:
            return np.arange(start, start)
        fine = np.full((len(items), self.n_fine), -1, dtype=np.int32)
        for r, it in enumerate(items):
            if it.item_id in self.row_of:
                raise ValueError(f"duplicate item id {it.item_id}")
            ids = it.fine_category_ids[: self.n_fine]
            fine[r, : len(ids)] = ids
            self.row_of[it.item_id] = start + r
        self._item_id.extend([it.item_id for it in items])
        self._provider.extend([it.provider_id for it in items])
        self._upload_tick.extend([it.upload_tick for it in items])
        self._topic.extend([it.topic_id for it in items])
        self._fine.extend(fine)
        self._fine_count.extend([min(len(it.fine_category_ids), self.n_fine) for it in items])
        self._language.extend([it.language_id for it in items])
        self._rating.extend([it.avg_rating for it in items])
        self._quality.extend([it.latent_quality for it in items])
        pos = np.array([it.positive_interactions for it in items], dtype=np.int64)
        imp = np.array([it.impressions for it in items], dtype=np.int64)
        zeros = np.zeros(len(items), dtype=np.int64)
        self.positives = np.concatenate([self.positives, pos])
        self.impressions = np.concatenate([self.impressions, imp])
        self.base_positives = np.concatenate([self.base_positives, pos if baseline else zeros])
        self.base_impressions = np.concatenate([self.base_impressions, imp if baseline else zeros])
        return np.arange(start, len(self))

    def item(self, row: int) -> ContentItem:
        n = int(self.fine_count[row])
        return ContentItem(
            int(self.item_id[row]),
            int(self.provider_id[row]),
            int(self.upload_tick[row]),
            int(self.topic[row]),
            tuple(int(c) for c in self.fine[row, :n]),
            int(self.language[row]),
            float(self.avg_rating[row]),
            float(self.quality[row]),
            int(self.positives[row]),
            int(self.impressions[row]),
        )

    def rows(self, item_ids) -> np.ndarray:
        try:
            return np.array([self.row_of[int(i)] for i in item_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown item id {exc.args[0]}") from None

    def table(self) -> dict[str, np.ndarray]:
        """Plain columns for serialisation (latent quality excluded)."""
        return {
            "item_id": self.item_id.copy(),
            "provider_id": self.provider_id.copy(),
            "upload_tick": self.upload_tick.copy(),
            "topic_id": self.topic.copy(),
            "base_positives": self.base_positives.copy(),
            "base_impressions": self.base_impressions.copy(),
        }


@dataclass
class World:
    """Generated population before any diversion."""

    config: WorldConfig
    providers: list[Provider]
    catalog: list[ContentItem]
    users: UserBase


def generate_world(config: WorldConfig, seed: int) -> World:
    """Providers, their back catalog (already established items) and users."""
    rng = substream(seed, "world")
    providers = []
    for pid in range(config.n_providers):
        sigma = config.upload_rate_sigma
        rate = config.upload_rate_mean * float(np.exp(sigma * rng.standard_normal() - 0.5 * sigma**2))
        q_m = float(np.clip(rng.beta(config.provider_quality_a, config.provider_quality_b), 0.02, 0.98))
        home = int(zipf_draw(rng, config.n_topics, config.topic_zipf_exponent))
        lang = int(zipf_draw(rng, config.n_languages, 1.0))
        providers.append(Provider(pid, rate, config.responsiveness, q_m, home, lang))

    catalog = []
    next_id = 0
    for prov in providers:
        n_items = int(rng.poisson(config.catalog_per_provider * prov.base_upload_rate / config.upload_rate_mean))
        for _ in range(n_items):
            topic, fine, lang, rating, quality = draw_content(prov, rng, config)
            age = int(rng.integers(config.catalog_min_age_days * TICKS_PER_DAY, config.catalog_max_age_days * TICKS_PER_DAY))
            pos = config.catalog_positives_median * np.exp(config.catalog_positives_sigma * rng.standard_normal())
            pos = max(config.catalog_min_positives, int(pos * (0.5 + quality)))
            imp = int(np.ceil(pos / (0.05 + 0.4 * quality)))
            catalog.append(ContentItem(next_id, prov.provider_id, -age, topic, fine, lang, rating, quality, pos, imp))
            next_id += 1

    levels = rng.choice(3, size=config.n_users, p=np.asarray(config.activity_mix))
    pref = rng.dirichlet(np.full(config.n_topics, config.pref_concentration), size=config.n_users)
    # Dirichlet draws with tiny concentration can underflow to an all-zero row.
    bad = ~np.isfinite(pref).all(axis=1) | (pref.sum(axis=1) <= 0)
    if bad.any():
        pref[bad] = 0.0
        pref[bad, rng.integers(0, config.n_topics, bad.sum())] = 1.0
    pref = pref / pref.sum(axis=1, keepdims=True)
    users = UserBase(np.arange(config.n_users), pref, levels)
    return World(config, providers, catalog, users)
