"""Near-real-time sequence nominator for middle-funnel items.

User state is an attention-weighted sum of the item embeddings in the user's
recent history. Attention logits come from a linear map over quantised
dwell time, time gap and recency-position embeddings. The item tower has an
id embedding plus IDF-weighted categorical embeddings. The model trains on
each 15-minute window, warm-starting from the previous checkpoint, and a
snapshot only becomes servable ``serving_lag_ticks`` after its window.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._util import scatter_add
from .index import ExactIndex
from .two_tower import TrainingDiverged, sgd_step
from .world import ACTIVITY_LEVELS, TICKS_PER_DAY, Corpus, InteractionRecord

DWELL_EDGES = (10.0, 30.0, 60.0, 180.0, 600.0)  # bins [0,10) [10,30) ... [600,inf)
# log2-spaced tick gaps up to 28 days; the last bin holds anything older
GAP_EDGES = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 28 * TICKS_PER_DAY)
POSITION_CAP = 64


class StaleSnapshotError(RuntimeError):
    pass


@dataclass(frozen=True)
class RealtimeConfig:
    embedding_dim: int = 32
    bin_dim: int = 4
    learning_rate: float = 0.2
    steps_per_window: int = 1
    serving_lag_ticks: int = 8
    k_nominate: int = 50
    clip_norm: float = 5.0
    init_scale: float = 0.1
    max_window_events: int = 512
    use_context: bool = True

    def __post_init__(self) -> None:
        if self.serving_lag_ticks < 1:
            raise ValueError("serving_lag_ticks must be >= 1 so no snapshot serves its own window")


def dwell_bin(dwell):
    return np.searchsorted(DWELL_EDGES, np.asarray(dwell, dtype=float), side="right")


def gap_bin(gap_ticks):
    gap = np.asarray(gap_ticks)
    return np.searchsorted(GAP_EDGES, gap, side="right")


def position_bin(rank):
    return np.minimum(np.asarray(rank), POSITION_CAP - 1)


N_DWELL_BINS = len(DWELL_EDGES) + 1
N_GAP_BINS = len(GAP_EDGES) + 1


# --------------------------------------------------------------------------
# IDF


@dataclass
class CorpusStats:
    n_items: int
    topic_df: np.ndarray
    fine_df: np.ndarray
    lang_df: np.ndarray

    @classmethod
    def from_corpus(cls, corpus: Corpus, n_topics: int, n_fine: int, n_languages: int) -> "CorpusStats":
        fine = corpus.fine
        return cls(
            len(corpus),
            np.bincount(corpus.topic, minlength=n_topics),
            np.bincount(fine[fine >= 0], minlength=n_fine),
            np.bincount(corpus.language, minlength=n_languages),
        )

    def df(self, feature_id: tuple[str, int]) -> int:
        family, idx = feature_id
        table = {"topic": self.topic_df, "fine": self.fine_df, "language": self.lang_df}[family]
        return int(table[idx])


def idf(n_items, df):
    """log(1 + N / (1 + df)); smoothed so unseen features stay finite."""
    return np.log1p(np.asarray(n_items, dtype=float) / (1.0 + np.asarray(df, dtype=float)))


def idf_weight(feature_id: tuple[str, int], corpus_stats: CorpusStats) -> float:
    if corpus_stats.n_items < 1:
        raise ValueError("corpus_stats needs at least one item")
    return float(idf(corpus_stats.n_items, corpus_stats.df(feature_id)))


# --------------------------------------------------------------------------
# model


@dataclass
class SequenceModel:
    dim: int
    bin_dim: int
    params: dict
    idf: dict
    checkpoint_tick: int = 0
    index: ExactIndex | None = None

    @classmethod
    def init(cls, n_topics, n_fine, n_languages, dim=32, bin_dim=4, seed=0, scale=0.1):
        rng = np.random.default_rng(seed)

        def g(*shape):
            return scale * rng.standard_normal(shape)

        params = {
            "item_id": np.zeros((0, dim)),
            "topic": g(n_topics, dim),
            "fine": g(n_fine, dim),
            "lang": g(n_languages, dim),
            "cold": g(dim),
            "context": g(len(ACTIVITY_LEVELS), dim),
            "dwell_emb": g(N_DWELL_BINS, bin_dim),
            "gap_emb": g(N_GAP_BINS, bin_dim),
            "pos_emb": g(POSITION_CAP, bin_dim),
            # zero map: attention starts uniform
            "f_w": np.zeros(3 * bin_dim),
            "f_b": np.zeros(1),
        }
        idf_w = {"topic": np.ones(n_topics), "fine": np.ones(n_fine), "lang": np.ones(n_languages)}
        return cls(dim, bin_dim, params, idf_w)

    def copy(self) -> "SequenceModel":
        return replace(
            self,
            params={k: v.copy() for k, v in self.params.items()},
            idf={k: v.copy() for k, v in self.idf.items()},
        )

    def ensure_items(self, n_rows: int) -> None:
        t = self.params["item_id"]
        if len(t) < n_rows:
            self.params["item_id"] = np.vstack([t, np.zeros((n_rows - len(t), self.dim))])

    def set_idf(self, stats: CorpusStats) -> None:
        self.idf = {
            "topic": idf(stats.n_items, stats.topic_df),
            "fine": idf(stats.n_items, stats.fine_df),
            "lang": idf(stats.n_items, stats.lang_df),
        }


def item_vectors(model: SequenceModel, corpus: Corpus, rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    model.ensure_items(len(corpus))
    p, w = model.params, model.idf
    t = corpus.topic[rows]
    lang = corpus.language[rows]
    fine = corpus.fine[rows]
    fmask = fine >= 0
    fine = np.where(fmask, fine, 0)
    cnt = np.maximum(fmask.sum(axis=1), 1)
    fw = w["fine"][fine] * fmask / cnt[:, None]
    v = p["item_id"][rows] + w["topic"][t][:, None] * p["topic"][t] + w["lang"][lang][:, None] * p["lang"][lang]
    return v + (fw[..., None] * p["fine"][fine]).sum(axis=1)


def _bin_features(model: SequenceModel, dwell, ticks, rank, now_tick):
    p = model.params
    bd = dwell_bin(dwell)
    bg = gap_bin(np.maximum(now_tick - np.asarray(ticks), 0))
    bp = position_bin(rank)
    feats = np.concatenate([p["dwell_emb"][bd], p["gap_emb"][bg], p["pos_emb"][bp]], axis=-1)
    return feats, bd, bg, bp


def _masked_softmax(logits, mask):
    z = np.where(mask, logits, -np.inf)
    zmax = np.max(np.where(mask, z, -np.inf), axis=1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    s = e.sum(axis=1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def attention_batch(model: SequenceModel, dwell, ticks, rank, mask, now_tick):
    feats, *_ = _bin_features(model, dwell, ticks, rank, now_tick)
    logits = feats @ model.params["f_w"] + model.params["f_b"][0]
    return _masked_softmax(logits, np.asarray(mask, dtype=bool))


def _records_to_arrays(history: Sequence[InteractionRecord]):
    n = len(history)
    dwell = np.array([[r.dwell_seconds for r in history]], dtype=float)
    ticks = np.array([[r.tick for r in history]], dtype=np.int64)
    rank = (n - 1 - np.arange(n))[None, :]
    return dwell, ticks, rank, np.ones((1, n), dtype=bool)


def attention_weights(model: SequenceModel, history: Sequence[InteractionRecord], now_tick: int) -> np.ndarray:
    """Softmax weights over the history; position is recency (0 = latest)."""
    if len(history) == 0:
        raise ValueError("attention needs a non-empty history; cold users take the default vector")
    dwell, ticks, rank, mask = _records_to_arrays(history)
    return attention_batch(model, dwell, ticks, rank, mask, now_tick)[0]


def user_states(model: SequenceModel, corpus: Corpus, hist, dwell, ticks, rank, mask, now_tick, levels=None):
    """Batched user state; rows with empty history get the cold-user vector."""
    hist = np.asarray(hist, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    B = len(hist)
    p = model.params
    if hist.shape[1] == 0:
        U = np.tile(p["cold"], (B, 1))
    else:
        a = attention_batch(model, dwell, ticks, rank, mask, now_tick)
        uniq, inv = np.unique(np.where(mask, hist, hist[mask][0] if mask.any() else 0), return_inverse=True)
        V = item_vectors(model, corpus, uniq)[inv.reshape(hist.shape)]
        U = np.einsum("bl,bld->bd", a, V)
        empty = ~mask.any(axis=1)
        U[empty] = p["cold"]
    if levels is not None:
        U = U + p["context"][np.asarray(levels)]
    return U


def user_state(
    model: SequenceModel,
    history: Sequence[InteractionRecord],
    now_tick: int,
    corpus: Corpus,
    activity_level: str | None = None,
) -> np.ndarray:
    """Attention-pooled history embedding, plus the activity-level context if given."""
    levels = None if activity_level is None else [ACTIVITY_LEVELS.index(activity_level)]
    if len(history) == 0:
        U = model.params["cold"].copy()
        return U if levels is None else U + model.params["context"][levels[0]]
    rows = corpus.rows([r.item_id for r in history])[None, :]
    dwell, ticks, rank, mask = _records_to_arrays(history)
    return user_states(model, corpus, rows, dwell, ticks, rank, mask, now_tick, levels)[0]


# --------------------------------------------------------------------------
# training


@dataclass
class StreamWindow:
    """Positive interactions on sub-graduation items from one tick."""

    tick: int
    target: np.ndarray  # item rows
    hist: np.ndarray  # (B, L) item rows, history before the event
    dwell: np.ndarray
    ticks: np.ndarray
    rank: np.ndarray
    mask: np.ndarray
    level: np.ndarray

    def __len__(self) -> int:
        return len(self.target)

    @classmethod
    def empty(cls, tick: int) -> "StreamWindow":
        z = np.zeros((0, 0))
        return cls(tick, np.zeros(0, np.int64), z.astype(np.int64), z, z.astype(np.int64), z.astype(np.int64), z.astype(bool), np.zeros(0, np.int64))


def window_loss_and_grads(model: SequenceModel, corpus: Corpus, window: StreamWindow, use_context: bool = True):
    """Next-item sampled softmax over the window's distinct items, with gradients."""
    p = model.params
    model.ensure_items(len(corpus))
    B = len(window)
    hist, mask = window.hist, window.mask.astype(bool)
    targets = window.target
    cand = np.unique(targets)
    hist_rows = hist[mask]
    rows_all = np.unique(np.concatenate([cand, hist_rows]))
    V_all = item_vectors(model, corpus, rows_all)
    V_c = V_all[np.searchsorted(rows_all, cand)]
    tpos = np.searchsorted(cand, targets)

    L = hist.shape[1]
    has_hist = mask.any(axis=1)
    if L:
        feats, bd, bg, bp = _bin_features(model, window.dwell, window.ticks, window.rank, window.tick)
        a = _masked_softmax(feats @ p["f_w"] + p["f_b"][0], mask)
        hidx = np.searchsorted(rows_all, np.where(mask, hist, rows_all[0]))
        Vh = V_all[hidx] * mask[..., None]
        U = np.einsum("bl,bld->bd", a, Vh)
    else:
        U = np.zeros((B, model.dim))
    U[~has_hist] = p["cold"]
    if use_context:
        U = U + p["context"][window.level]

    Z = U @ V_c.T
    zmax = Z.max(axis=1, keepdims=True)
    E = np.exp(Z - zmax)
    P = E / E.sum(axis=1, keepdims=True)
    loss = float(np.mean(-Z[np.arange(B), tpos] + zmax[:, 0] + np.log(E.sum(axis=1))))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite window loss ({loss})")

    dZ = P.copy()
    dZ[np.arange(B), tpos] -= 1.0
    dZ /= B
    dU = dZ @ V_c
    dV_all = np.zeros_like(V_all)
    dV_all[np.searchsorted(rows_all, cand)] += dZ.T @ U

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    grads["cold"] = dU[~has_hist].sum(axis=0)
    if use_context:
        scatter_add(grads["context"], window.level, dU)
    if L:
        dUh = np.where(has_hist[:, None], dU, 0.0)
        scatter_add(dV_all, hidx[mask], (a[..., None] * dUh[:, None, :])[mask])
        da = np.einsum("bld,bd->bl", Vh, dUh)
        df = a * (da - (a * da).sum(axis=1, keepdims=True))
        df = np.where(mask, df, 0.0)
        grads["f_w"] = np.einsum("bl,blk->k", df, feats)
        grads["f_b"] = np.array([df.sum()])
        de = df[..., None] * p["f_w"][None, None, :]
        e = model.bin_dim
        scatter_add(grads["dwell_emb"], bd[mask], de[..., :e][mask])
        scatter_add(grads["gap_emb"], bg[mask], de[..., e : 2 * e][mask])
        scatter_add(grads["pos_emb"], bp[mask], de[..., 2 * e :][mask])

    # item tower
    w = model.idf
    t = corpus.topic[rows_all]
    lang = corpus.language[rows_all]
    fine = corpus.fine[rows_all]
    fmask = fine >= 0
    fine0 = np.where(fmask, fine, 0)
    cnt = np.maximum(fmask.sum(axis=1), 1)
    scatter_add(grads["item_id"], rows_all, dV_all)
    scatter_add(grads["topic"], t, w["topic"][t][:, None] * dV_all)
    scatter_add(grads["lang"], lang, w["lang"][lang][:, None] * dV_all)
    fw = w["fine"][fine0] * fmask / cnt[:, None]
    scatter_add(grads["fine"], fine0.ravel(), (fw[..., None] * dV_all[:, None, :]).reshape(-1, model.dim))
    return loss, grads


def train_on_window(
    prev: SequenceModel,
    window: StreamWindow,
    corpus: Corpus,
    config: RealtimeConfig = RealtimeConfig(),
    corpus_stats: CorpusStats | None = None,
) -> SequenceModel:
    """Warm-started SGD on one window; the result is stamped window.tick + lag."""
    stamp = window.tick + config.serving_lag_ticks
    if len(window) == 0:
        # nothing to learn: share the (never mutated) arrays with prev
        return replace(prev, params=dict(prev.params), idf=dict(prev.idf), index=None, checkpoint_tick=stamp)
    new = prev.copy()
    new.index = None
    new.checkpoint_tick = stamp
    if corpus_stats is not None:
        new.set_idf(corpus_stats)
    for _ in range(config.steps_per_window):
        _, grads = window_loss_and_grads(new, corpus, window, config.use_context)
        sgd_step(new.params, grads, config.learning_rate, config.clip_norm)
    return new


def mid_funnel_rows(corpus: Corpus, now_tick: int, n_low: int, graduation_threshold: int, freshness_ticks: int):
    age = now_tick - corpus.upload_tick
    keep = (age >= 0) & (age <= freshness_ticks)
    keep &= (corpus.positives >= n_low) & (corpus.positives < graduation_threshold)
    return np.flatnonzero(keep)


def attach_index(model: SequenceModel, corpus: Corpus, rows) -> SequenceModel:
    rows = np.asarray(rows, dtype=np.int64)
    vecs = item_vectors(model, corpus, rows) if len(rows) else np.zeros((0, model.dim))
    model.index = ExactIndex(corpus.item_id[rows], vecs, positives=corpus.positives[rows], rows=rows)
    return model


def retrieve_topk_mid(model: SequenceModel, user_vec, now_tick: int, k: int = 50) -> list[tuple[int, float]]:
    """Top-k from the snapshot's mid-funnel index; the snapshot must be servable."""
    if model.checkpoint_tick > now_tick:
        raise StaleSnapshotError(f"snapshot servable from tick {model.checkpoint_tick}, asked at {now_tick}")
    if model.index is None:
        return []
    return model.index.search(user_vec, k)


@dataclass
class SnapshotQueue:
    """Single-producer handoff: readers only ever see complete, servable snapshots."""

    current: SequenceModel | None = None
    pending: deque = field(default_factory=deque)

    def publish(self, snapshot: SequenceModel) -> None:
        last = self.latest
        if last is not None and snapshot.checkpoint_tick < last.checkpoint_tick:
            raise ValueError("snapshots must be published in checkpoint order")
        self.pending.append(snapshot)

    def servable(self, now_tick: int) -> SequenceModel | None:
        while self.pending and self.pending[0].checkpoint_tick <= now_tick:
            self.current = self.pending.popleft()
        return self.current

    @property
    def latest(self) -> SequenceModel | None:
        """Newest trained snapshot, servable or not (the trainer's warm start)."""
        return self.pending[-1] if self.pending else self.current


def parameter_distance(a: SequenceModel, b: SequenceModel) -> float:
    total = 0.0
    for k, va in a.params.items():
        vb = b.params[k]
        n = min(len(va), len(vb))
        total += float(np.sum((va[:n] - vb[:n]) ** 2))
        if len(vb) > n:
            total += float(np.sum(vb[n:] ** 2))
    return math.sqrt(total)
