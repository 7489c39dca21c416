"""Content-generalisation nominator for low-funnel items.

A two-tower dot-product model. The item tower sees only content features
(topic, fine categories, language, average rating); the ablation control can
add an item-id embedding and a quantised popularity bucket. The user tower
averages content embeddings of the user's recent history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .index import ExactIndex
from .world import ContentItem, Corpus


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AblationFlags:
    drop_id: bool = True
    drop_popularity: bool = True


@dataclass(frozen=True)
class TwoTowerConfig:
    embedding_dim: int = 32
    learning_rate: float = 0.5
    batch_size: int = 128
    steps_per_retrain: int = 150
    drop_id: bool = True
    drop_popularity: bool = True
    rating_filter_threshold: float = 0.0
    k_nominate: int = 50
    history_window: int = 50
    clip_norm: float = 5.0
    init_scale: float = 0.1
    max_examples: int = 20_000
    n_popularity_buckets: int = 10
    sampling_correction: bool = True  # subtract log item frequency from in-batch logits

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(self.drop_id, self.drop_popularity)


def popularity_bucket(impressions, n_buckets: int = 10):
    """floor(log10(1 + impressions)), capped at the last bucket."""
    b = np.floor(np.log10(1.0 + np.asarray(impressions, dtype=float))).astype(np.int64)
    return np.minimum(b, n_buckets - 1)


def build_item_features(item: ContentItem, flags: AblationFlags = AblationFlags(), n_buckets: int = 10) -> dict:
    """Feature bundle the item tower may read."""
    features = {
        "topic_id": item.topic_id,
        "fine_category_ids": tuple(item.fine_category_ids),
        "language_id": item.language_id,
        "avg_rating": item.avg_rating,
    }
    if not flags.drop_id:
        features["item_id"] = item.item_id
    if not flags.drop_popularity:
        features["impression_bucket"] = int(popularity_bucket(item.impressions, n_buckets))
        features["positive_bucket"] = int(popularity_bucket(item.positive_interactions, n_buckets))
    return features


PARAM_GROUPS = ("bias", "W", "user_topic", "user_fine", "topic", "fine", "lang", "rating", "item_id", "popularity")


@dataclass
class TwoTowerModel:
    n_topics: int
    n_fine: int
    n_languages: int
    dim: int = 32
    flags: AblationFlags = AblationFlags()
    n_buckets: int = 10
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, n_topics, n_fine, n_languages, dim=32, flags=AblationFlags(), n_buckets=10, seed=0, scale=0.1):
        rng = np.random.default_rng(seed)

        def g(*shape):
            return scale * rng.standard_normal(shape)

        params = {
            "bias": g(dim),
            "W": np.eye(dim) + g(dim, dim),
            "user_topic": g(n_topics, dim),
            "user_fine": g(n_fine, dim),
            "topic": g(n_topics, dim),
            "fine": g(n_fine, dim),
            "lang": g(n_languages, dim),
            "rating": g(dim),
            "item_id": np.zeros((0, dim)),
            # separate buckets for impressions and positives
            "popularity": g(2 * n_buckets, dim) if not flags.drop_popularity else np.zeros((0, dim)),
        }
        return cls(n_topics, n_fine, n_languages, dim, flags, n_buckets, params)

    def copy(self) -> "TwoTowerModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def ensure_items(self, n_rows: int) -> None:
        """Grow the id table (control variant only) to cover ``n_rows`` items."""
        if self.flags.drop_id:
            return
        t = self.params["item_id"]
        if len(t) < n_rows:
            self.params["item_id"] = np.vstack([t, np.zeros((n_rows - len(t), self.dim))])


def _fine_parts(corpus: Corpus, rows):
    fine = corpus.fine[rows]
    mask = fine >= 0
    cnt = np.maximum(mask.sum(axis=1), 1)
    return np.where(mask, fine, 0), mask, cnt


def item_vectors(model: TwoTowerModel, corpus: Corpus, rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    p = model.params
    fine, mask, cnt = _fine_parts(corpus, rows)
    v = p["topic"][corpus.topic[rows]]
    v = v + (p["fine"][fine] * mask[..., None]).sum(axis=1) / cnt[:, None]
    v = v + p["lang"][corpus.language[rows]]
    v = v + corpus.avg_rating[rows][:, None] * p["rating"][None, :]
    if not model.flags.drop_id:
        model.ensure_items(len(corpus))
        v = v + p["item_id"][rows]
    if not model.flags.drop_popularity:
        v = v + p["popularity"][popularity_bucket(corpus.impressions[rows], model.n_buckets)]
        v = v + p["popularity"][model.n_buckets + popularity_bucket(corpus.positives[rows], model.n_buckets)]
    return v


def user_item_contributions(model: TwoTowerModel, corpus: Corpus, rows) -> np.ndarray:
    """Per-item content embedding on the user side (phi)."""
    rows = np.asarray(rows, dtype=np.int64)
    p = model.params
    fine, mask, cnt = _fine_parts(corpus, rows)
    return p["user_topic"][corpus.topic[rows]] + (p["user_fine"][fine] * mask[..., None]).sum(axis=1) / cnt[:, None]


def embed_users(model: TwoTowerModel, corpus: Corpus, hist, mask, phi=None) -> np.ndarray:
    """User vectors for padded histories (B, L) of item rows.

    ``phi`` may hold precomputed user-side contributions for every corpus row.
    """
    hist = np.asarray(hist, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    p = model.params
    if hist.size == 0:
        return np.tile(p["bias"], (len(hist), 1))
    contrib = phi[hist] if phi is not None else user_item_contributions(model, corpus, hist.ravel()).reshape(
        hist.shape + (model.dim,)
    )
    lens = mask.sum(axis=1)
    pooled = (contrib * mask[..., None]).sum(axis=1) / np.maximum(lens, 1)[:, None]
    return p["bias"][None, :] + pooled @ p["W"].T


def embed_user(model: TwoTowerModel, history: Sequence[int], corpus: Corpus) -> np.ndarray:
    """User vector from a history of corpus rows; empty history gives the bias vector."""
    hist = np.asarray(history, dtype=np.int64).reshape(1, -1)
    return embed_users(model, corpus, hist, np.ones(hist.shape, dtype=bool))[0]


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingExample:
    history: tuple[int, ...]
    item: int
    weight: float = 1.0


@dataclass
class ExampleArrays:
    hist: np.ndarray  # (M, H) corpus rows
    mask: np.ndarray  # (M, H)
    item: np.ndarray  # (M,)
    weight: np.ndarray  # (M,)
    log_q: np.ndarray | None = None  # (M,) log sampling probability of each example's item

    def __len__(self) -> int:
        return len(self.item)

    def take(self, idx) -> "ExampleArrays":
        log_q = None if self.log_q is None else self.log_q[idx]
        return ExampleArrays(self.hist[idx], self.mask[idx], self.item[idx], self.weight[idx], log_q)

    def with_frequency_correction(self) -> "ExampleArrays":
        """Attach log(item frequency among the examples) for in-batch bias correction."""
        _, inv, counts = np.unique(self.item, return_inverse=True, return_counts=True)
        return replace(self, log_q=np.log(counts[inv] / len(self.item)))

    @classmethod
    def from_examples(cls, examples: Sequence[TrainingExample], width: int | None = None) -> "ExampleArrays":
        width = width or max([len(e.history) for e in examples] + [1])
        hist = np.zeros((len(examples), width), dtype=np.int64)
        mask = np.zeros((len(examples), width), dtype=bool)
        for r, e in enumerate(examples):
            h = list(e.history)[-width:]
            hist[r, : len(h)] = h
            mask[r, : len(h)] = True
        item = np.array([e.item for e in examples], dtype=np.int64)
        weight = np.array([e.weight for e in examples], dtype=float)
        return cls(hist, mask, item, weight)


def _scatter(table_shape, idx, values) -> np.ndarray:
    """Dense table gradient: rows of ``values`` summed into ``idx`` (sort + reduceat)."""
    out = np.zeros(table_shape)
    idx = np.asarray(idx)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def batch_loss_and_grads(model: TwoTowerModel, corpus: Corpus, batch: ExampleArrays):
    """In-batch softmax loss over dot products and its analytic gradient."""
    p = model.params
    hist, mask, items, w = batch.hist, batch.mask, batch.item, batch.weight
    B, L = hist.shape
    lens = mask.sum(axis=1)
    inv_len = 1.0 / np.maximum(lens, 1)

    # user tower: pooled = A_topic @ user_topic + A_fine @ user_fine, with A
    # holding each example's (length-normalised) feature counts
    h_flat = hist.ravel()
    live = mask.ravel()
    b_idx = np.repeat(np.arange(B), L)[live]
    rows_h = h_flat[live]
    w_h = inv_len[b_idx]
    n_top, n_fine = len(p["user_topic"]), len(p["user_fine"])
    A_topic = np.bincount(b_idx * n_top + corpus.topic[rows_h], weights=w_h, minlength=B * n_top).reshape(B, n_top)
    fine_h, fmask_h, fcnt_h = _fine_parts(corpus, rows_h)
    share = (w_h / fcnt_h)[:, None] * fmask_h
    A_fine = np.bincount(
        (b_idx[:, None] * n_fine + fine_h)[fmask_h], weights=share[fmask_h], minlength=B * n_fine
    ).reshape(B, n_fine)
    pooled = A_topic @ p["user_topic"] + A_fine @ p["user_fine"]
    U = p["bias"][None, :] + pooled @ p["W"].T

    # item tower
    V = item_vectors(model, corpus, items)

    S = U @ V.T
    if batch.log_q is not None:
        # in-batch negatives arrive in proportion to item frequency; without this
        # shift the loss learns to demote popular items
        S = S - batch.log_q[None, :]
    S_max = S.max(axis=1, keepdims=True)
    E = np.exp(S - S_max)
    P = E / E.sum(axis=1, keepdims=True)
    wn = w / w.sum()
    loss = float(np.sum(wn * (-np.diag(S) + S_max[:, 0] + np.log(E.sum(axis=1)))))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite in-batch softmax loss ({loss})")

    dS = (P - np.eye(B)) * wn[:, None]
    dU = dS @ V
    dV = dS.T @ U

    grads = {}
    grads["bias"] = dU.sum(axis=0)
    grads["W"] = dU.T @ pooled
    dpooled = dU @ p["W"]
    grads["user_topic"] = A_topic.T @ dpooled
    grads["user_fine"] = A_fine.T @ dpooled

    fine_i, fmask_i, fcnt_i = _fine_parts(corpus, items)
    grads["topic"] = _scatter(p["topic"].shape, corpus.topic[items], dV)
    share = (fmask_i / fcnt_i[:, None])[..., None] * dV[:, None, :]
    grads["fine"] = _scatter(p["fine"].shape, fine_i.ravel(), share.reshape(-1, model.dim))
    grads["lang"] = _scatter(p["lang"].shape, corpus.language[items], dV)
    grads["rating"] = corpus.avg_rating[items] @ dV
    if not model.flags.drop_id:
        grads["item_id"] = _scatter(p["item_id"].shape, items, dV)
    if not model.flags.drop_popularity:
        b_imp = popularity_bucket(corpus.impressions[items], model.n_buckets)
        b_pos = model.n_buckets + popularity_bucket(corpus.positives[items], model.n_buckets)
        grads["popularity"] = _scatter(p["popularity"].shape, np.concatenate([b_imp, b_pos]), np.vstack([dV, dV]))
    return loss, grads


def sgd_step(params: dict, grads: dict, lr: float, clip_norm: float | None) -> float:
    """In-place clipped SGD step; returns the (pre-clip) gradient norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = lr
    if clip_norm is not None and norm > clip_norm:
        scale = lr * clip_norm / norm
    for k, g in grads.items():
        params[k] -= scale * g
    return norm


def train(
    model: TwoTowerModel,
    examples,
    corpus: Corpus,
    config: TwoTowerConfig = TwoTowerConfig(),
    seed: int = 0,
    steps: int | None = None,
) -> TwoTowerModel:
    """Minibatch SGD on the in-batch softmax loss; returns a new snapshot.

    Batches walk through a seeded permutation of the examples, reshuffled
    each pass.
    """
    if not isinstance(examples, ExampleArrays):
        examples = ExampleArrays.from_examples(examples, config.history_window)
    if len(examples) == 0:
        raise ValueError("train needs at least one example")
    if config.sampling_correction and examples.log_q is None:
        examples = examples.with_frequency_correction()
    steps = config.steps_per_retrain if steps is None else steps
    new = model.copy()
    new.ensure_items(len(corpus))
    if steps <= 0:
        return new
    rng = np.random.default_rng(seed)
    bs = min(config.batch_size, len(examples))
    order = rng.permutation(len(examples))
    cursor = 0
    for _ in range(steps):
        if cursor + bs > len(order):
            order = rng.permutation(len(examples))
            cursor = 0
        batch = examples.take(order[cursor : cursor + bs])
        cursor += bs
        _, grads = batch_loss_and_grads(new, corpus, batch)
        sgd_step(new.params, grads, config.learning_rate, config.clip_norm)
    return new


# --------------------------------------------------------------------------
# serving


def low_funnel_rows(corpus: Corpus, now_tick: int, cap: int, freshness_ticks: int, rating_threshold: float = 0.0):
    """Fresh items below the low-funnel interaction cap."""
    age = now_tick - corpus.upload_tick
    keep = (age >= 0) & (age <= freshness_ticks) & (corpus.positives < cap)
    if rating_threshold > 0:
        keep &= corpus.avg_rating >= rating_threshold
    return np.flatnonzero(keep)


def build_index(model: TwoTowerModel, corpus: Corpus, rows) -> ExactIndex:
    rows = np.asarray(rows, dtype=np.int64)
    vecs = item_vectors(model, corpus, rows) if len(rows) else np.zeros((0, model.dim))
    return ExactIndex(corpus.item_id[rows], vecs, positives=corpus.positives[rows], rows=rows)


def retrieve_topk_low(model: TwoTowerModel, user_vec, index: ExactIndex, k: int = 50) -> list[tuple[int, float]]:
    """Exact top-k items by inner product with ``user_vec``."""
    return index.search(user_vec, k)
