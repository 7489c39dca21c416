"""Shared builders for small test fixtures."""

import numpy as np

from freshfunnel.world import ContentItem, Corpus, UserBase


def make_corpus(n_items: int, seed: int = 0, n_topics: int = 5, n_fine: int = 12, n_languages: int = 3,
                upload_tick: int = 0) -> Corpus:
    """Small random corpus for model tests."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_items):
        k = int(rng.integers(1, 4))
        fine = tuple(sorted(set(int(f) for f in rng.integers(0, n_fine, k))))
        q = float(rng.random())
        pos = int(rng.integers(0, 50))
        items.append(ContentItem(i, i % 4, upload_tick, int(rng.integers(n_topics)), fine,
                                 int(rng.integers(n_languages)), float(rng.random()), q, pos, pos + int(rng.integers(0, 500))))
    c = Corpus()
    c.add(items)
    return c


def make_users(n: int, n_topics: int = 5, seed: int = 0) -> UserBase:
    rng = np.random.default_rng(seed)
    return UserBase(np.arange(n), rng.dirichlet(np.ones(n_topics), size=n), rng.integers(0, 3, n))
