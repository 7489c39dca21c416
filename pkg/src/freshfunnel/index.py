"""Exact maximum-inner-product search.

Corpus sizes here stay below ~1e5, so brute force is exact and fast enough.
Anything offering ``search``/``search_batch`` can stand in for this class.
"""

from __future__ import annotations

import numpy as np

from ._util import topk_rows


class ExactIndex:
    def __init__(self, item_ids, vectors, positives=None, rows=None):
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        vectors = np.asarray(vectors, dtype=float)
        self.vectors = vectors.reshape(len(self.item_ids), vectors.shape[-1] if vectors.ndim > 1 else -1)
        # counters at build time, kept for funnel bookkeeping
        self.positives = None if positives is None else np.asarray(positives, dtype=np.int64)
        self.rows = None if rows is None else np.asarray(rows, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.item_ids)

    def search_batch(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Column positions (-1 padded) and scores of the top-k per query."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        if len(self) == 0:
            return np.full((len(queries), k), -1, dtype=np.int64), np.full((len(queries), k), -np.inf)
        return topk_rows(queries @ self.vectors.T, self.item_ids, k)

    def search(self, query, k: int) -> list[tuple[int, float]]:
        cols, scores = self.search_batch(np.asarray(query)[None, :], k)
        keep = cols[0] >= 0
        return [(int(self.item_ids[c]), float(s)) for c, s in zip(cols[0][keep], scores[0][keep])]


def brute_force_topk(item_ids, vectors, query, k: int) -> list[tuple[int, float]]:
    """Reference: full sort by (-score, item_id)."""
    scores = np.asarray(vectors, dtype=float) @ np.asarray(query, dtype=float)
    ranked = sorted(zip(np.asarray(item_ids).tolist(), scores.tolist()), key=lambda t: (-t[1], t[0]))
    return [(int(i), float(s)) for i, s in ranked[:k]]
