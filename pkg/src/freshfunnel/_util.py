"""Small shared helpers: seeded substreams, exact top-k, growable columns."""

from __future__ import annotations

import hashlib
from typing import Any

import numpy as np


def stable_hash(*keys: Any) -> int:
    """64-bit hash of the keys' string forms, stable across processes."""
    h = hashlib.blake2b(digest_size=8)
    for key in keys:
        h.update(str(key).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def substream(seed: int, *keys: Any) -> np.random.Generator:
    """Independent generator keyed by (seed, *keys)."""
    spawn_key = tuple(stable_hash(k) & 0xFFFFFFFF for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))


def hash_unit(seed: int, *keys: Any) -> float:
    """Deterministic pseudo-uniform value in [0, 1)."""
    return stable_hash(seed, *keys) / 2.0**64


def topk_rows(scores: np.ndarray, ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-row top-k: descending score, ties to the smaller id.

    Non-finite scores are never selected. Returns column indices (-1 padded)
    and the matching scores (-inf padded), both of shape (rows, k).
    """
    scores = np.asarray(scores, dtype=float)
    n_rows, n_cols = scores.shape
    out_idx = np.full((n_rows, k), -1, dtype=np.int64)
    out_val = np.full((n_rows, k), -np.inf)
    if n_rows == 0 or n_cols == 0 or k <= 0:
        return out_idx, out_val
    kk = min(k, n_cols)
    work = scores
    if not np.isfinite(work).all():
        work = np.where(np.isfinite(work), work, -np.inf)
    ids = np.asarray(ids)
    cand = np.argpartition(work, n_cols - kk, axis=1)[:, n_cols - kk :]
    vals = np.take_along_axis(work, cand, axis=1)
    thr = vals.min(axis=1)
    # rows with ties straddling the cut must pick the smaller ids among the tied
    for r in np.flatnonzero(((work >= thr[:, None]).sum(axis=1) > kk) & (thr > -np.inf)):
        above = np.flatnonzero(work[r] > thr[r])
        at = np.flatnonzero(work[r] == thr[r])
        at = at[np.argsort(ids[at], kind="stable")][: kk - len(above)]
        cand[r] = np.concatenate([above, at])
        vals[r] = work[r, cand[r]]
    # order each row by (-score, id): sort by id, then stable sort by score
    o = np.argsort(ids[cand], axis=1, kind="stable")
    cand, vals = np.take_along_axis(cand, o, axis=1), np.take_along_axis(vals, o, axis=1)
    o = np.argsort(-vals, axis=1, kind="stable")
    cand, vals = np.take_along_axis(cand, o, axis=1), np.take_along_axis(vals, o, axis=1)
    live = vals > -np.inf
    out_idx[:, :kk] = np.where(live, cand, -1)
    out_val[:, :kk] = np.where(live, vals, -np.inf)
    return out_idx, out_val


class Column:
    """Append-only numpy column with amortised growth."""

    def __init__(self, dtype: Any, width: int | None = None, fill: Any = 0, capacity: int = 1024):
        shape = (capacity,) if width is None else (capacity, width)
        self._data = np.full(shape, fill, dtype=dtype)
        self._fill = fill
        self._n = 0

    def __len__(self) -> int:
        return self._n

    @property
    def view(self) -> np.ndarray:
        return self._data[: self._n]

    def extend(self, values: Any) -> None:
        values = np.asarray(values, dtype=self._data.dtype)
        m = values.shape[0] if values.ndim else 1
        need = self._n + m
        if need > self._data.shape[0]:
            cap = max(need, 2 * self._data.shape[0])
            grown = np.full((cap,) + self._data.shape[1:], self._fill, dtype=self._data.dtype)
            grown[: self._n] = self._data[: self._n]
            self._data = grown
        self._data[self._n : need] = values
        self._n = need


def scatter_add(target: np.ndarray, idx, values) -> None:
    """In-place ``target[idx] += values`` with repeated indices accumulating."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return
    values = np.asarray(values)
    if target.ndim == 1:
        w = np.broadcast_to(values, idx.shape).astype(float)
        target += np.bincount(idx, weights=w, minlength=len(target)).astype(target.dtype)
        return
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    target[sidx[starts]] += np.add.reduceat(values[order], starts, axis=0)
