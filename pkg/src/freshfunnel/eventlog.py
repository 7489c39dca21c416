"""Append-only impression/interaction log shared by every metric."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .world import GOOD_CLICK_SECONDS

SLOT_KINDS = ("main", "dedicated")
PROVENANCES = ("main", "low_funnel", "mid_funnel")

_COLUMNS = {
    "event_id": np.int64,
    "tick": np.int64,
    "user_id": np.int64,
    "item_id": np.int64,
    "arm": np.int16,
    "slot": np.int8,
    "impressed": np.bool_,
    "clicked": np.bool_,
    "dwell_seconds": np.float64,
    "provenance": np.int8,
    "index_positives": np.int64,
}


class CorruptLogError(ValueError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class Event:
    event_id: int
    tick: int
    user_id: int
    item_id: int
    arm_id: str
    slot_kind: str
    impressed: bool
    clicked: bool
    dwell_seconds: float
    provenance: str = "main"
    index_positives: int = -1

    @property
    def positive(self) -> bool:
        return self.clicked and self.dwell_seconds >= GOOD_CLICK_SECONDS


class EventLog:
    """Columnar event store. Events keep non-decreasing tick order."""

    def __init__(self, arm_ids: Sequence[str] = ("arm",)):
        self.arm_ids = list(arm_ids)
        self._chunks: list[dict[str, np.ndarray]] = []
        self._cache: dict[str, np.ndarray] | None = None
        self._n = 0
        self._last_tick = -(2**62)

    def __len__(self) -> int:
        return self._n

    def arm_index(self, arm_id: str) -> int:
        return self.arm_ids.index(arm_id)

    def append_batch(
        self,
        tick: int,
        user_id,
        item_id,
        clicked,
        dwell_seconds,
        *,
        arm=0,
        slot=0,
        provenance=0,
        index_positives=-1,
        impressed=True,
    ) -> np.ndarray:
        user_id = np.asarray(user_id, dtype=np.int64)
        m = user_id.size
        if m == 0:
            return np.zeros(0, dtype=np.int64)
        if tick < self._last_tick:
            raise ValueError("events must be appended in non-decreasing tick order")
        cols = {
            "event_id": np.arange(self._n, self._n + m, dtype=np.int64),
            "tick": np.full(m, tick, dtype=np.int64),
            "user_id": user_id,
            "item_id": np.asarray(item_id, dtype=np.int64),
            "arm": np.broadcast_to(np.asarray(arm, dtype=np.int16), (m,)).copy(),
            "slot": np.broadcast_to(np.asarray(slot, dtype=np.int8), (m,)).copy(),
            "impressed": np.broadcast_to(np.asarray(impressed, dtype=bool), (m,)).copy(),
            "clicked": np.asarray(clicked, dtype=bool),
            "dwell_seconds": np.asarray(dwell_seconds, dtype=np.float64),
            "provenance": np.broadcast_to(np.asarray(provenance, dtype=np.int8), (m,)).copy(),
            "index_positives": np.broadcast_to(np.asarray(index_positives, dtype=np.int64), (m,)).copy(),
        }
        if np.any(cols["clicked"] & ~cols["impressed"]):
            raise ValueError("clicked events must be impressed")
        self._chunks.append(cols)
        self._cache = None
        self._n += m
        self._last_tick = tick
        return cols["event_id"]

    def append(self, event: Event) -> None:
        self.append_batch(
            event.tick,
            [event.user_id],
            [event.item_id],
            [event.clicked],
            [event.dwell_seconds],
            arm=self.arm_index(event.arm_id),
            slot=SLOT_KINDS.index(event.slot_kind),
            provenance=PROVENANCES.index(event.provenance),
            index_positives=event.index_positives,
            impressed=event.impressed,
        )

    @property
    def columns(self) -> dict[str, np.ndarray]:
        if self._cache is None:
            if self._chunks:
                merged = {k: np.concatenate([c[k] for c in self._chunks]) for k in _COLUMNS}
            else:
                merged = {k: np.zeros(0, dtype=t) for k, t in _COLUMNS.items()}
            self._chunks = [merged] if self._chunks else []
            self._cache = merged
        return self._cache

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    @property
    def positive(self) -> np.ndarray:
        c = self.columns
        return c["clicked"] & (c["dwell_seconds"] >= GOOD_CLICK_SECONDS)

    def __iter__(self) -> Iterator[Event]:
        c = self.columns
        for r in range(self._n):
            yield self._event(c, r)

    def _event(self, c, r) -> Event:
        return Event(
            int(c["event_id"][r]),
            int(c["tick"][r]),
            int(c["user_id"][r]),
            int(c["item_id"][r]),
            self.arm_ids[int(c["arm"][r])],
            SLOT_KINDS[int(c["slot"][r])],
            bool(c["impressed"][r]),
            bool(c["clicked"][r]),
            float(c["dwell_seconds"][r]),
            PROVENANCES[int(c["provenance"][r])],
            int(c["index_positives"][r]),
        )

    def select(self, mask) -> "EventLog":
        """New log holding the masked events (event ids preserved)."""
        out = EventLog(self.arm_ids)
        c = self.columns
        mask = np.asarray(mask, dtype=bool)
        if mask.any():
            out._chunks = [{k: v[mask].copy() for k, v in c.items()}]
            out._n = int(mask.sum())
            out._last_tick = int(out._chunks[0]["tick"][-1])
        return out

    def check_invariants(self) -> None:
        c = self.columns
        if np.any(np.diff(c["tick"]) < 0):
            raise AssertionError("event ticks decrease")
        if np.any(c["clicked"] & ~c["impressed"]):
            raise AssertionError("click without impression")

    # ------------------------------------------------------------------ io

    def write_jsonl(self, path) -> None:
        c = self.columns
        arms = self.arm_ids
        with open(path, "w", encoding="utf-8") as fh:
            for r in range(self._n):
                fh.write(
                    '{"event_id": %d, "tick": %d, "user_id": %d, "item_id": %d, "arm_id": %s, '
                    '"slot_kind": "%s", "impressed": %s, "clicked": %s, "dwell_seconds": %r, '
                    '"provenance": "%s", "index_positives": %d}\n'
                    % (
                        c["event_id"][r],
                        c["tick"][r],
                        c["user_id"][r],
                        c["item_id"][r],
                        json.dumps(arms[c["arm"][r]]),
                        SLOT_KINDS[c["slot"][r]],
                        "true" if c["impressed"][r] else "false",
                        "true" if c["clicked"][r] else "false",
                        float(c["dwell_seconds"][r]),
                        PROVENANCES[c["provenance"][r]],
                        c["index_positives"][r],
                    )
                )

    @classmethod
    def read_jsonl(cls, path) -> "EventLog":
        path = Path(path)
        rows = {k: [] for k in _COLUMNS}
        arm_ids: list[str] = []
        arm_pos: dict[str, int] = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.endswith("\n"):
                    raise CorruptLogError(path, line_no, "truncated line")
                if not line.strip():
                    continue
                try:
                    ev = json.loads(line)
                    arm = ev["arm_id"]
                    if arm not in arm_pos:
                        arm_pos[arm] = len(arm_ids)
                        arm_ids.append(arm)
                    rows["event_id"].append(int(ev["event_id"]))
                    rows["tick"].append(int(ev["tick"]))
                    rows["user_id"].append(int(ev["user_id"]))
                    rows["item_id"].append(int(ev["item_id"]))
                    rows["arm"].append(arm_pos[arm])
                    rows["slot"].append(SLOT_KINDS.index(ev["slot_kind"]))
                    rows["impressed"].append(bool(ev["impressed"]))
                    rows["clicked"].append(bool(ev["clicked"]))
                    rows["dwell_seconds"].append(float(ev["dwell_seconds"]))
                    rows["provenance"].append(PROVENANCES.index(ev.get("provenance", "main")))
                    rows["index_positives"].append(int(ev.get("index_positives", -1)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise CorruptLogError(path, line_no, f"unparseable event ({exc})") from None
        log = cls(arm_ids or ["arm"])
        n = len(rows["event_id"])
        if n:
            log._chunks = [{k: np.asarray(v, dtype=_COLUMNS[k]) for k, v in rows.items()}]
            log._n = n
            log._last_tick = int(log._chunks[0]["tick"][-1])
            try:
                log.check_invariants()
            except AssertionError as exc:
                raise CorruptLogError(path, n, str(exc)) from None
        return log


def recount(log: EventLog, item_ids) -> tuple[np.ndarray, np.ndarray]:
    """(impressions, positives) per item recomputed from the log."""
    item_ids = np.asarray(item_ids, dtype=np.int64)
    c = log.columns
    order = np.argsort(item_ids)
    pos_in = np.searchsorted(item_ids[order], c["item_id"])
    pos_in = np.clip(pos_in, 0, max(len(item_ids) - 1, 0))
    known = (item_ids[order][pos_in] == c["item_id"]) if len(item_ids) else np.zeros(len(log), bool)
    rows = order[pos_in[known]]
    imp = np.bincount(rows, weights=c["impressed"][known], minlength=len(item_ids)).astype(np.int64)
    pos = np.bincount(rows, weights=log.positive[known], minlength=len(item_ids)).astype(np.int64)
    return imp, pos
