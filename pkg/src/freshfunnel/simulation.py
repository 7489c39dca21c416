"""Tick-by-tick platform simulation.

One ``Simulation`` owns a corpus, a user base and the shared main system, and
serves one or more policies (a policy is a fresh stack configuration, or no
stack at all). Each user follows exactly one policy. Co-diverted experiments
build one Simulation per arm; user-diverted ones put every policy in a single
Simulation over a shared corpus.

Per tick, in order: uploads, daily jobs (two-tower retrain and prior refit),
index refresh, arrivals, main slates, dedicated slot, responses and logging,
counter/model updates, real-time training on the tick's window, and finally
history appends. Every random draw comes from a substream keyed by
(seed, stream key, purpose, tick) and has a fixed shape, so runs that differ
only in policy settings share their randomness wherever it is meaningful.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import realtime as rt
from . import two_tower as tt
from ._util import scatter_add, substream
from .bandit import PRIOR_BOUNDS, ArmTable, GlobalPrior, fit_prior
from .eventlog import EventLog
from .main_recsys import MainConfig, MainModel, ingest_rows, recommend_main_slates
from .stack import RankerModel, StackConfig, StackModels, serve_dedicated_batch
from .world import (
    GOOD_CLICK_SECONDS,
    TICKS_PER_DAY,
    ContentItem,
    Corpus,
    Provider,
    UserBase,
    WorldConfig,
    respond,
    spawn_uploads,
)

log = logging.getLogger(__name__)

EXPOSURE_DAYS = 7


@dataclass(frozen=True)
class BanditConfig:
    min_impressions: int = 100
    prior_window_days: int = 7
    bounds: tuple[float, float] = PRIOR_BOUNDS
    alpha0: float = 1.0
    beta0: float = 1.0


@dataclass(frozen=True)
class ArmPolicy:
    """What an arm's users get beyond the main slots; ``stack=None`` is main-only."""

    name: str = "treatment"
    stack: StackConfig | None = field(default_factory=StackConfig)
    two_tower: tt.TwoTowerConfig = field(default_factory=tt.TwoTowerConfig)
    realtime: rt.RealtimeConfig = field(default_factory=rt.RealtimeConfig)
    bandit: BanditConfig = field(default_factory=BanditConfig)


class _Examples:
    """Ring buffer of (history snapshot, positive item) pairs for the two-tower."""

    def __init__(self, capacity: int, width: int):
        self.hist = np.zeros((capacity, width), dtype=np.int64)
        self.mask = np.zeros((capacity, width), dtype=bool)
        self.item = np.zeros(capacity, dtype=np.int64)
        self.total = 0

    def __len__(self) -> int:
        return min(self.total, len(self.item))

    def add(self, hist, mask, items) -> None:
        cap, w = self.hist.shape
        for h, m, it in zip(hist, mask, items):
            r = self.total % cap
            self.hist[r] = 0
            self.mask[r] = False
            n = min(h.shape[0], w)
            self.hist[r, :n] = h[-n:] if n else h[:0]
            self.mask[r, :n] = m[-n:] if n else m[:0]
            self.item[r] = it
            self.total += 1

    def arrays(self) -> tt.ExampleArrays:
        n = len(self)
        return tt.ExampleArrays(self.hist[:n], self.mask[:n], self.item[:n], np.ones(n))


class _PolicyState:
    def __init__(self, idx: int, policy: ArmPolicy, wc: WorldConfig, seed: int, key):
        self.idx = idx
        self.policy = policy
        self.stack = policy.stack
        self.arms = ArmTable()
        self.prior = GlobalPrior(policy.bandit.alpha0, policy.bandit.beta0)
        self.tt_model = None
        self.tt_phi = None
        self.tt_ucache = None
        self.tt_udirty = None
        self.low_index = None
        self.queue = rt.SnapshotQueue()
        self.examples = None
        if self.stack is None:
            return
        n_fine = wc.fine_vocab_size
        if self.stack.uses_low:
            cfg = policy.two_tower
            self.tt_model = tt.TwoTowerModel.init(
                wc.n_topics, n_fine, wc.n_languages, cfg.embedding_dim, cfg.flags,
                cfg.n_popularity_buckets, seed=substream(seed, key, idx, "tt-init").integers(2**31),
                scale=cfg.init_scale,
            )
            self.examples = _Examples(cfg.max_examples, cfg.history_window)
        if self.stack.uses_mid:
            cfg = policy.realtime
            m = rt.SequenceModel.init(
                wc.n_topics, n_fine, wc.n_languages, cfg.embedding_dim, cfg.bin_dim,
                seed=substream(seed, key, idx, "rt-init").integers(2**31), scale=cfg.init_scale,
            )
            self.queue.publish(m)


@dataclass
class SimulationResult:
    log: EventLog
    corpus: Corpus
    provider_ids: np.ndarray
    provider_base_impressions: np.ndarray
    user_ids: np.ndarray
    user_policy: np.ndarray
    policy_names: list[str]
    n_ticks: int
    uploads_per_day: np.ndarray
    stage_sizes: dict = field(default_factory=dict)


class Simulation:
    def __init__(
        self,
        world_config: WorldConfig,
        providers: Sequence[Provider],
        catalog: Sequence[ContentItem],
        users: UserBase,
        policies: Sequence[ArmPolicy],
        user_policy=None,
        *,
        main: MainConfig = MainConfig(),
        main_recall: int | None = None,
        seed: int = 0,
        stream_key="sim",
        id_base: int = 10**9,
    ):
        if not policies:
            raise ValueError("need at least one policy")
        self.wc = world_config
        self.providers = list(providers)
        self.users = users
        self.seed = seed
        self.key = stream_key
        self.main_config = main
        self.next_id = id_base
        self.user_policy = (
            np.zeros(len(users), dtype=np.int64) if user_policy is None else np.asarray(user_policy, dtype=np.int64)
        )
        if len(self.user_policy) != len(users):
            raise ValueError("user_policy needs one entry per user")
        self.policies = [_PolicyState(i, p, world_config, seed, stream_key) for i, p in enumerate(policies)]
        if main_recall is None:
            main_recall = main.min_interactions_for_recall
        if main_recall is None:
            stacks = [p.stack for p in policies if p.stack is not None]
            main_recall = stacks[0].graduation_threshold if stacks else StackConfig().graduation_threshold
        self.main = MainModel(
            world_config.n_topics, main_recall, main.lambda_pop, main.affinity_blend, main.exclude_consumed,
            users.ids, users.pref,
        )
        self.corpus = Corpus()
        self.log = EventLog([p.name for p in policies])
        self.prov_index = {p.provider_id: i for i, p in enumerate(self.providers)}
        self._prov_row = np.zeros(0, dtype=np.int64)
        self._exposure = deque([np.zeros(len(self.providers), dtype=np.int64)], maxlen=EXPOSURE_DAYS)
        self.uploads_per_day: list[int] = []
        self.stage_max = np.zeros(3, dtype=np.int64)
        self.tick = 0
        self._add_items(list(catalog), baseline=True)
        self.provider_base_impressions = np.bincount(
            self._prov_row, weights=self.corpus.base_impressions, minlength=len(self.providers)
        ).astype(np.int64)

    # -- corpus growth -------------------------------------------------------

    def _add_items(self, items: list[ContentItem], baseline: bool = False) -> None:
        if not items:
            return
        rows = self.corpus.add(items, baseline=baseline)
        self.main.add_items(
            [it.item_id for it in items], [it.topic_id for it in items],
            self.corpus.positives[rows], self.corpus.impressions[rows],
        )
        self._prov_row = np.concatenate([self._prov_row, [self.prov_index[it.provider_id] for it in items]])
        for ps in self.policies:
            ps.arms.grow(len(self.corpus))

    def _rng(self, purpose: str, *extra) -> np.random.Generator:
        return substream(self.seed, self.key, purpose, *extra)

    # -- daily jobs ------------------------------------------------------------

    def _daily(self, ps: _PolicyState, day: int) -> None:
        if ps.tt_model is not None and ps.examples is not None and len(ps.examples):
            ps.tt_model = tt.train(
                ps.tt_model, ps.examples.arrays(), self.corpus, ps.policy.two_tower,
                seed=int(self._rng("tt-train", ps.idx, day).integers(2**31)),
            )
            ps.tt_phi = None
            if ps.tt_udirty is not None:
                ps.tt_udirty[:] = True
        # prior over recent uploads with enough dedicated impressions
        b = ps.policy.bandit
        recent = self.corpus.upload_tick >= self.tick - b.prior_window_days * TICKS_PER_DAY
        sel = recent & (ps.arms.n >= b.min_impressions)
        if sel.sum() >= 2:
            try:
                ps.prior = fit_prior(
                    list(zip(ps.arms.x[sel].tolist(), ps.arms.n[sel].tolist())),
                    min_impressions=b.min_impressions, bounds=b.bounds,
                )
            except (ValueError, FloatingPointError) as exc:  # keep the previous prior
                log.warning("prior refit skipped on day %d: %s", day, exc)

    def _low_user_vectors(self, ps: _PolicyState, rows: np.ndarray) -> np.ndarray:
        """Two-tower user vectors, recomputed only after a history change or retrain."""
        if ps.tt_ucache is None:
            ps.tt_ucache = np.zeros((len(self.users), ps.tt_model.dim))
            ps.tt_udirty = np.ones(len(self.users), dtype=bool)
        stale = rows[ps.tt_udirty[rows]]
        if len(stale):
            hist, mask = self.users.history.recent_items(stale, ps.policy.two_tower.history_window)
            ps.tt_ucache[stale] = tt.embed_users(ps.tt_model, self.corpus, hist, mask, phi=self._phi(ps))
            ps.tt_udirty[stale] = False
        return ps.tt_ucache[rows]

    def _phi(self, ps: _PolicyState) -> np.ndarray:
        n = len(self.corpus)
        have = 0 if ps.tt_phi is None else len(ps.tt_phi)
        if have < n:
            new = tt.user_item_contributions(ps.tt_model, self.corpus, np.arange(have, n))
            ps.tt_phi = new if ps.tt_phi is None else np.vstack([ps.tt_phi, new])
        return ps.tt_phi

    # -- one tick --------------------------------------------------------------

    def step(self) -> None:
        t = self.tick
        day, tod = divmod(t, TICKS_PER_DAY)
        wc = self.wc
        corpus = self.corpus

        if tod == 0:
            if t > 0:
                self._exposure.append(np.zeros(len(self.providers), dtype=np.int64))
            self.uploads_per_day.append(0)
        exposure = np.sum(self._exposure, axis=0)
        items = spawn_uploads(t, self.providers, self._rng("upload", t), config=wc, recent_exposure=exposure,
                              start_id=self.next_id)
        self.next_id += len(items)
        self.uploads_per_day[-1] += len(items)
        self._add_items(items)

        if tod == 0 and t > 0:
            for ps in self.policies:
                if ps.stack is not None:
                    self._daily(ps, day)

        stats = None
        for ps in self.policies:
            st = ps.stack
            if st is None:
                continue
            if st.uses_low:
                rows = tt.low_funnel_rows(corpus, t, st.n_low, st.freshness_ticks,
                                          ps.policy.two_tower.rating_filter_threshold)
                ps.low_index = tt.build_index(ps.tt_model, corpus, rows)
            if st.uses_mid and stats is None:
                stats = rt.CorpusStats.from_corpus(corpus, wc.n_topics, wc.fine_vocab_size, wc.n_languages)

        # arrivals
        level_p = np.asarray(wc.arrival_probs)[self.users.level]
        arrived = np.flatnonzero(self._rng("arrive", t).random(len(self.users)) < level_p)
        B = len(arrived)
        k_main = self.main_config.main_slots_per_session
        pre_pos = corpus.positives.copy()

        # main slots
        main_rows = np.full((B, k_main), -1, dtype=np.int64)
        if B and k_main:
            ex_rows = ex_mask = None
            if self.main.exclude_consumed:
                ex_rows, ex_mask = self.users.history.recent_items(arrived)
                ex_rows = ex_rows.astype(np.int64)
            main_rows = recommend_main_slates(self.main, self.users.pref[arrived], k_main, ex_rows, ex_mask)
        rng_resp = self._rng("respond", t)
        rel, qual = self._relevance_quality(arrived, main_rows)
        m_click, m_dwell = respond(rel, qual, rng_resp, wc)

        # dedicated slot, per policy group
        u_choose = self._rng("choose", t).random(B)
        rng_bandit = self._rng("bandit", t)
        d_rows = np.full(B, -1, dtype=np.int64)
        d_prov = np.zeros(B, dtype=np.int8)
        d_ipos = np.full(B, -1, dtype=np.int64)
        pol_of = self.user_policy[arrived]
        for ps in self.policies:
            sel = np.flatnonzero(pol_of == ps.idx)
            if ps.stack is None or len(sel) == 0:
                continue
            models = StackModels(
                RankerModel(self.main, ps.stack.lambda_rank), ps.arms, ps.prior,
                ps.tt_model, ps.low_index, ps.tt_phi, ps.queue.servable(t),
                ps.policy.two_tower.history_window,
                (lambda r, ps=ps: self._low_user_vectors(ps, r)) if ps.tt_model is not None else None,
            )
            res = serve_dedicated_batch(arrived[sel], self.users, corpus, models, ps.stack, t, u_choose[sel], rng_bandit)
            d_rows[sel], d_prov[sel], d_ipos[sel] = res.rows, res.provenance, res.index_positives
            for j, v in enumerate((res.n_filtered, res.n_prescored, (res.rows >= 0).astype(np.int64))):
                if len(v):
                    self.stage_max[j] = max(self.stage_max[j], int(v.max()))
        d_rel, d_qual = self._relevance_quality(arrived, d_rows[:, None])
        d_click, d_dwell = respond(d_rel[:, 0], d_qual[:, 0], rng_resp, wc)

        # log events
        uid = self.users.ids[arrived]
        mr, mc = np.nonzero(main_rows >= 0)
        m_items = main_rows[mr, mc]
        self.log.append_batch(t, uid[mr], corpus.item_id[m_items], m_click[mr, mc], m_dwell[mr, mc],
                              arm=pol_of[mr], slot=0, provenance=0)
        dr = np.flatnonzero(d_rows >= 0)
        d_items = d_rows[dr]
        self.log.append_batch(t, uid[dr], corpus.item_id[d_items], d_click[dr], d_dwell[dr],
                              arm=pol_of[dr], slot=1, provenance=d_prov[dr], index_positives=d_ipos[dr])

        # counters, main model, bandit arms, provider exposure
        all_rows = np.concatenate([m_items, d_items])
        all_user = np.concatenate([arrived[mr], arrived[dr]])
        all_click = np.concatenate([m_click[mr, mc], d_click[dr]])
        all_dwell = np.concatenate([m_dwell[mr, mc], d_dwell[dr]])
        good = all_click & (all_dwell >= GOOD_CLICK_SECONDS)
        scatter_add(corpus.impressions, all_rows, 1)
        scatter_add(corpus.positives, all_rows[good], 1)
        ingest_rows(self.main, all_rows, np.ones(len(all_rows), dtype=bool), good, self.users.ids[all_user])
        d_good = good[len(m_items):]
        for ps in self.policies:
            sel = pol_of[dr] == ps.idx
            if ps.stack is not None and sel.any():
                ps.arms.update(d_items[sel], np.ones(sel.sum(), dtype=bool), d_good[sel])
        self._exposure[-1] += np.bincount(self._prov_row[d_items], minlength=len(self.providers))

        # training data for the nominators (histories as of before this tick)
        if good.any():
            g_users, g_rows = all_user[good], all_rows[good]
            g_pol = self.user_policy[g_users]
            for ps in self.policies:
                st = ps.stack
                if st is None:
                    continue
                sel = g_pol == ps.idx
                if not sel.any():
                    continue
                if ps.examples is not None:
                    w = ps.policy.two_tower.history_window
                    h, _, _, _, m = self.users.history.recent(g_users[sel], w)
                    ps.examples.add(h, m, g_rows[sel])
                if st.uses_mid:
                    self._train_realtime(ps, g_users[sel], g_rows[sel], pre_pos, stats)
        for ps in self.policies:
            st = ps.stack
            if st is not None and st.uses_mid and ps.queue.latest.checkpoint_tick < t + ps.policy.realtime.serving_lag_ticks:
                self._train_realtime(ps, np.zeros(0, np.int64), np.zeros(0, np.int64), pre_pos, stats)

        # histories: clicked items, in slot order
        c = all_click
        self.users.history.append(all_user[c], all_rows[c], all_dwell[c], np.full(c.sum(), t))
        for ps in self.policies:
            if ps.tt_udirty is not None:
                ps.tt_udirty[all_user[c]] = True
        self.tick += 1

    def _relevance_quality(self, users, rows):
        """Topic relevance and latent quality for (users, slots) item rows; 0 where empty."""
        if len(self.corpus) == 0:
            return np.zeros(rows.shape), np.zeros(rows.shape)
        safe = np.maximum(rows, 0)
        rel = np.take_along_axis(self.users.pref[users], self.corpus.topic[safe].astype(np.int64), axis=1)
        ok = rows >= 0
        return np.where(ok, rel, 0.0), np.where(ok, self.corpus.quality[safe], 0.0)

    def _train_realtime(self, ps: _PolicyState, users, rows, pre_pos, stats) -> None:
        st, cfg, t = ps.stack, ps.policy.realtime, self.tick
        corpus = self.corpus
        age = t - corpus.upload_tick[rows]
        keep = (pre_pos[rows] < st.graduation_threshold) & (age <= st.freshness_ticks)
        users, rows = users[keep][: cfg.max_window_events], rows[keep][: cfg.max_window_events]
        if len(rows):
            h, d, tk, rk, m = self.users.history.recent(users)
            window = rt.StreamWindow(t, rows, h.astype(np.int64), d, tk, rk, m, self.users.level[users].astype(np.int64))
        else:
            window = rt.StreamWindow.empty(t)
        snap = rt.train_on_window(ps.queue.latest, window, corpus, cfg, stats)
        # the index reflects counters at the end of this tick
        rt.attach_index(snap, corpus, rt.mid_funnel_rows(corpus, t, st.n_low, st.graduation_threshold, st.freshness_ticks))
        ps.queue.publish(snap)

    def run(self, n_days: int) -> "SimulationResult":
        if n_days < 0:
            raise ValueError("n_days must be >= 0")
        end = self.tick + n_days * TICKS_PER_DAY
        while self.tick < end:
            self.step()
            if self.tick % TICKS_PER_DAY == 0:
                log.debug("%s: day %d done, %d events", self.key, self.tick // TICKS_PER_DAY, len(self.log))
        return self.result()

    def result(self) -> SimulationResult:
        return SimulationResult(
            log=self.log,
            corpus=self.corpus,
            provider_ids=np.array([p.provider_id for p in self.providers], dtype=np.int64),
            provider_base_impressions=self.provider_base_impressions,
            user_ids=self.users.ids.copy(),
            user_policy=self.user_policy.copy(),
            policy_names=[ps.policy.name for ps in self.policies],
            n_ticks=self.tick,
            uploads_per_day=np.asarray(self.uploads_per_day, dtype=np.int64),
            stage_sizes={"after_filter": int(self.stage_max[0]), "after_bandit": int(self.stage_max[1]),
                         "final": int(self.stage_max[2])},
        )
