from collections import deque

import numpy as np
import pytest

from freshfunnel.world import (
    HISTORY_CAPACITY,
    TICKS_PER_DAY,
    Corpus,
    HistoryBuffer,
    Provider,
    SimUser,
    WorldConfig,
    click_probability,
    generate_world,
    respond,
    session_arrivals,
    spawn_uploads,
    upload_rates_per_tick,
    user_response,
)


def _daily_counts(providers, exposure, n_ticks, seed):
    rng = np.random.default_rng(seed)
    per = np.zeros(len(providers), dtype=np.int64)
    cfg = WorldConfig(exposure_ceiling=100.0)
    for t in range(n_ticks):
        for it in spawn_uploads(t, providers, rng, config=cfg, recent_exposure=exposure):
            per[it.provider_id] += 1
    return per


def test_zero_rate_provider_never_uploads():
    p = [Provider(0, 0.0, 1.0, 0.5)]
    rng = np.random.default_rng(0)
    assert all(spawn_uploads(t, p, rng) == [] for t in range(500))


@pytest.mark.parametrize("resp, exposure, factor", [(0.0, 0.0, 1.0), (1.0, 100.0, 2.0)])
def test_upload_rate_monte_carlo(resp, exposure, factor):
    # 100 identical providers x 100 days = 10,000 provider-days
    base = 2.0
    provs = [Provider(i, base, resp, 0.5) for i in range(100)]
    per = _daily_counts(provs, np.full(100, exposure), 100 * TICKS_PER_DAY, seed=1)
    daily_mean = per.sum() / 10_000
    expect = factor * base
    se = np.sqrt(expect / 10_000)  # Poisson day counts
    assert abs(daily_mean - expect) < 3 * se


def test_upload_rates_saturate_at_ceiling():
    provs = [Provider(0, 4.0, 1.0, 0.5)]
    cfg = WorldConfig(exposure_ceiling=10.0)
    at = upload_rates_per_tick(provs, [10.0], cfg)
    above = upload_rates_per_tick(provs, [1e6], cfg)
    assert at[0] == above[0] == pytest.approx(8.0 / TICKS_PER_DAY)


def test_saturated_click_probability():
    cfg = WorldConfig(click_intercept=-20.0)
    assert click_probability(0.0, 0.0, cfg) < 1e-8


def test_quality_raises_click_rate():
    cfg = WorldConfig()
    rng = np.random.default_rng(3)
    n = 100_000
    lo, _ = respond(np.full(n, 0.5), np.full(n, 0.2), rng, cfg)
    hi, _ = respond(np.full(n, 0.5), np.full(n, 0.9), rng, cfg)
    assert hi.mean() > lo.mean()


def test_no_click_means_zero_dwell():
    rng = np.random.default_rng(0)
    clicked, dwell = respond(np.random.default_rng(1).random(1000), np.full(1000, 0.5), rng, WorldConfig())
    assert np.all(dwell[~clicked] == 0.0)
    assert np.all(dwell[clicked] > 0.0)


def test_respond_consumes_a_fixed_amount_of_randomness():
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    respond(np.zeros(10), np.zeros(10), a, WorldConfig())
    respond(np.ones(10), np.ones(10), b, WorldConfig())
    assert a.random() == b.random()


def test_user_response_matches_vectorised_model():
    u = SimUser(1, np.array([0.25, 0.75]), "core")
    from freshfunnel.world import ContentItem

    item = ContentItem(9, 0, 0, 1, (3,), 0, 0.5, 0.7)
    r = user_response(u, item, np.random.default_rng(2))
    c, d = respond(np.array([0.75]), np.array([0.7]), np.random.default_rng(2), WorldConfig())
    assert (r.clicked, r.dwell_seconds) == (bool(c[0]), float(d[0]))


def test_arrivals_all_zero():
    users = [SimUser(i, np.array([1.0]), "core") for i in range(20)]
    assert session_arrivals(0, users, np.random.default_rng(0), (0.0, 0.0, 0.0)) == []


def test_arrival_rate_core():
    users = [SimUser(0, np.array([1.0]), "core")]
    rng = np.random.default_rng(11)
    hits = sum(len(session_arrivals(t, users, rng, (0.5, 0.1, 0.0))) for t in range(10_000))
    assert 0.48 <= hits / 10_000 <= 0.52


def test_arrival_ratio_core_vs_casual():
    users = [SimUser(i, np.array([1.0]), "core" if i < 50 else "casual") for i in range(100)]
    rng = np.random.default_rng(4)
    core = casual = 0
    for t in range(2000):
        for uid in session_arrivals(t, users, rng, (0.5, 0.1, 0.0)):
            if uid < 50:
                core += 1
            else:
                casual += 1
    # casual count ~ Binomial(100,000, 0.1): relative sd about 1%
    ratio = core / casual
    assert 4.7 < ratio < 5.3


def test_sim_user_validation_and_history():
    with pytest.raises(ValueError):
        SimUser(0, np.array([0.5, 0.6]), "core")
    with pytest.raises(ValueError):
        SimUser(0, np.array([1.0]), "lurker")
    u = SimUser(0, np.array([1.0]), "casual")
    for t in range(HISTORY_CAPACITY + 5):
        u.record(t, 12.0, t)
    assert len(u.history) == HISTORY_CAPACITY
    assert u.history[0].item_id == 5
    assert u.history[-1].position == HISTORY_CAPACITY + 4
    with pytest.raises(ValueError):
        u.record(1, 1.0, 0)


def test_history_buffer_ring_matches_deque():
    rng = np.random.default_rng(0)
    cap = 7
    buf = HistoryBuffer(3, capacity=cap)
    ref = [deque(maxlen=cap) for _ in range(3)]
    for t in range(30):
        users = rng.integers(0, 3, size=rng.integers(0, 5))
        items = rng.integers(0, 100, size=len(users))
        buf.append(users, items, np.full(len(users), 1.5), np.full(len(users), t))
        for u, i in zip(users, items):
            ref[u].append(int(i))
    items, dwell, ticks, rank, mask = buf.recent(np.arange(3))
    for u in range(3):
        assert items[u][mask[u]].tolist() == list(ref[u])
        assert rank[u][mask[u]].tolist() == list(range(len(ref[u]) - 1, -1, -1))
    it2, m2 = buf.recent_items(np.arange(3), max_len=4)
    for u in range(3):
        assert it2[u][m2[u]].tolist() == list(ref[u])[-4:]


def test_corpus_rejects_duplicates_and_round_trips():
    from freshfunnel.world import ContentItem

    c = Corpus()
    a = ContentItem(5, 1, 0, 2, (4, 9), 1, 0.3, 0.6, 3, 10)
    c.add([a])
    assert c.item(0) == a
    assert c.rows([5]).tolist() == [0]
    with pytest.raises(ValueError):
        c.add([a])
    with pytest.raises(KeyError):
        c.rows([6])


def test_generate_world_is_seed_deterministic():
    cfg = WorldConfig(n_users=50, n_providers=5)
    a, b = generate_world(cfg, 3), generate_world(cfg, 3)
    assert a.catalog == b.catalog
    assert np.array_equal(a.users.pref, b.users.pref)
    assert np.allclose(a.users.pref.sum(axis=1), 1.0)
    assert all(it.upload_tick < 0 and it.positive_interactions >= cfg.catalog_min_positives for it in a.catalog)
