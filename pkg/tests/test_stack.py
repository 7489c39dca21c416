import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freshfunnel import realtime as rt
from freshfunnel import two_tower as tt
from freshfunnel.bandit import ArmTable, GlobalPrior
from freshfunnel.main_recsys import MainModel
from freshfunnel.stack import (
    LOW_FUNNEL,
    MID_FUNNEL,
    RankerModel,
    StackConfig,
    StackModels,
    choose_nominator,
    graduation_filter,
    rank_final,
    serve_dedicated_batch,
    serve_dedicated_slot,
)
from freshfunnel.world import ContentItem, SimUser
from helpers import make_corpus, make_users


def test_graduation_filter_examples():
    below = [(1, 0), (2, 5), (3, 9)]
    assert graduation_filter(below, 10) == below
    assert graduation_filter([(1, 10), (2, 3)], 10) == [(2, 3)]
    item = ContentItem(1, 0, 0, 0, (1,), 0, 0.5, 0.5, positive_interactions=10, impressions=20)
    assert graduation_filter([item], 10) == []


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 100), st.integers(0, 30)), max_size=60), st.integers(1, 30))
def test_graduation_filter_matches_comprehension(cands, G):
    assert graduation_filter(cands, G) == [c for c in cands if c[1] < G]


def test_choose_nominator_rates():
    rng = np.random.default_rng(0)
    core, casual = SimUser(0, np.array([1.0]), "core"), SimUser(1, np.array([1.0]), "casual")
    assert all(choose_nominator(core, rng, StackConfig(p_two_tower=100)) == LOW_FUNNEL for _ in range(1000))
    n = 100_000
    low = sum(choose_nominator(casual, rng, StackConfig(p_two_tower=80)) == LOW_FUNNEL for _ in range(n))
    assert 0.796 <= low / n <= 0.804
    ctx = StackConfig(contextual_mode=True, q_core_realtime=40)
    assert all(choose_nominator(casual, rng, ctx) == LOW_FUNNEL for _ in range(1000))
    mid = sum(choose_nominator(core, rng, ctx) == MID_FUNNEL for _ in range(n))
    assert abs(mid / n - 0.40) < 0.005


def test_stack_config_validation():
    with pytest.raises(ValueError):
        StackConfig(graduation_threshold=100, n_low=100, p_two_tower=80)
    with pytest.raises(ValueError):
        StackConfig(graduation_threshold=100, n_low=0, p_two_tower=80)
    with pytest.raises(ValueError):
        StackConfig(p_two_tower=120)
    s = StackConfig.single_two_tower(100)
    assert s.uses_low and not s.uses_mid
    r = StackConfig.single_real_time(100)
    assert r.uses_mid and not r.uses_low


def ranker(positives, lam, topics=None):
    m = MainModel(2, 0, affinity_blend=1.0)
    topics = topics or [0] * len(positives)
    m.add_items(list(range(10, 10 + len(positives))), topics, positives=positives)
    return RankerModel(m, lam)


def test_rank_final_examples():
    u = SimUser(0, np.array([1.0, 0.0]), "core")
    assert rank_final(ranker([3], 0.5), u, []) is None
    assert rank_final(ranker([3], 0.5), u, [10]) == 10
    assert rank_final(ranker([3, 3], 0.0), u, [11, 10]) == 10
    # the mid-funnel item (150 positives) beats a low-funnel one (5) at equal relevance
    assert rank_final(ranker([5, 150], 5.0), u, [10, 11]) == 11


def serving_setup(n_items=60, n_users=30, G=40, n_low=10, seed=0):
    corpus = make_corpus(n_items, seed=seed, n_topics=5, n_fine=12, n_languages=3, upload_tick=0)
    corpus.positives[:] = np.random.default_rng(seed).integers(0, 60, n_items)
    users = make_users(n_users, n_topics=5, seed=seed)
    for u in range(n_users):
        users.history.append([u] * 3, np.random.default_rng(u).integers(0, n_items, 3), [20.0] * 3, [0, 1, 2])
    main = MainModel(5, 10**9)
    main.add_items(corpus.item_id, corpus.topic, corpus.positives, corpus.impressions)
    arms = ArmTable()
    arms.grow(n_items)
    cfg = StackConfig(graduation_threshold=G, n_low=n_low, p_two_tower=50, k_nominate=50, m_prescore=10)
    two = tt.TwoTowerModel.init(5, 12, 3, 8, seed=1)
    low_index = tt.build_index(two, corpus, tt.low_funnel_rows(corpus, 10, n_low, cfg.freshness_ticks))
    seq = rt.SequenceModel.init(5, 12, 3, 8, 2, seed=2)
    rt.attach_index(seq, corpus, rt.mid_funnel_rows(corpus, 10, n_low, G, cfg.freshness_ticks))
    models = StackModels(RankerModel(main, 0.5), arms, GlobalPrior(), two, low_index, None, seq)
    return corpus, users, models, cfg


def test_serve_batch_funnel_partition_and_stages():
    corpus, users, models, cfg = serving_setup()
    rng = np.random.default_rng(3)
    res = serve_dedicated_batch(np.arange(len(users)), users, corpus, models, cfg, 10, rng.random(len(users)), rng)
    served = res.rows >= 0
    assert served.any()
    assert np.all(res.n_filtered <= 50) and np.all(res.n_prescored <= 10)
    assert np.all(res.n_filtered <= res.n_nominated) and np.all(res.n_prescored <= res.n_filtered)
    pos = corpus.positives[res.rows[served]]
    assert np.all(pos < cfg.graduation_threshold)
    low = served & (res.provenance == 1)
    mid = served & (res.provenance == 2)
    assert np.all(res.index_positives[low] < cfg.n_low)
    assert np.all((res.index_positives[mid] >= cfg.n_low) & (res.index_positives[mid] < cfg.graduation_threshold))


def test_served_item_is_below_threshold_even_if_counters_moved():
    corpus, users, models, cfg = serving_setup()
    corpus.positives[:] = cfg.graduation_threshold  # everything graduated after the index build
    rng = np.random.default_rng(0)
    res = serve_dedicated_batch(np.arange(len(users)), users, corpus, models, cfg, 10, rng.random(len(users)), rng)
    assert np.all(res.rows == -1) and np.all(res.provenance == 0)


def test_serve_slot_empty_corpus_and_single_request():
    corpus, users, models, cfg = serving_setup()
    out = serve_dedicated_slot(0, users, corpus, models, np.random.default_rng(1), cfg, 10)
    assert out is None or (out[1] in (LOW_FUNNEL, MID_FUNNEL) and corpus.positives[corpus.rows([out[0]])[0]] < cfg.graduation_threshold)
    from freshfunnel.world import Corpus

    empty = Corpus()
    models.low_index = tt.build_index(models.two_tower, empty, np.zeros(0, dtype=np.int64))
    rt.attach_index(models.sequence, empty, np.zeros(0, dtype=np.int64))
    assert serve_dedicated_slot(0, users, empty, models, np.random.default_rng(1), cfg, 10) is None


def test_stale_snapshot_is_refused():
    corpus, users, models, cfg = serving_setup()
    models.sequence.checkpoint_tick = 99
    cfg = StackConfig(graduation_threshold=40, n_low=10, p_two_tower=0.0 + 1e-9)
    with pytest.raises(rt.StaleSnapshotError):
        serve_dedicated_batch([0], users, corpus, models, cfg, 10, np.array([0.5]), np.random.default_rng(0))
