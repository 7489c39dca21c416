import numpy as np
import pytest

from freshfunnel import realtime as rt
from freshfunnel.index import brute_force_topk
from freshfunnel.world import InteractionRecord
from gradcheck import fd_relative_errors
from helpers import make_corpus

N_TOPICS, N_FINE, N_LANG = 5, 12, 3


def model(dim=4, bin_dim=2, seed=0):
    return rt.SequenceModel.init(N_TOPICS, N_FINE, N_LANG, dim, bin_dim, seed=seed, scale=0.5)


def records(n, seed=0):
    rng = np.random.default_rng(seed)
    ticks = np.sort(rng.integers(0, 1000, n))
    return [InteractionRecord(int(i), float(rng.uniform(0, 900)), int(t), j) for j, (i, t) in enumerate(zip(rng.integers(0, 8, n), ticks))]


def test_uniform_attention_for_zero_map():
    m = model()
    np.testing.assert_allclose(rt.attention_weights(m, records(4), 2000), [0.25] * 4)
    np.testing.assert_allclose(rt.attention_weights(m, records(1), 2000), [1.0])
    with pytest.raises(ValueError):
        rt.attention_weights(m, [], 0)


def test_attention_is_a_distribution_for_random_maps():
    rng = np.random.default_rng(1)
    m = model()
    hist = records(20, seed=2)
    for _ in range(1000):
        m.params["f_w"] = 3.0 * rng.standard_normal(m.params["f_w"].shape)
        m.params["f_b"] = rng.standard_normal(1)
        for k in ("dwell_emb", "gap_emb", "pos_emb"):
            m.params[k] = rng.standard_normal(m.params[k].shape)
        w = rt.attention_weights(m, hist, 2000)
        assert abs(w.sum() - 1.0) < 1e-9
        assert np.all((w >= 0) & (w <= 1))


def test_user_state_examples():
    corpus = make_corpus(8, seed=3, n_topics=N_TOPICS, n_fine=N_FINE, n_languages=N_LANG)
    m = model()
    one = [InteractionRecord(5, 30.0, 10, 0)]
    np.testing.assert_allclose(rt.user_state(m, one, 20, corpus), rt.item_vectors(m, corpus, [5])[0])
    two = [InteractionRecord(2, 30.0, 10, 0), InteractionRecord(6, 100.0, 12, 1)]
    e = rt.item_vectors(m, corpus, [2, 6])
    np.testing.assert_allclose(rt.user_state(m, two, 20, corpus), e.mean(axis=0))
    np.testing.assert_allclose(rt.user_state(m, [], 20, corpus), m.params["cold"])
    ctx = rt.user_state(m, one, 20, corpus, "core")
    np.testing.assert_allclose(ctx, rt.item_vectors(m, corpus, [5])[0] + m.params["context"][0])


def test_idf_examples():
    stats = rt.CorpusStats(999, np.array([999, 0, 9]), np.zeros(1, int), np.zeros(1, int))
    assert rt.idf_weight(("topic", 0), stats) < np.log(2)
    assert rt.idf_weight(("topic", 1), stats) == pytest.approx(np.log(1000))
    assert rt.idf_weight(("topic", 2), stats) == pytest.approx(4.614, abs=1e-3)
    with pytest.raises(ValueError):
        rt.idf_weight(("topic", 0), rt.CorpusStats(0, np.zeros(1), np.zeros(1), np.zeros(1)))


def test_idf_from_corpus_counts_documents():
    corpus = make_corpus(30, seed=4, n_topics=N_TOPICS, n_fine=N_FINE, n_languages=N_LANG)
    stats = rt.CorpusStats.from_corpus(corpus, N_TOPICS, N_FINE, N_LANG)
    assert stats.topic_df.sum() == 30
    for f in range(N_FINE):
        assert stats.fine_df[f] == sum(f in corpus.item(r).fine_category_ids for r in range(30))


def window(corpus, n=5, L=4, seed=0, tick=500):
    rng = np.random.default_rng(seed)
    hist = rng.integers(0, len(corpus), (n, L))
    mask = np.arange(L)[None, :] < rng.integers(0, L + 1, n)[:, None]
    mask[0] = False
    mask[1] = True
    dwell = rng.uniform(0, 900, (n, L))
    ticks = rng.integers(0, tick, (n, L))
    rank = np.tile(np.arange(L)[::-1], (n, 1))
    return rt.StreamWindow(tick, rng.integers(0, len(corpus), n), hist, dwell, ticks, rank, mask, rng.integers(0, 3, n))


@pytest.mark.parametrize("use_context", [True, False])
def test_window_gradient_matches_finite_differences(use_context):
    corpus = make_corpus(10, seed=5, n_topics=N_TOPICS, n_fine=N_FINE, n_languages=N_LANG)
    m = model()
    m.ensure_items(len(corpus))
    rng = np.random.default_rng(9)
    for k in ("item_id", "f_w", "f_b"):
        m.params[k] = 0.5 * rng.standard_normal(m.params[k].shape)
    m.set_idf(rt.CorpusStats.from_corpus(corpus, N_TOPICS, N_FINE, N_LANG))
    w = window(corpus)
    _, grads = rt.window_loss_and_grads(m, corpus, w, use_context)
    errs = fd_relative_errors(m.params, lambda: rt.window_loss_and_grads(m, corpus, w, use_context)[0], grads)
    assert max(errs.values()) < 1e-4, errs


def test_empty_window_keeps_parameters_and_stamps_lag():
    corpus = make_corpus(5, n_topics=N_TOPICS, n_fine=N_FINE, n_languages=N_LANG)
    prev = model()
    out = rt.train_on_window(prev, rt.StreamWindow.empty(40), corpus, rt.RealtimeConfig(serving_lag_ticks=8))
    assert all(np.array_equal(out.params[k], prev.params[k]) for k in prev.params)
    assert out.checkpoint_tick == 48


def test_warm_start_moves_only_a_little():
    corpus = make_corpus(10, seed=6, n_topics=N_TOPICS, n_fine=N_FINE, n_languages=N_LANG)
    prev = model()
    cfg = rt.RealtimeConfig(embedding_dim=4, bin_dim=2, learning_rate=0.05)
    new = rt.train_on_window(prev, window(corpus), corpus, cfg)
    d = rt.parameter_distance(prev, new)
    assert 0 < d <= cfg.learning_rate * cfg.clip_norm + 1e-12
    assert new.params is not prev.params


def test_mid_funnel_rows_band():
    corpus = make_corpus(12, seed=7, n_topics=N_TOPICS, n_fine=N_FINE, n_languages=N_LANG, upload_tick=0)
    corpus.positives[:] = np.arange(12) * 10
    assert rt.mid_funnel_rows(corpus, 10, 20, 60, 100).tolist() == [2, 3, 4, 5]


def test_retrieve_topk_mid_stale_and_empty():
    corpus = make_corpus(6, n_topics=N_TOPICS, n_fine=N_FINE, n_languages=N_LANG)
    m = model()
    m.checkpoint_tick = 50
    with pytest.raises(rt.StaleSnapshotError):
        rt.retrieve_topk_mid(m, np.ones(4), 49)
    assert rt.retrieve_topk_mid(m, np.ones(4), 50) == []
    rt.attach_index(m, corpus, np.zeros(0, dtype=np.int64))
    assert rt.retrieve_topk_mid(m, np.ones(4), 60) == []


def test_retrieve_topk_mid_matches_full_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        corpus = make_corpus(n, seed=int(rng.integers(1 << 30)), n_topics=N_TOPICS, n_fine=N_FINE, n_languages=N_LANG)
        m = rt.SequenceModel.init(N_TOPICS, N_FINE, N_LANG, 3, 2, seed=int(rng.integers(1 << 30)))
        m.ensure_items(n)
        m.params["item_id"] = rng.integers(-2, 3, (n, 3)).astype(float)
        for key in ("topic", "fine", "lang"):
            m.params[key] = np.zeros_like(m.params[key])
        rows = np.flatnonzero(rng.random(n) < 0.7)
        rt.attach_index(m, corpus, rows)
        q = rng.integers(-2, 3, 3).astype(float)
        k = int(rng.integers(1, 60))
        want = brute_force_topk(corpus.item_id[rows], rt.item_vectors(m, corpus, rows), q, k)
        assert rt.retrieve_topk_mid(m, q, m.checkpoint_tick, k) == want


def test_snapshot_queue_respects_lag():
    q = rt.SnapshotQueue()
    a, b = model(), model()
    a.checkpoint_tick, b.checkpoint_tick = 8, 9
    q.publish(a)
    q.publish(b)
    assert q.servable(7) is None
    assert q.servable(8) is a
    assert q.latest is b
    assert q.servable(100) is b
    c = model()
    c.checkpoint_tick = 3
    with pytest.raises(ValueError):
        q.publish(c)
    with pytest.raises(ValueError):
        rt.RealtimeConfig(serving_lag_ticks=0)


def test_bins():
    assert rt.dwell_bin([0, 9.99, 10, 600, 5000]).tolist() == [0, 0, 1, 5, 5]
    assert rt.position_bin([0, 63, 500]).tolist() == [0, 63, 63]
    assert rt.gap_bin([0, 1, 3000]).tolist()[:2] == [0, 1]
