import numpy as np
import pytest

from freshfunnel.eventlog import EventLog
from freshfunnel.main_recsys import (
    MainConfig,
    MainModel,
    ingest_main_feedback,
    ingest_rows,
    recommend_main_slate,
    recommend_main_slates,
)
from freshfunnel.world import SimUser


def model(lam=0.5, recall=5):
    m = MainModel(2, recall, lambda_pop=lam, affinity_blend=1.0)
    return m


def test_empty_eligible_corpus_gives_empty_slate():
    m = model()
    m.add_items([1, 2], [0, 1], positives=[0, 4])
    assert recommend_main_slate(m, SimUser(0, np.array([0.5, 0.5]), "core"), 3) == []


def test_tie_goes_to_lower_item_id():
    m = model(lam=0.0)
    m.add_items([9, 4], [0, 0], positives=[10, 20])
    assert recommend_main_slate(m, SimUser(0, np.array([1.0, 0.0]), "core"), 2) == [4, 9]


def test_popularity_wins_at_equal_relevance():
    m = model(lam=0.5)
    m.add_items([1, 2], [0, 0], positives=[10, 10_000])
    assert recommend_main_slate(m, SimUser(0, np.array([1.0, 0.0]), "core"), 1) == [2]


def test_relevance_and_exclusion():
    m = model(lam=0.0)
    m.add_items([1, 2, 3], [0, 1, 1], positives=[10, 10, 10])
    pref = np.array([[0.9, 0.1], [0.1, 0.9]])
    rows = recommend_main_slates(m, pref, 1)
    assert m.item_ids[rows[:, 0]].tolist() == [1, 2]
    rows = recommend_main_slates(m, pref, 1, exclude_rows=np.array([[0], [1]]), exclude_mask=np.ones((2, 1), bool))
    assert m.item_ids[rows[:, 0]].tolist() == [2, 3]


def events(items, good):
    log = EventLog(["a"])
    log.append_batch(0, np.arange(len(items)), items, good, np.where(good, 30.0, 0.0))
    return log


def test_ingest_counts_and_idempotence():
    m = model()
    m.add_items([1, 2], [0, 1])
    before = m.state_hash()
    ingest_main_feedback(m, EventLog(["a"]))
    assert m.state_hash() == before
    log = events([1, 2, 1], np.array([True, False, False]))
    ingest_main_feedback(m, log)
    assert m.positives.tolist() == [1, 0] and m.impressions.tolist() == [2, 1]
    h = m.state_hash()
    ingest_main_feedback(m, log)
    assert m.state_hash() == h
    with pytest.raises(KeyError):
        ingest_main_feedback(m, _unknown())


def _unknown():
    log = EventLog(["a"])
    for _ in range(5):
        log.append_batch(1, [0], [7], [True], [30.0])
    return log


def test_config_validation():
    with pytest.raises(ValueError):
        MainConfig(lambda_pop=-1)
    with pytest.raises(ValueError):
        MainConfig(affinity_blend=2)


def test_audience_profile_moves_towards_clickers():
    m = MainModel(2, 0, affinity_blend=0.5, user_ids=[0, 1], user_pref=[[0.0, 1.0], [1.0, 0.0]])
    m.add_items([5], [0])
    np.testing.assert_allclose(m.profile([0])[0], [1.0, 0.0])
    ingest_rows(m, [0], [True], [True], [0])
    np.testing.assert_allclose(m.profile([0])[0], [0.5, 0.5])
