import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import DAY, NOW, make_item, make_seq
from dormantrec.core import (
    Behavior,
    Catalog,
    DormancyConfig,
    Interaction,
    UserSequence,
    classify_dormant,
    filter_high_quality,
    ingest_interactions,
    sequences_to_jsonl,
    truncate_sequence,
)


def record(user, item, behavior, ts):
    return json.dumps({"user_id": user, "item_id": item, "behavior": behavior, "ts": ts})


# ---------------------------------------------------------------- ingestion

def test_three_records_sorted_by_ts(small_catalog):
    lines = [record("u", "i1", "click", 30), record("u", "i2", "view", 10), record("u", "i3", "purchase", 20)]
    seqs, report = ingest_interactions(lines, small_catalog, keep_view_rate=1.0)
    assert len(seqs) == 1
    assert [x.ts for x in seqs[0]] == [10, 20, 30]
    assert report.reject_count == 0


def test_unknown_item_dropped_and_counted(small_catalog):
    lines = [record("u", "i1", "click", 1), record("u", "nope", "click", 2)]
    seqs, report = ingest_interactions(lines, small_catalog, keep_view_rate=1.0)
    assert len(seqs[0]) == 1
    assert report.reject_count == 1
    assert report.rejects[0][0] == 2


def test_malformed_lines_recorded_with_line_numbers(small_catalog):
    lines = [
        "not json",
        record("u", "i1", "click", 5),
        json.dumps({"user_id": "u", "item_id": "i1", "behavior": "hover", "ts": 3}),
        json.dumps({"user_id": "u", "item_id": "i1", "behavior": "click", "ts": "x"}),
        json.dumps([1, 2]),
    ]
    seqs, report = ingest_interactions(lines, small_catalog, keep_view_rate=1.0)
    assert [n for n, _ in report.rejects] == [1, 3, 4, 5]
    assert len(seqs[0]) == 1


def test_equal_timestamps_keep_input_order(small_catalog):
    lines = [record("u", "i3", "click", 7), record("u", "i1", "click", 7), record("u", "i2", "click", 7)]
    seqs, _ = ingest_interactions(lines, small_catalog, keep_view_rate=1.0)
    assert seqs[0].item_ids == ["i3", "i1", "i2"]


def test_view_downsampling_matches_replay(small_catalog, rng):
    behaviors = ["view", "click", "purchase"]
    recs = []
    for k in range(10_000):
        b = behaviors[rng.choice(3, p=[0.7, 0.2, 0.1])]
        recs.append((f"u{rng.integers(50)}", f"i{rng.integers(9)}", b, int(rng.integers(0, 10**6))))
    lines = [record(*r) for r in recs]
    _, report = ingest_interactions(lines, small_catalog, keep_view_rate=0.2, seed=99)

    # independent replay: one uniform per view, in stream order
    replay = np.random.default_rng(99)
    kept_views = sum(1 for r in recs if r[2] == "view" and replay.random() < 0.2)
    n_views = sum(r[2] == "view" for r in recs)
    assert report.n_views_dropped == n_views - kept_views
    assert report.n_kept == kept_views + sum(r[2] != "view" for r in recs)


def test_ingestion_is_deterministic(small_catalog):
    lines = [record(f"u{k % 7}", f"i{k % 9}", ["view", "click"][k % 2], k * 13 % 101) for k in range(500)]
    a, _ = ingest_interactions(lines, small_catalog, keep_view_rate=0.5, seed=3)
    b, _ = ingest_interactions(lines, small_catalog, keep_view_rate=0.5, seed=3)
    assert a == b


def test_clicks_and_purchases_always_kept(small_catalog):
    lines = [record("u", "i1", b, k) for k, b in enumerate(["click", "purchase"] * 50)]
    seqs, _ = ingest_interactions(lines, small_catalog, keep_view_rate=0.0)
    assert len(seqs[0]) == 100


def test_jsonl_round_trip(small_catalog):
    seqs = [make_seq("a", [("i1", "view", 1), ("i2", "purchase", 2)]), make_seq("b", [("i3", "click", 5)])]
    back, report = ingest_interactions(list(sequences_to_jsonl(seqs)), small_catalog, keep_view_rate=1.0)
    assert back == seqs and report.reject_count == 0


def test_catalog_round_trip_and_dimension_check():
    cat = Catalog([make_item("a", emb=[0.1, 0.2]), make_item("b", emb=[1.0 / 3, 2.0])])
    back = Catalog.from_jsonl(cat.to_jsonl())
    assert np.array_equal(back["b"].embedding, cat["b"].embedding)
    with pytest.raises(ValueError):
        Catalog([make_item("a", emb=[0.0]), make_item("b", emb=[0.0, 1.0])])


def test_item_invariants():
    with pytest.raises(ValueError):
        make_item("x", price=0)
    with pytest.raises(ValueError):
        make_item("x", category=("a", "", "c"))
    with pytest.raises(ValueError):
        Interaction("", Behavior.VIEW, 1)
    with pytest.raises(ValueError):
        Interaction("i", Behavior.VIEW, -1)


# ---------------------------------------------------------------- dormancy

def test_purchase_inside_window_is_not_dormant():
    seq = make_seq("u", [("i1", "purchase", NOW - 10 * DAY)])
    assert classify_dormant(seq, DormancyConfig(NOW, 30)) is False


def test_old_purchase_and_recent_clicks_is_dormant():
    seq = make_seq("u", [("i1", "purchase", NOW - 45 * DAY), ("i2", "click", NOW - 5 * DAY), ("i3", "click", NOW)])
    assert classify_dormant(seq, DormancyConfig(NOW, 30)) is True


def test_empty_sequence_is_dormant():
    assert classify_dormant(UserSequence("u", ()), DormancyConfig(NOW))


def test_window_bounds_are_inclusive():
    assert not classify_dormant(make_seq("u", [("i", "purchase", NOW - 30 * DAY)]), DormancyConfig(NOW, 30))
    assert classify_dormant(make_seq("u", [("i", "purchase", NOW - 30 * DAY - 1)]), DormancyConfig(NOW, 30))


def test_dormancy_config_rejects_nonpositive_window():
    with pytest.raises(ValueError):
        DormancyConfig(NOW, 0)


def random_sequence(rng, n):
    ts = np.sort(rng.integers(NOW - 90 * DAY, NOW + DAY, size=n))
    names = ["view", "click", "purchase"]
    return make_seq("u", [(f"i{k}", names[rng.integers(3)], int(t)) for k, t in enumerate(ts)])


def test_dormancy_matches_scan_oracle(rng):
    cfg = DormancyConfig(NOW, 30)
    for _ in range(1000):
        seq = random_sequence(rng, int(rng.integers(0, 20)))
        oracle = True
        for x in seq.interactions:
            if x.behavior.name == "PURCHASE" and NOW - 30 * DAY <= x.ts <= NOW:
                oracle = False
        assert classify_dormant(seq, cfg) == oracle


@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(1, 60))
def test_dormancy_monotone_in_window(seed, a, b):
    a, b = max(a, b), min(a, b)
    seq = random_sequence(np.random.default_rng(seed), 12)
    if classify_dormant(seq, DormancyConfig(NOW, a)):
        assert classify_dormant(seq, DormancyConfig(NOW, b))


# ---------------------------------------------------------------- truncation and filtering

def test_short_sequence_unchanged():
    seq = make_seq("u", [(f"i{k}", "view", k) for k in range(5)])
    assert truncate_sequence(seq, 128) == seq


def test_empty_truncates_to_empty():
    assert len(truncate_sequence(UserSequence("u", ()), 128)) == 0


def test_long_sequence_keeps_latest(rng):
    ts = sorted(int(t) for t in rng.integers(0, 10**6, size=300))
    seq = make_seq("u", [(f"i{k}", "view", t) for k, t in enumerate(ts)])
    oracle = sorted(seq.interactions, key=lambda x: x.ts)[-128:]
    assert list(truncate_sequence(seq, 128).interactions) == oracle


@given(st.lists(st.integers(0, 1000), max_size=60), st.integers(1, 80))
def test_truncate_idempotent(ts, m):
    seq = make_seq("u", [(f"i{k}", "click", t) for k, t in enumerate(sorted(ts))])
    once = truncate_sequence(seq, m)
    assert truncate_sequence(once, m) == once
    assert len(once) == min(m, len(seq))


def test_truncate_rejects_zero():
    with pytest.raises(ValueError):
        truncate_sequence(UserSequence("u", ()), 0)


def test_high_quality_threshold_is_strict():
    cat = Catalog([make_item("a", orders=5), make_item("b", orders=6)])
    assert list(filter_high_quality(cat, 5)) == ["b"]


def test_min_orders_zero_keeps_ordered_items():
    cat = Catalog([make_item("a", orders=0), make_item("b", orders=1), make_item("c", orders=9)])
    assert list(filter_high_quality(cat, 0)) == ["b", "c"]


@given(st.lists(st.integers(0, 20), max_size=40), st.integers(0, 20))
def test_filter_matches_linear_scan(orders, m):
    cat = Catalog(make_item(f"i{k}", orders=o) for k, o in enumerate(orders))
    assert len(filter_high_quality(cat, m)) == sum(o > m for o in orders)


def test_unsorted_sequence_rejected():
    with pytest.raises(ValueError):
        make_seq("u", [("a", "view", 5), ("b", "view", 4)])
