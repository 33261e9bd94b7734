import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualrec.ingest import (
    ReviewRecord,
    build_store,
    load_store,
    normalize_rating,
    parse_reviews,
    restrict,
    save_store,
    with_reliability,
)

from conftest import record, store_from


def line(user="A2SUAM1J3GNN3B", asin="0000013714", overall=3.0, helpful=(3, 5), when=126472000, **extra):
    doc = {
        "reviewerID": user,
        "asin": asin,
        "overall": overall,
        "helpful": list(helpful),
        "unixReviewTime": when,
        "reviewerName": "J. McDonald",
        "summary": "Heavenly Highway Hymns",
    }
    doc.update(extra)
    return json.dumps(doc)


class TestParse:
    def test_example_record(self):
        result = parse_reviews([line()])
        assert result.warnings == []
        (rec,) = result.records
        assert rec.rating == 3
        assert rec.helpful_yes == 3
        assert rec.votes_total == 5
        assert rec.unix_time == 126472000

    def test_empty_stream(self):
        result = parse_reviews([])
        assert result.records == [] and result.warnings == []

    def test_votes_exceeding_total_skipped_with_warning(self):
        result = parse_reviews([line(helpful=(7, 5))])
        assert result.records == []
        assert len(result.warnings) == 1
        assert "helpful_yes > votes_total" in result.warnings[0]
        assert result.warnings[0].startswith("line 1:")

    def test_missing_helpful_defaults_to_zero(self):
        doc = json.loads(line())
        del doc["helpful"]
        (rec,) = parse_reviews([json.dumps(doc)]).records
        assert rec.helpful_yes == 0 and rec.votes_total == 0

    def test_bad_lines_reported_with_numbers(self):
        result = parse_reviews([line(), "{oops", line(overall=3.5), line(user="")])
        assert len(result.records) == 1
        assert [w.split(":")[0] for w in result.warnings] == ["line 2", "line 3", "line 4"]

    def test_unreadable_stream_is_fatal(self):
        def boom():
            yield line()
            raise OSError("disk went away")

        with pytest.raises(OSError):
            parse_reviews(boom())


class TestNormalizeRating:
    @pytest.mark.parametrize("raw,expected", [(5, 1.0), (1, 0.2), (3, 0.6)])
    def test_values(self, raw, expected):
        assert normalize_rating(raw) == expected

    @pytest.mark.parametrize("raw", [0, 6, 2.5, -1])
    def test_out_of_range_rejected(self, raw):
        with pytest.raises(ValueError):
            normalize_rating(raw)


class TestBuildStore:
    def test_counts(self):
        store = store_from([
            ("u1", "p1", 4, 0, 0, 1),
            ("u1", "p2", 2, 0, 0, 2),
            ("u2", "p1", 5, 0, 0, 3),
        ])
        assert store.n_users == 2
        assert store.n_products == 2
        assert len(store.omega) == 3

    def test_duplicate_keeps_latest_time(self):
        store = store_from([
            ("u1", "p1", 2, 0, 0, 10),
            ("u1", "p1", 5, 0, 0, 20),
        ])
        assert store.raw_ratings[(0, 0)] == 5

    def test_duplicate_timestamp_tie_keeps_later_input(self):
        store = store_from([
            ("u1", "p1", 2, 0, 0, 10),
            ("u1", "p1", 4, 0, 0, 10),
        ])
        assert store.raw_ratings[(0, 0)] == 4

    def test_no_reliability_means_empty_psi(self):
        store = store_from([("u1", "p1", 4, 0, 0, 1)])
        assert len(store.psi) == 0
        assert len(store.omega) == 1

    def test_reliability_key_must_be_rated(self):
        with pytest.raises(ValueError):
            store_from([("u1", "p1", 4, 0, 0, 1)], {(0, 1): 0.5})

    def test_normalized_is_exactly_raw_over_five(self):
        store = store_from([("u1", "p1", r, 0, 0, r) for r in [1]])
        for pair, value in store.ratings.items():
            assert value == store.raw_ratings[pair] / 5

    def test_timeline_sorted_by_time_then_input_order(self, tiny_store):
        timeline = tiny_store.timelines[0]
        assert [e.user for e in timeline] == [0, 1, 2]
        assert [e.unix_time for e in timeline] == [100, 200, 300]

    def test_index_maps_are_bijections(self, tiny_store):
        for key, idx in tiny_store.user_index.items():
            assert tiny_store.user_ids[idx] == key
        for key, idx in tiny_store.product_index.items():
            assert tiny_store.product_ids[idx] == key


@settings(max_examples=50, deadline=None)
@given(
    rows=st.lists(
        st.tuples(
            st.integers(0, 5),  # user
            st.integers(0, 5),  # product
            st.integers(1, 5),  # rating
            st.integers(0, 4),  # helpful yes (bounded by total below)
            st.integers(4, 9),  # total votes
            st.integers(0, 50),  # time
        ),
        min_size=1,
        max_size=40,
    )
)
def test_store_invariants_hold_for_random_inputs(rows):
    records = [
        record(f"u{u}", f"p{p}", rating, yes, total, when)
        for u, p, rating, yes, total, when in rows
    ]
    store = build_store(records)
    # omega matches the deduplicated record count
    assert len(store.omega) == len({(r.user_id, r.product_id) for r in records})
    # every timeline is a permutation of the product's reviewer set,
    # non-decreasing in time
    for j, timeline in store.timelines.items():
        reviewers = [e.user for e in timeline]
        expected = {i for (i, jj) in store.omega if jj == j}
        assert sorted(reviewers) == sorted(expected)
        times = [e.unix_time for e in timeline]
        assert all(a <= b for a, b in zip(times, times[1:]))
    # normalization is exact
    for pair, value in store.ratings.items():
        assert value == store.raw_ratings[pair] / 5


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path, tiny_store):
        rel = {pair: 0.25 for pair in list(tiny_store.omega)[:3]}
        store = with_reliability(tiny_store, rel)
        path = tmp_path / "store.json"
        save_store(store, path)
        loaded = load_store(path)
        assert loaded.user_ids == store.user_ids
        assert loaded.product_ids == store.product_ids
        assert loaded.raw_ratings == store.raw_ratings
        assert loaded.reliability == store.reliability
        assert loaded.timelines == store.timelines

    def test_save_is_byte_stable(self, tmp_path, tiny_store):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_store(tiny_store, a)
        save_store(load_store(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_load_rejects_other_files(self, tmp_path):
        path = tmp_path / "junk.json"
        path.write_text('{"format": "something-else", "version": 1}')
        with pytest.raises(ValueError):
            load_store(path)


class TestRestrict:
    def test_partition_preserves_contents(self, tiny_store):
        pairs = sorted(tiny_store.omega)
        sub = restrict(tiny_store, pairs[:2])
        assert sorted(sub.omega) == pairs[:2]
        assert sub.n_users == tiny_store.n_users
        for pair in pairs[:2]:
            assert sub.raw_ratings[pair] == tiny_store.raw_ratings[pair]

    def test_unknown_pair_rejected(self, tiny_store):
        with pytest.raises(ValueError):
            restrict(tiny_store, [(99, 99)])


class TestRecordValidation:
    def test_rating_range_enforced(self):
        with pytest.raises(ValueError):
            ReviewRecord("u", "p", 6, 0, 0, 0)

    def test_vote_invariant_enforced(self):
        with pytest.raises(ValueError):
            ReviewRecord("u", "p", 3, 4, 2, 0)
