import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisid.sidregistry import (
    SemanticId,
    SidRegistry,
    assign_sids,
    parse_sid,
    prefix_category_profile,
    shared_prefix_len,
    sid_stats,
    write_prefix_profile,
)


def test_forced_two_way_collision_rendering():
    reg = assign_sids({"p2": (15, 2, 9), "p1": (15, 2, 9), "p3": (1, 2, 3)}, 32, 3)
    assert reg.render("p1") == "<a_15><b_2><c_9><d_0>"
    assert reg.render("p2") == "<a_15><b_2><c_9><d_1>"
    assert reg.render("p3") == "<a_1><b_2><c_3>"


def test_distinct_tuples_have_no_suffix():
    reg = assign_sids({f"p{i}": (i, i + 1, i + 2) for i in range(10)}, 32, 3)
    assert not any("<d_" in reg.render(p) for p in reg.by_poi)


def test_bijection_fuzz():
    rng = random.Random(0)
    tuples = {f"p{i:04d}": tuple(rng.randrange(4) for _ in range(3)) for i in range(1000)}
    reg = assign_sids(tuples, 4, 3)
    assert len(reg.by_sid) == len(reg) == 1000
    for pid in tuples:
        assert reg.poi(reg.render(pid)) == pid
        assert reg.sid(pid).indices == tuples[pid]
    for sid, pid in reg.by_sid.items():
        assert reg.render(pid) == sid


def test_assign_errors():
    with pytest.raises(ValueError, match="duplicate"):
        assign_sids([("p1", (1, 2, 3)), ("p1", (1, 2, 4))], 32, 3)
    with pytest.raises(ValueError, match="outside"):
        assign_sids({"p1": (1, 2, 32)}, 32, 3)
    with pytest.raises(ValueError, match="layers"):
        assign_sids({"p1": (1, 2)}, 32, 3)


def test_stats_cases():
    reg = assign_sids({"a": (1, 1, 1), "b": (1, 1, 1), "c": (1, 1, 1), "d": (2, 2, 2), "e": (3, 3, 3)}, 4, 3)
    s = sid_stats(reg)
    assert (s.unique_count, s.collision_count_pois, s.collision_count_tuples, s.max_group_size) == (2, 3, 1, 3)
    empty = sid_stats(SidRegistry({}, 4, 3))
    assert (empty.total_pois, empty.unique_count, empty.collision_count_pois, empty.collision_count_tuples) == (0, 0, 0, 0)


def test_stats_match_grouping_oracle():
    rng = random.Random(1)
    for _ in range(20):
        tuples = {f"p{i}": tuple(rng.randrange(3) for _ in range(2)) for i in range(rng.randrange(1, 60))}
        s = sid_stats(assign_sids(tuples, 3, 2))
        sizes = Counter(tuples.values())
        assert s.unique_count == sum(1 for v in sizes.values() if v == 1)
        assert s.collision_count_pois == sum(v for v in sizes.values() if v > 1)
        assert s.collision_count_tuples == sum(1 for v in sizes.values() if v > 1)
        assert s.unique_count + s.collision_count_pois == s.total_pois == len(tuples)


def test_shared_prefix_examples():
    a = parse_sid("<a_15><b_2><c_1>")
    assert shared_prefix_len(a, parse_sid("<a_15><b_2><c_9>")) == 2
    assert shared_prefix_len(a, parse_sid("<a_15><b_12><c_2>")) == 1
    assert shared_prefix_len(parse_sid("<a_15><b_2><c_9><d_0>"), parse_sid("<a_15><b_2><c_9><d_1>")) == 3
    with pytest.raises(ValueError):
        shared_prefix_len(a, parse_sid("<a_15><b_2>", num_layers=2))


@pytest.mark.parametrize("bad", ["<a_1><b_2>", "<a_1><c_2><b_3>", "<a_1><b_2><c_3>x", "<a_1> <b_2><c_3>", "<a_1><b_2><c_3><d_0><e_1>"])
def test_parser_rejects_malformed(bad):
    with pytest.raises(ValueError):
        parse_sid(bad)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=6), st.one_of(st.none(), st.integers(0, 50)))
def test_render_parse_round_trip(indices, suffix):
    sid = SemanticId(tuple(indices), suffix)
    assert parse_sid(sid.render(), len(indices)) == sid


def test_registry_file_round_trip(tmp_path):
    reg = assign_sids({"p2": (15, 2, 9), "p1": (15, 2, 9), "p3": (1, 2, 3)}, 32, 3)
    reg.save(tmp_path / "sids.tsv")
    assert (tmp_path / "sids.tsv").read_text().splitlines()[0] == "p1\t<a_15><b_2><c_9><d_0>"
    back = SidRegistry.load(tmp_path / "sids.tsv", 32, 3)
    assert back.by_poi == reg.by_poi


def test_prefix_profile(tmp_path):
    single = assign_sids({"p1": (1, 2, 3)}, 4, 3)
    prof = prefix_category_profile(single, {"p1": "Cafe"}, 1)
    assert prof == {"<a_1>": Counter({"Cafe": 1})}
    rng = random.Random(2)
    tuples, cats = {}, {}
    for i in range(200):
        c = i % 4
        tuples[f"p{i:03d}"] = (c, rng.randrange(4), rng.randrange(4))
        # Cluster-aligned category with 20% noise.
        cats[f"p{i:03d}"] = f"cat{c}" if rng.random() < 0.8 else "other"
    prof = prefix_category_profile(assign_sids(tuples, 4, 3), cats, 1)
    assert len(prof) == 4
    assert all(max(cnt.values()) / sum(cnt.values()) >= 0.6 for cnt in prof.values())
    write_prefix_profile(prof, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "prefix,category,count"
    assert len({line.split(",")[0] for line in lines[1:]}) == len(prof)
