import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wpaxos.quorum import (
    ADD_ROW,
    ADD_ZONE,
    GRID,
    REMOVE_ROW,
    REMOVE_ZONE,
    ClusterConfig,
    ConfigError,
    FlexibleQuorums,
    JointQuorums,
    MajorityQuorums,
    NodeId,
    apply_change,
    check_intersection,
    count_quorums,
    enumerate_quorums,
    intersection_counterexample,
    is_q1_satisfied,
    is_q2_satisfied,
    is_satisfied,
    iter_valid_configs,
    joint_equals_new,
    quorum_summary,
    validate_acks,
    validate_config,
)


def n(z, i):
    return NodeId(z, i)


def brute_minimal(cfg, phase):
    """Oracle: scan every subset of the grid, keep the inclusion-minimal ones
    that satisfy the predicate."""
    nodes = cfg.nodes()
    sat = []
    for mask in range(1 << len(nodes)):
        s = frozenset(x for b, x in enumerate(nodes) if mask >> b & 1)
        if is_satisfied(s, cfg, phase):
            sat.append(s)
    return {s for s in sat if not any(t < s for t in sat)}


# -- validation ------------------------------------------------------------------


def test_validate_examples():
    assert validate_config(ClusterConfig(5, 3, 1, 0))
    assert validate_config(ClusterConfig(4, 3, 1, 1))
    with pytest.raises(ConfigError):
        validate_config(ClusterConfig(3, 4, 1, 0))  # N != 2f+1
    with pytest.raises(ConfigError):
        validate_config(ClusterConfig(3, 3, 1, 3))  # F > Z-1
    with pytest.raises(ConfigError):
        validate_config(ClusterConfig(0, 3, 1, 0))


def test_validate_acks_rejects_outsiders():
    cfg = ClusterConfig(2, 3, 1, 0)
    assert validate_acks([n(1, 1), n(1, 1)], cfg) == frozenset({n(1, 1)})
    with pytest.raises(ConfigError):
        validate_acks([n(3, 1)], cfg)


def test_sizes():
    cfg = ClusterConfig(5, 3, 1, 0)
    assert cfg.q1_size() == 10 and cfg.q2_size() == 2
    cfg = ClusterConfig(5, 3, 1, 1)
    assert cfg.q1_size() == 8 and cfg.q2_size() == 4
    g = ClusterConfig(5, 3, 1, 0, GRID)
    assert g.q1_size() == 5 and g.q2_size() == 3


# -- predicates ----------------------------------------------------------------


def test_q1_examples():
    cfg = ClusterConfig(5, 3, 1, 0)
    two_each = [n(z, i) for z in cfg.zones for i in (1, 2)]
    assert is_q1_satisfied(two_each, cfg)
    assert not is_q1_satisfied(two_each[:-1], cfg)
    # three in four zones is not enough with F=0
    assert not is_q1_satisfied([n(z, i) for z in range(1, 5) for i in (1, 2, 3)], cfg)
    cfg1 = ClusterConfig(5, 3, 1, 1)
    assert is_q1_satisfied([n(z, i) for z in range(1, 5) for i in (1, 2)], cfg1)


def test_q2_examples():
    cfg = ClusterConfig(5, 3, 1, 0)
    assert is_q2_satisfied([n(3, 1), n(3, 3)], cfg)
    assert not is_q2_satisfied([n(3, 1), n(4, 1)], cfg)
    cfg1 = ClusterConfig(5, 3, 1, 1)
    assert not is_q2_satisfied([n(1, 1), n(1, 2)], cfg1)
    assert is_q2_satisfied([n(1, 1), n(1, 2), n(2, 2), n(2, 3)], cfg1)
    g = ClusterConfig(3, 3, 1, 0, GRID)
    assert is_q2_satisfied(g.zone_nodes(2), g)
    assert not is_q2_satisfied([n(2, 1), n(2, 2)], g)
    assert is_q1_satisfied([n(1, 3), n(2, 1), n(3, 2)], g)


def test_acks_outside_grid_are_ignored():
    cfg = ClusterConfig(1, 3, 1, 0)
    assert not is_q2_satisfied([n(1, 1), n(2, 1)], cfg)


def test_bad_phase():
    with pytest.raises(ValueError):
        is_satisfied([], ClusterConfig(1, 3), 3)


# -- enumeration ---------------------------------------------------------------


def test_single_zone_phase2_is_three_pairs():
    cfg = ClusterConfig(1, 3, 1, 0)
    assert enumerate_quorums(cfg, 2) == {
        frozenset({n(1, 1), n(1, 2)}),
        frozenset({n(1, 1), n(1, 3)}),
        frozenset({n(1, 2), n(1, 3)}),
    }


@pytest.mark.parametrize("cfg,phase,count", [
    (ClusterConfig(2, 3, 1, 0), 1, 9),
    (ClusterConfig(4, 3, 1, 1), 2, 54),
    (ClusterConfig(3, 3, 1, 2), 1, 9),
    (ClusterConfig(3, 3, 1, 0, GRID), 1, 27),
    (ClusterConfig(3, 3, 1, 0, GRID), 2, 3),
])
def test_enumeration_matches_brute_force(cfg, phase, count):
    got = enumerate_quorums(cfg, phase)
    assert got == brute_minimal(cfg, phase)
    assert len(got) == count == count_quorums(cfg, phase)


def test_two_zone_phase1_quorums_have_four_members():
    qs = enumerate_quorums(ClusterConfig(2, 3, 1, 0), 1)
    assert {len(q) for q in qs} == {4}


@pytest.mark.parametrize("cfg,q1,q2", [
    (ClusterConfig(5, 3, 1, 0, GRID), 243, 5),
    (ClusterConfig(5, 3, 1, 0), 243, 15),
    (ClusterConfig(5, 3, 1, 1), 405, 90),
])
def test_five_zone_counts(cfg, q1, q2):
    assert count_quorums(cfg, 1) == q1 and len(enumerate_quorums(cfg, 1)) == q1
    assert count_quorums(cfg, 2) == q2 and len(enumerate_quorums(cfg, 2)) == q2


def test_enumeration_guard():
    with pytest.raises(ConfigError):
        enumerate_quorums(ClusterConfig(6, 3, 1, 0), 1)
    # closed form has no guard
    assert count_quorums(ClusterConfig(6, 3, 1, 0), 2) == 18


# -- intersection ----------------------------------------------------------------


def test_intersection_examples():
    assert check_intersection(ClusterConfig(5, 3, 1, 0))
    assert check_intersection(ClusterConfig(5, 3, 1, 1))
    assert check_intersection(ClusterConfig(3, 3, 1, 0, GRID))
    assert intersection_counterexample(ClusterConfig(4, 3, 1, 1)) is None


def test_cross_config_intersection_can_fail():
    # q1 from a 1-zone config never reaches zone 2, where the other config's q2 may sit
    small, big = ClusterConfig(1, 3, 1, 0), ClusterConfig(2, 3, 1, 0)
    assert not check_intersection(small, big)
    a, b = intersection_counterexample(small, big)
    assert not set(a) & set(b)


def test_every_small_config_intersects():
    cfgs = list(iter_valid_configs(4))
    assert len(cfgs) == 10
    assert all(check_intersection(c) for c in cfgs)


def test_quorum_summary():
    s = quorum_summary(ClusterConfig(5, 3, 1, 1))
    assert s["q1_count"] == 405 and s["q2_count"] == 90 and s["intersection"] is True
    assert quorum_summary(ClusterConfig(7, 3, 1, 0))["intersection"] is None


# -- quorum systems and reconfiguration ------------------------------------------


def test_quorum_system_classes():
    cfg = ClusterConfig(3, 3, 1, 0)
    fq = FlexibleQuorums(cfg)
    assert fq.q2([n(2, 1), n(2, 2)])
    mq = MajorityQuorums(cfg.nodes())
    assert not mq.q2([n(z, i) for z in (1, 2) for i in (1, 2)])  # 4 of 9
    assert mq.q1([n(z, i) for z in (1, 2) for i in (1, 2)] + [n(3, 1)])


def test_joint_requires_both():
    old, new = ClusterConfig(2, 3, 1, 0), ClusterConfig(3, 3, 1, 0)
    jq = JointQuorums(old, new)
    two_zones = [n(z, i) for z in (1, 2) for i in (1, 2)]
    assert is_q1_satisfied(two_zones, old) and not jq.q1(two_zones)
    assert jq.q1(two_zones + [n(3, 1), n(3, 2)])
    # a q2 in the new zone alone is not a q2 of the old config
    assert not jq.q2([n(3, 1), n(3, 2)])


def test_apply_change():
    cfg = ClusterConfig(4, 3, 1, 1)
    assert apply_change(cfg, ADD_ZONE) == ClusterConfig(5, 3, 1, 1)
    assert apply_change(cfg, ADD_ZONE).q1_zones == 4
    assert apply_change(cfg, REMOVE_ZONE) == ClusterConfig(3, 3, 1, 1)
    with pytest.raises(ConfigError):
        apply_change(cfg, REMOVE_ROW)
    with pytest.raises(ConfigError):
        apply_change(cfg, ADD_ROW)
    with pytest.raises(ConfigError):
        apply_change(ClusterConfig(1, 3, 1, 0), REMOVE_ZONE)


def test_joint_collapse_on_zone_add():
    old = ClusterConfig(4, 3, 1, 1)
    new = apply_change(old, ADD_ZONE)
    # every new q2 is 2 full zones; restricted to the old grid it may hold just one
    assert not joint_equals_new(old, new, 2)
    # every new q1 spans 4 of 5 zones, so it keeps at least 3 old ones
    assert joint_equals_new(old, new, 1)


# -- properties ----------------------------------------------------------------

configs = st.integers(1, 4).flatmap(
    lambda z: st.builds(ClusterConfig, st.just(z), st.just(3), st.just(1), st.integers(0, z - 1)))


@given(configs, st.data())
@settings(max_examples=80, deadline=None)
def test_monotone(cfg, data):
    nodes = cfg.nodes()
    acks = data.draw(st.sets(st.sampled_from(nodes)))
    extra = data.draw(st.sets(st.sampled_from(nodes)))
    for phase in (1, 2):
        if is_satisfied(acks, cfg, phase):
            assert is_satisfied(acks | extra, cfg, phase)


@given(configs)
@settings(max_examples=40, deadline=None)
def test_cardinalities(cfg):
    for phase, size in ((1, cfg.q1_size()), (2, cfg.q2_size())):
        qs = enumerate_quorums(cfg, phase)
        assert {len(q) for q in qs} == {size}
        assert len(qs) == count_quorums(cfg, phase)


@given(configs, st.data())
@settings(max_examples=60, deadline=None)
def test_q2_without_a_zone_needs_replacement(cfg, data):
    q = data.draw(st.sampled_from(sorted(enumerate_quorums(cfg, 2), key=sorted)))
    z = data.draw(st.sampled_from(sorted({x.zone for x in q})))
    assert not is_q2_satisfied({x for x in q if x.zone != z}, cfg)


@given(configs, st.data())
@settings(max_examples=60, deadline=None)
def test_any_q1_meets_any_q2(cfg, data):
    a = data.draw(st.sampled_from(sorted(enumerate_quorums(cfg, 1), key=sorted)))
    b = data.draw(st.sampled_from(sorted(enumerate_quorums(cfg, 2), key=sorted)))
    assert a & b


def test_grid_any_row_meets_any_column():
    g = ClusterConfig(4, 3, 1, 0, GRID)
    for row in itertools.product(*(g.zone_nodes(z) for z in g.zones)):
        for z in g.zones:
            assert set(row) & set(g.zone_nodes(z))
