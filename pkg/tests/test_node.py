from collections import deque

import pytest

from wpaxos import trace as T
from wpaxos.core import (
    CONFIG_OBJECT,
    PUT,
    Ballot,
    Command,
    Forward,
    Handover,
    LogEntry,
    M1a,
    M1b,
    M2a,
    M2b,
    M3,
    Nack,
    Proposal,
    noop,
)
from wpaxos.node import MigrationPolicy, Node, NodeParams
from wpaxos.quorum import ClusterConfig, ConfigError, JointQuorums, NodeId, is_q1_satisfied

ME = NodeId(1, 1)
CFG = ClusterConfig(5, 3, 1, 0)


def node(cfg=CFG, me=ME, owned=(), policy="immediate", **kw):
    params = NodeParams(policy=MigrationPolicy(policy, window=kw.pop("window", 100)), **kw)
    owner = (lambda o: me if o in owned else None) if owned else None
    return Node(me, cfg, params, initial_owner=owner)


def put(cid, o, v=1, entry=ME, origin=None):
    return Command(cid, (o,), PUT, (v,), origin or (entry.zone, 1), entry)


def msgs(out, kind):
    return [(d, m) for d, m in out.sends if isinstance(m, kind)]


def tags(out):
    return [r[0] for r in out.records]


def prop(cid, o, s, v=1):
    return Proposal(put(cid, o, v), ((o, s),))


# -- client requests -----------------------------------------------------------


def test_owned_put_goes_to_rq2_at_next_slot():
    n = node(owned={7})
    n.obj(7).slot = 4
    out = n.step(("request", put(1, 7)))
    sent = msgs(out, M2a)
    assert sorted(d for d, _ in sent) == CFG.zone_nodes(1)
    assert {m.v.placement for _, m in sent} == {((7, 5),)}
    assert not msgs(out, M1a)


def test_unowned_immediate_sends_one_round_of_1a():
    n = node()
    out = n.step(("request", put(1, 7)))
    sent = msgs(out, M1a)
    assert {m.b for _, m in sent} == {Ballot(1, ME)}
    assert is_q1_satisfied([d for d, _ in sent], CFG)
    assert len(sent) == len(set(d for d, _ in sent))


def test_unowned_adaptive_forwards_to_known_remote_leader():
    n = node(policy="adaptive")
    n.obj(7).ballot = Ballot(3, NodeId(4, 2))
    out = n.step(("request", put(1, 7)))
    assert not msgs(out, M1a)
    ((dst, m),) = msgs(out, Forward)
    assert dst == NodeId(4, 2) and m.cmd.id == 1


def test_adaptive_steals_from_same_zone_leader():
    n = node(policy="adaptive")
    n.obj(7).ballot = Ballot(3, NodeId(1, 2))
    out = n.step(("request", put(1, 7)))
    assert msgs(out, M1a) and not msgs(out, Forward)


def test_unknown_object_is_rejected():
    out = node(pool=10).step(("request", put(1, 10)))
    assert out.replies and not out.replies[0].ok


# -- phase 1 ---------------------------------------------------------------------


def test_p1a_ballots():
    n = node()
    n.obj(3).ballot = Ballot(2, NodeId(3, 1))
    out = n.step(("request", put(1, 3)))
    assert {m.b for _, m in msgs(out, M1a)} == {Ballot(3, ME)}


def test_ten_acks_flip_ownership():
    n = node()
    out = n.step(("request", put(1, 7)))
    b = msgs(out, M1a)[0][1].b
    acks = [NodeId(z, i) for z in CFG.zones for i in (1, 2)]
    for k, a in enumerate(acks):
        out = n.step(("msg", M1b(a, 7, b, 0)))
        assert n.owns(7) == (k == 9)
    assert T.OWN in tags(out)
    ((_, m),) = [x for x in msgs(out, M2a) if x[0] == ME]
    assert m.v.placement == ((7, 1),) and m.v.cmd.id == 1


def test_stale_1b_is_ignored():
    n = node()
    n.step(("request", put(1, 7)))
    for z in CFG.zones:
        for i in (1, 2):
            n.step(("msg", M1b(NodeId(z, i), 7, Ballot(9, NodeId(5, 1)), 0)))
    assert not n.owns(7)


def _steal_with(n, o, reports):
    """Drive a campaign to success; ``reports`` maps acceptor -> (slot, recovery)."""
    out = n.step(("request", put(100, o)))
    b = msgs(out, M1a)[0][1].b
    acks = [NodeId(z, i) for z in CFG.zones for i in (1, 2)]
    for a in acks:
        s, rec = reports.get(a, (0, ()))
        out = n.step(("msg", M1b(a, o, b, s, rec)))
    return b, out


def test_recovery_takes_highest_ballot_value():
    n = node()
    x, y = NodeId(2, 1), NodeId(3, 1)
    va, vb = prop(11, 5, 4, 1), prop(12, 5, 4, 2)
    b, out = _steal_with(n, 5, {
        x: (4, ((4, Ballot(2, x), va, False),)),
        y: (4, ((4, Ballot(3, y), vb, False),)),
    })
    at4 = [m for _, m in msgs(out, M2a) if m.v.placement == ((5, 4),)]
    assert at4 and {m.v for m in at4} == {vb}
    assert {m.ballots for m in at4} == {((5, b),)}
    # slots 1..3 had nothing anywhere: no-ops; the pending put lands at 5
    for s in (1, 2, 3):
        assert {m.v.cmd for _, m in msgs(out, M2a) if m.v.placement == ((5, s),)} == {noop(5)}
    assert {m.v.cmd.id for _, m in msgs(out, M2a) if m.v.placement == ((5, 5),)} == {100}


def test_recovery_keeps_committed_value():
    n = node()
    x = NodeId(2, 1)
    vc = prop(11, 5, 1, 9)
    _, out = _steal_with(n, 5, {x: (1, ((1, Ballot(1, x), vc, True),))})
    assert n.obj(5).log[1].c and n.obj(5).log[1].v == vc
    assert n.kv[5] == 9
    assert {m.v.cmd.id for _, m in msgs(out, M2a)} == {100}


def test_no_recovery_proposes_at_next_slot():
    n = node()
    _, out = _steal_with(n, 5, {})
    assert {m.v.placement for _, m in msgs(out, M2a)} == {((5, 1),)}


def test_on_1a_examples():
    n = node(owned={4})
    hi = Ballot(5, NodeId(2, 1))
    out = n.step(("msg", M1a(NodeId(2, 1), 4, hi)))
    assert not n.owns(4) and T.LOSE in tags(out)
    assert msgs(out, M1b)[0][1].b == hi
    again = n.step(("msg", M1a(NodeId(2, 1), 4, hi)))
    assert msgs(again, M1b)
    low = n.step(("msg", M1a(NodeId(3, 1), 4, Ballot(2, NodeId(3, 1)))))
    ((_, nk),) = msgs(low, Nack)
    assert nk.b == hi and nk.phase == 1


def test_nack_updates_cache_and_next_p1a_outballots():
    n = node()
    n.step(("request", put(1, 7)))
    other = NodeId(2, 3)
    out = n.step(("msg", Nack(other, 7, Ballot(4, other), 1)))
    assert n.obj(7).ballot == Ballot(4, other) and 7 not in n.campaign
    (timer,) = [t for t in out.timers if t[1] == "retry"]
    out = n.step(("timer", timer[1], timer[2], timer[3]))
    assert {m.b for _, m in msgs(out, M1a)} == {Ballot(5, ME)}


# -- phase 2 ---------------------------------------------------------------------


def test_on_2a_examples():
    n = node()
    leader = NodeId(1, 2)
    b = Ballot(2, leader)
    p = prop(1, 3, 1)
    out = n.step(("msg", M2a(leader, p, ((3, b),))))
    ((_, ack),) = msgs(out, M2b)
    assert ack.votes == ((3, b, 1),) and n.obj(3).log[1].v == p
    # stale ballot: nack, no write
    q = prop(2, 3, 2)
    out = n.step(("msg", M2a(NodeId(2, 1), q, ((3, Ballot(1, NodeId(2, 1))),))))
    assert msgs(out, Nack) and 2 not in n.obj(3).log
    # higher ballot overwrites an uncommitted entry
    r = prop(3, 3, 1)
    n.step(("msg", M2a(NodeId(4, 1), r, ((3, Ballot(3, NodeId(4, 1))),))))
    assert n.obj(3).log[1].v == r


def test_f0_two_local_acks_commit():
    n = node(owned={7})
    n.step(("request", put(1, 7)))
    b = n.obj(7).ballot
    out = n.step(("msg", M2b(NodeId(1, 1), ((7, b, 1),))))
    assert not n.obj(7).log[1].c
    out = n.step(("msg", M2b(NodeId(1, 3), ((7, b, 1),))))
    assert n.obj(7).log[1].c
    assert len(msgs(out, M3)) == CFG.Z * CFG.N - 1
    assert [r.cmd_id for r in out.replies] == [1]
    assert out.replies[0].path == "local_q2"


def test_f1_needs_two_zones():
    cfg = ClusterConfig(5, 3, 1, 1)
    n = Node(ME, cfg, NodeParams(), initial_owner=lambda o: ME, zone_order=[1, 3, 2, 4, 5])
    out = n.step(("request", put(1, 7)))
    assert {d.zone for d, _ in msgs(out, M2a)} == {1, 3}
    b = n.obj(7).ballot
    for a in (NodeId(1, 1), NodeId(1, 2)):
        n.step(("msg", M2b(a, ((7, b, 1),))))
    assert not n.obj(7).log[1].c
    n.step(("msg", M2b(NodeId(3, 1), ((7, b, 1),))))
    n.step(("msg", M2b(NodeId(3, 2), ((7, b, 1),))))
    assert n.obj(7).log[1].c


def test_duplicate_2b_is_idempotent():
    n = node(owned={7})
    n.step(("request", put(1, 7)))
    b = n.obj(7).ballot
    for _ in range(3):
        n.step(("msg", M2b(NodeId(1, 2), ((7, b, 1),))))
    assert not n.obj(7).log[1].c


def test_2b_nack_requeues_command():
    n = node(owned={7})
    n.step(("request", put(1, 7)))
    other = Ballot(5, NodeId(4, 1))
    out = n.step(("msg", Nack(NodeId(1, 2), 7, other, 2, 1)))
    assert n.obj(7).ballot == other and not n.owns(7)
    assert T.LOSE in tags(out)
    assert [c.id for c in n.pending[7]] == [1]


# -- commit and execution --------------------------------------------------------


def test_on_3_executes_without_gaps():
    n = node()
    b = Ballot(1, NodeId(2, 1))
    n.step(("msg", M3(NodeId(2, 1), prop(1, 3, 1, 10), ((3, b, 1),))))
    assert n.obj(3).exec_watermark == 1 and n.kv[3] == 10
    n.step(("msg", M3(NodeId(2, 1), prop(4, 3, 4, 40), ((3, b, 4),))))
    assert n.obj(3).exec_watermark == 1 and n.kv[3] == 10
    n.step(("msg", M3(NodeId(2, 1), prop(2, 3, 2, 20), ((3, b, 2),))))
    n.step(("msg", M3(NodeId(2, 1), prop(3, 3, 3, 30), ((3, b, 3),))))
    assert n.obj(3).exec_watermark == 4 and n.kv[3] == 40


def test_on_3_learns_higher_ballot():
    n = node(owned={3})
    hb = Ballot(6, NodeId(5, 2))
    out = n.step(("msg", M3(NodeId(5, 2), prop(1, 3, 1), ((3, hb, 1),))))
    assert n.obj(3).ballot == hb and not n.owns(3)
    assert T.LOSE in tags(out)


def test_conflicting_commit_is_flagged():
    n = node()
    b = Ballot(1, NodeId(2, 1))
    n.step(("msg", M3(NodeId(2, 1), prop(1, 3, 1), ((3, b, 1),))))
    out = n.step(("msg", M3(NodeId(2, 1), prop(2, 3, 1), ((3, b, 1),))))
    assert T.VIOLATION in tags(out)


# -- adaptive policy and RQ2 -----------------------------------------------------


def _adaptive_owner(zones):
    n = node(owned={7}, policy="adaptive")
    n.stats[7] = deque(zones, maxlen=100)
    return n


def test_adaptive_tick_hints_majority_zone():
    from wpaxos.node import StepOutput
    n = _adaptive_owner([3] * 70 + [1] * 30)
    out = StepOutput()
    assert n.adaptive_tick(7, out) == 3
    ((dst, m),) = msgs(out, Handover)
    assert dst.zone == 3 and m.b == n.obj(7).ballot


@pytest.mark.parametrize("zones", [[1] * 100, [2] * 40 + [3] * 40 + [1] * 20, [2] * 55 + [1] * 45])
def test_adaptive_tick_no_hint(zones):
    from wpaxos.node import StepOutput
    assert _adaptive_owner(zones).adaptive_tick(7, StepOutput()) is None


def test_handover_starts_steal():
    n = node(policy="adaptive")
    out = n.step(("msg", Handover(NodeId(2, 1), 7, Ballot(3, NodeId(2, 1)))))
    assert {m.b for _, m in msgs(out, M1a)} == {Ballot(4, ME)}


def test_select_rq2():
    assert node().select_rq2(0) == [1]
    cfg = ClusterConfig(5, 3, 1, 1)
    n = Node(ME, cfg, NodeParams(replication=2), zone_order=[1, 3, 2, 5, 4])
    assert n.select_rq2(0) == [1, 3]
    n = Node(ME, cfg, NodeParams(replication=5), zone_order=[1, 3, 2, 5, 4])
    assert n.select_rq2(0) == [1, 3, 2, 5, 4]
    with pytest.raises(ConfigError):
        Node(ME, cfg, NodeParams(replication=1)).select_rq2(0)
    with pytest.raises(ConfigError):
        Node(ME, cfg, NodeParams(replication=6)).select_rq2(0)


def test_q1_targets_nearest_zones():
    n = Node(ME, ClusterConfig(5, 3, 1, 1), NodeParams(), zone_order=[1, 3, 2, 5, 4])
    assert {t.zone for t in n.q1_targets(0)} == {1, 3, 2, 5}


# -- reconfiguration ---------------------------------------------------------------


def _commit_config(n, out):
    """Ack the config proposal from every node so it commits and applies."""
    st = n.obj(CONFIG_OBJECT)
    b, s = st.ballot, st.slot
    for p in list(n.peers):
        out = n.step(("msg", M2b(p, ((CONFIG_OBJECT, b, s),))))
    return out


def test_reconfigure_add_zone():
    cfg = ClusterConfig(4, 3, 1, 1)
    n = Node(ME, cfg, NodeParams(), initial_owner=lambda o: ME if o == CONFIG_OBJECT else None,
             peers=ClusterConfig(5, 3, 1, 1).nodes())
    out = n.reconfigure("add_zone")
    assert msgs(out, M2a)
    _commit_config(n, out)
    assert n.cfg == ClusterConfig(5, 3, 1, 1)
    assert n.cfg.q1_zones == 4


def test_reconfigure_remove_row_rejected():
    with pytest.raises(ConfigError):
        node().reconfigure("remove_row")


def test_joint_reconfiguration_needs_both_quorums():
    old = ClusterConfig(2, 3, 1, 0)
    new = ClusterConfig(3, 3, 1, 0)
    n = Node(ME, old, NodeParams(), initial_owner=lambda o: ME if o == CONFIG_OBJECT else None,
             peers=new.nodes())
    _commit_config(n, n.reconfigure(("joint", new)))
    assert isinstance(n.quorum, JointQuorums) and n.pending_config == new
    # a q2 inside the new zone alone does not satisfy the old config
    assert not n.quorum.q2([NodeId(3, 1), NodeId(3, 2)])
    assert n.quorum.q2([NodeId(1, 1), NodeId(1, 2), NodeId(3, 1), NodeId(3, 2)])
    # the leader proposed the final config; committing it ends the transition
    _commit_config(n, None)
    assert n.cfg == new and not isinstance(n.quorum, JointQuorums)


def test_timer_token_mismatch_is_ignored():
    n = node()
    out = n.step(("request", put(1, 7)))
    (t,) = [t for t in out.timers if t[1] == "p1"]
    assert n.step(("timer", "p1", 7, t[3] + 99)).sends == []
