import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from helpers import make_net
from popchain.chain import SignerSignature, Transaction
from popchain.consensus import (
    ALREADY_SIGNED,
    BLACKLISTED,
    DOUBLE_SPEND,
    FINALITY_VIOLATION,
    PREDATES_JOIN,
    REJECTED,
    REPORTED,
    SIGNED,
    STALE_HEIGHT,
    TIMESTAMP_VIOLATION,
    Aborted,
    Completed,
    Pending,
    Report,
    SignRequest,
    SignResponse,
    decode_message,
    encode_message,
)
from popchain.selection import MAX_DISTANCE


def stamps(tree, digest, span=11):
    return [b.timestamp for b in tree.ancestors(digest)][:span]


def eligible_mergers(net, states):
    m0 = states[0]
    elig = net.ctx.eligible_mergers(m0.tree, m0.tip_block)
    return [m for m in states if m.id in elig]


def gather(net, merger, signers, now):
    """Ask every primary signer, feed the answers back; returns the final outcome."""
    tree = merger.tree
    draft = merger.pending.draft
    queue = list(merger.sign_requests())
    outcome = Pending()
    while queue:
        req = queue.pop(0)
        resp = signers[req.signer].on_request(draft, now, stamps(tree, draft.prev_hash), req.index, req.rank)
        out = merger.on_response(resp)
        if isinstance(out, SignRequest):
            queue.append(out)
        elif isinstance(out, (Completed, Aborted)):
            return out
        elif out is not None:
            outcome = out
    return outcome


def setup(target_txs=1, **kw):
    net = make_net(**kw)
    mergers = [net.merger_state(m, target_txs=target_txs) for m in net.merger_ids]
    signers = {s: net.signer_state(s) for s in net.signer_ids}
    return net, mergers, signers


def produce(net, mergers, signers, now, txs=None):
    """One honest round: every merger hears the transactions, one eligible merger builds."""
    for tx in txs or [net.tx(0, 1)]:
        for m in mergers:
            m.on_transaction(tx)
    m = eligible_mergers(net, mergers)[0]
    assert m.build_block(now) is not None
    out = gather(net, m, signers, now)
    assert isinstance(out, Completed)
    for other in mergers:
        ok, why = other.on_block(out.block, now)
        assert ok, why
    return out.block


# -- transactions ----------------------------------------------------------------


def test_mempool_admission():
    net, mergers, _ = setup()
    m = mergers[0]
    tx = net.tx(0, 1)
    assert m.on_transaction(tx)
    assert not m.on_transaction(tx)
    assert len(m.mempool) == 1
    bad = replace(net.tx(1, 2), amount=999)
    assert not m.on_transaction(bad)
    assert m.dropped == 1
    m.on_report(Report(DOUBLE_SPEND, net.merger_ids[1], net.accounts[2]))
    assert not m.on_transaction(net.tx(2, 3))
    assert m.dropped == 2
    assert len(m.mempool) == 1


def test_mempool_drops_transactions_already_on_chain():
    net, mergers, signers = setup()
    tx = net.tx(0, 1)
    produce(net, mergers, signers, 1000, [tx])
    m = mergers[0]
    assert tx.tx_id not in m.mempool
    assert not m.on_transaction(tx)


# -- block assembly --------------------------------------------------------------


def test_eligible_merger_builds_target_size_draft():
    net, mergers, _ = setup(target_txs=3)
    txs = [net.tx(i % 4, (i + 1) % 4) for i in range(5)]
    m = eligible_mergers(net, mergers)[0]
    for tx in txs:
        m.on_transaction(tx)
    draft = m.build_block(1000)
    assert [t.tx_id for t in draft.tx_list] == [t.tx_id for t in txs[:3]]
    assert draft.height == 1 and draft.required_signers == 3


def test_not_enough_transactions_means_no_draft():
    net, mergers, _ = setup(target_txs=3)
    m = eligible_mergers(net, mergers)[0]
    m.on_transaction(net.tx(0, 1))
    assert m.build_block(1000) is None


def test_ineligible_merger_does_not_build():
    net, mergers, _ = setup()
    outsider = [m for m in mergers if m not in eligible_mergers(net, mergers)][0]
    outsider.on_transaction(net.tx(0, 1))
    assert outsider.build_block(1000) is None


def test_previous_producer_sits_out():
    net, mergers, signers = setup()
    b = produce(net, mergers, signers, 1000)
    producer = next(m for m in mergers if m.id == b.merger)
    producer.on_transaction(net.tx(2, 3))
    assert producer.build_block(2000) is None
    assert producer.id not in net.ctx.eligible_mergers(producer.tree, producer.tip_block)


def test_oversize_transaction_excluded():
    net, mergers, _ = setup(max_block_amount=1000)
    m = eligible_mergers(net, mergers)[0]
    m.on_transaction(net.tx(0, 1, amount=101))
    assert m.build_block(1000) is None
    assert m.oversize == 1 and not m.mempool
    m.on_transaction(net.tx(0, 1, amount=100))
    assert m.build_block(1000) is not None


# -- signer checks ------------------------------------------------------------------


def drafts_on_genesis(net, mergers, txs_a, txs_b=None):
    elig = eligible_mergers(net, mergers)
    out = []
    for m, txs in zip(elig, (txs_a, txs_b)):
        if txs is None:
            continue
        for tx in txs:
            m.on_transaction(tx)
        out.append(m.build_block(1000))
    return out


def test_clean_draft_is_signed():
    net, mergers, signers = setup()
    (draft,) = drafts_on_genesis(net, mergers, [net.tx(0, 1)])
    s = signers[net.signer_ids[0]]
    resp = s.on_request(draft, 1000, [0])
    assert resp.verdict == SIGNED
    assert net.scheme.verify(net.keys[s.id].public_key, draft.signing_digest, resp.signature)
    assert draft.signing_digest in s.signed_log


def test_same_transaction_in_sibling_is_already_signed():
    net, mergers, signers = setup()
    tx = net.tx(0, 1)
    a, b = drafts_on_genesis(net, mergers, [tx], [tx])
    s = signers[net.signer_ids[0]]
    assert s.on_request(a, 1000, [0]).verdict == SIGNED
    resp = s.on_request(b, 1000, [0])
    assert (resp.verdict, resp.reason, resp.notify_merger) == (REJECTED, ALREADY_SIGNED, True)
    # asking again for the block it signed is answered, not refused
    assert s.on_request(a, 1000, [0]).verdict == SIGNED


def test_conflicting_outputs_reported_as_double_spend():
    net, mergers, signers = setup()
    s = signers[net.signer_ids[0]]
    tx = net.tx(0, 1, ts=50)
    twin = net.tx(0, 2, ts=50)
    (a,) = drafts_on_genesis(net, mergers, [tx])
    assert s.on_request(a, 1000, [0]).verdict == SIGNED
    # the conflicting draft sits at another height so the per-height check does not fire first
    later = replace(a, height=2, tx_list=(twin,), prev_hash=b"\x07" * 32)
    resp = s.on_request(later, 1000, [0])
    assert (resp.verdict, resp.reason) == (REPORTED, DOUBLE_SPEND)
    assert resp.evidence == (later.signing_digest, a.signing_digest)
    assert resp.offenders == (later.merger, tx.sender)


def test_timestamp_violation_is_reported():
    net, mergers, signers = setup()
    (draft,) = drafts_on_genesis(net, mergers, [net.tx(0, 1)])
    s = signers[net.signer_ids[0]]
    resp = s.on_request(draft, draft.timestamp - 60_001, [0])
    assert (resp.verdict, resp.reason) == (REPORTED, TIMESTAMP_VIOLATION)
    resp = s.on_request(draft, 1000, [draft.timestamp])
    assert resp.reason == TIMESTAMP_VIOLATION


def test_predates_join_and_stale_height():
    net, mergers, signers = setup()
    (draft,) = drafts_on_genesis(net, mergers, [net.tx(0, 1)])
    late = net.signer_state(net.signer_ids[0], join_height=1)
    assert late.on_request(draft, 1000, [0]).reason == PREDATES_JOIN
    old = net.signer_state(net.signer_ids[1])
    old.observe_finalized(1)
    assert old.on_request(draft, 1000, [0]).reason == STALE_HEIGHT


def test_observe_finalized_keeps_the_log():
    net, mergers, signers = setup()
    (draft,) = drafts_on_genesis(net, mergers, [net.tx(0, 1)])
    s = signers[net.signer_ids[0]]
    s.on_request(draft, 1000, [0])
    s.observe_finalized(1)
    s.observe_finalized(0)
    assert s.last_finalized_signed_height == 1
    assert draft.signing_digest in s.signed_log


# -- signature gathering ------------------------------------------------------------


def test_last_signature_completes_with_quality_delay():
    net, mergers, signers = setup()
    m = eligible_mergers(net, mergers)[0]
    m.on_transaction(net.tx(0, 1))
    draft = m.build_block(1000)
    reqs = m.sign_requests()
    assert [r.signer for r in reqs] == list(m.pending.selection.chosen)
    outs = []
    for r in reqs:
        resp = signers[r.signer].on_request(draft, 1000, [0], r.index, r.rank)
        outs.append(m.on_response(resp))
    assert all(isinstance(o, Pending) for o in outs[:-1])
    done = outs[-1]
    assert isinstance(done, Completed)
    dists = [s.distance for s in done.block.signer_sigs]
    assert done.delay == round(500 * sum(dists) / (MAX_DISTANCE["hamming"] * len(dists)))
    assert net.scheme.verify(net.keys[m.id].public_key, done.block.body_digest, done.block.merger_sig)
    assert m.pending is None


def test_zero_quality_means_no_delay():
    net, mergers, signers = setup()
    m = eligible_mergers(net, mergers)[0]
    m.k_delay = 0
    m.on_transaction(net.tx(0, 1))
    m.build_block(1000)
    assert gather(net, m, signers, 1000).delay == 0


def test_signature_from_unselected_node_ignored():
    net, mergers, signers = setup()
    m = eligible_mergers(net, mergers)[0]
    m.on_transaction(net.tx(0, 1))
    draft = m.build_block(1000)
    m.sign_requests()
    outsider = next(s for s in net.signer_ids if s not in m.pending.selection.chosen)
    sig = net.scheme.sign(net.keys[outsider].private_key, draft.signing_digest)
    assert isinstance(m.on_signature(draft.signing_digest, SignerSignature(outsider, sig, 0, 1)), Pending)
    assert not m.pending.sigs


def test_double_spend_report_aborts_draft():
    # merger A offers a draft with a transaction whose twin the signer already signed via merger B
    net, mergers, signers = setup()
    a, b = eligible_mergers(net, mergers)[:2]
    tx = net.tx(0, 1, ts=9)
    twin = net.tx(0, 2, ts=9)
    b.on_transaction(tx)
    b.build_block(1000)
    shared = [s for s in b.pending.selection.chosen]
    for req in b.sign_requests():
        signers[req.signer].on_request(b.pending.draft, 1000, [0], req.index, req.rank)
    a.on_transaction(twin)
    draft = a.build_block(1000)
    # a draft at a different height avoids the per-height refusal and exposes the conflict
    draft = replace(draft, height=2)
    a.pending.draft = draft
    a.sign_requests()
    s = signers[shared[0]]
    resp = s.on_request(draft, 1000, [0], 1, 0)
    assert resp.reason == DOUBLE_SPEND
    out = a.on_response(resp)
    assert isinstance(out, Aborted) and out.reason == DOUBLE_SPEND
    assert a.pending is None
    assert out.report.merger == a.id and out.report.sender == tx.sender
    assert a.id in a.blacklist and tx.sender in a.blacklist


def test_timeout_substitutes_next_nearest():
    net, mergers, signers = setup()
    m = eligible_mergers(net, mergers)[0]
    m.on_transaction(net.tx(0, 1))
    draft = m.build_block(1000)
    reqs = m.sign_requests()
    silent = reqs[0]
    sub = m.on_timeout(draft.signing_digest, silent.signer)
    assert (sub.index, sub.rank) == (1, 1)
    assert sub.signer not in m.pending.selection.chosen
    # a second timeout for the same signer does nothing
    assert m.on_timeout(draft.signing_digest, silent.signer) is None
    for r in [sub] + reqs[1:]:
        out = m.on_response(signers[r.signer].on_request(draft, 1000, [0], r.index, r.rank))
    assert isinstance(out, Completed)
    blk = out.block
    assert blk.signer_sigs[0].signer == sub.signer and blk.signer_sigs[0].rank == 1
    for other in mergers:
        assert other.on_block(blk, 1000) == (True, [])


def test_rejection_triggers_substitution():
    net, mergers, signers = setup()
    m = eligible_mergers(net, mergers)[0]
    m.on_transaction(net.tx(0, 1))
    draft = m.build_block(1000)
    r = m.sign_requests()[0]
    refusal = SignResponse(REJECTED, r.signer, draft.signing_digest, reason=ALREADY_SIGNED, index=r.index)
    sub = m.on_response(refusal)
    assert isinstance(sub, SignRequest) and sub.index == r.index and sub.rank == 1


# -- block acceptance -----------------------------------------------------------------


def test_valid_block_extends_every_tree():
    net, mergers, signers = setup()
    b = produce(net, mergers, signers, 1000)
    for m in mergers:
        assert m.tip == b.digest and len(m.tree) == 2


def test_block_from_unselected_merger_rejected():
    net, mergers, signers = setup()
    outsider = [m for m in mergers if m not in eligible_mergers(net, mergers)][0]
    tree = outsider.tree
    blk = net.forge(tree, tree.genesis, [net.tx(0, 1)], merger=outsider.id)
    ok, why = mergers[0].on_block(blk, 2000)
    assert not ok and "IneligibleMerger" in why


def test_block_behind_finality_rejected():
    net, mergers, signers = setup()
    first = None
    for h in range(1, 6):
        b = produce(net, mergers, signers, 1000 * h)
        first = first or b
    m = mergers[0]
    assert m.tree.blocks[m.tree.finalized_head].height >= 2
    # a competing block on genesis arrives too late
    rival = net.forge(m.tree, first.digest)
    assert m.on_block(rival, 10_000) == (False, [FINALITY_VIOLATION])


def test_blacklisted_merger_produces_nothing_more():
    net, mergers, signers = setup()
    b = produce(net, mergers, signers, 1000)
    offender = eligible_mergers(net, mergers)[0]
    for m in mergers:
        m.on_report(Report(DOUBLE_SPEND, offender.id, net.accounts[3]))
    offender_block = net.forge(mergers[0].tree, b.digest, merger=offender.id)
    assert mergers[0].on_block(offender_block, 3000) == (False, [BLACKLISTED])
    assert offender.pending is None


def test_accepted_signer_sets_replay_from_selection():
    from popchain.selection import signer_candidates

    net, mergers, signers = setup()
    for h in range(1, 8):
        produce(net, mergers, signers, 1000 * h)
    tree = mergers[0].tree
    for b in tree.ancestors(mergers[0].tip):
        if b.height == 0:
            break
        parent = tree.blocks[b.prev_hash]
        for s in b.signer_sigs:
            cands = signer_candidates(parent.tx_digest, s.index, b.required_signers, net.ctx.signers, "hamming", b.height)
            assert cands[s.rank] == (s.distance, s.signer)


def test_reorg_returns_transactions_to_mempool():
    net, mergers, signers = setup()
    m = mergers[0]
    tx_a, tx_b = net.tx(0, 1), net.tx(2, 3)
    elig = sorted(net.ctx.eligible_mergers(m.tree, m.tip_block))
    light = net.forge(m.tree, m.tree.genesis, [tx_a], merger=elig[0], n_sigs=3)
    m.on_transaction(tx_a)
    m.on_transaction(tx_b)
    assert m.on_block(light, 1000)[0]
    assert tx_a.tx_id not in m.mempool
    rival = net.forge(m.tree, m.tree.genesis, [tx_b], merger=elig[1])
    assert m.on_block(rival, 1000)[0]
    longer = net.forge(m.tree, rival.digest)
    assert m.on_block(longer, 3000)[0]
    assert m.tip == longer.digest
    assert tx_a.tx_id in m.mempool and tx_b.tx_id not in m.mempool


# -- liveness -----------------------------------------------------------------------------


@settings(max_examples=25)
@given(st.integers(0, 2**16))
def test_liveness_with_honest_nodes(seed):
    net, mergers, signers = setup(seed=seed)
    rng = random.Random(seed)
    for h in range(1, 6):
        tx = net.tx(rng.randrange(4), rng.randrange(4) or 1, amount=1)
        if tx.sender == tx.recipient:
            tx = net.tx(0, 1, amount=1)
        b = produce(net, mergers, signers, 17_500 * h, [tx])
        assert b.height == h
    # no signer signed two different blocks at one height
    seen = {}
    for blk in mergers[0].tree.blocks.values():
        for s in blk.signer_sigs:
            assert seen.setdefault((blk.height, s.signer), blk.digest) == blk.digest


# -- wire format -------------------------------------------------------------------------


def test_wire_round_trip():
    net, mergers, signers = setup()
    m = eligible_mergers(net, mergers)[0]
    tx = net.tx(0, 1)
    m.on_transaction(tx)
    draft = m.build_block(1000)
    resp = signers[net.signer_ids[0]].on_request(draft, 1000, [0], 2, 1)
    report = Report(DOUBLE_SPEND, m.id, tx.sender, (b"a" * 32, b"b" * 32))
    msgs = [tx, (draft, 1, 0), resp, draft, report]
    for kind, msg in zip((1, 2, 3, 4, 5), msgs):
        wire = encode_message(msg)
        assert wire[0] == kind
        back = decode_message(wire)
        assert encode_message(back) == wire
    with pytest.raises(ValueError):
        decode_message(bytes([9]))
    with pytest.raises(ValueError):
        decode_message(b"")
