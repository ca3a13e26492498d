import csv
import io
import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from popchain.multichain import (
    COLD,
    COMPLETED,
    FAILED,
    JOURNAL_HEADER,
    SOURCE_COMMITTED,
    AlreadyClaimed,
    ChainCold,
    DestinationUnavailable,
    InsufficientBalance,
    LocalChain,
    MultichainError,
    NonEmptyTarget,
    TransferJournal,
    aggregate_tps,
    claim_from_archive,
    credit_is_backed,
    inter_chain_transfer,
    migrate_hot_cold,
)


def pair(a_balance=10_000, float_=100_000):
    nyc = LocalChain("nyc", {"A": a_balance}, bridge_float=float_)
    bos = LocalChain("bos", {"B": 0}, bridge_float=float_)
    return nyc, bos


def total(chain):
    return sum(chain.balances.values())


def test_local_chain_commit_and_replay():
    c = LocalChain("x", {"a": 100, "b": 0})
    a, b = c.account("a"), c.account("b")
    blk = c.commit([c.make_tx(a, b, 30)])
    assert c.balance(b, finalized=False) == 30
    assert not c.is_finalized(blk.digest)
    c.settle(blk.digest)
    assert c.is_finalized(blk.digest)
    assert c.balance(a) == 69 and c.balance(b) == 30
    assert c.replay_balances() == c.balances
    assert total(c) == 100


def test_basic_transfer_rate_one():
    nyc, bos = pair()
    A, B = nyc.account("A"), bos.account("B")
    before = (total(nyc), total(bos))
    t = inter_chain_transfer(nyc, bos, A, B, 500)
    assert t.state == COMPLETED
    assert nyc.balance(A) == 10_000 - 500 - nyc.fee
    assert bos.balance(B) == 500
    assert (total(nyc), total(bos)) == before
    assert t.fee_total == nyc.fee + bos.fee > nyc.fee
    assert credit_is_backed(t, nyc, bos)
    assert nyc.replay_balances() == nyc.balances and bos.replay_balances() == bos.balances


def test_rate_floors_the_credit():
    nyc, bos = pair()
    t = inter_chain_transfer(nyc, bos, nyc.account("A"), bos.account("B"), 1000, rate=0.9)
    assert t.amount_dst == 900
    assert bos.balance(bos.account("B")) == 900
    t2 = inter_chain_transfer(nyc, bos, nyc.account("A"), bos.account("B"), 7, rate=Fraction(1, 3))
    assert t2.amount_dst == 2


def test_insufficient_balance_mutates_nothing():
    nyc, bos = pair(a_balance=100)
    snap = (dict(nyc.balances), dict(bos.balances), nyc.height, bos.height)
    j = TransferJournal()
    with pytest.raises(InsufficientBalance):
        inter_chain_transfer(nyc, bos, nyc.account("A"), bos.account("B"), 100, journal=j)
    assert (dict(nyc.balances), dict(bos.balances), nyc.height, bos.height) == snap
    (entry,) = j.entries.values()
    assert entry.state == FAILED and entry.reason == "InsufficientBalance"


def test_unreachable_destination_parks_then_resumes():
    nyc, bos = pair()
    A, B = nyc.account("A"), bos.account("B")
    j = TransferJournal()
    bos.available = False
    with pytest.raises(DestinationUnavailable):
        inter_chain_transfer(nyc, bos, A, B, 300, journal=j)
    (entry,) = j.entries.values()
    assert entry.state == SOURCE_COMMITTED
    assert nyc.balance(A) == 10_000 - 301
    assert bos.balance(B) == 0
    bos.available = True
    t = inter_chain_transfer(nyc, bos, A, B, 300, journal=j)
    assert t.state == COMPLETED
    # the debit happened exactly once
    assert nyc.balance(A) == 10_000 - 301
    assert bos.balance(B) == 300


def test_resubmitting_completed_transfer_is_a_no_op():
    nyc, bos = pair()
    A, B = nyc.account("A"), bos.account("B")
    j = TransferJournal()
    t = inter_chain_transfer(nyc, bos, A, B, 50, journal=j)
    snap = (dict(nyc.balances), dict(bos.balances))
    again = inter_chain_transfer(nyc, bos, A, B, 50, journal=j)
    assert again is t
    # without the journal the chains' own records stop a second debit and credit
    third = inter_chain_transfer(nyc, bos, A, B, 50)
    assert third.state == COMPLETED and third.dst_block == t.dst_block
    assert (dict(nyc.balances), dict(bos.balances)) == snap


def test_journal_csv_and_monotone_states():
    nyc, bos = pair()
    j = TransferJournal()
    t = inter_chain_transfer(nyc, bos, nyc.account("A"), bos.account("B"), 10, journal=j)
    rows = list(csv.reader(io.StringIO(j.to_csv())))
    assert tuple(rows[0]) == JOURNAL_HEADER
    assert rows[1][0] == t.transfer_id.hex() and rows[1][7] == COMPLETED
    back = type(t)(**{**t.__dict__, "state": SOURCE_COMMITTED})
    with pytest.raises(MultichainError):
        j.record(back)


def test_zero_credit_refused_before_debit():
    nyc, bos = pair()
    snap = (dict(nyc.balances), dict(bos.balances), nyc.height)
    with pytest.raises(ValueError):
        inter_chain_transfer(nyc, bos, nyc.account("A"), bos.account("B"), 1, rate=Fraction(9, 10))
    assert (dict(nyc.balances), dict(bos.balances), nyc.height) == snap


@settings(max_examples=15)
@given(st.lists(st.tuples(st.integers(1, 400), st.sampled_from([1, Fraction(9, 10), Fraction(3, 2)])), min_size=1, max_size=4))
def test_cross_chain_accounting(transfers):
    nyc, bos = pair()
    A, B = nyc.account("A"), bos.account("B")
    before = (total(nyc), total(bos))
    for k, (amount, rate) in enumerate(transfers):
        if math.floor(amount * Fraction(rate)) == 0:
            continue  # refused up front, see test_zero_credit_refused_before_debit
        bridge_src, a0 = nyc.balance(nyc.bridge), nyc.balance(A)
        b0 = bos.balance(B)
        t = inter_chain_transfer(nyc, bos, A, B, amount, rate, nonce=k)
        # the debit equals the amount, the credit is floor(amount * rate)
        assert nyc.balance(nyc.bridge) - bridge_src == amount
        assert a0 - nyc.balance(A) == amount + nyc.fee
        assert bos.balance(B) - b0 == math.floor(amount * Fraction(rate))
        assert credit_is_backed(t, nyc, bos)
    # each chain's total is untouched, so any weighting across chains is too
    assert (total(nyc), total(bos)) == before


def test_cold_chains_refuse_blocks():
    old = LocalChain("old", {"a": 10})
    old.status = COLD
    with pytest.raises(ChainCold):
        old.commit([])


def test_migration_moves_nonzero_balances():
    old = LocalChain("old", {"a": 10, "b": 0, "c": 7})
    new = LocalChain("new", reserve=10**6)
    rep = migrate_hot_cold(old, new)
    a, b, c = (old.account(n) for n in "abc")
    assert rep.migrated == {a: 10, c: 7}
    assert new.balance(a) == 10 and new.balance(c) == 7 and new.balance(b) == 0
    assert old.status == COLD
    with pytest.raises(NonEmptyTarget):
        migrate_hot_cold(old, new)
    fresh = LocalChain("fresh", reserve=10**6)
    with pytest.raises(ChainCold):
        migrate_hot_cold(old, fresh)


def test_migration_carries_merger_fee_income():
    old = LocalChain("old", {"a": 100, "b": 0})
    a, b = old.account("a"), old.account("b")
    for _ in range(3):
        old.settle(old.commit([old.make_tx(a, b, 5)]).digest)
    earners = {m.id: old.balance(m.id) for m in old.mergers if old.balance(m.id)}
    assert sum(earners.values()) == 3
    new = LocalChain("new", reserve=10**6)
    rep = migrate_hot_cold(old, new)
    for nid, fee in earners.items():
        assert rep.migrated[nid] == fee == new.balance(nid)
    nid = next(iter(earners))
    new.settle(new.commit([new.make_tx(nid, a, 1, fee=0)]).digest)
    assert new.balance(a) == 100 - 3 * 6 + 1


def test_migrated_holder_can_spend_on_new_chain():
    old = LocalChain("old", {"a": 10, "c": 7})
    new = LocalChain("new", reserve=10**6)
    migrate_hot_cold(old, new)
    a, c = old.account("a"), old.account("c")
    new.settle(new.commit([new.make_tx(a, c, 5, fee=1)]).digest)
    assert new.balance(a) == 4 and new.balance(c) == 12


def test_late_claim_once():
    old = LocalChain("old", {"a": 10, "b": 4})
    new = LocalChain("new", reserve=10**6)
    a, b = old.account("a"), old.account("b")
    rep = migrate_hot_cold(old, new, skip=[b])
    assert rep.missed == {b: 4}
    assert new.balance(b) == 0
    h = new.height
    blk = claim_from_archive(old, new, b)
    assert new.height > h and new.is_finalized(blk.digest)
    assert len(blk.tx_list) == 1 and blk.tx_list[0].recipient == b
    assert new.balance(b) == 4
    with pytest.raises(AlreadyClaimed):
        claim_from_archive(old, new, b)
    with pytest.raises(AlreadyClaimed):
        claim_from_archive(old, new, a)


def test_aggregate_tps():
    assert aggregate_tps(54.9, 100) == 5490
    assert abs(aggregate_tps(54.9, 100) - 5500) / 5500 <= Fraction(2, 100)
    assert aggregate_tps(Fraction(37, 3), 1) == Fraction(37, 3)
    assert aggregate_tps(10.8, 2) == Fraction(216, 10)
    with pytest.raises(ValueError):
        aggregate_tps(0, 3)
