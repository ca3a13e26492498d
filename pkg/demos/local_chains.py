"""
Local chains
============

Value moves between two local chains by debiting a bridge account on the
source and crediting from the destination's bridge float. Old chains can be
retired into cold storage with their balances migrated.
"""

from fractions import Fraction

from popchain.multichain import (
    LocalChain,
    TransferJournal,
    aggregate_tps,
    claim_from_archive,
    inter_chain_transfer,
    migrate_hot_cold,
)

seoul = LocalChain("seoul", {"alice": 100_000}, bridge_float=10**6)
nyc = LocalChain("nyc", {"bob": 0}, bridge_float=10**6)
alice, bob = seoul.account("alice"), nyc.account("bob")

journal = TransferJournal()
# 50,000 minor units at a rate of 0.85 destination units per source unit
t = inter_chain_transfer(seoul, nyc, alice, bob, 50_000, rate=Fraction(85, 100), journal=journal)
print("state", t.state, "debited", t.amount_src, "credited", t.amount_dst, "fees", t.fee_total)
print(journal.to_csv())

# %%
# Retire the Seoul chain. Alice's remainder moves to the new chain. Had she
# been skipped, she could still claim it from the archive once.

seoul2 = LocalChain("seoul-2", reserve=10**7)
rep = migrate_hot_cold(seoul, seoul2, skip=[alice])
print("migrated", len(rep.migrated), "missed", {k.hex()[:8]: v for k, v in rep.missed.items()})
claim_from_archive(seoul, seoul2, alice)
print("alice on the new chain:", seoul2.balance(alice))

# %%
# Throughput grows linearly with the number of independent chains.

for n in (1, 10, 100):
    print(f"{n:3d} chains x 54.9 TPS = {float(aggregate_tps(54.9, n)):.0f} TPS")
