"""
Hash-derived signer groups
==========================

Signers for the next block are the registered nodes whose IDs lie closest
to targets hashed from the previous block's transactions. Anyone holding
the chain can recompute the group.
"""

import numpy as np

from popchain.crypto import H
from popchain.selection import (
    Roster,
    RosterMember,
    group_quality,
    select_signer_group,
    signer_candidates,
)

rng = np.random.default_rng(7)
members = [RosterMember(rng.bytes(32), 0, True) for _ in range(500)]
roster = Roster(members)

prev_tx_digest = H(b"transactions of the previous block")
S = 5
sel = select_signer_group(prev_tx_digest, S, roster, "hamming", 1)
for i, (t, c, d) in enumerate(zip(sel.targets, sel.chosen, sel.distances), start=1):
    print(f"target {i} {t.hex()[:12]}  signer {c.hex()[:12]}  hamming distance {d}")
print("group quality", f"{float(group_quality(sel, 'hamming')):.4f}", "(0 is perfect)")

# %%
# With 500 uniform IDs the nearest one is typically ~100 bits away from a
# random target. Quality improves slowly as the roster grows.

for n in (50, 500, 5000):
    r = Roster([RosterMember(rng.bytes(32), 0, True) for _ in range(n)])
    q = np.mean([float(group_quality(select_signer_group(H(bytes([k])), S, r, "hamming", 1), "hamming")) for k in range(20)])
    print(f"{n:5d} signers: mean quality {q:.4f}")

# %%
# If a chosen signer is offline the merger asks the next candidate for the
# same index. The stored (index, rank) lets a verifier replay that choice.

cands = signer_candidates(prev_tx_digest, 1, S, roster, "hamming", 1)
for rank, (d, nid) in enumerate(cands[:4]):
    print(f"index 1 rank {rank}: {nid.hex()[:12]} distance {d}")
