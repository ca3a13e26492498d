"""
Collusion economics
===================

How much can a signer gain by helping to forge a block, and how large does
the transaction fee have to be before honest signing pays more?
"""

from fractions import Fraction

from popchain.econ import (
    catchup_probability,
    colluder_share,
    honest_fee_share,
    min_bounty_penalty,
    min_fee_fraction,
)

# a block may carry at most TA = 10,000 (minor units), one transaction at most
# e = 10% of it, the fee is 1%, blocks finalize after R = 10 confirmations and
# each block gathers about 10 signatures
e, TA, f, R, S_bar = 0.1, 10_000, 0.01, 10, 10

gain = colluder_share(e, TA, f, R, S_bar)
fee = honest_fee_share(f, TA, S_bar)
print("gain per colluder  ", gain, "=", float(gain))
print("fee per honest sig ", fee)

# the fee fraction at which both are equal
fp = min_fee_fraction(e, R)
print("break-even fee     ", fp, "~", f"{float(fp):.5f}")

# a reporting bounty only needs to match the colluder's gain
print("minimum bounty     ", min_bounty_penalty(e, TA, f, R, S_bar))

# %%
# Sweeping the fee fraction shows the sign change at the break-even point.

for k in range(0, 21, 2):
    fk = Fraction(k, 1000)
    diff = honest_fee_share(fk, TA, S_bar) - colluder_share(e, TA, fk, R, S_bar)
    print(f"f={float(fk):.3f}  honest - colluder = {float(diff):+8.3f}")

# %%
# An attacker controlling a share q of the signers, z blocks behind.

for q in (0.1, 0.2, 0.3, 0.4):
    row = " ".join(f"{float(catchup_probability(q, z)):.2e}" for z in (1, 2, 5, 10))
    print(f"q={q:.1f}  z=1,2,5,10: {row}")
