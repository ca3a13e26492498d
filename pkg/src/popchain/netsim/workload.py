"""Poisson transaction arrivals between random account pairs."""
from __future__ import annotations

import random
from typing import Iterator, Sequence

from ..chain import Transaction
from ..crypto import KeyPair, SignatureScheme


def arrival_times(rate_per_ms: float, duration: int, rng: random.Random) -> Iterator[int]:
    """Integer-ms arrival times of a Poisson process on [0, duration]."""
    if rate_per_ms <= 0:
        return
    t = 0.0
    while True:
        t += rng.expovariate(rate_per_ms)
        if t > duration:
            return
        yield int(t)


def workload_generator(
    rate_per_ms: float,
    duration: int,
    accounts: Sequence[bytes],
    keys: Sequence[KeyPair],
    scheme: SignatureScheme,
    rng: random.Random,
    max_amount: int = 100,
    fee: int = 1,
    chain_id: str = "main",
) -> Iterator[tuple[int, int, Transaction]]:
    """Yields (time, sender index, tx) in time order.

    Amounts are small against the initial balances the simulator hands out,
    so senders can always pay. At most one transaction per sender per
    millisecond keeps source keys unique.
    """
    if len(accounts) < 2:
        return
    last: dict[int, int] = {}
    for t in arrival_times(rate_per_ms, duration, rng):
        while True:
            s = rng.randrange(len(accounts))
            if last.get(s) != t:
                break
        r = rng.randrange(len(accounts) - 1)
        r += r >= s
        last[s] = t
        amount = rng.randint(1, max_amount)
        tx = Transaction.create(scheme, keys[s], keys[r], accounts[s], accounts[r], amount, fee, t, "", chain_id)
        yield t, s, tx
