"""Bandwidth-shared message transfer.

Every node has one uplink and one downlink. A transfer's rate is
min(uplink capacity / uplink transfers, downlink capacity / downlink transfers),
recomputed whenever a transfer starts or finishes on either interface. A
message is delivered ``latency`` ms after its last byte leaves.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

# bits per second -> bytes per millisecond
BPS_TO_BPMS = 1 / 8000


def transmit_time(size: int, up_bps: float, down_bps: float, latency: int, now: int = 0) -> int:
    """Delivery time of a lone transfer on a dedicated path."""
    if size <= 0:
        raise ValueError("message size must be positive")
    rate = min(up_bps, down_bps) * BPS_TO_BPMS
    return now + latency + math.ceil(size / rate)


class Transfer:
    __slots__ = ("seq", "src", "dst", "size", "remaining", "rate", "stamp", "version", "on_done", "args")

    def __init__(self, seq, src, dst, size, now, on_done, args):
        self.seq = seq
        self.src = src
        self.dst = dst
        self.size = size
        self.remaining = float(size)
        self.rate = 0.0
        self.stamp = now
        self.version = 0
        self.on_done = on_done
        self.args = args


class Network:
    """Processor-sharing transfers driven by an external event scheduler.

    ``schedule(time, fn, *args)`` must run ``fn(*args)`` at ``time``;
    ``clock()`` returns the current time.
    """

    def __init__(
        self,
        up_bps: Sequence[float],
        down_bps: Sequence[float],
        latency: int,
        schedule: Callable,
        clock: Callable[[], int],
    ):
        self.up_cap = [b * BPS_TO_BPMS for b in up_bps]
        self.down_cap = [b * BPS_TO_BPMS for b in down_bps]
        self.latency = latency
        self._schedule = schedule
        self._clock = clock
        self.uploads: list[set[Transfer]] = [set() for _ in up_bps]
        self.downloads: list[set[Transfer]] = [set() for _ in down_bps]
        self._seq = 0

    def send(self, src: int, dst: int, size: int, on_done: Callable, *args) -> Transfer:
        """Start a transfer; ``on_done(*args)`` runs at delivery."""
        if size <= 0:
            raise ValueError("message size must be positive")
        now = self._clock()
        self._seq += 1
        tr = Transfer(self._seq, src, dst, size, now, on_done, args)
        affected = self.uploads[src] | self.downloads[dst]
        self.uploads[src].add(tr)
        self.downloads[dst].add(tr)
        affected.add(tr)
        self._rerate(affected, now)
        return tr

    def _rerate(self, transfers, now: int) -> None:
        for tr in sorted(transfers, key=_seq):
            tr.remaining -= tr.rate * (now - tr.stamp)
            tr.stamp = now
            tr.rate = min(
                self.up_cap[tr.src] / len(self.uploads[tr.src]),
                self.down_cap[tr.dst] / len(self.downloads[tr.dst]),
            )
            tr.version += 1
            left = max(0.0, tr.remaining)
            self._schedule(now + math.ceil(left / tr.rate - 1e-9), self._finish, tr, tr.version)

    def _finish(self, tr: Transfer, version: int) -> None:
        if version != tr.version:
            return
        now = self._clock()
        tr.remaining = 0.0
        tr.version += 1
        self.uploads[tr.src].discard(tr)
        self.downloads[tr.dst].discard(tr)
        self._rerate(self.uploads[tr.src] | self.downloads[tr.dst], now)
        self._schedule(now + self.latency, tr.on_done, *tr.args)

    def busy(self, node: int) -> int:
        return len(self.uploads[node])


def _seq(tr: Transfer) -> int:
    # deterministic iteration order, independent of set hashing
    return tr.seq
