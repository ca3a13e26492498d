"""Hash-derived merger/signer group selection, group quality and difficulty control."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from math import floor, isqrt
from typing import Iterable, Sequence

import numpy as np

from .crypto import DIGEST_SIZE, H, be32

METRICS = ("hamming", "euclidean", "manhattan")

MAX_DISTANCE = {
    "hamming": 8 * DIGEST_SIZE,
    "manhattan": 255 * DIGEST_SIZE,
    "euclidean": isqrt(DIGEST_SIZE * 255 * 255),
}


class LengthMismatch(ValueError):
    pass


class InsufficientRoster(Exception):
    pass


class EmptySelection(ValueError):
    pass


def id_distance(a: bytes, b: bytes, metric: str = "hamming") -> int:
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} != {len(b)}")
    if metric == "hamming":
        return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).bit_count()
    diff = np.frombuffer(a, np.uint8).astype(np.int64) - np.frombuffer(b, np.uint8).astype(np.int64)
    if metric == "manhattan":
        return int(np.abs(diff).sum())
    if metric == "euclidean":
        return isqrt(int((diff * diff).sum()))
    raise ValueError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class RosterMember:
    network_id: bytes
    join_height: int = 0
    active: bool = True


class Roster:
    """Ordered set of registered nodes.

    Members are kept sorted by network ID so that insertion order never leaks
    into selection results.
    """

    CACHE_LIMIT = 4096

    def __init__(self, members: Iterable[RosterMember | bytes] = ()):
        self._members: dict[bytes, RosterMember] = {}
        self.version = 0
        self._cache: dict = {}
        self._max_join = 0
        for m in members:
            self.add(m)

    def add(self, member: RosterMember | bytes) -> None:
        if isinstance(member, bytes):
            member = RosterMember(member)
        if member.network_id in self._members:
            raise ValueError(f"duplicate roster member {member.network_id.hex()}")
        self._members[member.network_id] = member
        self._max_join = max(self._max_join, member.join_height)
        self._touch()

    def set_active(self, network_id: bytes, active: bool) -> None:
        m = self._members[network_id]
        self._members[network_id] = RosterMember(m.network_id, m.join_height, active)
        self._touch()

    def _touch(self) -> None:
        self.version += 1
        self._cache.clear()

    def __contains__(self, network_id: bytes) -> bool:
        return network_id in self._members

    def __len__(self) -> int:
        return len(self._members)

    def __iter__(self):
        return iter(sorted(self._members.values(), key=lambda m: m.network_id))

    def member(self, network_id: bytes) -> RosterMember:
        return self._members[network_id]

    def cached(self, key, compute):
        hit = self._cache.get(key)
        if hit is None:
            if len(self._cache) >= self.CACHE_LIMIT:
                self._cache.clear()
            hit = self._cache[key] = compute()
        return hit

    def eligible(self, height: int | None = None, exclude: Iterable[bytes] = ()) -> "_Candidates":
        """Active members that joined strictly before ``height`` (all active ones if None)."""
        exclude = frozenset(exclude)
        if height is not None and height > self._max_join:
            height = self._max_join + 1  # every later height sees the same members

        def compute():
            ids = sorted(
                m.network_id
                for m in self._members.values()
                if m.active and (height is None or m.join_height < height) and m.network_id not in exclude
            )
            return _Candidates(tuple(ids))

        return self.cached(("eligible", height, exclude), compute)


class _Candidates:
    """Eligible IDs with precomputed integer and byte-matrix forms."""

    def __init__(self, ids: tuple[bytes, ...]):
        self.ids = ids
        self.ints = [int.from_bytes(i, "big") for i in ids]
        self._matrix = None

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            buf = b"".join(self.ids)
            self._matrix = np.frombuffer(buf, np.uint8).reshape(len(self.ids), DIGEST_SIZE).astype(np.int64)
        return self._matrix

    def distances(self, target: bytes, metric: str) -> list[int]:
        if metric == "hamming":
            t = int.from_bytes(target, "big")
            return [(t ^ x).bit_count() for x in self.ints]
        if not self.ids:
            return []
        diff = self.matrix() - np.frombuffer(target, np.uint8).astype(np.int64)
        if metric == "manhattan":
            return np.abs(diff).sum(axis=1).tolist()
        if metric == "euclidean":
            return [isqrt(v) for v in (diff * diff).sum(axis=1).tolist()]
        raise ValueError(f"unknown metric {metric!r}")

    def ranked(self, target: bytes, metric: str, skip: Iterable[bytes] = ()) -> list[tuple[int, bytes]]:
        """(distance, id) pairs sorted nearest first; ties go to the smaller ID."""
        skip = set(skip)
        d = self.distances(target, metric)
        order = sorted(range(len(self.ids)), key=lambda k: (d[k], self.ints[k]))
        return [(d[k], self.ids[k]) for k in order if self.ids[k] not in skip]


@dataclass(frozen=True)
class SelectionResult:
    targets: tuple[bytes, ...]
    chosen: tuple[bytes, ...]
    distances: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.chosen)


def _nearest_distinct(targets: Sequence[bytes], pool: _Candidates, metric: str) -> SelectionResult:
    if len(pool.ids) < len(targets):
        raise InsufficientRoster(f"need {len(targets)} members, {len(pool.ids)} eligible")
    chosen: list[bytes] = []
    dists: list[int] = []
    taken: set[int] = set()
    for target in targets:
        d = pool.distances(target, metric)
        best = None
        for k, dk in enumerate(d):
            if k in taken:
                continue
            if best is None or dk < d[best] or (dk == d[best] and pool.ints[k] < pool.ints[best]):
                best = k
        taken.add(best)
        chosen.append(pool.ids[best])
        dists.append(d[best])
    return SelectionResult(tuple(targets), tuple(chosen), tuple(dists))


def signer_targets(prev_tx_digest: bytes, S: int) -> tuple[bytes, ...]:
    return tuple(H(be32(i), prev_tx_digest) for i in range(1, S + 1))


def select_signer_group(
    prev_tx_digest: bytes,
    S: int,
    roster: Roster,
    metric: str = "hamming",
    height: int | None = None,
) -> SelectionResult:
    """Nearest distinct active members to the targets H(be32(i) || prev_tx_digest), i = 1..S."""
    if S < 0:
        raise ValueError("S must be non-negative")
    return roster.cached(
        ("signers", prev_tx_digest, S, metric, height),
        lambda: _nearest_distinct(signer_targets(prev_tx_digest, S), roster.eligible(height), metric),
    )


def signer_candidates(
    prev_tx_digest: bytes,
    index: int,
    S: int,
    roster: Roster,
    metric: str = "hamming",
    height: int | None = None,
) -> list[tuple[int, bytes]]:
    """Substitute order for target ``index`` (1-based).

    Rank 0 is the primary choice; later ranks are the next-nearest members,
    skipping the primaries of lower indices.
    """

    def compute():
        primary = select_signer_group(prev_tx_digest, S, roster, metric, height)
        target = primary.targets[index - 1]
        return roster.eligible(height).ranked(target, metric, skip=primary.chosen[: index - 1])

    return roster.cached(("candidates", prev_tx_digest, index, S, metric, height), compute)


def merger_targets(last_tx_digests: Sequence[bytes], prev_mergers: Sequence[bytes], M: int) -> tuple[bytes, ...]:
    history = H(*last_tx_digests)
    return tuple(H(be32(i), prev_mergers[i - 1], history) for i in range(1, M + 1))


def select_merger_group(
    last_blocks: Sequence,
    prev_mergers: Sequence[bytes],
    M: int,
    roster: Roster,
    metric: str = "hamming",
    height: int | None = None,
    exclude: Iterable[bytes] = (),
) -> SelectionResult:
    """Merger group for the next block.

    ``last_blocks`` is most-recent first (N-1, N-2, ..., N-t); items may be
    blocks (anything with ``tx_digest``) or raw digests. ``exclude`` removes
    members that are currently ineligible.
    """
    if not last_blocks:
        raise ValueError("need at least one previous block")
    if len(prev_mergers) < M:
        raise ValueError(f"need {M} previous mergers, got {len(prev_mergers)}")
    digests = [b if isinstance(b, bytes) else b.tx_digest for b in last_blocks]
    targets = merger_targets(digests, prev_mergers, M)
    return _nearest_distinct(targets, roster.eligible(height, exclude), metric)


def group_quality(result: SelectionResult, metric: str = "hamming") -> Fraction:
    """Mean normalized distance; 0 is a perfect group."""
    if not result.distances:
        raise EmptySelection("empty selection has no quality")
    top = MAX_DISTANCE[metric]
    return Fraction(sum(result.distances), top * len(result.distances))


# -- difficulty -----------------------------------------------------------------


def round_half_away(x: Fraction) -> int:
    if x >= 0:
        return floor(x + Fraction(1, 2))
    return -floor(-x + Fraction(1, 2))


@dataclass
class DifficultyState:
    signer_count: int
    target_interval: int
    window_size: int = 1800
    window: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.signer_count < 1:
            raise ValueError("signer_count must be >= 1")
        self.window = deque(self.window, maxlen=self.window_size)

    def record(self, interval_ms: int) -> None:
        self.window.append(interval_ms)


def next_signer_count(S: int, target_interval: int, intervals: Sequence[int]) -> int:
    mean = Fraction(sum(intervals), len(intervals))
    if mean <= 0:
        return S
    return max(1, round_half_away(S * Fraction(target_interval) / mean))


def adjust_difficulty(state: DifficultyState) -> int:
    """Rescale S by target/mean once the window is full, then clear the window."""
    if len(state.window) < state.window_size:
        return state.signer_count
    state.signer_count = next_signer_count(state.signer_count, state.target_interval, state.window)
    state.window.clear()
    return state.signer_count
