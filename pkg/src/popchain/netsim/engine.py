"""Discrete-event driver wiring node state machines to the transport model."""
from __future__ import annotations

import hashlib
import heapq
import itertools
import random
import statistics
import struct
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import BinaryIO

import numpy as np

from ..chain import (
    Block,
    BlockTree,
    ChainContext,
    ChainRules,
    TxIndex,
    export_chain,
    fork_choice,
    make_genesis,
)
from ..consensus import (
    BLOCK,
    REPORT,
    SIGN_REQ,
    SIGN_RESP,
    TX,
    Aborted,
    Completed,
    MergerState,
    SignRequest,
    SignResponse,
    SignerState,
    UNKNOWN_PARENT,
    encode_message,
)
from ..crypto import H, enc_bytes, enc_int, get_scheme
from ..identity import IdentificationAuthority, NetworkRegistry, enroll
from ..selection import InsufficientRoster, Roster, RosterMember
from .config import SimConfig
from .topology import FULL, MERGER, SIGNER, build_topology, node_classes
from .transport import Network
from .workload import workload_generator

# modeled on-the-wire sizes (bytes) of the fixed parts of each message
HEADER_BYTES = 160
SIG_ENTRY_BYTES = 110
RESPONSE_BYTES = 180
REPORT_BYTES = 200

_RECORD = struct.Struct(">QIIB")
BROADCAST = 0xFFFFFFFF


@dataclass(frozen=True)
class SimMetrics:
    mean_block_interval: Fraction
    tps: Fraction
    stale_block_rate: Fraction
    median_half_propagation: Fraction
    merger_block_bytes_fraction: Fraction
    signer_sig_bytes_fraction: Fraction
    total_blocks: int
    stale_blocks: int


@dataclass
class SimResult:
    config: SimConfig
    metrics: SimMetrics
    main_chain: list[Block]
    produced: list[Block]
    replay_digest: str
    ctx: ChainContext
    bytes_by_class: dict[str, int]
    bytes_by_type: dict[int, int]
    message_bytes: int
    balance_total: int
    initial_total: int
    double_votes: list[tuple[int, bytes]]
    abandoned: int = 0
    reports: int = 0
    rejected: dict[str, int] = field(default_factory=dict)

    def export(self, chain_id: str = "main") -> str:
        return export_chain(self.main_chain, chain_id, self.ctx)

    def window_means(self, window: int) -> list[Fraction]:
        """Mean block interval of each consecutive ``window``-block stretch of the main chain."""
        stamps = [b.timestamp for b in self.main_chain]
        out = []
        for k in range(1, len(stamps) - window + 1, window):
            out.append(Fraction(stamps[k + window - 1] - stamps[k - 1], window))
        return out


@dataclass
class _Gossip:
    have: bytearray
    fetching: bytearray
    start: int
    wire_digest: bytes = b""
    wire: bytes | None = None
    count: int = 0
    half: int | None = None


class Simulation:
    def __init__(self, config: SimConfig, replay_log: BinaryIO | None = None):
        cfg = config
        self.cfg = cfg
        self.now = 0
        self._queue: list = []
        self._seq = itertools.count()
        self.replay = hashlib.sha256()
        self.replay_log = replay_log

        def stream(name: str) -> random.Random:
            return random.Random(f"{cfg.seed}:{name}")

        self.scheme = get_scheme(cfg.scheme)
        self.classes = node_classes(cfg)
        n = cfg.n_nodes
        self.n = n

        # identities through both registration stages
        id_rng = stream("identity")
        authority = IdentificationAuthority(self.scheme, id_rng)
        registry = NetworkRegistry(self.scheme, authority.public_key, id_rng)
        wallets = [enroll(f"node-{i}", authority, registry, id_rng, timestamp=0) for i in range(n)]
        self.ids = [w.network_id for w in wallets]
        self.keys = [w.network_keys for w in wallets]
        self.index_of = {nid: i for i, nid in enumerate(self.ids)}
        roster_keys = registry.roster()

        rules = ChainRules(
            required_signers=cfg.S_initial,
            merger_group_size=cfg.M,
            lookback=cfg.t,
            alpha=Fraction(cfg.alpha),
            confirmation_depth=cfg.R,
            metric=cfg.metric,
            merger_selection=not cfg.legacy_open_competition,
            difficulty_enabled=cfg.difficulty_enabled,
            difficulty_window=cfg.difficulty_window,
            target_interval=cfg.target_interval,
        )
        signers = Roster(RosterMember(self.ids[i]) for i in range(n) if self.classes[i] == SIGNER)
        mergers = Roster(RosterMember(self.ids[i]) for i in range(n) if self.classes[i] == MERGER)
        self.ctx = ChainContext(rules, signers, mergers, roster_keys, self.scheme)

        self.genesis = make_genesis(cfg.S_initial, 0)
        self.balances = {nid: cfg.initial_balance for nid in self.ids}
        self.index = TxIndex()
        self.verdicts: dict = {}
        self.mergers: dict[int, MergerState] = {}
        self.signers: dict[int, SignerState] = {}
        for i, c in enumerate(self.classes):
            if c == MERGER:
                self.mergers[i] = MergerState(
                    self.ids[i], self.keys[i], self.ctx, self.genesis, self.balances,
                    cfg.txs_per_block, cfg.k_delay, self.index, self.verdicts,
                )
            elif c == SIGNER:
                self.signers[i] = SignerState(self.ids[i], self.keys[i], self.scheme)
        signer_nodes = sorted(self.signers)
        off_rng = stream("offline")
        self.offline = set(off_rng.sample(signer_nodes, round(cfg.signer_offline_fraction * len(signer_nodes))))
        self.wake_rng = stream("wake")

        # network
        self.adj = build_topology(cfg, np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, 7]))
        up = [cfg.bw_merger if c == MERGER else cfg.bw_up_signer_full for c in self.classes]
        down = [cfg.bw_merger if c == MERGER else cfg.bw_down_signer_full for c in self.classes]
        self.net = Network(up, down, cfg.base_latency, self.at, lambda: self.now)
        self.uploading = [0] * n
        # sign traffic follows shortest overlay paths between mergers and signers
        self.route_parent = {m: _bfs_parents(self.adj, m) for m in self.mergers}
        self.upload_queue = [deque() for _ in range(n)]

        # workload
        self.txlog: list[tuple[int, object]] = []
        self._txs = workload_generator(
            cfg.tx_rate_per_ms, cfg.duration, self.ids, self.keys, self.scheme, stream("workload")
        )
        self._tx_done = False
        self.tx_ptr = {m: 0 for m in self.mergers}

        # bookkeeping
        self.blocks: dict[bytes, Block] = {self.genesis.digest: self.genesis}
        self.gossip: dict[bytes, _Gossip] = {}
        self.produced: list[Block] = []
        self.awaiting: dict[int, Block | None] = {m: None for m in self.mergers}
        self.polling: set[int] = set()
        self.signer_queue: dict[int, list] = {s: [] for s in self.signers}
        self.waking: set[int] = set()
        self.wire_cache: dict[int, tuple[bytes, bytes]] = {}
        self.bytes_by_class = {MERGER: 0, SIGNER: 0, FULL: 0}
        self.bytes_by_type = {TX: 0, SIGN_REQ: 0, SIGN_RESP: 0, BLOCK: 0, REPORT: 0}
        self.merger_block_bytes = 0
        self.signer_sig_bytes = 0
        self.message_bytes = 0
        self.abandoned = 0
        self.reports = 0
        self.rejected: dict[str, int] = {}

    # -- event queue --------------------------------------------------------------

    def at(self, time: int, fn, *args) -> None:
        heapq.heappush(self._queue, (time, next(self._seq), fn, args))

    def run(self) -> SimResult:
        for m in sorted(self.mergers):
            self.at(0, self._try_build, m)
        end = self.cfg.duration
        q = self._queue
        while q and q[0][0] <= end:
            time, _, fn, args = heapq.heappop(q)
            self.now = time
            fn(*args)
        return self._result()

    # -- accounting ---------------------------------------------------------------

    def _record(self, src: int, dst: int, kind: int, size: int, wire_digest: bytes, wire: bytes | None = None) -> None:
        cls = self.classes[src]
        self.bytes_by_class[cls] += size
        self.bytes_by_type[kind] += size
        self.message_bytes += size
        if kind == BLOCK and cls == MERGER:
            self.merger_block_bytes += size
        elif kind == SIGN_RESP and cls == SIGNER:
            self.signer_sig_bytes += size
        head = _RECORD.pack(self.now, src, dst, kind)
        self.replay.update(head + wire_digest)
        if self.replay_log is not None:
            if wire is None:
                raise ValueError("full replay log needs the wire bytes")
            self.replay_log.write(head + struct.pack(">I", len(wire)) + wire)

    def _block_size(self, block: Block) -> int:
        return HEADER_BYTES + len(block.tx_list) * self.cfg.avg_tx_size + SIG_ENTRY_BYTES * (len(block.signer_sigs) + 1)

    # -- transactions -------------------------------------------------------------

    def _extend_txlog(self, until: int | None = None, count: int | None = None) -> None:
        """Generate transactions up to time ``until`` or until the log holds ``count``."""
        log = self.txlog
        full_log = self.replay_log is not None
        n_mergers = len(self.mergers)
        size = self.cfg.avg_tx_size
        while not self._tx_done:
            if until is not None and log and log[-1][0] > until:
                return
            if count is not None and len(log) >= count:
                return
            try:
                t, s, tx = next(self._txs)
            except StopIteration:
                self._tx_done = True
                return
            wire = encode_message(tx)
            # one broadcast record per transaction; every merger receives a copy
            self.bytes_by_class[self.classes[s]] += n_mergers * size
            self.bytes_by_type[TX] += n_mergers * size
            self.message_bytes += n_mergers * size
            head = _RECORD.pack(t, s, BROADCAST, TX)
            self.replay.update(head + H(wire))
            if full_log:
                self.replay_log.write(head + struct.pack(">I", len(wire)) + wire)
            log.append((t, tx))

    def _pull(self, m: int) -> None:
        horizon = self.now - self.cfg.tx_relay_ms
        self._extend_txlog(until=horizon)
        log = self.txlog
        k = self.tx_ptr[m]
        on_tx = self.mergers[m].on_transaction
        while k < len(log) and log[k][0] <= horizon:
            on_tx(log[k][1])
            k += 1
        self.tx_ptr[m] = k

    # -- mergers ------------------------------------------------------------------

    def _poll(self, m: int) -> None:
        self.polling.discard(m)
        self._try_build(m)

    def _try_build(self, m: int) -> None:
        ms = self.mergers[m]
        if ms.pending is not None or self.awaiting[m] is not None:
            return
        self._pull(m)
        draft = ms.build_block(self.now)
        if draft is None:
            try:
                eligible = self.ctx.eligible_mergers(ms.tree, ms.tip_block)
            except InsufficientRoster:
                return
            if ms.id in eligible and m not in self.polling:
                # wake up once enough further transactions will have reached this merger
                need = max(1, self.cfg.txs_per_block - len(ms.mempool))
                k = self.tx_ptr[m] + need - 1
                self._extend_txlog(count=k + 1)
                if k < len(self.txlog):
                    self.polling.add(m)
                    self.at(max(self.now + 1, self.txlog[k][0] + self.cfg.tx_relay_ms), self._poll, m)
            return
        ser = draft.serialize()
        self.wire_cache[m] = (draft.signing_digest, ser)
        for req in ms.sign_requests():
            self._send_request(m, draft, req)

    def _send_request(self, m: int, draft: Block, req: SignRequest) -> None:
        s = self.index_of[req.signer]
        digest, ser = self.wire_cache[m]
        wire = bytes([SIGN_REQ]) + enc_bytes(ser) + enc_int(req.index) + enc_int(req.rank)
        size = HEADER_BYTES + len(draft.tx_list) * self.cfg.avg_tx_size
        self._forward(self._path(m, s), 0, SIGN_REQ, size, H(wire), wire, self._on_sign_request, (s, m, draft, req))
        if self.cfg.sign_timeout:
            self.at(self.now + self.cfg.sign_timeout, self._on_timeout, m, draft.signing_digest, req.signer)

    def _on_timeout(self, m: int, digest: bytes, signer: bytes) -> None:
        ms = self.mergers[m]
        req = ms.on_timeout(digest, signer)
        if req is not None:
            self._send_request(m, ms.pending.draft, req)

    def _on_sign_response(self, m: int, resp: SignResponse) -> None:
        ms = self.mergers[m]
        out = ms.on_response(resp)
        if isinstance(out, Completed):
            self.awaiting[m] = out.block
            self.at(self.now + out.delay, self._broadcast, m, out.block)
        elif isinstance(out, SignRequest):
            self._send_request(m, ms.pending.draft, out)
        elif isinstance(out, Aborted):
            if out.report is not None:
                self._broadcast_report(m, out.report)
            self._try_build(m)

    def _broadcast_report(self, src: int, report) -> None:
        self.reports += 1
        wire = encode_message(report)
        wd = H(wire)
        for m in sorted(self.mergers):
            if m != src:
                self._record(src, m, REPORT, REPORT_BYTES, wd, wire)
                self.net.send(src, m, REPORT_BYTES, self._on_report, m, report)

    def _on_report(self, m: int, report) -> None:
        self.mergers[m].on_report(report)

    def _broadcast(self, m: int, block: Block) -> None:
        self.awaiting[m] = None
        ms = self.mergers[m]
        if ms.tip != block.prev_hash:
            self.abandoned += 1
            self._try_build(m)
            return
        ok, _ = ms.on_block(block, self.now)
        if not ok:
            self.abandoned += 1
            self._try_build(m)
            return
        self.blocks[block.digest] = block
        self.produced.append(block)
        wire = encode_message(block)
        info = _Gossip(bytearray(self.n), bytearray(self.n), self.now, H(wire))
        info.wire = wire if self.replay_log is not None else None
        self.gossip[block.digest] = info
        self._have(m, block)
        self._offer(m, block)
        self._try_build(m)

    # -- block relay --------------------------------------------------------------

    def _have(self, node: int, block: Block) -> None:
        info = self.gossip[block.digest]
        info.have[node] = 1
        info.count += 1
        if info.half is None and 2 * info.count >= self.n:
            info.half = self.now

    def _offer(self, node: int, block: Block) -> None:
        info = self.gossip[block.digest]
        have, fetching = info.have, info.fetching
        for nb in self.adj[node]:
            if not have[nb] and not fetching[nb]:
                fetching[nb] = 1
                if self.uploading[node] < self.cfg.upload_slots:
                    self._upload(node, nb, block)
                else:
                    self.upload_queue[node].append((nb, block))

    def _upload(self, src: int, dst: int, block: Block) -> None:
        info = self.gossip[block.digest]
        self.uploading[src] += 1
        size = self._block_size(block)
        self._record(src, dst, BLOCK, size, info.wire_digest, info.wire)
        self.net.send(src, dst, size, self._on_block_arrived, src, dst, block)

    def _on_block_arrived(self, src: int, dst: int, block: Block) -> None:
        self.uploading[src] -= 1
        if self.upload_queue[src]:
            nb, queued = self.upload_queue[src].popleft()
            self._upload(src, nb, queued)
        self._have(dst, block)
        relay = True
        cls = self.classes[dst]
        if cls == MERGER:
            ms = self.mergers[dst]
            ok, violations = ms.on_block(block, self.now)
            if not ok and violations != [UNKNOWN_PARENT]:
                relay = False
                for v in violations:
                    self.rejected[v] = self.rejected.get(v, 0) + 1
            self._try_build(dst)
        elif cls == SIGNER:
            if block.height > self.cfg.R:
                self.signers[dst].observe_finalized(block.height - self.cfg.R)
        if relay:
            self._offer(dst, block)

    # -- signers ------------------------------------------------------------------

    def _on_sign_request(self, s: int, m: int, draft: Block, req: SignRequest) -> None:
        if s in self.offline:
            return
        self.signer_queue[s].append((m, draft, req))
        if s not in self.waking:
            self.waking.add(s)
            delay = int(self.wake_rng.expovariate(1 / self.cfg.signer_wake_mean)) if self.cfg.signer_wake_mean else 0
            self.at(self.now + delay, self._signer_wake, s)

    def _signer_wake(self, s: int) -> None:
        self.waking.discard(s)
        batch, self.signer_queue[s] = self.signer_queue[s], []
        signer = self.signers[s]
        t = self.now
        for m, draft, req in batch:
            stamps = []
            b = self.blocks[draft.prev_hash]
            while len(stamps) < signer.median_span:
                stamps.append(b.timestamp)
                if b.height == 0:
                    break
                b = self.blocks[b.prev_hash]
            resp = signer.on_request(draft, self.now, stamps, req.index, req.rank)
            t += self.cfg.sign_cost
            self.at(t, self._send_response, s, m, resp)

    def _send_response(self, s: int, m: int, resp: SignResponse) -> None:
        wire = encode_message(resp)
        path = self._path(m, s)
        path.reverse()
        self._forward(path, 0, SIGN_RESP, RESPONSE_BYTES, H(wire), wire, self._on_sign_response, (m, resp))

    def _path(self, m: int, s: int) -> list[int]:
        parent = self.route_parent[m]
        path = [s]
        while path[-1] != m:
            path.append(parent[path[-1]])
        path.reverse()
        return path

    def _forward(self, path, k, kind, size, wire_digest, wire, fn, args) -> None:
        """Store-and-forward one hop of a routed message."""
        src, dst = path[k], path[k + 1]
        self._record(src, dst, kind, size, wire_digest, wire)
        if k + 2 == len(path):
            self.net.send(src, dst, size, fn, *args)
        else:
            self.net.send(src, dst, size, self._forward, path, k + 1, kind, size, wire_digest, wire, fn, args)

    # -- results ------------------------------------------------------------------

    def _result(self) -> SimResult:
        cfg = self.cfg
        observer = BlockTree(self.genesis, confirmation_depth=10**9, balances=self.balances,
                             alpha=Fraction(cfg.alpha), metric=cfg.metric)
        for b in self.produced:
            observer.insert(b)
        tip = fork_choice(observer)
        main = list(observer.ancestors(tip))
        main.reverse()
        on_main = {b.digest for b in main}
        top = main[-1].height

        counted = [b for b in self.produced if b.height < top]
        stale = [b for b in counted if b.digest not in on_main]
        total = len(counted)
        stale_rate = Fraction(len(stale), total) if total else Fraction(0)

        props = [
            self.gossip[b.digest].half - self.gossip[b.digest].start
            for b in counted
            if b.digest in on_main and self.gossip[b.digest].half is not None
        ]
        half_prop = Fraction(statistics.median(props)) if props else Fraction(0)

        if len(main) >= 3:
            first, last = main[1], main[-1]
            span = last.timestamp - first.timestamp
            interval = Fraction(span, len(main) - 2)
            txs = sum(len(b.tx_list) for b in main[2:])
            tps = Fraction(txs * 1000, span) if span else Fraction(0)
        else:
            interval, tps = Fraction(0), Fraction(0)

        total_bytes = self.message_bytes
        metrics = SimMetrics(
            mean_block_interval=interval,
            tps=tps,
            stale_block_rate=stale_rate,
            median_half_propagation=half_prop,
            merger_block_bytes_fraction=Fraction(self.merger_block_bytes, total_bytes) if total_bytes else Fraction(0),
            signer_sig_bytes_fraction=Fraction(self.signer_sig_bytes, total_bytes) if total_bytes else Fraction(0),
            total_blocks=total,
            stale_blocks=len(stale),
        )

        votes: dict[tuple[int, bytes], bytes] = {}
        double = []
        for b in self.produced:
            for s in b.signer_sigs:
                prev = votes.setdefault((b.height, s.signer), b.digest)
                if prev != b.digest:
                    double.append((b.height, s.signer))

        return SimResult(
            config=cfg,
            metrics=metrics,
            main_chain=main,
            produced=list(self.produced),
            replay_digest=self.replay.hexdigest(),
            ctx=self.ctx,
            bytes_by_class=dict(self.bytes_by_class),
            bytes_by_type=dict(self.bytes_by_type),
            message_bytes=self.message_bytes,
            balance_total=sum(observer.states[tip].balances.values()),
            initial_total=sum(self.balances.values()),
            double_votes=double,
            abandoned=self.abandoned,
            reports=self.reports,
            rejected=dict(self.rejected),
        )


def _bfs_parents(adj: list[list[int]], root: int) -> list[int]:
    parent = [-1] * len(adj)
    parent[root] = root
    frontier = [root]
    for u in frontier:
        for v in adj[u]:
            if parent[v] < 0:
                parent[v] = u
                frontier.append(v)
    return parent


def simulate(config: SimConfig, replay_log: BinaryIO | None = None) -> SimResult:
    return Simulation(config, replay_log).run()


def run(config: SimConfig) -> SimMetrics:
    return simulate(config).metrics
