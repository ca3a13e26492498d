"""Merger and signer state machines plus the message wire format.

Each state machine is driven one event at a time. Nothing here knows about
simulated time beyond the ``now`` arguments it is handed.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from typing import Sequence

from .chain import (
    Block,
    BlockTree,
    ChainContext,
    LedgerState,
    SignerSignature,
    Transaction,
    TxIndex,
    advance_finalization,
    fork_choice,
    hash_transactions,
    median_time_past,
    validate_block,
)
from .crypto import Decoder, KeyPair, SignatureScheme, enc_bytes, enc_int, enc_str
from .selection import (
    InsufficientRoster,
    MAX_DISTANCE,
    SelectionResult,
    select_signer_group,
    signer_candidates,
)

# verdicts
SIGNED = "Signed"
REJECTED = "Rejected"
REPORTED = "Reported"

# reasons
TIMESTAMP_VIOLATION = "TimestampViolation"
PREDATES_JOIN = "PredatesJoin"
STALE_HEIGHT = "StaleHeight"
ALREADY_SIGNED = "AlreadySigned"
DOUBLE_SPEND = "DoubleSpend"
FINALITY_VIOLATION = "FinalityViolation"
BLACKLISTED = "Blacklisted"
UNKNOWN_PARENT = "UnknownParent"

# message type bytes
TX, SIGN_REQ, SIGN_RESP, BLOCK, REPORT = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class SignResponse:
    verdict: str
    signer: bytes
    draft: bytes
    signature: bytes = b""
    reason: str = ""
    index: int = 0
    rank: int = 0
    notify_merger: bool = False
    evidence: tuple[bytes, ...] = ()
    offenders: tuple[bytes, ...] = ()


@dataclass(frozen=True)
class Report:
    """Misbehavior broadcast consumed by every merger."""

    violation: str
    merger: bytes
    sender: bytes
    evidence: tuple[bytes, ...] = ()


# -- signer ---------------------------------------------------------------------


@dataclass
class SignerState:
    id: bytes
    keys: KeyPair
    scheme: SignatureScheme
    join_height: int = 0
    last_finalized_signed_height: int = 0
    median_span: int = 11
    max_future_ms: int = 60_000
    signed_log: dict[bytes, tuple[int, tuple[bytes, ...]]] = field(default_factory=dict)
    _by_tx: dict[bytes, bytes] = field(default_factory=dict, repr=False)
    _by_source: dict[tuple, tuple[bytes, bytes]] = field(default_factory=dict, repr=False)
    _by_height: dict[int, bytes] = field(default_factory=dict, repr=False)
    _sources: dict[bytes, tuple] = field(default_factory=dict, repr=False)
    _pruned: int = field(default=0, repr=False)

    def observe_finalized(self, height: int) -> None:
        """Record finality; lookup indexes for finalized heights are dropped.

        ``signed_log`` itself is kept in full.
        """
        if height <= self.last_finalized_signed_height:
            return
        self.last_finalized_signed_height = height
        for h in range(self._pruned + 1, height + 1):
            digest = self._by_height.pop(h, None)
            if digest is None:
                continue
            for tid in self.signed_log[digest][1]:
                if self._by_tx.get(tid) == digest:
                    del self._by_tx[tid]
            for key in self._sources.pop(digest, ()):
                if self._by_source.get(key, (None, None))[1] == digest:
                    del self._by_source[key]
        self._pruned = height

    def on_request(
        self,
        draft: Block,
        now: int,
        ancestor_stamps: Sequence[int],
        index: int = 0,
        rank: int = 0,
    ) -> SignResponse:
        """Run the signer checks in order and sign only if all pass.

        ``ancestor_stamps`` are the timestamps of the draft's parent and its
        ancestors, most recent first.
        """
        digest = draft.signing_digest
        base = dict(signer=self.id, draft=digest, index=index, rank=rank)

        stamps = list(ancestor_stamps[: self.median_span])
        if not stamps or not statistics.median(stamps) < draft.timestamp <= now + self.max_future_ms:
            return SignResponse(REPORTED, reason=TIMESTAMP_VIOLATION, offenders=(draft.merger,), **base)
        if draft.height <= self.join_height:
            return SignResponse(REJECTED, reason=PREDATES_JOIN, **base)
        if draft.height <= self.last_finalized_signed_height:
            return SignResponse(REJECTED, reason=STALE_HEIGHT, **base)

        if digest in self.signed_log:
            return self._sign(digest, base)
        other = self._by_height.get(draft.height)
        if other is not None:
            return SignResponse(REJECTED, reason=ALREADY_SIGNED, notify_merger=True, evidence=(other,), **base)
        by_tx, by_source = self._by_tx, self._by_source
        conflict = None
        for tx in draft.tx_list:
            other = by_tx.get(tx.tx_id)
            if other is not None:
                return SignResponse(REJECTED, reason=ALREADY_SIGNED, notify_merger=True, evidence=(other,), **base)
            if conflict is None:
                hit = by_source.get(tx.source_key)
                if hit is not None and hit[0] != tx.tx_id:
                    conflict = (tx, hit[1])
        if conflict is not None:
            tx, other = conflict
            return SignResponse(
                REPORTED,
                reason=DOUBLE_SPEND,
                evidence=(digest, other),
                offenders=(draft.merger, tx.sender),
                **base,
            )

        tx_ids = tuple(tx.tx_id for tx in draft.tx_list)
        self.signed_log[digest] = (draft.height, tx_ids)
        self._by_height[draft.height] = digest
        self._sources[digest] = tuple(tx.source_key for tx in draft.tx_list)
        for tx in draft.tx_list:
            self._by_tx[tx.tx_id] = digest
            self._by_source[tx.source_key] = (tx.tx_id, digest)
        return self._sign(digest, base)

    def _sign(self, digest: bytes, base: dict) -> SignResponse:
        return SignResponse(SIGNED, signature=self.scheme.sign(self.keys.private_key, digest), **base)


# -- merger ---------------------------------------------------------------------


@dataclass
class Pending:
    pass


@dataclass
class Completed:
    block: Block
    delay: int


@dataclass
class Aborted:
    reason: str
    report: Report | None = None


@dataclass(frozen=True)
class SignRequest:
    signer: bytes
    index: int
    rank: int


@dataclass
class PendingDraft:
    draft: Block
    selection: SelectionResult
    started: int
    sigs: dict[int, SignerSignature] = field(default_factory=dict)
    asked: dict[bytes, tuple[int, int]] = field(default_factory=dict)
    rank: dict[int, int] = field(default_factory=dict)


class MergerState:
    def __init__(
        self,
        node_id: bytes,
        keys: KeyPair,
        ctx: ChainContext,
        genesis: Block,
        balances: dict[bytes, int] | None = None,
        target_txs: int = 1,
        k_delay: int = 500,
        index: TxIndex | None = None,
        verdicts: dict | None = None,
    ):
        r = ctx.rules
        self.verdicts = verdicts
        self.id = node_id
        self.keys = keys
        self.ctx = ctx
        self.tree = BlockTree(genesis, r.confirmation_depth, balances, r.alpha, r.metric, index)
        self.tip = genesis.digest
        self.mempool: dict[bytes, Transaction] = {}
        self.blacklist: set[bytes] = set()
        self.pending: PendingDraft | None = None
        self.last_produced_height = 0
        self.target_txs = target_txs
        self.k_delay = k_delay
        self.dropped = 0
        self.oversize = 0
        self.orphans: dict[bytes, list[Block]] = {}
        self._ordered = True  # mempool iteration order is oldest-first

    @property
    def tip_block(self) -> Block:
        return self.tree.blocks[self.tip]

    # transactions

    def on_transaction(self, tx: Transaction) -> bool:
        if tx.tx_id in self.mempool:
            return False
        if tx.sender in self.blacklist or not tx.verify(self.ctx.keys, self.ctx.scheme):
            self.dropped += 1
            return False
        if self.tree.spends(tx, self.tip):
            self.dropped += 1
            return False
        if self.mempool and self._ordered:
            self._ordered = next(reversed(self.mempool.values())).timestamp <= tx.timestamp
        self.mempool[tx.tx_id] = tx
        return True

    # block assembly

    def build_block(self, now: int) -> Block | None:
        """Draft a block on the current tip, or None if this merger may not or cannot."""
        if self.pending is not None:
            return None
        parent = self.tip_block
        try:
            eligible = self.ctx.eligible_mergers(self.tree, parent)
        except InsufficientRoster:
            return None
        if self.id not in eligible:
            return None
        chosen = self._collect(parent)
        if chosen is None:
            return None
        rules = self.ctx.rules
        S = self.ctx.expected_signers(self.tree, parent)
        height = parent.height + 1
        try:
            selection = select_signer_group(parent.tx_digest, S, self.ctx.signers, rules.metric, height)
        except InsufficientRoster:
            return None
        ts = max(now, int(median_time_past(self.tree, parent, rules.median_span)) + 1)
        draft = Block(height, parent.digest, tuple(chosen), hash_transactions(chosen), ts, S, (), self.id, eligible[self.id])
        self.pending = PendingDraft(draft, selection, now)
        return draft

    def _collect(self, parent: Block) -> list[Transaction] | None:
        if self.target_txs == 0:
            return []
        rules = self.ctx.rules
        cap = rules.max_tx_amount
        limit = rules.max_block_amount
        balances = self.tree.states[parent.digest].balances
        spent: dict[bytes, int] = {}  # incoming funds are ignored, which is conservative
        sources: set = set()
        chosen: list[Transaction] = []
        total = 0
        if not self._ordered:
            self.mempool = dict(sorted(self.mempool.items(), key=lambda kv: kv[1].timestamp))
            self._ordered = True
        on_chain = self.tree.index._by_source
        for tx in list(self.mempool.values()):
            if cap is not None and tx.amount > cap:
                del self.mempool[tx.tx_id]
                self.oversize += 1
                continue
            if limit is not None and total + tx.amount > limit:
                continue
            key = tx.source_key
            if key in sources:
                continue
            if key in on_chain and self.tree.spends(tx, parent.digest):
                del self.mempool[tx.tx_id]
                continue
            out = spent.get(tx.sender, 0) + tx.amount + tx.fee
            if out > balances.get(tx.sender, 0):
                continue
            spent[tx.sender] = out
            sources.add(key)
            chosen.append(tx)
            total += tx.amount
            if len(chosen) == self.target_txs:
                return chosen
        return None

    def sign_requests(self) -> list[SignRequest]:
        """Initial requests: every primary signer at rank 0."""
        p = self.pending
        if p is None:
            return []
        out = []
        for i, nid in enumerate(p.selection.chosen, start=1):
            p.asked[nid] = (i, 0)
            p.rank[i] = 0
            out.append(SignRequest(nid, i, 0))
        return out

    def substitute(self, index: int) -> SignRequest | None:
        """Next-nearest candidate for ``index`` that has not been asked yet."""
        p = self.pending
        if p is None or index in p.sigs:
            return None
        d = p.draft
        cands = signer_candidates(self.tree.blocks[d.prev_hash].tx_digest, index, d.required_signers,
                                  self.ctx.signers, self.ctx.rules.metric, d.height)
        r = p.rank.get(index, 0) + 1
        while r < len(cands) and cands[r][1] in p.asked:
            r += 1
        if r >= len(cands):
            return None
        p.rank[index] = r
        p.asked[cands[r][1]] = (index, r)
        return SignRequest(cands[r][1], index, r)

    # signatures

    def on_signature(self, digest: bytes, sig: SignerSignature) -> Pending | Completed | Aborted:
        p = self.pending
        if p is None or digest != p.draft.signing_digest:
            return Pending()
        if p.asked.get(sig.signer) != (sig.index, sig.rank) or sig.index in p.sigs:
            return Pending()
        key = self.ctx.keys.get(sig.signer)
        if key is None or not self.ctx.scheme.verify(key, digest, sig.signature):
            return Pending()
        p.sigs[sig.index] = sig
        if len(p.sigs) < p.draft.required_signers:
            return Pending()
        sigs = tuple(p.sigs[i] for i in sorted(p.sigs))
        block = replace(p.draft, signer_sigs=sigs)
        block = replace(block, merger_sig=self.ctx.scheme.sign(self.keys.private_key, block.body_digest))
        self.pending = None
        top = MAX_DISTANCE[self.ctx.rules.metric]
        quality = sum(s.distance for s in sigs) / (top * len(sigs)) if sigs else 0.0
        return Completed(block, round(self.k_delay * quality))

    def on_response(self, resp: SignResponse) -> Pending | Completed | Aborted | SignRequest | None:
        """Handle a signer's verdict.

        Returns the outcome of a signature, Aborted on a double-spend report,
        or the substitute request to send after a rejection (None if no
        candidates remain).
        """
        p = self.pending
        if p is None or resp.draft != p.draft.signing_digest:
            return Pending()
        if resp.verdict == SIGNED:
            d = p.draft
            cands = signer_candidates(self.tree.blocks[d.prev_hash].tx_digest, resp.index, d.required_signers,
                                      self.ctx.signers, self.ctx.rules.metric, d.height)
            if resp.rank >= len(cands) or cands[resp.rank][1] != resp.signer:
                return Pending()
            dist = cands[resp.rank][0]
            return self.on_signature(resp.draft, SignerSignature(resp.signer, resp.signature, dist, resp.index, resp.rank))
        if resp.verdict == REPORTED:
            self.pending = None
            report = None
            if resp.reason == DOUBLE_SPEND and len(resp.offenders) == 2:
                report = Report(DOUBLE_SPEND, resp.offenders[0], resp.offenders[1], resp.evidence)
                self.on_report(report)
            return Aborted(resp.reason, report)
        if p.asked.get(resp.signer, (None,))[0] != resp.index:
            return Pending()
        return self.substitute(resp.index)

    def on_timeout(self, digest: bytes, signer: bytes) -> SignRequest | None:
        """The signer never answered; ask the next candidate for its index."""
        p = self.pending
        if p is None or digest != p.draft.signing_digest or signer not in p.asked:
            return None
        index, rank = p.asked[signer]
        if index in p.sigs or p.rank.get(index) != rank:
            return None
        return self.substitute(index)

    def on_report(self, report: Report) -> None:
        self.blacklist.add(report.merger)
        self.blacklist.add(report.sender)
        for tid in [t for t, tx in self.mempool.items() if tx.sender == report.sender]:
            del self.mempool[tid]
        if self.pending is not None and self.pending.draft.merger in self.blacklist:
            self.pending = None

    # blocks

    def on_block(self, block: Block, now: int) -> tuple[bool, list[str]]:
        """Validate and insert ``block``; returns (accepted, violations)."""
        tree = self.tree
        if block.digest in tree.blocks:
            return True, []
        if block.merger in self.blacklist:
            return False, [BLACKLISTED]
        if block.prev_hash not in tree.blocks:
            self.orphans.setdefault(block.prev_hash, []).append(block)
            return False, [UNKNOWN_PARENT]
        if not tree.in_live_subtree(block.prev_hash):
            return False, [FINALITY_VIOLATION]
        report = validate_block(block, tree, self.ctx, now, self.verdicts)
        if not report.ok:
            return False, list(report.violations)
        tree.insert(block, report.state)
        if block.merger == self.id:
            self.last_produced_height = max(self.last_produced_height, block.height)
        for child in self.orphans.pop(block.digest, []):
            self.on_block(child, now)
        self._update_tip()
        return True, []

    def _update_tip(self) -> None:
        new = fork_choice(self.tree)
        if new != self.tip:
            self._reorg(self.tip, new)
            self.tip = new
            if self.pending is not None and self.pending.draft.prev_hash != new:
                self.pending = None
        advance_finalization(self.tree)

    def _reorg(self, old: bytes, new: bytes) -> None:
        blocks = self.tree.blocks
        a, b = blocks[old], blocks[new]
        dropped, added = [], []
        while a.height > b.height:
            dropped.append(a)
            a = blocks[a.prev_hash]
        while b.height > a.height:
            added.append(b)
            b = blocks[b.prev_hash]
        while a.digest != b.digest:
            dropped.append(a)
            added.append(b)
            a, b = blocks[a.prev_hash], blocks[b.prev_hash]
        for blk in dropped:
            for tx in blk.tx_list:
                if tx.sender not in self.blacklist and tx.tx_id not in self.mempool:
                    self.mempool[tx.tx_id] = tx
                    self._ordered = False
        for blk in added:
            for tx in blk.tx_list:
                self.mempool.pop(tx.tx_id, None)

    def ledger(self) -> LedgerState:
        return self.tree.states.get(self.tip) or self.tree.states[self.tree.finalized_head]


# -- wire format ----------------------------------------------------------------


def _enc_list(items: Sequence[bytes]) -> bytes:
    return enc_bytes(enc_int(len(items)) + b"".join(enc_bytes(i) for i in items))


def _dec_list(d: Decoder) -> tuple[bytes, ...]:
    inner = Decoder(d.bytes())
    return tuple(inner.bytes() for _ in range(inner.int()))


def encode_message(msg) -> bytes:
    """Type byte followed by the canonical body."""
    if isinstance(msg, Transaction):
        return bytes([TX]) + msg.encoded
    if isinstance(msg, tuple) and len(msg) == 3 and isinstance(msg[0], Block):
        draft, index, rank = msg
        return bytes([SIGN_REQ]) + enc_bytes(draft.serialize()) + enc_int(index) + enc_int(rank)
    if isinstance(msg, SignResponse):
        return bytes([SIGN_RESP]) + (
            enc_bytes(msg.draft)
            + enc_bytes(msg.signer)
            + enc_str(msg.verdict)
            + enc_bytes(msg.signature)
            + enc_str(msg.reason)
            + enc_int(msg.index)
            + enc_int(msg.rank)
            + enc_int(int(msg.notify_merger))
            + _enc_list(msg.evidence)
            + _enc_list(msg.offenders)
        )
    if isinstance(msg, Block):
        return bytes([BLOCK]) + msg.serialize()
    if isinstance(msg, Report):
        return bytes([REPORT]) + enc_str(msg.violation) + enc_bytes(msg.merger) + enc_bytes(msg.sender) + _enc_list(msg.evidence)
    raise TypeError(f"cannot encode {type(msg).__name__}")


def decode_message(data: bytes):
    if not data:
        raise ValueError("empty message")
    kind, body = data[0], data[1:]
    if kind == TX:
        return Transaction.decode(body)
    if kind == BLOCK:
        return Block.deserialize(body)
    d = Decoder(body)
    if kind == SIGN_REQ:
        out = (Block.deserialize(d.bytes()), d.int(), d.int())
    elif kind == SIGN_RESP:
        draft, signer, verdict, sig, reason = d.bytes(), d.bytes(), d.str(), d.bytes(), d.str()
        index, rank, notify = d.int(), d.int(), d.int()
        out = SignResponse(verdict, signer, draft, sig, reason, index, rank, bool(notify), _dec_list(d), _dec_list(d))
    elif kind == REPORT:
        out = Report(d.str(), d.bytes(), d.bytes(), _dec_list(d))
    else:
        raise ValueError(f"unknown message type {kind}")
    if not d.done():
        raise ValueError("trailing bytes after message")
    return out
