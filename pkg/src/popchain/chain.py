"""Transactions, blocks, the block tree, validation, fork choice and finality."""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Iterator, Mapping, Sequence

from .crypto import (
    ZERO_DIGEST,
    Decoder,
    H,
    KeyPair,
    SignatureScheme,
    enc_bytes,
    enc_int,
    enc_str,
)
from .selection import (
    MAX_DISTANCE,
    InsufficientRoster,
    Roster,
    next_signer_count,
    select_merger_group,
    select_signer_group,
    signer_candidates,
)

CHAIN_HEADER = "#popchain-chain v1"

# violation names
BAD_LINKAGE = "BadLinkage"
INSUFFICIENT_SIGNATURES = "InsufficientSignatures"
DUPLICATE_SIGNER = "DuplicateSigner"
BAD_SIGNATURE = "BadSignature"
DOUBLE_SPEND = "DoubleSpend"
TIMESTAMP_OUT_OF_RANGE = "TimestampOutOfRange"
INELIGIBLE_MERGER = "IneligibleMerger"
AMOUNT_LIMIT = "AmountLimit"


class ChainError(Exception):
    pass


class UnknownTip(ChainError):
    pass


class UnknownParent(ChainError):
    pass


class FinalityViolation(ChainError):
    pass


# -- transactions ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Transaction:
    tx_id: bytes
    sender: bytes
    recipient: bytes
    amount: int
    fee: int
    timestamp: int
    purpose: str
    chain_id: str
    sender_sig: bytes = b""
    recipient_sig: bytes = b""

    @staticmethod
    def body(sender: bytes, recipient: bytes, amount: int, fee: int, timestamp: int, purpose: str, chain_id: str) -> bytes:
        return (
            enc_bytes(sender)
            + enc_bytes(recipient)
            + enc_int(amount)
            + enc_int(fee)
            + enc_int(timestamp)
            + enc_str(purpose)
            + enc_str(chain_id)
        )

    @classmethod
    def create(
        cls,
        scheme: SignatureScheme,
        sender_keys: KeyPair,
        recipient_keys: KeyPair,
        sender: bytes,
        recipient: bytes,
        amount: int,
        fee: int = 0,
        timestamp: int = 0,
        purpose: str = "",
        chain_id: str = "main",
    ) -> "Transaction":
        body = cls.body(sender, recipient, amount, fee, timestamp, purpose, chain_id)
        tx_id = H(body)
        unsigned = enc_bytes(tx_id) + body
        tx = cls(
            tx_id,
            sender,
            recipient,
            amount,
            fee,
            timestamp,
            purpose,
            chain_id,
            scheme.sign(sender_keys.private_key, unsigned),
            scheme.sign(recipient_keys.private_key, unsigned),
        )
        tx.__dict__["unsigned"] = unsigned
        return tx

    @cached_property
    def unsigned(self) -> bytes:
        """Canonical encoding without signatures: what both parties sign."""
        return enc_bytes(self.tx_id) + self.body(
            self.sender, self.recipient, self.amount, self.fee, self.timestamp, self.purpose, self.chain_id
        )

    @cached_property
    def framed(self) -> bytes:
        return enc_bytes(self.unsigned)

    @property
    def encoded(self) -> bytes:
        return self.unsigned + enc_bytes(self.sender_sig) + enc_bytes(self.recipient_sig)

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        d = Decoder(data)
        tx = cls(d.bytes(), d.bytes(), d.bytes(), d.int(), d.int(), d.int(), d.str(), d.str(), d.bytes(), d.bytes())
        if not d.done():
            raise ValueError("trailing bytes after transaction")
        return tx

    @cached_property
    def source_key(self) -> tuple[bytes, int]:
        """Two distinct transactions with the same source key spend the same source."""
        return (self.sender, self.timestamp)

    def well_formed(self) -> bool:
        return self.amount > 0 and self.fee >= 0 and self.tx_id == H(self.unsigned[4 + len(self.tx_id):])

    def verify(self, keys: Mapping[bytes, bytes], scheme: SignatureScheme) -> bool:
        spub = keys.get(self.sender)
        rpub = keys.get(self.recipient)
        if spub is None or rpub is None:
            return False
        memo = (id(scheme), spub, rpub)
        if self.__dict__.get("_verified", None) == memo:
            return True
        ok = (
            self.well_formed()
            and scheme.verify(spub, self.unsigned, self.sender_sig)
            and scheme.verify(rpub, self.unsigned, self.recipient_sig)
        )
        if ok:
            self.__dict__["_verified"] = memo
        return ok


def hash_transactions(tx_list: Sequence[Transaction]) -> bytes:
    """Order-sensitive digest over transactions with every signature omitted."""
    return H(enc_int(len(tx_list)), *(tx.framed for tx in tx_list))


# -- blocks ---------------------------------------------------------------------


@dataclass(frozen=True)
class SignerSignature:
    signer: bytes
    signature: bytes
    distance: int
    index: int = 0
    rank: int = 0

    def encode(self) -> bytes:
        return enc_bytes(self.signer) + enc_bytes(self.signature) + enc_int(self.distance) + enc_int(self.index) + enc_int(self.rank)


@dataclass(frozen=True, eq=False)
class Block:
    height: int
    prev_hash: bytes
    tx_list: tuple[Transaction, ...]
    tx_digest: bytes
    timestamp: int
    required_signers: int
    signer_sigs: tuple[SignerSignature, ...] = ()
    merger: bytes = ZERO_DIGEST
    merger_distance: int = 0
    merger_sig: bytes = b""

    @cached_property
    def header(self) -> bytes:
        return (
            enc_int(self.height)
            + enc_bytes(self.prev_hash)
            + enc_bytes(self.tx_digest)
            + enc_int(self.timestamp)
            + enc_int(self.required_signers)
            + enc_bytes(self.merger)
            + enc_int(self.merger_distance)
        )

    @cached_property
    def signing_digest(self) -> bytes:
        """What every signer signs: the draft header."""
        return H(b"sign", self.header)

    @cached_property
    def body_digest(self) -> bytes:
        """What the merger signs: header plus all signer signatures."""
        return H(b"merge", self.header, enc_int(len(self.signer_sigs)), *(s.encode() for s in self.signer_sigs))

    @cached_property
    def digest(self) -> bytes:
        return H(b"block", self.body_digest, enc_bytes(self.merger_sig))

    def __hash__(self) -> int:
        return hash(self.digest)

    def __eq__(self, other) -> bool:
        return isinstance(other, Block) and other.digest == self.digest

    @property
    def signers(self) -> list[bytes]:
        return [s.signer for s in self.signer_sigs]

    def serialize(self) -> bytes:
        return (
            enc_int(self.height)
            + enc_bytes(self.prev_hash)
            + enc_bytes(enc_int(len(self.tx_list)) + b"".join(enc_bytes(tx.encoded) for tx in self.tx_list))
            + enc_bytes(self.tx_digest)
            + enc_int(self.timestamp)
            + enc_int(self.required_signers)
            + enc_bytes(enc_int(len(self.signer_sigs)) + b"".join(enc_bytes(s.encode()) for s in self.signer_sigs))
            + enc_bytes(self.merger)
            + enc_int(self.merger_distance)
            + enc_bytes(self.merger_sig)
        )

    @classmethod
    def deserialize(cls, data: bytes) -> "Block":
        d = Decoder(data)
        height = d.int()
        prev = d.bytes()
        txd = Decoder(d.bytes())
        txs = tuple(Transaction.decode(txd.bytes()) for _ in range(txd.int()))
        tx_digest = d.bytes()
        ts = d.int()
        S = d.int()
        sd = Decoder(d.bytes())
        sigs = []
        for _ in range(sd.int()):
            e = Decoder(sd.bytes())
            sigs.append(SignerSignature(e.bytes(), e.bytes(), e.int(), e.int(), e.int()))
        block = cls(height, prev, txs, tx_digest, ts, S, tuple(sigs), d.bytes(), d.int(), d.bytes())
        if not d.done():
            raise ValueError("trailing bytes after block")
        return block


def make_genesis(required_signers: int, timestamp: int = 0) -> Block:
    return Block(0, ZERO_DIGEST, (), hash_transactions(()), timestamp, required_signers)


# -- rules and context ----------------------------------------------------------


@dataclass
class ChainRules:
    required_signers: int = 5
    merger_group_size: int = 3
    lookback: int = 1
    alpha: Fraction = Fraction(1, 2)
    confirmation_depth: int = 10
    metric: str = "hamming"
    merger_selection: bool = True
    eligibility_window: int | None = None
    difficulty_enabled: bool = False
    difficulty_window: int = 1800
    target_interval: int = 17_500
    max_block_amount: int | None = None
    max_tx_fraction: Fraction = Fraction(1, 10)
    max_future_ms: int = 60_000
    median_span: int = 11

    @property
    def max_tx_amount(self) -> Fraction | None:
        if self.max_block_amount is None:
            return None
        return self.max_tx_fraction * self.max_block_amount


@dataclass
class ChainContext:
    """Everything a validator needs besides the block tree."""

    rules: ChainRules
    signers: Roster
    mergers: Roster
    keys: dict[bytes, bytes]
    scheme: SignatureScheme
    _groups: dict = field(default_factory=dict, repr=False)

    def initial_mergers(self) -> tuple[bytes, ...]:
        return tuple(m.network_id for m in self.mergers)[: self.rules.merger_group_size]

    def _window(self, pool: int, floor_size: int) -> int:
        w = self.rules.eligibility_window
        w = self.rules.merger_group_size if w is None else w
        return max(0, min(w, pool - floor_size))

    def recent_producers(self, tree: "BlockTree", parent: Block, window: int) -> set[bytes]:
        out = set()
        b = parent
        for _ in range(window):
            if b.height == 0:
                break
            out.add(b.merger)
            b = tree.blocks[b.prev_hash]
        return out

    def merger_group(self, tree: "BlockTree", parent: Block):
        """Selection result of mergers allowed to extend ``parent``."""
        key = (parent.digest, self.mergers.version)
        hit = self._groups.get(key)
        if hit is not None:
            return hit
        # resolve iteratively to avoid deep recursion on long chains
        stack = [parent]
        while True:
            b = stack[-1]
            if b.height == 0 or (tree.blocks[b.prev_hash].digest, self.mergers.version) in self._groups:
                break
            stack.append(tree.blocks[b.prev_hash])
        M = self.rules.merger_group_size
        for b in reversed(stack):
            if b.height == 0:
                prev = self.initial_mergers()
            else:
                prev = self._groups[(b.prev_hash, self.mergers.version)].chosen
            last = []
            a = b
            for _ in range(self.rules.lookback):
                last.append(a)
                if a.height == 0:
                    break
                a = tree.blocks[a.prev_hash]
            window = self._window(len(self.mergers), M)
            exclude = self.recent_producers(tree, b, window)
            group = select_merger_group(last, prev, M, self.mergers, self.rules.metric, b.height + 1, exclude)
            self._groups[(b.digest, self.mergers.version)] = group
        return self._groups[key]

    def eligible_mergers(self, tree: "BlockTree", parent: Block) -> dict[bytes, int]:
        """network_id -> merger_distance for every merger allowed to extend ``parent``."""
        if self.rules.merger_selection:
            g = self.merger_group(tree, parent)
            return dict(zip(g.chosen, g.distances))
        window = self._window(len(self.mergers), 1)
        busy = self.recent_producers(tree, parent, window)
        return {nid: 0 for nid in self.mergers.eligible(parent.height + 1).ids if nid not in busy}

    def expected_signers(self, tree: "BlockTree", parent: Block) -> int:
        rules = self.rules
        if parent.height == 0:
            return rules.required_signers
        S = parent.required_signers
        W = rules.difficulty_window
        if rules.difficulty_enabled and parent.height % W == 0 and parent.height >= W:
            stamps = [parent.timestamp]
            b = parent
            for _ in range(W):
                b = tree.blocks[b.prev_hash]
                stamps.append(b.timestamp)
            intervals = [stamps[k] - stamps[k + 1] for k in range(W)]
            S = next_signer_count(S, rules.target_interval, intervals)
        return S


# -- block tree -----------------------------------------------------------------


@dataclass
class LedgerState:
    balances: dict[bytes, int]


class TxIndex:
    """source key -> [(tx_id, block digest)] for every block ever inserted.

    Several trees over the same block population may share one index; each
    tree still decides ancestry against its own blocks.
    """

    def __init__(self):
        self._by_source: dict[tuple, list[tuple[bytes, bytes]]] = {}
        self._blocks: set[bytes] = set()

    def add(self, block: Block) -> None:
        if block.digest in self._blocks:
            return
        self._blocks.add(block.digest)
        idx = self._by_source
        for tx in block.tx_list:
            entry = (tx.tx_id, block.digest)
            lst = idx.get(tx.source_key)
            if lst is None:
                idx[tx.source_key] = [entry]
            else:
                lst.append(entry)

    def by_source(self, key: tuple) -> list[tuple[bytes, bytes]]:
        return self._by_source.get(key, [])


class BlockTree:
    def __init__(
        self,
        genesis: Block,
        confirmation_depth: int = 10,
        balances: Mapping[bytes, int] | None = None,
        alpha: Fraction = Fraction(1, 2),
        metric: str = "hamming",
        index: TxIndex | None = None,
    ):
        self.genesis = genesis.digest
        self.blocks: dict[bytes, Block] = {genesis.digest: genesis}
        self.children: dict[bytes, set[bytes]] = {genesis.digest: set()}
        self.finalized_head = genesis.digest
        self.finalized: set[bytes] = {genesis.digest}
        self.confirmation_depth = confirmation_depth
        self.alpha = alpha
        self.metric = metric
        self.states: dict[bytes, LedgerState] = {genesis.digest: LedgerState(dict(balances or {}))}
        self.index = index if index is not None else TxIndex()
        self._contrib: dict[bytes, Fraction] = {}

    def __contains__(self, digest: bytes) -> bool:
        return digest in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    def parent(self, block: Block) -> Block | None:
        return self.blocks.get(block.prev_hash) if block.height else None

    def ancestors(self, digest: bytes) -> Iterator[Block]:
        """Yields the block itself, then each ancestor down to genesis."""
        b = self.blocks[digest]
        while True:
            yield b
            if b.height == 0:
                return
            b = self.blocks[b.prev_hash]

    def is_ancestor(self, a: bytes, b: bytes) -> bool:
        """True if block ``a`` is ``b`` or an ancestor of ``b``."""
        if a in self.finalized and self.blocks[a].height <= self.blocks[self.finalized_head].height:
            return self.in_live_subtree(b)
        target = self.blocks[a].height
        x = self.blocks[b]
        while x.height > target:
            x = self.blocks[x.prev_hash]
        return x.digest == a

    def in_live_subtree(self, digest: bytes) -> bool:
        """Block descends from (or is) the finalized head."""
        fh = self.blocks[self.finalized_head]
        x = self.blocks[digest]
        while x.height > fh.height:
            x = self.blocks[x.prev_hash]
        return x.digest == fh.digest

    def insert(self, block: Block, state: LedgerState | None = None) -> None:
        if block.digest in self.blocks:
            return
        if block.prev_hash not in self.blocks:
            raise UnknownParent(block.prev_hash.hex())
        if not self.in_live_subtree(block.prev_hash):
            raise FinalityViolation(block.digest.hex())
        if state is None:
            state = apply_transactions(self.states[block.prev_hash], block)
        self.blocks[block.digest] = block
        self.children[block.digest] = set()
        self.children[block.prev_hash].add(block.digest)
        self.states[block.digest] = state
        self.index.add(block)

    def contribution(self, digest: bytes, alpha: Fraction | None = None, metric: str | None = None) -> Fraction:
        alpha = self.alpha if alpha is None else alpha
        metric = self.metric if metric is None else metric
        key = (digest, alpha, metric)
        hit = self._contrib.get(key)
        if hit is None:
            hit = block_weight(self.blocks[digest], alpha, metric)
            self._contrib[key] = hit
        return hit

    def main_path(self) -> list[Block]:
        """Genesis to the fork-choice tip."""
        path = list(self.ancestors(fork_choice(self)))
        path.reverse()
        return path

    def spends(self, tx: Transaction, tip: bytes) -> list[tuple[bytes, bytes]]:
        """(tx_id, digest) of on-chain transactions (up to ``tip``) sharing ``tx``'s source."""
        if tx.source_key not in self.index._by_source:
            return []
        return [
            (tid, d)
            for tid, d in self.index.by_source(tx.source_key)
            if d in self.blocks and self.is_ancestor(d, tip)
        ]


def block_weight(block: Block, alpha: Fraction, metric: str = "hamming") -> Fraction:
    """Signature count less alpha times the mean normalized selection distance."""
    n = len(block.signer_sigs)
    if n == 0 and block.merger_distance == 0:
        return Fraction(0)
    total = block.merger_distance + sum(s.distance for s in block.signer_sigs)
    penalty = Fraction(total, MAX_DISTANCE[metric] * (n + 1))
    return n - alpha * penalty


def chain_weight(tree: BlockTree, tip: bytes, alpha: Fraction | None = None, metric: str | None = None) -> Fraction:
    if tip not in tree.blocks:
        raise UnknownTip(tip.hex())
    total = Fraction(0)
    fh = tree.finalized_head
    for b in tree.ancestors(tip):
        if b.digest == fh:
            return total
        total += tree.contribution(b.digest, alpha, metric)
    raise UnknownTip(f"{tip.hex()} does not descend from the finalized head")


def subtree_weights(tree: BlockTree, root: bytes, alpha=None, metric=None) -> dict[bytes, Fraction]:
    """Weight of every subtree under ``root`` (root's own contribution excluded from its entry)."""
    order = [root]
    for d in order:
        order.extend(tree.children[d])
    weights: dict[bytes, Fraction] = {}
    for d in reversed(order):
        w = sum((weights[c] for c in tree.children[d]), Fraction(0))
        if d != root:
            w += tree.contribution(d, alpha, metric)
        weights[d] = w
    return weights


def fork_choice(tree: BlockTree, alpha: Fraction | None = None, metric: str | None = None) -> bytes:
    """Greedy heaviest-subtree descent from the finalized head; ties go to the smaller digest."""
    weights = subtree_weights(tree, tree.finalized_head, alpha, metric)
    cur = tree.finalized_head
    while tree.children[cur]:
        cur = min(tree.children[cur], key=lambda c: (-weights[c], c))
    return cur


def advance_finalization(tree: BlockTree) -> list[bytes]:
    """Finalize every block with at least R descendants on the fork-choice path."""
    tip = fork_choice(tree)
    path = []
    for b in tree.ancestors(tip):
        if b.digest == tree.finalized_head:
            break
        path.append(b)
    path.reverse()
    R = tree.confirmation_depth
    newly = []
    for j, b in enumerate(path):
        if len(path) - 1 - j >= R:
            newly.append(b.digest)
        else:
            break
    if newly:
        old = tree.finalized_head
        tree.finalized.update(newly)
        tree.finalized_head = newly[-1]
        keep = tree.finalized_head
        # drop ledger snapshots that can no longer be extended
        for d in list(tree.states):
            if d != keep and (d in tree.finalized or not tree.in_live_subtree(d)):
                del tree.states[d]
        del old
    return newly


# -- validation -----------------------------------------------------------------


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    details: list[str] = field(default_factory=list)
    state: LedgerState | None = None

    def add(self, violation: str, detail: str = "") -> None:
        if violation not in self.violations:
            self.violations.append(violation)
        if detail:
            self.details.append(f"{violation}: {detail}")

    @property
    def ok(self) -> bool:
        return not self.violations

    def __contains__(self, violation: str) -> bool:
        return violation in self.violations


class Overdraft(Exception):
    pass


def apply_transactions(parent_state: LedgerState, block: Block) -> LedgerState:
    """Balances after ``block``; fees go to the block's merger."""
    bal = dict(parent_state.balances)
    for tx in block.tx_list:
        left = bal.get(tx.sender, 0) - tx.amount - tx.fee
        if left < 0:
            raise Overdraft(tx.tx_id.hex())
        bal[tx.sender] = left
        bal[tx.recipient] = bal.get(tx.recipient, 0) + tx.amount
        if tx.fee:
            bal[block.merger] = bal.get(block.merger, 0) + tx.fee
    return LedgerState(bal)


def median_time_past(tree: BlockTree, parent: Block, span: int = 11) -> float:
    stamps = []
    for b in tree.ancestors(parent.digest):
        stamps.append(b.timestamp)
        if len(stamps) == span:
            break
    return statistics.median(stamps)


def timestamp_ok(block: Block, tree: BlockTree, now: int, rules: ChainRules) -> bool:
    parent = tree.blocks[block.prev_hash]
    return median_time_past(tree, parent, rules.median_span) < block.timestamp <= now + rules.max_future_ms


def check_signers(block: Block, tree: BlockTree, ctx: ChainContext, report: ValidationReport) -> None:
    parent = tree.blocks[block.prev_hash]
    sigs = block.signer_sigs
    if len({s.signer for s in sigs}) != len(sigs) or len({s.index for s in sigs}) != len(sigs):
        report.add(DUPLICATE_SIGNER)
    msg = block.signing_digest
    for s in sigs:
        if not 1 <= s.index <= block.required_signers:
            report.add(BAD_SIGNATURE, f"signer index {s.index} out of range")
            continue
        try:
            cands = signer_candidates(parent.tx_digest, s.index, block.required_signers, ctx.signers, ctx.rules.metric, block.height)
        except InsufficientRoster:
            report.add(BAD_SIGNATURE, "roster too small")
            return
        if s.rank >= len(cands) or cands[s.rank][1] != s.signer or cands[s.rank][0] != s.distance:
            report.add(BAD_SIGNATURE, f"signer {s.signer.hex()[:12]} not selected for index {s.index}")
            continue
        key = ctx.keys.get(s.signer)
        if key is None or not ctx.scheme.verify(key, msg, s.signature):
            report.add(BAD_SIGNATURE, f"signature by {s.signer.hex()[:12]}")


def check_transactions(block: Block, tree: BlockTree, ctx: ChainContext, report: ValidationReport) -> None:
    parent = tree.blocks[block.prev_hash]
    seen: set[bytes] = set()
    sources: dict[tuple, bytes] = {}
    cap = ctx.rules.max_tx_amount
    total = 0
    for tx in block.tx_list:
        if not tx.verify(ctx.keys, ctx.scheme):
            report.add(BAD_SIGNATURE, f"transaction {tx.tx_id.hex()[:12]}")
        if tx.tx_id in seen:
            report.add(DOUBLE_SPEND, f"duplicate {tx.tx_id.hex()[:12]} in block")
        seen.add(tx.tx_id)
        other = sources.setdefault(tx.source_key, tx.tx_id)
        if other != tx.tx_id:
            report.add(DOUBLE_SPEND, f"conflicting outputs for source of {tx.tx_id.hex()[:12]}")
        for tid, d in tree.spends(tx, parent.digest):
            what = "already on chain" if tid == tx.tx_id else "source already spent"
            report.add(DOUBLE_SPEND, f"{tx.tx_id.hex()[:12]} {what}")
            break
        if cap is not None and tx.amount > cap:
            report.add(AMOUNT_LIMIT, f"{tx.amount} > {cap}")
        total += tx.amount
    if ctx.rules.max_block_amount is not None and total > ctx.rules.max_block_amount:
        report.add(AMOUNT_LIMIT, f"block total {total}")
    if DOUBLE_SPEND not in report:
        try:
            report.state = apply_transactions(tree.states[parent.digest], block)
        except Overdraft as e:
            report.add(DOUBLE_SPEND, f"overdraft by {e}")


def validate_block(block: Block, tree: BlockTree, ctx: ChainContext, now: int, memo: dict | None = None) -> ValidationReport:
    """Check ``block`` against its parent in ``tree``. Violations are data, not exceptions.

    Apart from the timestamp bound, the verdict depends only on the block and
    its ancestry, so trees holding the same blocks may share ``memo``
    (block digest -> report without the timestamp check).
    """
    report = ValidationReport()
    parent = tree.blocks.get(block.prev_hash)
    if parent is None or block.height != parent.height + 1:
        report.add(BAD_LINKAGE)
        return report
    if parent.digest not in tree.states:
        report.add(BAD_LINKAGE, "parent is no longer extendable")
        return report
    if memo is None or block.digest not in memo:
        body = _validate_body(block, tree, parent, ctx)
        if memo is not None:
            memo[block.digest] = body
    else:
        body = memo[block.digest]
    if not timestamp_ok(block, tree, now, ctx.rules):
        report.add(TIMESTAMP_OUT_OF_RANGE)
    for v in body.violations:
        report.add(v)
    report.details.extend(body.details)
    report.state = body.state
    return report


def _validate_body(block: Block, tree: BlockTree, parent: Block, ctx: ChainContext) -> ValidationReport:
    report = ValidationReport()
    if block.tx_digest != hash_transactions(block.tx_list):
        report.add(BAD_LINKAGE)
        return report

    expected = ctx.expected_signers(tree, parent)
    if block.required_signers != expected or len(block.signer_sigs) < expected:
        report.add(INSUFFICIENT_SIGNATURES, f"{len(block.signer_sigs)} of {expected}")
    check_signers(block, tree, ctx, report)

    try:
        eligible = ctx.eligible_mergers(tree, parent)
    except InsufficientRoster:
        eligible = {}
    if block.merger not in eligible or eligible[block.merger] != block.merger_distance:
        report.add(INELIGIBLE_MERGER)
    mkey = ctx.keys.get(block.merger)
    if mkey is None or not ctx.scheme.verify(mkey, block.body_digest, block.merger_sig):
        report.add(BAD_SIGNATURE, "merger signature")

    check_transactions(block, tree, ctx, report)
    return report


# -- export ---------------------------------------------------------------------


def export_chain(
    blocks: Iterable[Block],
    chain_id: str,
    ctx: ChainContext | None = None,
) -> str:
    """Newline-delimited chain export; ``#`` lines carry the parameters needed for replay."""
    lines = [f"{CHAIN_HEADER} {chain_id}"]
    if ctx is not None:
        r = ctx.rules
        lines.append(f"#param metric={r.metric}")
        lines.append(f"#param merger_group_size={r.merger_group_size}")
        lines.append(f"#param lookback={r.lookback}")
        lines.append(f"#param merger_selection={int(r.merger_selection)}")
        for m in ctx.signers:
            lines.append(f"#signer {m.network_id.hex()} {m.join_height} {int(m.active)}")
        for m in ctx.mergers:
            lines.append(f"#merger {m.network_id.hex()} {m.join_height} {int(m.active)}")
    for b in blocks:
        lines.append(b.serialize().hex())
    return "\n".join(lines) + "\n"


@dataclass
class ChainExport:
    chain_id: str
    blocks: list[Block]
    params: dict[str, str]
    signers: list
    mergers: list


def import_chain(text: str) -> ChainExport:
    from .selection import RosterMember

    lines = text.splitlines()
    if not lines or not lines[0].startswith(CHAIN_HEADER):
        raise ValueError("missing chain export header")
    chain_id = lines[0][len(CHAIN_HEADER):].strip()
    params: dict[str, str] = {}
    signers, mergers, blocks = [], [], []
    for n, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#param "):
            k, _, v = line[7:].partition("=")
            params[k.strip()] = v.strip()
        elif line.startswith("#signer ") or line.startswith("#merger "):
            kind, nid, jh, active = line.split()
            m = RosterMember(bytes.fromhex(nid), int(jh), active == "1")
            (signers if kind == "#signer" else mergers).append(m)
        elif line.startswith("#"):
            continue
        else:
            try:
                blocks.append(Block.deserialize(bytes.fromhex(line)))
            except ValueError as e:
                raise ValueError(f"line {n}: {e}") from e
    return ChainExport(chain_id, blocks, params, signers, mergers)


def replace_signature(block: Block, i: int, sig: SignerSignature) -> Block:
    sigs = list(block.signer_sigs)
    sigs[i] = sig
    return replace(block, signer_sigs=tuple(sigs))
