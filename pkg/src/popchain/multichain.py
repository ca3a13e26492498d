"""Local chains running side by side, transfers between them, and hot/cold migration.

Every LocalChain runs its own small committee of mergers and signers through
the consensus state machines, so committed blocks are real signed blocks.
Chains never share mutable state: a transfer reads one chain's finalized
blocks and submits a transaction to the other.
"""
from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

from .chain import Block, BlockTree, ChainContext, ChainRules, Transaction, make_genesis
from .consensus import Completed, MergerState, SignerState, SignRequest, SIGNED
from .crypto import H, KeyPair, MacScheme, enc_bytes, enc_int, enc_str, get_scheme
from .econ import Number, as_fraction
from .identity import IdentificationAuthority, NetworkRegistry, enroll
from .selection import Roster, RosterMember

HOT, COLD = "hot", "cold"

INITIATED = "Initiated"
SOURCE_COMMITTED = "SourceCommitted"
COMPLETED = "Completed"
FAILED = "Failed"

JOURNAL_HEADER = ("transfer_id", "src", "dst", "sender", "recipient", "amount", "rate", "state", "src_block", "dst_block")

BLOCK_SPACING = 1_000  # ms between the blocks of a local chain's logical clock


class MultichainError(Exception):
    pass


class InsufficientBalance(MultichainError):
    pass


class DestinationUnavailable(MultichainError):
    pass


class ChainCold(MultichainError):
    pass


class NonEmptyTarget(MultichainError):
    pass


class AlreadyClaimed(MultichainError):
    pass


class BlockRejected(MultichainError):
    pass


class LocalChain:
    """One regional chain with its own roster, committee and ledger.

    ``balances`` is the finalized ledger. Named accounts (plus a bridge and a
    reserve account per chain) are opened at genesis; their wallets stay with
    the chain so that it can co-sign on their behalf in scripted scenarios.
    """

    def __init__(
        self,
        chain_id: str,
        accounts: Mapping[str, int] | None = None,
        n_signers: int = 7,
        n_mergers: int = 3,
        required_signers: int = 3,
        confirmation_depth: int = 3,
        fee: int = 1,
        bridge_float: int = 0,
        reserve: int = 0,
        seed: int = 0,
        scheme: str = "mac",
    ):
        if n_signers < required_signers:
            raise ValueError("fewer signers than required signatures")
        self.chain_id = chain_id
        self.fee = fee
        self.status = HOT
        self.available = True
        self.scheme = get_scheme(scheme)
        rng = random.Random(f"{seed}:{chain_id}")
        authority = IdentificationAuthority(self.scheme, rng)
        registry = NetworkRegistry(self.scheme, authority.public_key, rng)

        def open_(name: str):
            w = enroll(f"{chain_id}/{name}", authority, registry, rng, timestamp=0)
            return w.network_id, w.network_keys

        self.keys: dict[bytes, KeyPair] = {}
        self.names: dict[str, bytes] = {}
        balances: dict[bytes, int] = {}
        wanted = dict(accounts or {})
        wanted.setdefault("bridge", bridge_float)
        wanted.setdefault("reserve", reserve)
        for name, amount in wanted.items():
            nid, kp = open_(name)
            self.keys[nid] = kp
            self.names[name] = nid
            balances[nid] = amount

        signer_ids, merger_ids = [], []
        node_keys: dict[bytes, KeyPair] = {}
        for i in range(n_signers):
            nid, kp = open_(f"signer-{i}")
            signer_ids.append(nid)
            node_keys[nid] = kp
        for i in range(n_mergers):
            nid, kp = open_(f"merger-{i}")
            merger_ids.append(nid)
            node_keys[nid] = kp
        # mergers collect fees, so their wallets migrate like any other account
        self.keys.update(node_keys)
        self.roster = Roster(RosterMember(n) for n in signer_ids)
        rules = ChainRules(
            required_signers=required_signers,
            merger_group_size=1,
            confirmation_depth=confirmation_depth,
            merger_selection=False,
            eligibility_window=0,
        )
        self.ctx = ChainContext(rules, self.roster, Roster(RosterMember(n) for n in merger_ids), registry.roster(), self.scheme)
        genesis = make_genesis(required_signers, 0)
        self.genesis_balances = dict(balances)
        self.signers = {n: SignerState(n, node_keys[n], self.scheme) for n in signer_ids}
        self.mergers = [MergerState(n, node_keys[n], self.ctx, genesis, balances, 0, 0) for n in merger_ids]
        self.now = 0
        self._tx_clock = 0
        # durable per-chain records that make transfers and claims idempotent
        self.debits: dict[bytes, bytes] = {}  # transfer_id -> src block digest
        self.credits: dict[bytes, bytes] = {}  # transfer_id -> dst block digest
        self.claimed: set[bytes] = set()  # accounts whose cold balance has moved on

    # -- accounts and ledger ----------------------------------------------------

    def account(self, name: str) -> bytes:
        return self.names[name]

    @property
    def bridge(self) -> bytes:
        return self.names["bridge"]

    @property
    def reserve(self) -> bytes:
        return self.names["reserve"]

    @property
    def balances(self) -> dict[bytes, int]:
        return self.tree.states[self.tree.finalized_head].balances

    def balance(self, nid: bytes, finalized: bool = True) -> int:
        head = self.tree.finalized_head if finalized else self.tip
        return self.tree.states[head].balances.get(nid, 0)

    @property
    def tree(self) -> BlockTree:
        """The first merger's view; every merger validates and holds the same blocks."""
        return self.mergers[0].tree

    @property
    def tip(self) -> bytes:
        return self.mergers[0].tip

    @property
    def height(self) -> int:
        return self.tree.blocks[self.tip].height

    def is_finalized(self, digest: bytes) -> bool:
        return digest in self.tree.finalized

    def is_empty(self) -> bool:
        """Only genesis, and nothing held outside the reserve and bridge."""
        if self.height != 0:
            return False
        return all(v == 0 for nid, v in self.balances.items() if nid not in (self.reserve, self.bridge))

    def replay_balances(self) -> dict[bytes, int]:
        """Finalized balances recomputed from genesis by re-applying every finalized block."""
        path = list(self.tree.ancestors(self.tree.finalized_head))
        bal = dict(self.genesis_balances)
        for b in reversed(path[:-1]):
            for tx in b.tx_list:
                bal[tx.sender] = bal.get(tx.sender, 0) - tx.amount - tx.fee
                bal[tx.recipient] = bal.get(tx.recipient, 0) + tx.amount
                if tx.fee:
                    bal[b.merger] = bal.get(b.merger, 0) + tx.fee
        return bal

    # -- block production ---------------------------------------------------------

    def make_tx(self, sender: bytes, recipient: bytes, amount: int, fee: int | None = None, purpose: str = "") -> Transaction:
        self._tx_clock += 1
        return Transaction.create(
            self.scheme, self.keys[sender], self.keys[recipient], sender, recipient,
            amount, self.fee if fee is None else fee, self._tx_clock, purpose, self.chain_id,
        )

    def commit(self, txs: Iterable[Transaction]) -> Block:
        """Produce, sign and insert one block holding exactly ``txs``."""
        if self.status != HOT:
            raise ChainCold(self.chain_id)
        txs = list(txs)
        self.now += BLOCK_SPACING
        tip = self.tree.blocks[self.tip]
        eligible = sorted(self.ctx.eligible_mergers(self.tree, tip))
        producer = next(m for m in self.mergers if m.id == eligible[(tip.height + 1) % len(eligible)])
        producer.mempool = {tx.tx_id: tx for tx in txs}
        producer._ordered = False
        producer.target_txs = len(txs)
        draft = producer.build_block(self.now)
        if draft is None:
            producer.mempool = {}
            raise BlockRejected("transactions do not fit the ledger")
        stamps = [b.timestamp for _, b in zip(range(11), self.tree.ancestors(draft.prev_hash))]
        queue: list[SignRequest] = producer.sign_requests()
        block = None
        while queue:
            req = queue.pop(0)
            resp = self.signers[req.signer].on_request(draft, self.now, stamps, req.index, req.rank)
            out = producer.on_response(resp)
            if isinstance(out, SignRequest):
                queue.append(out)
            elif isinstance(out, Completed):
                block = out.block
            elif resp.verdict != SIGNED and out is None:
                break
        producer.mempool = {}
        if block is None:
            producer.pending = None
            raise BlockRejected("could not gather signatures")
        for m in self.mergers:
            ok, violations = m.on_block(block, self.now)
            if not ok:
                raise BlockRejected(", ".join(violations))
        final = self.tree.blocks[self.tree.finalized_head].height
        for s in self.signers.values():
            s.observe_finalized(final)
        return block

    def settle(self, digest: bytes | None = None) -> None:
        """Extend the chain with empty blocks until ``digest`` (default: the tip) is final."""
        target = self.tip if digest is None else digest
        while not self.is_finalized(target):
            self.commit([])

    def contains(self, digest: bytes, tx_id: bytes) -> bool:
        b = self.tree.blocks.get(digest)
        return b is not None and any(tx.tx_id == tx_id for tx in b.tx_list)


# -- inter-chain transfers ------------------------------------------------------------


@dataclass
class InterChainTransfer:
    transfer_id: bytes
    src_chain: str
    dst_chain: str
    sender: bytes
    recipient: bytes
    amount_src: int
    exchange_rate: Fraction
    state: str = INITIATED
    src_block: bytes = b""
    dst_block: bytes = b""
    reason: str = ""
    debit_tx: bytes = b""
    fee_total: int = 0

    @property
    def amount_dst(self) -> int:
        return math.floor(self.amount_src * self.exchange_rate)

    def row(self) -> tuple:
        return (
            self.transfer_id.hex(), self.src_chain, self.dst_chain, self.sender.hex(), self.recipient.hex(),
            self.amount_src, _fmt(self.exchange_rate), self.state, self.src_block.hex(), self.dst_block.hex(),
        )


_ORDER = {INITIATED: 0, SOURCE_COMMITTED: 1, COMPLETED: 2, FAILED: 2}


@dataclass
class TransferJournal:
    """Durable transfer states keyed by transfer_id; states only move forward."""

    entries: dict[bytes, InterChainTransfer] = field(default_factory=dict)

    def record(self, t: InterChainTransfer) -> None:
        old = self.entries.get(t.transfer_id)
        if old is not None and _ORDER[t.state] < _ORDER[old.state]:
            raise MultichainError("transfer state may not move backwards")
        self.entries[t.transfer_id] = t

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(JOURNAL_HEADER)
        for t in self.entries.values():
            w.writerow(t.row())
        return buf.getvalue()


def transfer_id(src: str, dst: str, sender: bytes, recipient: bytes, amount: int, rate: Fraction, nonce: int = 0) -> bytes:
    return H(
        enc_str("xfer"), enc_str(src), enc_str(dst), enc_bytes(sender), enc_bytes(recipient),
        enc_int(amount), enc_str(_fmt(rate)), enc_int(nonce),
    )


def inter_chain_transfer(
    src: LocalChain,
    dst: LocalChain,
    sender: bytes,
    recipient: bytes,
    amount: int,
    rate: Number = 1,
    journal: TransferJournal | None = None,
    nonce: int = 0,
) -> InterChainTransfer:
    """Move ``amount`` from ``sender`` on ``src`` to ``recipient`` on ``dst``.

    Phase one debits the sender into the source bridge and waits for that
    block to be final. Phase two pays ``floor(amount * rate)`` out of the
    destination bridge with a transaction naming the source block. Each chain
    charges its own fee, the sender's on the source and the bridge's on the
    destination. Calling again with the same arguments resumes or returns the
    finished transfer without touching any balance.
    """
    rate = as_fraction(rate)
    if amount <= 0 or rate <= 0:
        raise ValueError("amount and rate must be positive")
    if math.floor(amount * rate) < 1:
        # refuse before the debit: a zero credit cannot be paid out
        raise ValueError("credit rounds down to zero")
    tid = transfer_id(src.chain_id, dst.chain_id, sender, recipient, amount, rate, nonce)
    t = journal.entries.get(tid) if journal is not None else None
    if t is None:
        t = InterChainTransfer(tid, src.chain_id, dst.chain_id, sender, recipient, amount, rate)
    if t.state in (COMPLETED, FAILED):
        return t

    # phase one
    if tid in src.debits:
        t.src_block = src.debits[tid]
        t.state = SOURCE_COMMITTED
    if t.state == INITIATED:
        if src.status != HOT:
            raise ChainCold(src.chain_id)
        if src.balance(sender, finalized=False) < amount + src.fee:
            t.state, t.reason = FAILED, "InsufficientBalance"
            _journal(journal, t)
            raise InsufficientBalance(f"{sender.hex()[:12]} on {src.chain_id}")
        debit = src.make_tx(sender, src.bridge, amount, purpose=f"xfer-out:{tid.hex()}:{dst.chain_id}")
        block = src.commit([debit])
        src.settle(block.digest)
        src.debits[tid] = block.digest
        t.src_block, t.debit_tx = block.digest, debit.tx_id
        t.fee_total = src.fee
        t.state = SOURCE_COMMITTED
        _journal(journal, t)

    # phase two
    if tid in dst.credits:
        t.dst_block, t.state = dst.credits[tid], COMPLETED
        _journal(journal, t)
        return t
    if not src.is_finalized(t.src_block):
        raise MultichainError("source debit is not final")
    credit = t.amount_dst
    if dst.status != HOT or not dst.available or dst.balance(dst.bridge, finalized=False) < credit + dst.fee:
        _journal(journal, t)
        raise DestinationUnavailable(dst.chain_id)
    tx = dst.make_tx(dst.bridge, recipient, credit, purpose=f"xfer-in:{tid.hex()}:{t.src_block.hex()}")
    block = dst.commit([tx])
    dst.settle(block.digest)
    dst.credits[tid] = block.digest
    t.dst_block, t.state = block.digest, COMPLETED
    t.fee_total = src.fee + dst.fee
    _journal(journal, t)
    return t


def _journal(journal: TransferJournal | None, t: InterChainTransfer) -> None:
    if journal is not None:
        journal.record(t)


def credit_is_backed(t: InterChainTransfer, src: LocalChain, dst: LocalChain) -> bool:
    """The destination credit names a final source block that holds the matching debit."""
    if t.state != COMPLETED:
        return False
    block = dst.tree.blocks.get(t.dst_block)
    if block is None or len(block.tx_list) != 1:
        return False
    ref = block.tx_list[0].purpose.split(":")
    if ref[0] != "xfer-in" or ref[1] != t.transfer_id.hex() or bytes.fromhex(ref[2]) != t.src_block:
        return False
    return src.is_finalized(t.src_block) and src.contains(t.src_block, t.debit_tx)


# -- hot/cold migration -----------------------------------------------------------------


@dataclass
class MigrationReport:
    old_chain: str
    new_chain: str
    migrated: dict[bytes, int]
    missed: dict[bytes, int]
    blocks: list[bytes]


def migrate_hot_cold(
    old: LocalChain,
    new: LocalChain,
    skip: Iterable[bytes] = (),
    batch: int = 64,
) -> MigrationReport:
    """Recreate every nonzero finalized balance of ``old`` on the empty chain ``new``.

    Balances are paid out of the new chain's reserve with fee-free system
    transactions; ``old`` then turns cold. Accounts in ``skip`` are left
    behind as missed and can be fetched later with ``claim_from_archive``.
    """
    if not new.is_empty() or new.status != HOT:
        raise NonEmptyTarget(new.chain_id)
    if old.status != HOT:
        raise ChainCold(old.chain_id)
    old.settle()
    skip = set(skip)
    system = {old.reserve}
    todo, missed = {}, {}
    for nid, amount in sorted(old.balances.items()):
        if amount <= 0 or nid in system:
            continue
        (missed if nid in skip else todo)[nid] = amount
    for nid in list(todo) + list(missed):
        _carry_wallet(old, new, nid)
    if new.balance(new.reserve) < sum(todo.values()):
        raise MultichainError("reserve of the new chain cannot cover the migration")
    blocks = []
    items = list(todo.items())
    for k in range(0, len(items), batch):
        txs = [new.make_tx(new.reserve, nid, amount, fee=0, purpose=f"migrate:{old.chain_id}") for nid, amount in items[k : k + batch]]
        blocks.append(new.commit(txs).digest)
    new.settle()
    old.status = COLD
    old.claimed.update(todo)
    return MigrationReport(old.chain_id, new.chain_id, todo, missed, blocks)


def claim_from_archive(old: LocalChain, new: LocalChain, nid: bytes) -> Block:
    """Late claim: move a balance left on the cold chain onto the hot one, once."""
    if old.status != COLD:
        raise MultichainError("claims are served from cold chains only")
    if nid in old.claimed:
        raise AlreadyClaimed(nid.hex())
    amount = old.balance(nid)
    if amount <= 0:
        raise InsufficientBalance(nid.hex())
    _carry_wallet(old, new, nid)
    block = new.commit([new.make_tx(new.reserve, nid, amount, fee=0, purpose=f"claim:{old.chain_id}")])
    new.settle(block.digest)
    old.claimed.add(nid)
    return block


def _carry_wallet(old: LocalChain, new: LocalChain, nid: bytes) -> None:
    # the holder keeps the same network ID; the new chain learns its public key
    new.keys.setdefault(nid, old.keys[nid])
    new.ctx.keys.setdefault(nid, old.ctx.keys[nid])
    if isinstance(new.scheme, MacScheme):
        new.scheme.adopt(old.keys[nid])


# -- throughput -----------------------------------------------------------------------


def aggregate_tps(per_chain_tps: Number, n_chains: int) -> Fraction:
    """Linear extrapolation: independent chains add their throughput."""
    tps = as_fraction(per_chain_tps)
    if tps <= 0 or n_chains < 1:
        raise ValueError("need positive throughput and at least one chain")
    return tps * n_chains


def _fmt(v: Fraction) -> str:
    return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"
