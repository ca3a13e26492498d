"""Small scripted networks shared by the chain and consensus tests."""
from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from popchain.chain import (
    Block,
    BlockTree,
    ChainContext,
    ChainRules,
    SignerSignature,
    Transaction,
    hash_transactions,
    make_genesis,
)
from popchain.consensus import MergerState, SignerState
from popchain.crypto import KeyPair, get_scheme
from popchain.identity import IdentificationAuthority, NetworkRegistry, enroll
from popchain.selection import Roster, RosterMember, select_signer_group


@dataclass
class Net:
    ctx: ChainContext
    keys: dict[bytes, KeyPair]
    signer_ids: list[bytes]
    merger_ids: list[bytes]
    accounts: list[bytes]
    genesis: Block
    balances: dict[bytes, int]
    clock: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def scheme(self):
        return self.ctx.scheme

    def tree(self, confirmation_depth: int | None = None) -> BlockTree:
        r = self.ctx.rules
        depth = r.confirmation_depth if confirmation_depth is None else confirmation_depth
        return BlockTree(self.genesis, depth, self.balances, r.alpha, r.metric)

    def tx(self, i: int, j: int, amount: int = 10, fee: int = 1, ts: int | None = None, purpose: str = "") -> Transaction:
        if ts is None:
            self.clock += 1
            ts = self.clock
        a, b = self.accounts[i], self.accounts[j]
        return Transaction.create(self.scheme, self.keys[a], self.keys[b], a, b, amount, fee, ts, purpose)

    def signer_state(self, nid: bytes, **kw) -> SignerState:
        return SignerState(nid, self.keys[nid], self.scheme, **kw)

    def merger_state(self, nid: bytes, target_txs: int = 1, **kw) -> MergerState:
        return MergerState(nid, self.keys[nid], self.ctx, self.genesis, self.balances, target_txs, **kw)

    def forge(
        self,
        tree: BlockTree,
        parent: bytes,
        txs=(),
        ts: int | None = None,
        merger: bytes | None = None,
        n_sigs: int | None = None,
    ) -> Block:
        """A fully signed block on ``parent`` built the way an honest merger would."""
        pb = tree.blocks[parent]
        ctx = self.ctx
        eligible = ctx.eligible_mergers(tree, pb)
        m = merger if merger is not None else min(eligible)
        S = ctx.expected_signers(tree, pb)
        sel = select_signer_group(pb.tx_digest, S, ctx.signers, ctx.rules.metric, pb.height + 1)
        txs = tuple(txs)
        ts = pb.timestamp + 1000 if ts is None else ts
        draft = Block(pb.height + 1, pb.digest, txs, hash_transactions(txs), ts, S, (), m, eligible.get(m, 0))
        sigs = tuple(
            SignerSignature(nid, self.scheme.sign(self.keys[nid].private_key, draft.signing_digest), d, i, 0)
            for i, (nid, d) in enumerate(zip(sel.chosen, sel.distances), start=1)
        )
        if n_sigs is not None:
            sigs = sigs[:n_sigs]
        block = replace(draft, signer_sigs=sigs)
        return sign_as_merger(self, block)


def sign_as_merger(net: Net, block: Block) -> Block:
    return replace(block, merger_sig=net.scheme.sign(net.keys[block.merger].private_key, block.body_digest))


def make_net(
    n_signers: int = 12,
    n_mergers: int = 6,
    n_accounts: int = 4,
    seed: int = 0,
    scheme: str = "mac",
    balance: int = 1000,
    **rule_changes,
) -> Net:
    sch = get_scheme(scheme)
    rng = random.Random(seed)
    authority = IdentificationAuthority(sch, rng)
    registry = NetworkRegistry(sch, authority.public_key, rng)
    keys: dict[bytes, KeyPair] = {}

    def open_(name: str) -> bytes:
        w = enroll(name, authority, registry, rng, timestamp=0)
        keys[w.network_id] = w.network_keys
        return w.network_id

    signer_ids = [open_(f"signer-{i}") for i in range(n_signers)]
    merger_ids = [open_(f"merger-{i}") for i in range(n_mergers)]
    accounts = [open_(f"user-{i}") for i in range(n_accounts)]
    rules = dict(required_signers=3, merger_group_size=2, confirmation_depth=3)
    rules.update(rule_changes)
    ctx = ChainContext(
        ChainRules(**rules),
        Roster(RosterMember(n) for n in signer_ids),
        Roster(RosterMember(n) for n in merger_ids),
        registry.roster(),
        sch,
    )
    balances = {a: balance for a in accounts}
    return Net(ctx, keys, signer_ids, merger_ids, accounts, make_genesis(ctx.rules.required_signers), balances)
