import random

import pytest
from hypothesis import given, settings, strategies as st

from popchain.crypto import Ed25519Scheme, H, MacScheme, get_scheme
from popchain.identity import (
    AuthenticationFailed,
    Certificate,
    DuplicatePseudonym,
    DuplicateRealId,
    IdentificationAuthority,
    InvalidCertificate,
    NetworkRegistry,
    UnknownNetworkId,
    enroll,
    rotate,
)


def stores(scheme_name="mac", seed=0):
    scheme = get_scheme(scheme_name)
    rng = random.Random(seed)
    auth = IdentificationAuthority(scheme, rng)
    reg = NetworkRegistry(scheme, auth.public_key, rng)
    return scheme, rng, auth, reg


@pytest.mark.parametrize("scheme", [Ed25519Scheme(), MacScheme()])
def test_signatures_verify_only_under_own_key(scheme):
    rng = random.Random(1)
    a, b = scheme.generate(rng), scheme.generate(rng)
    sig = scheme.sign(a.private_key, b"msg")
    assert scheme.verify(a.public_key, b"msg", sig)
    assert not scheme.verify(a.public_key, b"msh", sig)
    assert not scheme.verify(b.public_key, b"msg", sig)


def test_hash_is_sha256_of_concatenation():
    import hashlib

    assert H(b"ab", b"c") == hashlib.sha256(b"abc").digest()


@pytest.mark.parametrize("scheme_name", ["ed25519", "mac"])
def test_first_registration_succeeds(scheme_name):
    scheme, rng, auth, _ = stores(scheme_name)
    k = scheme.generate(rng)
    pid, cert = auth.register_identity("alice", k.public_key)
    assert len(pid) == 32
    assert cert.subject_id == pid and cert.subject_key == k.public_key
    assert cert.verify(scheme, auth.public_key)


def test_duplicate_real_id_rejected():
    scheme, rng, auth, _ = stores()
    auth.register_identity("alice", scheme.generate(rng).public_key)
    with pytest.raises(DuplicateRealId):
        auth.register_identity("alice", scheme.generate(rng).public_key)


def test_thousand_pseudonyms_distinct():
    scheme, rng, auth, _ = stores()
    pids = {auth.register_identity(f"user-{i}", b"k" * 32)[0] for i in range(1000)}
    assert len(pids) == 1000


def test_honest_network_registration():
    scheme, rng, auth, reg = stores("ed25519")
    w = enroll("alice", auth, reg, rng)
    assert w.cert_G.subject_id == w.network_id
    assert w.cert_G.subject_key == w.network_keys.public_key
    assert w.cert_G.verify(scheme, reg.public_key)
    assert reg.roster() == {w.network_id: w.network_keys.public_key}


def test_reused_pseudonym_rejected():
    scheme, rng, auth, reg = stores()
    w = enroll("alice", auth, reg, rng)
    proof = scheme.sign(w.identity_keys.private_key, reg.issue_challenge(w.pseudonym_id))
    with pytest.raises(DuplicatePseudonym):
        reg.register_network_id(w.pseudonym_id, w.cert_I, scheme.generate(rng).public_key, proof)


def _pending(scheme_name="mac"):
    scheme, rng, auth, reg = stores(scheme_name)
    idk = scheme.generate(rng)
    pid, cert = auth.register_identity("bob", idk.public_key)
    return scheme, rng, auth, reg, idk, pid, cert


@pytest.mark.parametrize("pos", range(0, 200, 7))
def test_tampered_cert_rejected_every_byte(pos):
    scheme, rng, auth, reg, idk, pid, cert = _pending("ed25519")
    raw = bytearray(cert.to_bytes())
    pos %= len(raw)
    raw[pos] ^= 0x01
    try:
        bad = Certificate.from_bytes(bytes(raw))
    except Exception:
        return  # a flip in a length prefix makes the bytes unparseable, which is also a rejection
    proof = scheme.sign(idk.private_key, reg.issue_challenge(pid))
    with pytest.raises(InvalidCertificate):
        reg.register_network_id(pid, bad, scheme.generate(rng).public_key, proof)


def test_wrong_proof_rejected():
    scheme, rng, auth, reg, idk, pid, cert = _pending()
    challenge = reg.issue_challenge(pid)
    other = scheme.generate(rng)
    with pytest.raises(AuthenticationFailed):
        reg.register_network_id(pid, cert, scheme.generate(rng).public_key, scheme.sign(other.private_key, challenge))


def test_proof_without_challenge_rejected():
    scheme, rng, auth, reg, idk, pid, cert = _pending()
    with pytest.raises(AuthenticationFailed):
        reg.register_network_id(pid, cert, scheme.generate(rng).public_key, scheme.sign(idk.private_key, b"x"))


def test_challenge_is_single_use():
    scheme, rng, auth, reg, idk, pid, cert = _pending()
    challenge = reg.issue_challenge(pid)
    proof = scheme.sign(idk.private_key, challenge)
    pub = scheme.generate(rng).public_key
    with pytest.raises(AuthenticationFailed):
        reg.register_network_id(pid, cert, pub, b"bad")
    with pytest.raises(AuthenticationFailed):
        reg.register_network_id(pid, cert, pub, proof)


def test_rotation_appends_log_and_replaces_roster_entry():
    scheme, rng, auth, reg = stores()
    w = enroll("alice", auth, reg, rng, timestamp=5)
    old = w.network_id
    n0 = len(reg.change_log)
    new = rotate(w, reg, timestamp=9)
    assert new != old
    assert len(reg.change_log) == n0 + 1
    assert reg.change_log[-1].old_network_id == old and reg.change_log[-1].new_network_id == new
    assert reg.change_log[-1].timestamp == 9
    assert set(reg.roster()) == {new}
    with pytest.raises(UnknownNetworkId):
        reg.certificate(old)


def test_rotate_unregistered():
    scheme, rng, auth, reg = stores()
    with pytest.raises(UnknownNetworkId):
        reg.rotate_network_id(b"\x00" * 32, b"")


def test_rotate_with_bad_proof():
    scheme, rng, auth, reg = stores()
    w = enroll("alice", auth, reg, rng)
    reg.issue_challenge(w.network_id)
    with pytest.raises(AuthenticationFailed):
        reg.rotate_network_id(w.network_id, b"\x00" * 32)


def test_two_rotations_replay_to_current():
    scheme, rng, auth, reg = stores()
    w = enroll("alice", auth, reg, rng)
    rotate(w, reg)
    rotate(w, reg)
    assert reg.replay_log() == {w.pseudonym_id: w.network_id}
    assert [e.old_network_id is None for e in reg.change_log] == [True, False, False]


def test_snapshots_round_trip():
    scheme, rng, auth, reg = stores()
    ws = [enroll(f"u{i}", auth, reg, rng) for i in range(5)]
    rotate(ws[0], reg)
    text_a, text_r = auth.snapshot(), reg.snapshot()
    assert text_a.splitlines()[0] == "#popchain-registry v1"
    for line in text_r.splitlines()[1:]:
        for f in line.split("\t")[1:]:
            assert f == f.lower()
    auth2 = IdentificationAuthority(scheme, random.Random(9))
    reg2 = NetworkRegistry(scheme, auth.public_key, random.Random(9))
    auth2.load_snapshot(text_a)
    reg2.load_snapshot(text_r)
    assert auth2.records == auth.records
    assert reg2.records == reg.records
    assert reg2.change_log == reg.change_log
    assert reg2.snapshot() == text_r


def test_snapshot_needs_header():
    scheme, rng, auth, reg = stores()
    with pytest.raises(ValueError):
        reg.load_snapshot("N\taa\tbb\tcc\n")


def check_split_knowledge(auth, reg, wallets):
    nids = {w.network_id for w in wallets} | {e.new_network_id for e in reg.change_log}
    real_ids = {w.real_id for w in wallets}
    # authority store alone holds no network id
    for real_id, (pid, cert) in auth.records.items():
        assert pid not in nids and cert.subject_id not in nids
    snap_a = auth.snapshot()
    for nid in nids:
        assert nid.hex() not in snap_a
    # registry store alone holds no real id
    snap_r = reg.snapshot()
    for rid in real_ids:
        assert rid.encode().hex() not in snap_r and rid not in snap_r
    # joining the two stores on the pseudonym reconstructs the mapping
    joined = {rid: reg.records[pid][0] for rid, (pid, _) in auth.records.items() if pid in reg.records}
    assert joined == {w.real_id: w.network_id for w in wallets}
    assert reg.replay_log() == {w.pseudonym_id: w.network_id for w in wallets}
    # every roster member chains back to the registry key
    roster = reg.roster()
    assert set(roster) == {w.network_id for w in wallets}
    for nid in roster:
        assert reg.certificate(nid).verify(reg.scheme, reg.public_key)


ops = st.lists(st.tuples(st.sampled_from(["register", "rotate"]), st.integers(0, 10**6)), max_size=12)


@settings(max_examples=1000)
@given(ops, st.integers(0, 2**32))
def test_split_knowledge_after_random_sequences(seq, seed):
    scheme, rng, auth, reg = stores(seed=seed)
    wallets = []
    for op, k in seq:
        if op == "register" or not wallets:
            wallets.append(enroll(f"person-{len(wallets)}", auth, reg, rng))
        else:
            rotate(wallets[k % len(wallets)], reg)
    check_split_knowledge(auth, reg, wallets)
