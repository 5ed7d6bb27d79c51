"""Wire format, key ceremony, and end-to-end encrypted aggregation."""

import struct

import numpy as np
import pytest

from privfl import bfv, secure_agg
from privfl.errors import ProtocolError
from privfl.model_core import ModelParams
from privfl.secure_agg import (
    MSG_ENCRYPTED_AGGREGATE,
    MSG_ENCRYPTED_UPDATE,
    MSG_FINAL_PLAIN_UPDATE,
    MSG_MODEL_BROADCAST,
    MSG_PUBLIC_KEY,
    RoundMessage,
    SecureAggregationSession,
    deserialize_chunked,
    deserialize_message,
    serialize_chunked,
    serialize_message,
)
from privfl.transport import close_network, loopback_network, tcp_network

PROD = bfv.EncryptionParams()


def random_model(n: int, rng, limit: float = 2.0) -> ModelParams:
    values = rng.uniform(-limit, limit, size=n)
    return ModelParams(values=values, shapes=(("w", (n,)),))


# -- wire format --------------------------------------------------------------

def test_header_layout_is_exactly_as_documented():
    msg = RoundMessage(msg_type=MSG_ENCRYPTED_UPDATE, round_index=7, sender=3, payload=b"abc")
    blob = serialize_message(msg)
    assert blob[:4] == b"DOPM"
    assert blob[4] == 1  # version
    assert blob[5] == MSG_ENCRYPTED_UPDATE
    assert struct.unpack_from("<I", blob, 6)[0] == 7
    assert struct.unpack_from("<H", blob, 10)[0] == 3
    assert struct.unpack_from("<Q", blob, 12)[0] == 3
    assert blob[20:] == b"abc"


@pytest.mark.parametrize(
    "msg_type",
    [MSG_PUBLIC_KEY, MSG_MODEL_BROADCAST, MSG_ENCRYPTED_UPDATE,
     MSG_ENCRYPTED_AGGREGATE, MSG_FINAL_PLAIN_UPDATE],
)
def test_round_trip_is_byte_exact_for_every_type(msg_type):
    msg = RoundMessage(msg_type=msg_type, round_index=42, sender=9, payload=b"\x00\xffpayload")
    blob = serialize_message(msg)
    back = deserialize_message(blob)
    assert back == msg
    assert serialize_message(back) == blob


def test_malformed_messages_are_rejected():
    good = serialize_message(RoundMessage(0, 1, 1, b"xy"))
    with pytest.raises(ProtocolError, match="shorter than the header"):
        deserialize_message(good[:10])
    with pytest.raises(ProtocolError, match="magic"):
        deserialize_message(b"XXXX" + good[4:])
    with pytest.raises(ProtocolError, match="version"):
        deserialize_message(good[:4] + b"\x09" + good[5:])
    with pytest.raises(ProtocolError, match="message type"):
        deserialize_message(good[:5] + b"\x07" + good[6:])
    with pytest.raises(ProtocolError, match="length"):
        deserialize_message(good + b"extra")
    with pytest.raises(ProtocolError):
        RoundMessage(msg_type=99, round_index=0, sender=0, payload=b"")


def test_chunked_update_round_trip_and_tampering():
    rng = np.random.default_rng(0)
    sk, pk = bfv.keygen(PROD, np.random.default_rng(42))
    flat = bfv.fixed_point_encode(rng.uniform(-2, 2, size=5000), PROD, max_summands=3)
    update = secure_agg.encrypt_update(flat, pk, PROD, rng)
    assert update.num_chunks == 2
    blob = serialize_chunked(update)
    back = deserialize_chunked(blob, PROD)
    assert back.original_len == 5000
    assert serialize_chunked(back) == blob
    with pytest.raises(ProtocolError):
        deserialize_chunked(blob[:-3], PROD)
    with pytest.raises(ProtocolError):
        deserialize_chunked(b"", PROD)
    # A declared length the chunks cannot cover.
    bad = struct.pack("<QI", 10**9, update.num_chunks) + blob[12:]
    with pytest.raises(ProtocolError):
        deserialize_chunked(bad, PROD)


# -- pipeline stages -----------------------------------------------------------

def test_pipeline_sum_matches_plaintext_mean():
    rng = np.random.default_rng(7)
    sk, pk = bfv.keygen(PROD, np.random.default_rng(1))
    k, n = 5, 300
    models = [random_model(n, rng) for _ in range(k)]
    updates = [
        secure_agg.encrypt_update(
            secure_agg.flatten(m, PROD, max_summands=k), pk, PROD, rng
        )
        for m in models
    ]
    agg = secure_agg.aggregate_at_server(updates, PROD)
    result = secure_agg.decrypt_aggregate(agg, sk, k, models[0].shapes, PROD)
    mean = np.mean([m.values for m in models], axis=0)
    assert np.max(np.abs(result.values - mean)) <= 5e-4


def test_aggregate_rejects_mismatched_updates():
    rng = np.random.default_rng(3)
    _, pk = bfv.keygen(PROD, np.random.default_rng(2))
    a = secure_agg.encrypt_update(np.arange(100, dtype=np.int64), pk, PROD, rng)
    b = secure_agg.encrypt_update(np.arange(5000, dtype=np.int64), pk, PROD, rng)
    with pytest.raises(ProtocolError, match="disagree"):
        secure_agg.aggregate_at_server([a, b], PROD)
    with pytest.raises(ProtocolError):
        secure_agg.aggregate_at_server([], PROD)


def test_chunk_padding_slots_are_zero():
    rng = np.random.default_rng(11)
    sk, pk = bfv.keygen(PROD, np.random.default_rng(4))
    flat = np.arange(1, 11, dtype=np.int64)  # 10 values in a 4096-slot chunk
    update = secure_agg.encrypt_update(flat, pk, PROD, rng)
    slots = bfv.batch_decode(bfv.decrypt(update.chunks[0], sk, PROD), PROD)
    assert slots[:10].tolist() == list(range(1, 11))
    assert not slots[10:].any()


# -- ceremony and sessions ------------------------------------------------------

def make_session(factory, num_hospitals=3, seed=123, **kw):
    endpoints = factory(num_hospitals)
    session = SecureAggregationSession.create(endpoints, PROD, seed=seed, **kw)
    return endpoints, session


def test_key_ceremony_placement():
    endpoints, session = make_session(loopback_network)
    try:
        leader = session.hospitals[0]
        sk_blob = bfv.serialize_secret_key(leader.secret_key)
        pk_blob = bfv.serialize_public_key(leader.public_key)
        for node in session.hospitals:
            assert bfv.serialize_secret_key(node.secret_key) == sk_blob
            assert bfv.serialize_public_key(node.public_key) == pk_blob
        assert bfv.serialize_public_key(session.server.public_key) == pk_blob
        # Nothing reachable from the server is (or contains) the secret key.
        secure_agg.assert_no_secret_material(session.server, [sk_blob])
    finally:
        close_network(endpoints)


def test_secret_material_auditor_actually_detects():
    endpoints, session = make_session(loopback_network)
    try:
        sk = session.hospitals[0].secret_key
        session.server.planted = sk
        with pytest.raises(AssertionError, match="secret key object"):
            secure_agg.assert_no_secret_material(session.server)
        session.server.planted = bfv.serialize_secret_key(sk)
        with pytest.raises(AssertionError, match="bytes"):
            secure_agg.assert_no_secret_material(
                session.server, [bfv.serialize_secret_key(sk)]
            )
    finally:
        close_network(endpoints)


def test_ceremony_is_deterministic_in_the_seed():
    e1, s1 = make_session(loopback_network, seed=99)
    e2, s2 = make_session(loopback_network, seed=99)
    e3, s3 = make_session(loopback_network, seed=100)
    try:
        blob = lambda s: bfv.serialize_secret_key(s.hospitals[0].secret_key)
        assert blob(s1) == blob(s2)
        assert blob(s1) != blob(s3)
    finally:
        for e in (e1, e2, e3):
            close_network(e)


def test_server_refuses_secret_key_bundle():
    endpoints = loopback_network(1)
    try:
        params = PROD
        node = secure_agg.HospitalNode(
            endpoints[1], 1, params, np.random.default_rng(0), timeout=1
        )
        sk, pk = bfv.keygen(params, np.random.default_rng(5))
        endpoints[1].send(0, serialize_message(RoundMessage(
            MSG_PUBLIC_KEY, 0, 1, secure_agg._pack_key_bundle(pk, sk)
        )))
        server = secure_agg.ServerNode(endpoints[0], 1, params, timeout=1)
        with pytest.raises(ProtocolError, match="secret key"):
            server.receive_public_key()
    finally:
        close_network(endpoints)


def test_unexpected_round_or_type_is_rejected():
    endpoints = loopback_network(1)
    try:
        endpoints[1].send(0, serialize_message(RoundMessage(
            MSG_ENCRYPTED_UPDATE, round_index=5, sender=1, payload=b""
        )))
        server = secure_agg.ServerNode(endpoints[0], 1, PROD, timeout=1)
        with pytest.raises(ProtocolError, match="expected"):
            server.aggregate_round(round_index=6)
    finally:
        close_network(endpoints)


@pytest.mark.parametrize("factory", [loopback_network, tcp_network], ids=["loopback", "tcp"])
def test_session_aggregate_matches_plaintext_mean(factory):
    endpoints, session = make_session(factory, num_hospitals=4, seed=7)
    try:
        rng = np.random.default_rng(21)
        models = [random_model(200, rng) for _ in range(4)]
        result = session.aggregate(models)
        mean = np.mean([m.values for m in models], axis=0)
        assert np.max(np.abs(result.values - mean)) <= 5e-4
    finally:
        close_network(endpoints)


def test_tcp_and_loopback_agree_exactly():
    rng = np.random.default_rng(33)
    models = [random_model(150, rng) for _ in range(3)]
    e1, s1 = make_session(loopback_network, num_hospitals=3, seed=55)
    e2, s2 = make_session(tcp_network, num_hospitals=3, seed=55)
    try:
        r1 = s1.aggregate(models)
        r2 = s2.aggregate(models)
        assert np.array_equal(r1.values, r2.values)
    finally:
        close_network(e1)
        close_network(e2)


def test_multi_round_sessions_and_server_stays_blind():
    endpoints, session = make_session(loopback_network, num_hospitals=3, seed=8)
    try:
        rng = np.random.default_rng(2)
        sk_blob = bfv.serialize_secret_key(session.hospitals[0].secret_key)
        for _ in range(3):
            models = [random_model(80, rng) for _ in range(3)]
            result = session.aggregate(models)
            mean = np.mean([m.values for m in models], axis=0)
            assert np.max(np.abs(result.values - mean)) <= 5e-4
            secure_agg.assert_no_secret_material(session.server, [sk_blob])
    finally:
        close_network(endpoints)


def test_hospital_permutation_only_permutes_nothing():
    # Integer ciphertext addition is exact, so assigning the same models to
    # different hospitals must give the identical average.
    rng = np.random.default_rng(13)
    models = [random_model(60, rng) for _ in range(3)]
    e1, s1 = make_session(loopback_network, num_hospitals=3, seed=1)
    e2, s2 = make_session(loopback_network, num_hospitals=3, seed=2)
    try:
        r1 = s1.aggregate(models)
        r2 = s2.aggregate(models[::-1])
        assert np.array_equal(r1.values, r2.values)
    finally:
        close_network(e1)
        close_network(e2)


def test_final_plain_update_is_off_by_default():
    endpoints, session = make_session(loopback_network, num_hospitals=2)
    try:
        rng = np.random.default_rng(1)
        models = [random_model(10, rng) for _ in range(2)]
        with pytest.raises(ProtocolError, match="disabled"):
            session.send_final_models(models)
    finally:
        close_network(endpoints)


def test_final_plain_update_delivers_exact_values():
    endpoints, session = make_session(
        loopback_network, num_hospitals=2, final_plain_update=True
    )
    try:
        rng = np.random.default_rng(1)
        models = [random_model(10, rng) for _ in range(2)]
        got = session.send_final_models(models)
        for sent, received in zip(models, got):
            assert np.array_equal(sent.values, received)
    finally:
        close_network(endpoints)


def test_model_broadcast_round_trips():
    endpoints = loopback_network(2)
    try:
        server = secure_agg.ServerNode(endpoints[0], 2, PROD, timeout=1)
        values = np.array([1.5, -2.25, 0.0])
        server.broadcast_model(3, values)
        for k in (1, 2):
            msg = deserialize_message(endpoints[k].recv(0, timeout=1))
            assert msg.msg_type == MSG_MODEL_BROADCAST
            assert msg.round_index == 3
            assert np.array_equal(secure_agg._unpack_model_vector(msg.payload), values)
    finally:
        close_network(endpoints)
