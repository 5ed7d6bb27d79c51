"""Encrypted federated aggregation: wire format, key ceremony, protocol roles.

One aggregation round walks seven steps: hospitals flatten their model into
fixed-point integers, chunk the flat vector into ring-sized pieces, encrypt
each chunk under the shared public key, and send the result to the server;
the server, which never holds the secret key, adds the ciphertexts
chunk-wise and broadcasts the encrypted aggregate; hospitals decrypt, divide
by the number of contributors, and reshape. Keys originate at hospital 1:
the public key goes everywhere, the secret key only to hospitals.

Every message on the wire is a RoundMessage: a fixed header (magic "DOPM",
version, message type, round, sender, payload length) followed by the
payload. Message types: 0 public-key, 1 model-broadcast, 2 encrypted-update,
3 encrypted-aggregate, 4 final-plain-update.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import bfv
from .errors import ProtocolError
from .model_core import ModelParams
from .transport import Endpoint

MAGIC = b"DOPM"
VERSION = 1

MSG_PUBLIC_KEY = 0
MSG_MODEL_BROADCAST = 1
MSG_ENCRYPTED_UPDATE = 2
MSG_ENCRYPTED_AGGREGATE = 3
MSG_FINAL_PLAIN_UPDATE = 4

_VALID_TYPES = (
    MSG_PUBLIC_KEY,
    MSG_MODEL_BROADCAST,
    MSG_ENCRYPTED_UPDATE,
    MSG_ENCRYPTED_AGGREGATE,
    MSG_FINAL_PLAIN_UPDATE,
)

_HEADER = struct.Struct("<4sBBIHQ")

SERVER_ID = 0


@dataclass(frozen=True)
class RoundMessage:
    """One protocol message; `payload` semantics depend on msg_type."""

    msg_type: int
    round_index: int
    sender: int
    payload: bytes

    def __post_init__(self):
        if self.msg_type not in _VALID_TYPES:
            raise ProtocolError(f"unknown message type {self.msg_type}")
        if not 0 <= self.round_index < 2**32:
            raise ProtocolError("round index outside the 32-bit range")
        if not 0 <= self.sender < 2**16:
            raise ProtocolError("sender id outside the 16-bit range")


def serialize_message(msg: RoundMessage) -> bytes:
    header = _HEADER.pack(
        MAGIC, VERSION, msg.msg_type, msg.round_index, msg.sender, len(msg.payload)
    )
    return header + msg.payload


def deserialize_message(data: bytes) -> RoundMessage:
    if len(data) < _HEADER.size:
        raise ProtocolError(f"message of {len(data)} bytes is shorter than the header")
    magic, version, msg_type, round_index, sender, payload_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if msg_type not in _VALID_TYPES:
        raise ProtocolError(f"unknown message type {msg_type}")
    payload = data[_HEADER.size:]
    if len(payload) != payload_len:
        raise ProtocolError(
            f"payload length field says {payload_len}, got {len(payload)} bytes"
        )
    return RoundMessage(
        msg_type=msg_type, round_index=round_index, sender=sender, payload=payload
    )


# ---------------------------------------------------------------------------
# Payload encodings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChunkedUpdate:
    """A flat integer vector as a sequence of encrypted ring-sized chunks."""

    original_len: int
    chunks: tuple[bfv.Ciphertext, ...]

    @property
    def num_chunks(self) -> int:
        return len(self.chunks)


def serialize_chunked(update: ChunkedUpdate) -> bytes:
    head = struct.pack("<QI", update.original_len, update.num_chunks)
    return head + b"".join(bfv.serialize_ciphertext(ct) for ct in update.chunks)


def deserialize_chunked(data: bytes, params: bfv.EncryptionParams) -> ChunkedUpdate:
    if len(data) < 12:
        raise ProtocolError("chunked update payload too short")
    original_len, num_chunks = struct.unpack_from("<QI", data)
    ct_size = 8 + 4 + 2 * params.degree * 8
    if len(data) != 12 + num_chunks * ct_size:
        raise ProtocolError("chunked update payload length mismatch")
    if num_chunks * params.degree < original_len:
        raise ProtocolError("chunk count cannot cover the declared length")
    try:
        chunks = tuple(
            bfv.deserialize_ciphertext(data[12 + i * ct_size : 12 + (i + 1) * ct_size], params)
            for i in range(num_chunks)
        )
    except ValueError as exc:
        raise ProtocolError(f"bad ciphertext in chunked update: {exc}") from None
    return ChunkedUpdate(original_len=original_len, chunks=chunks)


def _pack_model_vector(values: np.ndarray) -> bytes:
    return struct.pack("<I", len(values)) + values.astype("<f8").tobytes()


def _unpack_model_vector(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise ProtocolError("model payload too short")
    (count,) = struct.unpack_from("<I", data)
    if len(data) != 4 + 8 * count:
        raise ProtocolError("model payload length mismatch")
    return np.frombuffer(data, dtype="<f8", offset=4, count=count).astype(np.float64)


_KIND_PK = 0
_KIND_PK_SK = 1


def _pack_key_bundle(pk: bfv.PublicKey, sk: bfv.SecretKey | None) -> bytes:
    pk_blob = bfv.serialize_public_key(pk)
    if sk is None:
        return bytes([_KIND_PK]) + struct.pack("<I", len(pk_blob)) + pk_blob
    sk_blob = bfv.serialize_secret_key(sk)
    return bytes([_KIND_PK_SK]) + struct.pack("<I", len(pk_blob)) + pk_blob + sk_blob


def _unpack_key_bundle(data: bytes, params: bfv.EncryptionParams):
    if len(data) < 5:
        raise ProtocolError("key payload too short")
    kind = data[0]
    (pk_len,) = struct.unpack_from("<I", data, 1)
    if len(data) < 5 + pk_len:
        raise ProtocolError("key payload truncated")
    try:
        pk = bfv.deserialize_public_key(data[5 : 5 + pk_len], params)
        if kind == _KIND_PK:
            if len(data) != 5 + pk_len:
                raise ProtocolError("trailing bytes after public key")
            return pk, None
        if kind == _KIND_PK_SK:
            sk = bfv.deserialize_secret_key(data[5 + pk_len :], params)
            return pk, sk
    except ValueError as exc:
        raise ProtocolError(f"bad key material: {exc}") from None
    raise ProtocolError(f"unknown key bundle kind {kind}")


# ---------------------------------------------------------------------------
# Pipeline stages (pure functions)
# ---------------------------------------------------------------------------

def flatten(model: ModelParams, params: bfv.EncryptionParams, max_summands: int) -> np.ndarray:
    """Model weights to fixed-point integers, enforcing the overflow budget."""
    return bfv.fixed_point_encode(model.values, params, max_summands=max_summands)


def encrypt_update(
    flat: np.ndarray,
    pk: bfv.PublicKey,
    params: bfv.EncryptionParams,
    rng: np.random.Generator,
) -> ChunkedUpdate:
    """Chunk a flat integer vector into ring-size pieces and encrypt each."""
    if flat.ndim != 1 or len(flat) == 0:
        raise ValueError("expected a non-empty 1-D integer vector")
    d = params.degree
    chunks = []
    for start in range(0, len(flat), d):
        piece = flat[start : start + d]
        chunks.append(bfv.encrypt(bfv.batch_encode(piece, params), pk, params, rng))
    return ChunkedUpdate(original_len=len(flat), chunks=tuple(chunks))


def aggregate_at_server(updates, params: bfv.EncryptionParams) -> ChunkedUpdate:
    """Chunk-wise homomorphic sum. Runs with no secret key in scope."""
    if len(updates) == 0:
        raise ProtocolError("no updates to aggregate")
    first = updates[0]
    agg = list(first.chunks)
    for upd in updates[1:]:
        if upd.num_chunks != first.num_chunks or upd.original_len != first.original_len:
            raise ProtocolError("updates disagree on length or chunk count")
        for i, ct in enumerate(upd.chunks):
            agg[i] = bfv.add_ciphertexts(agg[i], ct, params)
    return ChunkedUpdate(original_len=first.original_len, chunks=tuple(agg))


def decrypt_aggregate(
    agg: ChunkedUpdate,
    sk: bfv.SecretKey,
    active_count: int,
    shapes,
    params: bfv.EncryptionParams,
) -> ModelParams:
    """Decrypt, drop chunk padding, undo fixed point, divide by contributors."""
    if active_count < 1:
        raise ValueError("active_count must be >= 1")
    slots = [
        bfv.batch_decode(bfv.decrypt(ct, sk, params), params) for ct in agg.chunks
    ]
    flat = np.concatenate(slots)[: agg.original_len]
    values = bfv.fixed_point_decode(flat, params) / active_count
    return ModelParams(values=values, shapes=tuple(shapes))


# ---------------------------------------------------------------------------
# Protocol roles
# ---------------------------------------------------------------------------

def _expect(
    endpoint: Endpoint, src: int, msg_type: int, round_index: int, timeout: float | None
) -> RoundMessage:
    msg = deserialize_message(endpoint.recv(src, timeout=timeout))
    if msg.msg_type != msg_type or msg.round_index != round_index or msg.sender != src:
        raise ProtocolError(
            f"expected type {msg_type} round {round_index} from {src}, got "
            f"type {msg.msg_type} round {msg.round_index} from {msg.sender}"
        )
    return msg


class HospitalNode:
    """Hospital-side protocol role: holds both keys after the ceremony."""

    def __init__(
        self,
        endpoint: Endpoint,
        hospital_id: int,
        params: bfv.EncryptionParams,
        rng: np.random.Generator,
        timeout: float | None = 30.0,
    ):
        if hospital_id < 1:
            raise ValueError("hospital ids start at 1; 0 is the server")
        self.endpoint = endpoint
        self.hospital_id = hospital_id
        self.params = params
        self.rng = rng
        self.timeout = timeout
        self.public_key: bfv.PublicKey | None = None
        self.secret_key: bfv.SecretKey | None = None

    def lead_key_ceremony(self, num_hospitals: int, key_rng: np.random.Generator) -> None:
        """Hospital 1 generates the pair and distributes it (step 1)."""
        sk, pk = bfv.keygen(self.params, key_rng)
        self.secret_key, self.public_key = sk, pk
        self.endpoint.send(
            SERVER_ID,
            serialize_message(RoundMessage(
                msg_type=MSG_PUBLIC_KEY, round_index=0, sender=self.hospital_id,
                payload=_pack_key_bundle(pk, None),
            )),
        )
        for peer in range(1, num_hospitals + 1):
            if peer != self.hospital_id:
                self.endpoint.send(
                    peer,
                    serialize_message(RoundMessage(
                        msg_type=MSG_PUBLIC_KEY, round_index=0, sender=self.hospital_id,
                        payload=_pack_key_bundle(pk, sk),
                    )),
                )

    def receive_keys(self, leader: int = 1) -> None:
        msg = _expect(self.endpoint, leader, MSG_PUBLIC_KEY, 0, self.timeout)
        pk, sk = _unpack_key_bundle(msg.payload, self.params)
        if sk is None:
            raise ProtocolError("hospital key bundle is missing the secret key")
        self.public_key, self.secret_key = pk, sk

    def send_update(self, round_index: int, model: ModelParams, active_count: int) -> None:
        """Steps 3-4: fixed-point encode, chunk, encrypt, ship to the server."""
        if self.public_key is None:
            raise ProtocolError("key ceremony has not run")
        flat = flatten(model, self.params, max_summands=active_count)
        update = encrypt_update(flat, self.public_key, self.params, self.rng)
        self.endpoint.send(
            SERVER_ID,
            serialize_message(RoundMessage(
                msg_type=MSG_ENCRYPTED_UPDATE, round_index=round_index,
                sender=self.hospital_id, payload=serialize_chunked(update),
            )),
        )

    def receive_aggregate(
        self, round_index: int, active_count: int, shapes
    ) -> ModelParams:
        """Step 6: decrypt the broadcast aggregate and divide by the count."""
        if self.secret_key is None:
            raise ProtocolError("key ceremony has not run")
        msg = _expect(self.endpoint, SERVER_ID, MSG_ENCRYPTED_AGGREGATE, round_index, self.timeout)
        agg = deserialize_chunked(msg.payload, self.params)
        return decrypt_aggregate(agg, self.secret_key, active_count, shapes, self.params)

    def send_final_plain_update(self, round_index: int, model: ModelParams) -> None:
        """Step 7 (off by default): ship the final model in the clear."""
        self.endpoint.send(
            SERVER_ID,
            serialize_message(RoundMessage(
                msg_type=MSG_FINAL_PLAIN_UPDATE, round_index=round_index,
                sender=self.hospital_id, payload=_pack_model_vector(model.values),
            )),
        )


class ServerNode:
    """Server-side role: collects, sums, broadcasts. Never holds a secret key."""

    def __init__(
        self,
        endpoint: Endpoint,
        num_hospitals: int,
        params: bfv.EncryptionParams,
        timeout: float | None = 30.0,
    ):
        self.endpoint = endpoint
        self.num_hospitals = num_hospitals
        self.params = params
        self.timeout = timeout
        self.public_key: bfv.PublicKey | None = None

    def receive_public_key(self, leader: int = 1) -> None:
        msg = _expect(self.endpoint, leader, MSG_PUBLIC_KEY, 0, self.timeout)
        pk, sk = _unpack_key_bundle(msg.payload, self.params)
        if sk is not None:
            raise ProtocolError("server must not receive secret key material")
        self.public_key = pk

    def broadcast_model(self, round_index: int, values: np.ndarray) -> None:
        """Step 2: send the current global model to every hospital."""
        payload = _pack_model_vector(values)
        for peer in range(1, self.num_hospitals + 1):
            self.endpoint.send(
                peer,
                serialize_message(RoundMessage(
                    msg_type=MSG_MODEL_BROADCAST, round_index=round_index,
                    sender=SERVER_ID, payload=payload,
                )),
            )

    def aggregate_round(self, round_index: int) -> None:
        """Step 5: collect one update per hospital, sum, broadcast the sum."""
        updates = []
        for k in range(1, self.num_hospitals + 1):
            msg = _expect(self.endpoint, k, MSG_ENCRYPTED_UPDATE, round_index, self.timeout)
            updates.append(deserialize_chunked(msg.payload, self.params))
        agg = aggregate_at_server(updates, self.params)
        payload = serialize_chunked(agg)
        for k in range(1, self.num_hospitals + 1):
            self.endpoint.send(
                k,
                serialize_message(RoundMessage(
                    msg_type=MSG_ENCRYPTED_AGGREGATE, round_index=round_index,
                    sender=SERVER_ID, payload=payload,
                )),
            )

    def collect_final_plain_updates(self, round_index: int) -> list[np.ndarray]:
        out = []
        for k in range(1, self.num_hospitals + 1):
            msg = _expect(self.endpoint, k, MSG_FINAL_PLAIN_UPDATE, round_index, self.timeout)
            out.append(_unpack_model_vector(msg.payload))
        return out


def assert_no_secret_material(obj, secret_blobs=()) -> None:
    """Walk an object graph; fail if any secret key or its bytes are reachable."""
    seen: set[int] = set()
    stack = [obj]
    while stack:
        cur = stack.pop()
        if id(cur) in seen:
            continue
        seen.add(id(cur))
        if isinstance(cur, bfv.SecretKey):
            raise AssertionError("secret key object reachable from server state")
        if isinstance(cur, (bytes, bytearray)):
            for blob in secret_blobs:
                if blob and blob in bytes(cur):
                    raise AssertionError("serialized secret key bytes in server state")
            continue
        if isinstance(cur, (str, int, float, bool, type(None), np.ndarray, np.generic)):
            continue
        if isinstance(cur, dict):
            stack.extend(cur.keys())
            stack.extend(cur.values())
            continue
        if isinstance(cur, (list, tuple, set, frozenset, deque)):
            stack.extend(cur)
            continue
        d = getattr(cur, "__dict__", None)
        if isinstance(d, dict):
            stack.extend(d.values())
        if hasattr(cur, "queue") and isinstance(getattr(cur, "queue"), deque):
            stack.extend(cur.queue)


@dataclass
class SecureAggregationSession:
    """Single-process driver wiring hospitals and server over a transport.

    The orchestrator hands each hospital its locally updated model; the
    session runs the encrypted round and returns the averaged global model
    exactly as every hospital reconstructs it.
    """

    endpoints: dict[int, Endpoint]
    hospitals: list[HospitalNode]
    server: ServerNode
    params: bfv.EncryptionParams
    final_plain_update: bool = False
    _round: int = field(default=0, repr=False)

    @classmethod
    def create(
        cls,
        endpoints: dict[int, Endpoint],
        params: bfv.EncryptionParams,
        seed: int,
        timeout: float | None = 30.0,
        final_plain_update: bool = False,
    ) -> "SecureAggregationSession":
        num_hospitals = len(endpoints) - 1
        if num_hospitals < 1:
            raise ValueError("need a server endpoint plus at least one hospital")
        hospitals = [
            HospitalNode(
                endpoints[k], k, params,
                rng=np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xE0C, k]))),
                timeout=timeout,
            )
            for k in range(1, num_hospitals + 1)
        ]
        server = ServerNode(endpoints[SERVER_ID], num_hospitals, params, timeout=timeout)
        key_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5EED])))
        hospitals[0].lead_key_ceremony(num_hospitals, key_rng)
        server.receive_public_key()
        for node in hospitals[1:]:
            node.receive_keys()
        return cls(
            endpoints=endpoints, hospitals=hospitals, server=server, params=params,
            final_plain_update=final_plain_update,
        )

    def aggregate(self, models: list[ModelParams]) -> ModelParams:
        """Run one encrypted aggregation round over the hospitals' models."""
        if len(models) != len(self.hospitals):
            raise ValueError("need exactly one model per hospital")
        self._round += 1
        k = len(self.hospitals)
        for node, model in zip(self.hospitals, models):
            node.send_update(self._round, model, active_count=k)
        self.server.aggregate_round(self._round)
        shapes = models[0].shapes
        results = [
            node.receive_aggregate(self._round, active_count=k, shapes=shapes)
            for node in self.hospitals
        ]
        first = results[0]
        for other in results[1:]:
            if not np.array_equal(other.values, first.values):
                raise ProtocolError("hospitals decrypted different aggregates")
        return first

    def send_final_models(self, models: list[ModelParams]) -> list[np.ndarray]:
        """Step 7 when enabled: plaintext final models straight to the server."""
        if not self.final_plain_update:
            raise ProtocolError("final plain update is disabled for this session")
        self._round += 1
        for node, model in zip(self.hospitals, models):
            node.send_final_plain_update(self._round, model)
        return self.server.collect_final_plain_updates(self._round)
