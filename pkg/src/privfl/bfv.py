"""Additively homomorphic BFV encryption over Z_qc[x]/(x^d + 1).

Only the operations the aggregation protocol needs are implemented: key
generation, encryption, decryption, and ciphertext addition. Plaintexts live
in Z_b[x]/(x^d + 1) and are used in slot form (one integer per slot, packed
through an NTT over the plaintext modulus), so adding ciphertexts adds the
underlying integer vectors element-wise.

Correct decryption requires the accumulated noise to stay below qc/(4b).
Every fresh ciphertext carries a worst-case noise bound, and each ciphertext
tracks an additions-performed counter (`level`) so the library can refuse
sums that could cross the threshold. The coefficient modulus is capped at
32 bits so all ring arithmetic stays inside numpy uint64; see `ring`.

This is research code for benchmarking the aggregation protocol. It is not
side-channel hardened and must not be used to protect real data.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import AggregationOverflowError, DecryptionError
from .ring import NttContext, from_balanced, get_context, is_prime, to_balanced

# Reject a decryption whose rounding residual comes this close to the
# midpoint; honest operation within the summand cap stays far below it.
_RESIDUAL_ALARM = 0.45

# Per-coefficient tail multiplier for the fresh-noise bound. At eight sigmas
# the chance of any coefficient in a long run exceeding the bound is
# negligible (< 1e-15 per coefficient).
_NOISE_TAIL_SIGMAS = 8.0


@dataclass(frozen=True)
class EncryptionParams:
    """Ring and modulus choices for the additive BFV scheme.

    Attributes:
        degree: Ring dimension d; a power of two. Also the slot count.
        plain_modulus: Prime b with b = 1 (mod 2d) so slot packing has an NTT.
        coeff_modulus: Prime qc with qc = 1 (mod 2d), qc >= 2*b**2, below 2**32.
            qc mod b must also be small: summed ciphertexts hold the integer
            (un-reduced) sum of plaintext polynomials, and decryption picks up
            an error of (qc mod b) per unit of plaintext carry.
        noise_std: Standard deviation of the discrete Gaussian error.
        fixed_point_scale: Multiplier used when embedding floats into slots.
    """

    degree: int = 4096
    plain_modulus: int = 40961
    coeff_modulus: int = 3691036673  # = 90111 * 40961 + 2, prime, 1 mod 8192
    noise_std: float = 3.2
    fixed_point_scale: int = 1000

    def __post_init__(self):
        d, b, qc = self.degree, self.plain_modulus, self.coeff_modulus
        if d < 4 or d & (d - 1):
            raise ValueError(f"degree {d} is not a power of two >= 4")
        if not is_prime(b):
            raise ValueError(f"plain modulus {b} is not prime")
        if (b - 1) % (2 * d) != 0:
            raise ValueError(f"plain modulus {b} is not 1 mod {2 * d}")
        if not is_prime(qc):
            raise ValueError(f"coefficient modulus {qc} is not prime")
        if (qc - 1) % (2 * d) != 0:
            raise ValueError(f"coefficient modulus {qc} is not 1 mod {2 * d}")
        if qc < 2 * b * b:
            raise ValueError(f"coefficient modulus {qc} is below 2*b**2 = {2 * b * b}")
        if qc.bit_length() > 32:
            raise ValueError(f"coefficient modulus {qc} exceeds 32 bits")
        if self.delta_scale < 2 * b:
            raise ValueError("scaling factor delta is below 2*b; moduli too close")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")
        if self.fixed_point_scale < 1:
            raise ValueError("fixed_point_scale must be >= 1")
        if self.max_additions < 1:
            raise ValueError("parameters leave no room for even one ciphertext")

    @classmethod
    def small_test(cls) -> "EncryptionParams":
        """A d=8 ring for fast exhaustive-style tests."""
        return cls(degree=8, plain_modulus=97, coeff_modulus=979313, noise_std=1.0)

    @property
    def delta_scale(self) -> int:
        """Plaintext-to-ciphertext embedding factor, floor(qc / b)."""
        return self.coeff_modulus // self.plain_modulus

    @property
    def carry_residue(self) -> int:
        """qc mod b; scales the decryption error from plaintext-sum carries."""
        return self.coeff_modulus - self.plain_modulus * self.delta_scale

    @property
    def slot_max(self) -> int:
        """Largest balanced slot value, (b - 1) / 2."""
        return (self.plain_modulus - 1) // 2

    @property
    def slot_min(self) -> int:
        return -self.slot_max

    @property
    def fresh_noise_bound(self) -> int:
        """Worst-case infinity norm of the noise in a fresh ciphertext."""
        per_coeff_std = self.noise_std * math.sqrt(1.0 + 4.0 * self.degree / 3.0)
        return math.ceil(_NOISE_TAIL_SIGMAS * per_coeff_std)

    @property
    def decryption_noise_limit(self) -> int:
        """Noise magnitude above which decryption may round incorrectly."""
        return self.coeff_modulus // (4 * self.plain_modulus)

    @property
    def max_additions(self) -> int:
        """How many fresh ciphertexts may be summed and still decrypt safely.

        Each summand contributes up to `fresh_noise_bound` of encryption
        noise plus up to (b/2) of plaintext carry, the latter entering the
        decryption error scaled by `carry_residue` / b.
        """
        per_summand = 2 * self.fresh_noise_bound + self.carry_residue
        return 2 * self.decryption_noise_limit // per_summand

    @cached_property
    def params_hash(self) -> bytes:
        """8-byte digest identifying this parameter set on the wire."""
        tag = (
            f"bfv:d={self.degree}:b={self.plain_modulus}:qc={self.coeff_modulus}"
            f":std={self.noise_std!r}:scale={self.fixed_point_scale}"
        )
        return hashlib.sha256(tag.encode()).digest()[:8]

    @property
    def cipher_ntt(self) -> NttContext:
        return get_context(self.coeff_modulus, self.degree)

    @property
    def plain_ntt(self) -> NttContext:
        return get_context(self.plain_modulus, self.degree)


@dataclass(frozen=True)
class PlaintextPoly:
    """Element of Z_b[x]/(x^d + 1) in balanced coefficient form."""

    coeffs: np.ndarray  # int64, balanced representatives
    params_hash: bytes


@dataclass(frozen=True)
class SecretKey:
    poly: np.ndarray = field(repr=False)  # uint64 mod qc, ternary underneath
    poly_hat: np.ndarray = field(repr=False)  # NTT form, cached for decryption
    params_hash: bytes = b""


@dataclass(frozen=True)
class PublicKey:
    p0: np.ndarray = field(repr=False)
    p1: np.ndarray = field(repr=False)
    p0_hat: np.ndarray = field(repr=False)
    p1_hat: np.ndarray = field(repr=False)
    params_hash: bytes = b""


@dataclass(frozen=True)
class Ciphertext:
    """Pair of ring elements plus an additions-performed counter.

    `level` is 0 for a fresh ciphertext; adding two ciphertexts produces
    level `a + b + 1`, so a fold of m fresh ciphertexts sits at level m - 1.
    """

    c0: np.ndarray = field(repr=False)
    c1: np.ndarray = field(repr=False)
    level: int = 0
    params_hash: bytes = b""


def _sample_ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, size=n, dtype=np.int64)

def _sample_gaussian(rng: np.random.Generator, n: int, std: float) -> np.ndarray:
    return np.rint(rng.normal(0.0, std, size=n)).astype(np.int64)

def _sample_uniform(rng: np.random.Generator, n: int, q: int) -> np.ndarray:
    return rng.integers(0, q, size=n, dtype=np.uint64)


def keygen(params: EncryptionParams, rng: np.random.Generator) -> tuple[SecretKey, PublicKey]:
    """Generate a key pair: ternary secret s, public pair (-(a*s + e), a)."""
    ctx = params.cipher_ntt
    qc = params.coeff_modulus
    s = from_balanced(_sample_ternary(rng, params.degree), qc)
    a = _sample_uniform(rng, params.degree, qc)
    e = from_balanced(_sample_gaussian(rng, params.degree, params.noise_std), qc)
    s_hat = ctx.forward(s)
    a_s = ctx.inverse(ctx.pointwise(ctx.forward(a), s_hat))
    p0 = (qc - (a_s + e) % qc) % qc
    sk = SecretKey(poly=s, poly_hat=s_hat, params_hash=params.params_hash)
    pk = PublicKey(
        p0=p0, p1=a, p0_hat=ctx.forward(p0), p1_hat=ctx.forward(a),
        params_hash=params.params_hash,
    )
    return sk, pk


def encrypt(
    pt: PlaintextPoly, pk: PublicKey, params: EncryptionParams, rng: np.random.Generator
) -> Ciphertext:
    """Encrypt one plaintext polynomial under the public key."""
    if pt.params_hash != params.params_hash or pk.params_hash != params.params_hash:
        raise ValueError("plaintext/key parameter mismatch")
    ctx = params.cipher_ntt
    qc = np.uint64(params.coeff_modulus)
    d = params.degree
    u_hat = ctx.forward(from_balanced(_sample_ternary(rng, d), params.coeff_modulus))
    e1 = from_balanced(_sample_gaussian(rng, d, params.noise_std), params.coeff_modulus)
    e2 = from_balanced(_sample_gaussian(rng, d, params.noise_std), params.coeff_modulus)
    m_q = from_balanced(pt.coeffs, params.coeff_modulus)
    scaled_m = np.uint64(params.delta_scale) * m_q % qc
    c0 = (ctx.inverse(ctx.pointwise(u_hat, pk.p0_hat)) + e1 + scaled_m) % qc
    c1 = (ctx.inverse(ctx.pointwise(u_hat, pk.p1_hat)) + e2) % qc
    return Ciphertext(c0=c0, c1=c1, level=0, params_hash=params.params_hash)


def decrypt(ct: Ciphertext, sk: SecretKey, params: EncryptionParams) -> PlaintextPoly:
    """Decrypt via round(b * [c0 + c1*s]_qc / qc) mod b, in balanced form.

    Raises:
        DecryptionError: if any coefficient's rounding residual is close
            enough to the midpoint that the result cannot be trusted.
    """
    if ct.params_hash != params.params_hash or sk.params_hash != params.params_hash:
        raise ValueError("ciphertext/key parameter mismatch")
    ctx = params.cipher_ntt
    qc = params.coeff_modulus
    b = params.plain_modulus
    x = (ct.c0 + ctx.inverse(ctx.pointwise(ctx.forward(ct.c1), sk.poly_hat))) % np.uint64(qc)
    num = np.uint64(b) * x + np.uint64(qc // 2)  # b * (qc-1) + qc/2 < 2**64
    m_hat = num // np.uint64(qc)
    residual = num.astype(np.int64) - m_hat.astype(np.int64) * np.int64(qc)
    worst = np.abs(residual - qc // 2).max() / qc
    if worst > _RESIDUAL_ALARM:
        raise DecryptionError(
            f"rounding residual {worst:.3f} of qc is too close to the 0.5 threshold"
        )
    coeffs = to_balanced(m_hat % np.uint64(b), b)
    return PlaintextPoly(coeffs=coeffs, params_hash=params.params_hash)


def add_ciphertexts(a: Ciphertext, b: Ciphertext, params: EncryptionParams) -> Ciphertext:
    """Homomorphic addition; the plaintext slots add element-wise mod b.

    The result's level is `a.level + b.level + 1`, the total number of
    additions in its history. A sum of m fresh ciphertexts (level m - 1)
    is refused once m would exceed the noise-safe limit.
    """
    if a.params_hash != b.params_hash or a.params_hash != params.params_hash:
        raise ValueError("cannot add ciphertexts under different parameters")
    level = a.level + b.level + 1
    if level + 1 > params.max_additions:
        raise ValueError(
            f"sum of {level + 1} fresh ciphertexts exceeds the noise-safe "
            f"limit of {params.max_additions}"
        )
    qc = np.uint64(params.coeff_modulus)
    return Ciphertext(
        c0=(a.c0 + b.c0) % qc, c1=(a.c1 + b.c1) % qc,
        level=level, params_hash=a.params_hash,
    )


def decryption_noise(
    ct: Ciphertext, sk: SecretKey, expected: PlaintextPoly, params: EncryptionParams
) -> int:
    """Infinity norm of the noise in `ct` given the plaintext it should hold."""
    ctx = params.cipher_ntt
    qc = params.coeff_modulus
    x = (ct.c0 + ctx.inverse(ctx.pointwise(ctx.forward(ct.c1), sk.poly_hat))) % np.uint64(qc)
    m_q = from_balanced(expected.coeffs, qc)
    scaled = np.uint64(params.delta_scale) * m_q % np.uint64(qc)
    e = to_balanced((x + np.uint64(qc) - scaled) % np.uint64(qc), qc)
    return int(np.abs(e).max())


# ---------------------------------------------------------------------------
# Plaintext encodings
# ---------------------------------------------------------------------------

def batch_encode(values, params: EncryptionParams) -> PlaintextPoly:
    """Pack up to d integers, one per slot, into a plaintext polynomial.

    Slot arithmetic is element-wise: adding two encoded polynomials adds the
    slot vectors mod b. Unused trailing slots are zero.
    """
    vals = np.asarray(values, dtype=np.int64)
    if vals.ndim != 1:
        raise ValueError("batch_encode expects a 1-D integer vector")
    if len(vals) > params.degree:
        raise ValueError(f"{len(vals)} values exceed {params.degree} slots")
    if len(vals) and (vals.max() > params.slot_max or vals.min() < params.slot_min):
        raise ValueError(
            f"slot values must lie in [{params.slot_min}, {params.slot_max}]"
        )
    slots = np.zeros(params.degree, dtype=np.int64)
    slots[: len(vals)] = vals
    coeffs = to_balanced(
        params.plain_ntt.inverse(from_balanced(slots, params.plain_modulus)),
        params.plain_modulus,
    )
    return PlaintextPoly(coeffs=coeffs, params_hash=params.params_hash)


def batch_decode(pt: PlaintextPoly, params: EncryptionParams) -> np.ndarray:
    """Recover the d slot values (balanced) from a plaintext polynomial."""
    if pt.params_hash != params.params_hash:
        raise ValueError("plaintext parameter mismatch")
    slots = params.plain_ntt.forward(from_balanced(pt.coeffs, params.plain_modulus))
    return to_balanced(slots, params.plain_modulus)


def base_b_encode(value: int, base: int) -> list[int]:
    """Digits of `value` in balanced base-`base` form, constant term first.

    Digits lie in (-base/2, base/2]; e.g. 26 in base 2 is [0, 1, 0, 1, 1]
    (x**4 + x**3 + x) and 26 in base 3 is [-1, 0, 0, 1] (x**3 - 1). For
    base 2 the digit set degenerates to {0, 1}, which cannot express
    negative integers.
    """
    if base < 2:
        raise ValueError("base must be >= 2")
    value = int(value)
    if base == 2 and value < 0:
        raise ValueError("base-2 digits {0, 1} cannot represent negative values")
    if value == 0:
        return [0]
    digits = []
    while value != 0:
        r = value % base
        if r > base // 2:
            r -= base
        digits.append(r)
        value = (value - r) // base
    return digits


def base_b_decode(digits, base: int) -> int:
    """Evaluate a digit list at x = base; inverse of `base_b_encode`."""
    if base < 2:
        raise ValueError("base must be >= 2")
    out = 0
    for d in reversed(list(digits)):
        out = out * base + int(d)
    return out


def fixed_point_encode(values, params: EncryptionParams, max_summands: int = 1) -> np.ndarray:
    """Scale floats by the fixed-point factor and round half away from zero.

    Args:
        values: Scalar or array of finite floats.
        max_summands: How many such encodings will be added into one slot;
            the per-value magnitude budget shrinks accordingly.

    Raises:
        AggregationOverflowError: if any scaled value could overflow a slot
            after `max_summands` additions.
    """
    if max_summands < 1:
        raise ValueError("max_summands must be >= 1")
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("fixed-point encoding requires finite values")
    scaled = np.abs(arr) * params.fixed_point_scale
    ints = (np.sign(arr) * np.floor(scaled + 0.5)).astype(np.int64)
    limit = params.slot_max // max_summands
    bad = np.abs(np.atleast_1d(ints)) > limit
    if bad.any():
        idx = int(np.argmax(bad))
        raise AggregationOverflowError(
            float(np.atleast_1d(arr)[idx]),
            limit / params.fixed_point_scale,
            idx if arr.ndim else None,
        )
    return ints


def fixed_point_decode(ints, params: EncryptionParams):
    """Map slot integers back to floats by dividing out the fixed-point scale."""
    return np.asarray(ints, dtype=np.float64) / params.fixed_point_scale


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _poly_bytes(a: np.ndarray) -> bytes:
    return a.astype("<u8").tobytes()

def _poly_from(data: bytes, n: int) -> np.ndarray:
    return np.frombuffer(data, dtype="<u8", count=n).astype(np.uint64)


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    """params hash (8B) | level (u32 LE) | c0 | c1, coefficients as u64 LE."""
    return ct.params_hash + struct.pack("<I", ct.level) + _poly_bytes(ct.c0) + _poly_bytes(ct.c1)


def deserialize_ciphertext(data: bytes, params: EncryptionParams) -> Ciphertext:
    d = params.degree
    expected = 8 + 4 + 2 * d * 8
    if len(data) != expected:
        raise ValueError(f"ciphertext blob is {len(data)} bytes, expected {expected}")
    if data[:8] != params.params_hash:
        raise ValueError("ciphertext was produced under different parameters")
    (level,) = struct.unpack_from("<I", data, 8)
    if not 0 <= level < params.max_additions:
        raise ValueError(f"level {level} outside [0, {params.max_additions - 1}]")
    c0 = _poly_from(data[12 : 12 + d * 8], d)
    c1 = _poly_from(data[12 + d * 8 :], d)
    if c0.max(initial=0) >= params.coeff_modulus or c1.max(initial=0) >= params.coeff_modulus:
        raise ValueError("ciphertext coefficients exceed the modulus")
    return Ciphertext(c0=c0, c1=c1, level=level, params_hash=params.params_hash)


def serialize_public_key(pk: PublicKey) -> bytes:
    return pk.params_hash + _poly_bytes(pk.p0) + _poly_bytes(pk.p1)


def deserialize_public_key(data: bytes, params: EncryptionParams) -> PublicKey:
    d = params.degree
    if len(data) != 8 + 2 * d * 8:
        raise ValueError("public key blob has wrong length")
    if data[:8] != params.params_hash:
        raise ValueError("public key was produced under different parameters")
    p0 = _poly_from(data[8 : 8 + d * 8], d)
    p1 = _poly_from(data[8 + d * 8 :], d)
    ctx = params.cipher_ntt
    return PublicKey(
        p0=p0, p1=p1, p0_hat=ctx.forward(p0), p1_hat=ctx.forward(p1),
        params_hash=params.params_hash,
    )


def serialize_secret_key(sk: SecretKey) -> bytes:
    return sk.params_hash + _poly_bytes(sk.poly)


def deserialize_secret_key(data: bytes, params: EncryptionParams) -> SecretKey:
    d = params.degree
    if len(data) != 8 + d * 8:
        raise ValueError("secret key blob has wrong length")
    if data[:8] != params.params_hash:
        raise ValueError("secret key was produced under different parameters")
    poly = _poly_from(data[8:], d)
    return SecretKey(
        poly=poly, poly_hat=params.cipher_ntt.forward(poly),
        params_hash=params.params_hash,
    )
