"""Negacyclic polynomial arithmetic over Z_p[x]/(x^n + 1).

Multiplication runs through an iterative radix-2 number-theoretic transform
with precomputed stage tables, vectorized over numpy uint64. The modulus must
stay below 2**32 so that every product of two residues fits in uint64 without
overflow; contexts refuse larger primes.

The negacyclic wrap (x^n = -1) is obtained the usual way: coefficients are
twisted by powers of a primitive 2n-th root of unity psi, a plain cyclic NTT
of size n is applied with omega = psi**2, and the inverse transform untwists
and folds in the 1/n scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_MODULUS_BITS = 32

# Deterministic Miller-Rabin witness set, valid for all n < 3.3e24.
_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin primality test for n < 3.3e24."""
    if n < 2:
        return False
    for p in _MR_WITNESSES:
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_WITNESSES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def largest_prime_below(limit: int, multiple: int) -> int:
    """Largest prime p < limit with p congruent to 1 modulo `multiple`."""
    if limit <= 2 or multiple < 1:
        raise ValueError("need limit > 2 and multiple >= 1")
    p = ((limit - 2) // multiple) * multiple + 1
    while p > 2:
        if is_prime(p):
            return p
        p -= multiple
    raise ValueError(f"no prime below {limit} congruent to 1 mod {multiple}")


def primitive_2nth_root(p: int, two_n: int) -> int:
    """A primitive 2n-th root of unity modulo the prime p.

    Requires 2n to divide p - 1. The returned psi satisfies psi**n == -1
    (mod p), which is exactly the property the negacyclic twist needs.
    """
    if (p - 1) % two_n != 0:
        raise ValueError(f"{two_n} does not divide {p} - 1")
    n = two_n // 2
    for g in range(2, 1000):
        psi = pow(g, (p - 1) // two_n, p)
        if n == 0:
            if psi == 1:
                return psi
            continue
        if pow(psi, n, p) == p - 1:
            return psi
    raise ValueError(f"no primitive {two_n}-th root found modulo {p}")


def to_balanced(a: np.ndarray, p: int) -> np.ndarray:
    """Map residues mod p (odd) to signed representatives in [-(p-1)/2, (p-1)/2]."""
    a = np.asarray(a, dtype=np.int64)
    half = (p - 1) // 2
    return np.where(a > half, a - p, a)


def from_balanced(a: np.ndarray, p: int) -> np.ndarray:
    """Map signed representatives back to residues in [0, p)."""
    return (np.asarray(a, dtype=np.int64) % p).astype(np.uint64)


def _bit_reverse_permutation(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.uint64)
    rev = np.zeros(n, dtype=np.uint64)
    for _ in range(bits):
        rev = (rev << np.uint64(1)) | (idx & np.uint64(1))
        idx >>= np.uint64(1)
    return rev.astype(np.intp)


@dataclass
class NttContext:
    """Precomputed tables for size-n negacyclic NTTs modulo a prime p.

    Attributes:
        n: Transform size; a power of two.
        p: Prime modulus with p = 1 (mod 2n) and p < 2**32.
        psi: Primitive 2n-th root of unity used for the negacyclic twist.
    """

    n: int
    p: int
    psi: int
    _bitrev: np.ndarray = field(repr=False)
    _fwd_tables: list[np.ndarray] = field(repr=False)
    _inv_tables: list[np.ndarray] = field(repr=False)
    _twist: np.ndarray = field(repr=False)
    _untwist: np.ndarray = field(repr=False)

    @classmethod
    def create(cls, p: int, n: int) -> "NttContext":
        if n < 2 or n & (n - 1):
            raise ValueError(f"transform size {n} is not a power of two >= 2")
        if p.bit_length() > MAX_MODULUS_BITS:
            raise ValueError(f"modulus {p} exceeds {MAX_MODULUS_BITS} bits")
        if not is_prime(p):
            raise ValueError(f"modulus {p} is not prime")
        if (p - 1) % (2 * n) != 0:
            raise ValueError(f"prime {p} is not 1 mod {2 * n}")
        psi = primitive_2nth_root(p, 2 * n)
        omega = psi * psi % p
        omega_inv = pow(omega, p - 2, p)
        n_inv = pow(n, p - 2, p)
        psi_inv = pow(psi, p - 2, p)

        fwd_tables, inv_tables = [], []
        size = 2
        while size <= n:
            step = n // size
            js = np.arange(size // 2)
            fwd_tables.append(
                np.array([pow(omega, step * int(j), p) for j in js], dtype=np.uint64)
            )
            inv_tables.append(
                np.array([pow(omega_inv, step * int(j), p) for j in js], dtype=np.uint64)
            )
            size *= 2

        twist = np.array([pow(psi, j, p) for j in range(n)], dtype=np.uint64)
        # Fold the 1/n scale of the inverse transform into the untwist table.
        untwist = np.array(
            [pow(psi_inv, j, p) * n_inv % p for j in range(n)], dtype=np.uint64
        )
        return cls(
            n=n,
            p=p,
            psi=psi,
            _bitrev=_bit_reverse_permutation(n),
            _fwd_tables=fwd_tables,
            _inv_tables=inv_tables,
            _twist=twist,
            _untwist=untwist,
        )

    def _cyclic(self, a: np.ndarray, tables: list[np.ndarray]) -> np.ndarray:
        p = np.uint64(self.p)
        out = a[self._bitrev]
        size = 2
        for tab in tables:
            half = size // 2
            view = out.reshape(-1, size)
            t = view[:, half:] * tab % p
            u = view[:, :half]
            view[:, half:] = (u + (p - t)) % p
            view[:, :half] = (u + t) % p
            size *= 2
        return out

    def forward(self, a: np.ndarray) -> np.ndarray:
        """Negacyclic forward transform of a length-n uint64 coefficient vector."""
        if a.shape != (self.n,):
            raise ValueError(f"expected shape ({self.n},), got {a.shape}")
        return self._cyclic(a * self._twist % np.uint64(self.p), self._fwd_tables)

    def inverse(self, a_hat: np.ndarray) -> np.ndarray:
        """Inverse of `forward`; returns coefficients in [0, p)."""
        if a_hat.shape != (self.n,):
            raise ValueError(f"expected shape ({self.n},), got {a_hat.shape}")
        return self._cyclic(a_hat, self._inv_tables) * self._untwist % np.uint64(self.p)

    def pointwise(self, a_hat: np.ndarray, b_hat: np.ndarray) -> np.ndarray:
        """Product in the transform domain; equals negacyclic convolution."""
        return a_hat * b_hat % np.uint64(self.p)

    def multiply(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Negacyclic product of two coefficient vectors mod (x^n + 1, p)."""
        return self.inverse(self.pointwise(self.forward(a), self.forward(b)))


_CONTEXT_CACHE: dict[tuple[int, int], NttContext] = {}


def get_context(p: int, n: int) -> NttContext:
    """Shared, lazily built NttContext for (p, n)."""
    key = (p, n)
    if key not in _CONTEXT_CACHE:
        _CONTEXT_CACHE[key] = NttContext.create(p, n)
    return _CONTEXT_CACHE[key]
