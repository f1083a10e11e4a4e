"""Paillier additively homomorphic encryption and a fixed-point codec.

Plaintexts live in the ring Z_n. Real-valued model updates enter the ring
through :func:`encode_fixed`, which scales by ``2**frac_bits`` and maps
negatives to the upper half of the ring, so homomorphic addition of
encodings is addition of the underlying reals.

Byte layouts for keys and ciphertext vectors are described in
``docs/formats.md``.
"""

from __future__ import annotations

import hashlib
import math
import random
import secrets
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import gmpy2
import numpy as np

MIN_MODULUS_BITS = 256
DEFAULT_MODULUS_BITS = 2048

_KEY_MAGIC = b"SEFLPK01"
_SECRET_MAGIC = b"SEFLSK01"
_CTV_MAGIC = b"SEFLCV01"


class KeyMismatchError(ValueError):
    """Ciphertexts or keys belong to different key pairs."""


class PlaintextRangeError(ValueError):
    """A plaintext or scalar is outside ``[0, n)``."""


class EncodingOverflowError(OverflowError):
    """A real value or decoded sum exceeds the fixed-point budget."""


def _system_rng() -> random.Random:
    return secrets.SystemRandom()


@dataclass(frozen=True)
class PublicKey:
    n: int
    g: int
    n_square: int = field(init=False, repr=False, compare=False)
    fingerprint: str = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "n_square", self.n * self.n)
        digest = hashlib.sha256(_int_bytes(self.n) + _int_bytes(self.g)).hexdigest()
        object.__setattr__(self, "fingerprint", digest[:32])

    @property
    def bits(self) -> int:
        return self.n.bit_length()


@dataclass(frozen=True)
class SecretKey:
    public_key: PublicKey
    p: int = field(repr=False)
    q: int = field(repr=False)
    lam: int = field(repr=False)
    mu: int = field(repr=False)


@dataclass(frozen=True)
class KeyPair:
    public_key: PublicKey
    secret_key: SecretKey
    modulus_bits: int


@dataclass(frozen=True)
class Ciphertext:
    """A Paillier ciphertext, ``value`` in ``[0, n**2)``."""

    value: int
    public_key: PublicKey = field(repr=False)

    @property
    def key_fingerprint(self) -> str:
        return self.public_key.fingerprint

    def __add__(self, other: "Ciphertext") -> "Ciphertext":
        return hom_add(self, other)


def _random_prime(bits: int, rng: random.Random) -> int:
    while True:
        candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(candidate))
        if p.bit_length() == bits:
            return p


def keygen(modulus_bits: int = DEFAULT_MODULUS_BITS, rng: random.Random | None = None) -> KeyPair:
    """Generate a Paillier key pair with an ``modulus_bits``-bit modulus.

    Uses the ``g = n + 1`` variant, so ``lambda = phi(n)`` and
    ``mu = phi(n)^-1 mod n``. Pass a seeded ``random.Random`` for
    reproducible test keys; the default draws from the OS.
    """
    if modulus_bits < MIN_MODULUS_BITS or modulus_bits % 2:
        raise ValueError(
            f"modulus_bits must be even and >= {MIN_MODULUS_BITS}, got {modulus_bits}"
        )
    rng = rng or _system_rng()
    half = modulus_bits // 2
    while True:
        p = _random_prime(half, rng)
        q = _random_prime(half, rng)
        if p == q:
            continue
        n = p * q
        if n.bit_length() == modulus_bits and math.gcd(n, (p - 1) * (q - 1)) == 1:
            break
    pk = PublicKey(n=n, g=n + 1)
    phi = (p - 1) * (q - 1)
    sk = SecretKey(public_key=pk, p=p, q=q, lam=phi, mu=int(gmpy2.invert(phi, n)))
    return KeyPair(public_key=pk, secret_key=sk, modulus_bits=modulus_bits)


def _check_same_key(a: PublicKey, b: PublicKey) -> None:
    if a.fingerprint != b.fingerprint:
        raise KeyMismatchError(f"key fingerprint mismatch: {a.fingerprint} != {b.fingerprint}")


def _random_unit(n: int, rng: random.Random) -> int:
    while True:
        r = rng.randrange(1, n)
        if math.gcd(r, n) == 1:
            return r


def encrypt(pk: PublicKey, m: int, rng: random.Random | None = None) -> Ciphertext:
    if not 0 <= m < pk.n:
        raise PlaintextRangeError(f"plaintext outside [0, n): {m}")
    rng = rng or _system_rng()
    r = _random_unit(pk.n, rng)
    # (n+1)^m = 1 + m*n mod n^2
    c = (1 + m * pk.n) % pk.n_square * int(gmpy2.powmod(r, pk.n, pk.n_square)) % pk.n_square
    return Ciphertext(value=c, public_key=pk)


def decrypt(sk: SecretKey, c: Ciphertext) -> int:
    pk = sk.public_key
    _check_same_key(pk, c.public_key)
    u = int(gmpy2.powmod(c.value, sk.lam, pk.n_square))
    return (u - 1) // pk.n * sk.mu % pk.n


def hom_add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """Ciphertext whose plaintext is ``(m1 + m2) mod n``."""
    _check_same_key(c1.public_key, c2.public_key)
    pk = c1.public_key
    return Ciphertext(value=c1.value * c2.value % pk.n_square, public_key=pk)


def hom_scale(c: Ciphertext, k: int) -> Ciphertext:
    """Ciphertext whose plaintext is ``(k * m) mod n``."""
    pk = c.public_key
    if not 0 <= k < pk.n:
        raise PlaintextRangeError(f"scalar outside [0, n): {k}")
    return Ciphertext(value=int(gmpy2.powmod(c.value, k, pk.n_square)), public_key=pk)


# ---------------------------------------------------------------------------
# Fixed-point codec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedPointParams:
    """Real <-> ring encoding contract shared by every party.

    Encoded magnitudes stay below ``2**frac_bits * max_magnitude``; sums of
    up to ``2**slack_bits`` encodings are guaranteed not to wrap.
    """

    frac_bits: int = 32
    max_magnitude: float = 2.0**10
    slack_bits: int = 20

    def __post_init__(self):
        if self.frac_bits < 0 or self.slack_bits < 0:
            raise ValueError("frac_bits and slack_bits must be non-negative")
        if not self.max_magnitude > 0:
            raise ValueError("max_magnitude must be positive")

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def resolution(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def sum_bound(self) -> int:
        """Largest signed ring value a legitimate sum may reach."""
        return int(math.ceil(self.max_magnitude * self.scale)) << self.slack_bits

    def check_modulus(self, n: int) -> None:
        if not self.sum_bound < n // 2:
            raise ValueError(
                f"fixed-point budget 2^{self.frac_bits} * {self.max_magnitude} * 2^{self.slack_bits} "
                f"does not fit below n/2 for a {n.bit_length()}-bit modulus"
            )


def encode_fixed(x: float, params: FixedPointParams, n: int) -> int:
    if not math.isfinite(x) or abs(x) > params.max_magnitude:
        raise EncodingOverflowError(f"|{x}| exceeds max_magnitude {params.max_magnitude}")
    return round(x * params.scale) % n


def to_signed(v: int, n: int) -> int:
    """Interpret a ring element as a signed integer (upper half negative)."""
    v %= n
    return v - n if v > n // 2 else v


def decode_fixed(v: int, params: FixedPointParams, n: int) -> float:
    """Decode a ring element, rejecting anything outside the summation budget."""
    s = to_signed(v, n)
    if abs(s) > params.sum_bound:
        raise EncodingOverflowError(
            f"decoded value {s} exceeds the summation budget; wraparound suspected"
        )
    return s / params.scale


def encode_vector(v: Iterable[float], params: FixedPointParams, n: int) -> list[int]:
    return [encode_fixed(float(x), params, n) for x in np.ravel(np.asarray(v, dtype=float))]


def decode_vector(v: Sequence[int], params: FixedPointParams, n: int) -> np.ndarray:
    return np.array([decode_fixed(x, params, n) for x in v], dtype=float)


def encrypt_vector(
    pk: PublicKey,
    v: Iterable[float],
    params: FixedPointParams,
    rng: random.Random | None = None,
) -> list[Ciphertext]:
    rng = rng or _system_rng()
    return [encrypt(pk, m, rng) for m in encode_vector(v, params, pk.n)]


def decrypt_vector(sk: SecretKey, cs: Sequence[Ciphertext], params: FixedPointParams) -> np.ndarray:
    n = sk.public_key.n
    return decode_vector([decrypt(sk, c) for c in cs], params, n)


def encrypt_ints(pk: PublicKey, ms: Iterable[int], rng: random.Random | None = None) -> list[Ciphertext]:
    rng = rng or _system_rng()
    return [encrypt(pk, m, rng) for m in ms]


def decrypt_ints(sk: SecretKey, cs: Sequence[Ciphertext]) -> list[int]:
    return [decrypt(sk, c) for c in cs]


def hom_add_vector(a: Sequence[Ciphertext], b: Sequence[Ciphertext]) -> list[Ciphertext]:
    if len(a) != len(b):
        raise ValueError(f"vector length mismatch: {len(a)} != {len(b)}")
    return [hom_add(x, y) for x, y in zip(a, b)]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _int_bytes(x: int) -> bytes:
    return x.to_bytes(max(1, (x.bit_length() + 7) // 8), "big")


def _pack_int(x: int) -> bytes:
    raw = _int_bytes(x)
    return struct.pack(">I", len(raw)) + raw


def _unpack_int(buf: bytes, offset: int) -> tuple[int, int]:
    (length,) = struct.unpack_from(">I", buf, offset)
    offset += 4
    end = offset + length
    if end > len(buf):
        raise ValueError("truncated big-integer field")
    return int.from_bytes(buf[offset:end], "big"), end


def _check_magic(buf: bytes, magic: bytes) -> int:
    if buf[: len(magic)] != magic:
        raise ValueError(f"bad magic, expected {magic!r}")
    return len(magic)


def public_key_to_bytes(pk: PublicKey) -> bytes:
    return _KEY_MAGIC + _pack_int(pk.n) + _pack_int(pk.g)


def public_key_from_bytes(buf: bytes) -> PublicKey:
    off = _check_magic(buf, _KEY_MAGIC)
    n, off = _unpack_int(buf, off)
    g, off = _unpack_int(buf, off)
    return PublicKey(n=n, g=g)


def secret_key_to_bytes(sk: SecretKey) -> bytes:
    pk = sk.public_key
    return _SECRET_MAGIC + b"".join(_pack_int(x) for x in (pk.n, pk.g, sk.p, sk.q, sk.lam, sk.mu))


def secret_key_from_bytes(buf: bytes) -> SecretKey:
    off = _check_magic(buf, _SECRET_MAGIC)
    vals = []
    for _ in range(6):
        x, off = _unpack_int(buf, off)
        vals.append(x)
    n, g, p, q, lam, mu = vals
    return SecretKey(public_key=PublicKey(n=n, g=g), p=p, q=q, lam=lam, mu=mu)


def ciphertexts_to_bytes(cs: Sequence[Ciphertext]) -> bytes:
    if not cs:
        raise ValueError("cannot serialize an empty ciphertext vector")
    pk = cs[0].public_key
    for c in cs:
        _check_same_key(pk, c.public_key)
    fp = bytes.fromhex(pk.fingerprint)
    body = b"".join(_pack_int(c.value) for c in cs)
    return _CTV_MAGIC + fp + struct.pack(">I", len(cs)) + body


def ciphertexts_from_bytes(buf: bytes, pk: PublicKey) -> list[Ciphertext]:
    off = _check_magic(buf, _CTV_MAGIC)
    fp = buf[off : off + 16].hex()
    off += 16
    if fp != pk.fingerprint:
        raise KeyMismatchError(f"ciphertext file fingerprint {fp} does not match key {pk.fingerprint}")
    (count,) = struct.unpack_from(">I", buf, off)
    off += 4
    out = []
    for _ in range(count):
        value, off = _unpack_int(buf, off)
        if not 0 <= value < pk.n_square:
            raise ValueError("ciphertext value outside [0, n^2)")
        out.append(Ciphertext(value=value, public_key=pk))
    if off != len(buf):
        raise ValueError("trailing bytes after ciphertext vector")
    return out
