# Cryptographic primitives: device/token signatures, sealing, password hashing, blind RSA

import hashlib
import logging

import sympy
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt

from .errors import IntegrityError
from .utils import secure_equal


logger = logging.getLogger(__name__)

SEED_BYTES = 32
AEAD_NONCE_BYTES = 12
RSA_PUBLIC_EXPONENT = 65537


# Ed25519 (a Schnorr-family scheme with deterministic signing)

def new_signing_seed(entropy):
    return entropy.token_bytes(SEED_BYTES)


def signing_key_from_seed(seed):
    return Ed25519PrivateKey.from_private_bytes(seed)


def public_key_bytes(private_key):
    return private_key.public_key().public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw)


def verify_signature(public_key, signature, data):
    """True iff signature is a valid Ed25519 signature of data under raw public_key bytes"""
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


class SigningIdentity:
    """An actor's long-term Ed25519 key (IdPs sign tokens, authorities sign documents)"""

    def __init__(self, entropy):
        self._private_key = signing_key_from_seed(new_signing_seed(entropy))
        self.public_key = public_key_bytes(self._private_key)

    def sign(self, data):
        return self._private_key.sign(data)


# Authenticated sealing

def seal(key, plaintext, aad, entropy):
    """AES-GCM encrypt plaintext; returns nonce || ciphertext"""
    nonce = entropy.token_bytes(AEAD_NONCE_BYTES)
    return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)


def unseal(key, blob, aad):
    """Inverse of seal. Raises IntegrityError if the blob was modified."""
    nonce, ciphertext = blob[:AEAD_NONCE_BYTES], blob[AEAD_NONCE_BYTES:]
    try:
        return AESGCM(key).decrypt(nonce, ciphertext, aad)
    except (InvalidTag, ValueError):
        raise IntegrityError("Sealed blob failed authentication")


# Memory-hard password hashing

def derive_key(password, salt, settings, length=32):
    kdf = Scrypt(salt=salt, length=length,
                 n=settings["scrypt_n"], r=settings["scrypt_r"], p=settings["scrypt_p"])
    return kdf.derive(password.encode("utf-8"))


class PasswordHash:
    """Salted scrypt hash of a password"""

    def __init__(self, salt, digest):
        self.salt = salt
        self.digest = digest

    @classmethod
    def create(cls, password, settings, entropy):
        salt = entropy.token_bytes(16)
        return cls(salt, derive_key(password, salt, settings))

    def verify(self, password, settings):
        return secure_equal(derive_key(password, self.salt, settings), self.digest)


# RSA blind signatures

def _random_prime(bits, entropy):
    while True:
        candidate = entropy.randbits(bits) | (3 << (bits - 2)) | 1
        prime = sympy.nextprime(candidate)
        if prime.bit_length() == bits and (prime - 1) % RSA_PUBLIC_EXPONENT:
            return int(prime)


def generate_blind_signing_key(modulus_bits, entropy):
    """Return an RSA private key whose primes come from the seeded entropy source.

    (cryptography's own generator can't be seeded, and issuer keys must be
    reproducible from the scenario seed.)
    """
    half = modulus_bits // 2
    p = _random_prime(half, entropy)
    q = _random_prime(half, entropy)
    while q == p:
        q = _random_prime(half, entropy)
    n = p * q
    d = pow(RSA_PUBLIC_EXPONENT, -1, (p - 1) * (q - 1))
    numbers = rsa.RSAPrivateNumbers(
        p=p, q=q, d=d,
        dmp1=rsa.rsa_crt_dmp1(d, p),
        dmq1=rsa.rsa_crt_dmq1(d, q),
        iqmp=rsa.rsa_crt_iqmp(p, q),
        public_numbers=rsa.RSAPublicNumbers(RSA_PUBLIC_EXPONENT, n))
    return numbers.private_key()


def full_domain_hash(data, modulus):
    """Map data into Z_n by expanding SHA-512 output to the modulus size"""
    length = (modulus.bit_length() + 7) // 8 + 16
    output = b""
    counter = 0
    while len(output) < length:
        output += hashlib.sha512(counter.to_bytes(4, "big") + data).digest()
        counter += 1
    return int.from_bytes(output[:length], "big") % modulus


def blind_sign(private_key, blinded):
    """Raw RSA signature (CRT) over an already-blinded integer"""
    numbers = private_key.private_numbers()
    n = numbers.public_numbers.n
    if not 0 < blinded < n:
        raise ValueError("Blinded message out of range")
    s_p = pow(blinded, numbers.dmp1, numbers.p)
    s_q = pow(blinded, numbers.dmq1, numbers.q)
    h = (numbers.iqmp * (s_p - s_q)) % numbers.p
    return s_q + h * numbers.q


def blind(message, public_numbers, entropy):
    """Return (blinded message, blinding factor r) with m' = m * r^e mod n"""
    n, e = public_numbers.n, public_numbers.e
    while True:
        r = entropy.randbelow(n)
        if r > 1 and sympy.igcd(r, n) == 1:
            return (message * pow(r, e, n)) % n, r


def unblind(blinded_signature, r, public_numbers):
    n = public_numbers.n
    return (blinded_signature * pow(r, -1, n)) % n


def verify_rsa(signature, message, public_numbers):
    return 0 < signature < public_numbers.n and pow(signature, public_numbers.e, public_numbers.n) == message
