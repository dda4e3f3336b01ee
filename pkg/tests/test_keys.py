from unittest import TestCase

from fedauth_sim import keys
from fedauth_sim.config import load_settings
from fedauth_sim.entropy import Entropy
from fedauth_sim.errors import IntegrityError


class TestSigning(TestCase):
    def test_seed_determines_key(self):
        seed = keys.new_signing_seed(Entropy(1))
        self.assertEqual(len(seed), keys.SEED_BYTES)
        first = keys.public_key_bytes(keys.signing_key_from_seed(seed))
        second = keys.public_key_bytes(keys.signing_key_from_seed(seed))
        self.assertEqual(first, second)

    def test_verify_signature(self):
        identity = keys.SigningIdentity(Entropy(1))
        signature = identity.sign(b"token")
        self.assertTrue(keys.verify_signature(identity.public_key, signature, b"token"))
        self.assertFalse(keys.verify_signature(identity.public_key, signature, b"tokeN"))
        self.assertFalse(keys.verify_signature(b"short", signature, b"token"))
        other = keys.SigningIdentity(Entropy(2))
        self.assertFalse(keys.verify_signature(other.public_key, signature, b"token"))


class TestSealing(TestCase):
    def setUp(self):
        self.entropy = Entropy(1)
        self.key = self.entropy.token_bytes(32)

    def test_seal_unseal(self):
        blob = keys.seal(self.key, b"secret", b"c1", self.entropy)
        self.assertNotIn(b"secret", blob)
        self.assertEqual(keys.unseal(self.key, blob, b"c1"), b"secret")

    def test_tampering_detected(self):
        blob = keys.seal(self.key, b"secret", b"c1", self.entropy)
        flipped = blob[:-1] + bytes([blob[-1] ^ 1])
        cases = [
            ("ciphertext", self.key, flipped, b"c1"),
            ("aad", self.key, blob, b"c2"),
            ("key", bytes(32), blob, b"c1"),
            ("truncated", self.key, blob[:5], b"c1"),
        ]
        for name, key, data, aad in cases:
            with self.subTest(name):
                with self.assertRaises(IntegrityError):
                    keys.unseal(key, data, aad)


class TestPasswordHash(TestCase):
    def setUp(self):
        self.settings = load_settings(profile="fast")

    def test_verify(self):
        hashed = keys.PasswordHash.create("correct horse", self.settings, Entropy(1))
        self.assertEqual(len(hashed.salt), 16)
        self.assertTrue(hashed.verify("correct horse", self.settings))
        self.assertFalse(hashed.verify("correct horse ", self.settings))

    def test_salted(self):
        entropy = Entropy(1)
        first = keys.PasswordHash.create("pw", self.settings, entropy)
        second = keys.PasswordHash.create("pw", self.settings, entropy)
        self.assertNotEqual(first.digest, second.digest)


class TestBlindSignatures(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.private_key = keys.generate_blind_signing_key(1024, Entropy(3))
        cls.public_numbers = cls.private_key.public_key().public_numbers()

    def test_key_from_seed(self):
        again = keys.generate_blind_signing_key(1024, Entropy(3))
        self.assertEqual(again.public_key().public_numbers(), self.public_numbers)
        self.assertEqual(self.public_numbers.n.bit_length(), 1024)
        self.assertEqual(self.public_numbers.e, keys.RSA_PUBLIC_EXPONENT)

    def test_blind_sign_unblind(self):
        entropy = Entropy(4)
        message = keys.full_domain_hash(b"serial-1", self.public_numbers.n)
        blinded, r = keys.blind(message, self.public_numbers, entropy)
        self.assertNotEqual(blinded, message)
        signature = keys.unblind(keys.blind_sign(self.private_key, blinded), r, self.public_numbers)
        self.assertTrue(keys.verify_rsa(signature, message, self.public_numbers))
        other = keys.full_domain_hash(b"serial-2", self.public_numbers.n)
        self.assertFalse(keys.verify_rsa(signature, other, self.public_numbers))
        self.assertFalse(keys.verify_rsa(0, message, self.public_numbers))

    def test_blind_sign_range(self):
        for value in (0, self.public_numbers.n):
            with self.subTest(value=value):
                with self.assertRaises(ValueError):
                    keys.blind_sign(self.private_key, value)

    def test_full_domain_hash(self):
        n = self.public_numbers.n
        self.assertEqual(keys.full_domain_hash(b"x", n), keys.full_domain_hash(b"x", n))
        self.assertNotEqual(keys.full_domain_hash(b"x", n), keys.full_domain_hash(b"y", n))
        self.assertLess(keys.full_domain_hash(b"x", n), n)
