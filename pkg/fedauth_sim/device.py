# The simulated user device: biometric gate, sealed credential storage, FIDO-style
# keys and behavioral signal emission. Also the user principal that owns devices.

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from . import keys
from .errors import (
    AccountLocked, AuthenticationFailed, GateLocked, GateLockout, NoCredential, NotFound,
    ReplayDetected)
from .identity import ConsentPolicy, Decision, evaluate_consent
from .simnet import Actor, note, operation
from .utils import b64decode, b64encode, canonical_json


logger = logging.getLogger(__name__)


class TeeGrade(enum.Enum):
    SOFTWARE = "Software"
    TEE = "Tee"


class SealedStore:
    """Credential storage modeled on a TEE: entries are AES-GCM blobs under a device-local key.

    The seal key never leaves this object; only an adversary holding the
    HardwareAttack capability gets at it (see hardware_extract).
    """

    def __init__(self, entropy):
        self._entropy = entropy
        self._seal_key = entropy.token_bytes(32)
        self.entries = {}

    def seal_blob(self, credential_id, plaintext):
        self.entries[credential_id] = keys.seal(
            self._seal_key, plaintext, credential_id.encode("utf-8"), self._entropy)

    def unseal_blob(self, credential_id):
        try:
            blob = self.entries[credential_id]
        except KeyError:
            raise NotFound(f"No sealed entry {credential_id!r}")
        return keys.unseal(self._seal_key, blob, credential_id.encode("utf-8"))

    def remove(self, credential_id):
        self.entries.pop(credential_id, None)

    def export(self):
        return {cid: b64encode(blob) for cid, blob in sorted(self.entries.items())}

    def hardware_extract(self):
        """Everything a hardware attacker can read: the seal key and every plaintext"""
        return self._seal_key, {cid: self.unseal_blob(cid) for cid in self.entries}


def assertion_bytes(rp_id, account_id, credential_id, challenge, channel_binding, counter):
    return canonical_json({
        "rp": rp_id, "account": account_id, "credential": credential_id,
        "challenge": challenge, "origin": channel_binding, "counter": counter,
    })


@dataclass(frozen=True)
class Assertion:
    rp_id: str
    account_id: str
    credential_id: str
    challenge: str
    channel_binding: str
    counter: int
    signature: bytes

    def signed_bytes(self):
        return assertion_bytes(self.rp_id, self.account_id, self.credential_id,
                               self.challenge, self.channel_binding, self.counter)

    def to_payload(self):
        return {"rp": self.rp_id, "account": self.account_id, "credential": self.credential_id,
                "challenge": self.challenge, "origin": self.channel_binding,
                "counter": self.counter, "signature": b64encode(self.signature)}

    @classmethod
    def from_payload(cls, payload):
        try:
            return cls(
                rp_id=payload["rp"], account_id=payload["account"],
                credential_id=payload["credential"], challenge=payload["challenge"],
                channel_binding=payload["origin"], counter=int(payload["counter"]),
                signature=b64decode(payload["signature"]))
        except (KeyError, TypeError, ValueError):
            raise AuthenticationFailed("Malformed assertion")


@dataclass(frozen=True)
class RegistrationMessage:
    rp_id: str
    account_id: str
    device_id: str
    credential_id: str
    public_key: bytes
    challenge: str
    tee_grade: TeeGrade
    signature: bytes

    def signed_bytes(self):
        return canonical_json({
            "rp": self.rp_id, "account": self.account_id, "device": self.device_id,
            "credential": self.credential_id, "public_key": b64encode(self.public_key),
            "challenge": self.challenge, "tee_grade": self.tee_grade.value,
        })

    def to_payload(self):
        return {"rp": self.rp_id, "account": self.account_id, "device": self.device_id,
                "credential": self.credential_id, "public_key": b64encode(self.public_key),
                "challenge": self.challenge, "tee_grade": self.tee_grade.value,
                "signature": b64encode(self.signature)}

    @classmethod
    def from_payload(cls, payload):
        try:
            return cls(
                rp_id=payload["rp"], account_id=payload["account"], device_id=payload["device"],
                credential_id=payload["credential"], public_key=b64decode(payload["public_key"]),
                challenge=payload["challenge"], tee_grade=TeeGrade(payload["tee_grade"]),
                signature=b64decode(payload["signature"]))
        except (KeyError, TypeError, ValueError):
            raise AuthenticationFailed("Malformed registration")


@dataclass(frozen=True)
class BehavioralRecord:
    device_id: str
    captured_at: float
    features: tuple

    def to_payload(self):
        return {"device": self.device_id, "captured_at": self.captured_at,
                "features": list(self.features)}

    @classmethod
    def from_payload(cls, payload):
        return cls(device_id=payload["device"], captured_at=float(payload["captured_at"]),
                   features=tuple(float(x) for x in payload["features"]))


@dataclass(frozen=True)
class BehaviorGenerator:
    """Independent Gaussian per feature (mean, standard deviation)"""
    name: str
    means: tuple
    stds: tuple

    @property
    def dimension(self):
        return len(self.means)

    @classmethod
    def default(cls, name="owner", dimension=8):
        means = tuple(float(10 + 5 * i) for i in range(dimension))
        stds = tuple(float(1 + i % 3) for i in range(dimension))
        return cls(name, means, stds)

    @classmethod
    def from_config(cls, name, config):
        means = tuple(float(m) for m in config["means"])
        stds = tuple(float(s) for s in config["stds"])
        if len(means) != len(stds) or any(s <= 0 for s in stds):
            raise ValueError(f"Invalid behavior generator {name!r}")
        return cls(name, means, stds)

    def impostor(self, shift_sigmas=5.0):
        """Same spread, every mean shifted by shift_sigmas standard deviations"""
        means = tuple(m + shift_sigmas * s for m, s in zip(self.means, self.stds))
        return BehaviorGenerator(f"{self.name}-impostor", means, self.stds)

    def sample(self, rng, count):
        return rng.normal(loc=np.array(self.means), scale=np.array(self.stds),
                          size=(count, self.dimension))


@dataclass
class KeyHandle:
    credential_id: str
    rp_id: str
    account_id: str
    public_key: bytes
    counter: int = 0


class UserAgent(Actor):
    """The human user: owns devices, a consent policy and the secrets they remember"""

    def __init__(self, sim, user_id, display_name="", backup_password=None, msisdn=None):
        super().__init__(sim, user_id)
        self.display_name = display_name or user_id
        self.consent_policy = ConsentPolicy(owner=user_id)
        self.backup_password = backup_password
        self.baa_passwords = {}
        self.msisdn = msisdn
        self.devices = []

    def consent_decisions(self, attributes, audience):
        return {name: evaluate_consent(self.consent_policy, name, audience, self.now,
                                       self.sim.schema).value
                for name in attributes}


class UserDevice(Actor):
    def __init__(self, sim, device_id, owner, tee_grade=TeeGrade.SOFTWARE, msisdn=None):
        super().__init__(sim, device_id)
        self.owner = owner
        self.tee_grade = TeeGrade(tee_grade)
        self.msisdn = msisdn
        self.sealed_store = SealedStore(sim.entropy)
        self.key_registry = {}
        self.unlocked_until = None
        self.gate_failures = 0
        self.gate_lockout = False
        self.amm_locked = False
        self.stolen = False
        self.biometric_oracle = None  # scenario may override; None means owner always matches
        self.origin = f"app://{device_id}"
        self.wallet = []
        self.sms_inbox = []
        self.pending = {}
        self.answered = set()
        self.granted = set()
        self.idc = None
        self.baa = None
        self._emissions = 0

    @property
    def gate(self):
        if self.is_unlocked():
            return ("Unlocked", self.unlocked_until)
        return ("Locked", None)

    def is_unlocked(self, now=None):
        now = self.now if now is None else now
        return self.unlocked_until is not None and now < self.unlocked_until

    @operation()
    def unlock_gate(self, biometric_match, now=None):
        now = self.now if now is None else now
        note(device=self.id)
        if self.amm_locked:
            raise AccountLocked(f"Device {self.id} is locked by its owner")
        if self.gate_lockout:
            raise GateLockout(f"Device {self.id} gate is locked out")
        if biometric_match:
            self.gate_failures = 0
            self.unlocked_until = now + self.settings["gate_unlock_window"]
            note(unlocked_until=self.unlocked_until)
            return self.gate

        self.gate_failures += 1
        note(failures=self.gate_failures)
        self._report_gate_failure()
        if self.gate_failures >= self.settings["gate_max_failures"]:
            self.gate_lockout = True
            self.unlocked_until = None
            logger.warning("Device %s gate locked out after %d failures", self.id, self.gate_failures)
            raise GateLockout(f"Device {self.id} gate is locked out")
        return self.gate

    def user_gesture(self):
        """Biometric gesture by whoever holds the device"""
        match = not self.stolen if self.biometric_oracle is None else bool(self.biometric_oracle())
        return self.unlock_gate(match)

    def lock_gate(self):
        self.unlocked_until = None

    def reset_gate(self):
        self.gate_failures = 0
        self.gate_lockout = False

    def _report_gate_failure(self):
        if self.idc is not None:
            self.send(self.idc, "amm.failure", {"user": self.owner, "device": self.id, "kind": "gate"})

    def _require_unlocked(self):
        if not self.is_unlocked():
            raise GateLocked(f"Device {self.id} gate is locked")

    @operation()
    def enroll_device_key(self, rp_id, account_id, challenge):
        self._require_unlocked()
        seed = keys.new_signing_seed(self.sim.entropy)
        private_key = keys.signing_key_from_seed(seed)
        credential_id = "cred-" + self.sim.entropy.token_hex(8)
        self.sealed_store.seal_blob(credential_id, seed)
        public_key = keys.public_key_bytes(private_key)
        old = self.key_registry.get((rp_id, account_id))
        if old is not None:
            self.sealed_store.remove(old.credential_id)
        self.key_registry[(rp_id, account_id)] = KeyHandle(credential_id, rp_id, account_id, public_key)
        unsigned = RegistrationMessage(rp_id, account_id, self.id, credential_id, public_key,
                                       challenge, self.tee_grade, b"")
        note(rp=rp_id, account=account_id, credential=credential_id)
        return RegistrationMessage(rp_id, account_id, self.id, credential_id, public_key,
                                   challenge, self.tee_grade, private_key.sign(unsigned.signed_bytes()))

    @operation()
    def sign_assertion(self, rp_id, account_id, challenge, channel_binding):
        self._require_unlocked()
        handle = self.key_registry.get((rp_id, account_id))
        if handle is None:
            raise NoCredential(f"No key for {account_id!r} at {rp_id!r} on {self.id}")
        private_key = keys.signing_key_from_seed(self.sealed_store.unseal_blob(handle.credential_id))
        handle.counter += 1
        signature = private_key.sign(assertion_bytes(
            rp_id, account_id, handle.credential_id, challenge, channel_binding, handle.counter))
        note(rp=rp_id, credential=handle.credential_id, counter=handle.counter)
        return Assertion(rp_id, account_id, handle.credential_id, challenge, channel_binding,
                         handle.counter, signature)

    def seal_blob(self, credential_id, plaintext):
        self.sealed_store.seal_blob(credential_id, plaintext)

    def unseal_blob(self, credential_id):
        return self.sealed_store.unseal_blob(credential_id)

    def forget_key(self, rp_id, account_id):
        handle = self.key_registry.pop((rp_id, account_id), None)
        if handle is not None:
            self.sealed_store.remove(handle.credential_id)

    @operation()
    def emit_behavior(self, generator, count, start=None, interval=1.0):
        """Sample count records and stream each straight to the associated BAA.

        Nothing is kept on the device; the returned list is the caller's copy.
        """
        start = self.now if start is None else start
        self._emissions += 1
        rng = self.sim.entropy.generator(f"{self.id}:{generator.name}:{self._emissions}")
        samples = generator.sample(rng, count)
        records = [BehavioralRecord(self.id, start + i * interval,
                                    tuple(round(float(x), 9) for x in row))
                   for i, row in enumerate(samples)]
        if self.baa is not None:
            for record in records:
                self.send(self.baa, "behavior.record", record.to_payload())
        note(generator=generator.name, count=count, baa=self.baa)
        return records

    def export(self):
        """Serializable device backup: public material and sealed blobs only"""
        return {
            "device": self.id, "owner": self.owner, "tee_grade": self.tee_grade.value,
            "keys": [{"rp": h.rp_id, "account": h.account_id, "credential": h.credential_id,
                      "public_key": b64encode(h.public_key), "counter": h.counter}
                     for _, h in sorted(self.key_registry.items())],
            "sealed": self.sealed_store.export(),
        }

    # Bus handlers

    def on_fido_challenge(self, envelope):
        flow = envelope.payload["flow"]
        if flow in self.pending or flow in self.answered:
            raise ReplayDetected(f"Flow {flow!r} was already challenged")
        self.pending[flow] = envelope.payload
        return {"accepted": True}

    on_password_challenge = on_fido_challenge
    on_pabac_challenge = on_fido_challenge

    def on_access_granted(self, envelope):
        flow = envelope.payload["flow"]
        if flow in self.granted:
            raise ReplayDetected(f"Flow {flow!r} was already granted")
        self.granted.add(flow)
        return {"accepted": True}

    def on_sms_deliver(self, envelope):
        self.sms_inbox.append(envelope.payload)
        return {"accepted": True}

    def on_amm_lock(self, envelope):
        self.amm_locked = True
        self.lock_gate()
        return {"accepted": True}

    def on_amm_unlock(self, envelope):
        self.amm_locked = False
        return {"accepted": True}

    def take_challenge(self, flow):
        try:
            challenge = self.pending.pop(flow)
        except KeyError:
            raise NotFound(f"No pending challenge for flow {flow!r}")
        self.answered.add(flow)
        return challenge

    def answer_challenge(self, flow, consent=None):
        """Sign the pending FIDO challenge and send it, with the owner's consent, to the IdP"""
        challenge = self.take_challenge(flow)
        rp_id = challenge["idp"]
        assertion = self.sign_assertion(rp_id, self.owner, challenge["nonce"], challenge["origin"])
        if consent is None:
            user = self.sim.bus.actor(self.owner)
            consent = user.consent_decisions(challenge["requested"], challenge["sp"])
        return self.send(rp_id, "fido.response", {
            "flow": flow, "request": challenge["request"],
            "assertion": assertion.to_payload(), "consent": consent})

    def latest_otp(self):
        return self.sms_inbox[-1]["otp"] if self.sms_inbox else None


def consent_all(attributes, allow=True):
    value = (Decision.ALLOW if allow else Decision.DENY).value
    return {name: value for name in attributes}
