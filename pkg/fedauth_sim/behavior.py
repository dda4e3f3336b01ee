# Behavioral Authentication Authority: record ingestion, per-user profiles, verdicts
# released as federated tokens, and tentative access for recovering users

import collections
import enum
import logging
from dataclasses import dataclass

import numpy as np

from . import keys
from .device import BehavioralRecord
from .errors import (
    AccessDenied, FeatureDimensionError, ProfileNotTrained, RateLimited, TentativeAccessDenied,
    VerdictPending)
from .federation import IdentityProvider
from .identity import AuthFactor, FactorKind
from .simnet import note, operation


logger = logging.getLogger(__name__)


class AccessMode(enum.Enum):
    TENTATIVE = "Tentative"
    FULL = "Full"


class Verdict(enum.Enum):
    MATCH = "match"
    NO_MATCH = "no-match"
    INSUFFICIENT = "insufficient-data"


class BehavioralProfile:
    """Independent Gaussian per feature, kept as a running mean and variance (Welford)"""

    def __init__(self, user, dimension, training_minimum):
        self.user = user
        self.dimension = dimension
        self.training_minimum = training_minimum
        self.count = 0
        self.mean = np.zeros(dimension)
        self._m2 = np.zeros(dimension)
        self.trained = False

    @property
    def variance(self):
        if self.count < 2:
            return np.zeros(self.dimension)
        return self._m2 / (self.count - 1)

    @property
    def std(self):
        return np.sqrt(self.variance)

    def update(self, features):
        x = np.asarray(features, dtype=float)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self._m2 = self._m2 + delta * (x - self.mean)
        if not self.trained and self.count >= self.training_minimum:
            self.trained = True
            return True
        return False

    def within(self, features, z):
        return bool(np.all(np.abs(np.asarray(features) - self.mean) <= z * self.std))

    def snapshot(self):
        return {"user": self.user, "count": self.count, "trained": self.trained,
                "mean": self.mean.tolist(), "variance": self.variance.tolist()}


@dataclass(frozen=True)
class VerdictRequest:
    requester: str
    user: str
    boundary: float


@dataclass
class BaaAccess:
    user: str
    mode: AccessMode
    password_hash: keys.PasswordHash = None
    boundary: float = None


class BehavioralAuthority(IdentityProvider):
    def __init__(self, sim, baa_id):
        super().__init__(sim, baa_id)
        self.dimension = self.settings["baa_feature_dimension"]
        self.profiles = {}
        self.records = collections.defaultdict(list)
        self.devices = {}
        self.access = {}
        self.lockout = set()
        self.attempts = collections.defaultdict(collections.deque)
        self.verdicts = {}

    def profile(self, user):
        if user not in self.profiles:
            self.profiles[user] = BehavioralProfile(
                user, self.dimension, self.settings["baa_training_minimum"])
        return self.profiles[user]

    def enroll_backup_password(self, user, password):
        """BAA passwords may be weak; the behavioral modality carries the assurance"""
        access = self.access.setdefault(user, BaaAccess(user, AccessMode.FULL))
        access.password_hash = keys.PasswordHash.create(password, self.settings, self.sim.entropy)

    def associate_device(self, device_id, user, mode=AccessMode.FULL):
        self.devices[device_id] = (user, AccessMode(mode))

    # Ingestion and verdicts

    @operation()
    def ingest_record(self, user, record, mode):
        if len(record.features) != self.dimension:
            raise FeatureDimensionError(
                f"Expected {self.dimension} features, got {len(record.features)}")
        self.records[user].append(record)
        note(user=user, device=record.device_id, mode=AccessMode(mode).value)
        if AccessMode(mode) is not AccessMode.FULL:
            return
        profile = self.profile(user)
        if profile.update(record.features):
            logger.info("%s: profile for %r is trained", self.id, user)
            self.sim.record("profile", baa=self.id, **profile.snapshot())

    def login_boundary(self, user, requested=None):
        """Records before the user's last password login never count, whatever the requester asks"""
        access = self.access.get(user)
        floor = access.boundary if access is not None and access.boundary is not None else 0.0
        return floor if requested is None else max(float(requested), floor)

    @operation()
    def compute_verdict(self, request):
        profile = self.profiles.get(request.user)
        if profile is None or not profile.trained:
            raise ProfileNotTrained(f"No trained profile for {request.user!r}")
        boundary = self.login_boundary(request.user, request.boundary)
        window = [r for r in self.records[request.user] if r.captured_at >= boundary]
        note(user=request.user, requester=request.requester, boundary=boundary, window=len(window))
        if len(window) < self.settings["baa_min_window"]:
            return Verdict.INSUFFICIENT
        z = self.settings["baa_z"]
        fraction = sum(profile.within(r.features, z) for r in window) / len(window)
        verdict = Verdict.MATCH if fraction >= self.settings["baa_tau"] else Verdict.NO_MATCH
        self.verdicts[request.user] = (verdict, sorted({r.device_id for r in window}))
        note(verdict=verdict.value, fraction=round(fraction, 6))
        return verdict

    @operation()
    def federated_behavioral_assertion(self, requester, user, boundary=None, recovery=False):
        """Release the verdict to requester as a token with scope {behavior: ...}.

        A negative verdict on the recovery path also locks the devices that
        produced the window out of this BAA.
        """
        boundary = self.login_boundary(user, boundary)
        verdict = self.compute_verdict(VerdictRequest(requester, user, boundary))
        if verdict is Verdict.INSUFFICIENT:
            raise VerdictPending(f"Not enough records since {boundary} for {user!r}")
        if verdict is Verdict.NO_MATCH and recovery:
            for device_id in self.verdicts[user][1]:
                self.lockout.add(device_id)
                logger.warning("%s locked out device %s", self.id, device_id)
            self.sim.record("baa_lockout", baa=self.id, user=user, devices=self.verdicts[user][1])
        token = self.mint_token(requester, {"behavior": verdict.value},
                                (AuthFactor(FactorKind.BEHAVIORAL),), self._mint_value("v-", 8), None)
        note(user=user, requester=requester, verdict=verdict.value)
        return token

    # Access

    def _rate_limit(self, user):
        window = self.settings["baa_rate_window"]
        attempts = self.attempts[user]
        while attempts and attempts[0] <= self.now - window:
            attempts.popleft()
        if len(attempts) >= self.settings["baa_rate_limit"]:
            raise RateLimited(f"Too many login attempts for {user!r}")
        attempts.append(self.now)

    @operation()
    def baa_login(self, user, password, device_id=None):
        self._rate_limit(user)
        access = self.access.get(user)
        if access is None or access.password_hash is None \
                or not access.password_hash.verify(password, self.settings):
            raise AccessDenied(f"Wrong BAA password for {user!r}")
        access.mode = AccessMode.TENTATIVE
        access.boundary = self.now
        if device_id is not None:
            if device_id in self.lockout:
                raise AccessDenied(f"Device {device_id} is locked out of {self.id}")
            self.associate_device(device_id, user, AccessMode.TENTATIVE)
        note(user=user, device=device_id, boundary=access.boundary)
        return access

    def promote(self, user):
        """After a successful recovery the user's tentative devices become full members"""
        access = self.access.get(user)
        if access is not None:
            access.mode = AccessMode.FULL
            access.boundary = None
        for device_id, (owner, mode) in sorted(self.devices.items()):
            if owner == user and device_id not in self.lockout:
                self.devices[device_id] = (owner, AccessMode.FULL)

    @operation()
    def reset_profile(self, user):
        access = self.access.get(user)
        if access is not None and access.mode is AccessMode.TENTATIVE:
            raise TentativeAccessDenied("Tentative access cannot manage the behavioral profile")
        self.profiles.pop(user, None)
        note(user=user)

    # Bus handlers

    def on_behavior_record(self, envelope):
        record = BehavioralRecord.from_payload(envelope.payload)
        if record.device_id != envelope.sender:
            raise AccessDenied("Records must come from the device that captured them")
        if record.device_id in self.lockout:
            raise AccessDenied(f"Device {record.device_id} is locked out of {self.id}")
        try:
            user, mode = self.devices[record.device_id]
        except KeyError:
            raise AccessDenied(f"Device {record.device_id} is not associated with {self.id}")
        self.ingest_record(user, record, mode)
        return {"accepted": True}

    def on_baa_login(self, envelope):
        payload = envelope.payload
        access = self.baa_login(payload["user"], payload["password"], envelope.sender)
        return {"mode": access.mode.value, "boundary": access.boundary}

    def on_verdict_request(self, envelope):
        payload = envelope.payload
        token = self.federated_behavioral_assertion(
            envelope.sender, payload["user"], payload.get("boundary"), payload.get("recovery", False))
        return {"token": token.to_payload()}

    def on_baa_promote(self, envelope):
        if envelope.sender not in self.trusted_consolidators:
            raise AccessDenied(f"{envelope.sender} may not promote users at {self.id}")
        self.promote(envelope.payload["user"])
        return {"mode": AccessMode.FULL.value}
