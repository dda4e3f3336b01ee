# Mobile Connect: an MNO-operated IdP that verifies subscribers with an SMS one-time code
#
# Only the IDC talks to the MNO (mc.* messages); SPs reach it through the IDC proxy.

import base64
import logging
from dataclasses import dataclass, field

import pyotp

from .errors import AccessDenied, AuthenticationFailed, Expired, NotFound
from .federation import IdentityProvider
from .identity import AuthFactor, FactorKind
from .simnet import note, operation


logger = logging.getLogger(__name__)

# Message types of the MNO protocol. None of them may ever reach an SP.
MC_MESSAGE_TYPES = frozenset({
    "mc.authorize", "mc.otp", "mc.token", "mc.status", "sms.deliver"})


@dataclass
class Subscriber:
    msisdn: str
    user: str
    device_id: str
    attributes: dict = field(default_factory=dict)
    reported_lost: bool = False
    sim_reissued: bool = False


@dataclass
class McSession:
    session_id: str
    msisdn: str
    requester: str
    requested: tuple
    counter: int
    expires_at: float
    attempts: int = 0
    verified: bool = False
    spent: bool = False


class MobileNetworkOperator(IdentityProvider):
    def __init__(self, sim, mno_id):
        super().__init__(sim, mno_id)
        self.subscribers = {}
        self.mc_sessions = {}
        # seeded, so OTPs are reproducible from the scenario seed
        self._hotp = pyotp.HOTP(base64.b32encode(sim.entropy.token_bytes(20)).decode("ascii"),
                                digits=self.settings["otp_digits"])
        self._counter = 0

    def add_subscriber(self, msisdn, user, device_id, attributes=None):
        self.subscribers[msisdn] = Subscriber(msisdn, user, device_id, dict(attributes or {}))
        self.enroll_user(user, dict(attributes or {}, msisdn=msisdn))
        logger.info("%s: subscriber %s on device %s", self.id, msisdn, device_id)

    def subscriber(self, msisdn):
        try:
            return self.subscribers[msisdn]
        except KeyError:
            raise NotFound(f"{self.id} has no subscriber {msisdn!r}")

    def verifiable(self):
        """Attribute names this MNO can vouch for"""
        names = {"msisdn", "sim_reissued"}
        for subscriber in self.subscribers.values():
            names.update(subscriber.attributes)
        return names

    @operation()
    def report_lost(self, msisdn):
        self.subscriber(msisdn).reported_lost = True
        note(msisdn=msisdn)

    @operation()
    def reissue_sim(self, msisdn, device_id):
        """A replacement SIM moves the number (and its SMS) to a new device"""
        subscriber = self.subscriber(msisdn)
        subscriber.device_id = device_id
        subscriber.sim_reissued = True
        self.sim.actor(device_id).msisdn = msisdn
        note(msisdn=msisdn, device=device_id)

    # SMS one-time codes

    @operation()
    def start_mc_session(self, requester, msisdn, requested):
        self.subscriber(msisdn)
        self._counter += 1
        session = McSession(
            session_id=self._mint_value("mc-", 8), msisdn=msisdn, requester=requester,
            requested=tuple(requested), counter=self._counter,
            expires_at=self.now + self.settings["otp_ttl"])
        self.mc_sessions[session.session_id] = session
        self.deliver_otp(session)
        note(requester=requester, mc_session=session.session_id)
        return session

    def deliver_otp(self, session):
        subscriber = self.subscribers[session.msisdn]
        self.send(subscriber.device_id, "sms.deliver", {
            "from": self.id, "mc_session": session.session_id,
            "otp": self._hotp.at(session.counter)})

    def _session(self, session_id, requester):
        session = self.mc_sessions.get(session_id)
        if session is None or session.requester != requester:
            raise AuthenticationFailed("Unknown Mobile Connect session")
        return session

    @operation()
    def check_otp(self, requester, session_id, otp):
        session = self._session(session_id, requester)
        if session.verified:
            return session
        if self.now >= session.expires_at:
            raise Expired("One-time code expired")
        if session.attempts >= self.settings["otp_attempts"]:
            raise AuthenticationFailed("No one-time code attempts left")
        session.attempts += 1
        if not self._hotp.verify(str(otp), session.counter):
            logger.warning("%s: wrong one-time code for %s (attempt %d)", self.id,
                           session.msisdn, session.attempts)
            raise AuthenticationFailed("Wrong one-time code")
        session.verified = True
        note(mc_session=session_id)
        return session

    @operation()
    def release_token(self, requester, session_id):
        session = self._session(session_id, requester)
        if not session.verified or session.spent:
            raise AuthenticationFailed("Mobile Connect session not verified")
        session.spent = True
        subscriber = self.subscribers[session.msisdn]
        values = dict(subscriber.attributes, msisdn=subscriber.msisdn,
                      sim_reissued=subscriber.sim_reissued)
        scope = {name: values[name] for name in session.requested if name in values}
        token = self.mint_token(requester, scope, (AuthFactor(FactorKind.MOBILE_CONNECT_SMS),),
                                session_id, None)
        note(mc_session=session_id, token=token.token_id)
        return token

    # Bus handlers (IDC side only)

    def _require_consolidator(self, envelope):
        if envelope.sender not in self.trusted_consolidators:
            raise AccessDenied(f"{envelope.sender} is not a Mobile Connect client of {self.id}")

    def on_mc_authorize(self, envelope):
        self._require_consolidator(envelope)
        payload = envelope.payload
        session = self.start_mc_session(envelope.sender, payload["msisdn"],
                                        payload.get("requested", ()))
        return {"mc_session": session.session_id}

    def on_mc_otp(self, envelope):
        self._require_consolidator(envelope)
        self.check_otp(envelope.sender, envelope.payload["mc_session"], envelope.payload["otp"])
        return {"verified": True}

    def on_mc_token(self, envelope):
        self._require_consolidator(envelope)
        token = self.release_token(envelope.sender, envelope.payload["mc_session"])
        return {"token": token.to_payload()}

    def on_mc_status(self, envelope):
        """Was this number reported lost, and has a new SIM been issued since?"""
        self._require_consolidator(envelope)
        subscriber = self.subscriber(envelope.payload["msisdn"])
        return {"reported_lost": subscriber.reported_lost, "sim_reissued": subscriber.sim_reissued}
