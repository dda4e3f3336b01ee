# OIDC-style federation: authorization requests, FIDO-backed code issuance, audience- and
# scope-restricted tokens with one-time pseudonyms, and the QR desktop bridge.
#
# Flows are driven from the user agent's side (fido_login, password_login, qr_login):
# every hop is a bus message, and handlers never wait on a message of their own.

import enum
import logging
from dataclasses import dataclass, field, replace

from . import keys
from .device import Assertion, RegistrationMessage, TeeGrade
from .errors import (
    AccessDenied, AccountLocked, AlreadyClaimed, AttributeNotVerified, AudienceMismatch,
    AuthenticationFailed, ConsentDenied, CsrfRejected, Expired, NotFound, ReplayDetected,
    UnknownClient)
from .identity import AAL, AuthFactor, Decision, FactorKind, aal_for_factors, fuse_attributes
from .simnet import Actor, note, operation
from .utils import b64decode, b64encode, canonical_json, format_qr_payload, parse_qr_payload


logger = logging.getLogger(__name__)


# Numbered hops of each login method, as seen on the bus. Every message of a flow
# carries the flow id in its payload.
FLOW_SHAPES = {
    "fido": ("login.request", "authz.request", "fido.challenge", "fido.response",
             "token.response", "access.granted"),
    "password": ("login.request", "authz.request", "password.challenge", "password.response",
                 "token.response", "access.granted"),
    "pabac": ("login.request", "authz.request", "pabac.challenge", "pabac.presentation",
              "token.response", "access.granted"),
    "mc": ("login.request", "authz.request", "token.response", "access.granted"),
}


@dataclass(frozen=True)
class AuthorizationRequest:
    request_id: str
    sp: str
    user_session: str
    requested: tuple
    nonce: str
    csrf_token: str
    origin: str
    issued_at: float
    expires_at: float
    method: str = "fido"

    def to_payload(self):
        return {"request": self.request_id, "sp": self.sp, "flow": self.user_session,
                "requested": list(self.requested), "nonce": self.nonce, "csrf": self.csrf_token,
                "origin": self.origin, "expires_at": self.expires_at, "method": self.method}


@dataclass(frozen=True)
class Pseudonym:
    value: str
    session_id: str


@dataclass(frozen=True)
class AccessToken:
    token_id: str
    issuer: str
    subject: str
    audience: str
    scope: dict
    nonce: str
    issued_at: float
    expires_at: float
    aal: AAL
    signature: bytes = b""

    def signed_bytes(self):
        return canonical_json({
            "token": self.token_id, "iss": self.issuer, "sub": self.subject, "aud": self.audience,
            "scope": self.scope, "nonce": self.nonce, "iat": self.issued_at,
            "exp": self.expires_at, "aal": self.aal.label,
        })

    def to_payload(self):
        return {"token": self.token_id, "iss": self.issuer, "sub": self.subject,
                "aud": self.audience, "scope": self.scope, "nonce": self.nonce,
                "iat": self.issued_at, "exp": self.expires_at, "aal": self.aal.label,
                "signature": b64encode(self.signature)}

    @classmethod
    def from_payload(cls, payload):
        try:
            return cls(
                token_id=payload["token"], issuer=payload["iss"], subject=payload["sub"],
                audience=payload["aud"], scope=dict(payload["scope"]), nonce=payload["nonce"],
                issued_at=float(payload["iat"]), expires_at=float(payload["exp"]),
                aal=AAL.parse(payload["aal"]), signature=b64decode(payload["signature"]))
        except (KeyError, TypeError, ValueError):
            raise AuthenticationFailed("Malformed access token")


@dataclass(frozen=True)
class TokenCheck:
    valid: bool
    reason: str = None
    scope: dict = None
    aal: AAL = AAL.NONE
    subject: str = None


def validate_token(token, audience, now, issuer_key):
    """Check a token for a presenting audience. Invalid tokens are a result, not an error."""
    if not keys.verify_signature(issuer_key, token.signature, token.signed_bytes()):
        return TokenCheck(False, "BadSignature")
    if token.audience != audience:
        return TokenCheck(False, "AudienceMismatch")
    if now >= token.expires_at:
        return TokenCheck(False, "Expired")
    return TokenCheck(True, scope=dict(token.scope), aal=token.aal, subject=token.subject)


TOKEN_REJECTIONS = {"BadSignature": AuthenticationFailed, "AudienceMismatch": AudienceMismatch,
                    "Expired": Expired}


@dataclass
class AuthenticatorRegistration:
    account: str
    rp_id: str
    device_id: str
    credential_id: str
    public_key: bytes
    tee_grade: TeeGrade
    counter: int = 0
    revoked: bool = False

    @property
    def factor(self):
        if self.tee_grade is TeeGrade.TEE:
            return AuthFactor(FactorKind.FIDO_TEE)
        return AuthFactor(FactorKind.FIDO_SOFTWARE)


class QrState(enum.Enum):
    PENDING = "Pending"
    CLAIMED = "Claimed"
    COMPLETED = "Completed"
    EXPIRED = "Expired"


@dataclass
class QrSession:
    session_id: str
    payload: str
    desktop_session: str
    request_id: str
    expires_at: float
    state: QrState = QrState.PENDING
    code: str = None


@dataclass(frozen=True)
class AccessPolicy:
    """What an SP demands before it grants access on a token"""
    required: tuple = ()
    min_aal: AAL = AAL.NONE

    @classmethod
    def from_config(cls, config):
        config = config or {}
        return cls(tuple(config.get("required", ())), AAL.parse(config.get("min_aal", "None")))

    def evaluate(self, check):
        """Return (granted, reason) for a TokenCheck"""
        if not check.valid:
            return False, check.reason
        missing = [name for name in self.required if name not in check.scope]
        if missing:
            return False, "MissingAttribute"
        if check.aal < self.min_aal:
            return False, "InsufficientAal"
        return True, None


@dataclass
class IdpAccount:
    user: str
    attributes: list = field(default_factory=list)
    password: keys.PasswordHash = None
    registrations: dict = field(default_factory=dict)

    def attribute(self, name):
        for attribute in self.attributes:
            if attribute.name == name:
                return attribute
        return None

    def active_registrations(self):
        return [r for r in self.registrations.values() if not r.revoked]


@dataclass
class IssuedCode:
    code: str
    sp: str
    request_id: str
    nonce: str
    csrf_token: str
    account: str
    factors: tuple
    scope: dict
    expires_at: float
    protocol: str = "Federated"


@dataclass(frozen=True)
class FlowResult:
    flow: str
    sp: str
    token: AccessToken


class IdentityProvider(Actor):
    """An OIDC-style IdP with a FIDO authentication module"""

    def __init__(self, sim, idp_id):
        super().__init__(sim, idp_id)
        self.signer = keys.SigningIdentity(sim.entropy)
        self.public_key = self.signer.public_key
        self.clients = {}
        self.accounts = {}
        self.requests = {}
        self.flows = {}
        self.consumed_nonces = set()
        self.codes = {}
        self.consumed_codes = set()
        self.pseudonyms = set()
        self.token_subjects = set()
        self.qr_sessions = {}
        self.locked = set()
        self.challenges = {}
        self.enrollment_grants = {}
        self.trusted_consolidators = set()
        self._pending_tokens = {}

    # Clients and accounts

    def register_client(self, sp_id, origin=None):
        self.clients[sp_id] = origin or f"https://{sp_id}"
        logger.info("%s registered client %r", self.id, sp_id)

    def trust_consolidator(self, idc_id):
        self.trusted_consolidators.add(idc_id)

    def enroll_user(self, user, attributes=None, password=None):
        account = self.accounts.setdefault(user, IdpAccount(user))
        for name, raw in sorted((attributes or {}).items()):
            self.set_attribute(user, self.sim.normalizer.normalize(
                name, raw, source=self.id, verified_at=self.now))
        if password is not None:
            account.password = keys.PasswordHash.create(password, self.settings, self.sim.entropy)
        return account

    def set_attribute(self, user, attribute):
        account = self.accounts.setdefault(user, IdpAccount(user))
        account.attributes = fuse_attributes(account.attributes, attribute, self.sim.trust_table())

    def account(self, user):
        try:
            return self.accounts[user]
        except KeyError:
            raise AuthenticationFailed(f"No account {user!r} at {self.id}")

    def check_lock(self, user):
        if user in self.locked:
            raise AccountLocked(f"Account {user!r} is locked at {self.id}")

    def _mint_value(self, prefix, nbytes=16):
        return f"{prefix}{self.sim.entropy.token_hex(nbytes)}"

    # Authenticator registration (multi-device)

    @operation()
    def registration_challenge(self, user):
        """Challenge for enrolling a device key; beyond the first key this needs a grant"""
        self.check_lock(user)
        account = self.account(user)
        if account.active_registrations() and not self.enrollment_grants.get(user):
            raise AccessDenied(f"Enrolling another device for {user!r} needs an authorization")
        challenge = self._mint_value("rc-")
        self.challenges[challenge] = ("register", user, self.now + self.settings["nonce_ttl"])
        note(user=user)
        return challenge

    def grant_enrollment(self, user):
        self.enrollment_grants[user] = self.enrollment_grants.get(user, 0) + 1

    def _take_challenge(self, challenge, purpose, user):
        if challenge in self.consumed_nonces:
            raise ReplayDetected(f"Challenge {challenge!r} was already used")
        entry = self.challenges.pop(challenge, None)
        if entry is None or entry[:2] != (purpose, user):
            raise AuthenticationFailed("Unknown challenge")
        self.consumed_nonces.add(challenge)
        if self.now >= entry[2]:
            raise Expired("Challenge expired")

    @operation()
    def register_authenticator(self, message):
        self.check_lock(message.account_id)
        account = self.account(message.account_id)
        self._take_challenge(message.challenge, "register", message.account_id)
        if message.rp_id != self.id:
            raise AuthenticationFailed("Registration for another relying party")
        if not keys.verify_signature(message.public_key, message.signature, message.signed_bytes()):
            raise AuthenticationFailed("Registration self-signature does not verify")
        if account.active_registrations():
            self.enrollment_grants[message.account_id] -= 1
        registration = AuthenticatorRegistration(
            account=message.account_id, rp_id=self.id, device_id=message.device_id,
            credential_id=message.credential_id, public_key=message.public_key,
            tee_grade=message.tee_grade)
        account.registrations[message.credential_id] = registration
        note(user=message.account_id, device=message.device_id, credential=message.credential_id)
        return registration

    @operation()
    def revoke_authenticator(self, user, credential_id):
        registration = self.account(user).registrations.get(credential_id)
        if registration is None:
            raise NotFound(f"No authenticator {credential_id!r} for {user!r}")
        registration.revoked = True
        note(user=user, credential=credential_id)

    def revoke_device(self, user, device_id):
        for registration in self.account(user).active_registrations():
            if registration.device_id == device_id:
                self.revoke_authenticator(user, registration.credential_id)

    @operation()
    def action_challenge(self, user):
        """Challenge for an assertion that authorizes an account action (e.g. a new device)"""
        self.check_lock(user)
        self.account(user)
        challenge = self._mint_value("ac-")
        self.challenges[challenge] = ("action", user, self.now + self.settings["nonce_ttl"])
        return challenge

    def _verify_assertion(self, assertion, origin):
        """Signature, binding and counter checks; returns the matching registration"""
        account = self.account(assertion.account_id)
        registration = account.registrations.get(assertion.credential_id)
        if registration is None or registration.revoked:
            raise AuthenticationFailed("Unknown or revoked authenticator")
        if assertion.rp_id != self.id:
            raise AuthenticationFailed("Assertion for another relying party")
        if assertion.channel_binding != origin:
            logger.warning("%s: channel binding %r does not match session origin %r",
                           self.id, assertion.channel_binding, origin)
            raise AuthenticationFailed("Channel binding mismatch")
        if not keys.verify_signature(registration.public_key, assertion.signature,
                                     assertion.signed_bytes()):
            raise AuthenticationFailed("Assertion signature does not verify")
        if assertion.counter <= registration.counter:
            raise AuthenticationFailed("Signature counter did not increase")
        registration.counter = assertion.counter
        return registration

    @operation()
    def authorize_enrollment(self, assertion, origin):
        """An existing device vouches for enrolling one more device"""
        self.check_lock(assertion.account_id)
        self._take_challenge(assertion.challenge, "action", assertion.account_id)
        self._verify_assertion(assertion, origin)
        self.grant_enrollment(assertion.account_id)
        note(user=assertion.account_id)

    # Authorization code flow

    @operation()
    def begin_authorization(self, sp, user_session, requested, origin, method="fido"):
        if sp not in self.clients:
            raise UnknownClient(f"{sp!r} is not a client of {self.id}")
        for name in requested:
            self.sim.schema[name]
        request = AuthorizationRequest(
            request_id=self._mint_value("rq-", 8), sp=sp, user_session=user_session,
            requested=tuple(requested), nonce=self._mint_value("n-"),
            csrf_token=self._mint_value("csrf-"), origin=origin, issued_at=self.now,
            expires_at=self.now + self.settings["nonce_ttl"], method=method)
        self.requests[request.request_id] = request
        self.requests[request.nonce] = request
        note(sp=sp, request=request.request_id, requested=list(request.requested))
        return request

    def _peek_request(self, nonce):
        """The pending request for nonce, left unconsumed"""
        if nonce in self.consumed_nonces:
            logger.warning("%s: nonce %r replayed", self.id, nonce)
            raise ReplayDetected(f"Nonce {nonce!r} was already used")
        request = self.requests.get(nonce)
        if request is None:
            raise AuthenticationFailed("Unknown nonce")
        if self.now >= request.expires_at:
            self.consumed_nonces.add(nonce)
            raise Expired("Authorization request expired")
        return request

    def _lookup_request(self, nonce):
        request = self._peek_request(nonce)
        self.consumed_nonces.add(nonce)
        return request

    def _check_consent(self, request, consent):
        denied = sorted(name for name in request.requested
                        if (consent or {}).get(name) != Decision.ALLOW.value)
        if denied:
            raise ConsentDenied(f"Consent denied for {', '.join(denied)}")

    def _scope_for(self, account, requested):
        scope = {}
        for name in requested:
            attribute = account.attribute(name)
            if attribute is None:
                raise AttributeNotVerified(f"{self.id} has no verified {name!r} for {account.user!r}")
            scope[name] = attribute.value
        return scope

    def _issue_code(self, request, account, factors, scope, protocol="Federated"):
        issued = IssuedCode(
            code=self._mint_value("code-"), sp=request.sp, request_id=request.request_id,
            nonce=request.nonce, csrf_token=request.csrf_token, account=account,
            factors=tuple(factors), scope=scope, expires_at=self.now + self.settings["code_ttl"],
            protocol=protocol)
        self.codes[issued.code] = issued
        return issued

    @operation()
    def complete_fido_authentication(self, nonce, assertion, consent):
        self.check_lock(assertion.account_id)
        request = self._lookup_request(nonce)
        if assertion.challenge != request.nonce:
            raise AuthenticationFailed("Assertion answers another challenge")
        registration = self._verify_assertion(assertion, request.origin)
        self._check_consent(request, consent)
        account = self.account(assertion.account_id)
        issued = self._issue_code(request, account.user, (registration.factor,),
                                  self._scope_for(account, request.requested))
        note(sp=request.sp, request=request.request_id, user=account.user)
        return issued

    @operation()
    def complete_password_authentication(self, nonce, user, password, consent):
        self.check_lock(user)
        request = self._lookup_request(nonce)
        account = self.account(user)
        if account.password is None or not account.password.verify(password, self.settings):
            raise AuthenticationFailed("Wrong password")
        self._check_consent(request, consent)
        issued = self._issue_code(request, user, (AuthFactor(FactorKind.BACKUP_PASSWORD),),
                                  self._scope_for(account, request.requested))
        note(sp=request.sp, request=request.request_id, user=user)
        return issued

    @operation()
    def exchange_code_for_token(self, code, sp, csrf_token, origin=None):
        if code in self.consumed_codes:
            logger.warning("%s: authorization code replayed by %r", self.id, sp)
            raise ReplayDetected("Authorization code already used")
        issued = self.codes.get(code)
        if issued is None:
            raise AuthenticationFailed("Unknown authorization code")
        if issued.sp != sp:
            logger.warning("%s: %r presented a code bound to %r", self.id, sp, issued.sp)
            raise AudienceMismatch("Authorization code bound to another client")
        if origin is not None and origin != self.clients.get(sp):
            raise CsrfRejected("Origin header does not match the client")
        if not csrf_token or csrf_token != issued.csrf_token:
            logger.warning("%s: CSRF token mismatch for %r", self.id, sp)
            raise CsrfRejected("CSRF token mismatch")
        if self.now >= issued.expires_at:
            raise Expired("Authorization code expired")
        if issued.account is not None:
            self.check_lock(issued.account)
        del self.codes[code]
        self.consumed_codes.add(code)
        token = self.mint_token(sp, issued.scope, issued.factors, issued.request_id, issued.nonce)
        if issued.account is not None:
            for name, value in sorted(issued.scope.items()):
                self.sim.record_disclosure(issued.account, sp, name, value, issued.request_id,
                                           issued.protocol)
        note(sp=sp, user=issued.account, request=issued.request_id, token=token.token_id,
             aal=token.aal.label)
        return token

    @operation()
    def issue_pseudonym(self, session_id):
        value = self.sim.entropy.token_hex(16)
        while value in self.pseudonyms:
            value = self.sim.entropy.token_hex(16)
        self.pseudonyms.add(value)
        return Pseudonym(value, session_id)

    def mint_token(self, audience, scope, factors, session_id, nonce):
        pseudonym = self.issue_pseudonym(session_id)
        token = AccessToken(
            token_id=self._mint_value("tok-", 8), issuer=self.id, subject=pseudonym.value,
            audience=audience, scope=dict(sorted(scope.items())), nonce=nonce,
            issued_at=self.now, expires_at=self.now + self.settings["token_ttl"],
            aal=aal_for_factors(factors))
        return self.sign_token(token)

    def sign_token(self, token):
        """Sign a token; a subject can back exactly one token"""
        if token.subject in self.token_subjects:
            raise ReplayDetected("Pseudonym already used for another token")
        self.token_subjects.add(token.subject)
        return replace(token, signature=self.signer.sign(token.signed_bytes()))

    def deliver_token(self, token_id, flow):
        """Send a minted token to its audience (the token response hop)"""
        token = self._pending_tokens.pop(token_id)
        return self.send(token.audience, "token.response", {"flow": flow, "token": token.to_payload()})

    def send_challenge(self, flow, device_id, msg_type="fido.challenge"):
        request = self.requests[self.flows[flow]]
        payload = dict(request.to_payload(), idp=self.id)
        return self.send(device_id, msg_type, payload)

    # QR desktop bridge

    @operation()
    def qr_bridge(self, desktop_session, request):
        qr_id = self._mint_value("qr-", 8)
        session = QrSession(
            session_id=qr_id, payload=format_qr_payload(self.id, qr_id, request.nonce),
            desktop_session=desktop_session, request_id=request.request_id,
            expires_at=self.now + self.settings["qr_ttl"])
        self.qr_sessions[qr_id] = session
        note(qr_session=qr_id, sp=request.sp)
        return session

    @operation()
    def claim_qr(self, qr_session_id, assertion, consent):
        session = self.qr_sessions.get(qr_session_id)
        if session is None:
            raise NotFound(f"No QR session {qr_session_id!r}")
        if session.state is not QrState.PENDING:
            raise AlreadyClaimed(f"QR session {qr_session_id!r} was already claimed")
        if self.now >= session.expires_at:
            session.state = QrState.EXPIRED
            raise Expired(f"QR session {qr_session_id!r} expired")
        # a rejected claim leaves the session pending for its owner
        self.check_lock(assertion.account_id)
        request = self._peek_request(assertion.challenge)
        if request.request_id != session.request_id:
            raise AuthenticationFailed("Assertion answers another QR session")
        registration = self._verify_assertion(assertion, session.payload)
        self._check_consent(request, consent)
        account = self.account(assertion.account_id)
        session.state = QrState.CLAIMED
        self._lookup_request(request.nonce)
        issued = self._issue_code(request, account.user, (registration.factor,),
                                  self._scope_for(account, request.requested))
        session.state = QrState.COMPLETED
        session.code = issued.code
        note(qr_session=qr_session_id, user=account.user)
        return issued

    # Bus handlers

    def on_authz_request(self, envelope):
        payload = envelope.payload
        flow = payload["flow"]
        if flow in self.flows:
            raise ReplayDetected(f"Flow {flow!r} already has an authorization request")
        request = self.begin_authorization(envelope.sender, flow, payload.get("requested", ()),
                                           payload["origin"], payload.get("method", "fido"))
        self.flows[flow] = request.request_id
        reply = request.to_payload()
        if payload.get("method") == "qr":
            reply["qr"] = self.qr_bridge(flow, request).payload
        return reply

    def on_fido_register(self, envelope):
        registration = self.register_authenticator(RegistrationMessage.from_payload(envelope.payload))
        return {"credential": registration.credential_id}

    def on_enroll_authorize(self, envelope):
        self.authorize_enrollment(Assertion.from_payload(envelope.payload["assertion"]),
                                  envelope.payload["origin"])
        return {"granted": True}

    def on_fido_response(self, envelope):
        payload = envelope.payload
        assertion = Assertion.from_payload(payload["assertion"])
        issued = self.complete_fido_authentication(assertion.challenge, assertion, payload["consent"])
        return {"flow": payload["flow"], "code": issued.code, "state": issued.csrf_token}

    def on_password_response(self, envelope):
        payload = envelope.payload
        issued = self.complete_password_authentication(
            payload["nonce"], payload["account"], payload["password"], payload["consent"])
        return {"flow": payload["flow"], "code": issued.code, "state": issued.csrf_token}

    def on_qr_claim(self, envelope):
        payload = envelope.payload
        self.claim_qr(payload["qr_session"], Assertion.from_payload(payload["assertion"]),
                      payload["consent"])
        return {"claimed": True}

    def on_token_request(self, envelope):
        payload = envelope.payload
        token = self.exchange_code_for_token(payload["code"], envelope.sender, payload.get("csrf"),
                                             payload.get("origin"))
        self._pending_tokens[token.token_id] = token
        return {"token_id": token.token_id}

    def on_amm_lock(self, envelope):
        if envelope.sender not in self.trusted_consolidators:
            raise AccessDenied(f"{envelope.sender} may not lock accounts at {self.id}")
        self.locked.add(envelope.payload["user"])
        logger.warning("%s locked account %r", self.id, envelope.payload["user"])
        return {"locked": True}

    def on_amm_unlock(self, envelope):
        if envelope.sender not in self.trusted_consolidators:
            raise AccessDenied(f"{envelope.sender} may not unlock accounts at {self.id}")
        self.locked.discard(envelope.payload["user"])
        return {"locked": False}

    def on_enroll_grant(self, envelope):
        if envelope.sender not in self.trusted_consolidators:
            raise AccessDenied(f"{envelope.sender} may not authorize enrollments at {self.id}")
        user = envelope.payload["user"]
        lost_device = envelope.payload.get("revoke_device")
        if lost_device is not None and user in self.accounts:
            self.revoke_device(user, lost_device)
        self.grant_enrollment(user)
        return {"granted": True}

    def on_attribute_transfer(self, envelope):
        if envelope.sender not in self.trusted_consolidators:
            raise AccessDenied(f"{envelope.sender} may not transfer attributes to {self.id}")
        payload = envelope.payload
        attribute = self.sim.normalizer.normalize(
            payload["name"], payload["value"], source=payload["source"], verified_at=self.now)
        self.set_attribute(payload["user"], attribute)
        return {"stored": True}


class RelyingParty:
    """The SP side of the flows. Mixed into actors that consume tokens."""

    def _init_relying_party(self, policy=None):
        self.origin = f"https://{self.id}"
        self.policy = policy or AccessPolicy()
        self.trusted_idps = {}
        self.sessions = {}
        self.used_tokens = set()
        self.subjects = []

    def trust_idp(self, idp_id, public_key):
        self.trusted_idps[idp_id] = public_key

    def _session(self, flow):
        try:
            return self.sessions[flow]
        except KeyError:
            raise AuthenticationFailed(f"{self.id} has no session {flow!r}")

    def on_login_request(self, envelope):
        payload = envelope.payload
        flow = payload["flow"]
        if flow in self.sessions:
            raise ReplayDetected(f"Session {flow!r} already exists")
        requested = payload.get("requested")
        self.sessions[flow] = {
            "client": envelope.sender, "origin": payload["origin"], "idp": payload["idp"],
            "method": payload.get("method", "fido"),
            "requested": list(self.policy.required if requested is None else requested),
            "state": "started",
        }
        return {"flow": flow}

    def start_authorization(self, flow):
        session = self._session(flow)
        reply = self.send(session["idp"], "authz.request", {
            "flow": flow, "requested": session["requested"], "origin": session["origin"],
            "method": session["method"]})
        session.update(request=reply["request"], nonce=reply["nonce"], csrf=reply["csrf"],
                       qr=reply.get("qr"), state="authorizing")
        return reply

    def on_authz_code(self, envelope):
        payload = envelope.payload
        session = self._session(payload["flow"])
        if payload.get("origin") != session["origin"] or payload.get("state") != session.get("csrf"):
            logger.warning("%s: cross-origin or forged redirect for %r", self.id, payload["flow"])
            raise CsrfRejected("Redirect origin or state does not match the session")
        if session["state"] != "authorizing":
            raise ReplayDetected("Session already received a code")
        session.update(code=payload["code"], state="code")
        return {"accepted": True}

    def redeem_code(self, flow):
        session = self._session(flow)
        return self.send(session["idp"], "token.request", {
            "flow": flow, "code": session.get("code"), "csrf": session.get("csrf"),
            "origin": self.origin})

    def on_token_response(self, envelope):
        payload = envelope.payload
        session = self._session(payload["flow"])
        token = AccessToken.from_payload(payload["token"])
        issuer_key = self.trusted_idps.get(token.issuer)
        if issuer_key is None or envelope.sender != token.issuer:
            raise AuthenticationFailed(f"Token from untrusted issuer {token.issuer!r}")
        check = validate_token(token, self.id, self.now, issuer_key)
        if not check.valid:
            logger.warning("%s rejected token %s: %s", self.id, token.token_id, check.reason)
            raise TOKEN_REJECTIONS[check.reason](f"Token rejected: {check.reason}")
        if token.token_id in self.used_tokens or token.nonce != session.get("nonce") \
                or session["state"] != "code":
            raise ReplayDetected("Token does not belong to this session")
        granted, reason = self.policy.evaluate(check)
        if not granted:
            raise AccessDenied(f"Access policy not met: {reason}")
        self.used_tokens.add(token.token_id)
        self.subjects.append(token.subject)
        session.update(token=token, state="granted")
        return {"granted": True}

    def grant_access(self, flow):
        session = self._session(flow)
        if session["state"] != "granted":
            raise AccessDenied(f"Session {flow!r} has not been granted")
        return self.send(session["client"], "access.granted",
                         {"flow": flow, "subject": session["token"].subject})

    def stored_subjects(self):
        return list(self.subjects)


class ServiceProvider(RelyingParty, Actor):
    def __init__(self, sim, sp_id, policy=None):
        Actor.__init__(self, sim, sp_id)
        self._init_relying_party(policy)


class DesktopBrowser(Actor):
    """A desktop with no authenticator of its own; it logs in by showing a QR code"""

    def __init__(self, sim, desktop_id):
        super().__init__(sim, desktop_id)
        self.origin = f"https://desktop.{desktop_id}"
        self.displayed = {}
        self.completed = {}
        self.granted = set()

    def on_qr_display(self, envelope):
        self.displayed[envelope.payload["flow"]] = envelope.payload["qr"]
        return {"shown": True}

    def on_qr_completed(self, envelope):
        self.completed[envelope.payload["flow"]] = envelope.payload
        return {"accepted": True}

    def on_access_granted(self, envelope):
        flow = envelope.payload["flow"]
        if flow in self.granted:
            raise ReplayDetected(f"Flow {flow!r} was already granted")
        self.granted.add(flow)
        return {"accepted": True}


# Drivers (the user agent's side of each flow)

def new_flow_id(sim):
    return "f-" + sim.entropy.token_hex(8)


def enroll(sim, device, idp):
    """Enroll a fresh device key for the device's owner at idp"""
    challenge = idp.registration_challenge(device.owner)
    if not device.is_unlocked():
        device.user_gesture()
    message = device.enroll_device_key(idp.id, device.owner, challenge)
    device.send(idp.id, "fido.register", message.to_payload())
    return message


def authorize_additional_device(sim, device, idp):
    """Use an already-enrolled device to let its owner enroll one more device"""
    challenge = idp.action_challenge(device.owner)
    if not device.is_unlocked():
        device.user_gesture()
    assertion = device.sign_assertion(idp.id, device.owner, challenge, device.origin)
    return device.send(idp.id, "enroll.authorize",
                       {"assertion": assertion.to_payload(), "origin": device.origin})


def start_flow(sim, client, sp, idp, requested, method):
    flow = new_flow_id(sim)
    payload = {"flow": flow, "idp": idp.id, "origin": client.origin, "method": method}
    if requested is not None:
        payload["requested"] = list(requested)
    client.send(sp.id, "login.request", payload)
    sp.start_authorization(flow)
    return flow


def finish_flow(sim, client, sp, idp, flow, code, state):
    client.send(sp.id, "authz.code", {"flow": flow, "code": code, "state": state,
                                      "origin": client.origin})
    token_id = sp.redeem_code(flow)["token_id"]
    idp.deliver_token(token_id, flow)
    sp.grant_access(flow)
    return FlowResult(flow, sp.id, sp.sessions[flow]["token"])


def fido_login(sim, device, sp, idp, requested=None, consent=None):
    """The FIDO-enhanced federated login, hop by hop"""
    flow = start_flow(sim, device, sp, idp, requested, "fido")
    idp.send_challenge(flow, device.id)
    if not device.is_unlocked():
        device.user_gesture()
    reply = device.answer_challenge(flow, consent)
    return finish_flow(sim, device, sp, idp, flow, reply["code"], reply["state"])


def password_login(sim, device, sp, idp, password, requested=None, consent=None):
    """The vanilla baseline: the same flow with a password check in place of the assertion"""
    flow = start_flow(sim, device, sp, idp, requested, "password")
    idp.send_challenge(flow, device.id, "password.challenge")
    challenge = device.take_challenge(flow)
    if consent is None:
        consent = sim.actor(device.owner).consent_decisions(challenge["requested"], sp.id)
    reply = device.send(idp.id, "password.response", {
        "flow": flow, "nonce": challenge["nonce"], "account": device.owner,
        "password": password, "consent": consent})
    return finish_flow(sim, device, sp, idp, flow, reply["code"], reply["state"])


def qr_login(sim, desktop, device, sp, idp, requested=None, consent=None):
    """Desktop login bridged through a QR code scanned by the user's device"""
    flow = start_flow(sim, desktop, sp, idp, requested, "qr")
    sp.send(desktop.id, "qr.display", {"flow": flow, "qr": sp.sessions[flow]["qr"]})
    qr_payload = desktop.displayed[flow]
    idp_id, qr_session, challenge = parse_qr_payload(qr_payload)
    if not device.is_unlocked():
        device.user_gesture()
    assertion = device.sign_assertion(idp_id, device.owner, challenge, qr_payload)
    request = idp.requests[challenge]
    if consent is None:
        consent = sim.actor(device.owner).consent_decisions(request.requested, sp.id)
    device.send(idp_id, "qr.claim", {"qr_session": qr_session, "assertion": assertion.to_payload(),
                                     "consent": consent})
    code = idp.qr_sessions[qr_session].code
    idp.send(desktop.id, "qr.completed", {"flow": flow, "code": code, "state": request.csrf_token})
    return finish_flow(sim, desktop, sp, idp, flow, code, request.csrf_token)
