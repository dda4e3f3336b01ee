# Privacy-preserving attribute credentials: blind issuance of single-show
# selective-disclosure tokens, presentation, verification inside the IdP, and
# sealed backup/restore through the IDC.
#
# Construction: each attribute is bound by a salted hash commitment; the commitments
# are aggregated and the issuer blind-signs (RSA) a digest of a user-chosen serial and
# the aggregate. Disclosing an attribute means revealing its (value, salt) opening.

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace

from . import keys
from .device import Assertion
from .errors import (
    AttributeNotVerified, AuthenticationFailed, IntegrityError, NoCoveringToken, NoSuchAttribute,
    NotFound, PresentationRejected, TokenSpent)
from .federation import IdentityProvider, finish_flow, start_flow
from .simnet import note, operation
from .utils import b64decode, b64encode, canonical_json


logger = logging.getLogger(__name__)

SERIAL_BYTES = 32
SALT_BYTES = 16


class CredentialMode(enum.Enum):
    """Which privacy property the user buys with their supply of tokens"""
    SINGLE_SHOW = "single-show"        # batch of one, reissued before every session
    MULTI_SESSION = "multi-session"    # batch of n, one spent per session

    def batch_size(self, n):
        return 1 if self is CredentialMode.SINGLE_SHOW else n


class ShowState(enum.Enum):
    FRESH = "Fresh"
    SPENT = "Spent"


def commit_attribute(name, value, salt):
    return hashlib.sha256(canonical_json([name, value]) + salt).hexdigest()


def aggregate_commitment(commitments):
    return hashlib.sha256(canonical_json(sorted(commitments.items()))).hexdigest()


def credential_digest(serial, commitment, issuer):
    return canonical_json({"serial": serial, "commitment": commitment, "issuer": issuer})


def int_to_b64(value):
    return b64encode(value.to_bytes((value.bit_length() + 7) // 8 or 1, "big"))


def b64_to_int(text):
    return int.from_bytes(b64decode(text), "big")


@dataclass
class AttributeCredential:
    serial: str
    issuer: str
    attributes: dict
    salts: dict
    signature: int
    state: ShowState = ShowState.FRESH

    @property
    def commitments(self):
        return {name: commit_attribute(name, value, b64decode(self.salts[name]))
                for name, value in self.attributes.items()}

    @property
    def commitment(self):
        return aggregate_commitment(self.commitments)

    def covers(self, names):
        return set(names) <= set(self.attributes)

    def to_dict(self):
        return {"serial": self.serial, "issuer": self.issuer, "attributes": self.attributes,
                "salts": self.salts, "signature": int_to_b64(self.signature),
                "state": self.state.value}

    @classmethod
    def from_dict(cls, data):
        return cls(serial=data["serial"], issuer=data["issuer"], attributes=dict(data["attributes"]),
                   salts=dict(data["salts"]), signature=b64_to_int(data["signature"]),
                   state=ShowState(data["state"]))


@dataclass(frozen=True)
class Presentation:
    serial: str
    issuer: str
    commitment: str
    signature: int
    disclosed: dict
    hidden: dict
    pseudonym: str
    session: str

    def to_payload(self):
        return {"serial": self.serial, "issuer": self.issuer, "commitment": self.commitment,
                "signature": int_to_b64(self.signature), "disclosed": self.disclosed,
                "hidden": self.hidden, "pseudonym": self.pseudonym, "session": self.session}

    @classmethod
    def from_payload(cls, payload):
        try:
            return cls(serial=payload["serial"], issuer=payload["issuer"],
                       commitment=payload["commitment"], signature=b64_to_int(payload["signature"]),
                       disclosed={k: dict(v) for k, v in payload["disclosed"].items()},
                       hidden=dict(payload["hidden"]), pseudonym=payload["pseudonym"],
                       session=payload["session"])
        except (KeyError, TypeError, ValueError, AttributeError):
            raise PresentationRejected("Malformed")

    def serialized(self):
        return canonical_json(self.to_payload())

    def disclosed_values(self):
        return {name: opening["value"] for name, opening in sorted(self.disclosed.items())}


@dataclass(frozen=True)
class VerificationResult:
    accepted: bool
    reason: str = None
    disclosed: dict = field(default_factory=dict)


def present_credential(credential, disclose, session, entropy):
    """Reveal exactly the disclose subset of credential for one session, spending it"""
    if credential.state is ShowState.SPENT:
        raise TokenSpent(f"Credential {credential.serial[:8]} was already shown")
    unknown = sorted(set(disclose) - set(credential.attributes))
    if unknown:
        raise NoSuchAttribute(f"Credential has no {', '.join(unknown)}")
    commitments = credential.commitments
    presentation = Presentation(
        serial=credential.serial, issuer=credential.issuer, commitment=credential.commitment,
        signature=credential.signature,
        disclosed={name: {"value": credential.attributes[name], "salt": credential.salts[name]}
                   for name in sorted(disclose)},
        hidden={name: c for name, c in sorted(commitments.items()) if name not in disclose},
        pseudonym=entropy.token_hex(16), session=session)
    credential.state = ShowState.SPENT
    return presentation


def check_presentation(presentation, issuer_numbers, spent_serials):
    """Stateless verification; returns a VerificationResult"""
    if issuer_numbers is None:
        return VerificationResult(False, "UntrustedIssuer")
    message = keys.full_domain_hash(
        credential_digest(presentation.serial, presentation.commitment, presentation.issuer),
        issuer_numbers.n)
    if not keys.verify_rsa(presentation.signature, message, issuer_numbers):
        return VerificationResult(False, "BadSignature")
    if set(presentation.disclosed) & set(presentation.hidden):
        return VerificationResult(False, "OpeningMismatch")
    try:
        commitments = {name: commit_attribute(name, opening["value"], b64decode(opening["salt"]))
                       for name, opening in presentation.disclosed.items()}
    except (KeyError, TypeError, ValueError):
        return VerificationResult(False, "OpeningMismatch")
    commitments.update(presentation.hidden)
    if aggregate_commitment(commitments) != presentation.commitment:
        return VerificationResult(False, "OpeningMismatch")
    if presentation.serial in spent_serials:
        return VerificationResult(False, "DoubleSpend")
    return VerificationResult(True, disclosed=presentation.disclosed_values())


class PabacProvider(IdentityProvider):
    """An IdP that also issues and verifies attribute credentials"""

    def __init__(self, sim, idp_id):
        super().__init__(sim, idp_id)
        self._blind_key = keys.generate_blind_signing_key(self.settings["rsa_modulus_bits"], sim.entropy)
        self.blind_public_numbers = self._blind_key.public_key().public_numbers()
        self.trusted_issuers = {idp_id: self.blind_public_numbers}
        self.issuance_log = []
        self.issue_sessions = {}
        self.spent_serials = set()

    def trust_issuer(self, issuer_id, public_numbers):
        self.trusted_issuers[issuer_id] = public_numbers

    # Issuance

    @operation()
    def begin_issuance(self, assertion, origin, attributes, blinded):
        """Authenticate the holder, check every attribute is verified here, pick the kept candidate"""
        user = assertion.account_id
        self.check_lock(user)
        self._take_challenge(assertion.challenge, "action", user)
        self._verify_assertion(assertion, origin)
        account = self.account(user)
        for name, value in sorted(attributes.items()):
            attribute = account.attribute(name)
            if attribute is None or attribute.value != value:
                raise AttributeNotVerified(f"{self.id} never verified {name!r} for {user!r}")
        if len(blinded) != self.settings["cut_and_choose"]:
            raise AuthenticationFailed("Wrong number of issuance candidates")
        session_id = self._mint_value("iss-", 8)
        keep = self.sim.entropy.randbelow(len(blinded))
        self.issue_sessions[session_id] = {"user": user, "attributes": dict(attributes),
                                           "blinded": list(blinded), "keep": keep}
        note(user=user, session=session_id, attributes=sorted(attributes))
        return session_id, keep

    @operation()
    def finish_issuance(self, session_id, openings):
        """Check the opened candidates, then blind-sign the one left closed"""
        session = self.issue_sessions.pop(session_id, None)
        if session is None:
            raise NotFound(f"No issuance session {session_id!r}")
        numbers = self.blind_public_numbers
        opened = sorted(int(index) for index in openings)
        if opened != [i for i in range(len(session["blinded"])) if i != session["keep"]]:
            raise AuthenticationFailed("Every candidate except the kept one must be opened")
        for index, opening in sorted(openings.items(), key=lambda item: int(item[0])):
            try:
                commitments = {name: commit_attribute(name, value, b64decode(opening["salts"][name]))
                               for name, value in session["attributes"].items()}
                message = keys.full_domain_hash(credential_digest(
                    opening["serial"], aggregate_commitment(commitments), self.id), numbers.n)
                r = b64_to_int(opening["r"])
                blinded = b64_to_int(session["blinded"][int(index)])
            except (KeyError, TypeError, ValueError):
                raise AuthenticationFailed("Malformed issuance opening")
            if blinded != (message * pow(r, numbers.e, numbers.n)) % numbers.n:
                logger.warning("%s: issuance candidate %s does not open correctly", self.id, index)
                raise AuthenticationFailed("Cut-and-choose check failed")
        kept = session["blinded"][session["keep"]]
        blind_signature = keys.blind_sign(self._blind_key, b64_to_int(kept))
        # the issuer's whole view of this issuance
        self.issuance_log.append({
            "session": session_id, "user": session["user"], "attributes": session["attributes"],
            "blinded": list(session["blinded"]), "keep": session["keep"],
            "opened": {str(i): dict(o) for i, o in sorted(openings.items())},
            "blind_signature": int_to_b64(blind_signature), "at": self.now,
        })
        note(session=session_id)
        return blind_signature

    # Verification

    @operation()
    def verify_presentation(self, presentation):
        result = check_presentation(presentation, self.trusted_issuers.get(presentation.issuer),
                                    self.spent_serials)
        if result.accepted:
            self.spent_serials.add(presentation.serial)
        else:
            logger.warning("%s rejected presentation: %s", self.id, result.reason)
        note(accepted=result.accepted, reason=result.reason, disclosed=sorted(result.disclosed))
        return result

    @operation()
    def complete_pabac_authentication(self, nonce, presentation, consent):
        request = self._lookup_request(nonce)
        if presentation.session != request.nonce:
            raise AuthenticationFailed("Presentation bound to another session")
        result = self.verify_presentation(presentation)
        if not result.accepted:
            raise PresentationRejected(result.reason)
        missing = sorted(set(request.requested) - set(result.disclosed))
        if missing:
            raise AuthenticationFailed(f"Presentation does not disclose {', '.join(missing)}")
        self._check_consent(request, consent)
        scope = {name: result.disclosed[name] for name in request.requested}
        issued = self._issue_code(request, None, (), scope, protocol="Pabac")
        note(sp=request.sp, request=request.request_id)
        return issued

    # Bus handlers

    def on_pabac_issue(self, envelope):
        payload = envelope.payload
        session_id, keep = self.begin_issuance(
            Assertion.from_payload(payload["assertion"]), payload["origin"],
            payload["attributes"], payload["blinded"])
        return {"session": session_id, "keep": keep}

    def on_pabac_open(self, envelope):
        payload = envelope.payload
        blind_signature = self.finish_issuance(payload["session"], payload["openings"])
        return {"signature": int_to_b64(blind_signature)}

    def on_pabac_presentation(self, envelope):
        payload = envelope.payload
        issued = self.complete_pabac_authentication(
            payload["nonce"], Presentation.from_payload(payload["presentation"]), payload["consent"])
        return {"flow": payload["flow"], "code": issued.code, "state": issued.csrf_token}


# Holder side

def _candidate(sim, issuer, attributes):
    serial = b64encode(sim.entropy.token_bytes(SERIAL_BYTES))
    salts = {name: b64encode(sim.entropy.token_bytes(SALT_BYTES)) for name in sorted(attributes)}
    commitments = {name: commit_attribute(name, value, b64decode(salts[name]))
                   for name, value in attributes.items()}
    numbers = issuer.blind_public_numbers
    message = keys.full_domain_hash(
        credential_digest(serial, aggregate_commitment(commitments), issuer.id), numbers.n)
    blinded, r = keys.blind(message, numbers, sim.entropy)
    return {"serial": serial, "salts": salts, "r": r, "message": message, "blinded": blinded}


def _issue_one(sim, issuer, device, attributes):
    challenge = issuer.action_challenge(device.owner)
    if not device.is_unlocked():
        device.user_gesture()
    assertion = device.sign_assertion(issuer.id, device.owner, challenge, device.origin)
    candidates = [_candidate(sim, issuer, attributes)
                  for _ in range(sim.settings["cut_and_choose"])]
    reply = device.send(issuer.id, "pabac.issue", {
        "assertion": assertion.to_payload(), "origin": device.origin, "attributes": attributes,
        "blinded": [int_to_b64(c["blinded"]) for c in candidates]})
    keep = reply["keep"]
    openings = {str(i): {"serial": c["serial"], "salts": c["salts"], "r": int_to_b64(c["r"])}
                for i, c in enumerate(candidates) if i != keep}
    reply = device.send(issuer.id, "pabac.open", {"session": reply["session"], "openings": openings})
    chosen = candidates[keep]
    numbers = issuer.blind_public_numbers
    signature = keys.unblind(b64_to_int(reply["signature"]), chosen["r"], numbers)
    if not keys.verify_rsa(signature, chosen["message"], numbers):
        raise IntegrityError("Issuer returned an invalid blind signature")
    return AttributeCredential(serial=chosen["serial"], issuer=issuer.id,
                               attributes=dict(attributes), salts=chosen["salts"],
                               signature=signature)


def issue_credential(sim, issuer, device, attributes, batch_size=1):
    """Run blind issuance batch_size times and install the tokens in the device wallet"""
    normalized = {name: sim.normalizer.normalize(name, raw).value
                  for name, raw in sorted(attributes.items())}
    credentials = [_issue_one(sim, issuer, device, normalized) for _ in range(batch_size)]
    device.wallet.extend(credentials)
    logger.info("Issued %d credentials over %r to %s", batch_size, sorted(normalized), device.id)
    return credentials


def covering_token(device, names):
    for credential in device.wallet:
        if credential.state is ShowState.FRESH and credential.covers(names):
            return credential
    raise NoCoveringToken(f"{device.id} holds no fresh credential covering {sorted(names)}")


def federated_pabac_login(sim, device, sp, idp, required, consent=None):
    """Log in to an SP that knows nothing about credentials: the IdP verifies, the SP gets a token"""
    required = sorted(required)
    credential = covering_token(device, required)
    flow = start_flow(sim, device, sp, idp, required, "pabac")
    idp.send_challenge(flow, device.id, "pabac.challenge")
    challenge = device.take_challenge(flow)
    if consent is None:
        consent = sim.actor(device.owner).consent_decisions(required, sp.id)
    presentation = present_credential(credential, required, challenge["nonce"], sim.entropy)
    reply = device.send(idp.id, "pabac.presentation", {
        "flow": flow, "nonce": challenge["nonce"], "presentation": presentation.to_payload(),
        "consent": consent})
    result = finish_flow(sim, device, sp, idp, flow, reply["code"], reply["state"])
    for name in required:
        sim.record_disclosure(device.owner, sp.id, name, result.token.scope[name], flow, "Pabac")
    return result


# Backup and restore (sealed with a key only the user can derive)

@dataclass(frozen=True)
class CredentialBackup:
    owner: str
    salt: str
    blob: str
    version: int = 0

    def to_payload(self):
        return {"owner": self.owner, "salt": self.salt, "blob": self.blob, "version": self.version}

    @classmethod
    def from_payload(cls, payload):
        return cls(payload["owner"], payload["salt"], payload["blob"], int(payload["version"]))


def seal_credentials(owner, credentials, password, settings, entropy):
    salt = entropy.token_bytes(16)
    key = keys.derive_key(password, salt, settings)
    fresh = [c.to_dict() for c in credentials if c.state is ShowState.FRESH]
    blob = keys.seal(key, canonical_json(fresh), owner.encode("utf-8"), entropy)
    return CredentialBackup(owner, b64encode(salt), b64encode(blob))


def open_backup(backup, password, settings):
    key = keys.derive_key(password, b64decode(backup.salt), settings)
    plaintext = keys.unseal(key, b64decode(backup.blob), backup.owner.encode("utf-8"))
    return [AttributeCredential.from_dict(data) for data in json.loads(plaintext)]


def backup_credentials(sim, device, idc, session_id, password):
    backup = seal_credentials(device.owner, device.wallet, password, sim.settings, sim.entropy)
    reply = device.send(idc.id, "cmm.backup", {"session": session_id, "backup": backup.to_payload()})
    return replace(backup, version=reply["version"])


def restore_credentials(sim, device, idc, session_id, password):
    reply = device.send(idc.id, "cmm.restore", {"session": session_id})
    credentials = open_backup(CredentialBackup.from_payload(reply["backup"]), password, sim.settings)
    device.wallet.extend(credentials)
    logger.info("Restored %d credentials to %s", len(credentials), device.id)
    return credentials
