# The Identity Consolidator (IDC): the user's central IdP.
#
# It keeps the registry of a user's SPs, IdPs and BAAs, locks accounts across them,
# proxies Mobile Connect for SPs, takes in identity documents and online attributes,
# shows the consent/profile surface, and walks a user who lost their device through
# the recovery ladder (backup password or document, then Mobile Connect, then BAA).

import collections
import enum
import logging
from dataclasses import dataclass, field

from . import keys
from .credentials import CredentialBackup
from .device import Assertion, BehaviorGenerator
from .errors import (
    AccessDenied, AccountLocked, AttributeNotVerified, AuthenticationFailed, DocumentParseError,
    IllegalTransition, McCheckFailed, NoBaaRegistered, NotFound, NoVerifier, RecoveryDenied,
    TentativeAccessDenied, UndefinedRisk, UnknownPrincipal, WeakPassword)
from .federation import (
    TOKEN_REJECTIONS, AccessToken, IdentityProvider, RelyingParty, finish_flow,
    start_flow, validate_token)
from .identity import AAL, AuthFactor, FactorKind, aal_for_factors
from .risk import federated_inference_risk
from .simnet import note, operation
from .world import DOCUMENT_SOURCE


logger = logging.getLogger(__name__)


# Entity registry

class EntityKind(enum.Enum):
    SP = "SP"
    IDP = "IdP"
    BAA = "BAA"
    MNO = "MNO"


# Kinds that authenticate users, and so take lock notifications
AUTHENTICATING_KINDS = frozenset({EntityKind.IDP, EntityKind.BAA, EntityKind.MNO})


@dataclass(frozen=True)
class RegisteredEntity:
    entity_id: str
    kind: EntityKind
    max_aal: AAL
    order: int

    def to_dict(self):
        return {"entity": self.entity_id, "kind": self.kind.value, "max_aal": self.max_aal.label}


class EntityRegistry:
    def __init__(self):
        self.catalog = {}
        self.users = collections.defaultdict(list)

    def register(self, entity_id, kind, max_aal):
        entity = self.catalog.get(entity_id)
        if entity is None:
            entity = RegisteredEntity(entity_id, EntityKind(kind), AAL.parse(max_aal),
                                      len(self.catalog))
            self.catalog[entity_id] = entity
        return entity

    def link(self, user, entity_id):
        if entity_id not in self.catalog:
            raise NotFound(f"{entity_id!r} is not a registered entity")
        if entity_id not in self.users[user]:
            self.users[user].append(entity_id)

    def unlink(self, user, entity_id):
        if entity_id not in self.users.get(user, ()):
            raise NotFound(f"{entity_id!r} is not registered for {user!r}")
        self.users[user].remove(entity_id)

    def entities_for(self, user, kinds=None):
        entities = [self.catalog[e] for e in self.users.get(user, ())]
        if kinds is not None:
            entities = [e for e in entities if e.kind in kinds]
        return entities

    def discover_baa(self, user):
        """Highest max AAL wins; ties go to the earliest registered"""
        baas = self.entities_for(user, {EntityKind.BAA})
        if not baas:
            raise NoBaaRegistered(f"No BAA registered for {user!r}")
        return min(baas, key=lambda e: (-e.max_aal, e.order)).entity_id

    def snapshot(self):
        return {
            "catalog": [e.to_dict() for e in sorted(self.catalog.values(), key=lambda e: e.order)],
            "users": {user: list(ids) for user, ids in sorted(self.users.items()) if ids},
        }


# Account locking

class LockReason(enum.Enum):
    USER_INITIATED = "UserInitiated"
    RISK_AUTO_LOCK = "RiskAutoLock"


class LockAction(enum.Enum):
    LOCK = "lock"
    UNLOCK = "unlock"


ALL_ENTITIES = "all"
RISK_ENGINE = "idc-risk-engine"


@dataclass(frozen=True)
class LockState:
    user: str
    scope: tuple
    reason: LockReason
    set_at: float
    locked: bool = True

    def covers(self, entity_id):
        return self.locked and (ALL_ENTITIES in self.scope or entity_id in self.scope)

    def to_dict(self):
        return {"user": self.user, "scope": list(self.scope), "reason": self.reason.value,
                "set_at": self.set_at, "locked": self.locked}


# Recovery ladder

class RecoveryState(enum.Enum):
    START = "Start"
    TENTATIVE_IDC = "TentativeIdc"
    MC_VERIFIED = "McVerified"
    BAA_TENTATIVE = "BaaTentative"
    COLLECTING_RECORDS = "CollectingRecords"
    VERDICT_RECEIVED = "VerdictReceived"
    FULL_ACCESS = "FullAccess"
    FAILED = "Failed"


class RecoveryEvent(enum.Enum):
    CREDENTIAL_ACCEPTED = "credential_accepted"
    MC_AUTHENTICATED = "mc_authenticated"
    BAA_LOGIN = "baa_login"
    RECORDS_STREAMING = "records_streaming"
    VERDICT = "verdict"
    FINALIZE = "finalize"


@dataclass(frozen=True)
class RecoveryStep:
    """One ladder event. ok is the lost-device confirmation for MC and the match for a verdict."""
    event: RecoveryEvent
    ok: bool = True


RECOVERY_STEPS = tuple(
    RecoveryStep(event, ok) for event in RecoveryEvent
    for ok in ((True, False) if event in (RecoveryEvent.MC_AUTHENTICATED, RecoveryEvent.VERDICT)
               else (True,)))

_LADDER = {
    (RecoveryState.START, RecoveryEvent.CREDENTIAL_ACCEPTED): RecoveryState.TENTATIVE_IDC,
    (RecoveryState.TENTATIVE_IDC, RecoveryEvent.MC_AUTHENTICATED): RecoveryState.MC_VERIFIED,
    (RecoveryState.MC_VERIFIED, RecoveryEvent.BAA_LOGIN): RecoveryState.BAA_TENTATIVE,
    (RecoveryState.BAA_TENTATIVE, RecoveryEvent.RECORDS_STREAMING): RecoveryState.COLLECTING_RECORDS,
    (RecoveryState.COLLECTING_RECORDS, RecoveryEvent.VERDICT): RecoveryState.VERDICT_RECEIVED,
    (RecoveryState.VERDICT_RECEIVED, RecoveryEvent.FINALIZE): RecoveryState.FULL_ACCESS,
}

_TENTATIVE_STATES = frozenset({
    RecoveryState.TENTATIVE_IDC, RecoveryState.MC_VERIFIED, RecoveryState.BAA_TENTATIVE,
    RecoveryState.COLLECTING_RECORDS, RecoveryState.VERDICT_RECEIVED})


def transition(state, step):
    """Next ladder state for step, or raise. Pure; the IDC applies it to sessions."""
    target = _LADDER.get((state, step.event))
    if target is None:
        raise IllegalTransition(f"{step.event.value} is not allowed in state {state.value}")
    if step.event is RecoveryEvent.MC_AUTHENTICATED and not step.ok:
        raise McCheckFailed("The MNO has no lost-device report with a reissued SIM")
    if step.event is RecoveryEvent.VERDICT and not step.ok:
        return RecoveryState.FAILED
    return target


def granted_aal(state):
    if state is RecoveryState.FULL_ACCESS:
        return AAL.AAL3
    if state in _TENTATIVE_STATES:
        return AAL.AAL1
    return AAL.NONE


@dataclass
class RecoverySession:
    user: str
    state: RecoveryState = RecoveryState.START
    lost_device: str = None
    evidence: list = field(default_factory=list)
    mc_session: str = None
    baa: str = None

    @property
    def aal(self):
        return granted_aal(self.state)


@dataclass
class IdcSession:
    session_id: str
    user: str
    factors: list = field(default_factory=list)
    recovery: RecoverySession = None

    @property
    def aal(self):
        if self.recovery is not None:
            return self.recovery.aal
        return aal_for_factors(self.factors)

    @property
    def tentative(self):
        return self.aal <= AAL.AAL1


@dataclass(frozen=True)
class McProxyBinding:
    flow: str
    request_id: str
    mno: str
    user: str
    mc_session: str
    attributes: tuple


class IdentityConsolidator(RelyingParty, IdentityProvider):
    def __init__(self, sim, idc_id):
        IdentityProvider.__init__(self, sim, idc_id)
        self._init_relying_party()
        self.admins = set()
        self.registry = EntityRegistry()
        self.locks = {}
        self.failure_reports = collections.defaultdict(collections.deque)
        self.backup_hashes = {}
        self.baa_passwords = {}
        self.credential_backups = {}
        self.idc_sessions = {}
        self.mc_mappings = {}
        self.mc_bindings = {}
        self.storage_preferences = {}
        self.document_match = {}

    # Registry (account management)

    def add_admin(self, admin):
        self.admins.add(admin)

    @operation()
    def register_entity(self, admin, entity_id, kind, max_aal, user=None):
        if admin not in self.admins:
            raise AccessDenied(f"{admin!r} may not register entities at {self.id}")
        entity = self.registry.register(entity_id, kind, max_aal)
        if user is not None:
            self.registry.link(user, entity_id)
        self.sim.record("entity", idc=self.id, user=user, **entity.to_dict())
        note(entity=entity_id, kind=entity.kind.value, user=user)
        return entity

    @operation()
    def discover_baa(self, sp, user):
        baa = self.registry.discover_baa(user)
        note(sp=sp, user=user, baa=baa)
        return baa

    def map_mc_attribute(self, attribute, mno_id):
        """Record that mno_id can verify attribute (known only to the IDC)"""
        self.sim.schema[attribute]
        self.mc_mappings[attribute] = mno_id

    # Sessions

    def _new_session(self, user, factors=(), recovery=None):
        session = IdcSession(self._mint_value("idc-", 8), user, list(factors), recovery)
        self.idc_sessions[session.session_id] = session
        self._record_session(session)
        return session

    def _record_session(self, session):
        self.sim.record("idc_session", idc=self.id, session=session.session_id, user=session.user,
                        aal=session.aal.label)

    def session(self, session_id, user=None):
        session = self.idc_sessions.get(session_id)
        if session is None or (user is not None and session.user != user):
            raise AuthenticationFailed(f"No IDC session {session_id!r}")
        return session

    def _require_aal(self, session, minimum, action):
        note(session=session.session_id, aal=session.aal.label)
        if session.aal < minimum:
            logger.warning("%s: %s refused for %s session of %r", self.id, action,
                           session.aal.label, session.user)
            raise TentativeAccessDenied(f"{action} needs {minimum.label}, session has "
                                        f"{session.aal.label}")

    def check_lock(self, user):
        if self.lock_covers(user, self.id):
            raise AccountLocked(f"Account {user!r} is locked at {self.id}")

    @operation()
    def login_with_fido(self, assertion, origin):
        """A non-tentative IDC session opened with a device assertion (AAL2, or AAL3 after MC step-up)"""
        self.check_lock(assertion.account_id)
        self._take_challenge(assertion.challenge, "action", assertion.account_id)
        registration = self._verify_assertion(assertion, origin)
        session = self._new_session(assertion.account_id, [registration.factor])
        note(user=assertion.account_id, session=session.session_id, aal=session.aal.label)
        return session

    @operation()
    def step_up_with_mc(self, session_id, mc_session, otp):
        session = self.session(session_id)
        token = self._finish_mc(mc_session, otp)
        self._require_mc_subject(session.user, token)
        session.factors.append(AuthFactor(FactorKind.MOBILE_CONNECT_SMS))
        self._record_session(session)
        note(session=session_id, aal=session.aal.label)
        return session

    # Locks

    def lock_covers(self, user, entity_id):
        state = self.locks.get(user)
        return state is not None and state.covers(entity_id)

    @operation()
    def set_lock(self, actor, user, scope, action, session_id=None):
        action = LockAction(action)
        scope = tuple(sorted(scope or (ALL_ENTITIES,)))
        if actor == RISK_ENGINE:
            reason = LockReason.RISK_AUTO_LOCK
            if action is LockAction.UNLOCK:
                raise AccessDenied("The risk engine only locks")
        else:
            reason = LockReason.USER_INITIATED
            session = self.session(session_id, user)
            if actor != user:
                raise AccessDenied(f"{actor!r} may not lock {user!r}")
            if action is LockAction.UNLOCK:
                self._require_aal(session, AAL.AAL2, "Unlocking accounts")
        previous = self.locks.get(user)
        held = set(previous.scope) if previous is not None and previous.locked else set()
        if action is LockAction.LOCK:
            remaining = held | set(scope)
            if ALL_ENTITIES in remaining:
                remaining = {ALL_ENTITIES}
            targets = self._lock_targets(user, scope)
        else:
            if ALL_ENTITIES in scope:
                released = held
            else:
                if ALL_ENTITIES in held:
                    held = set(self._lock_targets(user, (ALL_ENTITIES,))) | {self.id}
                released = held & set(scope)
            remaining = held - released
            targets = self._lock_targets(user, tuple(released))
        state = LockState(user, tuple(sorted(remaining)), reason, self.now, locked=bool(remaining))
        self.locks[user] = state
        msg_type = "amm.lock" if action is LockAction.LOCK else "amm.unlock"
        for target in targets:
            self.send(target, msg_type, {"user": user})
        self.sim.record("lock", idc=self.id, targets=targets, **state.to_dict())
        if action is LockAction.LOCK:
            logger.warning("%s locked %r at %s (%s)", self.id, user, ", ".join(scope), reason.value)
        note(user=user, action=action.value, scope=list(scope), reason=reason.value)
        return state

    def _lock_targets(self, user, scope):
        entities = [e.entity_id for e in self.registry.entities_for(user, AUTHENTICATING_KINDS)
                    if e.entity_id != self.id]
        try:
            devices = list(self.sim.actor(user).devices)
        except UnknownPrincipal:
            devices = []
        if ALL_ENTITIES in scope:
            return entities + devices
        return [t for t in entities + devices if t in scope]

    def on_amm_failure(self, envelope):
        """Failed authentication reports; too many in the window trip the risk lock"""
        user = envelope.payload["user"]
        reports = self.failure_reports[user]
        reports.append(self.now)
        while reports and reports[0] <= self.now - self.settings["auto_lock_window"]:
            reports.popleft()
        if len(reports) >= self.settings["auto_lock_failures"] and not self.lock_covers(user, ALL_ENTITIES):
            reports.clear()
            self.set_lock(RISK_ENGINE, user, (ALL_ENTITIES,), LockAction.LOCK)
        return {"accepted": True}

    # Mobile Connect

    def _mno_for(self, requested):
        mnos = {self.mc_mappings.get(name) for name in requested}
        if not requested or None in mnos or len(mnos) != 1:
            raise NoVerifier(f"No MNO can verify {', '.join(sorted(requested)) or 'the request'}")
        return mnos.pop()

    def _msisdn(self, user):
        account = self.accounts.get(user)
        attribute = account.attribute("msisdn") if account else None
        if attribute is not None:
            return attribute.value
        msisdn = getattr(self.sim.actor(user), "msisdn", None)
        if msisdn is None:
            raise NoVerifier(f"No phone number known for {user!r}")
        return msisdn

    def _start_mc(self, mno, user, requested):
        reply = self.send(mno, "mc.authorize", {"msisdn": self._msisdn(user),
                                                "requested": list(requested)})
        return reply["mc_session"]

    def _finish_mc(self, mc_session, otp):
        mno = self.mc_bindings[mc_session]
        self.send(mno, "mc.otp", {"mc_session": mc_session, "otp": otp})
        reply = self.send(mno, "mc.token", {"mc_session": mc_session})
        return self._accept_token(reply["token"], mno)

    def _accept_token(self, payload, issuer):
        token = AccessToken.from_payload(payload)
        issuer_key = self.trusted_idps.get(token.issuer)
        if issuer_key is None or token.issuer != issuer:
            raise AuthenticationFailed(f"Token from untrusted issuer {token.issuer!r}")
        check = validate_token(token, self.id, self.now, issuer_key)
        if not check.valid:
            raise TOKEN_REJECTIONS[check.reason](f"Token rejected: {check.reason}")
        return token

    def _require_mc_subject(self, user, token):
        if token.scope.get("msisdn") != self._msisdn(user):
            raise AuthenticationFailed("Mobile Connect verified another number")

    @operation()
    def begin_mc_check(self, user, requested=("msisdn",), mno=None):
        """Ask the MNO to text a one-time code to the user's number"""
        mno = mno or self._mno_for(requested)
        mc_session = self._start_mc(mno, user, requested)
        self.mc_bindings[mc_session] = mno
        note(user=user, mno=mno, mc_session=mc_session)
        return mc_session

    @operation()
    def begin_mc_proxy(self, flow, user):
        """Stand in for the SP of flow toward the MNO that can verify its attributes"""
        if flow not in self.flows:
            raise NotFound(f"No authorization request for flow {flow!r}")
        request = self.requests[self.flows[flow]]
        self.check_lock(user)
        mno = self._mno_for(request.requested)
        mc_session = self._start_mc(mno, user, request.requested)
        self.mc_bindings[mc_session] = mno
        binding = McProxyBinding(flow, request.request_id, mno, user, mc_session, request.requested)
        self.mc_bindings[flow] = binding
        note(sp=request.sp, mno=mno, request=request.request_id)
        return binding

    @operation()
    def complete_mc_proxy(self, flow, otp, consent):
        binding = self.mc_bindings.get(flow)
        if not isinstance(binding, McProxyBinding):
            raise AuthenticationFailed(f"No Mobile Connect proxy session for {flow!r}")
        self.check_lock(binding.user)
        # a wrong code leaves the request open while the MNO still allows attempts
        request = self._peek_request(self.requests[binding.request_id].nonce)
        self._check_consent(request, consent)
        token = self._finish_mc(binding.mc_session, otp)
        missing = [name for name in binding.attributes if name not in token.scope]
        if missing:
            raise AttributeNotVerified(f"{binding.mno} did not verify {', '.join(missing)}")
        self._lookup_request(request.nonce)
        self.enroll_user(binding.user)
        scope = {name: token.scope[name] for name in binding.attributes}
        issued = self._issue_code(request, binding.user,
                                  (AuthFactor(FactorKind.MOBILE_CONNECT_SMS),), scope)
        note(sp=request.sp, mno=binding.mno, request=request.request_id)
        return issued

    def on_mc_submit(self, envelope):
        payload = envelope.payload
        issued = self.complete_mc_proxy(payload["flow"], payload["otp"], payload["consent"])
        return {"flow": payload["flow"], "code": issued.code, "state": issued.csrf_token}

    # Identity acquisition

    def _store(self, user, attribute):
        allowed = self.storage_preferences.get(user)
        if allowed is not None and attribute.name not in allowed:
            logger.info("%s: not storing %r for %r (storage preference)", self.id, attribute.name, user)
            return False
        self.set_attribute(user, attribute)
        return True

    def _document_identity(self, document):
        fields = self.sim.document_authority.verify_document(document)
        return [self.sim.normalizer.normalize(name, fields[name], source=DOCUMENT_SOURCE,
                                              verified_at=self.now)
                for name in ("name", "birthdate", "country")]

    def document_matches(self, user, document):
        """Does document carry the identity the IDC already holds from a document?"""
        account = self.accounts.get(user)
        if account is None:
            return False
        try:
            attributes = self._document_identity(document)
        except DocumentParseError:
            return False
        for attribute in attributes:
            stored = account.attribute(attribute.name)
            if stored is None or stored.source != DOCUMENT_SOURCE or stored.value != attribute.value:
                return False
        return True

    @operation()
    def acquire_identity_document(self, user, document):
        attributes = self._document_identity(document)
        matched = self.document_matches(user, document)
        self.enroll_user(user)
        for attribute in attributes:
            self._store(user, attribute)
        self.document_match[user] = matched
        note(user=user, attributes=[a.name for a in attributes], document_match=matched)
        return attributes

    @operation()
    def acquire_online_attributes(self, session_id, flow):
        """Fuse what another IdP released to the IDC (acting as its SP) into the repository"""
        session = self.session(session_id)
        self._require_aal(session, AAL.AAL2, "Acquiring attributes")
        sp_session = self._session(flow)
        if self.sim.actor(sp_session["client"]).owner != session.user:
            raise AccessDenied("That login belongs to another user")
        token = sp_session.get("token")
        if token is None:
            raise NotFound(f"Flow {flow!r} has no token")
        stored = []
        for name, value in sorted(token.scope.items()):
            attribute = self.sim.normalizer.normalize(name, value, source=token.issuer,
                                                      verified_at=self.now)
            if self._store(session.user, attribute):
                stored.append(name)
        note(user=session.user, issuer=token.issuer, stored=stored)
        return stored

    @operation()
    def transfer_attribute(self, session_id, name, target):
        session = self.session(session_id)
        self._require_aal(session, AAL.AAL2, "Transferring attributes")
        attribute = self.account(session.user).attribute(name)
        if attribute is None:
            raise NotFound(f"{self.id} holds no {name!r} for {session.user!r}")
        self.send(target, "attribute.transfer", {"user": session.user, "name": name,
                                                 "value": attribute.value, "source": attribute.source})
        note(user=session.user, attribute=name, target=target)

    @operation()
    def set_storage_preference(self, session_id, names):
        session = self.session(session_id)
        self._require_aal(session, AAL.AAL2, "Changing storage preferences")
        for name in names:
            self.sim.schema[name]
        self.storage_preferences[session.user] = frozenset(names)
        account = self.accounts.get(session.user)
        if account is not None:
            account.attributes = [a for a in account.attributes if a.name in names]
        note(user=session.user, names=sorted(names))

    # Backup passwords and credential backups

    def enroll_backup_password(self, user, password):
        if len(password) < self.settings["backup_password_min_length"]:
            raise WeakPassword(f"A backup password needs at least "
                               f"{self.settings['backup_password_min_length']} characters")
        self.enroll_user(user)
        self.backup_hashes[user] = keys.PasswordHash.create(password, self.settings, self.sim.entropy)

    @operation()
    def backup_baa_passwords(self, session_id, passwords):
        session = self.session(session_id)
        self._require_aal(session, AAL.AAL2, "Storing backup passwords")
        self.baa_passwords.setdefault(session.user, {}).update(passwords)
        note(user=session.user, entities=sorted(passwords))

    @operation()
    def read_backup_passwords(self, session_id):
        session = self.session(session_id)
        note(session=session_id, aal=session.aal.label)
        return dict(self.baa_passwords.get(session.user, {}))

    @operation()
    def store_credential_backup(self, session_id, requester, backup):
        session = self.session(session_id, self.sim.actor(requester).owner)
        self._require_aal(session, AAL.AAL2, "Backing up credentials")
        previous = self.credential_backups.get(session.user)
        backup = CredentialBackup(backup.owner, backup.salt, backup.blob,
                                  previous.version + 1 if previous else 1)
        self.credential_backups[session.user] = backup
        self.sim.record("backup", idc=self.id, user=session.user, version=backup.version)
        note(user=session.user, version=backup.version)
        return backup

    @operation()
    def restore_credential_backup(self, session_id, requester):
        session = self.session(session_id, self.sim.actor(requester).owner)
        # a new device gets the wallet only after recovery or an MC step-up
        self._require_aal(session, AAL.AAL3, "Restoring credentials")
        backup = self.credential_backups.get(session.user)
        if backup is None:
            raise NotFound(f"No credential backup for {session.user!r}")
        note(user=session.user, version=backup.version)
        return backup

    @operation()
    def view_credentials(self, session_id, requester):
        session = self.session(session_id, self.sim.actor(requester).owner)
        self._require_aal(session, AAL.AAL2, "Viewing PABAC credentials")
        backup = self.credential_backups.get(session.user)
        return {"version": backup.version if backup else 0}

    def on_cmm_backup(self, envelope):
        backup = self.store_credential_backup(envelope.payload["session"], envelope.sender,
                                              CredentialBackup.from_payload(envelope.payload["backup"]))
        return {"version": backup.version}

    def on_cmm_restore(self, envelope):
        backup = self.restore_credential_backup(envelope.payload["session"], envelope.sender)
        return {"backup": backup.to_payload()}

    def on_pabac_view(self, envelope):
        return self.view_credentials(envelope.payload["session"], envelope.sender)

    # Recovery

    @operation()
    def start_recovery(self, user, password=None, document=None, lost_device=None):
        """Open a tentative (AAL1) session with the backup password or a matching document"""
        stored = self.backup_hashes.get(user)
        by_password = password is not None and stored is not None \
            and stored.verify(password, self.settings)
        by_document = document is not None and self.document_matches(user, document)
        if not (by_password or by_document):
            logger.warning("%s: recovery refused for %r", self.id, user)
            raise RecoveryDenied(f"Neither the backup password nor a document matched for {user!r}")
        recovery = RecoverySession(user, lost_device=lost_device)
        recovery.state = transition(recovery.state, RecoveryStep(RecoveryEvent.CREDENTIAL_ACCEPTED))
        recovery.evidence.append("password" if by_password else "document")
        session = self._new_session(user, recovery=recovery)
        self.sim.record("recovery", idc=self.id, session=session.session_id, user=user,
                        state=recovery.state.value, aal=session.aal.label)
        note(user=user, session=session.session_id, by=recovery.evidence[-1])
        return session

    def _recovery(self, session_id):
        session = self.session(session_id)
        if session.recovery is None:
            raise IllegalTransition(f"Session {session_id!r} is not a recovery session")
        return session

    @operation()
    def advance_recovery(self, session_id, step):
        session = self._recovery(session_id)
        recovery = session.recovery
        before = recovery.state
        note(session=session_id, state=before.value, event=step.event.value, ok=step.ok)
        recovery.state = transition(before, step)
        recovery.evidence.append(step.event.value)
        self.sim.record("recovery", idc=self.id, session=session_id, user=session.user,
                        state=recovery.state.value, aal=session.aal.label)
        self._record_session(session)
        if recovery.state is RecoveryState.FULL_ACCESS:
            self._grant_full_access(session)
        elif recovery.state is RecoveryState.FAILED:
            logger.warning("%s: recovery of %r failed on a negative verdict", self.id, session.user)
        note(to=recovery.state.value)
        return recovery

    def _grant_full_access(self, session):
        """Let the new device enroll keys everywhere; revoke the lost one"""
        user = session.user
        lost = session.recovery.lost_device
        if lost is not None and user in self.accounts:
            self.revoke_device(user, lost)
        self.grant_enrollment(user)
        for entity in self.registry.entities_for(user, {EntityKind.IDP}):
            self.send(entity.entity_id, "enroll.grant", {"user": user, "revoke_device": lost})
        if session.recovery.baa is not None:
            self.send(session.recovery.baa, "baa.promote", {"user": user})
        logger.info("%s: %r recovered full access", self.id, user)

    @operation()
    def recovery_mc_start(self, session_id):
        session = self._recovery(session_id)
        if session.recovery.state is not RecoveryState.TENTATIVE_IDC:
            raise IllegalTransition("Mobile Connect comes right after the tentative login")
        mno = self._mno_for(("msisdn",))
        session.recovery.mc_session = self._start_mc(mno, session.user, ("msisdn",))
        self.mc_bindings[session.recovery.mc_session] = mno
        note(session=session_id, mno=mno)
        return session.recovery.mc_session

    @operation()
    def recovery_mc_finish(self, session_id, otp):
        """Check the code, then ask the MNO whether the number was reported lost and reissued"""
        session = self._recovery(session_id)
        mc_session = session.recovery.mc_session
        if mc_session is None:
            raise IllegalTransition("No Mobile Connect check was started")
        session.recovery.mc_session = None
        token = self._finish_mc(mc_session, otp)
        self._require_mc_subject(session.user, token)
        status = self.send(self.mc_bindings[mc_session], "mc.status",
                           {"msisdn": self._msisdn(session.user)})
        confirmed = bool(status["reported_lost"] and status["sim_reissued"])
        note(session=session_id, lost_confirmed=confirmed)
        return self.advance_recovery(session_id, RecoveryStep(RecoveryEvent.MC_AUTHENTICATED,
                                                              confirmed))

    @operation()
    def recovery_baa_login(self, session_id, baa):
        """The user got tentative access at their BAA; only records from that login on will count.

        The BAA keeps the login boundary itself, so the IDC never forwards one.
        """
        session = self._recovery(session_id)
        if baa not in [e.entity_id for e in self.registry.entities_for(session.user, {EntityKind.BAA})]:
            raise NoBaaRegistered(f"{baa!r} is not a BAA of {session.user!r}")
        recovery = self.advance_recovery(session_id, RecoveryStep(RecoveryEvent.BAA_LOGIN))
        recovery.baa = baa
        note(session=session_id, baa=baa)
        return recovery

    @operation()
    def recovery_verdict(self, session_id):
        session = self._recovery(session_id)
        recovery = session.recovery
        if recovery.state is not RecoveryState.COLLECTING_RECORDS:
            raise IllegalTransition("No records are being collected")
        reply = self.send(recovery.baa, "verdict.request", {
            "user": session.user, "recovery": True})
        token = self._accept_token(reply["token"], recovery.baa)
        match = token.scope.get("behavior") == "match"
        note(session=session_id, verdict=token.scope.get("behavior"))
        self.advance_recovery(session_id, RecoveryStep(RecoveryEvent.VERDICT, match))
        if match:
            self.advance_recovery(session_id, RecoveryStep(RecoveryEvent.FINALIZE))
        return recovery

    # Views and edits

    @operation()
    def tentative_view(self, session_id):
        """What a tentative user may see: trusted IdPs, their AALs and stored backup passwords"""
        session = self.session(session_id)
        note(session=session_id, aal=session.aal.label)
        return {
            "idps": [{"entity": e.entity_id, "max_aal": e.max_aal.label}
                     for e in self.registry.entities_for(
                         session.user, {EntityKind.IDP, EntityKind.BAA, EntityKind.MNO})],
            "backup_passwords": dict(self.baa_passwords.get(session.user, {})),
        }

    @operation()
    def consent_and_profile_view(self, session_id):
        session = self.session(session_id)
        if session.tentative:
            note(session=session_id, aal=session.aal.label, tentative=True)
            return self.tentative_view(session_id)
        disclosures = self.sim.ledger.by_audience(session.user)
        user_agent = self.sim.actor(session.user)
        view = {"disclosures": disclosures, "risks": {}, "consent": user_agent.consent_policy.to_dict()}
        for sp in sorted(disclosures):
            indicator = self._inference_risk(session.user, sp)
            if indicator is not None:
                view["risks"][sp] = indicator.to_dict()
        note(session=session_id, aal=session.aal.label, audiences=sorted(disclosures))
        return view

    def _inference_risk(self, user, sp):
        """The most guessable undisclosed population attribute for sp, if any"""
        entries = self.sim.ledger.linkable_slice(user, sp)
        if not entries:
            return None
        population = self.sim.population
        revealed = {e.attribute for e in entries}
        worst = None
        for column in population.columns:
            if column in revealed:
                continue
            try:
                indicator = federated_inference_risk(entries, column, population)
            except UndefinedRisk:
                continue
            if worst is None or indicator.score > worst.score:
                worst = indicator
        return worst

    @operation()
    def edit_consent(self, session_id, attribute, audience, allow):
        session = self.session(session_id)
        self._require_aal(session, AAL.AAL2, "Editing consent")
        self.sim.schema[attribute]
        self.sim.actor(session.user).consent_policy.grant(attribute, audience, allow)
        note(user=session.user, attribute=attribute, audience=audience, allow=bool(allow))

    @operation()
    def list_accounts(self, session_id):
        session = self.session(session_id)
        self._require_aal(session, AAL.AAL2, "Listing accounts")
        return [e.to_dict() for e in self.registry.entities_for(session.user)]

    @operation()
    def remove_account(self, session_id, entity_id):
        session = self.session(session_id)
        self._require_aal(session, AAL.AAL2, "Removing accounts")
        self.registry.unlink(session.user, entity_id)
        self.sim.record("entity_removed", idc=self.id, user=session.user, entity=entity_id)
        note(user=session.user, entity=entity_id)

    @operation()
    def delete_account(self, session_id):
        session = self.session(session_id)
        self._require_aal(session, AAL.AAL2, "Deleting the account")
        user = session.user
        for entity in list(self.registry.users.get(user, ())):
            self.registry.unlink(user, entity)
            self.sim.record("entity_removed", idc=self.id, user=user, entity=entity)
        for store in (self.accounts, self.backup_hashes, self.baa_passwords,
                      self.credential_backups, self.storage_preferences):
            store.pop(user, None)
        for sid in [s for s, other in self.idc_sessions.items() if other.user == user]:
            del self.idc_sessions[sid]
        self.sim.record("account_deleted", idc=self.id, user=user)
        note(user=user)

    # Bus handlers for the user's device

    def on_idc_login(self, envelope):
        session = self.login_with_fido(Assertion.from_payload(envelope.payload["assertion"]),
                                       envelope.payload["origin"])
        return {"session": session.session_id, "aal": session.aal.label}

    def checkpoint(self):
        """Persistent state for the run directory; rebuilt offline from the event log"""
        return {
            "registry": self.registry.snapshot(),
            "locks": {user: state.to_dict() for user, state in sorted(self.locks.items())},
            "backups": {user: b.version for user, b in sorted(self.credential_backups.items())},
        }


# Drivers (the user agent's side)

def idc_fido_login(sim, device, idc):
    challenge = idc.action_challenge(device.owner)
    if not device.is_unlocked():
        device.user_gesture()
    assertion = device.sign_assertion(idc.id, device.owner, challenge, device.origin)
    reply = device.send(idc.id, "idc.login", {"assertion": assertion.to_payload(),
                                              "origin": device.origin})
    return reply["session"]


def idc_step_up(sim, device, idc, session_id):
    """Add a Mobile Connect factor to a FIDO session (AAL3 with a TEE-backed key)"""
    mc_session = idc.begin_mc_check(device.owner)
    return idc.step_up_with_mc(session_id, mc_session, _phone_of(sim, device.owner).latest_otp())


def _phone_of(sim, user):
    """The user's device that currently receives their SMS"""
    user_agent = sim.actor(user)
    for device_id in reversed(user_agent.devices):
        device = sim.actor(device_id)
        if device.msisdn is not None and device.msisdn == user_agent.msisdn:
            return device
    raise NotFound(f"{user!r} has no device with their phone number")


def mc_proxy_authenticate(sim, device, sp, idc, requested=None, consent=None, otp=None):
    """SP login with attributes only an MNO can verify, proxied by the IDC.

    Returns the FlowResult whose token the IDC issued; the SP never talks to the MNO.
    """
    flow = start_flow(sim, device, sp, idc, requested, "mc")
    binding = idc.begin_mc_proxy(flow, device.owner)
    if otp is None:
        otp = _phone_of(sim, device.owner).latest_otp()
    if consent is None:
        consent = sim.actor(device.owner).consent_decisions(binding.attributes, sp.id)
    reply = device.send(idc.id, "mc.submit", {"flow": flow, "otp": otp, "consent": consent})
    return finish_flow(sim, device, sp, idc, flow, reply["code"], reply["state"])


def acquire_online_attributes(sim, device, idc, idp, session_id, requested):
    """Log in to idp with the IDC as its SP, then fuse the released attributes at the IDC"""
    from .federation import fido_login
    result = fido_login(sim, device, idc, idp, requested)
    return idc.acquire_online_attributes(session_id, result.flow)


def recover_account(sim, new_device, idc, baa, password=None, document=None, lost_device=None,
                    generator=None, records=None):
    """Walk the whole recovery ladder from the new device. Returns the recovery session id.

    Assumes the MNO already moved the user's number to new_device.
    """
    user = new_device.owner
    session = idc.start_recovery(user, password=password, document=document, lost_device=lost_device)
    idc.recovery_mc_start(session.session_id)
    idc.recovery_mc_finish(session.session_id, new_device.latest_otp())
    baa_password = sim.actor(user).baa_passwords.get(baa.id)
    if baa_password is None:
        baa_password = idc.read_backup_passwords(session.session_id).get(baa.id)
    new_device.baa = baa.id
    new_device.send(baa.id, "baa.login", {"user": user, "password": baa_password})
    idc.recovery_baa_login(session.session_id, baa.id)
    idc.advance_recovery(session.session_id, RecoveryStep(RecoveryEvent.RECORDS_STREAMING))
    count = records if records is not None else sim.settings["baa_min_window"]
    if generator is None:
        generator = BehaviorGenerator.default(dimension=sim.settings["baa_feature_dimension"])
    new_device.emit_behavior(generator, count, start=sim.clock.now)
    idc.recovery_verdict(session.session_id)
    return session.session_id
