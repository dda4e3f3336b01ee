# The Simulation: one seeded world holding the clock, bus, event log and principals

import logging

from . import keys
from .config import load_settings
from .entropy import Entropy
from .errors import DocumentParseError, UnknownPrincipal
from .identity import AttributeNormalizer, Principal, Role, SchemaRegistry
from .risk import DisclosureEntry, DisclosureLedger, PopulationTable, Protocol
from .simnet import EventLog, MessageBus, SimClock
from .utils import b64decode, b64encode, canonical_json


logger = logging.getLogger(__name__)

DOCUMENT_SOURCE = "idc-document"
DOCUMENT_FIELDS = ("document_id", "name", "birthdate", "country")


class DocumentAuthority:
    """Fixture issuer of simulated e-passports (signed structured records)"""

    def __init__(self, sim, authority_id="passport-office"):
        self.id = authority_id
        self._signer = keys.SigningIdentity(sim.entropy)
        self.public_key = self._signer.public_key

    def issue_document(self, document_id, name, birthdate, country):
        record = {"document_id": document_id, "name": name, "birthdate": birthdate,
                  "country": country, "authority": self.id}
        return dict(record, signature=b64encode(self._signer.sign(canonical_json(record))))

    def verify_document(self, document):
        """Return the document fields, or raise DocumentParseError"""
        if not isinstance(document, dict):
            raise DocumentParseError("A document must be a record")
        try:
            record = {name: document[name] for name in DOCUMENT_FIELDS}
            record["authority"] = document["authority"]
            signature = b64decode(document["signature"])
        except (KeyError, ValueError) as exc:
            raise DocumentParseError(f"Malformed document: {exc}") from exc
        if record["authority"] != self.id or not all(isinstance(v, str) for v in record.values()):
            raise DocumentParseError("Malformed document")
        if not keys.verify_signature(self.public_key, signature, canonical_json(record)):
            raise DocumentParseError("Document signature does not verify")
        return {name: record[name] for name in DOCUMENT_FIELDS}


class Simulation:
    """Everything one run shares.

    All randomness comes from self.entropy and all time from self.clock, so
    two simulations built from the same seed and driven the same way produce
    byte-identical event logs.
    """

    def __init__(self, seed=0, settings=None, profile="default", log_path=None,
                 persistent=False, keep_log=True, schema=None, trust=None, population=None):
        self.seed = int(seed)
        self.settings = load_settings(settings, profile)
        self.clock = SimClock()
        self.entropy = Entropy(self.seed)
        self.log = EventLog(log_path, persistent=persistent, keep=keep_log)
        self.bus = MessageBus(self)
        self.schema = schema if schema is not None else SchemaRegistry()
        self.normalizer = AttributeNormalizer(self.schema)
        self.trust = dict(trust or {})
        self.ledger = DisclosureLedger()
        self.principals = {}
        self.document_authority = DocumentAuthority(self)
        self._population_source = population
        self._population = None
        self.log.append({"event": "start", "seed": self.seed, "settings": self.settings})

    # Principals

    def add_principal(self, principal):
        if principal.id in self.principals:
            raise ValueError(f"Duplicate principal id {principal.id!r}")
        self.principals[principal.id] = principal
        self.log.append({"event": "principal", "id": principal.id, "role": principal.role.value,
                         "display_name": principal.display_name})
        return principal

    def principal(self, principal_id):
        try:
            return self.principals[principal_id]
        except KeyError:
            raise UnknownPrincipal(f"Undeclared principal {principal_id!r}")

    def actor(self, actor_id):
        return self.bus.actor(actor_id)

    def add_user(self, user_id, display_name="", backup_password=None, msisdn=None):
        from .device import UserAgent
        self.add_principal(Principal(user_id, Role.USER, display_name))
        return UserAgent(self, user_id, display_name, backup_password=backup_password, msisdn=msisdn)

    def add_device(self, device_id, owner, tee=False, msisdn=None):
        from .device import TeeGrade, UserDevice
        user = self.actor(owner)
        device = UserDevice(self, device_id, owner,
                            tee_grade=TeeGrade.TEE if tee else TeeGrade.SOFTWARE, msisdn=msisdn)
        user.devices.append(device_id)
        self.log.append({"event": "device", "id": device_id, "owner": owner,
                         "tee_grade": device.tee_grade.value})
        return device

    def add_idp(self, idp_id, display_name="", pabac=False):
        from .credentials import PabacProvider
        from .federation import IdentityProvider
        self.add_principal(Principal(idp_id, Role.IDP, display_name))
        cls = PabacProvider if pabac else IdentityProvider
        return cls(self, idp_id)

    def add_sp(self, sp_id, display_name="", policy=None):
        from .federation import ServiceProvider
        self.add_principal(Principal(sp_id, Role.SP, display_name))
        return ServiceProvider(self, sp_id, policy=policy)

    def add_idc(self, idc_id="idc", display_name=""):
        from .consolidator import IdentityConsolidator
        self.add_principal(Principal(idc_id, Role.IDC, display_name))
        return IdentityConsolidator(self, idc_id)

    def add_baa(self, baa_id, display_name=""):
        from .behavior import BehavioralAuthority
        self.add_principal(Principal(baa_id, Role.BAA, display_name))
        return BehavioralAuthority(self, baa_id)

    def add_mno(self, mno_id, display_name=""):
        from .mobile_connect import MobileNetworkOperator
        self.add_principal(Principal(mno_id, Role.MNO, display_name))
        return MobileNetworkOperator(self, mno_id)

    # Shared services

    def trust_of(self, source):
        if source == DOCUMENT_SOURCE:
            return self.trust.get(source, self.settings["document_trust"])
        return self.trust.get(source, self.settings["default_trust"])

    def trust_table(self):
        return _TrustTable(self)

    @property
    def population(self):
        if self._population is None:
            source = self._population_source
            self._population = source if isinstance(source, PopulationTable) else PopulationTable.load(source)
        return self._population

    def record_disclosure(self, user, sp, attribute, value, session_id, protocol):
        entry = DisclosureEntry(user, sp, attribute, value, session_id, Protocol(protocol),
                                self.clock.now)
        self.ledger.record(entry)
        self.log.append({"event": "disclosure", "entry": entry.to_dict()})
        return entry

    def record_op(self, op, actor, outcome, details):
        self.log.append({"event": "op", "op": op, "actor": actor, "outcome": outcome,
                         "at": self.clock.now, "details": details})

    def record(self, event, **fields):
        """Append a state event (locks, registry changes) for offline replay"""
        return self.log.append(dict(fields, event=event, at=self.clock.now))

    def step(self):
        self.log.step()

    def close(self):
        self.log.close()


class _TrustTable:
    """Mapping view of per-source trust for fuse_attributes"""

    def __init__(self, sim):
        self._sim = sim

    def get(self, source, default=None):
        return self._sim.trust_of(source)

