# Shared identity vocabulary: principals, attributes, assurance levels, consent,
# and attribute normalization/fusion

import csv
import enum
import logging
import os
from dataclasses import dataclass, field, replace
from datetime import date, datetime

from .errors import NormalizationError, SchemaError
from .utils import to_bool


logger = logging.getLogger(__name__)

here = os.path.abspath(os.path.dirname(__file__))
COUNTRY_TABLE_PATH = os.path.join(here, "data", "iso3166.csv")


class Role(enum.Enum):
    USER = "User"
    SP = "SP"
    IDP = "IdP"
    IDC = "IDC"
    BAA = "BAA"
    MNO = "MNO"


@dataclass(frozen=True)
class Principal:
    id: str
    role: Role
    display_name: str = ""

    def __post_init__(self):
        if not self.id:
            raise ValueError("Principal id is required")
        if not isinstance(self.role, Role):
            object.__setattr__(self, "role", Role(self.role))


class AAL(enum.IntEnum):
    NONE = 0
    AAL1 = 1
    AAL2 = 2
    AAL3 = 3

    @property
    def label(self):
        return "None" if self is AAL.NONE else self.name

    @classmethod
    def parse(cls, value):
        if isinstance(value, AAL):
            return value
        if isinstance(value, int):
            return cls(value)
        text = str(value)
        return cls.NONE if text in ("None", "NONE", "") else cls[text.upper()]


class FactorKind(enum.Enum):
    BACKUP_PASSWORD = "BackupPassword"
    BEHAVIORAL = "Behavioral"
    FIDO_SOFTWARE = "FidoSoftware"
    FIDO_TEE = "FidoTee"
    MOBILE_CONNECT_SMS = "MobileConnectSms"
    DOCUMENT_MATCH = "DocumentMatch"


@dataclass(frozen=True)
class AuthFactor:
    kind: FactorKind
    hardware_backed: bool = None

    def __post_init__(self):
        if not isinstance(self.kind, FactorKind):
            object.__setattr__(self, "kind", FactorKind(self.kind))
        if self.hardware_backed is None:
            object.__setattr__(self, "hardware_backed", self.kind is FactorKind.FIDO_TEE)
        if self.kind is FactorKind.FIDO_TEE and not self.hardware_backed:
            raise ValueError("A FidoTee factor is always hardware backed")


FIDO_KINDS = frozenset({FactorKind.FIDO_SOFTWARE, FactorKind.FIDO_TEE})
# Factors that count as the independent second factor next to a TEE-backed key.
# Behavioral evidence never raises the assurance level on its own or as a second factor.
SECOND_FACTOR_KINDS = frozenset({
    FactorKind.BACKUP_PASSWORD, FactorKind.MOBILE_CONNECT_SMS, FactorKind.DOCUMENT_MATCH})
AAL1_KINDS = frozenset({FactorKind.BACKUP_PASSWORD, FactorKind.DOCUMENT_MATCH})


def aal_for_factors(factors):
    """Return the highest AAL the set of AuthFactors satisfies"""
    kinds = {AuthFactor(f).kind if isinstance(f, (str, FactorKind)) else f.kind for f in factors}
    if FactorKind.FIDO_TEE in kinds and kinds & SECOND_FACTOR_KINDS:
        return AAL.AAL3
    if kinds & FIDO_KINDS:
        return AAL.AAL2
    if kinds & AAL1_KINDS:
        return AAL.AAL1
    return AAL.NONE


# Attributes

VALUE_TYPES = ("text", "integer", "date", "boolean")
RULES = ("date", "country-code", "case-fold", "integer", "boolean")


@dataclass(frozen=True)
class AttributeSchema:
    name: str
    value_type: str = "text"
    rule: str = "case-fold"
    day_first: bool = True

    def __post_init__(self):
        if self.value_type not in VALUE_TYPES:
            raise SchemaError(f"Invalid value type {self.value_type!r} for {self.name!r}")
        if self.rule not in RULES:
            raise SchemaError(f"Invalid normalization rule {self.rule!r} for {self.name!r}")


DEFAULT_SCHEMA = (
    AttributeSchema("name"),
    AttributeSchema("email"),
    AttributeSchema("msisdn"),
    AttributeSchema("gender"),
    AttributeSchema("occupation"),
    AttributeSchema("marital_status"),
    AttributeSchema("education"),
    AttributeSchema("document_id"),
    AttributeSchema("behavior"),
    AttributeSchema("country", "text", "country-code"),
    AttributeSchema("birthdate", "date", "date"),
    AttributeSchema("age", "integer", "integer"),
    AttributeSchema("over18", "boolean", "boolean"),
    AttributeSchema("sim_reissued", "boolean", "boolean"),
)


class SchemaRegistry:
    """One AttributeSchema per attribute name"""

    def __init__(self, entries=DEFAULT_SCHEMA):
        self._entries = {}
        for entry in entries:
            self.add(entry)

    def add(self, entry):
        if entry.name in self._entries and self._entries[entry.name] != entry:
            raise SchemaError(f"Duplicate schema entry for {entry.name!r}")
        self._entries[entry.name] = entry

    def __getitem__(self, name):
        try:
            return self._entries[name]
        except KeyError:
            raise SchemaError(f"Unknown attribute {name!r}")

    def __contains__(self, name):
        return name in self._entries

    def names(self):
        return sorted(self._entries)

    @classmethod
    def from_config(cls, entries):
        """Default schema extended with scenario entries ({name, value_type, rule, day_first})"""
        registry = cls()
        for raw in entries or ():
            try:
                entry = AttributeSchema(
                    name=raw["name"], value_type=raw.get("value_type", "text"),
                    rule=raw.get("rule", "case-fold"), day_first=to_bool(raw.get("day_first", True)))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"Invalid schema entry {raw!r}") from exc
            registry._entries[entry.name] = entry
        return registry


@dataclass(frozen=True)
class IdentityAttribute:
    name: str
    value: object
    source: str = None
    verified_at: float = 0.0

    def to_dict(self):
        return {"name": self.name, "value": self.value, "source": self.source,
                "verified_at": self.verified_at}


def load_country_table(path=COUNTRY_TABLE_PATH):
    """Map casefolded country names and codes to ISO-3166 alpha-2 codes"""
    table = {}
    with open(path, encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            code = row["alpha2"].strip().upper()
            for key in (row["alpha2"], row["alpha3"], row["name"]):
                table[key.strip().casefold()] = code
    return table


DATE_FORMATS_DAY_FIRST = ("%d/%m/%Y", "%d-%m-%Y", "%d.%m.%Y")
DATE_FORMATS_MONTH_FIRST = ("%m/%d/%Y", "%m-%d-%Y", "%m.%d.%Y")


class AttributeNormalizer:
    """Canonicalizes raw attribute values according to their schema rule"""

    def __init__(self, schema=None, countries=None):
        self.schema = schema if schema is not None else SchemaRegistry()
        self.countries = countries if countries is not None else load_country_table()

    def normalize(self, name, raw, source=None, verified_at=0.0):
        entry = self.schema[name]
        rule = getattr(self, "_rule_" + entry.rule.replace("-", "_"))
        try:
            value = rule(raw, entry)
        except (TypeError, ValueError) as exc:
            raise NormalizationError(f"Cannot normalize {name!r} value {raw!r}") from exc
        return IdentityAttribute(name=name, value=value, source=source, verified_at=verified_at)

    @staticmethod
    def _rule_case_fold(raw, entry):
        if not isinstance(raw, str):
            raise ValueError("text expected")
        value = " ".join(raw.split()).casefold()
        if not value:
            raise ValueError("empty text")
        return value

    @staticmethod
    def _rule_integer(raw, entry):
        if isinstance(raw, bool):
            raise ValueError("boolean is not an integer")
        if isinstance(raw, str):
            raw = raw.strip()
        return int(raw)

    @staticmethod
    def _rule_boolean(raw, entry):
        return to_bool(raw)

    @staticmethod
    def _rule_date(raw, entry):
        if isinstance(raw, datetime):
            return raw.date().isoformat()
        if isinstance(raw, date):
            return raw.isoformat()
        text = str(raw).strip()
        try:
            return date.fromisoformat(text).isoformat()
        except ValueError:
            pass
        formats = DATE_FORMATS_DAY_FIRST if entry.day_first else DATE_FORMATS_MONTH_FIRST
        for fmt in formats:
            try:
                return datetime.strptime(text, fmt).date().isoformat()
            except ValueError:
                continue
        raise ValueError(f"unrecognized date {text!r}")

    def _rule_country_code(self, raw, entry):
        if not isinstance(raw, str):
            raise ValueError("text expected")
        try:
            return self.countries[" ".join(raw.split()).casefold()]
        except KeyError:
            raise ValueError(f"unknown country {raw!r}")


_default_normalizer = None


def normalize_attribute(raw, normalizer=None, source=None, verified_at=0.0):
    """Normalize a (name, raw value) pair into an IdentityAttribute"""
    global _default_normalizer
    if normalizer is None:
        if _default_normalizer is None:
            _default_normalizer = AttributeNormalizer()
        normalizer = _default_normalizer
    name, value = raw
    return normalizer.normalize(name, value, source=source, verified_at=verified_at)


def fuse_attributes(existing, incoming, trust=None):
    """Merge incoming into existing, one attribute per name.

    The attribute from the more trusted source wins; equal trust goes to the
    more recently verified one, and a full tie keeps the existing attribute.
    """
    trust = trust or {}
    fused = []
    merged = False
    for attribute in existing:
        if attribute.name != incoming.name:
            fused.append(attribute)
            continue
        if merged:
            continue  # drop stray duplicates
        merged = True
        current = (trust.get(attribute.source, 0), attribute.verified_at)
        challenger = (trust.get(incoming.source, 0), incoming.verified_at)
        fused.append(incoming if challenger > current else attribute)
    if not merged:
        fused.append(incoming)
    return fused


# Consent

class Decision(enum.Enum):
    ALLOW = "allow"
    DENY = "deny"


@dataclass(frozen=True)
class ConsentGrant:
    attribute: str
    audience: str
    allow: bool
    expires_at: float = None

    def active(self, now):
        return self.expires_at is None or now < self.expires_at


@dataclass
class ConsentPolicy:
    owner: str
    grants: list = field(default_factory=list)

    def grant(self, attribute, audience, allow=True, expires_at=None):
        """Set the single grant for (attribute, audience), replacing any earlier one"""
        self.grants = [g for g in self.grants
                       if (g.attribute, g.audience) != (attribute, audience)]
        self.grants.append(ConsentGrant(attribute, audience, bool(allow), expires_at))

    def revoke(self, attribute, audience):
        self.grant(attribute, audience, allow=False)

    def to_dict(self):
        return {"owner": self.owner,
                "grants": [{"attribute": g.attribute, "audience": g.audience,
                            "allow": g.allow, "expires_at": g.expires_at} for g in self.grants]}


def evaluate_consent(policy, attribute, audience, now, schema=None):
    """Deny-by-default consent check for releasing attribute to audience"""
    schema = schema if schema is not None else SchemaRegistry()
    schema[attribute]  # raises SchemaError for unknown names
    for grant in policy.grants:
        if (grant.attribute, grant.audience) == (attribute, audience):
            if grant.allow and grant.active(now):
                return Decision.ALLOW
            return Decision.DENY
    return Decision.DENY


def with_source(attribute, source, verified_at):
    return replace(attribute, source=source, verified_at=verified_at)
