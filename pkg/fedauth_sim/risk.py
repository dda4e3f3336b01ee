# De-anonymization risk indicators over a population table, and the disclosure ledger
# they are computed from

import enum
import logging
import os
import threading
from dataclasses import dataclass, field

import pandas as pd

from .errors import SchemaError, UndefinedRisk


logger = logging.getLogger(__name__)

here = os.path.abspath(os.path.dirname(__file__))
DEFAULT_POPULATION_PATH = os.path.join(here, "data", "population.csv")


def population_value(value):
    """Population cells and query values are compared as casefolded text"""
    if isinstance(value, bool):
        value = "true" if value else "false"
    return str(value).strip().casefold()


class PopulationTable:
    """Immutable table of individuals over a fixed set of attribute columns"""

    def __init__(self, frame):
        if len(frame) < 1:
            raise SchemaError("A population table needs at least one row")
        self._frame = frame.apply(lambda column: column.map(population_value)).reset_index(drop=True)

    @classmethod
    def load(cls, path=None):
        path = path or DEFAULT_POPULATION_PATH
        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        except (OSError, pd.errors.ParserError) as exc:
            raise SchemaError(f"Cannot read population table {path!r}: {exc}") from exc
        logger.info("Loaded population table %r with %d rows", path, len(frame))
        return cls(frame)

    @classmethod
    def from_rows(cls, columns, rows):
        return cls(pd.DataFrame([list(row) for row in rows], columns=list(columns), dtype=str))

    @property
    def columns(self):
        return list(self._frame.columns)

    @property
    def size(self):
        return len(self._frame)

    def rows(self):
        return [tuple(row) for row in self._frame.itertuples(index=False, name=None)]

    def _mask(self, conditions):
        mask = pd.Series(True, index=self._frame.index)
        for name, value in conditions.items():
            mask &= self._frame[name] == population_value(value)
        return mask

    def count(self, conditions):
        return int(self._mask(conditions).sum())

    def value_counts(self, conditions, column):
        counts = self._frame.loc[self._mask(conditions), column].value_counts()
        return {value: int(n) for value, n in sorted(counts.items())}

    def _require(self, names):
        missing = sorted(set(names) - set(self._frame.columns))
        if missing:
            raise SchemaError(f"Attributes not in the population table: {', '.join(missing)}")


# Disclosure ledger

class Protocol(enum.Enum):
    FEDERATED = "Federated"
    PABAC = "Pabac"


@dataclass(frozen=True)
class DisclosureEntry:
    user: str
    sp: str
    attribute: str
    value: object
    session_id: str
    protocol: Protocol
    at: float

    def to_dict(self):
        return {"user": self.user, "sp": self.sp, "attribute": self.attribute, "value": self.value,
                "session_id": self.session_id, "protocol": self.protocol.value, "at": self.at}

    @classmethod
    def from_dict(cls, data):
        return cls(data["user"], data["sp"], data["attribute"], data["value"],
                   data["session_id"], Protocol(data["protocol"]), float(data["at"]))


class DisclosureLedger:
    """Append-only history of every attribute value released to an SP"""

    def __init__(self, entries=()):
        self._entries = list(entries)
        self._lock = threading.Lock()

    def record(self, entry):
        with self._lock:
            self._entries.append(entry)
        return entry

    @property
    def entries(self):
        return list(self._entries)

    def __len__(self):
        return len(self._entries)

    def linkable_slice(self, user, sp):
        """The Federated entries one SP holds about one user (linkable through the account)"""
        return [e for e in self._entries
                if e.user == user and e.sp == sp and e.protocol is Protocol.FEDERATED]

    def by_audience(self, user):
        """sp -> {attribute: last disclosed value} over every protocol"""
        view = {}
        for entry in self._entries:
            if entry.user == user:
                view.setdefault(entry.sp, {})[entry.attribute] = entry.value
        return view

    def to_list(self):
        return [entry.to_dict() for entry in self._entries]

    @classmethod
    def replay(cls, events):
        return cls(DisclosureEntry.from_dict(event["entry"])
                   for event in events if event.get("event") == "disclosure")


def record_disclosure(ledger, entry):
    return ledger.record(entry)


# Indicators

@dataclass(frozen=True)
class RiskIndicator:
    kind: str
    target: object
    score: float
    conditions: dict = field(default_factory=dict)
    matched: int = 0
    counts: dict = field(default_factory=dict)
    population_size: int = 0
    ignored: tuple = ()

    @property
    def explanation(self):
        if self.kind == "inference":
            best = max(self.counts.values())
            text = (f"{best} of {self.matched} population rows matching the revealed attributes "
                    f"share the most common {self.target} value")
        else:
            text = f"{self.matched} of {self.population_size} population rows share this combination"
        if self.ignored:
            text += f"; not in the population model: {', '.join(self.ignored)}"
        return text + " (computed against the full population distribution)"

    def to_dict(self):
        return {"kind": self.kind, "target": self.target, "score": self.score,
                "conditions": self.conditions, "matched": self.matched, "counts": self.counts,
                "population_size": self.population_size, "ignored": list(self.ignored),
                "explanation": self.explanation}


def revealed_set(entries):
    """Fold linkable Federated entries into {attribute: value}; Pabac entries never count"""
    revealed = {}
    for entry in entries:
        if entry.protocol is Protocol.FEDERATED:
            revealed[entry.attribute] = entry.value
    return revealed


def _split_known(conditions, population):
    known = {k: v for k, v in sorted(conditions.items()) if k in population.columns}
    ignored = tuple(sorted(set(conditions) - set(known)))
    return known, ignored


def federated_inference_risk(entries, hidden, population):
    """How likely an SP holding entries can guess hidden: max_v P(hidden = v | revealed)"""
    population._require([hidden])
    revealed = revealed_set(entries)
    if hidden in revealed:
        raise ValueError(f"{hidden!r} was already revealed")
    known, ignored = _split_known(revealed, population)
    counts = population.value_counts(known, hidden)
    matched = sum(counts.values())
    if matched == 0:
        raise UndefinedRisk(f"No population row matches {known!r}")
    return RiskIndicator(
        kind="inference", target=hidden, score=max(counts.values()) / matched,
        conditions={k: population_value(v) for k, v in known.items()}, matched=matched,
        counts=counts, population_size=population.size, ignored=ignored)


def pabac_combination_risk(disclosed, population):
    """Rarity of a disclosed attribute combination: 1 / (size of its anonymity set)"""
    if not disclosed:
        raise ValueError("The disclosed set must not be empty")
    population._require(disclosed)
    k = population.count(disclosed)
    if k == 0:
        raise UndefinedRisk(f"No population row matches {dict(disclosed)!r}")
    return RiskIndicator(
        kind="combination", target=sorted(disclosed), score=1 / k,
        conditions={n: population_value(v) for n, v in sorted(disclosed.items())},
        matched=k, population_size=population.size)
