# Simulated network: discrete clock, message bus, actors and the protocol event log

import contextvars
import functools
import json
import logging
import os
import threading
from dataclasses import dataclass, field, replace

from .errors import AccessDenied, SimError, UnknownPrincipal
from .utils import canonical_json


logger = logging.getLogger(__name__)


class SimClock:
    """Discrete simulated clock (seconds). Only moves forward, and only when told to."""

    def __init__(self, start=0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    @property
    def now(self):
        return self._now

    def advance(self, seconds):
        if seconds < 0:
            raise ValueError("The clock cannot move backwards")
        with self._lock:
            self._now += seconds
        return self._now

    def set(self, when):
        with self._lock:
            if when < self._now:
                raise ValueError(f"The clock cannot move backwards from {self._now} to {when}")
            self._now = float(when)
        return self._now


@dataclass(frozen=True)
class BusEnvelope:
    msg_id: str
    sender: str
    recipient: str
    type: str
    payload: dict = field(default=None, compare=False)
    sent_at: float = 0.0
    secure: bool = True

    def sealed(self):
        """The view of a TLS-protected envelope: routing metadata only"""
        return replace(self, payload=None)

    def to_record(self):
        return {"msg_id": self.msg_id, "from": self.sender, "to": self.recipient,
                "type": self.type, "payload": self.payload, "sent_at": self.sent_at,
                "secure": self.secure}


class EventLog:
    """Append-only JSON-lines trace of every message and operation in a run.

    In persistent mode each scenario step is flushed and fsynced.
    """

    def __init__(self, path=None, persistent=False, keep=True):
        self.path = path
        self.persistent = persistent
        self.keep = keep
        self.events = []
        self.count = 0
        self._lock = threading.Lock()
        self._file = open(path, "w", encoding="ascii") if path else None

    def append(self, event):
        with self._lock:
            self.count += 1
            event = dict(event, seq=self.count)
            if self.keep:
                self.events.append(event)
            if self._file is not None:
                self._file.write(canonical_json(event).decode("ascii"))
                self._file.write("\n")
        return event

    def step(self):
        if self._file is not None:
            with self._lock:
                self._file.flush()
                if self.persistent:
                    os.fsync(self._file.fileno())

    def close(self):
        if self._file is not None:
            self.step()
            self._file.close()
            self._file = None

    def dumps(self):
        return b"".join(canonical_json(event) + b"\n" for event in self.events)

    @staticmethod
    def read(path):
        with open(path, encoding="ascii") as f:
            return [json.loads(line) for line in f if line.strip()]


# Operation tracing

_current_details = contextvars.ContextVar("current_details", default=None)


def note(**details):
    """Attach details to the event of the operation currently running"""
    current = _current_details.get()
    if current is not None:
        current.update(details)


def operation(name=None):
    """Decorate an actor method so each call emits exactly one "op" event"""
    def decorate(method):
        op_name = name or method.__name__

        @functools.wraps(method)
        def wrapper(self, *args, **kwargs):
            details = {}
            token = _current_details.set(details)
            try:
                result = method(self, *args, **kwargs)
            except SimError as exc:
                _current_details.reset(token)
                self.sim.record_op(op_name, self.id, exc.code, details)
                raise
            _current_details.reset(token)
            self.sim.record_op(op_name, self.id, "ok", details)
            return result
        return wrapper
    return decorate


class Actor:
    """A principal (or device) attached to the bus.

    Incoming envelopes are handled one at a time per actor by on_<type> methods
    (dots in the type become underscores); the lock is the actor's mailbox.
    """

    def __init__(self, sim, actor_id):
        self.sim = sim
        self.id = actor_id
        self._mailbox = threading.RLock()
        sim.bus.register(self)

    @property
    def settings(self):
        return self.sim.settings

    @property
    def now(self):
        return self.sim.clock.now

    def receive(self, envelope):
        handler = getattr(self, "on_" + envelope.type.replace(".", "_"), None)
        if handler is None:
            raise AccessDenied(f"{self.id} does not accept {envelope.type!r} messages")
        with self._mailbox:
            return handler(envelope)

    def send(self, recipient, msg_type, payload):
        return self.sim.bus.send(self.id, recipient, msg_type, payload)


class MessageBus:
    """Routes envelopes between actors, through any adversary taps.

    Links are TLS-modeled unless a scenario marks them insecure. A tap that
    lacks the MitM capability only ever sees sealed views of secure envelopes,
    and whatever it returns for them is discarded.
    """

    def __init__(self, sim):
        self.sim = sim
        self.actors = {}
        self.taps = []
        self.insecure_links = set()
        self._sent = {}
        self._counter = 0
        self._lock = threading.Lock()

    def register(self, actor):
        if actor.id in self.actors:
            raise ValueError(f"Duplicate actor id {actor.id!r}")
        self.actors[actor.id] = actor

    def actor(self, actor_id):
        try:
            return self.actors[actor_id]
        except KeyError:
            raise UnknownPrincipal(f"No actor {actor_id!r} on the bus")

    def set_link_security(self, left, right, secure):
        link = frozenset((left, right))
        if secure:
            self.insecure_links.discard(link)
        else:
            self.insecure_links.add(link)

    def is_secure(self, left, right):
        return self.sim.settings["tls"] and frozenset((left, right)) not in self.insecure_links

    def add_tap(self, tap):
        self.taps.append(tap)

    def remove_tap(self, tap):
        self.taps.remove(tap)

    def _next_id(self):
        with self._lock:
            self._counter += 1
            return f"m{self._counter:07d}"

    def send(self, sender, recipient, msg_type, payload):
        envelope = BusEnvelope(
            msg_id=self._next_id(), sender=sender, recipient=recipient, type=msg_type,
            payload=payload, sent_at=self.sim.clock.now,
            secure=self.is_secure(sender, recipient))
        for tap in list(self.taps):
            envelope = self._intercept(tap, envelope)
        return self.dispatch(envelope)

    def _intercept(self, tap, envelope):
        readable = not envelope.secure or tap.can_read_secure
        view = envelope if readable else envelope.sealed()
        result = tap.intercept(view)
        if not readable or result is None:
            return envelope
        # routing metadata is not the tap's to change
        return replace(envelope, payload=result.payload, type=result.type)

    def resend(self, msg_id, injected_by):
        """Re-deliver a previously sent envelope unchanged (opaque replay)"""
        with self._lock:
            original = self._sent.get(msg_id)
        if original is None:
            raise UnknownPrincipal(f"No message {msg_id!r} to replay")
        envelope = replace(original, msg_id=self._next_id(), sent_at=self.sim.clock.now)
        return self.dispatch(envelope, injected_by=injected_by)

    def inject(self, sender, recipient, msg_type, payload, injected_by):
        """Deliver an adversary-forged envelope claiming to come from sender"""
        envelope = BusEnvelope(
            msg_id=self._next_id(), sender=sender, recipient=recipient, type=msg_type,
            payload=payload, sent_at=self.sim.clock.now,
            secure=self.is_secure(sender, recipient))
        return self.dispatch(envelope, injected_by=injected_by)

    def dispatch(self, envelope, injected_by=None):
        target = self.actor(envelope.recipient)
        if self.taps:
            # only kept while someone could replay it
            with self._lock:
                self._sent[envelope.msg_id] = envelope
        try:
            reply = target.receive(envelope)
        except SimError as exc:
            logger.info("%s -> %s %s rejected: %s", envelope.sender, envelope.recipient,
                        envelope.type, exc.code)
            self._record(envelope, exc.code, injected_by)
            raise
        self._record(envelope, "ok", injected_by)
        return reply

    def _record(self, envelope, status, injected_by):
        event = dict(envelope.to_record(), event="message", status=status)
        if injected_by is not None:
            event["injected_by"] = injected_by
        self.sim.log.append(event)
