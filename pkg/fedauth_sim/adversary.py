# Adversary models: bus taps with a capability set, and the attacks they can mount.
#
# What an adversary can do is gated structurally: the bus only hands a tap the
# payload of a TLS-protected envelope when the tap has MitM, and every active
# method below checks its capability before touching anything.

import collections
import enum
import logging
from dataclasses import dataclass, field, replace

from . import keys
from .credentials import Presentation, federated_pabac_login, issue_credential
from .device import Assertion, assertion_bytes, consent_all
from .errors import AccessDenied, SimError
from .federation import enroll, fido_login, finish_flow, start_flow
from .utils import b64encode
from .world import Simulation


logger = logging.getLogger(__name__)

EVIL_ORIGIN = "https://evil.example"


class Capability(enum.Enum):
    STEAL_DEVICE = "StealDevice"
    SOFTWARE_ATTACK = "SoftwareAttack"
    HARDWARE_ATTACK = "HardwareAttack"
    MITM = "MitM"
    REPLAY = "Replay"
    CSRF = "Csrf"
    SESSION_HIJACK = "SessionHijack"
    COLLUDE_SP_IDP = "ColludeSpIdp"


def capability_set(values):
    """Parse capabilities; HardwareAttack always brings SoftwareAttack with it"""
    capabilities = {Capability(v) for v in values}
    if Capability.HARDWARE_ATTACK in capabilities:
        capabilities.add(Capability.SOFTWARE_ATTACK)
    return frozenset(capabilities)


class Adversary:
    def __init__(self, sim, adversary_id, capabilities, strategy=None):
        self.sim = sim
        self.id = adversary_id
        self.capabilities = capability_set(capabilities)
        self.strategy = strategy
        self.captured = []
        self.rewriters = {}
        self.reactions = {}
        self.wins = 0

    @property
    def can_read_secure(self):
        return Capability.MITM in self.capabilities

    def require(self, capability):
        if capability not in self.capabilities:
            raise AccessDenied(f"{self.id} lacks the {capability.value} capability")

    # Passive side: called by the bus for every envelope

    def intercept(self, view):
        readable = view.payload is not None
        self.captured.append(view)
        self.sim.record("observe", adversary=self.id, msg_id=view.msg_id, type=view.type,
                        secure=view.secure, readable=readable)
        react = self.reactions.get(view.type)
        if readable and react is not None:
            react(view)
        rewrite = self.rewriters.get(view.type)
        if readable and rewrite is not None:
            return replace(view, payload=rewrite(dict(view.payload)))
        return None

    def captured_of(self, msg_type, readable=True):
        return [v for v in self.captured
                if v.type == msg_type and (not readable or v.payload is not None)]

    # Active side

    def tamper(self, msg_type, edit):
        """Rewrite the payload of every readable msg_type envelope in flight"""
        self.require(Capability.MITM)
        self.rewriters[msg_type] = edit

    def replay_captured(self, types=None):
        """Re-send captured envelopes unchanged; returns the outcome code of each"""
        self.require(Capability.REPLAY)
        outcomes = []
        for view in list(self.captured):
            if types is not None and view.type not in types:
                continue
            try:
                self.sim.bus.resend(view.msg_id, injected_by=self.id)
            except SimError as exc:
                outcomes.append(exc.code)
            else:
                outcomes.append("ok")
        return outcomes

    def forge_redirect(self, victim, sp, flow, code, state):
        """A cross-origin page makes the victim's browser post a code into the victim's session"""
        self.require(Capability.CSRF)
        return self.sim.bus.inject(victim, sp, "authz.code",
                                   {"flow": flow, "code": code, "state": state,
                                    "origin": EVIL_ORIGIN}, injected_by=self.id)

    def substitute_audience(self, token_payload, issuer, sp, flow):
        """Present a token minted for one SP to another, as if the issuer sent it"""
        self.require(Capability.MITM)
        return self.sim.bus.inject(issuer, sp, "token.response",
                                   {"flow": flow, "token": token_payload}, injected_by=self.id)

    def hijack_code(self, code, state, idp, as_client):
        """Redeem a victim's authorization code from another client"""
        self.require(Capability.SESSION_HIJACK)
        return self.sim.bus.inject(as_client, idp, "token.request",
                                   {"code": code, "csrf": state, "origin": f"https://{as_client}"},
                                   injected_by=self.id)

    def steal(self, device):
        self.require(Capability.STEAL_DEVICE)
        device.stolen = True
        device.lock_gate()
        self.sim.record("theft", adversary=self.id, device=device.id)
        logger.info("%s stole %s", self.id, device.id)
        return device

    def read_memory(self, device):
        """Software attack: everything but the sealed store's plaintext"""
        self.require(Capability.SOFTWARE_ATTACK)
        return device.export()

    def extract_keys(self, device):
        """Hardware attack: the sealed store is open too"""
        self.require(Capability.HARDWARE_ATTACK)
        _, plaintexts = device.sealed_store.hardware_extract()
        return plaintexts

    def forge_assertion(self, device, extracted, rp_id, challenge, channel_binding):
        self.require(Capability.HARDWARE_ATTACK)
        handle = device.key_registry[(rp_id, device.owner)]
        private_key = keys.signing_key_from_seed(extracted[handle.credential_id])
        handle.counter += 1
        signature = private_key.sign(assertion_bytes(
            rp_id, device.owner, handle.credential_id, challenge, channel_binding, handle.counter))
        return Assertion(rp_id, device.owner, handle.credential_id, challenge, channel_binding,
                         handle.counter, signature)


def inject_adversary(sim, capabilities, strategy=None, adversary_id="mallory"):
    adversary = Adversary(sim, adversary_id, capabilities, strategy)
    sim.bus.add_tap(adversary)
    sim.record("adversary", adversary=adversary_id, strategy=strategy,
               capabilities=sorted(c.value for c in adversary.capabilities))
    return adversary


# Attack trials. Each returns the number of logins the attacker obtained.

VICTIM_PASSWORD = "correct horse battery staple"


@dataclass
class AttackWorld:
    sim: object
    idp: object
    sp: object
    evil_sp: object
    idc: object
    victim: object
    attacker: object
    requested: tuple = ("age",)


def build_attack_world(seed, profile="fast"):
    sim = Simulation(seed, profile=profile)
    idp = sim.add_idp("idp1")
    sp = sim.add_sp("sp1")
    evil_sp = sim.add_sp("sp-evil")
    idc = sim.add_idc("idc")
    idc.add_admin("admin")
    idp.trust_consolidator(idc.id)
    for client in (sp, evil_sp):
        idp.register_client(client.id)
        client.trust_idp(idp.id, idp.public_key)
    devices = {}
    for user, device_id, tee in (("alice", "alice-phone", True), ("mallory", "mallory-phone", False)):
        user_agent = sim.add_user(user, backup_password=VICTIM_PASSWORD if user == "alice" else None)
        devices[user] = sim.add_device(device_id, user, tee=tee)
        devices[user].idc = idc.id
        idp.enroll_user(user, {"age": 30, "country": "CY"})
        for audience in (sp.id, evil_sp.id):
            user_agent.consent_policy.grant("age", audience)
        enroll(sim, devices[user], idp)
    idc.register_entity("admin", idp.id, "IdP", "AAL3", user="alice")
    idc.enroll_backup_password("alice", VICTIM_PASSWORD)
    return AttackWorld(sim, idp, sp, evil_sp, idc, devices["alice"], devices["mallory"])


def _granted(outcome):
    return 1 if outcome == "ok" else 0


def replay_trial(world, adversary):
    fido_login(world.sim, world.victim, world.sp, world.idp, world.requested)
    return sum(_granted(o) for o in adversary.replay_captured())


def csrf_trial(world, adversary):
    sim, sp, idp = world.sim, world.sp, world.idp
    # the attacker's own code and state, for the attacker's own account
    own = start_flow(sim, world.attacker, sp, idp, world.requested, "fido")
    idp.send_challenge(own, world.attacker.id)
    world.attacker.user_gesture()
    reply = world.attacker.answer_challenge(own)
    victim_flow = start_flow(sim, world.victim, sp, idp, world.requested, "fido")
    try:
        adversary.forge_redirect(world.victim.id, sp.id, victim_flow, reply["code"], reply["state"])
    except SimError:
        return 0
    return 1


def audience_trial(world, adversary):
    """Replay a token the victim gave a rogue SP at the honest SP"""
    sim, sp, idp = world.sim, world.sp, world.idp
    stolen = fido_login(sim, world.victim, world.evil_sp, idp, world.requested).token
    flow = start_flow(sim, world.attacker, sp, idp, world.requested, "fido")
    idp.send_challenge(flow, world.attacker.id)
    world.attacker.user_gesture()
    reply = world.attacker.answer_challenge(flow)
    world.attacker.send(sp.id, "authz.code", {"flow": flow, "code": reply["code"],
                                              "state": reply["state"], "origin": world.attacker.origin})
    try:
        adversary.substitute_audience(stolen.to_payload(), idp.id, sp.id, flow)
    except SimError:
        return 0
    return 1


def hijack_trial(world, adversary):
    """Read the victim's code off the wire and race to redeem it from the rogue SP"""
    def redeem(view):
        try:
            adversary.hijack_code(view.payload["code"], view.payload["state"], world.idp.id,
                                  world.evil_sp.id)
        except SimError:
            return
        adversary.wins += 1

    adversary.reactions["authz.code"] = redeem
    fido_login(world.sim, world.victim, world.sp, world.idp, world.requested)
    return adversary.wins


def stolen_device_trial(world, adversary):
    """A thief without software attacks tries the biometric gate, then the owner locks"""
    sim = world.sim
    device = adversary.steal(world.victim)
    wins = 0
    for _ in range(2):
        try:
            fido_login(sim, device, world.sp, world.idp, world.requested)
        except SimError:
            pass
        else:
            wins += 1
    lock_accounts(world)
    try:
        fido_login(sim, device, world.sp, world.idp, world.requested)
    except SimError:
        return wins
    return wins + 1


def forged_login(world, adversary, device, extracted):
    """The FIDO flow driven with keys pulled out of a stolen device's sealed store"""
    sim, sp, idp = world.sim, world.sp, world.idp
    flow = start_flow(sim, device, sp, idp, world.requested, "fido")
    idp.send_challenge(flow, device.id)
    challenge = device.take_challenge(flow)
    assertion = adversary.forge_assertion(device, extracted, idp.id, challenge["nonce"],
                                          challenge["origin"])
    reply = device.send(idp.id, "fido.response", {
        "flow": flow, "request": challenge["request"], "assertion": assertion.to_payload(),
        "consent": consent_all(challenge["requested"])})
    return finish_flow(sim, device, sp, idp, flow, reply["code"], reply["state"])


def lock_accounts(world):
    """The owner, from a new device, opens a tentative IDC session and locks everything"""
    user = world.victim.owner
    session = world.idc.start_recovery(user, password=world.sim.actor(user).backup_password)
    return world.idc.set_lock(user, user, ("all",), "lock", session.session_id)


@dataclass
class HardwareOutcome:
    before_lock: int
    after_lock: int


def hardware_trial(world, adversary):
    device = adversary.steal(world.victim)
    extracted = adversary.extract_keys(device)
    before = after = 0
    try:
        forged_login(world, adversary, device, extracted)
        before = 1
    except SimError:
        pass
    lock_accounts(world)
    try:
        forged_login(world, adversary, device, extracted)
        after = 1
    except SimError:
        pass
    return HardwareOutcome(before, after)


ATTACKS = {
    "replay": ((Capability.REPLAY,), replay_trial),
    "csrf": ((Capability.CSRF,), csrf_trial),
    "audience": ((Capability.MITM,), audience_trial),
    "hijack": ((Capability.MITM, Capability.SESSION_HIJACK), hijack_trial),
    "stolen-device": ((Capability.STEAL_DEVICE,), stolen_device_trial),
    "hardware": ((Capability.STEAL_DEVICE, Capability.HARDWARE_ATTACK), hardware_trial),
}


@dataclass
class AttackReport:
    attack: str
    trials: int
    successes: int = 0
    successes_after_lock: int = 0
    rejections: collections.Counter = field(default_factory=collections.Counter)

    def to_dict(self):
        return {"attack": self.attack, "trials": self.trials, "successes": self.successes,
                "successes_after_lock": self.successes_after_lock,
                "rejections": dict(sorted(self.rejections.items()))}


def run_attack(world, name, adversary=None):
    capabilities, trial = ATTACKS[name]
    if adversary is None:
        adversary = inject_adversary(world.sim, [c.value for c in capabilities], name)
    return trial(world, adversary)


def run_attack_trials(name, trials=1000, seed=0, profile="fast"):
    """Seeded trials of one attack, each in a fresh world"""
    if name not in ATTACKS:
        raise ValueError(f"Unknown attack {name!r}")
    report = AttackReport(name, trials)
    for trial in range(trials):
        world = build_attack_world(seed + trial, profile)
        outcome = run_attack(world, name)
        if isinstance(outcome, HardwareOutcome):
            report.successes += outcome.before_lock
            report.successes_after_lock += outcome.after_lock
        else:
            report.successes += outcome
        for event in world.sim.log.events:
            if event["event"] == "message" and event.get("injected_by") and event["status"] != "ok":
                report.rejections[event["status"]] += 1
    logger.info("%s: %d/%d successful", name, report.successes, trials)
    return report


# Colluding issuer and verifier against credential-based logins

def issuer_view(issuer):
    """Every value the issuer saw while issuing, keyed back to the user it served"""
    view = {}
    for entry in issuer.issuance_log:
        values = set(entry["blinded"]) | {entry["blind_signature"]}
        for opening in entry["opened"].values():
            values.add(opening["serial"])
            values.update(opening["salts"].values())
        for value in values:
            view[value] = entry["user"]
    return view


def presentation_values(presentation):
    values = {presentation.serial, presentation.commitment, presentation.pseudonym,
              b64encode(presentation.signature.to_bytes(
                  (presentation.signature.bit_length() + 7) // 8 or 1, "big"))}
    values.update(presentation.hidden.values())
    for opening in presentation.disclosed.values():
        values.add(opening["salt"])
    return values


def link_presentations(issuer, presentations):
    """Exact-match linker: a presentation links when it shares any value with an issuance"""
    view = issuer_view(issuer)
    links = []
    for presentation in presentations:
        users = {view[v] for v in presentation_values(presentation) if v in view}
        if users:
            links.append((presentation.serial, sorted(users)))
    return links


def logged_presentations(events):
    """Presentations as the verifier received them, from the event log"""
    return [Presentation.from_payload(e["payload"]["presentation"]) for e in events
            if e["event"] == "message" and e["type"] == "pabac.presentation" and e["status"] == "ok"]


@dataclass
class CollusionReport:
    presentations: int
    links: int
    leaked_values: int

    def to_dict(self):
        return {"presentations": self.presentations, "links": self.links,
                "leaked_values": self.leaked_values}


def collusion_experiment(users=10, trials=100, seed=0, profile="bench"):
    """Issue and show one credential per trial for each user; the issuer and SP pool their views"""
    sim = Simulation(seed, profile=profile)
    issuer = sim.add_idp("idp-pabac", pabac=True)
    sp = sim.add_sp("sp1")
    issuer.register_client(sp.id)
    sp.trust_idp(issuer.id, issuer.public_key)
    adversary = inject_adversary(sim, [Capability.COLLUDE_SP_IDP.value], "collusion")
    hidden = {}
    for index in range(users):
        user = f"user{index:02d}"
        sim.add_user(user).consent_policy.grant("over18", sp.id)
        device = sim.add_device(f"{user}-phone", user)
        attributes = {"name": f"Person Number {index}", "birthdate": f"19{70 + index}-03-1{index % 9}",
                      "over18": True}
        issuer.enroll_user(user, attributes)
        hidden[user] = {issuer.account(user).attribute("name").value,
                        issuer.account(user).attribute("birthdate").value}
        enroll(sim, device, issuer)
    adversary.require(Capability.COLLUDE_SP_IDP)
    for trial in range(trials):
        for index in range(users):
            user = f"user{index:02d}"
            device = sim.actor(f"{user}-phone")
            account = issuer.account(user)
            issue_credential(sim, issuer, device, {a.name: a.value for a in account.attributes})
            federated_pabac_login(sim, device, sp, issuer, ["over18"])
    presentations = logged_presentations(sim.log.events)
    leaked = 0
    for presentation in presentations:
        blob = presentation.serialized()
        leaked += sum(1 for values in hidden.values() for v in values
                      if str(v).encode("ascii") in blob)
    links = link_presentations(issuer, presentations)
    return CollusionReport(len(presentations), len(links), leaked)
