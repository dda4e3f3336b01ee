# Scenario files: declare a world, script what happens in it, then check the trace.
#
# A scenario is one JSON object:
#
#   seed, profile, settings, schema, trust  how the Simulation is built
#   principals                              idps, idcs, baas, mnos, sps, users, devices, desktops
#   generators                              named behavior generators ({means, stds})
#   adversaries                             [{id, capabilities, strategy}]
#   actions                                 [{do, label?, expect?, ...}], run in order
#   assertions                              [{check, ...}], evaluated against the event log
#
# An action's "expect" is "ok" (the default) or the reason code it must fail with.

import dataclasses
import enum
import json
import logging
import os
import re

from .adversary import ATTACKS, AttackWorld, inject_adversary, run_attack
from .consolidator import (
    IdentityConsolidator, acquire_online_attributes, idc_fido_login, idc_step_up,
    mc_proxy_authenticate, recover_account)
from .credentials import (
    backup_credentials, federated_pabac_login, issue_credential, restore_credentials)
from .device import BehaviorGenerator
from .errors import ScenarioError, SimError
from .federation import (
    AccessPolicy, DesktopBrowser, FlowResult, authorize_additional_device, enroll, fido_login,
    password_login, qr_login)
from .identity import SchemaRegistry
from .trace import check_flow_shape, flow_messages, verify_log
from .utils import canonical_json
from .world import Simulation


logger = logging.getLogger(__name__)

SECTIONS = ("idps", "idcs", "baas", "mnos", "sps", "users", "devices", "desktops")
TOP_LEVEL_KEYS = {"seed", "profile", "settings", "schema", "trust", "principals", "generators",
                  "adversaries", "actions", "assertions", "description"}

# Action fields that name a principal (or adversary) declared in the scenario
REF_FIELDS = ("device", "desktop", "idp", "sp", "idc", "baa", "mno", "user", "issuer",
              "adversary", "lost_device", "target", "evil_sp", "victim", "attacker",
              "left", "right")
# Action fields that name the label of an earlier action
LABEL_FIELDS = ("session", "document")


@dataclasses.dataclass
class Scenario:
    seed: int = 0
    profile: str = "default"
    settings: dict = dataclasses.field(default_factory=dict)
    schema: list = dataclasses.field(default_factory=list)
    trust: dict = dataclasses.field(default_factory=dict)
    principals: dict = dataclasses.field(default_factory=dict)
    generators: dict = dataclasses.field(default_factory=dict)
    adversaries: list = dataclasses.field(default_factory=list)
    actions: list = dataclasses.field(default_factory=list)
    assertions: list = dataclasses.field(default_factory=list)
    source: str = None

    @classmethod
    def from_dict(cls, data, source=None):
        if not isinstance(data, dict):
            raise ScenarioError("A scenario must be a JSON object", path=source)
        unknown = sorted(set(data) - TOP_LEVEL_KEYS)
        if unknown:
            raise ScenarioError(f"Unknown scenario keys {', '.join(unknown)}", path=source)
        try:
            seed = int(data.get("seed", 0))
        except (TypeError, ValueError):
            raise ScenarioError(f"Invalid seed {data.get('seed')!r}", path="seed")
        scenario = cls(
            seed=seed, profile=data.get("profile", "default"),
            settings=dict(data.get("settings") or {}), schema=list(data.get("schema") or ()),
            trust=dict(data.get("trust") or {}), principals=dict(data.get("principals") or {}),
            generators=dict(data.get("generators") or {}),
            adversaries=list(data.get("adversaries") or ()), actions=list(data.get("actions") or ()),
            assertions=list(data.get("assertions") or ()), source=source)
        scenario.validate()
        return scenario

    def declared(self):
        """id -> section, for every principal and adversary"""
        declared = {}
        for section in SECTIONS:
            for index, entry in enumerate(self.principals.get(section) or ()):
                path = f"principals.{section}[{index}]"
                if not isinstance(entry, dict) or not isinstance(entry.get("id"), str):
                    raise ScenarioError("Every principal needs a string id", path=path)
                if entry["id"] in declared:
                    raise ScenarioError(f"Duplicate id {entry['id']!r}", path=path)
                declared[entry["id"]] = section
        for index, entry in enumerate(self.adversaries):
            if not isinstance(entry, dict) or not isinstance(entry.get("id"), str):
                raise ScenarioError("Every adversary needs a string id", path=f"adversaries[{index}]")
            if entry["id"] in declared:
                raise ScenarioError(f"Duplicate id {entry['id']!r}", path=f"adversaries[{index}]")
            declared[entry["id"]] = "adversaries"
        return declared

    def validate(self):
        unknown = sorted(set(self.principals) - set(SECTIONS))
        if unknown:
            raise ScenarioError(f"Unknown principal sections {', '.join(unknown)}", path="principals")
        declared = self.declared()

        def ref(value, path, sections=None):
            if value not in declared or (sections and declared[value] not in sections):
                raise ScenarioError(f"Undeclared principal {value!r}", path=path)

        for section in SECTIONS:
            for index, entry in enumerate(self.principals.get(section) or ()):
                path = f"principals.{section}[{index}]"
                for name in ("idps", "consolidators", "issuers"):
                    for value in entry.get(name, ()):
                        ref(value, f"{path}.{name}")
                for name in ("owner", "idc", "baa", "user"):
                    if entry.get(name) is not None:
                        ref(entry[name], f"{path}.{name}")
                for user in entry.get("users", {}):
                    ref(user, f"{path}.users", ("users",))
                for baa in entry.get("baa_passwords", {}):
                    ref(baa, f"{path}.baa_passwords", ("baas",))
                for grant in entry.get("consent", ()):
                    ref(grant.get("audience"), f"{path}.consent")
                for sub in entry.get("subscribers", ()):
                    ref(sub.get("user"), f"{path}.subscribers", ("users",))
                    ref(sub.get("device"), f"{path}.subscribers", ("devices",))
                for entity in entry.get("entities", ()):
                    ref(entity.get("id"), f"{path}.entities")
                    for user in entity.get("users", ()):
                        ref(user, f"{path}.entities", ("users",))

        labels = set()
        for index, action in enumerate(self.actions):
            path = f"actions[{index}]"
            if not isinstance(action, dict) or "do" not in action:
                raise ScenarioError("Every action needs a 'do' key", path=path)
            if not hasattr(ScenarioRunner, "_do_" + str(action["do"]).replace("-", "_")):
                raise ScenarioError(f"Unknown action {action['do']!r}", path=f"{path}.do")
            for name in REF_FIELDS:
                if action.get(name) is not None:
                    ref(action[name], f"{path}.{name}")
            for name in LABEL_FIELDS:
                if action.get(name) is not None and action[name] not in labels:
                    raise ScenarioError(f"No earlier action labelled {action[name]!r}",
                                        path=f"{path}.{name}")
            if "label" in action:
                if action["label"] in labels:
                    raise ScenarioError(f"Duplicate label {action['label']!r}", path=f"{path}.label")
                labels.add(action["label"])
        for index, entry in enumerate(self.assertions):
            path = f"assertions[{index}]"
            if not isinstance(entry, dict) or "check" not in entry:
                raise ScenarioError("Every assertion needs a 'check' key", path=path)
            if not hasattr(ScenarioRunner, "_check_" + str(entry["check"]).replace("-", "_")):
                raise ScenarioError(f"Unknown check {entry['check']!r}", path=f"{path}.check")
            if entry.get("action") is not None and entry["action"] not in labels:
                raise ScenarioError(f"No action labelled {entry['action']!r}", path=f"{path}.action")
            for name in ("idc", "user"):
                if entry.get(name) is not None:
                    ref(entry[name], f"{path}.{name}")


_KEY_PATH_PART = re.compile(r"\[(\d+)\]|([^.\[\]]+)")
_WHITESPACE = re.compile(r"\s*")


def line_of(text, field):
    """1-based line where the value at key path field (like "actions[2].do") starts in text.

    None when the path does not lead anywhere in the document.
    """
    decoder = json.JSONDecoder()
    pos = _WHITESPACE.match(text).end()
    try:
        for index, key in _KEY_PATH_PART.findall(field):
            if index:
                if text[pos] != "[":
                    return None
                pos = _WHITESPACE.match(text, pos + 1).end()
                for _ in range(int(index)):
                    _, pos = decoder.raw_decode(text, pos)
                    pos = _WHITESPACE.match(text, pos).end()
                    if text[pos] != ",":
                        return None
                    pos = _WHITESPACE.match(text, pos + 1).end()
                if text[pos] == "]":
                    return None
                continue
            if text[pos] != "{":
                return None
            pos = _WHITESPACE.match(text, pos + 1).end()
            while True:
                if text[pos] != '"':
                    return None
                name, pos = json.decoder.scanstring(text, pos + 1)
                pos = _WHITESPACE.match(text, pos).end() + 1  # ':'
                pos = _WHITESPACE.match(text, pos).end()
                if name == key:
                    break
                _, pos = decoder.raw_decode(text, pos)
                pos = _WHITESPACE.match(text, pos).end()
                if text[pos] != ",":
                    return None
                pos = _WHITESPACE.match(text, pos + 1).end()
    except (IndexError, ValueError):
        return None
    return text.count("\n", 0, pos) + 1


def load_scenario(path):
    """Parse a scenario file; errors carry the line they were found on where one is known"""
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ScenarioError(f"Cannot read scenario: {exc.strerror}", path=path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"Invalid JSON: {exc.msg}", line=exc.lineno, path=path)
    try:
        return Scenario.from_dict(data, source=path)
    except ScenarioError as exc:
        if exc.line is not None or exc.path in (None, path):
            raise
        raise ScenarioError(exc.reason, line=line_of(text, exc.path), path=path,
                            field=exc.path) from None


@dataclasses.dataclass
class ActionResult:
    index: int
    do: str
    label: str
    outcome: str
    expected: str
    value: object = None

    @property
    def ok(self):
        return self.outcome == self.expected

    def to_dict(self):
        return {"index": self.index, "do": self.do, "label": self.label, "outcome": self.outcome,
                "expected": self.expected, "ok": self.ok, "value": self.value}


@dataclasses.dataclass
class AssertionResult:
    index: int
    check: str
    passed: bool
    detail: str = ""

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class ScenarioResult:
    seed: int
    events: list
    actions: list
    assertions: list
    checkpoint: dict

    @property
    def ok(self):
        return all(a.ok for a in self.actions) and all(a.passed for a in self.assertions)

    def to_dict(self):
        return {"seed": self.seed, "ok": self.ok, "events": len(self.events),
                "actions": [a.to_dict() for a in self.actions],
                "assertions": [a.to_dict() for a in self.assertions]}


def plain(value):
    """A JSON-ready rendering of an action's return value"""
    if isinstance(value, FlowResult):
        return {"flow": value.flow, "sp": value.sp, "subject": value.token.subject,
                "aal": value.token.aal.label}
    if isinstance(value, enum.Enum):
        return value.value
    if hasattr(value, "to_dict"):
        return plain(value.to_dict())
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return plain(dataclasses.asdict(value))
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (set, frozenset)):
        return sorted(plain(v) for v in value)
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    return repr(value)


def checkpoint_state(sim):
    """The persistent state `authsim verify` rebuilds from the event log"""
    consolidators = {actor.id: actor.checkpoint()
                     for actor in sorted(sim.bus.actors.values(), key=lambda a: a.id)
                     if isinstance(actor, IdentityConsolidator)}
    return json.loads(canonical_json({"ledger": sim.ledger.to_list(), "consolidators": consolidators}))


class ScenarioRunner:
    def __init__(self, scenario, seed=None, log_path=None, persistent=False, population=None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else int(seed)
        try:
            schema = SchemaRegistry.from_config(scenario.schema)
            self.sim = Simulation(self.seed, settings=scenario.settings, profile=scenario.profile,
                                  log_path=log_path, persistent=persistent, schema=schema,
                                  trust=scenario.trust, population=population)
        except SimError as exc:
            raise ScenarioError(str(exc), path=scenario.source)
        self.adversaries = {}
        self.results = {}

    # World construction

    def build(self):
        sim, principals = self.sim, self.scenario.principals
        for entry in principals.get("idps", ()):
            sim.add_idp(entry["id"], entry.get("display_name", ""), pabac=entry.get("pabac", False))
        for entry in principals.get("idcs", ()):
            idc = sim.add_idc(entry["id"], entry.get("display_name", ""))
            for admin in entry.get("admins", ("admin",)):
                idc.add_admin(admin)
        for entry in principals.get("baas", ()):
            sim.add_baa(entry["id"], entry.get("display_name", ""))
        for entry in principals.get("mnos", ()):
            sim.add_mno(entry["id"], entry.get("display_name", ""))
        for entry in principals.get("sps", ()):
            sim.add_sp(entry["id"], entry.get("display_name", ""),
                       policy=AccessPolicy.from_config(entry.get("policy")))
        for entry in principals.get("users", ()):
            sim.add_user(entry["id"], entry.get("display_name", ""),
                         backup_password=entry.get("backup_password"), msisdn=entry.get("msisdn"))
        for entry in principals.get("devices", ()):
            device = sim.add_device(entry["id"], entry["owner"], tee=entry.get("tee", False),
                                    msisdn=entry.get("msisdn"))
            device.idc = entry.get("idc")
            device.baa = entry.get("baa")
        for entry in principals.get("desktops", ()):
            DesktopBrowser(sim, entry["id"])
        self.wire()
        for entry in self.scenario.adversaries:
            self.adversaries[entry["id"]] = inject_adversary(
                sim, entry.get("capabilities", ()), entry.get("strategy"), entry["id"])
        sim.step()

    def wire(self):
        sim, principals = self.sim, self.scenario.principals
        for entry in principals.get("idps", ()):
            idp = sim.actor(entry["id"])
            for user, account in sorted(entry.get("users", {}).items()):
                idp.enroll_user(user, account.get("attributes"), account.get("password"))
            for idc in entry.get("consolidators", ()):
                idp.trust_consolidator(idc)
            for issuer in entry.get("issuers", ()):
                idp.trust_issuer(issuer, sim.actor(issuer).blind_public_numbers)
        for entry in list(principals.get("sps", ())) + list(principals.get("idcs", ())):
            client = sim.actor(entry["id"])
            for idp_id in entry.get("idps", ()):
                idp = sim.actor(idp_id)
                idp.register_client(client.id)
                client.trust_idp(idp.id, idp.public_key)
        for entry in list(principals.get("baas", ())) + list(principals.get("mnos", ())):
            authority = sim.actor(entry["id"])
            for idc_id in entry.get("consolidators", ()):
                authority.trust_consolidator(idc_id)
                sim.actor(idc_id).trust_idp(authority.id, authority.public_key)
        for entry in principals.get("mnos", ()):
            mno = sim.actor(entry["id"])
            for sub in entry.get("subscribers", ()):
                mno.add_subscriber(sub["msisdn"], sub["user"], sub["device"], sub.get("attributes"))
            for idc_id in entry.get("consolidators", ()):
                for attribute in entry.get("attributes", ("msisdn",)):
                    sim.actor(idc_id).map_mc_attribute(attribute, mno.id)
        for entry in principals.get("idcs", ()):
            idc = sim.actor(entry["id"])
            admin = sorted(idc.admins)[0] if idc.admins else None
            for entity in entry.get("entities", ()):
                users = entity.get("users") or [None]
                for user in users:
                    idc.register_entity(admin, entity["id"], entity["kind"],
                                        entity.get("max_aal", "AAL2"), user=user)
        for entry in principals.get("users", ()):
            user = sim.actor(entry["id"])
            for grant in entry.get("consent", ()):
                user.consent_policy.grant(grant["attribute"], grant["audience"],
                                          grant.get("allow", True), grant.get("expires_at"))
            if entry.get("idc") is not None and user.backup_password is not None:
                sim.actor(entry["idc"]).enroll_backup_password(user.id, user.backup_password)
            for baa_id, password in sorted(entry.get("baa_passwords", {}).items()):
                sim.actor(baa_id).enroll_backup_password(user.id, password)
                user.baa_passwords[baa_id] = password

    # Running

    def run(self):
        self.build()
        actions = [self.run_action(index, action) for index, action in enumerate(self.scenario.actions)]
        checkpoint = checkpoint_state(self.sim)
        events = self.sim.log.events
        assertions = [self.evaluate(index, entry, events, checkpoint)
                      for index, entry in enumerate(self.scenario.assertions)]
        return ScenarioResult(self.seed, events, actions, assertions, checkpoint)

    def run_action(self, index, action):
        name = action["do"]
        label = action.get("label")
        expected = action.get("expect", "ok")
        handler = getattr(self, "_do_" + name.replace("-", "_"))
        value = None
        try:
            value = plain(handler(action))
            outcome = "ok"
        except SimError as exc:
            outcome = exc.code
            logger.info("Action %d (%s) failed: %s", index, name, exc)
        except Exception:
            logger.exception("Action %d (%s) crashed", index, name)
            raise
        result = ActionResult(index, name, label, outcome, expected, value)
        if not result.ok:
            logger.warning("Action %d (%s): expected %s, got %s", index, name, expected, outcome)
        self.sim.record("action", index=index, do=name, label=label, outcome=outcome,
                        expected=expected)
        self.sim.step()
        if label is not None:
            self.results[label] = result
        return result

    # Lookups

    def _actor(self, action, name):
        return self.sim.actor(action[name])

    def _session_id(self, action):
        value = self.results[action["session"]].value
        if not isinstance(value, dict) or "session" not in value:
            raise ScenarioError(f"Action {action['session']!r} did not open a session")
        return value["session"]

    def _generator(self, name):
        dimension = self.sim.settings["baa_feature_dimension"]
        base = name[:-len("-impostor")] if name.endswith("-impostor") else name
        if base in self.scenario.generators:
            generator = BehaviorGenerator.from_config(base, self.scenario.generators[base])
        else:
            generator = BehaviorGenerator.default(base, dimension)
        if name.endswith("-impostor"):
            return generator.impostor()
        return generator

    def _requested(self, action):
        requested = action.get("requested")
        return tuple(requested) if requested is not None else None

    # Actions

    def _do_advance(self, action):
        return self.sim.clock.advance(float(action["seconds"]))

    def _do_link(self, action):
        self.sim.bus.set_link_security(action["left"], action["right"], action.get("secure", True))

    def _do_consent(self, action):
        user = self._actor(action, "user")
        user.consent_policy.grant(action["attribute"], action["audience"], action.get("allow", True),
                                  action.get("expires_at"))

    def _do_gate(self, action):
        device = self._actor(action, "device")
        state = None
        for _ in range(int(action.get("times", 1))):
            state = device.unlock_gate(action.get("match", True))
        return list(state)

    def _do_enroll(self, action):
        message = enroll(self.sim, self._actor(action, "device"), self._actor(action, "idp"))
        return message.credential_id

    def _do_authorize_device(self, action):
        return authorize_additional_device(self.sim, self._actor(action, "device"),
                                           self._actor(action, "idp"))

    def _do_revoke_device(self, action):
        self._actor(action, "idp").revoke_device(action["user"], action["target"])

    def _do_login(self, action):
        sim = self.sim
        method = action.get("method", "fido")
        sp, idp = self._actor(action, "sp"), self._actor(action, "idp")
        requested = self._requested(action)
        device = self._actor(action, "device")
        if method == "fido":
            return fido_login(sim, device, sp, idp, requested)
        if method == "password":
            return password_login(sim, device, sp, idp, action["password"], requested)
        if method == "qr":
            return qr_login(sim, self._actor(action, "desktop"), device, sp, idp, requested)
        if method == "pabac":
            return federated_pabac_login(sim, device, sp, idp, requested or ())
        if method == "mc":
            return mc_proxy_authenticate(sim, device, sp, idp, requested, otp=action.get("otp"))
        raise ScenarioError(f"Unknown login method {method!r}")

    def _do_issue(self, action):
        credentials = issue_credential(self.sim, self._actor(action, "issuer"),
                                       self._actor(action, "device"), action["attributes"],
                                       int(action.get("batch", 1)))
        return len(credentials)

    def _do_register(self, action):
        idc = self._actor(action, "idc")
        return idc.register_entity(action.get("admin", "admin"), action["target"], action["kind"],
                                   action.get("max_aal", "AAL2"), user=action.get("user"))

    def _do_idc_login(self, action):
        return {"session": idc_fido_login(self.sim, self._actor(action, "device"),
                                          self._actor(action, "idc"))}

    def _do_step_up(self, action):
        session = idc_step_up(self.sim, self._actor(action, "device"), self._actor(action, "idc"),
                              self._session_id(action))
        return {"session": session.session_id, "aal": session.aal.label}

    def _do_lock(self, action):
        user = action["user"]
        return self._actor(action, "idc").set_lock(
            user, user, action.get("scope", ("all",)), action.get("action", "lock"),
            self._session_id(action))

    def _do_report_lost(self, action):
        self._actor(action, "mno").report_lost(action["msisdn"])

    def _do_reissue_sim(self, action):
        self._actor(action, "mno").reissue_sim(action["msisdn"], action["device"])

    def _do_train(self, action):
        """Associate the device with the BAA in full mode and stream records to it"""
        device, baa = self._actor(action, "device"), self._actor(action, "baa")
        baa.associate_device(device.id, device.owner)
        device.baa = baa.id
        generator = self._generator(action.get("generator", "owner"))
        return len(device.emit_behavior(generator, int(action.get("count", 0))))

    def _do_behave(self, action):
        generator = self._generator(action.get("generator", "owner"))
        return len(self._actor(action, "device").emit_behavior(generator, int(action["count"])))

    def _do_issue_document(self, action):
        return self.sim.document_authority.issue_document(
            action["document_id"], action["name"], action["birthdate"], action["country"])

    def _do_acquire_document(self, action):
        document = self.results[action["document"]].value
        attributes = self._actor(action, "idc").acquire_identity_document(action["user"], document)
        return [a.name for a in attributes]

    def _do_start_recovery(self, action):
        idc = self._actor(action, "idc")
        document = self.results[action["document"]].value if "document" in action else None
        session = idc.start_recovery(action["user"], password=action.get("password"),
                                     document=document, lost_device=action.get("lost_device"))
        return {"session": session.session_id, "aal": session.aal.label}

    def _do_recover(self, action):
        device = self._actor(action, "device")
        document = self.results[action["document"]].value if "document" in action else None
        password = action.get("password")
        if password is None and document is None:
            password = self.sim.actor(device.owner).backup_password
        session_id = recover_account(
            self.sim, device, self._actor(action, "idc"), self._actor(action, "baa"),
            password=password, document=document, lost_device=action.get("lost_device"),
            generator=self._generator(action.get("generator", "owner")), records=action.get("records"))
        session = self._actor(action, "idc").session(session_id)
        return {"session": session_id, "aal": session.aal.label,
                "state": session.recovery.state.value}

    def _do_acquire_attributes(self, action):
        return acquire_online_attributes(self.sim, self._actor(action, "device"),
                                         self._actor(action, "idc"), self._actor(action, "idp"),
                                         self._session_id(action), self._requested(action))

    def _do_transfer(self, action):
        self._actor(action, "idc").transfer_attribute(self._session_id(action), action["attribute"],
                                                      action["target"])

    def _do_storage_preference(self, action):
        self._actor(action, "idc").set_storage_preference(self._session_id(action), action["names"])

    def _do_backup_baa_passwords(self, action):
        self._actor(action, "idc").backup_baa_passwords(self._session_id(action), action["passwords"])

    def _do_backup_credentials(self, action):
        backup = backup_credentials(self.sim, self._actor(action, "device"), self._actor(action, "idc"),
                                    self._session_id(action), action["password"])
        return backup.version

    def _do_restore_credentials(self, action):
        return len(restore_credentials(self.sim, self._actor(action, "device"),
                                       self._actor(action, "idc"), self._session_id(action),
                                       action["password"]))

    def _do_profile_view(self, action):
        return self._actor(action, "idc").consent_and_profile_view(self._session_id(action))

    def _do_edit_consent(self, action):
        self._actor(action, "idc").edit_consent(self._session_id(action), action["attribute"],
                                                action["audience"], action.get("allow", True))

    def _do_list_accounts(self, action):
        return self._actor(action, "idc").list_accounts(self._session_id(action))

    def _do_remove_account(self, action):
        self._actor(action, "idc").remove_account(self._session_id(action), action["target"])

    def _do_delete_account(self, action):
        self._actor(action, "idc").delete_account(self._session_id(action))

    def _do_steal(self, action):
        self.adversaries[action["adversary"]].steal(self._actor(action, "device"))

    def _do_replay(self, action):
        outcomes = self.adversaries[action["adversary"]].replay_captured(action.get("types"))
        return outcomes.count("ok")

    def _do_tamper(self, action):
        changes = dict(action["set"])
        self.adversaries[action["adversary"]].tamper(action["type"],
                                                     lambda payload: dict(payload, **changes))

    def _do_attack(self, action):
        """Run one of the canned attack trials against principals of this scenario"""
        if action["attack"] not in ATTACKS:
            raise ScenarioError(f"Unknown attack {action['attack']!r}")
        world = AttackWorld(
            self.sim, self._actor(action, "idp"), self._actor(action, "sp"),
            self._actor(action, "evil_sp"), self._actor(action, "idc"),
            self._actor(action, "victim"), self._actor(action, "attacker"),
            tuple(action.get("requested", ("age",))))
        return run_attack(world, action["attack"], self.adversaries[action["adversary"]])

    # Assertions

    def evaluate(self, index, entry, events, checkpoint):
        check = entry["check"]
        try:
            passed, detail = getattr(self, "_check_" + check.replace("-", "_"))(entry, events, checkpoint)
        except (KeyError, TypeError, ValueError) as exc:
            passed, detail = False, f"Cannot evaluate: {exc!r}"
        if not passed:
            logger.warning("Assertion %d (%s) failed: %s", index, check, detail)
        return AssertionResult(index, check, bool(passed), detail)

    def _check_trace(self, entry, events, checkpoint):
        report = verify_log(events, checkpoint if entry.get("replay", True) else None)
        return report.ok, "; ".join(f"{v.rule}: {v.detail}" for v in report.violations)

    def _check_flow(self, entry, events, checkpoint):
        """The labelled login produced a granted flow with exactly its numbered hops"""
        value = self.results[entry["action"]].value
        flow = value["flow"] if isinstance(value, dict) else None
        flow_events = flow_messages(events).get(flow, [])
        if not any(e["type"] == "access.granted" and e["status"] == "ok" for e in flow_events):
            return False, f"flow {flow} was not granted"
        violations = check_flow_shape(flow, flow_events)
        return not violations, "; ".join(v.detail for v in violations)

    def _check_outcome(self, entry, events, checkpoint):
        outcome = self.results[entry["action"]].outcome
        return outcome == entry["equals"], f"outcome {outcome}"

    def _check_value(self, entry, events, checkpoint):
        value = self.results[entry["action"]].value
        for key in entry.get("path", ()):
            value = value[key]
        return value == entry["equals"], f"value {value!r}"

    def _check_count(self, entry, events, checkpoint):
        where = entry.get("where", {})
        count = sum(1 for event in events if all(event.get(k) == v for k, v in where.items()))
        passed = True
        if "equals" in entry:
            passed = count == entry["equals"]
        if "min" in entry:
            passed = passed and count >= entry["min"]
        if "max" in entry:
            passed = passed and count <= entry["max"]
        return passed, f"count {count}"

    def _check_aal(self, entry, events, checkpoint):
        """Latest AAL of the IDC session the labelled action opened"""
        session = self.results[entry["action"]].value["session"]
        aal = None
        for event in events:
            if event.get("event") == "idc_session" and event["session"] == session:
                aal = event["aal"]
        return aal == entry["equals"], f"aal {aal}"

    def _check_locked(self, entry, events, checkpoint):
        locked = False
        for event in events:
            if event.get("event") == "lock" and event["idc"] == entry["idc"] \
                    and event["user"] == entry["user"]:
                locked = event["locked"]
        return locked == entry.get("equals", True), f"locked {locked}"


def run_scenario(scenario, seed=None, out_dir=None, persistent=False, population=None):
    """Run a scenario (path, dict or Scenario); with out_dir, write the run directory:

    events.jsonl     the event log
    checkpoint.json  disclosure ledger, registries, locks and backups at the end
    results.json     action outcomes and assertion results
    """
    if isinstance(scenario, str):
        scenario = load_scenario(scenario)
    elif isinstance(scenario, dict):
        scenario = Scenario.from_dict(scenario)
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "events.jsonl")
    runner = ScenarioRunner(scenario, seed=seed, log_path=log_path, persistent=persistent,
                            population=population)
    try:
        result = runner.run()
    finally:
        runner.sim.close()
    if out_dir is not None:
        for name, content in (("checkpoint.json", result.checkpoint), ("results.json", result.to_dict())):
            with open(os.path.join(out_dir, name), "w", encoding="utf-8") as f:
                json.dump(content, f, indent=2, sort_keys=True)
                f.write("\n")
    logger.info("Scenario %s: %d actions, %d assertions, %s", scenario.source or "<inline>",
                len(result.actions), len(result.assertions), "ok" if result.ok else "FAILED")
    return result
