# Offline checks over a protocol event log, and replay of the state it implies

import collections
import logging
from dataclasses import dataclass, field

from .federation import FLOW_SHAPES
from .mobile_connect import MC_MESSAGE_TYPES
from .risk import DisclosureLedger


logger = logging.getLogger(__name__)

# Who sends each numbered hop: client, sp or idp
_SHAPE_ROUTES = {
    "login.request": ("client", "sp"),
    "authz.request": ("sp", "idp"),
    "token.response": ("idp", "sp"),
    "access.granted": ("sp", "client"),
}
_CHALLENGE_ROUTE = ("idp", "client")
_RESPONSE_ROUTE = ("client", "idp")

CODE_ISSUING_OPS = frozenset({
    "complete_fido_authentication", "complete_password_authentication",
    "complete_pabac_authentication", "claim_qr", "complete_mc_proxy"})

# Operations a tentative (AAL1) IDC session must never complete
TENTATIVE_GATED_OPS = frozenset({
    "store_credential_backup", "restore_credential_backup", "view_credentials", "edit_consent",
    "transfer_attribute", "set_storage_preference", "acquire_online_attributes",
    "backup_baa_passwords", "list_accounts", "remove_account", "delete_account"})


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str
    seq: int = None

    def to_dict(self):
        return {"rule": self.rule, "detail": self.detail, "seq": self.seq}


@dataclass
class TraceReport:
    events: int
    flows: int = 0
    granted_flows: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def to_dict(self):
        return {"events": self.events, "flows": self.flows, "granted_flows": self.granted_flows,
                "ok": self.ok, "violations": [v.to_dict() for v in self.violations]}


def messages(events):
    return [e for e in events if e.get("event") == "message"]


def flow_messages(events):
    """flow id -> its message events, in log order"""
    flows = collections.OrderedDict()
    for event in messages(events):
        flow = (event.get("payload") or {}).get("flow")
        if flow is not None:
            flows.setdefault(flow, []).append(event)
    return flows


def _flow_method(flow_events):
    for event in flow_events:
        if event["type"] == "login.request":
            return event["payload"].get("method", "fido")
    return None


def check_flow_shape(flow, flow_events):
    """A flow that got anywhere near a grant must show exactly its numbered hops, in order"""
    method = _flow_method(flow_events)
    shape = FLOW_SHAPES.get(method)
    accepted = [e for e in flow_events if e["status"] == "ok"]
    finished = any(e["type"] in ("token.response", "access.granted") for e in accepted)
    if not finished:
        return []
    if shape is None:
        if method == "qr":
            return []
        return [Violation("flow-shape", f"{flow}: granted without a known login method",
                          accepted[0]["seq"])]
    hops = [e for e in accepted if e["type"] in shape]
    observed = tuple(e["type"] for e in hops)
    if observed != shape:
        return [Violation("flow-shape", f"{flow}: expected {list(shape)}, saw {list(observed)}",
                          hops[0]["seq"] if hops else None)]
    return _check_routes(flow, hops, shape)


def _check_routes(flow, hops, shape):
    parties = {"client": hops[0]["from"], "sp": hops[0]["to"], "idp": hops[1]["to"]}
    violations = []
    for hop in hops:
        if hop["type"] in _SHAPE_ROUTES:
            route = _SHAPE_ROUTES[hop["type"]]
        elif hop["type"] == shape[2]:
            route = _CHALLENGE_ROUTE
        else:
            route = _RESPONSE_ROUTE
        expected = (parties[route[0]], parties[route[1]])
        if (hop["from"], hop["to"]) != expected:
            violations.append(Violation(
                "flow-shape", f"{flow}: {hop['type']} went {hop['from']}->{hop['to']}, "
                              f"expected {expected[0]}->{expected[1]}", hop["seq"]))
    return violations


def check_single_use(events):
    """One code per authorization request, one token per code"""
    violations = []
    seen = collections.Counter()
    for event in events:
        if event.get("event") != "op" or event["outcome"] != "ok":
            continue
        request = event["details"].get("request")
        if request is None:
            continue
        if event["op"] in CODE_ISSUING_OPS:
            kind = "code"
        elif event["op"] == "exchange_code_for_token":
            kind = "token"
        else:
            continue
        key = (event["actor"], kind, request)
        seen[key] += 1
        if seen[key] > 1:
            violations.append(Violation("nonce-single-use",
                                        f"{event['actor']} issued a second {kind} for {request}",
                                        event["seq"]))
    return violations


def check_audiences(events, principals):
    """Accepted tokens name their recipient, and never a user's real id"""
    violations = []
    users = {p for p, role in principals.items() if role == "User"}
    subjects = set()
    for event in messages(events):
        if event["type"] != "token.response" or event["status"] != "ok":
            continue
        token = event["payload"]["token"]
        if token["aud"] != event["to"]:
            violations.append(Violation("audience", f"{event['to']} accepted a token for "
                                                    f"{token['aud']}", event["seq"]))
        if token["sub"] in users:
            violations.append(Violation("pseudonym", f"token subject is the user id {token['sub']}",
                                        event["seq"]))
        if token["sub"] in subjects:
            violations.append(Violation("pseudonym", f"subject {token['sub']} reused", event["seq"]))
        subjects.add(token["sub"])
    return violations


def _covers(state, entity):
    return state["locked"] and ("all" in state["scope"] or entity in state["scope"])


def check_lock_dominance(events):
    violations = []
    locks = {}
    for event in events:
        if event.get("event") == "lock":
            locks[event["user"]] = event
        elif event.get("event") == "op" and event["op"] == "exchange_code_for_token" \
                and event["outcome"] == "ok":
            user = event["details"].get("user")
            state = locks.get(user)
            if state is not None and _covers(state, event["actor"]):
                violations.append(Violation("lock-dominance",
                                            f"{event['actor']} issued a token for locked {user}",
                                            event["seq"]))
    return violations


def check_tentative_containment(events):
    violations = []
    for event in events:
        if event.get("event") == "op" and event["op"] in TENTATIVE_GATED_OPS \
                and event["outcome"] == "ok" and event["details"].get("aal") in ("AAL1", "None"):
            violations.append(Violation("tentative-containment",
                                        f"{event['op']} completed in a {event['details']['aal']} session",
                                        event["seq"]))
    return violations


def check_mc_opacity(events, principals):
    violations = []
    sps = {p for p, role in principals.items() if role == "SP"}
    for event in messages(events):
        if event["type"] in MC_MESSAGE_TYPES and (event["to"] in sps or event["from"] in sps):
            violations.append(Violation("mc-opacity", f"{event['type']} between "
                                                      f"{event['from']} and {event['to']}",
                                        event["seq"]))
    return violations


def check_adversary_soundness(events):
    violations = []
    capabilities = {}
    for event in events:
        if event.get("event") == "adversary":
            capabilities[event["adversary"]] = set(event["capabilities"])
        elif event.get("event") == "observe" and event["secure"] and event["readable"] \
                and "MitM" not in capabilities.get(event["adversary"], ()):
            violations.append(Violation("adversary-soundness",
                                        f"{event['adversary']} read secure {event['msg_id']}",
                                        event["seq"]))
    return violations


def check_sequence(events):
    for expected, event in enumerate(events, start=1):
        if event.get("seq") != expected:
            return [Violation("sequence", f"event {expected} has seq {event.get('seq')}",
                              event.get("seq"))]
    return []


def principals_of(events):
    return {e["id"]: e["role"] for e in events if e.get("event") == "principal"}


def verify_log(events, checkpoint=None):
    """Run every trace check; with a checkpoint, also compare the replayed state"""
    principals = principals_of(events)
    flows = flow_messages(events)
    report = TraceReport(events=len(events), flows=len(flows))
    report.violations.extend(check_sequence(events))
    for flow, flow_events in flows.items():
        if any(e["type"] == "access.granted" and e["status"] == "ok" for e in flow_events):
            report.granted_flows += 1
        report.violations.extend(check_flow_shape(flow, flow_events))
    report.violations.extend(check_single_use(events))
    report.violations.extend(check_audiences(events, principals))
    report.violations.extend(check_lock_dominance(events))
    report.violations.extend(check_tentative_containment(events))
    report.violations.extend(check_mc_opacity(events, principals))
    report.violations.extend(check_adversary_soundness(events))
    if checkpoint is not None:
        replayed = replay_state(events)
        for key in sorted(checkpoint):
            if replayed.get(key) != checkpoint[key]:
                report.violations.append(Violation("replay", f"replayed {key} differs from checkpoint"))
    for violation in report.violations:
        logger.warning("Trace violation %s: %s", violation.rule, violation.detail)
    return report


def replay_state(events):
    """Rebuild the persistent state (disclosures, registries, locks, backups) from events"""
    catalogs = collections.defaultdict(dict)
    users = collections.defaultdict(lambda: collections.defaultdict(list))
    locks = collections.defaultdict(dict)
    backups = collections.defaultdict(dict)
    for event in events:
        kind = event.get("event")
        if kind == "entity":
            idc = event["idc"]
            catalogs[idc].setdefault(event["entity"], {
                "entity": event["entity"], "kind": event["kind"], "max_aal": event["max_aal"]})
            if event.get("user") is not None and event["entity"] not in users[idc][event["user"]]:
                users[idc][event["user"]].append(event["entity"])
        elif kind == "entity_removed":
            linked = users[event["idc"]][event["user"]]
            if event["entity"] in linked:
                linked.remove(event["entity"])
        elif kind == "lock":
            locks[event["idc"]][event["user"]] = {
                name: event[name] for name in ("user", "scope", "reason", "set_at", "locked")}
        elif kind == "backup":
            backups[event["idc"]][event["user"]] = event["version"]
        elif kind == "account_deleted":
            backups[event["idc"]].pop(event["user"], None)
    consolidators = {}
    declared = {p for p, role in principals_of(events).items() if role == "IDC"}
    for idc in sorted(declared | set(catalogs) | set(users) | set(locks) | set(backups)):
        consolidators[idc] = {
            "registry": {
                "catalog": list(catalogs[idc].values()),
                "users": {user: list(ids) for user, ids in sorted(users[idc].items()) if ids},
            },
            "locks": dict(sorted(locks[idc].items())),
            "backups": dict(sorted(backups[idc].items())),
        }
    return {"ledger": DisclosureLedger.replay(events).to_list(), "consolidators": consolidators}
