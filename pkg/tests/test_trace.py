import copy
from unittest import TestCase

from fedauth_sim.federation import fido_login
from fedauth_sim.scenario import checkpoint_state
from fedauth_sim.trace import replay_state, verify_log

from .base import SimTestCase


def sequenced(events):
    """Copies of events numbered 1..n, as a log writer would"""
    return [dict(copy.deepcopy(event), seq=seq) for seq, event in enumerate(events, start=1)]


def principal(principal_id, role):
    return {"event": "principal", "id": principal_id, "role": role, "display_name": ""}


def rules(events, checkpoint=None):
    return {v.rule for v in verify_log(events, checkpoint).violations}


class TestRecordedLogin(SimTestCase):
    def setUp(self):
        super().setUp()
        self.build_federation()
        fido_login(self.sim, self.phone, self.sp, self.idp)
        self.events = self.logged_events()

    def index_of(self, msg_type):
        [index] = [i for i, e in enumerate(self.events)
                   if e["event"] == "message" and e["type"] == msg_type]
        return index

    def test_clean_log(self):
        report = verify_log(self.events)
        self.assertTrue(report.ok)
        self.assertEqual(report.granted_flows, 1)
        self.assertEqual(report.to_dict()["violations"], [])

    def test_dropped_hop(self):
        del self.events[self.index_of("fido.challenge")]
        self.assertEqual(rules(sequenced(self.events)), {"flow-shape"})

    def test_reordered_hops(self):
        challenge, response = self.index_of("fido.challenge"), self.index_of("fido.response")
        events = self.events
        events[challenge], events[response] = events[response], events[challenge]
        self.assertEqual(rules(sequenced(events)), {"flow-shape"})

    def test_rerouted_hop(self):
        self.events[self.index_of("access.granted")]["to"] = "mallory-phone"
        self.assertEqual(rules(self.events), {"flow-shape"})

    def test_duplicated_token_issue(self):
        [exchange] = [e for e in self.events
                      if e["event"] == "op" and e["op"] == "exchange_code_for_token"]
        self.events.append(exchange)
        self.assertEqual(rules(sequenced(self.events)), {"nonce-single-use"})

    def test_gap_in_sequence(self):
        del self.events[3]
        self.assertEqual(rules(self.events), {"sequence"})

    def test_token_for_another_audience(self):
        self.events[self.index_of("token.response")]["payload"]["token"]["aud"] = "sp2"
        self.assertEqual(rules(self.events), {"audience"})

    def test_real_user_id_as_subject(self):
        self.events[self.index_of("token.response")]["payload"]["token"]["sub"] = "alice"
        self.assertEqual(rules(self.events), {"pseudonym"})

    def test_replay_matches_checkpoint(self):
        checkpoint = checkpoint_state(self.sim)
        self.assertEqual(replay_state(self.events), checkpoint)
        self.assertEqual(len(checkpoint["ledger"]), 1)
        checkpoint["ledger"][0]["value"] = 31
        self.assertEqual(rules(self.events, checkpoint), {"replay"})


class TestCraftedEvents(TestCase):
    def test_lock_dominance(self):
        lock = {"event": "lock", "idc": "idc", "user": "alice", "scope": ["idp1"],
                "reason": "UserInitiated", "set_at": 0.0, "locked": True}
        issued = {"event": "op", "op": "exchange_code_for_token", "actor": "idp1", "outcome": "ok",
                  "at": 0.0, "details": {"user": "alice", "request": "req-1"}}
        cases = [
            ("covered entity", lock, "idp1", {"lock-dominance"}),
            ("other entity", lock, "idp2", set()),
            ("everything", dict(lock, scope=["all"]), "idp2", {"lock-dominance"}),
            ("unlocked", dict(lock, locked=False), "idp1", set()),
        ]
        for name, state, actor, expected in cases:
            with self.subTest(name):
                self.assertEqual(rules(sequenced([state, dict(issued, actor=actor)])), expected)

    def test_tentative_containment(self):
        op = {"event": "op", "op": "list_accounts", "actor": "idc", "at": 0.0}
        cases = [
            ("ok", "AAL1", {"tentative-containment"}),
            ("ok", "None", {"tentative-containment"}),
            ("ok", "AAL2", set()),
            ("TentativeAccessDenied", "AAL1", set()),
        ]
        for outcome, aal, expected in cases:
            with self.subTest(outcome=outcome, aal=aal):
                event = dict(op, outcome=outcome, details={"aal": aal})
                self.assertEqual(rules(sequenced([event])), expected)

    def test_mobile_connect_never_reaches_an_sp(self):
        message = {"event": "message", "msg_id": "m0000001", "from": "idc", "to": "mno1",
                   "type": "mc.otp", "payload": {"mc_session": "mc-1"}, "sent_at": 0.0,
                   "secure": True, "status": "ok"}
        head = [principal("idc", "IDC"), principal("mno1", "MNO"), principal("sp1", "SP")]
        self.assertEqual(rules(sequenced(head + [message])), set())
        self.assertEqual(rules(sequenced(head + [dict(message, **{"from": "sp1"})])),
                         {"mc-opacity"})
        self.assertEqual(rules(sequenced(head + [dict(message, type="sms.deliver", to="sp1")])),
                         {"mc-opacity"})

    def test_adversary_soundness(self):
        observe = {"event": "observe", "adversary": "eve", "msg_id": "m0000001",
                   "type": "authz.code", "secure": True, "readable": True, "at": 0.0}
        cases = [
            (["Replay"], observe, {"adversary-soundness"}),
            (["MitM"], observe, set()),
            (["Replay"], dict(observe, secure=False), set()),
            (["Replay"], dict(observe, readable=False), set()),
        ]
        for capabilities, event, expected in cases:
            with self.subTest(capabilities=capabilities, event=event):
                declared = {"event": "adversary", "adversary": "eve", "strategy": None,
                            "capabilities": capabilities, "at": 0.0}
                self.assertEqual(rules(sequenced([declared, event])), expected)

    def test_replay_state(self):
        events = sequenced([
            principal("idc", "IDC"),
            {"event": "entity", "idc": "idc", "entity": "idp1", "kind": "IdP", "max_aal": "AAL3",
             "user": "alice"},
            {"event": "entity", "idc": "idc", "entity": "baa1", "kind": "BAA", "max_aal": "AAL2",
             "user": "alice"},
            {"event": "entity_removed", "idc": "idc", "entity": "baa1", "user": "alice"},
            {"event": "backup", "idc": "idc", "user": "alice", "version": 2},
            {"event": "lock", "idc": "idc", "user": "alice", "scope": ["all"],
             "reason": "RiskAutoLock", "set_at": 5.0, "locked": True},
        ])
        self.assertEqual(replay_state(events), {
            "ledger": [],
            "consolidators": {"idc": {
                "registry": {
                    "catalog": [
                        {"entity": "idp1", "kind": "IdP", "max_aal": "AAL3"},
                        {"entity": "baa1", "kind": "BAA", "max_aal": "AAL2"},
                    ],
                    "users": {"alice": ["idp1"]},
                },
                "locks": {"alice": {"user": "alice", "scope": ["all"], "reason": "RiskAutoLock",
                                    "set_at": 5.0, "locked": True}},
                "backups": {"alice": 2},
            }},
        })
