from fedauth_sim.errors import (
    AccessDenied, AccountLocked, AlreadyClaimed, AudienceMismatch, AuthenticationFailed,
    ConsentDenied, CsrfRejected, Expired, ReplayDetected, UnknownClient)
from fedauth_sim.federation import (
    AccessPolicy, AccessToken, DesktopBrowser, TokenCheck, authorize_additional_device, enroll,
    fido_login, finish_flow, password_login, qr_login, start_flow, validate_token)
from fedauth_sim.identity import AAL
from fedauth_sim.utils import parse_qr_payload

from .base import SimTestCase


class FederationTestCase(SimTestCase):
    def setUp(self):
        super().setUp()
        self.build_federation()

    def answered_flow(self, device=None):
        """Run a FIDO flow up to the code the IdP hands back; returns (flow, reply)"""
        device = self.phone if device is None else device
        flow = start_flow(self.sim, device, self.sp, self.idp, None, "fido")
        self.idp.send_challenge(flow, device.id)
        if not device.is_unlocked():
            device.user_gesture()
        return flow, device.answer_challenge(flow)

    def add_sp(self, sp_id, policy=None, register=True):
        sp = self.sim.add_sp(sp_id, policy=policy or AccessPolicy(required=("age",)))
        if register:
            self.idp.register_client(sp.id)
        sp.trust_idp(self.idp.id, self.idp.public_key)
        self.user.consent_policy.grant("age", sp.id)
        return sp


class TestFidoLogin(FederationTestCase):
    def test_login(self):
        result = fido_login(self.sim, self.phone, self.sp, self.idp)
        self.assertEqual(result.sp, "sp1")
        self.assertEqual(result.token.aal, AAL.AAL2)
        self.assertEqual(result.token.scope, {"age": 30})
        self.assertEqual(result.token.audience, "sp1")
        self.assertIn(result.flow, self.phone.granted)
        self.assertTraceOk()

    def test_software_key_is_aal2(self):
        tablet = self.sim.add_device("alice-tablet", "alice")
        authorize_additional_device(self.sim, self.phone, self.idp)
        enroll(self.sim, tablet, self.idp)
        self.assertEqual(fido_login(self.sim, tablet, self.sp, self.idp).token.aal, AAL.AAL2)

    def test_pseudonyms_unlinkable(self):
        first = fido_login(self.sim, self.phone, self.sp, self.idp)
        second = fido_login(self.sim, self.phone, self.sp, self.idp)
        self.assertNotEqual(first.token.subject, second.token.subject)
        self.assertNotIn("alice", first.token.subject)
        self.assertEqual(self.sp.stored_subjects(), [first.token.subject, second.token.subject])

    def test_disclosures_recorded(self):
        fido_login(self.sim, self.phone, self.sp, self.idp)
        disclosures = [e["entry"] for e in self.sim.log.events if e["event"] == "disclosure"]
        self.assertEqual(len(disclosures), 1)
        self.assertEqual((disclosures[0]["user"], disclosures[0]["sp"], disclosures[0]["attribute"]),
                         ("alice", "sp1", "age"))
        self.assertEqual(disclosures[0]["protocol"], "Federated")

    def test_consent_denied(self):
        with self.assertRaises(ConsentDenied):
            fido_login(self.sim, self.phone, self.sp, self.idp, consent={"age": "deny"})
        self.user.consent_policy.grant("age", "sp1", allow=False)
        with self.assertRaises(ConsentDenied):
            fido_login(self.sim, self.phone, self.sp, self.idp)
        self.assertEqual(self.sp.stored_subjects(), [])

    def test_unknown_client(self):
        sp = self.add_sp("sp2", register=False)
        with self.assertRaises(UnknownClient):
            fido_login(self.sim, self.phone, sp, self.idp)

    def test_locked_account(self):
        self.idp.locked.add("alice")
        with self.assertRaises(AccountLocked):
            fido_login(self.sim, self.phone, self.sp, self.idp)

    def test_revoked_device(self):
        self.idp.revoke_device("alice", self.phone.id)
        with self.assertRaises(AuthenticationFailed):
            fido_login(self.sim, self.phone, self.sp, self.idp)

    def test_insufficient_aal(self):
        sp = self.add_sp("sp-strict", AccessPolicy(required=("age",), min_aal=AAL.AAL3))
        with self.assertRaises(AccessDenied):
            fido_login(self.sim, self.phone, sp, self.idp)

    def test_missing_attribute(self):
        sp = self.add_sp("sp-country", AccessPolicy(required=("age", "country")))
        self.user.consent_policy.grant("country", sp.id)
        with self.assertRaises(AccessDenied):
            fido_login(self.sim, self.phone, sp, self.idp, requested=["age"])


class TestNonces(FederationTestCase):
    def test_nonce_expires(self):
        flow = start_flow(self.sim, self.phone, self.sp, self.idp, None, "fido")
        self.idp.send_challenge(flow, self.phone.id)
        self.sim.clock.advance(121)
        self.phone.user_gesture()
        with self.assertRaises(Expired):
            self.phone.answer_challenge(flow)

    def test_nonce_single_use(self):
        result = fido_login(self.sim, self.phone, self.sp, self.idp)
        nonce = self.sp.sessions[result.flow]["nonce"]
        assertion = self.phone.sign_assertion("idp1", "alice", nonce, self.phone.origin)
        with self.assertRaises(ReplayDetected):
            self.idp.complete_fido_authentication(nonce, assertion, {"age": "allow"})

    def test_channel_binding(self):
        flow = start_flow(self.sim, self.phone, self.sp, self.idp, None, "fido")
        self.idp.send_challenge(flow, self.phone.id)
        challenge = self.phone.take_challenge(flow)
        assertion = self.phone.sign_assertion("idp1", "alice", challenge["nonce"], "https://evil.example")
        with self.assertRaises(AuthenticationFailed):
            self.phone.send("idp1", "fido.response", {
                "flow": flow, "request": challenge["request"], "assertion": assertion.to_payload(),
                "consent": {"age": "allow"}})

    def test_challenge_not_delivered_twice(self):
        flow = start_flow(self.sim, self.phone, self.sp, self.idp, None, "fido")
        self.idp.send_challenge(flow, self.phone.id)
        with self.assertRaises(ReplayDetected):
            self.idp.send_challenge(flow, self.phone.id)


class TestCodeExchange(FederationTestCase):
    def test_code_single_use(self):
        result = fido_login(self.sim, self.phone, self.sp, self.idp)
        session = self.sp.sessions[result.flow]
        with self.assertRaises(ReplayDetected):
            self.idp.exchange_code_for_token(session["code"], "sp1", session["csrf"])

    def test_code_checks(self):
        _, reply = self.answered_flow()
        code, state = reply["code"], reply["state"]
        cases = [
            ("unknown code", ("code-nope", "sp1", state), AuthenticationFailed),
            ("other client", (code, "sp2", state), AudienceMismatch),
            ("origin", (code, "sp1", state, "https://evil.example"), CsrfRejected),
            ("csrf", (code, "sp1", "csrf-forged"), CsrfRejected),
            ("no csrf", (code, "sp1", None), CsrfRejected),
        ]
        for name, args, error in cases:
            with self.subTest(name):
                with self.assertRaises(error):
                    self.idp.exchange_code_for_token(*args)
        self.sim.clock.advance(121)
        with self.assertRaises(Expired):
            self.idp.exchange_code_for_token(code, "sp1", state)

    def test_forged_redirect(self):
        flow, reply = self.answered_flow()
        with self.assertRaises(CsrfRejected):
            self.phone.send("sp1", "authz.code", {"flow": flow, "code": reply["code"],
                                                  "state": reply["state"],
                                                  "origin": "https://evil.example"})
        result = finish_flow(self.sim, self.phone, self.sp, self.idp, flow, reply["code"], reply["state"])
        self.assertEqual(result.token.audience, "sp1")

    def test_token_single_use(self):
        result = fido_login(self.sim, self.phone, self.sp, self.idp)
        with self.assertRaises(ReplayDetected):
            self.idp.send("sp1", "token.response", {"flow": result.flow,
                                                    "token": result.token.to_payload()})


class TestValidateToken(FederationTestCase):
    def setUp(self):
        super().setUp()
        self.token = fido_login(self.sim, self.phone, self.sp, self.idp).token

    def test_valid(self):
        check = validate_token(self.token, "sp1", self.sim.clock.now, self.idp.public_key)
        self.assertEqual(check, TokenCheck(True, scope={"age": 30}, aal=AAL.AAL2,
                                           subject=self.token.subject))

    def test_invalid(self):
        other = self.sim.add_idp("idp2")
        cases = [
            ("audience", ("sp2", 0.0, self.idp.public_key), "AudienceMismatch"),
            ("expired", ("sp1", self.token.expires_at, self.idp.public_key), "Expired"),
            ("signature", ("sp1", 0.0, other.public_key), "BadSignature"),
        ]
        for name, (audience, now, key), reason in cases:
            with self.subTest(name):
                check = validate_token(self.token, audience, now, key)
                self.assertEqual((check.valid, check.reason), (False, reason))

    def test_payload_round_trip(self):
        self.assertEqual(AccessToken.from_payload(self.token.to_payload()), self.token)
        with self.assertRaises(AuthenticationFailed):
            AccessToken.from_payload({"token": "t"})


class TestAccessPolicy(SimTestCase):
    def test_from_config(self):
        policy = AccessPolicy.from_config({"required": ["age"], "min_aal": "AAL2"})
        self.assertEqual(policy, AccessPolicy(("age",), AAL.AAL2))
        self.assertEqual(AccessPolicy.from_config(None), AccessPolicy())

    def test_evaluate(self):
        policy = AccessPolicy(("age",), AAL.AAL2)
        cases = [
            (TokenCheck(False, "Expired"), (False, "Expired")),
            (TokenCheck(True, scope={}, aal=AAL.AAL3), (False, "MissingAttribute")),
            (TokenCheck(True, scope={"age": 30}, aal=AAL.AAL1), (False, "InsufficientAal")),
            (TokenCheck(True, scope={"age": 30}, aal=AAL.AAL2), (True, None)),
        ]
        for check, expected in cases:
            with self.subTest(check=check):
                self.assertEqual(policy.evaluate(check), expected)


class TestMultiDevice(FederationTestCase):
    def test_second_device_needs_authorization(self):
        tablet = self.sim.add_device("alice-tablet", "alice", tee=True)
        with self.assertRaises(AccessDenied):
            enroll(self.sim, tablet, self.idp)
        authorize_additional_device(self.sim, self.phone, self.idp)
        enroll(self.sim, tablet, self.idp)
        self.assertEqual(len(self.idp.account("alice").active_registrations()), 2)
        self.assertEqual(fido_login(self.sim, tablet, self.sp, self.idp).token.aal, AAL.AAL2)

        laptop = self.sim.add_device("alice-laptop", "alice")
        with self.assertRaises(AccessDenied):
            enroll(self.sim, laptop, self.idp)

    def test_revoking_one_device_keeps_the_other(self):
        tablet = self.sim.add_device("alice-tablet", "alice", tee=True)
        authorize_additional_device(self.sim, self.phone, self.idp)
        enroll(self.sim, tablet, self.idp)
        self.idp.revoke_device("alice", self.phone.id)
        with self.assertRaises(AuthenticationFailed):
            fido_login(self.sim, self.phone, self.sp, self.idp)
        fido_login(self.sim, tablet, self.sp, self.idp)


class TestPasswordLogin(SimTestCase):
    def setUp(self):
        super().setUp()
        self.build_federation(password="hunter2-hunter2")

    def test_login(self):
        result = password_login(self.sim, self.phone, self.sp, self.idp, "hunter2-hunter2")
        self.assertEqual(result.token.aal, AAL.AAL1)
        self.assertTraceOk()

    def test_wrong_password(self):
        with self.assertRaises(AuthenticationFailed):
            password_login(self.sim, self.phone, self.sp, self.idp, "hunter3")


class TestQrLogin(FederationTestCase):
    def setUp(self):
        super().setUp()
        self.desktop = DesktopBrowser(self.sim, "alice-desktop")

    def test_login(self):
        result = qr_login(self.sim, self.desktop, self.phone, self.sp, self.idp)
        self.assertEqual(result.token.aal, AAL.AAL2)
        self.assertIn(result.flow, self.desktop.granted)
        self.assertNotIn(result.flow, self.phone.granted)
        self.assertTrue(self.desktop.displayed[result.flow].startswith("fido-qr:idp1:"))
        self.assertTraceOk()

    def test_claim_once(self):
        result = qr_login(self.sim, self.desktop, self.phone, self.sp, self.idp)
        [session] = self.idp.qr_sessions.values()
        self.assertEqual(session.state.value, "Completed")
        nonce = self.sp.sessions[result.flow]["nonce"]
        assertion = self.phone.sign_assertion("idp1", "alice", nonce, session.payload)
        with self.assertRaises(AlreadyClaimed):
            self.idp.claim_qr(session.session_id, assertion, {"age": "allow"})

    def test_rejected_claim_leaves_the_session_pending(self):
        flow = start_flow(self.sim, self.desktop, self.sp, self.idp, None, "qr")
        self.sp.send(self.desktop.id, "qr.display", {"flow": flow, "qr": self.sp.sessions[flow]["qr"]})
        payload = self.desktop.displayed[flow]
        _, qr_session, challenge = parse_qr_payload(payload)
        consent = self.user.consent_decisions(("age",), self.sp.id)
        if not self.phone.is_unlocked():
            self.phone.user_gesture()
        rejected = {
            "unknown challenge": self.phone.sign_assertion("idp1", "alice", "wrong-challenge", payload),
            "other channel": self.phone.sign_assertion("idp1", "alice", challenge, "https://elsewhere"),
        }
        for name, assertion in rejected.items():
            with self.subTest(name):
                with self.assertRaises(AuthenticationFailed):
                    self.idp.claim_qr(qr_session, assertion, consent)
                self.assertEqual(self.idp.qr_sessions[qr_session].state.value, "Pending")
        assertion = self.phone.sign_assertion("idp1", "alice", challenge, payload)
        issued = self.idp.claim_qr(qr_session, assertion, consent)
        self.assertEqual(self.idp.qr_sessions[qr_session].state.value, "Completed")
        self.assertEqual(self.idp.qr_sessions[qr_session].code, issued.code)
