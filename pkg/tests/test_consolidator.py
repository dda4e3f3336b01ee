import itertools

from fedauth_sim.consolidator import (
    RECOVERY_STEPS, RISK_ENGINE, EntityRegistry, LockReason, RecoveryEvent, RecoveryState,
    RecoveryStep, acquire_online_attributes, granted_aal, idc_fido_login, idc_step_up,
    mc_proxy_authenticate, recover_account, transition)
from fedauth_sim.errors import (
    AccessDenied, AccountLocked, AuthenticationFailed, ConsentDenied, DocumentParseError,
    IllegalTransition, McCheckFailed, NoBaaRegistered, NotFound, NoVerifier, RecoveryDenied,
    TentativeAccessDenied, WeakPassword)
from fedauth_sim.federation import (
    AccessPolicy, AccessToken, enroll, fido_login, finish_flow, start_flow)
from fedauth_sim.identity import AAL
from fedauth_sim.scenario import checkpoint_state

from .base import BAA_PASSWORD, BACKUP_PASSWORD, MSISDN, SimTestCase


LADDER = (
    RecoveryStep(RecoveryEvent.CREDENTIAL_ACCEPTED),
    RecoveryStep(RecoveryEvent.MC_AUTHENTICATED),
    RecoveryStep(RecoveryEvent.BAA_LOGIN),
    RecoveryStep(RecoveryEvent.RECORDS_STREAMING),
    RecoveryStep(RecoveryEvent.VERDICT),
    RecoveryStep(RecoveryEvent.FINALIZE),
)


def run_steps(steps):
    """States visited from Start; stops at the first rejected step"""
    state = RecoveryState.START
    visited = []
    for step in steps:
        try:
            state = transition(state, step)
        except (IllegalTransition, McCheckFailed):
            break
        visited.append(state)
    return visited


class TestRecoveryLadder(SimTestCase):
    def test_ladder(self):
        self.assertEqual(run_steps(LADDER), [
            RecoveryState.TENTATIVE_IDC, RecoveryState.MC_VERIFIED, RecoveryState.BAA_TENTATIVE,
            RecoveryState.COLLECTING_RECORDS, RecoveryState.VERDICT_RECEIVED,
            RecoveryState.FULL_ACCESS])
        self.assertEqual(granted_aal(RecoveryState.FULL_ACCESS), AAL.AAL3)

    def test_short_sequences_stay_tentative(self):
        for length in range(1, 6):
            for steps in itertools.product(RECOVERY_STEPS, repeat=length):
                for state in run_steps(steps):
                    self.assertIsNot(state, RecoveryState.FULL_ACCESS)
                    self.assertLessEqual(granted_aal(state), AAL.AAL1)

    def test_only_the_ladder_reaches_full_access(self):
        winners = []

        def explore(state, path):
            if state is RecoveryState.FULL_ACCESS:
                winners.append(tuple(path))
                return
            if len(path) == 8:
                return
            for step in RECOVERY_STEPS:
                try:
                    target = transition(state, step)
                except (IllegalTransition, McCheckFailed):
                    continue
                explore(target, path + [step])

        explore(RecoveryState.START, [])
        self.assertEqual(winners, [LADDER])

    def test_rejections(self):
        with self.assertRaises(McCheckFailed):
            transition(RecoveryState.TENTATIVE_IDC, RecoveryStep(RecoveryEvent.MC_AUTHENTICATED, False))
        self.assertIs(transition(RecoveryState.COLLECTING_RECORDS,
                                 RecoveryStep(RecoveryEvent.VERDICT, False)),
                      RecoveryState.FAILED)
        for step in RECOVERY_STEPS:
            with self.subTest(step=step):
                with self.assertRaises((IllegalTransition, McCheckFailed)):
                    transition(RecoveryState.FAILED, step)
        self.assertIs(granted_aal(RecoveryState.FAILED), AAL.NONE)


class TestEntityRegistry(SimTestCase):
    def test_discover_baa(self):
        registry = EntityRegistry()
        for entity, max_aal in (("baa1", "AAL2"), ("baa2", "AAL3"), ("baa3", "AAL3")):
            registry.register(entity, "BAA", max_aal)
            registry.link("alice", entity)
        self.assertEqual(registry.discover_baa("alice"), "baa2")
        registry.unlink("alice", "baa2")
        self.assertEqual(registry.discover_baa("alice"), "baa3")
        with self.assertRaises(NoBaaRegistered):
            registry.discover_baa("bob")

    def test_link_checks(self):
        registry = EntityRegistry()
        with self.assertRaises(NotFound):
            registry.link("alice", "idp9")
        registry.register("idp1", "IdP", "AAL3")
        registry.link("alice", "idp1")
        registry.link("alice", "idp1")
        self.assertEqual(registry.snapshot(), {
            "catalog": [{"entity": "idp1", "kind": "IdP", "max_aal": "AAL3"}],
            "users": {"alice": ["idp1"]},
        })
        with self.assertRaises(NotFound):
            registry.unlink("bob", "idp1")


class ConsolidatorTestCase(SimTestCase):
    def setUp(self):
        super().setUp()
        self.build_consolidator()

    def fido_session(self):
        return idc_fido_login(self.sim, self.phone, self.idc)

    def tentative_session(self):
        return self.idc.start_recovery("alice", password=BACKUP_PASSWORD).session_id


class TestAccountManagement(ConsolidatorTestCase):
    def test_admin_only(self):
        with self.assertRaises(AccessDenied):
            self.idc.register_entity("alice", "idp2", "IdP", "AAL2", user="alice")

    def test_weak_backup_password(self):
        with self.assertRaises(WeakPassword):
            self.idc.enroll_backup_password("alice", "short")

    def test_list_and_remove(self):
        session = self.fido_session()
        self.assertEqual([e["entity"] for e in self.idc.list_accounts(session)],
                         ["idp1", "baa1", "mno1"])
        self.assertEqual(self.idc.discover_baa("sp1", "alice"), "baa1")
        self.idc.remove_account(session, "baa1")
        self.assertEqual([e["entity"] for e in self.idc.list_accounts(session)], ["idp1", "mno1"])
        with self.assertRaises(NoBaaRegistered):
            self.idc.discover_baa("sp1", "alice")
        self.assertTraceOk(checkpoint_state(self.sim))

    def test_tentative_session_contained(self):
        session = self.tentative_session()
        operations = [
            lambda: self.idc.list_accounts(session),
            lambda: self.idc.remove_account(session, "baa1"),
            lambda: self.idc.delete_account(session),
            lambda: self.idc.edit_consent(session, "age", "sp1", False),
            lambda: self.idc.backup_baa_passwords(session, {"baa1": "x"}),
            lambda: self.idc.set_storage_preference(session, ["age"]),
            lambda: self.idc.transfer_attribute(session, "age", "idp1"),
        ]
        for index, call in enumerate(operations):
            with self.subTest(index=index):
                with self.assertRaises(TentativeAccessDenied):
                    call()
        self.assertTraceOk()

    def test_tentative_view(self):
        self.idc.backup_baa_passwords(self.fido_session(), {"baa1": BAA_PASSWORD})
        view = self.idc.consent_and_profile_view(self.tentative_session())
        self.assertEqual(view, {
            "idps": [{"entity": "idp1", "max_aal": "AAL3"}, {"entity": "baa1", "max_aal": "AAL2"},
                     {"entity": "mno1", "max_aal": "AAL2"}],
            "backup_passwords": {"baa1": BAA_PASSWORD},
        })
        self.assertEqual(self.idc.read_backup_passwords(self.tentative_session()),
                         {"baa1": BAA_PASSWORD})

    def test_profile_view(self):
        fido_login(self.sim, self.phone, self.sp, self.idp)
        view = self.idc.consent_and_profile_view(self.fido_session())
        self.assertEqual(sorted(view), ["consent", "disclosures", "risks"])
        self.assertEqual(view["disclosures"], {"sp1": {"age": 30}})
        self.assertLessEqual(set(view["risks"]), {"sp1"})

    def test_edit_consent(self):
        self.idc.edit_consent(self.fido_session(), "age", "sp1", False)
        with self.assertRaises(ConsentDenied):
            fido_login(self.sim, self.phone, self.sp, self.idp)

    def test_delete_account(self):
        session = self.fido_session()
        self.idc.delete_account(session)
        self.assertEqual(self.idc.registry.entities_for("alice"), [])
        self.assertNotIn("alice", self.idc.accounts)
        with self.assertRaises(AuthenticationFailed):
            self.idc.list_accounts(session)
        self.assertEqual([e["event"] for e in self.sim.log.events].count("account_deleted"), 1)
        self.assertTraceOk(checkpoint_state(self.sim))


class TestLocking(ConsolidatorTestCase):
    def test_lock_one_entity(self):
        session = self.fido_session()
        state = self.idc.set_lock("alice", "alice", ["idp1"], "lock", session)
        self.assertEqual((state.scope, state.reason, state.locked),
                         (("idp1",), LockReason.USER_INITIATED, True))
        with self.assertRaises(AccountLocked):
            fido_login(self.sim, self.phone, self.sp, self.idp)
        # the IDC itself was not in scope
        self.fido_session()
        self.idc.set_lock("alice", "alice", ["idp1"], "unlock", session)
        fido_login(self.sim, self.phone, self.sp, self.idp)
        [locked, unlocked] = [e for e in self.sim.log.events if e["event"] == "lock"]
        self.assertEqual((locked["targets"], unlocked["targets"]), (["idp1"], ["idp1"]))
        self.assertTraceOk(checkpoint_state(self.sim))

    def test_lock_everything_from_tentative_session(self):
        session = self.tentative_session()
        self.idc.set_lock("alice", "alice", ["all"], "lock", session)
        [event] = [e for e in self.sim.log.events if e["event"] == "lock"]
        self.assertEqual(event["targets"], ["idp1", "baa1", "mno1", "alice-phone"])
        self.assertTrue(self.phone.amm_locked)
        self.assertIn("alice", self.baa.locked)
        with self.assertRaises(AccountLocked):
            self.phone.unlock_gate(True)
        with self.assertRaises(AccountLocked):
            self.fido_session()
        with self.assertRaises(TentativeAccessDenied):
            self.idc.set_lock("alice", "alice", ["all"], "unlock", session)
        self.assertTraceOk(checkpoint_state(self.sim))

    def test_locks_accumulate(self):
        session = self.fido_session()
        self.idc.set_lock("alice", "alice", ["idp1"], "lock", session)
        state = self.idc.set_lock("alice", "alice", ["baa1"], "lock", session)
        self.assertEqual((state.scope, state.locked), (("baa1", "idp1"), True))
        state = self.idc.set_lock("alice", "alice", ["baa1"], "unlock", session)
        self.assertEqual((state.scope, state.locked), (("idp1",), True))
        self.assertNotIn("alice", self.baa.locked)
        self.assertIn("alice", self.idp.locked)
        with self.assertRaises(AccountLocked):
            fido_login(self.sim, self.phone, self.sp, self.idp)
        state = self.idc.set_lock("alice", "alice", ["idp1"], "unlock", session)
        self.assertEqual((state.scope, state.locked), ((), False))
        fido_login(self.sim, self.phone, self.sp, self.idp)
        self.assertTraceOk(checkpoint_state(self.sim))

    def test_unlock_one_entity_out_of_all(self):
        session = self.fido_session()
        self.idc.set_lock("alice", "alice", ["all"], "lock", session)
        state = self.idc.set_lock("alice", "alice", ["idp1"], "unlock", session)
        self.assertEqual(state.scope, ("alice-phone", "baa1", "idc", "mno1"))
        self.assertNotIn("alice", self.idp.locked)
        self.assertFalse(self.idc.lock_covers("alice", "idp1"))
        for entity in ("idc", "baa1", "mno1", "alice-phone"):
            with self.subTest(entity):
                self.assertTrue(self.idc.lock_covers("alice", entity))
        self.assertTrue(self.phone.amm_locked)
        unlocked = [e for e in self.sim.log.events if e["event"] == "lock"][-1]
        self.assertEqual(unlocked["targets"], ["idp1"])
        self.assertTraceOk(checkpoint_state(self.sim))

    def test_only_the_owner_locks(self):
        with self.assertRaises(AccessDenied):
            self.idc.set_lock("mallory", "alice", ["all"], "lock", self.fido_session())
        with self.assertRaises(AuthenticationFailed):
            self.idc.set_lock("alice", "alice", ["all"], "lock", "idc-forged")

    def report_failures(self, count):
        for _ in range(count):
            self.phone.send(self.idc.id, "amm.failure",
                            {"user": "alice", "device": self.phone.id, "kind": "gate"})

    def test_risk_auto_lock(self):
        self.report_failures(9)
        self.assertNotIn("alice", self.idc.locks)
        self.report_failures(1)
        state = self.idc.locks["alice"]
        self.assertEqual((state.scope, state.reason), (("all",), LockReason.RISK_AUTO_LOCK))
        self.assertIn("alice", self.idp.locked)
        with self.assertRaises(AccessDenied):
            self.idc.set_lock(RISK_ENGINE, "alice", None, "unlock")

    def test_failures_age_out(self):
        self.report_failures(9)
        self.sim.clock.advance(self.sim.settings["auto_lock_window"])
        self.report_failures(1)
        self.assertNotIn("alice", self.idc.locks)

    def test_gate_failures_feed_the_risk_engine(self):
        self.phone.lock_gate()
        for _ in range(4):
            self.phone.unlock_gate(False)
        self.assertEqual(len(self.idc.failure_reports["alice"]), 4)


class TestIdentityAcquisition(ConsolidatorTestCase):
    def document(self, **changes):
        document = self.sim.document_authority.issue_document(
            "P1234567", "Alice Example", "1990-01-02", "Cyprus")
        return dict(document, **changes)

    def test_document(self):
        attributes = self.idc.acquire_identity_document("alice", self.document())
        self.assertEqual([a.name for a in attributes], ["name", "birthdate", "country"])
        self.assertEqual(self.idc.account("alice").attribute("country").value, "CY")
        self.assertFalse(self.idc.document_match["alice"])
        self.idc.acquire_identity_document("alice", self.document())
        self.assertTrue(self.idc.document_match["alice"])

    def test_bad_documents(self):
        for name, document in (("tampered", self.document(name="Mallory Example")),
                               ("missing", {"document_id": "P1"}), ("not a record", "P1")):
            with self.subTest(name):
                with self.assertRaises(DocumentParseError):
                    self.idc.acquire_identity_document("alice", document)

    def test_recovery_by_document(self):
        with self.assertRaises(RecoveryDenied):
            self.idc.start_recovery("alice", document=self.document())
        self.idc.acquire_identity_document("alice", self.document())
        session = self.idc.start_recovery("alice", document=self.document())
        self.assertEqual(session.recovery.evidence, ["document"])
        self.assertEqual(session.aal, AAL.AAL1)

    def test_recovery_refused(self):
        for kwargs in ({}, {"password": "wrong password!"}):
            with self.subTest(**kwargs):
                with self.assertRaises(RecoveryDenied):
                    self.idc.start_recovery("alice", **kwargs)

    def test_online_attributes(self):
        self.user.consent_policy.grant("age", self.idc.id)
        session = self.fido_session()
        stored = acquire_online_attributes(self.sim, self.phone, self.idc, self.idp, session, ["age"])
        self.assertEqual(stored, ["age"])
        attribute = self.idc.account("alice").attribute("age")
        self.assertEqual((attribute.value, attribute.source), (30, "idp1"))

        self.idc.transfer_attribute(session, "age", "baa1")
        self.assertEqual(self.baa.account("alice").attribute("age").value, 30)

        self.idc.set_storage_preference(session, ["country"])
        self.assertIsNone(self.idc.account("alice").attribute("age"))
        self.assertEqual(
            acquire_online_attributes(self.sim, self.phone, self.idc, self.idp, session, ["age"]), [])
        self.assertTraceOk()


class TestMobileConnectProxy(ConsolidatorTestCase):
    def setUp(self):
        super().setUp()
        self.sp_mc = self.add_idc_client("sp-mc", ("msisdn",))

    def add_idc_client(self, sp_id, required):
        sp = self.sim.add_sp(sp_id, policy=AccessPolicy(required=required))
        self.idc.register_client(sp.id)
        sp.trust_idp(self.idc.id, self.idc.public_key)
        for name in required:
            self.user.consent_policy.grant(name, sp.id)
        return sp

    def test_proxy_login(self):
        result = mc_proxy_authenticate(self.sim, self.phone, self.sp_mc, self.idc)
        self.assertEqual(result.token.scope, {"msisdn": MSISDN})
        self.assertEqual(result.token.issuer, "idc")
        self.assertEqual(result.token.aal, AAL.NONE)
        messages = [e for e in self.sim.log.events if e["event"] == "message"]
        self.assertFalse([e for e in messages if "sp-mc" in (e["from"], e["to"])
                          and "mno1" in (e["from"], e["to"])])
        self.assertEqual([e["to"] for e in messages if e["type"] == "sms.deliver"], ["alice-phone"])
        self.assertTraceOk()

    def test_wrong_code(self):
        with self.assertRaises(AuthenticationFailed):
            mc_proxy_authenticate(self.sim, self.phone, self.sp_mc, self.idc, otp="not-a-code")

    def test_no_verifier(self):
        sp = self.add_idc_client("sp-age", ("age",))
        with self.assertRaises(NoVerifier):
            mc_proxy_authenticate(self.sim, self.phone, sp, self.idc)

    def test_step_up(self):
        session = self.fido_session()
        self.assertEqual(self.idc.session(session).aal, AAL.AAL2)
        idc_step_up(self.sim, self.phone, self.idc, session)
        self.assertEqual(self.idc.session(session).aal, AAL.AAL3)

    def begin_proxy(self):
        flow = start_flow(self.sim, self.phone, self.sp_mc, self.idc, None, "mc")
        binding = self.idc.begin_mc_proxy(flow, "alice")
        return flow, self.user.consent_decisions(binding.attributes, self.sp_mc.id)

    def test_retry_after_wrong_code(self):
        flow, consent = self.begin_proxy()
        with self.assertRaises(AuthenticationFailed):
            self.idc.complete_mc_proxy(flow, "not-a-code", consent)
        with self.assertRaises(ConsentDenied):
            self.idc.complete_mc_proxy(flow, self.phone.latest_otp(), {})
        issued = self.idc.complete_mc_proxy(flow, self.phone.latest_otp(), consent)
        self.assertEqual(issued.scope, {"msisdn": MSISDN})
        result = finish_flow(self.sim, self.phone, self.sp_mc, self.idc, flow, issued.code,
                             issued.csrf_token)
        self.assertEqual(result.token.scope, {"msisdn": MSISDN})
        self.assertTraceOk()

    def test_attempts_exhausted(self):
        flow, consent = self.begin_proxy()
        for _ in range(self.sim.settings["otp_attempts"]):
            with self.assertRaises(AuthenticationFailed):
                self.idc.complete_mc_proxy(flow, "not-a-code", consent)
        with self.assertRaises(AuthenticationFailed):
            self.idc.complete_mc_proxy(flow, self.phone.latest_otp(), consent)


class TestRecovery(ConsolidatorTestCase):
    def setUp(self):
        super().setUp()
        self.train_baa()
        self.new = self.sim.add_device("alice-new", "alice", tee=True)
        self.sim.clock.advance(100)

    def recover(self, **kwargs):
        kwargs.setdefault("password", BACKUP_PASSWORD)
        return recover_account(self.sim, self.new, self.idc, self.baa, lost_device=self.phone.id,
                               **kwargs)

    def test_full_recovery(self):
        self.mno.report_lost(MSISDN)
        self.mno.reissue_sim(MSISDN, self.new.id)
        session = self.idc.session(self.recover())
        self.assertIs(session.recovery.state, RecoveryState.FULL_ACCESS)
        self.assertEqual(session.aal, AAL.AAL3)
        self.assertEqual(session.recovery.evidence, [
            "password", "mc_authenticated", "baa_login", "records_streaming", "verdict", "finalize"])

        # the lost phone is out, the new one may enroll everywhere
        with self.assertRaises(AuthenticationFailed):
            fido_login(self.sim, self.phone, self.sp, self.idp)
        enroll(self.sim, self.new, self.idp)
        self.assertEqual(fido_login(self.sim, self.new, self.sp, self.idp).token.aal, AAL.AAL2)
        self.assertEqual(self.baa.devices["alice-new"][1].value, "Full")
        self.assertTraceOk(checkpoint_state(self.sim))

    def test_unlock_after_recovery(self):
        tentative = self.tentative_session()
        self.idc.set_lock("alice", "alice", ["all"], "lock", tentative)
        self.mno.report_lost(MSISDN)
        self.mno.reissue_sim(MSISDN, self.new.id)
        session = self.recover()
        self.idc.set_lock("alice", "alice", ["all"], "unlock", session)
        self.assertFalse(self.idc.lock_covers("alice", "idp1"))
        self.assertNotIn("alice", self.idp.locked)

    def test_impostor_fails(self):
        self.mno.report_lost(MSISDN)
        self.mno.reissue_sim(MSISDN, self.new.id)
        session = self.idc.session(self.recover(generator=self.owner_generator().impostor()))
        self.assertIs(session.recovery.state, RecoveryState.FAILED)
        self.assertEqual(session.aal, AAL.NONE)
        self.assertEqual(self.baa.lockout, {"alice-new"})
        # nothing was revoked
        fido_login(self.sim, self.phone, self.sp, self.idp)

    def test_verdict_only_counts_records_since_login(self):
        # plenty of owner history before the new device signs in
        self.phone.emit_behavior(self.owner_generator(), 200)
        self.sim.clock.advance(300)
        self.mno.report_lost(MSISDN)
        self.mno.reissue_sim(MSISDN, self.new.id)
        session = self.idc.start_recovery("alice", password=BACKUP_PASSWORD).session_id
        self.idc.recovery_mc_start(session)
        self.idc.recovery_mc_finish(session, self.new.latest_otp())
        self.new.baa = self.baa.id
        self.new.send(self.baa.id, "baa.login", {"user": "alice", "password": BAA_PASSWORD})
        self.idc.recovery_baa_login(session, self.baa.id)
        self.idc.advance_recovery(session, RecoveryStep(RecoveryEvent.RECORDS_STREAMING))
        self.new.emit_behavior(self.owner_generator().impostor(), 20)

        reply = self.idc.send(self.baa.id, "verdict.request", {"user": "alice", "boundary": 0.0})
        self.assertEqual(AccessToken.from_payload(reply["token"]).scope["behavior"], "no-match")
        recovery = self.idc.recovery_verdict(session)
        self.assertIs(recovery.state, RecoveryState.FAILED)
        self.assertEqual(self.baa.lockout, {"alice-new"})

    def test_sim_not_reported_lost(self):
        self.mno.reissue_sim(MSISDN, self.new.id)
        with self.assertRaises(McCheckFailed):
            self.recover()
        [session] = [s for s in self.idc.idc_sessions.values() if s.recovery is not None]
        self.assertIs(session.recovery.state, RecoveryState.TENTATIVE_IDC)

    def test_steps_in_order(self):
        session = self.tentative_session()
        with self.assertRaises(IllegalTransition):
            self.idc.recovery_verdict(session)
        with self.assertRaises(IllegalTransition):
            self.idc.advance_recovery(session, RecoveryStep(RecoveryEvent.FINALIZE))
        with self.assertRaises(IllegalTransition):
            self.idc.recovery_mc_finish(session, "123456")
        with self.assertRaises(IllegalTransition):
            self.idc.recovery_mc_start(self.fido_session())
        with self.assertRaises(NoBaaRegistered):
            self.idc.recovery_baa_login(session, "baa9")
