from dataclasses import replace

from fedauth_sim.consolidator import idc_fido_login, idc_step_up
from fedauth_sim.credentials import (
    CredentialMode, ShowState, backup_credentials, check_presentation, covering_token,
    federated_pabac_login, issue_credential, open_backup, present_credential, restore_credentials,
    seal_credentials)
from fedauth_sim.errors import (
    AttributeNotVerified, IntegrityError, NoCoveringToken, NoSuchAttribute, NotFound,
    PresentationRejected, TentativeAccessDenied, TokenSpent)
from fedauth_sim.identity import AAL

from .base import BACKUP_PASSWORD, SimTestCase


class PabacTestCase(SimTestCase):
    def setUp(self):
        super().setUp()
        self.build_federation(requested=("over18",), pabac=True)

    def issue(self, count=1, attributes=None):
        return issue_credential(self.sim, self.idp, self.phone,
                                attributes or {"over18": True, "age": 30}, batch_size=count)


class TestIssuance(PabacTestCase):
    def test_issue_batch(self):
        credentials = self.issue(2)
        self.assertEqual(len(credentials), 2)
        self.assertEqual(self.phone.wallet, credentials)
        self.assertNotEqual(credentials[0].serial, credentials[1].serial)
        for credential in credentials:
            self.assertEqual(credential.attributes, {"age": 30, "over18": True})
            self.assertIs(credential.state, ShowState.FRESH)
            self.assertTrue(credential.covers(["over18"]))
            self.assertFalse(credential.covers(["country"]))

    def test_issuer_opens_all_but_one(self):
        self.issue()
        [entry] = self.idp.issuance_log
        self.assertEqual(entry["user"], "alice")
        self.assertEqual(len(entry["blinded"]), self.sim.settings["cut_and_choose"])
        self.assertEqual(len(entry["opened"]), self.sim.settings["cut_and_choose"] - 1)
        self.assertNotIn(str(entry["keep"]), entry["opened"])

    def test_issuer_never_sees_the_credential(self):
        [credential] = self.issue()
        [entry] = self.idp.issuance_log
        seen = set(entry["blinded"]) | {entry["blind_signature"]}
        for opening in entry["opened"].values():
            seen.add(opening["serial"])
            seen.update(opening["salts"].values())
        self.assertNotIn(credential.serial, seen)
        self.assertFalse(set(credential.salts.values()) & seen)

    def test_unverified_attribute(self):
        with self.assertRaises(AttributeNotVerified):
            self.issue(attributes={"over18": False})
        self.assertEqual(self.phone.wallet, [])

    def test_unknown_issuance_session(self):
        with self.assertRaises(NotFound):
            self.idp.finish_issuance("iss-missing", {})

    def test_batch_size(self):
        self.assertEqual(CredentialMode.SINGLE_SHOW.batch_size(5), 1)
        self.assertEqual(CredentialMode.MULTI_SESSION.batch_size(5), 5)


class TestPresentation(PabacTestCase):
    def setUp(self):
        super().setUp()
        [self.credential] = self.issue()
        self.numbers = self.idp.blind_public_numbers

    def test_selective_disclosure(self):
        presentation = present_credential(self.credential, ["over18"], "n-1", self.sim.entropy)
        self.assertEqual(presentation.disclosed_values(), {"over18": True})
        self.assertEqual(list(presentation.hidden), ["age"])
        self.assertNotIn(b'"age":30', presentation.serialized())
        result = check_presentation(presentation, self.numbers, set())
        self.assertTrue(result.accepted)
        self.assertEqual(result.disclosed, {"over18": True})

    def test_single_show(self):
        present_credential(self.credential, ["over18"], "n-1", self.sim.entropy)
        self.assertIs(self.credential.state, ShowState.SPENT)
        with self.assertRaises(TokenSpent):
            present_credential(self.credential, ["over18"], "n-2", self.sim.entropy)

    def test_no_such_attribute(self):
        with self.assertRaises(NoSuchAttribute):
            present_credential(self.credential, ["country"], "n-1", self.sim.entropy)
        self.assertIs(self.credential.state, ShowState.FRESH)

    def test_rejections(self):
        presentation = present_credential(self.credential, ["over18"], "n-1", self.sim.entropy)
        salt = presentation.disclosed["over18"]["salt"]
        cases = [
            ("untrusted", presentation, None, set(), "UntrustedIssuer"),
            ("signature", replace(presentation, signature=presentation.signature + 1),
             self.numbers, set(), "BadSignature"),
            ("value", replace(presentation, disclosed={"over18": {"value": False, "salt": salt}}),
             self.numbers, set(), "OpeningMismatch"),
            ("overlap", replace(presentation, hidden=dict(presentation.hidden, over18="x")),
             self.numbers, set(), "OpeningMismatch"),
            ("dropped", replace(presentation, hidden={}), self.numbers, set(), "OpeningMismatch"),
            ("double spend", presentation, self.numbers, {presentation.serial}, "DoubleSpend"),
        ]
        for name, candidate, numbers, spent, reason in cases:
            with self.subTest(name):
                result = check_presentation(candidate, numbers, spent)
                self.assertEqual((result.accepted, result.reason), (False, reason))

    def test_covering_token(self):
        self.assertIs(covering_token(self.phone, ["age", "over18"]), self.credential)
        with self.assertRaises(NoCoveringToken):
            covering_token(self.phone, ["country"])
        self.credential.state = ShowState.SPENT
        with self.assertRaises(NoCoveringToken):
            covering_token(self.phone, ["over18"])


class TestPabacLogin(PabacTestCase):
    def test_login(self):
        self.issue()
        result = federated_pabac_login(self.sim, self.phone, self.sp, self.idp, ["over18"])
        self.assertEqual(result.token.aal, AAL.NONE)
        self.assertEqual(result.token.scope, {"over18": True})
        entries = [e["entry"] for e in self.sim.log.events if e["event"] == "disclosure"]
        self.assertEqual([(e["attribute"], e["protocol"]) for e in entries], [("over18", "Pabac")])
        self.assertTraceOk()

    def test_sessions_unlinkable(self):
        self.issue(2)
        first = federated_pabac_login(self.sim, self.phone, self.sp, self.idp, ["over18"])
        second = federated_pabac_login(self.sim, self.phone, self.sp, self.idp, ["over18"])
        self.assertNotEqual(first.token.subject, second.token.subject)
        accepted = [e["details"].get("accepted") for e in self.sim.log.events
                   if e["event"] == "op" and e["op"] == "verify_presentation"]
        self.assertEqual(accepted, [True, True])

    def test_wallet_exhausted(self):
        self.issue()
        federated_pabac_login(self.sim, self.phone, self.sp, self.idp, ["over18"])
        with self.assertRaises(NoCoveringToken):
            federated_pabac_login(self.sim, self.phone, self.sp, self.idp, ["over18"])

    def test_double_spend(self):
        [credential] = self.issue()
        federated_pabac_login(self.sim, self.phone, self.sp, self.idp, ["over18"])
        # a cloned wallet still holds the shown credential as fresh
        credential.state = ShowState.FRESH
        with self.assertRaises(PresentationRejected) as cm:
            federated_pabac_login(self.sim, self.phone, self.sp, self.idp, ["over18"])
        self.assertEqual(str(cm.exception), "DoubleSpend")


class TestCredentialBackup(PabacTestCase):
    password = "tablet backup passphrase"

    def setUp(self):
        super().setUp()
        self.build_consolidator()
        self.session = idc_fido_login(self.sim, self.phone, self.idc)

    def step_up(self):
        """Restores need AAL3: the FIDO session plus a Mobile Connect check"""
        idc_step_up(self.sim, self.phone, self.idc, self.session)
        self.assertEqual(self.idc.session(self.session).aal, AAL.AAL3)

    def test_seal_keeps_fresh_only(self):
        credentials = self.issue(2)
        credentials[0].state = ShowState.SPENT
        backup = seal_credentials("alice", credentials, self.password, self.sim.settings,
                                  self.sim.entropy)
        [restored] = open_backup(backup, self.password, self.sim.settings)
        self.assertEqual(restored, credentials[1])
        with self.assertRaises(IntegrityError):
            open_backup(backup, "not the passphrase", self.sim.settings)
        with self.assertRaises(IntegrityError):
            open_backup(replace(backup, owner="mallory"), self.password, self.sim.settings)

    def test_backup_and_restore(self):
        self.issue(2)
        federated_pabac_login(self.sim, self.phone, self.sp, self.idp, ["over18"])
        backup = backup_credentials(self.sim, self.phone, self.idc, self.session, self.password)
        self.assertEqual(backup.version, 1)
        self.assertEqual(self.idc.checkpoint()["backups"], {"alice": 1})

        tablet = self.sim.add_device("alice-tablet", "alice")
        self.step_up()
        restored = restore_credentials(self.sim, tablet, self.idc, self.session, self.password)
        self.assertEqual(len(restored), 1)
        result = federated_pabac_login(self.sim, tablet, self.sp, self.idp, ["over18"])
        self.assertEqual(result.token.scope, {"over18": True})
        self.assertTraceOk()

    def test_versions_increase(self):
        self.issue()
        backup_credentials(self.sim, self.phone, self.idc, self.session, self.password)
        backup = backup_credentials(self.sim, self.phone, self.idc, self.session, self.password)
        self.assertEqual(backup.version, 2)

    def test_wrong_password(self):
        self.issue()
        backup_credentials(self.sim, self.phone, self.idc, self.session, self.password)
        self.step_up()
        with self.assertRaises(IntegrityError):
            restore_credentials(self.sim, self.phone, self.idc, self.session, "guess")

    def test_no_backup(self):
        self.step_up()
        with self.assertRaises(NotFound):
            restore_credentials(self.sim, self.phone, self.idc, self.session, self.password)

    def test_restore_needs_aal3(self):
        self.issue()
        backup_credentials(self.sim, self.phone, self.idc, self.session, self.password)
        tablet = self.sim.add_device("alice-tablet", "alice")
        self.assertEqual(self.idc.session(self.session).aal, AAL.AAL2)
        with self.assertRaises(TentativeAccessDenied):
            restore_credentials(self.sim, tablet, self.idc, self.session, self.password)
        self.assertEqual(tablet.wallet, [])

    def test_tentative_session_refused(self):
        self.issue()
        session = self.idc.start_recovery("alice", password=BACKUP_PASSWORD)
        with self.assertRaises(TentativeAccessDenied):
            backup_credentials(self.sim, self.phone, self.idc, session.session_id, self.password)
        with self.assertRaises(TentativeAccessDenied):
            restore_credentials(self.sim, self.phone, self.idc, session.session_id, self.password)
        with self.assertRaises(TentativeAccessDenied):
            self.idc.view_credentials(session.session_id, self.phone.id)
