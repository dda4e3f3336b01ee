import io
import json
import os
import tempfile
from unittest import TestCase
from unittest.mock import patch

from fedauth_sim import cli

from .test_scenario import MINIMAL


class CliTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def path(self, *parts):
        return os.path.join(self.tmp.name, *parts)

    def write_scenario(self, data, name="scenario.json"):
        with open(self.path(name), "w", encoding="utf-8") as f:
            json.dump(data, f)
        return self.path(name)


class TestRunAndVerify(CliTestCase):
    def test_run_then_verify(self):
        scenario = self.write_scenario(MINIMAL)
        status, summary = cli.run(["run", "--scenario", scenario, "--out", self.path("run")])
        self.assertEqual((status, summary["ok"], summary["seed"]), (0, True, 3))
        status, report = cli.run(["verify", "--log", self.path("run", "events.jsonl")])
        self.assertEqual((status, report["ok"]), (0, True))

    def test_seed_override(self):
        scenario = self.write_scenario(MINIMAL)
        status, summary = cli.run(["run", "--scenario", scenario, "--seed", "99"])
        self.assertEqual((status, summary["seed"]), (0, 99))

    def test_failed_expectation(self):
        data = json.loads(json.dumps(MINIMAL))
        data["actions"][1]["expect"] = "ok"
        status, summary = cli.run(["run", "--scenario", self.write_scenario(data)])
        self.assertEqual((status, summary["ok"]), (1, False))

    def test_verify_catches_a_tampered_checkpoint(self):
        scenario = self.write_scenario(MINIMAL)
        cli.run(["run", "--scenario", scenario, "--out", self.path("run")])
        with open(self.path("other.json"), "w", encoding="utf-8") as f:
            json.dump({"ledger": [{"user": "alice"}], "consolidators": {}}, f)
        status, report = cli.run(["verify", "--log", self.path("run", "events.jsonl"),
                                  "--checkpoint", self.path("other.json")])
        self.assertEqual(status, 1)
        self.assertEqual([v["rule"] for v in report["violations"]], ["replay"])

    def test_unreadable_inputs(self):
        with self.assertRaisesRegex(cli.CommandError, "Cannot read event log"):
            cli.run(["verify", "--log", self.path("missing.jsonl")])
        with self.assertRaisesRegex(cli.CommandError, "^ScenarioError: Cannot read scenario"):
            cli.run(["run", "--scenario", self.path("missing.json")])


class TestAttack(TestCase):
    def test_attacks(self):
        for name in ("csrf", "hardware"):
            with self.subTest(attack=name):
                status, report = cli.run(["attack", "--name", name, "--trials", "1"])
                self.assertEqual((status, report["attack"], report["trials"]), (0, name, 1))

    def test_trials_must_be_positive(self):
        with self.assertRaisesRegex(cli.CommandError, "--trials must be at least 1"):
            cli.run(["attack", "--name", "replay", "--trials", "0"])


class TestBench(CliTestCase):
    def test_bench_writes_report_and_trace(self):
        status, summary = cli.run(["bench", "--flow", "password,fido", "--batches", "1,2",
                                   "--reps", "2", "--workers", "1", "--profile", "fast",
                                   "--out", self.path("bench")])
        self.assertEqual(status, 0)
        self.assertEqual([r["flow"] for r in summary["reports"]], ["PlainPassword", "FidoFederated"])
        self.assertEqual(sorted(summary["overhead"]), ["1", "2"])
        self.assertEqual(summary["overhead"]["1"]["PlainPassword"], 1.0)
        with open(self.path("bench", "report.json"), encoding="utf-8") as f:
            self.assertEqual(json.load(f), summary)
        status, report = cli.run(["verify", "--log", self.path("bench", "trace.jsonl")])
        self.assertEqual((status, report["granted_flows"]), (0, 3))

    def test_invalid_batches(self):
        with self.assertRaisesRegex(cli.CommandError, "^BenchmarkInvalid"):
            cli.run(["bench", "--flow", "fido", "--batches", "x", "--out", self.path("bench")])


@patch("fedauth_sim.cli.configure_logging")
class TestMain(TestCase):
    def test_success_prints_the_summary(self, configure_logging):
        with patch("sys.stdout", new_callable=io.StringIO) as stdout:
            with self.assertRaises(SystemExit) as cm:
                cli.main(["attack", "--name", "csrf", "--trials", "1"])
        self.assertEqual(cm.exception.code, 0)
        self.assertEqual(json.loads(stdout.getvalue())["successes"], 0)
        configure_logging.assert_called_once_with()

    def test_command_error_exits_1(self, configure_logging):
        with patch("sys.stderr", new_callable=io.StringIO) as stderr:
            with self.assertRaises(SystemExit) as cm:
                cli.main(["attack", "--name", "csrf", "--trials", "0"])
        self.assertEqual(cm.exception.code, 1)
        self.assertEqual(stderr.getvalue(), "--trials must be at least 1\n")

    def test_usage_error_exits_2(self, configure_logging):
        with patch("sys.stderr", new_callable=io.StringIO):
            for args in (["attack", "--name", "teleport"], ["bench", "--flow", "fido"], []):
                with self.subTest(args=args):
                    with self.assertRaises(SystemExit) as cm:
                        cli.main(args)
                    self.assertEqual(cm.exception.code, 2)
