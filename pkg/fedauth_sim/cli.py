import argparse
import json
import os
import sys

from .adversary import ATTACKS, collusion_experiment, run_attack_trials
from .bench import FlowKind, overhead_table, parse_batches, run_load_benchmark, verification_trace
from .config import PROFILES, configure_logging
from .errors import SimError
from .scenario import run_scenario
from .simnet import EventLog
from .trace import verify_log


def die(message, status=1):
    sys.stderr.write(message)
    sys.stderr.write('\n')
    sys.exit(status)


class CommandError(Exception):
    pass


parser = argparse.ArgumentParser(
    prog='authsim',
    description='Simulate device-centric federated authentication, attack it, and benchmark it.')
subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')
subparsers.required = True

run_parser = subparsers.add_parser('run', help="Run a scenario and check its assertions")
run_parser.add_argument('--scenario', required=True, metavar='FILE',
                        help="Required: scenario JSON file")
run_parser.add_argument('--seed', type=int,
                        help="Override the scenario's seed")
run_parser.add_argument('--population', metavar='CSV',
                        help="Population table for inference risk (default: bundled fixture)")
run_parser.add_argument('--out', metavar='DIR',
                        help="Write events.jsonl, checkpoint.json and results.json here")
run_parser.add_argument('--persistent', action='store_true',
                        help="fsync the event log after every action")

bench_parser = subparsers.add_parser('bench', help="Run the concurrent login benchmark")
bench_parser.add_argument('--flow', required=True, metavar='KIND[,KIND...]',
                          help="Required: " + ", ".join(k.value for k in FlowKind))
bench_parser.add_argument('--batches', default='500:4000:500', metavar='START:STOP:STEP',
                          help="Batch sizes, or a comma-separated list (default: 500:4000:500)")
bench_parser.add_argument('--reps', type=int, default=10,
                          help="Repetitions per batch size (default: 10)")
bench_parser.add_argument('--workers', type=int,
                          help="Worker threads per batch (default: min(32, batch size))")
bench_parser.add_argument('--seed', type=int, default=0)
bench_parser.add_argument('--profile', default='bench', choices=sorted(PROFILES))
bench_parser.add_argument('--out', required=True, metavar='DIR',
                          help="Required: write report.json and trace.jsonl here")

verify_parser = subparsers.add_parser('verify', help="Re-check every trace invariant of an event log")
verify_parser.add_argument('--log', required=True, metavar='FILE',
                           help="Required: events.jsonl from a run")
verify_parser.add_argument('--checkpoint', metavar='FILE',
                           help="State to compare the replay with (default: checkpoint.json beside the log)")

attack_parser = subparsers.add_parser('attack', help="Run seeded attack trials")
attack_parser.add_argument('--name', required=True, choices=sorted(ATTACKS) + ['collusion'])
attack_parser.add_argument('--trials', type=int, default=1000)
attack_parser.add_argument('--seed', type=int, default=0)


def write_json(filename, content):
    with open(filename, 'w', encoding='utf-8') as f:
        json.dump(content, f, indent=2, sort_keys=True)
        f.write('\n')


def run_command(options):
    result = run_scenario(options.scenario, seed=options.seed, out_dir=options.out,
                          persistent=options.persistent, population=options.population)
    return (0 if result.ok else 1), result.to_dict()


def bench_command(options):
    kinds = [FlowKind.parse(kind) for kind in options.flow.split(',')]
    sizes = parse_batches(options.batches)
    os.makedirs(options.out, exist_ok=True)
    reports = [run_load_benchmark(kind, sizes, options.reps, seed=options.seed,
                                  workers=options.workers, profile=options.profile)
               for kind in kinds]
    overhead = overhead_table(reports)
    summary = {
        "reports": [r.to_dict() for r in reports],
        "overhead": {str(size): {flow: float(ratio) for flow, ratio in row.items()}
                     for size, row in overhead.to_dict(orient='index').items()},
    }
    write_json(os.path.join(options.out, 'report.json'), summary)
    log = verification_trace(kinds[0], seed=options.seed, profile=options.profile)
    with open(os.path.join(options.out, 'trace.jsonl'), 'wb') as f:
        f.write(log.dumps())
    return 0, summary


def verify_command(options):
    try:
        events = EventLog.read(options.log)
    except (OSError, ValueError) as err:
        raise CommandError(f"Cannot read event log {options.log}: {err}")
    checkpoint_file = options.checkpoint
    if checkpoint_file is None:
        sibling = os.path.join(os.path.dirname(options.log), 'checkpoint.json')
        checkpoint_file = sibling if os.path.exists(sibling) else None
    checkpoint = None
    if checkpoint_file is not None:
        try:
            with open(checkpoint_file, encoding='utf-8') as f:
                checkpoint = json.load(f)
        except (OSError, ValueError) as err:
            raise CommandError(f"Cannot read checkpoint {checkpoint_file}: {err}")
    report = verify_log(events, checkpoint)
    return (0 if report.ok else 1), report.to_dict()


def attack_command(options):
    if options.trials < 1:
        raise CommandError("--trials must be at least 1")
    if options.name == 'collusion':
        report = collusion_experiment(trials=options.trials, seed=options.seed)
        return (0 if report.links == 0 and report.leaked_values == 0 else 1), report.to_dict()
    report = run_attack_trials(options.name, options.trials, options.seed)
    # a hardware attacker may win until the owner locks, never after
    wins = report.successes_after_lock if options.name == 'hardware' else report.successes
    return (0 if wins == 0 else 1), report.to_dict()


COMMANDS = {
    'run': run_command,
    'bench': bench_command,
    'verify': verify_command,
    'attack': attack_command,
}


def run(args=None):
    """Returns (exit status, JSON-ready summary)"""
    options = parser.parse_args(args=args)
    try:
        return COMMANDS[options.command](options)
    except SimError as err:
        raise CommandError(f"{err.code}: {err}")


def main(args=None):
    configure_logging()
    try:
        status, summary = run(args)
    except CommandError as err:
        die(str(err))
    else:
        sys.stdout.write(json.dumps(summary, indent=2, sort_keys=True))
        sys.stdout.write('\n')
        sys.exit(status)


if __name__ == '__main__':
    main()
