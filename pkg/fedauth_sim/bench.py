# Load benchmark: batches of concurrent complete logins, mean response time per batch size
#
# A batch is injected in one simulated tick and driven by a worker pool; each
# actor still handles its messages one at a time. Response time is wall-clock.

import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.stats as stats

from .credentials import ShowState, federated_pabac_login, issue_credential
from .errors import BenchmarkInvalid, SimError
from .federation import AccessPolicy, enroll, fido_login, password_login
from .world import Simulation


logger = logging.getLogger(__name__)

REQUESTED = ("over18",)
# the baseline's 20-character password
BASELINE_PASSWORD = "k8Vq2nLr5Tz9Wm3Hx7Pd"
CONFIDENCE = 0.95


class FlowKind(enum.Enum):
    PLAIN_PASSWORD = "PlainPassword"
    FIDO_FEDERATED = "FidoFederated"
    PABAC_FEDERATED = "PabacFederated"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"password": cls.PLAIN_PASSWORD, "fido": cls.FIDO_FEDERATED,
                   "pabac": cls.PABAC_FEDERATED}
        text = str(value)
        if text.lower() in aliases:
            return aliases[text.lower()]
        try:
            return cls(text)
        except ValueError:
            raise BenchmarkInvalid(f"Unknown flow kind {value!r}")


def parse_batches(text):
    """'500:4000:500' (start:stop:step, stop included) or '10,20,40'"""
    try:
        if ":" in text:
            start, stop, step = (int(part) for part in text.split(":"))
            sizes = list(range(start, stop + 1, step))
        else:
            sizes = [int(part) for part in text.split(",")]
    except ValueError:
        raise BenchmarkInvalid(f"Invalid batch sizes {text!r}")
    return sizes


@dataclass
class BenchWorld:
    sim: Simulation
    kind: FlowKind
    idp: object
    sp: object
    devices: list


def build_bench_world(kind, users, seed=0, profile="bench", keep_log=False):
    """One IdP and one SP demanding over18; users each holding an enrolled TEE phone"""
    kind = FlowKind.parse(kind)
    sim = Simulation(seed, profile=profile, keep_log=keep_log)
    idp = sim.add_idp("idp1", pabac=kind is FlowKind.PABAC_FEDERATED)
    sp = sim.add_sp("sp1", policy=AccessPolicy(required=REQUESTED))
    idp.register_client(sp.id)
    sp.trust_idp(idp.id, idp.public_key)
    devices = []
    for index in range(users):
        user = f"u{index:05d}"
        sim.add_user(user).consent_policy.grant("over18", sp.id)
        device = sim.add_device(f"{user}-phone", user, tee=True)
        if kind is FlowKind.PLAIN_PASSWORD:
            idp.enroll_user(user, {"over18": True}, password=BASELINE_PASSWORD)
        else:
            idp.enroll_user(user, {"over18": True})
            enroll(sim, device, idp)
        devices.append(device)
    return BenchWorld(sim, kind, idp, sp, devices)


def prepare(world, count):
    """Untimed setup before a batch: every PABAC holder needs one fresh single-show credential"""
    if world.kind is not FlowKind.PABAC_FEDERATED:
        return
    for device in world.devices[:count]:
        if not any(c.state is ShowState.FRESH for c in device.wallet):
            issue_credential(world.sim, world.idp, device, {"over18": True})


def login(world, device):
    sim, sp, idp = world.sim, world.sp, world.idp
    if world.kind is FlowKind.PLAIN_PASSWORD:
        return password_login(sim, device, sp, idp, BASELINE_PASSWORD, REQUESTED)
    if world.kind is FlowKind.FIDO_FEDERATED:
        return fido_login(sim, device, sp, idp, REQUESTED)
    return federated_pabac_login(sim, device, sp, idp, REQUESTED)


def timed_login(world, device):
    started = time.perf_counter()
    login(world, device)
    return time.perf_counter() - started


@dataclass
class BatchResult:
    size: int
    successes: int
    failures: dict
    response_times: list
    wall_time: float

    @property
    def mean(self):
        return float(np.mean(self.response_times)) if self.response_times else float("nan")


def run_batch(world, size, workers=None):
    """Fire size complete logins at once; returns per-login response times"""
    prepare(world, size)
    times, failures = [], {}
    started = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers or min(32, size)) as pool:
        futures = [pool.submit(timed_login, world, device) for device in world.devices[:size]]
        for future in as_completed(futures):
            try:
                times.append(future.result())
            except SimError as exc:
                failures[exc.code] = failures.get(exc.code, 0) + 1
    wall = time.perf_counter() - started
    return BatchResult(size, len(times), failures, times, wall)


def confidence_interval(samples, confidence=CONFIDENCE):
    """Student-t interval for the mean of samples (at least two)"""
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        raise BenchmarkInvalid("A confidence interval needs at least two repetitions")
    mean = float(samples.mean())
    sem = float(stats.sem(samples))
    if sem == 0.0:
        return mean, mean
    low, high = stats.t.interval(confidence, samples.size - 1, loc=mean, scale=sem)
    return float(low), float(high)


@dataclass
class BenchRow:
    batch_size: int
    mean: float
    ci_low: float
    ci_high: float
    samples: list
    wall_times: list

    def to_dict(self):
        return {"batch_size": self.batch_size, "mean": self.mean, "ci95": [self.ci_low, self.ci_high],
                "samples": self.samples, "wall_times": self.wall_times}


@dataclass
class BenchReport:
    flow: FlowKind
    batch_sizes: list
    repetitions: int
    rows: list = field(default_factory=list)

    def to_frame(self):
        return pd.DataFrame([{"flow": self.flow.value, "batch_size": r.batch_size, "mean": r.mean,
                              "ci_low": r.ci_low, "ci_high": r.ci_high} for r in self.rows])

    def non_decreasing(self):
        """Means grow with batch size, up to overlapping confidence intervals"""
        return all(later.mean >= earlier.mean or later.ci_high >= earlier.ci_low
                   for earlier, later in zip(self.rows, self.rows[1:]))

    def to_dict(self):
        return {"flow": self.flow.value, "batch_sizes": list(self.batch_sizes),
                "repetitions": self.repetitions, "confidence": CONFIDENCE,
                "non_decreasing": self.non_decreasing(), "rows": [r.to_dict() for r in self.rows]}


def run_load_benchmark(flow, batch_sizes, repetitions, seed=0, workers=None, profile="bench"):
    kind = FlowKind.parse(flow)
    batch_sizes = list(batch_sizes)
    if repetitions < 2:
        raise BenchmarkInvalid("At least two repetitions are needed for a confidence interval")
    if not batch_sizes or any(size <= 0 for size in batch_sizes) or batch_sizes != sorted(batch_sizes):
        raise BenchmarkInvalid(f"Batch sizes must be positive and ascending, got {batch_sizes}")
    world = build_bench_world(kind, max(batch_sizes), seed=seed, profile=profile)
    samples = {size: [] for size in batch_sizes}
    walls = {size: [] for size in batch_sizes}
    for repetition in range(repetitions):
        for size in batch_sizes:
            batch = run_batch(world, size, workers)
            if batch.successes != size:
                raise BenchmarkInvalid(f"{kind.value} batch of {size} had {size - batch.successes} "
                                       f"failed logins: {batch.failures}")
            samples[size].append(batch.mean)
            walls[size].append(batch.wall_time)
            logger.info("%s rep %d batch %d: mean %.6fs", kind.value, repetition, size, batch.mean)
    report = BenchReport(kind, batch_sizes, repetitions)
    for size in batch_sizes:
        low, high = confidence_interval(samples[size])
        report.rows.append(BenchRow(size, float(np.mean(samples[size])), low, high,
                                    samples[size], walls[size]))
    return report


def overhead_table(reports, baseline=FlowKind.PLAIN_PASSWORD):
    """Mean response time of each flow kind over the baseline's, per batch size"""
    frame = pd.concat([r.to_frame() for r in reports], ignore_index=True)
    means = frame.pivot(index="batch_size", columns="flow", values="mean")
    if baseline.value not in means:
        return means.iloc[0:0]
    return means.div(means[baseline.value], axis=0)


def verification_trace(flow, flows=3, seed=0, profile="bench"):
    """A few sequential logins of the benchmarked kind, with the event log kept for verify"""
    world = build_bench_world(flow, flows, seed=seed, profile=profile, keep_log=True)
    prepare(world, flows)
    for device in world.devices:
        login(world, device)
    return world.sim.log
