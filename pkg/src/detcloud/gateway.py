"""The gateway: job manifests in, quantized results out.

A job's only inputs are its program, its input files, the store snapshot
it was submitted against, its fuel limit and its creation timestamp (the
submission time rounded down to the quantum, visible to the guest as the
file ``/env/now``).  Results are held back until the next quantum
boundary, so the release time is the one timing-derived value a customer
ever sees.

Manifest format, one field per line (``#`` starts a comment)::

    customer: alice
    program: build/job.dvm
    input query data/query.txt
    fuel: 100000000
    followup-allowed: yes

Relative paths are resolved against the manifest's directory.  A finished
job may ask for a follow-up by writing ``/env/followup``::

    delay: 3                  # quanta after the job's release time
    program: self             # or the name of an output file holding a program
    input <name> <file>       # files of the job's final image to pass on
"""

from __future__ import annotations

import hashlib
import heapq
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import kernel
from .asm import GuestProgram, ProgramError
from .fs import FileImage, FsError
from .memory import AddressSpace
from .store import Diff, Files, Store

ENV_PREFIX = "/env/"
ENV_NOW = "/env/now"
ENV_FOLLOWUP = "/env/followup"
GATEWAY_MUTATIONS = frozenset({"wallclock-now"})
DEFAULT_FUEL = 10**9
DEFAULT_PROGRAM_CAP = 1 << 20


class ManifestError(ValueError):
    pass


class GatewayError(Exception):
    pass


# ---------------------------------------------------------------------------
# clocks


class LogicalClock:
    """Monotone millisecond counter owned by the gateway."""

    def __init__(self, start_ms: int = 0) -> None:
        self._now = start_ms
        self._lock = threading.Lock()

    def now(self) -> int:
        return self._now

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("logical time only moves forward")
        with self._lock:
            self._now += ms
            return self._now

    def advance_to(self, t: int) -> int:
        with self._lock:
            self._now = max(self._now, t)
            return self._now


class WallClock:
    """Adapter binding the gateway to real time (milliseconds since the epoch)."""

    def now(self) -> int:
        return time.time_ns() // 1_000_000

    def advance(self, ms: int) -> int:
        return self.now()

    def advance_to(self, t: int) -> int:
        """Block until real time reaches ``t``."""
        delay = t - self.now()
        if delay > 0:
            time.sleep(delay / 1000)
        return self.now()


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Manifest:
    customer: str
    program: str
    inputs: list[tuple[str, str]] = field(default_factory=list)
    fuel: int = DEFAULT_FUEL
    followup_allowed: bool = False
    base_dir: Path = Path(".")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


_BOOL = {"yes": True, "true": True, "1": True, "no": False, "false": False, "0": False}


def parse_manifest(text: str, base_dir: str | Path = ".") -> Manifest:
    fields: dict[str, str] = {}
    inputs: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("input ") or line.startswith("input\t"):
            parts = line.split(None, 2)
            if len(parts) != 3:
                raise ManifestError(f"line {lineno}: expected 'input <name> <path>'")
            if parts[1].startswith(ENV_PREFIX):
                raise ManifestError(f"line {lineno}: {ENV_PREFIX}* names are reserved")
            inputs.append((parts[1], parts[2]))
            continue
        key, sep, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if not sep or key not in ("customer", "program", "fuel", "followup-allowed"):
            raise ManifestError(f"line {lineno}: unknown field {line!r}")
        if key in fields:
            raise ManifestError(f"line {lineno}: duplicate field {key!r}")
        fields[key] = value
    for key in ("customer", "program"):
        if not fields.get(key):
            raise ManifestError(f"missing field {key!r}")
    m = Manifest(fields["customer"], fields["program"], inputs, base_dir=Path(base_dir))
    if "fuel" in fields:
        try:
            m.fuel = int(fields["fuel"], 0)
        except ValueError:
            raise ManifestError(f"bad fuel {fields['fuel']!r}") from None
        if m.fuel <= 0:
            raise ManifestError("fuel must be positive")
    if "followup-allowed" in fields:
        try:
            m.followup_allowed = _BOOL[fields["followup-allowed"].lower()]
        except KeyError:
            raise ManifestError(f"bad followup-allowed {fields['followup-allowed']!r}") from None
    return m


def format_manifest(m: Manifest) -> str:
    lines = [f"customer: {m.customer}", f"program: {m.program}"]
    lines += [f"input {name} {path}" for name, path in m.inputs]
    lines += [f"fuel: {m.fuel}", f"followup-allowed: {'yes' if m.followup_allowed else 'no'}"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# jobs and results


@dataclass
class FollowUp:
    delay: int
    program: bytes
    inputs: dict[str, bytes]


def parse_followup(text: str, outputs: Files, program: bytes) -> FollowUp:
    delay, prog, inputs = None, None, {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("input "):
            parts = line.split()
            if len(parts) != 3 or parts[2] not in outputs:
                raise GatewayError(f"bad follow-up input line {line!r}")
            inputs[parts[1]] = outputs[parts[2]]
            continue
        key, _, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if key == "delay" and value.isdigit():
            delay = int(value)
        elif key == "program":
            if value == "self":
                prog = program
            elif value in outputs:
                prog = outputs[value]
            else:
                raise GatewayError(f"follow-up program {value!r} not found")
        else:
            raise GatewayError(f"bad follow-up line {line!r}")
    if delay is None or prog is None:
        raise GatewayError("follow-up needs 'delay:' and 'program:'")
    return FollowUp(delay, prog, inputs)


@dataclass
class Job:
    job_id: int
    customer: str
    program: bytes
    inputs: dict[str, bytes]
    base_version: int
    created_ms: int
    fuel: int = DEFAULT_FUEL
    followup_allowed: bool = False
    parent_job: int | None = None


@dataclass
class Execution:
    """Everything ``execute`` determines; a pure function of the job."""

    status: str
    outputs: Diff
    fuel_consumed: int
    output_hash: str
    complete: bool
    followup: FollowUp | None = None
    followup_error: str | None = None
    final_files: Files | None = None


@dataclass
class JobResult:
    job_id: int
    customer: str
    status: str
    outputs: Diff
    fuel_consumed: int
    commit: str                 # committed | aborted-stale-base | aborted-incomplete
    version: int | None
    completed_ms: int
    release_time: int
    output_hash: str
    followup_job: int | None = None

    def record(self) -> str:
        """The customer-visible result record (bit-exact, see module docs)."""
        lines = [
            f"job: {self.job_id}",
            f"customer: {self.customer}",
            f"status: {self.status}",
            f"fuel: {self.fuel_consumed}",
            f"commit: {self.commit}",
            f"version: {self.version if self.version is not None else '-'}",
            f"release-time: {self.release_time}",
        ]
        if self.followup_job is not None:
            lines.append(f"followup: {self.followup_job}")
        for name in sorted(self.outputs):
            data = self.outputs[name]
            if data is None:
                lines.append(f"file {name} deleted")
            else:
                lines.append(f"file {name} sha256={hashlib.sha256(data).hexdigest()} size={len(data)}")
        return "\n".join(lines) + "\n"


def quantize_down(t: int, quantum: int) -> int:
    return t // quantum * quantum


def release_time(completed_ms: int, quantum: int) -> int:
    return math.ceil(completed_ms / quantum) * quantum if completed_ms > 0 else 0


def build_image(files: Files, inputs: dict[str, bytes], now_ms: int) -> FileImage:
    image = FileImage()
    merged = dict(files)
    merged.update(inputs)
    for name in sorted(merged):
        image.put(name, merged[name])
    image.put(ENV_NOW, str(now_ms).encode())
    return image


def file_diff(before: Files, after: Files) -> Diff:
    """Changes from ``before`` to ``after``, ignoring the reserved /env/ files."""
    diff: Diff = {}
    for name, data in after.items():
        if not name.startswith(ENV_PREFIX) and before.get(name) != data:
            diff[name] = data
    for name in before:
        if not name.startswith(ENV_PREFIX) and name not in after:
            diff[name] = None
    return diff


def output_hash(exit_status: str, image: FileImage, events: list[str]) -> str:
    """Fingerprint of a guest run: exit status, canonical final files, event log."""
    h = hashlib.sha256()
    h.update(exit_status.encode() + b"\0")
    h.update(image.canonical())
    for line in events:
        h.update(line.encode() + b"\n")
    return h.hexdigest()


def execute(job: Job, base: Files, *, workers: int = 1, seed: int = 0, stall=None,
            kernel_mutations: frozenset[str] = frozenset(), now_override: int | None = None) -> Execution:
    """Run ``job`` on a fresh guest built from ``base`` and the job's inputs."""
    try:
        program = GuestProgram.from_bytes(job.program)
    except ProgramError as e:
        raise GatewayError(f"job {job.job_id}: {e}") from None
    now = job.created_ms if now_override is None else now_override
    before_image = build_image(base, job.inputs, now)
    before = before_image.files()
    space = AddressSpace()
    before_image.write_to(space)
    guest = kernel.Guest(program, space, job.fuel, mutations=kernel_mutations)
    res = guest.run(workers=workers, seed=seed, stall=stall)
    status = str(res.exit)
    image = FileImage.from_space(res.root.space)
    digest = output_hash(status, image, res.events)
    consumed = job.fuel - res.root.fuel
    complete = res.exit.kind in (kernel.StopKind.HALT, kernel.StopKind.RET)
    if not complete:
        return Execution(status, {}, consumed, digest, False)
    after = image.files()
    ex = Execution(status, file_diff(before, after), consumed, digest, True, final_files=after)
    if job.followup_allowed and ENV_FOLLOWUP in after:
        try:
            ex.followup = parse_followup(after[ENV_FOLLOWUP].decode("latin-1"), after, job.program)
        except GatewayError as e:
            ex.followup_error = str(e)
    return ex


# ---------------------------------------------------------------------------
# the gateway


class Gateway:
    """Accepts jobs, runs them against store snapshots and releases results.

    Time is taken from ``clock``; with the default :class:`LogicalClock`
    each executed job advances it by ``fuel_consumed / instr_per_ms``
    (at least one millisecond), which stands in for its running time.
    """

    def __init__(self, store: Store, quantum_ms: int = 1000, workers: int = 1, *,
                 clock=None, seed: int = 0, stall=None, instr_per_ms: int = 1_000_000,
                 program_cap: int = DEFAULT_PROGRAM_CAP, mutations=frozenset()) -> None:
        if quantum_ms <= 0:
            raise ValueError("quantum must be positive")
        unknown = set(mutations) - GATEWAY_MUTATIONS - kernel.MUTATIONS
        if unknown:
            raise ValueError(f"unknown mutations: {sorted(unknown)}")
        self.store = store
        self.quantum = quantum_ms
        self.workers = workers
        self.clock = clock if clock is not None else LogicalClock()
        self.seed = seed
        self.stall = stall
        self.instr_per_ms = instr_per_ms
        self.program_cap = program_cap
        self.mutations = frozenset(mutations)
        self.next_id = 1
        self.jobs: dict[int, Job] = {}
        self._queue: list[tuple[int, int]] = []      # (eligible time, job id)
        self._held: list[JobResult] = []
        self.results: dict[int, JobResult] = {}
        self.executions: dict[int, Execution] = {}

    # submission ---------------------------------------------------------

    def submit_manifest(self, manifest: Manifest) -> int:
        try:
            program = manifest.resolve(manifest.program).read_bytes()
            inputs = {name: manifest.resolve(path).read_bytes() for name, path in manifest.inputs}
        except OSError as e:
            raise ManifestError(f"cannot read {e.filename}: {e.strerror}") from None
        return self.submit(manifest.customer, program, inputs, manifest.fuel, manifest.followup_allowed)

    def submit(self, customer: str, program: bytes, inputs: dict[str, bytes] | None = None,
               fuel: int = DEFAULT_FUEL, followup_allowed: bool = False, *,
               created_ms: int | None = None, parent_job: int | None = None) -> int:
        if customer not in self.store.customers():
            raise GatewayError(f"unknown customer {customer!r}")
        if len(program) > self.program_cap:
            raise GatewayError(f"program of {len(program)} bytes exceeds the cap of {self.program_cap}")
        try:
            GuestProgram.from_bytes(program)
        except ProgramError as e:
            raise GatewayError(f"program does not parse: {e}") from None
        for name, data in (inputs or {}).items():
            if name.startswith(ENV_PREFIX):
                raise GatewayError(f"input name {name!r} is reserved")
            try:
                FileImage().put(name, data)
            except FsError as e:
                raise GatewayError(f"input {name!r} rejected: {e.code}") from None
        if created_ms is None:
            created_ms = quantize_down(self.clock.now(), self.quantum)
        job = Job(self.next_id, customer, bytes(program), dict(inputs or {}),
                  self.store.latest_version(customer), created_ms, fuel,
                  followup_allowed, parent_job)
        self.next_id += 1
        self.jobs[job.job_id] = job
        heapq.heappush(self._queue, (created_ms, job.job_id))
        return job.job_id

    def enqueue(self, job: Job) -> None:
        """Queue an already-validated job (used when reloading saved state)."""
        if job.job_id in self.jobs:
            raise GatewayError(f"job {job.job_id} already known")
        self.jobs[job.job_id] = job
        self.next_id = max(self.next_id, job.job_id + 1)
        heapq.heappush(self._queue, (job.created_ms, job.job_id))

    # execution ----------------------------------------------------------

    def pending(self) -> list[int]:
        return sorted(j for _, j in self._queue)

    def execute(self, job: Job) -> Execution:
        now = None
        if "wallclock-now" in self.mutations:
            now = time.time_ns() // 1_000_000
        return execute(job, self.store.snapshot(job.customer, job.base_version),
                       workers=self.workers, seed=self.seed, stall=self.stall,
                       kernel_mutations=self.mutations & kernel.MUTATIONS, now_override=now)

    def complete(self, job: Job, ex: Execution) -> JobResult:
        """Commit an executed job and hold its result for release."""
        completed = self.clock.now()
        if ex.complete:
            version = self.store.commit(job.customer, job.base_version, ex.outputs, job.job_id)
            outcome = "committed" if version is not None else "aborted-stale-base"
        else:
            version, outcome = None, "aborted-incomplete"
        result = JobResult(job.job_id, job.customer, ex.status,
                           ex.outputs if ex.complete else {}, ex.fuel_consumed, outcome,
                           version, completed, release_time(completed, self.quantum), ex.output_hash)
        if ex.followup is not None and outcome == "committed":
            fu = ex.followup
            result.followup_job = self.submit(
                job.customer, fu.program, fu.inputs, job.fuel, job.followup_allowed,
                created_ms=result.release_time + fu.delay * self.quantum, parent_job=job.job_id)
        self.executions[job.job_id] = ex
        self.results[job.job_id] = result
        self._held.append(result)
        return result

    def run_next(self) -> JobResult | None:
        """Execute the earliest eligible job, advancing logical time to it if needed."""
        if not self._queue:
            return None
        eligible, job_id = heapq.heappop(self._queue)
        self.clock.advance_to(eligible)
        job = self.jobs[job_id]
        ex = self.execute(job)
        self.clock.advance(max(1, ex.fuel_consumed // self.instr_per_ms))
        return self.complete(job, ex)

    def run_until_idle(self, max_jobs: int | None = None) -> list[JobResult]:
        done = []
        while self._queue and (max_jobs is None or len(done) < max_jobs):
            done.append(self.run_next())
        return done

    # release ------------------------------------------------------------

    def release(self, now: int | None = None) -> list[JobResult]:
        """Results whose release time has come, in (release time, job id) order."""
        now = self.clock.now() if now is None else now
        due = sorted((r for r in self._held if r.release_time <= now),
                     key=lambda r: (r.release_time, r.job_id))
        self._held = [r for r in self._held if r.release_time > now]
        return due

    def release_all(self) -> list[JobResult]:
        """Advance time to the last held boundary and release everything."""
        if self._held:
            self.clock.advance_to(max(r.release_time for r in self._held))
        return self.release(now=max([r.release_time for r in self._held], default=self.clock.now()))
