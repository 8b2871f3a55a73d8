"""Adversarial drivers: schedule fuzzing, timing probes and scaling runs.

Every run is reduced to one output hash (exit status, canonical final file
image, event log).  A fuzz plan passes when all of its (seed, worker count)
runs share a hash; on failure the report carries the first event-log line
where a divergent run departs from the reference.

Fuzz plan format, one field per line::

    guest: refclock           # bundled guest name
    param WORK 500            # repeatable; overrides a guest parameter
    input query data/q.txt    # repeatable; file placed in the root image
    seeds: 100                # number of schedule seeds
    workers: 1,2,4,8
    fuel: 1000000000
    mutation: live-merge      # optional, repeatable
    expected: <hex digest>    # optional reference hash
"""

from __future__ import annotations

import random
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import gateway as gw
from . import kernel
from .asm import GuestProgram
from .fs import FileImage
from .memory import AddressSpace
from .runtime import load_guest
from .store import Store

DOCUMENTED_MUTATIONS = ("live-merge", "shared-fuel", "wallclock-now")


class PlanError(ValueError):
    pass


@dataclass
class RunOutcome:
    seed: int
    workers: int
    output_hash: str
    exit: str
    events: list[str]
    files: dict[str, bytes]


def run_guest(program: GuestProgram, *, seed: int = 0, workers: int = 1, fuel: int = 10**9,
              inputs: dict[str, bytes] | None = None, mutations=frozenset(), stall=None,
              backend: str | None = None) -> RunOutcome:
    """Run ``program`` once as a root guest and fingerprint the result."""
    space = AddressSpace()
    if inputs:
        image = FileImage()
        for name in sorted(inputs):
            image.put(name, inputs[name])
        image.write_to(space)
    guest = kernel.Guest(program, space, fuel, mutations=frozenset(mutations), backend=backend)
    res = guest.run(workers=workers, seed=seed, stall=stall)
    image = FileImage.from_space(res.root.space)
    status = str(res.exit)
    return RunOutcome(seed, workers, gw.output_hash(status, image, res.events), status,
                      res.events, image.files())


# ---------------------------------------------------------------------------
# fuzzing


@dataclass
class FuzzPlan:
    guest: str
    params: dict[str, int] = field(default_factory=dict)
    inputs: dict[str, bytes] = field(default_factory=dict)
    seeds: int = 100
    workers: tuple[int, ...] = (1, 2, 4, 8)
    fuel: int = 10**9
    mutations: frozenset[str] = frozenset()
    expected: str | None = None

    def seed_list(self, master_seed: int) -> list[int]:
        rng = random.Random(master_seed)
        return [rng.getrandbits(32) for _ in range(self.seeds)]


def parse_plan(text: str, base_dir: str | Path = ".") -> FuzzPlan:
    base = Path(base_dir)
    plan = FuzzPlan(guest="")
    mutations = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("param "):
                _, name, value = line.split()
                plan.params[name] = int(value, 0)
                continue
            if line.startswith("input "):
                _, name, path = line.split(None, 2)
                p = Path(path)
                plan.inputs[name] = (p if p.is_absolute() else base / p).read_bytes()
                continue
            key, sep, value = (s.strip() for s in line.partition(":"))
            if not sep:
                raise PlanError(f"line {lineno}: expected 'key: value'")
            if key == "guest":
                plan.guest = value
            elif key == "seeds":
                plan.seeds = int(value)
            elif key == "workers":
                plan.workers = tuple(int(w) for w in value.split(","))
            elif key == "fuel":
                plan.fuel = int(value, 0)
            elif key == "mutation":
                mutations.add(value)
            elif key == "expected":
                plan.expected = value
            else:
                raise PlanError(f"line {lineno}: unknown field {key!r}")
        except (ValueError, OSError) as e:
            if isinstance(e, PlanError):
                raise
            raise PlanError(f"line {lineno}: {e}") from None
    if not plan.guest:
        raise PlanError("plan needs a 'guest:' line")
    unknown = mutations - kernel.MUTATIONS
    if unknown:
        raise PlanError(f"mutations {sorted(unknown)} cannot be applied to a bare guest")
    plan.mutations = frozenset(mutations)
    return plan


@dataclass
class Divergence:
    seed: int
    workers: int
    line: int                 # index of the first differing event line
    reference: str | None     # None when that log ended earlier
    observed: str | None

    def __str__(self) -> str:
        return (f"seed={self.seed} workers={self.workers} event {self.line}:\n"
                f"- {self.reference}\n+ {self.observed}")


@dataclass
class FuzzReport:
    passed: bool
    runs: int
    reference_hash: str
    hashes: set[str]
    divergence: Divergence | None = None


def first_divergence(a: list[str], b: list[str]) -> tuple[int, str | None, str | None] | None:
    for i in range(max(len(a), len(b))):
        x = a[i] if i < len(a) else None
        y = b[i] if i < len(b) else None
        if x != y:
            return i, x, y
    return None


def fuzz(plan: FuzzPlan, master_seed: int = 0, program: GuestProgram | None = None,
         stop_on_failure: bool = False) -> FuzzReport:
    """Run every (seed, worker count) pair of ``plan`` and compare output hashes."""
    program = program or load_guest(plan.guest, plan.params)
    reference: RunOutcome | None = None
    expected = plan.expected
    hashes: set[str] = set()
    divergence = None
    runs = 0
    for seed in plan.seed_list(master_seed):
        for workers in plan.workers:
            out = run_guest(program, seed=seed, workers=workers, fuel=plan.fuel,
                            inputs=plan.inputs, mutations=plan.mutations)
            runs += 1
            hashes.add(out.output_hash)
            if reference is None:
                reference = out
                expected = expected or out.output_hash
            if out.output_hash != expected and divergence is None:
                d = first_divergence(reference.events, out.events)
                line, ref, obs = d if d else (len(out.events), "(event logs agree)",
                                              f"exit {out.exit}, files differ")
                divergence = Divergence(seed, workers, line, ref, obs)
                if stop_on_failure:
                    return FuzzReport(False, runs, expected, hashes, divergence)
    passed = divergence is None
    return FuzzReport(passed, runs, expected or "", hashes, divergence)


# ---------------------------------------------------------------------------
# scaling


@dataclass
class BenchRow:
    workers: int
    seconds: float
    output_hash: str


def bench_scaling(guest: str | GuestProgram, worker_counts=(1, 2, 4, 8), *, params=None,
                  repeats: int = 3, seed: int = 0, fuel: int = 10**10,
                  backend: str | None = None) -> list[BenchRow]:
    """Median wall time per worker count; all rows must agree on the output hash."""
    program = guest if isinstance(guest, GuestProgram) else load_guest(guest, params)
    rows = []
    for w in worker_counts:
        times, digest = [], None
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = run_guest(program, seed=seed, workers=w, fuel=fuel, backend=backend)
            times.append(time.perf_counter() - t0)
            digest = out.output_hash
        rows.append(BenchRow(w, statistics.median(times), digest))
    return rows


def speedup(rows: list[BenchRow], frm: int = 1, to: int = 4) -> float:
    by = {r.workers: r.seconds for r in rows}
    return by[frm] / by[to]


# ---------------------------------------------------------------------------
# timing probe


@dataclass
class ProbeRun:
    job_id: int
    guest_value: str          # what the guest printed
    output_hash: str
    wall_seconds: float       # observed outside the guest
    release_time: int


@dataclass
class TimingProbeReport:
    quantum: int
    runs: list[ProbeRun]
    replay_ok: bool

    @property
    def guest_values(self) -> set[str]:
        return {r.guest_value for r in self.runs}

    @property
    def output_hashes(self) -> set[str]:
        return {r.output_hash for r in self.runs}

    @property
    def aligned(self) -> bool:
        return all(r.release_time % self.quantum == 0 for r in self.runs)

    @property
    def passed(self) -> bool:
        return (len(self.guest_values) == 1 and len(self.output_hashes) == 1
                and self.aligned and self.replay_ok)

    def summary(self) -> str:
        walls = [r.wall_seconds for r in self.runs]
        return (f"runs={len(self.runs)} values={sorted(self.guest_values)} "
                f"hashes={len(self.output_hashes)} aligned={self.aligned} replay={self.replay_ok} "
                f"wall=[{min(walls):.4f}s .. {max(walls):.4f}s]")


def make_stall(max_stall_ms: float, seed: int = 0):
    """A worker-loop hook sleeping 0..max_stall_ms, drawn from its own RNG."""
    if max_stall_ms <= 0:
        return None
    rng = random.Random(seed)

    def stall(_sched_rng) -> None:
        time.sleep(rng.uniform(0, max_stall_ms) / 1000)

    return stall


def probe_timing(runs: int = 50, max_stall_ms: float = 10, *, quantum_ms: int = 1000,
                 workers: int = 4, seed: int = 0, mutations=frozenset(),
                 program: GuestProgram | None = None, start_ms: int = 123_456) -> TimingProbeReport:
    """Submit ``runs`` copies of one job within a quantum and run them under stalls.

    The default job prints its "/env/now" value, so the report's guest
    values expose any leak of real time into the job's inputs.
    """
    program = program or load_guest("envclock")
    store = Store()
    store.create("probe", {"data": b"probe input\n"})
    gate = gw.Gateway(store, quantum_ms=quantum_ms, workers=workers, seed=seed,
                      stall=make_stall(max_stall_ms, seed), mutations=mutations)
    gate.clock.advance(start_ms)
    blob = program.to_bytes()
    ids = [gate.submit("probe", blob) for _ in range(runs)]
    rows = []
    for job_id in ids:
        t0 = time.perf_counter()
        result = gate.run_next()
        wall = time.perf_counter() - t0
        ex = gate.executions[job_id]
        stdout = ex.final_files.get("stdout", b"") if ex.final_files else b""
        rows.append(ProbeRun(result.job_id, stdout.decode("latin-1").strip(), result.output_hash,
                             wall, result.release_time))
    gate.release_all()
    replay_ok = store.replay("probe") == store.snapshot("probe")
    return TimingProbeReport(quantum_ms, rows, replay_ok)
