"""Determinism-enforcing kernel: hierarchical shared-nothing processes.

Each guest owns a tree of single-threaded processes.  A process talks only to
its parent and its children, through three system calls:

* ``PUT``  wait for a child to stop, then copy memory and/or registers into it,
  optionally snapshot its space and (re)start it with a fuel limit;
* ``GET``  wait for a child to stop, then copy or merge memory out of it and
  optionally read its final registers and stop status;
* ``RET``  stop the calling process.

Interactions happen only at points fixed by each process's own instruction
stream, so the terminal state of a guest does not depend on how its runnable
processes are scheduled.  The scheduler deliberately varies the schedule
(worker count, slice lengths, queue order) from a seed; the fuzz harness
checks that nothing observable changes.
"""

from __future__ import annotations

import enum
import hashlib
import random
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from . import isa, vm
from .asm import GuestProgram
from .isa import MASK32, Opt, StopKind, StopReason, Sys, SyscallRequest
from .memory import SPACE_SIZE, AddressSpace
from .merge import merge_region

MAX_CHILDREN = 256
REGS_BLOCK_WORDS = 12  # r0..r7, pc, stop kind, stop code, retired (low 32 bits)
SLICE_CHOICES = (61, 997, 10_007, 100_003, 1_000_003)

# PUT/GET status codes, returned in r0
OK = 0
EINVAL = 1
ENOSNAP = 2
CONFLICT = 3

MUTATIONS = frozenset({"live-merge", "shared-fuel"})


class KernelAssertion(AssertionError):
    """An internal invariant of the kernel was violated."""


class PState(enum.Enum):
    RUNNABLE = "runnable"
    STOPPED = "stopped"
    WAITING = "waiting"


class Budget:
    __slots__ = ("remaining",)

    def __init__(self, remaining: int) -> None:
        self.remaining = remaining


@dataclass(eq=False)
class Process:
    pid: tuple[int, ...]
    parent: "Process | None"
    space: AddressSpace
    regs: object = field(default_factory=vm.new_regs)
    children: list["Process"] = field(default_factory=list)
    snapshot: AddressSpace | None = None
    state: PState = PState.STOPPED
    stop: StopReason | None = None
    budget: Budget = field(default_factory=lambda: Budget(0))
    refund_due: bool = False
    waiting_on: "Process | None" = None
    pending: SyscallRequest | None = None
    retired: int = 0
    granted: int = 0        # fuel received at STARTs
    received: int = 0       # refunds collected from children
    given: int = 0          # fuel handed to children at STARTs
    returned: int = 0       # refunds handed back to the parent
    log: list[str] = field(default_factory=list)

    @property
    def name(self) -> str:
        return ".".join(map(str, self.pid))

    @property
    def fuel(self) -> int:
        return self.budget.remaining

    def emit(self, text: str) -> None:
        self.log.append(f"{self.name} #{len(self.log)} {text}")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.name.encode())
        h.update(struct.pack("<9I", *self.regs))
        h.update(str(self.stop).encode())
        h.update(self.space.digest().encode())
        h.update((self.snapshot.digest() if self.snapshot is not None else "-").encode())
        h.update(struct.pack("<QQ", self.retired, self.budget.remaining))
        return h.hexdigest()


@dataclass
class GuestResult:
    root: Process
    processes: list[Process]
    events: list[str]

    @property
    def exit(self) -> StopReason:
        return self.root.stop

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for proc in self.processes:
            h.update(proc.fingerprint().encode())
        for line in self.events:
            h.update(line.encode() + b"\n")
        return h.hexdigest()


def create_root(program: GuestProgram, initial_space: AddressSpace | None = None,
                fuel: int = 10**9, cow: bool = True) -> Process:
    """Build the root process: program image overlaid with ``initial_space``."""
    space = AddressSpace(cow=cow)
    program.load_into(space)
    if initial_space is not None:
        for pno, page in sorted(initial_space.pages.items()):
            space.write_page(pno)[:] = page
    root = Process(pid=(0,), parent=None, space=space, regs=vm.new_regs(program.entry))
    root.budget = Budget(fuel)
    root.granted = fuel
    root.state = PState.RUNNABLE
    return root


class Guest:
    """One guest: a process tree and the scheduler that runs it to quiescence."""

    def __init__(
        self,
        program: GuestProgram,
        initial_space: AddressSpace | None = None,
        fuel: int = 10**9,
        *,
        cow: bool = True,
        checker: bool = False,
        mutations: frozenset[str] | set[str] = frozenset(),
        backend: str | None = None,
        slices: tuple[int, ...] = SLICE_CHOICES,
    ) -> None:
        unknown = set(mutations) - MUTATIONS
        if unknown:
            raise ValueError(f"unknown kernel mutations: {sorted(unknown)}")
        self.root = create_root(program, initial_space, fuel, cow=cow)
        self.cow = cow
        self.checker = checker
        self.mutations = frozenset(mutations)
        self.runner = vm.BACKENDS[backend] if backend else vm.run_raw
        self.slices = slices
        self.processes: list[Process] = [self.root]
        self._ran = False

    # ------------------------------------------------------------------ run

    def run(self, workers: int = 1, seed: int = 0,
            stall: Callable[[random.Random], None] | None = None) -> GuestResult:
        if self._ran:
            raise RuntimeError("a guest runs only once")
        self._ran = True
        if workers < 1:
            raise ValueError("need at least one worker")
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._deques = [deque() for _ in range(workers)]
        self._rng = random.Random(seed)
        self._active = 0
        self._error: BaseException | None = None
        self._enqueue(self.root, 0)
        if workers == 1:
            self._worker(0, seed, stall)
        else:
            threads = [threading.Thread(target=self._worker, args=(i, seed, stall), daemon=True)
                       for i in range(workers)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        if self._error is not None:
            raise self._error
        for proc in self.processes:
            if proc.state != PState.STOPPED:
                raise KernelAssertion(f"process {proc.name} not stopped at quiescence")
        procs = sorted(self.processes, key=lambda p: p.pid)
        events = [line for p in procs for line in p.log]
        return GuestResult(self.root, procs, events)

    def _enqueue(self, proc: Process, worker: int) -> None:
        proc.state = PState.RUNNABLE
        self._active += 1
        dq = self._deques[worker % len(self._deques)]
        if self._rng.random() < 0.5:
            dq.append(proc)
        else:
            dq.appendleft(proc)

    def _take(self, worker: int, rng: random.Random) -> Process | None:
        own = self._deques[worker]
        if own:
            return own.pop() if rng.random() < 0.5 else own.popleft()
        victims = [d for d in self._deques if d]
        if victims:
            return rng.choice(victims).popleft()
        return None

    def _worker(self, index: int, seed: int, stall) -> None:
        rng = random.Random(seed * 1_000_003 + index)
        try:
            while True:
                with self._cond:
                    while True:
                        if self._error is not None:
                            return
                        proc = self._take(index, rng)
                        if proc is not None:
                            break
                        if self._active == 0:
                            self._cond.notify_all()
                            return
                        self._cond.wait()
                if stall is not None:
                    stall(rng)
                budget = min(rng.choice(self.slices), proc.budget.remaining)
                if budget > 0:
                    kind, code, retired = self.runner(proc.space, proc.regs, budget)
                else:
                    kind, code, retired = StopKind.FUELOUT, 0, 0
                with self._cond:
                    self._active -= 1
                    self._after_slice(proc, index, kind, code, retired)
                    self._cond.notify_all()
        except BaseException as exc:  # surface worker failures in the caller
            with self._cond:
                if self._error is None:
                    self._error = exc
                self._cond.notify_all()

    # ------------------------------------------------------------- syscalls

    def _after_slice(self, proc: Process, worker: int, kind: int, code: int, retired: int) -> None:
        proc.retired += retired
        proc.budget.remaining -= retired
        if proc.budget.remaining < 0:
            # only reachable when budgets are shared between processes
            proc.budget.remaining = 0
        if kind == StopKind.FUELOUT:
            if proc.budget.remaining > 0:
                self._enqueue(proc, worker)  # preempted
            else:
                self._stop(proc, StopReason(StopKind.FUELOUT), worker)
            return
        if kind == StopKind.SYSCALL:
            self._syscall(proc, SyscallRequest.from_regs(proc.regs), worker)
            return
        self._stop(proc, StopReason(StopKind(kind), code), worker)

    def _syscall(self, proc: Process, req: SyscallRequest, worker: int) -> None:
        if req.kind == Sys.RET:
            self._stop(proc, StopReason(StopKind.RET, req.code), worker)
            return
        if req.kind not in (Sys.PUT, Sys.GET) or not self._valid(req):
            self._finish(proc, req, EINVAL)
            self._enqueue(proc, worker)
            return
        index = req.child
        if index == len(proc.children) and req.kind == Sys.PUT and index < MAX_CHILDREN:
            child = Process(pid=proc.pid + (index,), parent=proc, space=AddressSpace(cow=self.cow))
            proc.children.append(child)
            self.processes.append(child)
        elif index < len(proc.children):
            child = proc.children[index]
        else:
            self._finish(proc, req, EINVAL)
            self._enqueue(proc, worker)
            return
        if child.state == PState.STOPPED or ("live-merge" in self.mutations and req.kind == Sys.GET):
            self._perform(proc, child, req, worker)
            self._enqueue(proc, worker)
        else:
            proc.state = PState.WAITING
            proc.waiting_on = child
            proc.pending = req

    @staticmethod
    def _valid(req: SyscallRequest) -> bool:
        if (req.local | req.remote | req.length) & 3:
            return False
        if req.local + req.length > SPACE_SIZE or req.remote + req.length > SPACE_SIZE:
            return False
        if req.kind == Sys.PUT:
            return not req.options & Opt.MERGE
        return not req.options & (Opt.SNAP | Opt.START | Opt.ZERO)

    def _stop(self, proc: Process, reason: StopReason, worker: int) -> None:
        proc.state = PState.STOPPED
        proc.stop = reason
        proc.emit(f"stop {reason} retired={proc.retired}")
        parent = proc.parent
        if parent is not None and parent.state == PState.WAITING and parent.waiting_on is proc:
            req = parent.pending
            parent.waiting_on = None
            parent.pending = None
            self._perform(parent, proc, req, worker)
            self._enqueue(parent, worker)

    def _perform(self, parent: Process, child: Process, req: SyscallRequest, worker: int) -> None:
        if child.parent is not parent:
            raise KernelAssertion(f"{parent.name} addressed non-child {child.name}")
        before = self._isolation_hashes(parent, child) if self.checker else None
        quiescent = child.state == PState.STOPPED
        if quiescent and child.refund_due:
            refund = child.budget.remaining
            child.budget.remaining = 0
            child.returned += refund
            child.refund_due = False
            parent.budget.remaining += refund
            parent.received += refund
        status, aux = OK, 0
        if req.kind == Sys.PUT:
            status = self._put(parent, child, req, worker)
        else:
            status, aux = self._get(parent, child, req)
        self._finish(parent, req, status, aux)
        if before is not None and before != self._isolation_hashes(parent, child):
            raise KernelAssertion(f"syscall by {parent.name} changed an unrelated process")

    def _put(self, parent: Process, child: Process, req: SyscallRequest, worker: int) -> int:
        if req.options & Opt.ZERO:
            child.space.clear()
        if req.length:
            child.space.copy_from(parent.space, req.local, req.remote, req.length)
        if req.options & Opt.COPY_REGS:
            block = parent.space.read(req.regs_addr, 36) if req.regs_addr + 36 <= SPACE_SIZE else None
            if block is None:
                return EINVAL
            for i, value in enumerate(struct.unpack("<9I", block)):
                child.regs[i] = value
        if req.options & Opt.SNAP:
            child.snapshot = child.space.snapshot()
        if req.options & Opt.START:
            if "shared-fuel" in self.mutations:
                child.budget = parent.budget
                child.refund_due = False
            else:
                grant = min(req.limit, parent.budget.remaining)
                parent.budget.remaining -= grant
                parent.given += grant
                child.budget = Budget(grant)
                child.granted += grant
                child.refund_due = True
            child.stop = None
            self._enqueue(child, worker)
        return OK

    def _get(self, parent: Process, child: Process, req: SyscallRequest) -> tuple[int, int]:
        status, aux = OK, 0
        if req.options & Opt.MERGE:
            if child.snapshot is None:
                return ENOSNAP, 0
            conflicts = merge_region(parent.space, child.space, child.snapshot,
                                     req.local, req.remote, req.length)
            if conflicts:
                status, aux = CONFLICT, len(conflicts)
                keep = conflicts[:req.conflict_cap]
                if keep and req.conflict_addr + 4 * len(keep) <= SPACE_SIZE:
                    parent.space.write(req.conflict_addr, struct.pack(f"<{len(keep)}I", *keep))
        elif req.length:
            parent.space.copy_from(child.space, req.remote, req.local, req.length)
        if req.options & Opt.COPY_REGS:
            if req.regs_addr + 4 * REGS_BLOCK_WORDS > SPACE_SIZE:
                return EINVAL, 0
            stop = child.stop
            kind = int(stop.kind) if stop is not None else 0
            code = stop.code if stop is not None else 0
            block = struct.pack("<12I", *child.regs, kind, code & MASK32, child.retired & MASK32)
            parent.space.write(req.regs_addr, block)
        return status, aux

    def _finish(self, proc: Process, req: SyscallRequest, status: int, aux: int = 0) -> None:
        name = Sys(req.kind).name if req.kind in (Sys.PUT, Sys.GET) else f"sys{int(req.kind)}"
        proc.emit(
            f"{name} child={req.child} local={req.local:#x} remote={req.remote:#x} "
            f"len={req.length:#x} opts={int(req.options):#x} -> status={status} aux={aux}"
        )
        proc.regs[0] = status
        proc.regs[1] = aux & MASK32
        fuel = proc.budget.remaining
        proc.regs[6] = fuel & MASK32
        proc.regs[7] = (fuel >> 32) & MASK32

    def _isolation_hashes(self, parent: Process, child: Process) -> dict[str, str]:
        return {
            p.name: p.space.digest()
            for p in self.processes
            if p is not parent and p is not child and p.state != PState.RUNNABLE
        }


def schedule(guest: Guest, workers: int = 1, seed: int = 0, stall=None) -> GuestResult:
    """Run ``guest`` to quiescence on ``workers`` workers, ordering work by ``seed``."""
    return guest.run(workers=workers, seed=seed, stall=stall)


def run_program(program: GuestProgram, initial_space: AddressSpace | None = None,
                fuel: int = 10**9, workers: int = 1, seed: int = 0, **kwargs) -> GuestResult:
    return Guest(program, initial_space, fuel, **kwargs).run(workers=workers, seed=seed)
