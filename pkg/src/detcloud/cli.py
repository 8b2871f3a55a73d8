"""Command-line front end.

Gateway state (store, queued jobs, released results, logical clock) lives
in a state directory, ``--state`` or ``$DETCLOUD_STATE`` (default
``./detcloud-state``)::

    store/<customer>/...      versioned store (see detcloud.store)
    jobs/<id>.json            queued job metadata
    jobs/<id>.dvm             its program container
    jobs/<id>.inputs          its input files (file-map blob)
    results/<id>.txt          released result records
    gateway.json              logical clock, next job id, quantum
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import gateway as gw
from . import harness, vm
from .asm import AsmError, GuestProgram, ProgramError, assemble, disassemble
from .runtime import bundled_guests, guest_params, link, load_guest
from .store import Store, decode_files, encode_files


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# persistent gateway state


class StateDir:
    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.jobs_dir = self.root / "jobs"
        self.results_dir = self.root / "results"
        self.config_path = self.root / "gateway.json"
        for d in (self.root, self.jobs_dir, self.results_dir):
            d.mkdir(parents=True, exist_ok=True)
        self.store = Store(self.root / "store")

    def config(self) -> dict:
        if self.config_path.exists():
            return json.loads(self.config_path.read_text())
        return {"clock_ms": 0, "next_id": 1, "quantum_ms": 1000}

    def save_config(self, cfg: dict) -> None:
        tmp = self.config_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.config_path)

    def gateway(self, quantum_ms: int | None = None, workers: int = 1, **kw) -> gw.Gateway:
        cfg = self.config()
        quantum = quantum_ms or cfg["quantum_ms"]
        clock = gw.LogicalClock(cfg["clock_ms"])
        gate = gw.Gateway(self.store, quantum_ms=quantum, workers=workers, clock=clock, **kw)
        gate.next_id = cfg["next_id"]
        for job in self.load_jobs():
            gate.enqueue(job)
        return gate

    def save_gateway(self, gate: gw.Gateway) -> None:
        self.save_config({"clock_ms": gate.clock.now(), "next_id": gate.next_id,
                          "quantum_ms": gate.quantum})

    def save_job(self, job: gw.Job) -> None:
        meta = {"job_id": job.job_id, "customer": job.customer, "base_version": job.base_version,
                "created_ms": job.created_ms, "fuel": job.fuel,
                "followup_allowed": job.followup_allowed, "parent_job": job.parent_job}
        (self.jobs_dir / f"{job.job_id}.dvm").write_bytes(job.program)
        (self.jobs_dir / f"{job.job_id}.inputs").write_bytes(encode_files(job.inputs))
        (self.jobs_dir / f"{job.job_id}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    def load_jobs(self) -> list[gw.Job]:
        jobs = []
        for meta_path in sorted(self.jobs_dir.glob("*.json"), key=lambda p: int(p.stem)):
            meta = json.loads(meta_path.read_text())
            stem = self.jobs_dir / str(meta["job_id"])
            jobs.append(gw.Job(
                meta["job_id"], meta["customer"], stem.with_suffix(".dvm").read_bytes(),
                decode_files(stem.with_suffix(".inputs").read_bytes()), meta["base_version"],
                meta["created_ms"], meta["fuel"], meta["followup_allowed"], meta["parent_job"]))
        return jobs

    def drop_job(self, job_id: int) -> None:
        for suffix in (".json", ".dvm", ".inputs"):
            (self.jobs_dir / f"{job_id}{suffix}").unlink(missing_ok=True)

    def save_result(self, result: gw.JobResult) -> None:
        (self.results_dir / f"{result.job_id}.txt").write_text(result.record())

    def results(self) -> list[tuple[int, str]]:
        paths = sorted(self.results_dir.glob("*.txt"), key=lambda p: int(p.stem))
        return [(int(p.stem), p.read_text()) for p in paths]


def _state(args) -> StateDir:
    return StateDir(args.state or os.environ.get("DETCLOUD_STATE", "detcloud-state"))


# ---------------------------------------------------------------------------
# gateway commands


def cmd_submit(args) -> int:
    state = _state(args)
    path = Path(args.manifest)
    manifest = gw.parse_manifest(path.read_text(), base_dir=path.parent)
    gate = state.gateway()
    job_id = gate.submit_manifest(manifest)
    state.save_job(gate.jobs[job_id])
    state.save_gateway(gate)
    print(job_id)
    return 0


def _drain(state: StateDir, gate: gw.Gateway, known: set[int]) -> int:
    done = gate.run_until_idle()
    for result in gate.release_all():
        state.save_result(result)
        state.drop_job(result.job_id)
        print(f"job {result.job_id}: {result.commit} release-time={result.release_time}")
    for job_id in gate.pending():
        if job_id not in known:
            state.save_job(gate.jobs[job_id])
    state.save_gateway(gate)
    return len(done)


def cmd_gateway(args) -> int:
    state = _state(args)
    kw = {"seed": args.seed, "program_cap": args.program_cap}
    if args.max_stall_ms:
        kw["stall"] = harness.make_stall(args.max_stall_ms, args.seed)
    while True:
        gate = state.gateway(args.quantum_ms, args.workers, **kw)
        if args.wallclock:
            gate.clock = gw.WallClock()
        known = set(gate.pending())
        _drain(state, gate, known)
        if not args.serve:
            return 0
        time.sleep(gate.quantum / 1000)


def cmd_results(args) -> int:
    state = _state(args)
    shown: set[int] = set()
    while True:
        for job_id, record in state.results():
            if job_id in shown or (args.job is not None and job_id != args.job):
                continue
            shown.add(job_id)
            sys.stdout.write(record + "\n")
            sys.stdout.flush()
        if not args.watch:
            if args.job is not None and args.job not in shown:
                print(f"job {args.job}: no released result", file=sys.stderr)
                return 1
            return 0
        time.sleep(args.interval)


def cmd_store(args) -> int:
    state = _state(args)
    store = state.store
    if args.store_cmd == "init":
        files = {}
        for spec in args.files:
            name, sep, path = spec.partition("=")
            files[name if sep else Path(spec).name] = Path(path if sep else spec).read_bytes()
        store.create(args.customer, files)
        print(f"{args.customer}: version 0, {len(files)} files")
        return 0
    if args.store_cmd == "list":
        for c in store.customers():
            print(f"{c} version={store.latest_version(c)}")
        return 0
    # show
    version = store.latest_version(args.customer) if args.version is None else args.version
    print(f"customer: {args.customer}")
    print(f"version: {version}")
    for name, data in sorted(store.snapshot(args.customer, version).items()):
        print(f"file {name} sha256={hashlib.sha256(data).hexdigest()} size={len(data)}")
    if args.log:
        for c in store.log(args.customer):
            print(f"commit {c.version} job={c.job_id} changes={len(c.diff)}")
    return 0


# ---------------------------------------------------------------------------
# harness commands


def cmd_fuzz(args) -> int:
    path = Path(args.plan)
    plan = harness.parse_plan(path.read_text(), base_dir=path.parent)
    report = harness.fuzz(plan, args.master_seed)
    print(f"runs={report.runs} distinct-hashes={len(report.hashes)} reference={report.reference_hash}")
    if report.passed:
        print("PASS")
        return 0
    print(f"FAIL first divergence {report.divergence}")
    return 1


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


def _defines(pairs: list[str]) -> dict[str, int]:
    out = {}
    for pair in pairs or []:
        name, _, value = pair.partition("=")
        out[name] = int(value, 0)
    return out


def cmd_bench(args) -> int:
    rows = harness.bench_scaling(args.guest, _ints(args.workers), params=_defines(args.define),
                                 repeats=args.repeats, backend=args.backend)
    base = rows[0].seconds
    print(f"{'workers':>7} {'seconds':>10} {'speedup':>8}  output-hash")
    for r in rows:
        print(f"{r.workers:>7} {r.seconds:>10.4f} {base / r.seconds:>8.2f}  {r.output_hash[:16]}")
    same = len({r.output_hash for r in rows}) == 1
    print("output identical across rows" if same else "OUTPUT DIFFERS ACROSS ROWS")
    return 0 if same else 1


def cmd_probe(args) -> int:
    report = harness.probe_timing(args.runs, args.max_stall_ms, quantum_ms=args.quantum_ms,
                                  workers=args.workers, seed=args.seed,
                                  mutations=frozenset(args.mutation or ()))
    print(report.summary())
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# program tools


def cmd_asm(args) -> int:
    defines = _defines(args.define)
    if args.guest:
        program = load_guest(args.guest, defines)
    elif args.source:
        text = Path(args.source).read_text()
        if args.standalone:
            program = assemble((args.source, "".join(f".equ {k}, {v}\n" for k, v in defines.items()) + text))
        else:
            program = link(text, defines, name=args.source)
    else:
        raise CliError("give a source file or --guest")
    if args.disassemble:
        print(disassemble(program))
    if args.output:
        Path(args.output).write_bytes(program.to_bytes())
        print(f"{args.output}: {program.size} bytes, entry 0x{program.entry:x}")
    return 0


def cmd_run(args) -> int:
    program = GuestProgram.from_bytes(Path(args.program).read_bytes())
    inputs = {}
    for spec in args.input or []:
        name, _, path = spec.partition("=")
        inputs[name] = Path(path).read_bytes()
    out = harness.run_guest(program, seed=args.seed, workers=args.workers, fuel=args.fuel,
                            inputs=inputs)
    sys.stdout.write(out.files.get("stdout", b"").decode("latin-1"))
    print(f"exit: {out.exit}")
    print(f"output-hash: {out.output_hash}")
    if args.events:
        print("\n".join(out.events))
    return 0


def cmd_guests(args) -> int:
    for name in bundled_guests():
        params = " ".join(f"{k}={v}" for k, v in guest_params(name).items())
        print(f"{name:12} {params}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detcloud", description="Deterministic job cloud")
    p.add_argument("--state", help="state directory (default $DETCLOUD_STATE or ./detcloud-state)")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("submit", help="queue a job manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_submit)

    s = sub.add_parser("gateway", help="run queued jobs and release their results")
    s.add_argument("--quantum-ms", type=int, default=None)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--seed", type=int, default=0, help="schedule seed (never guest-visible)")
    s.add_argument("--max-stall-ms", type=float, default=0, help="inject random worker stalls")
    s.add_argument("--program-cap", type=int, default=gw.DEFAULT_PROGRAM_CAP)
    s.add_argument("--wallclock", action="store_true", help="use real time instead of the logical clock")
    s.add_argument("--serve", action="store_true", help="keep polling for new jobs")
    s.set_defaults(func=cmd_gateway)

    s = sub.add_parser("results", help="print released result records")
    s.add_argument("job", nargs="?", type=int)
    s.add_argument("--watch", action="store_true")
    s.add_argument("--interval", type=float, default=1.0)
    s.set_defaults(func=cmd_results)

    s = sub.add_parser("store", help="inspect or create customer stores")
    ss = s.add_subparsers(dest="store_cmd", required=True)
    x = ss.add_parser("init")
    x.add_argument("customer")
    x.add_argument("files", nargs="*", help="PATH or NAME=PATH")
    x = ss.add_parser("show")
    x.add_argument("customer")
    x.add_argument("--version", type=int)
    x.add_argument("--log", action="store_true")
    ss.add_parser("list")
    s.set_defaults(func=cmd_store)

    s = sub.add_parser("fuzz", help="run a schedule-fuzz plan")
    s.add_argument("--plan", required=True)
    s.add_argument("--master-seed", type=int, default=0)
    s.set_defaults(func=cmd_fuzz)

    s = sub.add_parser("bench", help="wall time per worker count")
    s.add_argument("--guest", required=True)
    s.add_argument("--workers", default="1,2,4,8")
    s.add_argument("-D", "--define", action="append", metavar="NAME=VALUE")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--backend", choices=sorted(vm.BACKENDS))
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("probe", help="timing probe through the gateway")
    s.add_argument("--runs", type=int, default=50)
    s.add_argument("--max-stall-ms", type=float, default=10)
    s.add_argument("--quantum-ms", type=int, default=1000)
    s.add_argument("--workers", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mutation", action="append", choices=harness.DOCUMENTED_MUTATIONS)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("asm", help="assemble a guest program container")
    s.add_argument("source", nargs="?")
    s.add_argument("--guest", help="bundled guest name instead of a source file")
    s.add_argument("-o", "--output")
    s.add_argument("-D", "--define", action="append", metavar="NAME=VALUE")
    s.add_argument("--standalone", action="store_true", help="do not link the runtime")
    s.add_argument("--disassemble", action="store_true")
    s.set_defaults(func=cmd_asm)

    s = sub.add_parser("run", help="run a program container once")
    s.add_argument("program")
    s.add_argument("--input", action="append", metavar="NAME=PATH")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--fuel", type=int, default=10**9)
    s.add_argument("--events", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("guests", help="list bundled guest programs")
    s.set_defaults(func=cmd_guests)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, gw.ManifestError, gw.GatewayError, harness.PlanError, AsmError,
            ProgramError, OSError, ValueError, KeyError) as e:
        print(f"detcloud: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
