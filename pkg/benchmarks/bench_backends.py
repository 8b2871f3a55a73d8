"""Compare the compiled interpreter loop with the pure-Python one.

Runs a few bundled guests (single worker, fixed seed) under each backend,
checks that both produce the same output hash, and reports wall time and
instructions retired per second.

    python3 benchmarks/bench_backends.py [--repeats 3] [--scale 8]
"""

import argparse
import statistics
import time

from detcloud import kernel, vm
from detcloud.harness import run_guest
from detcloud.memory import AddressSpace
from detcloud.runtime import load_guest

# name -> params; scale multiplies the problem size
WORKLOADS = {
    "bruteforce": lambda s: {"RANGE": 4096 * s, "THREADS": 2},
    "matmult": lambda s: {"N": 8 * s, "THREADS": 2},
    "qsort": lambda s: {"N": 500 * s},
    "refclock": lambda s: {"TICK_FUEL": 20000 * s},
}


def retired_instructions(program) -> int:
    res = kernel.Guest(program, AddressSpace(), 10**10).run(workers=1, seed=0)
    return sum(p.retired for p in res.processes)


def time_backend(program, backend: str, repeats: int) -> tuple[float, str]:
    times, digest = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        digest = run_guest(program, seed=0, workers=1, fuel=10**10, backend=backend).output_hash
        times.append(time.perf_counter() - t0)
    return statistics.median(times), digest


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--scale", type=int, default=8)
    args = ap.parse_args(argv)

    backends = sorted(vm.BACKENDS)
    print(f"backends available: {', '.join(backends)}")
    header = f"{'guest':<12}{'instructions':>14}" + "".join(f"{b + ' s':>14}{b + ' Mi/s':>14}" for b in backends)
    print(header + f"{'ratio':>9}")
    mismatched = False
    for name, params in WORKLOADS.items():
        program = load_guest(name, params(args.scale))
        n = retired_instructions(program)
        row = f"{name:<12}{n:>14}"
        results = {b: time_backend(program, b, args.repeats) for b in backends}
        for b in backends:
            secs = results[b][0]
            row += f"{secs:>14.3f}{n / secs / 1e6:>14.2f}"
        if "compiled" in results and "python" in results:
            row += f"{results['python'][0] / results['compiled'][0]:>8.1f}x"
        print(row)
        if len({d for _, d in results.values()}) != 1:
            mismatched = True
            print(f"  output hashes differ between backends for {name}")
    return 1 if mismatched else 0


if __name__ == "__main__":
    raise SystemExit(main())
