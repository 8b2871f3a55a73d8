import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from detcloud import gateway as gw
from detcloud.harness import make_stall
from detcloud.runtime import load_guest
from detcloud.store import Store, apply_diff, decode_files, encode_files

from conftest import FORKWAIT_INPUT

names = st.text(st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=20)


# -------------------------------------------------------------------- store


@given(st.dictionaries(names, st.one_of(st.none(), st.binary(max_size=50)), max_size=8))
def test_file_map_encoding_roundtrip(files):
    blob = encode_files(files)
    assert decode_files(blob) == files
    assert encode_files(dict(reversed(list(files.items())))) == blob


def test_decode_rejects_garbage():
    with pytest.raises(ValueError):
        decode_files(b"nope")
    with pytest.raises(ValueError):
        decode_files(encode_files({"a": b"1"}) + b"x")


def test_first_committer_wins_and_chain_is_linear():
    s = Store()
    s.create("c", {"a": b"1"})
    assert s.commit("c", 0, {"b": b"2"}, job_id=1) == 1
    assert s.commit("c", 0, {"a": None}, job_id=2) is None
    assert s.commit("c", 1, {"a": None}, job_id=3) == 2
    assert s.snapshot("c") == {"b": b"2"}
    assert s.snapshot("c", 1) == {"a": b"1", "b": b"2"}
    assert [c.job_id for c in s.log("c")] == [1, 3]
    for v, commit in enumerate(s.log("c"), 1):
        assert apply_diff(s.snapshot("c", v - 1), commit.diff) == s.snapshot("c", v)
    assert s.replay("c") == s.snapshot("c")


def test_store_persists_and_reloads(tmp_path):
    s = Store(tmp_path)
    s.create("c", {"a": b"1"})
    s.commit("c", 0, {"b": b"2"}, 7)
    t = Store(tmp_path)
    assert t.customers() == ["c"] and t.snapshot("c") == {"a": b"1", "b": b"2"}
    assert t.log("c")[0].job_id == 7 and t.replay("c") == t.snapshot("c")


@pytest.mark.parametrize("bad", ["", "a b", "x/y"])
def test_bad_customer_names(bad):
    with pytest.raises(ValueError):
        Store().create(bad)


# ----------------------------------------------------------------- manifest


def test_manifest_roundtrip(tmp_path):
    text = "customer: alice\nprogram: p.dvm\ninput query q.txt\nfuel: 1000\nfollowup-allowed: yes\n"
    m = gw.parse_manifest(text, tmp_path)
    assert (m.customer, m.program, m.inputs, m.fuel, m.followup_allowed) == \
        ("alice", "p.dvm", [("query", "q.txt")], 1000, True)
    assert gw.format_manifest(m) == text
    assert m.resolve("q.txt") == tmp_path / "q.txt"


@pytest.mark.parametrize("text", [
    "program: p\n",
    "customer: a\n",
    "customer: a\nprogram: p\nfuel: lots\n",
    "customer: a\nprogram: p\nfuel: 0\n",
    "customer: a\nprogram: p\ncolour: red\n",
    "customer: a\ncustomer: b\nprogram: p\n",
    "customer: a\nprogram: p\ninput /env/now x\n",
    "customer: a\nprogram: p\ninput onlyname\n",
    "customer: a\nprogram: p\nfollowup-allowed: maybe\n",
])
def test_malformed_manifests(text):
    with pytest.raises(gw.ManifestError):
        gw.parse_manifest(text)


# ------------------------------------------------------------------ gateway


def program(name, **params) -> bytes:
    return load_guest(name, params or None).to_bytes()


def new_gateway(quantum=1000, files=None, **kw):
    store = Store()
    store.create("alice", files or {})
    return gw.Gateway(store, quantum_ms=quantum, **kw)


def test_minimal_job_commits_empty_diff_and_releases_next_quantum():
    g = new_gateway()
    job = g.submit("alice", program("halt"))
    (res,) = g.run_until_idle()
    assert (res.status, res.commit, res.outputs, res.version) == ("HALT 0", "committed", {}, 1)
    assert res.release_time == 1000
    assert g.release(now=999) == [] and g.release(now=1000) == [res]
    assert res.job_id == job


def test_input_files_are_visible_to_the_root():
    g = new_gateway()
    g.submit("alice", program("forkwait"), {"input": FORKWAIT_INPUT})
    (res,) = g.run_until_idle()
    assert res.outputs["upper"] == FORKWAIT_INPUT.upper()
    assert "input" not in res.outputs          # unchanged inputs are not part of the diff


def test_same_manifest_twice_gives_identical_outputs():
    g = new_gateway(files={"input": b"abc"})
    a = g.submit("alice", program("forkwait"))
    b = g.submit("alice", program("forkwait"))
    ra, rb = g.run_until_idle()
    assert ra.outputs == rb.outputs and ra.output_hash == rb.output_hash
    assert (ra.commit, rb.commit) == ("committed", "aborted-stale-base")


def test_env_now_is_the_submission_quantum():
    g = new_gateway(quantum=500)
    g.clock.advance(12_345)
    g.submit("alice", program("envclock"))
    (res,) = g.run_until_idle()
    assert res.outputs["stdout"] == b"now=12000\n" and res.outputs["seen-now"] == b"12000"
    assert "/env/now" not in res.outputs


@pytest.mark.parametrize("name,params", [("matmult", {"N": 8}), ("applog", {}), ("swap", {})])
def test_worker_count_does_not_change_results(name, params):
    records = []
    for workers, seed in [(1, 0), (8, 5)]:
        g = new_gateway(workers=workers, seed=seed)
        g.submit("alice", program(name, **params))
        (res,) = g.run_until_idle()
        records.append(res.record())
    assert records[0] == records[1]


def test_followup_is_scheduled_after_release():
    g = new_gateway()
    g.clock.advance(1500)
    g.submit("alice", program("ticker"), followup_allowed=True)
    results = g.run_until_idle()
    assert [r.status for r in results] == ["RET 1", "RET 2", "RET 3"]
    for prev, nxt in zip(results, results[1:]):
        assert prev.followup_job == nxt.job_id
        assert g.jobs[nxt.job_id].created_ms == prev.release_time + 2 * g.quantum
    assert g.store.snapshot("alice")["times"] == b"1000\n4000\n7000\n"


def test_followup_ignored_unless_allowed():
    g = new_gateway()
    g.submit("alice", program("ticker"))
    assert len(g.run_until_idle()) == 1


def test_followup_parsing():
    outputs = {"next.dvm": b"P2", "data": b"D"}
    fu = gw.parse_followup("delay: 3\nprogram: next.dvm\ninput arg data\n", outputs, b"P1")
    assert (fu.delay, fu.program, fu.inputs) == (3, b"P2", {"arg": b"D"})
    assert gw.parse_followup("delay: 0\nprogram: self\n", outputs, b"P1").program == b"P1"
    for bad in ["program: self\n", "delay: 1\nprogram: nope\n", "delay: x\nprogram: self\n",
                "delay: 1\nprogram: self\ninput a missing\n"]:
        with pytest.raises(gw.GatewayError):
            gw.parse_followup(bad, outputs, b"P1")


@pytest.mark.parametrize("first", ["a", "b"])
def test_concurrent_jobs_first_committer_wins(first):
    """Both completion orders: the store holds exactly one legal serialization."""
    g = new_gateway()
    a = g.submit("alice", program("swap"))
    b = g.submit("alice", program("envclock"))
    jobs = {"a": g.jobs[a], "b": g.jobs[b]}
    ex = {k: g.execute(j) for k, j in jobs.items()}
    order = [first, "b" if first == "a" else "a"]
    outcomes = {k: g.complete(jobs[k], ex[k]).commit for k in order}
    assert outcomes == {order[0]: "committed", order[1]: "aborted-stale-base"}
    assert g.store.snapshot("alice") == apply_diff({}, ex[order[0]].outputs)
    assert g.store.latest_version("alice") == 1


def test_read_only_job_still_advances_version():
    g = new_gateway(files={"x": b"1"})
    g.submit("alice", program("halt"))
    g.run_until_idle()
    assert g.store.latest_version("alice") == 1 and g.store.log("alice")[0].diff == {}


def test_fuelout_job_is_aborted_without_diff():
    g = new_gateway()
    g.submit("alice", program("bruteforce"), fuel=5000)
    (res,) = g.run_until_idle()
    assert res.status == "FUELOUT" and res.commit == "aborted-incomplete" and res.outputs == {}
    assert g.store.latest_version("alice") == 0
    assert "file " not in res.record()


def test_release_rule_examples():
    assert gw.release_time(3400, 1000) == 4000
    assert gw.release_time(4000, 1000) == 4000
    g = new_gateway()
    ids = [g.submit("alice", program("halt")) for _ in range(2)]
    for job_id, t in zip(ids, (3100, 3900)):
        g.clock.advance_to(t)
        g.complete(g.jobs[job_id], g.execute(g.jobs[job_id]))
    released = g.release(now=4000)
    assert [r.job_id for r in released] == ids and {r.release_time for r in released} == {4000}


def test_release_times_are_quantum_multiples_over_many_jobs():
    rng = random.Random(3)
    halt = program("halt")
    for quantum in (7, 1000):
        g = new_gateway(quantum=quantum, instr_per_ms=1)
        for _ in range(500):
            g.clock.advance(rng.randrange(0, 3 * quantum))
            g.submit("alice", halt)
            g.run_next()
        released = g.release_all()
        assert len(released) == 500
        assert all(r.release_time % quantum == 0 for r in released)
        assert [r.job_id for r in released] == sorted(r.job_id for r in released)


def test_isolation_from_commits_during_a_run():
    g = new_gateway(files={"input": b"base"})
    job = g.jobs[g.submit("alice", program("forkwait"))]
    before = g.execute(job)
    g.store.commit("alice", 0, {"input": b"changed underneath"}, job_id=999)
    after = g.execute(job)
    assert before.outputs == after.outputs and before.output_hash == after.output_hash
    assert g.complete(job, after).commit == "aborted-stale-base"


def test_stalls_change_nothing_but_release_time():
    records = []
    for stall in (None, make_stall(3, seed=1)):
        g = new_gateway(stall=stall, workers=2, clock=gw.WallClock())
        g.submit("alice", program("applog"))
        (res,) = g.run_until_idle()
        records.append([line for line in res.record().splitlines() if not line.startswith("release-time")])
        assert res.release_time % g.quantum == 0
    assert records[0] == records[1]


def test_wallclock_now_mutation_leaks_real_time():
    g = new_gateway(quantum=1000, mutations={"wallclock-now"})
    g.submit("alice", program("envclock"))
    (res,) = g.run_until_idle()
    assert int(res.outputs["seen-now"]) > 10**12          # epoch milliseconds, not logical time


@pytest.mark.parametrize("kwargs,err", [
    ({"customer": "bob"}, "unknown customer"),
    ({"program": b"x" * 2000}, "exceeds the cap"),
    ({"program": b"garbage"}, "does not parse"),
    ({"inputs": {"/env/now": b"1"}}, "reserved"),
])
def test_submit_errors(kwargs, err):
    g = new_gateway(program_cap=1500)
    args = {"customer": "alice", "program": program("halt"), "inputs": None} | kwargs
    with pytest.raises(gw.GatewayError) as e:
        g.submit(args["customer"], args["program"], args["inputs"])
    assert err in str(e.value)


def test_unknown_gateway_mutation():
    with pytest.raises(ValueError):
        new_gateway(mutations={"nope"})


def test_submit_manifest_reads_files(tmp_path):
    (tmp_path / "p.dvm").write_bytes(program("forkwait"))
    (tmp_path / "in.txt").write_bytes(b"xyz")
    m = gw.parse_manifest("customer: alice\nprogram: p.dvm\ninput input in.txt\n", tmp_path)
    g = new_gateway()
    g.submit_manifest(m)
    (res,) = g.run_until_idle()
    assert res.outputs["upper"] == b"XYZ"
    m.inputs.append(("other", "missing.txt"))
    with pytest.raises(gw.ManifestError):
        g.submit_manifest(m)


def test_result_record_format():
    r = gw.JobResult(3, "alice", "RET 0", {"b": b"hi", "a": None}, 12, "committed", 4, 1500, 2000, "h")
    assert r.record() == (
        "job: 3\ncustomer: alice\nstatus: RET 0\nfuel: 12\ncommit: committed\nversion: 4\n"
        "release-time: 2000\nfile a deleted\n"
        "file b sha256=8f434346648f6b96df89dda901c5176b10a6d83961dd3c1ac88b59b2dc327aa4 size=2\n")
