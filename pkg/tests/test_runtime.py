"""Submission validation, dispatch planning, client jobs, baseline runtime."""
import pytest

from flowpath.config import ValidationError, small_cluster
from flowpath.ir import CompiledFunction, Tracer, chain_program
from flowpath.runtime import (StreamJob, System, multicontroller_baseline,
                              steady_rate)
from flowpath.simcore import us
from flowpath.store import audit_leaks, audit_no_double_free

MB = 1 << 20


def fn(name="f0", shards=1, t=100.0, **kw):
    return CompiledFunction(name, shards, (MB,), (MB,), t, **kw)


def make_system(**kw):
    sys_ = System(small_cluster(**{"hosts": 1, "devices_per_host": 1, **kw}))
    return sys_, sys_.add_client("c0")


# -- submission validation -------------------------------------------------

def test_external_arg_requires_binding():
    sys_, c = make_system()
    sys_.register_traced("p", chain_program([fn()], arg_handle="x"))
    with pytest.raises(ValidationError, match="needs a handle binding"):
        c.submit("p")


def test_internal_arg_rejects_binding():
    sys_, c = make_system()
    sys_.register_traced("p", chain_program([fn()]))
    with pytest.raises(ValidationError, match="does not take a binding"):
        c.submit("p", bindings={"n0": "whatever"})


def test_binding_must_live_where_the_consumer_runs():
    sys_, c = make_system(devices_per_host=2)
    sys_.register_traced("maker", chain_program([fn()]))          # device 0
    sys_.register_traced("rest", chain_program([fn()], arg_handle="x"))
    inst = c.submit("maker")
    handle = c.handles[inst][0]
    with pytest.raises(ValidationError, match="lives on devices"):
        c.submit("rest", bindings={"n0": handle})


def test_unknown_mode_rejected():
    sys_, c = make_system()
    sys_.register_traced("p", chain_program([fn()]))
    with pytest.raises(ValidationError, match="unknown dispatch mode"):
        c.submit("p", mode="eager")


def test_parallel_rejects_data_dependent_nodes():
    sys_, c = make_system()
    sys_.register_traced("p", chain_program([fn(), fn("dyn", regular=False)]))
    with pytest.raises(ValidationError, match="data-dependent"):
        c.submit("p", mode="parallel")


# -- dispatch planning -----------------------------------------------------

def irregular_sandwich(sys_):
    t = Tracer()
    a = t.arg(shards=1, bytes_per_shard=MB)
    v = t.call(fn("pre"), a)
    v = t.call(fn("dyn", regular=False), v)
    v = t.call(fn("post"), v)
    return sys_.register_traced("p", t.finish(results=[v]))


def test_parallel_plan_is_one_stage_of_scheduled_gangs():
    sys_, _ = make_system()
    info = sys_.register_traced("p", chain_program([fn("a"), fn("b")]))
    modes, stages, triggers = sys_._plan(info, "parallel")
    assert modes == {"n1": "go", "n2": "go"}
    assert stages == [["n1", "n2"]] and triggers == [set()]


def test_sequential_plan_gates_downstream_nodes_on_futures():
    sys_, _ = make_system()
    info = irregular_sandwich(sys_)
    modes, stages, triggers = sys_._plan(info, "sequential")
    assert modes == {"n1": "go", "n2": "dat", "n3": "fut"}
    assert stages == [["n1"]]


def test_auto_plan_splits_stages_at_irregular_nodes():
    sys_, _ = make_system()
    info = irregular_sandwich(sys_)
    modes, stages, triggers = sys_._plan(info, "auto")
    assert modes == {"n1": "go", "n2": "dat", "n3": "go"}
    assert stages == [["n1"], ["n3"]]
    assert triggers == [set(), {"n2"}]


def test_auto_runs_irregular_programs_to_the_same_answer():
    out = {}
    for mode in ("sequential", "auto"):
        sys_, c = make_system()
        irregular_sandwich(sys_)
        job = StreamJob(sys_.new_job_id(), "p", count=1, mode=mode)
        sys_.start_job(c, job)
        stats = sys_.run()
        assert stats.status == "quiescent", stats.blocked
        assert job.done
        out[mode] = sys_.inst_digests["i1"]
    assert out["sequential"] == out["auto"]


# -- client jobs -----------------------------------------------------------

def test_handles_trigger_submits_at_grant_time():
    sys_, c = make_system()
    sys_.register_traced("p", chain_program([fn(t=100)]))
    job = StreamJob(sys_.new_job_id(), "p", count=3, trigger="handles")
    sys_.start_job(c, job)
    assert sys_.run().status == "quiescent"
    # grant at 510 + go/handles sends 10 + client rpc 500 = 1020 per round
    assert [c.submitted_at[i] for i in job.instances] == [0, us(1020),
                                                          us(2040)]
    assert job.done and job.completed == 3


def test_complete_trigger_submits_at_completion_time():
    sys_, c = make_system()
    sys_.register_traced("p", chain_program([fn(t=100)]))
    job = StreamJob(sys_.new_job_id(), "p", count=3)
    sys_.start_job(c, job)
    assert sys_.run().status == "quiescent"
    # full round trip: 580 to the device, 100 on it, 505 back
    assert [c.submitted_at[i] for i in job.instances] == [0, us(1185),
                                                          us(2370)]


def test_window_keeps_that_many_instances_in_flight():
    sys_, c = make_system()
    sys_.register_traced("p", chain_program([fn(t=100)]))
    job = StreamJob(sys_.new_job_id(), "p", count=4, window=2)
    sys_.start_job(c, job)
    assert sys_.run().status == "quiescent"
    t = [c.submitted_at[i] for i in job.instances]
    assert t[0] == t[1] == 0
    assert t[2] == us(1185)               # first completion refills the window
    assert t[3] == us(1285)               # second kernel ran 100us later
    assert audit_leaks(sys_.cluster) == {}


def test_client_dead_before_dispatch_runs_nothing():
    sys_, c = make_system()
    sys_.register_traced("p", chain_program([fn(t=100)]))
    job = StreamJob(sys_.new_job_id(), "p", count=2)
    sys_.start_job(c, job)
    sys_.fail_client(c, at_ns=us(100), detect_ns=us(100))
    stats = sys_.run()
    assert stats.status == "quiescent", stats.blocked
    assert c.dead and not job.done
    assert [t for t in sys_.sim.trace if t.category == "kernel"] == []
    assert "c0" in sys_.scheds[0]._dead_clients
    assert audit_no_double_free(sys_.audit) == []
    assert audit_leaks(sys_.cluster) == {}


def test_failure_detection_lag_lets_inflight_work_finish():
    sys_, c = make_system()
    sys_.register_traced("p", chain_program([fn(t=100)]))
    job = StreamJob(sys_.new_job_id(), "p", count=2)
    sys_.start_job(c, job)
    # dies right after the grant; the fleet only learns at 700, by which
    # time the kernel is on the device and runs to completion
    sys_.fail_client(c, at_ns=us(520), detect_ns=us(180))
    stats = sys_.run()
    assert stats.status == "quiescent", stats.blocked
    spans = [t for t in sys_.sim.trace if t.category == "kernel"]
    assert len(spans) == 1
    assert audit_no_double_free(sys_.audit) == []
    assert audit_leaks(sys_.cluster) == {}


# -- measurement helpers ---------------------------------------------------

def test_steady_rate_of_uniform_series():
    series = [(us(10) * (i + 1), 1) for i in range(100)]
    assert steady_rate(series) == pytest.approx(1e5)


def test_steady_rate_needs_enough_points():
    with pytest.raises(ValueError, match="not enough"):
        steady_rate([(1, 1), (2, 1), (3, 1)])


def test_steady_rate_rejects_degenerate_window():
    with pytest.raises(ValueError, match="degenerate"):
        steady_rate([(us(5), 1)] * 50)


# -- coordinator-free reference --------------------------------------------

def test_baseline_runs_lockstep_collectives():
    spec = small_cluster(hosts=2, devices_per_host=4)
    run = multicontroller_baseline(spec, count=20, duration_ns=us(50))
    assert len(run.completions) == 20          # one per collective, not per shard
    assert run.makespan_ns == us(1025)
    ends = [t for t, _i, _n in run.completions]
    assert all(b - a == us(50) for a, b in zip(ends[1:], ends[2:]))
    assert run.rate() == pytest.approx(20000.0)


def test_baseline_device_subset():
    spec = small_cluster(hosts=2, devices_per_host=4)
    run = multicontroller_baseline(spec, count=8, duration_ns=us(30),
                                   devices=[0, 1, 2, 3])
    assert len(run.completions) == 8
    # single host drives 4 devices: 20us enqueue loop, 5us pcie, then serial
    assert run.completions[0][0] == us(55)
