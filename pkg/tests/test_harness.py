"""Harness tests: trace generation, hint promotion, replay, fault injection."""

import json
import os
import subprocess
import sys

import pytest

from nexus import report as report_mod
from nexus.harness import (
    FaultPlan,
    ReplayOptions,
    TraceEvent,
    gen_trace,
    load_trace,
    promote_hints,
    replay,
    save_trace,
)
from nexus.proto import new_id


class TestGenTrace:
    def test_deterministic_for_seed(self):
        a = gen_trace(functions=3, rate=5.0, duration_s=2.0, io_ratio=0.5, seed=42)
        b = gen_trace(functions=3, rate=5.0, duration_s=2.0, io_ratio=0.5, seed=42)
        c = gen_trace(functions=3, rate=5.0, duration_s=2.0, io_ratio=0.5, seed=43)
        assert [e.to_json() for e in a] == [e.to_json() for e in b]
        assert [e.to_json() for e in a] != [e.to_json() for e in c]

    def test_sorted_by_offset(self):
        events = gen_trace(functions=4, rate=10.0, duration_s=2.0, io_ratio=0.5, seed=1)
        offsets = [e.t_ms for e in events]
        assert offsets == sorted(offsets)

    def test_hinted_mix_matches_flag(self):
        events = gen_trace(functions=8, rate=40.0, duration_s=4.0, io_ratio=0.5, seed=7,
                           hinted_frac=0.96)
        fallback = sum(1 for e in events if not e.hinted) / len(events)
        assert fallback == pytest.approx(0.04, abs=0.02)

    def test_io_ratio_shapes_compute(self):
        heavy_io = gen_trace(functions=1, rate=5.0, duration_s=2.0, io_ratio=0.9, seed=3)
        heavy_cpu = gen_trace(functions=1, rate=5.0, duration_s=2.0, io_ratio=0.1, seed=3)
        assert heavy_io[0].compute_us < heavy_cpu[0].compute_us

    def test_jsonl_round_trip(self, tmp_path):
        events = gen_trace(functions=2, rate=5.0, duration_s=1.0, io_ratio=0.5, seed=5)
        path = str(tmp_path / "trace.jsonl")
        save_trace(events, path)
        loaded = load_trace(path)
        assert [e.to_json() for e in loaded] == [e.to_json() for e in events]


class TestPromoteHints:
    def test_hinted_event_promotes_inputs(self):
        event = TraceEvent(t_ms=0, function="f",
                           inputs=[{"bucket": "b", "key": "k", "size_bytes": 10}],
                           output={"bucket": "b", "key": "o", "size_bytes": 5})
        env = promote_hints(event, new_id(), new_id())
        assert len(env.input_hints) == 1
        assert env.input_hints[0].size_bytes == 10
        assert len(env.output_hints) == 1
        body = json.loads(env.event_body)
        assert body["inputs"][0]["key"] == "k"

    def test_unhinted_event_strips_hints_keeps_body(self):
        event = TraceEvent(t_ms=0, function="f",
                           inputs=[{"bucket": "b", "key": "k", "size_bytes": 10}],
                           hinted=False)
        env = promote_hints(event, new_id(), new_id())
        assert env.input_hints == ()
        assert json.loads(env.event_body)["inputs"]  # handler still sees its inputs


class TestFaultPlan:
    def test_parse(self):
        plan = FaultPlan.parse("during-prefetch:2,post-response-pre-ack:1")
        assert plan.kills == ["during-prefetch", "during-prefetch", "post-response-pre-ack"]
        plan.consume()
        assert plan.next_point() == "during-prefetch"

    def test_rejects_unknown_point(self):
        with pytest.raises(ValueError):
            FaultPlan.parse("mid-exec:1")


class TestReportMath:
    def test_percentiles(self):
        values = list(map(float, range(1, 101)))
        assert report_mod.percentile(values, 0.5) == pytest.approx(50.5)
        assert report_mod.percentile(values, 0.99) == pytest.approx(99.01)
        assert report_mod.percentile([], 0.99) == 0.0

    def test_geomean(self):
        assert report_mod.geometric_mean([1.0, 4.0]) == pytest.approx(2.0)
        assert report_mod.geometric_mean([]) == 0.0


def small_options(mode="offloaded-async", **kw):
    options = ReplayOptions(
        mode=mode,
        store_latency_us=2_000,
        backend_overrides={
            "restore_model": {"base_us": 2_000, "per_page_us": 0.0, "working_set_pages": 0},
        },
        unloaded_probes=kw.pop("unloaded_probes", 2),
        seed=9,
    )
    for key, value in kw.items():
        setattr(options, key, value)
    return options


class TestReplay:
    def test_empty_trace(self):
        run = replay([], small_options(unloaded_probes=0))
        assert run["invocations"] == 0
        assert run["records"] == []

    def test_small_replay_all_ok(self, tmp_path):
        events = gen_trace(functions=2, rate=4.0, duration_s=1.5, io_ratio=0.5, seed=11,
                           object_kib_min=16, object_kib_max=64)
        assert events, "trace generator produced no events"
        run = replay(events, small_options())
        assert run["invocations"] == len(events)
        assert run["errors"] == 0 and run["lost"] == 0
        assert run["geomean_slowdown"] > 0
        for name, entry in run["per_function"].items():
            assert entry["unloaded_median_us"] > 0
        report_path = str(tmp_path / "run.json")
        report_mod.write_report(run, report_path)
        report_mod.write_csv(run, str(tmp_path / "run.csv"))
        figures = report_mod.render_figures([run], str(tmp_path), "run")
        for path in [report_path, str(tmp_path / "run.csv")] + figures:
            assert os.path.exists(path) and os.path.getsize(path) > 0

    def test_breakdown_accounting_coupled(self):
        events = [TraceEvent(t_ms=0, function="f00",
                             inputs=[{"bucket": "trace", "key": "f00/in0", "size_bytes": 65536}],
                             compute_us=30_000,
                             output={"bucket": "trace", "key": "f00/out0", "size_bytes": 65536})]
        run = replay(events, small_options(mode="coupled", unloaded_probes=0))
        record = run["records"][0]
        assert record["status"] == "ok", record["error"]
        breakdown = record["breakdown_us"]
        parts = sum(breakdown.values())
        assert record["total_us"] >= parts * 0.9
        assert abs(record["total_us"] - parts) < 25_000  # coupled: phases add up


class TestFaultInjection:
    def test_kill_during_prefetch_retries_to_success(self):
        events = [TraceEvent(t_ms=0, function="f00",
                             inputs=[{"bucket": "trace", "key": "f00/in0", "size_bytes": 32768}],
                             compute_us=5_000)]
        options = small_options(unloaded_probes=0, fault_plan="during-prefetch:1")
        run = replay(events, options)
        record = run["records"][0]
        assert record["status"] == "ok", record["error"]
        assert record["attempts"] >= 2
        assert run["counters"]["backend_restarts"] == 1
        gets = run["counters"]["store"]["get_by_ref"]["trace/f00/in0"]
        assert gets <= 2  # at most one extra fetch for the retried attempt

    def test_kill_post_response_pre_ack_at_least_once(self):
        events = [TraceEvent(t_ms=0, function="f00",
                             inputs=[{"bucket": "trace", "key": "f00/in0", "size_bytes": 16384}],
                             compute_us=2_000,
                             output={"bucket": "trace", "key": "f00/out0", "size_bytes": 16384})]
        options = small_options(unloaded_probes=0, fault_plan="post-response-pre-ack:1",
                                store_latency_us=150_000)
        run = replay(events, options)
        record = run["records"][0]
        assert record["status"] == "ok", record["error"]
        assert record["attempts"] >= 2
        version = run["counters"]["store"]["versions"]["trace/f00/out0"]
        assert version in (1, 2)  # duplicate permitted, loss is not

    def test_no_faults_no_restarts(self):
        events = [TraceEvent(t_ms=0, function="f00",
                             inputs=[{"bucket": "trace", "key": "f00/in0", "size_bytes": 8192}])]
        run = replay(events, small_options(unloaded_probes=0))
        assert run["counters"]["backend_restarts"] == 0
        assert run["counters"]["ingress_retries"] == 0


class TestSweep:
    def test_unbounded_slo_terminates_at_max_and_reproduces(self):
        from nexus.harness import SweepTemplate, density_sweep

        template = SweepTemplate(
            modes=["offloaded-async"],
            start_functions=1, step_functions=1, max_functions=2,
            rate=3.0, duration_s=1.5, io_ratio=0.5, seed=17,
            slo_multiplier=float("inf"),
            object_kib_min=16, object_kib_max=32,
            store_latency_us=2_000,
            backend_overrides={
                "restore_model": {"base_us": 2_000, "per_page_us": 0.0,
                                  "working_set_pages": 0},
            })
        first = density_sweep(template)
        second = density_sweep(template)
        assert first["density"]["offloaded-async"] == 2  # bounded by max count
        assert first["density"] == second["density"]
        counts = [s["invocations"] for s in first["steps"]["offloaded-async"]]
        assert counts == [s["invocations"] for s in second["steps"]["offloaded-async"]]


class TestCli:
    def test_gen_trace_and_replay_cli(self, tmp_path):
        trace_path = str(tmp_path / "t.jsonl")
        out = subprocess.run(
            [sys.executable, "-m", "nexus.cli", "harness", "gen-trace",
             "--functions", "1", "--rate", "4", "--io-ratio", "0.5", "--seed", "3",
             "--duration-s", "1", "--object-kib-min", "16", "--object-kib-max", "32",
             "--out", trace_path],
            capture_output=True, text=True, timeout=60)
        assert out.returncode == 0, out.stderr
        assert os.path.exists(trace_path)

        report_path = str(tmp_path / "out.json")
        out = subprocess.run(
            [sys.executable, "-m", "nexus.cli", "harness", "replay",
             "--trace", trace_path, "--mode", "offloaded-async",
             "--report", report_path, "--latency-us", "2000"],
            capture_output=True, text=True, timeout=240)
        assert out.returncode == 0, out.stderr
        assert os.path.exists(report_path)
        assert os.path.exists(str(tmp_path / "out.csv"))
        assert os.path.exists(str(tmp_path / "out_breakdown.png"))
        assert os.path.exists(str(tmp_path / "out_latency.png"))
        with open(report_path) as fh:
            doc = json.load(fh)
        assert doc["lost"] == 0
