"""Workload harness: measurement arithmetic, baselines, sweep output."""

from __future__ import annotations

import pytest

from accf.experiments import (
    APP1_KEY,
    CSV_HEADER,
    SweepResult,
    SweepRow,
    four_server_config,
    measure,
    run_app1,
    run_app2,
    sweep,
    two_server_baseline_config,
    write_csv,
    write_plot_data,
)
from accf.model import HlcTimestamp
from accf.simnet import TraceRecord

TS = HlcTimestamp


def put_ack(t, key=APP1_KEY):
    return TraceRecord(t=t, actor="C1", kind="PUT_ACK", key=key, wt=TS(t - 2, 0), origin="A1")


class TestMeasure:
    def test_throughput_is_units_per_simulated_second(self):
        records = [put_ack(t) for t in range(100, 10_100, 100)]  # 100 acks in 10s
        m = measure(records, (100, 10_100), lambda r: r.kind == "PUT_ACK")
        assert m.throughput == pytest.approx(10.0)
        assert m.units == 100

    def test_no_parked_gets_zero_stats(self):
        records = [put_ack(100)]
        m = measure(records, (0, 1000), lambda r: r.kind == "PUT_ACK")
        assert m.parked == 0 and m.mean_park_ms == 0.0 and m.max_park_ms == 0.0

    def test_forged_fifty_ms_park(self):
        records = [
            TraceRecord(t=100, actor="A1", kind="GET_PARK", key="A:x", cg="cg1", origin="C7"),
            TraceRecord(
                t=150, actor="C7", kind="GET_REPLY", key="A:x", wt=TS(90, 0), origin="A1"
            ),
        ]
        m = measure(records, (0, 1000), lambda r: r.kind == "GET_REPLY")
        assert m.parked == 1
        assert m.mean_park_ms == pytest.approx(50.0)

    def test_staleness_from_reply_wt(self):
        records = [
            TraceRecord(t=150, actor="C7", kind="GET_REPLY", key="k", wt=TS(90, 0), origin="A1")
        ]
        m = measure(records, (0, 1000), lambda r: False)
        assert m.mean_staleness_ms == pytest.approx(60.0)

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError, match="empty measurement window"):
            measure([], (100, 100), lambda r: True)

    def test_window_excludes_warmup(self):
        records = [put_ack(50), put_ack(500)]
        m = measure(records, (100, 1000), lambda r: r.kind == "PUT_ACK")
        assert m.units == 1


class TestWorkloads:
    def test_app1_counter_alternates_strictly(self):
        result = run_app1("four-by-one", 0, 1, duration_ms=2500)
        assert result.check is not None and result.check.ok
        # values written on the counter strictly increase by one
        config = four_server_config("four-by-one")
        values = []
        from accf import runner
        from accf.experiments import app1_specs

        run = runner.run_system(
            config, app1_specs(config.group, 5), duration_ms=2500, seed=1
        )
        chain = run.servers["A1"].store[APP1_KEY]
        values = [int(v.value) for v in chain]
        assert values == list(range(len(values)))

    def test_app1_two_by_two_slower_than_four_by_one_even_undelayed(self):
        fast = run_app1("four-by-one", 0, 1, duration_ms=4000)
        slow = run_app1("two-by-two", 0, 1, duration_ms=4000, baseline=fast.throughput)
        assert slow.throughput < fast.throughput

    def test_app2_four_by_one_blocking_grows_with_delay(self):
        near = run_app2("four-by-one", 50, 1, duration_ms=4000)
        far = run_app2("four-by-one", 400, 1, duration_ms=4000)
        assert far.measurement.mean_park_ms > near.measurement.mean_park_ms
        assert far.throughput < near.throughput

    def test_app2_four_by_one_undelayed_near_baseline(self):
        result = run_app2("four-by-one", 0, 1, duration_ms=4000)
        assert result.normalized >= 0.85

    def test_app2_two_by_two_unaffected_by_delay(self):
        result = run_app2("two-by-two", 800, 1, duration_ms=4000)
        assert result.normalized >= 0.9
        assert result.measurement.parked == 0

    def test_baseline_configs_validate(self):
        from accf.grouping import validate

        assert validate(two_server_baseline_config().group) == []
        assert validate(four_server_config("two-by-two").group) == []


class TestSweep:
    def test_row_arithmetic(self):
        result = sweep(
            "app1",
            groupings=("two-by-two", "four-by-one"),
            delays=(0, 100),
            seeds=(1, 2),
            duration_ms=1500,
        )
        cell_rows = [r for r in result.rows if not r.grouping.endswith("/baseline")]
        baseline_rows = [r for r in result.rows if r.grouping.endswith("/baseline")]
        assert len(cell_rows) == 2 * 2 * 2
        assert len(baseline_rows) == 2
        assert all(r.normalized == 1.0 for r in baseline_rows)

    def test_empty_delay_list_rejected(self):
        with pytest.raises(ValueError, match="delay"):
            sweep("app1", delays=(), seeds=(1,))

    def test_unknown_app_rejected(self):
        with pytest.raises(ValueError, match="unknown app"):
            sweep("app7", delays=(0,), seeds=(1,))

    def test_csv_header_and_shape(self, tmp_path):
        rows = [
            SweepRow("app1", "two-by-two", 0, 1, 50.0, 0.5, 0.0, 12.0),
            SweepRow("app1", "two-by-two/baseline", 0, 1, 100.0, 1.0, 0.0, 0.0),
        ]
        path = str(tmp_path / "out.csv")
        write_csv(path, rows)
        lines = open(path).read().splitlines()
        assert lines[0] == CSV_HEADER
        assert lines[1].startswith("app1,two-by-two,0,1,50.0000,0.5000")

    def test_plot_data_files(self, tmp_path):
        result = SweepResult(
            rows=[
                SweepRow("app2", "four-by-one", 0, 1, 40.0, 1.0, 0.0, 0.0),
                SweepRow("app2", "four-by-one", 100, 1, 10.0, 0.25, 90.0, 0.0),
            ],
            baselines={"four-by-one": 40.0},
        )
        paths = write_plot_data(result, str(tmp_path), "app2")
        assert len(paths) == 1
        assert open(paths[0]).read() == "0 1.0000\n100 0.2500\n"
