import numpy as np
import pytest

from inas.controller import ControllerNet
from inas.latency import (
    NET_CELL,
    CorrelationResult,
    LatencyTable,
    ModuleLatency,
    estimate_latency,
    estimate_latency_batch,
    pearson_r,
    profile_modules,
    trimmed_stats,
)
from inas.metagraph import (
    MetaGraphSpec,
    Selection,
    build_metagraph,
    sample_uniform_valid,
)


def tiny_spec():
    return MetaGraphSpec.build([4, 4, 4], [1, 1], 4, 2,
                               kinds=("BasicConv", "MBConv-3F-3K"),
                               input_channels=1, input_size=8)


def synthetic_table(spec, module_mean=0.5, stem=0.1, head=0.1, controller=0.1):
    entries = {
        (NET_CELL, "stem"): ModuleLatency(NET_CELL, "stem", stem, 0.0, 30),
        (NET_CELL, "head"): ModuleLatency(NET_CELL, "head", head, 0.0, 30),
        (NET_CELL, "controller"): ModuleLatency(NET_CELL, "controller", controller, 0.0, 30),
    }
    for i, (cell, kind) in enumerate(spec.module_ids()):
        entries[(cell, kind)] = ModuleLatency(cell, kind, module_mean * (i + 1), 0.01, 30)
    return LatencyTable(entries, "test-fingerprint | batch=1 res=8x8")


class TestEstimate:
    def test_sum_of_parts(self):
        spec = MetaGraphSpec.build([4, 4], [1], 4, 2, kinds=("BasicConv",), input_size=8)
        entries = {
            (NET_CELL, "stem"): ModuleLatency(NET_CELL, "stem", 0.15, 0.0, 30),
            (NET_CELL, "head"): ModuleLatency(NET_CELL, "head", 0.05, 0.0, 30),
            (NET_CELL, "controller"): ModuleLatency(NET_CELL, "controller", 0.1, 0.0, 30),
            (0, "BasicConv"): ModuleLatency(0, "BasicConv", 0.5, 0.0, 30),
        }
        table = LatencyTable(entries, "fp")
        assert estimate_latency(table, spec, Selection(np.array([1]))) == pytest.approx(0.8)

    def test_all_modules_selection(self):
        spec = tiny_spec()
        table = synthetic_table(spec)
        total = estimate_latency(table, spec, Selection.all_modules(spec))
        want = 0.3 + sum(0.5 * (i + 1) for i in range(spec.module_count))
        assert total == pytest.approx(want)

    def test_superset_strictly_greater(self):
        spec = tiny_spec()
        table = synthetic_table(spec)
        small = Selection(np.array([1, 0, 1, 0]))
        big = Selection(np.array([1, 1, 1, 0]))
        assert estimate_latency(table, spec, big) > estimate_latency(table, spec, small)

    def test_adding_module_adds_exactly_its_mean(self):
        spec = tiny_spec()
        table = synthetic_table(spec)
        base = Selection(np.array([1, 0, 1, 0]))
        added = Selection(np.array([1, 0, 1, 1]))
        delta = estimate_latency(table, spec, added) - estimate_latency(table, spec, base)
        assert delta == table.entries[spec.module_ids()[3]].mean_ms

    def test_order_independent_set_function(self):
        spec = tiny_spec()
        table = synthetic_table(spec)
        sel = Selection(np.array([0, 1, 1, 0]))
        assert estimate_latency(table, spec, sel) == estimate_latency(table, spec, Selection(sel.bits.copy()))

    def test_missing_entry_rejected(self):
        spec = tiny_spec()
        table = synthetic_table(spec)
        del table.entries[(1, "BasicConv")]
        with pytest.raises(KeyError, match="no entry"):
            estimate_latency(table, spec, Selection.all_modules(spec))

    def test_batch_matches_scalar(self):
        spec = tiny_spec()
        table = synthetic_table(spec)
        rng = np.random.default_rng(0)
        sels = [sample_uniform_valid(spec, rng) for _ in range(5)]
        batch = estimate_latency_batch(table, spec, sels)
        for s, z in zip(sels, batch):
            assert z == pytest.approx(estimate_latency(table, spec, s))


class TestTableIO:
    def test_round_trip(self, tmp_path):
        spec = tiny_spec()
        table = synthetic_table(spec)
        path = tmp_path / "latency_table.txt"
        table.save(path)
        text = path.read_text().splitlines()
        assert text[0] == "INAS-LAT v1"
        assert text[1].startswith("fingerprint: ")
        loaded = LatencyTable.load(path)
        assert loaded.fingerprint == table.fingerprint
        assert set(loaded.entries) == set(table.entries)
        for k in table.entries:
            assert loaded.entries[k].mean_ms == pytest.approx(table.entries[k].mean_ms)
            assert loaded.entries[k].samples == table.entries[k].samples

    def test_bad_header_rejected(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("WRONG v9\nfingerprint: x\n")
        with pytest.raises(ValueError, match="header"):
            LatencyTable.load(p)

    def test_entry_count_validation(self):
        spec = tiny_spec()
        table = synthetic_table(spec)
        table.validate_for(spec)  # M + 3 entries
        assert len(table.entries) == spec.module_count + 3
        del table.entries[(NET_CELL, "controller")]
        with pytest.raises(ValueError, match="missing"):
            table.validate_for(spec)

    def test_empty_fingerprint_rejected(self):
        with pytest.raises(ValueError, match="fingerprint"):
            LatencyTable({}, "  ")


class TestTrimmedStats:
    def test_outliers_discarded(self):
        samples = [1.0] * 38 + [100.0, 0.001]
        mean, std, kept = trimmed_stats(samples)
        assert kept == 36  # 5% trimmed from each side of 40 reps
        assert mean == pytest.approx(1.0)
        assert std == pytest.approx(0.0)

    def test_short_runs_keep_everything(self):
        mean, std, kept = trimmed_stats([1.0, 2.0, 3.0])
        assert kept == 3
        assert mean == pytest.approx(2.0)


class TestPearson:
    def test_self_correlation_is_one(self):
        vals = np.random.default_rng(1).random(50)
        assert pearson_r(vals, vals) == pytest.approx(1.0)

    def test_negated_is_minus_one(self):
        vals = np.random.default_rng(2).random(50)
        assert pearson_r(vals, -vals) == pytest.approx(-1.0)

    def test_result_pass_fail(self):
        res = CorrelationResult(0.95, 0.9, [1.0], [1.0])
        assert res.passed
        assert not CorrelationResult(0.5, 0.9, [1.0], [1.0]).passed

    def test_scatter_csv(self, tmp_path):
        res = CorrelationResult(1.0, 0.9, [1.0, 2.0], [1.1, 2.2])
        path = tmp_path / "scatter.csv"
        res.write_scatter_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "estimated_ms,measured_ms"
        assert lines[1] == "1.0,1.1"


class TestProfiling:
    def test_zero_reps_rejected(self):
        spec = tiny_spec()
        graph = build_metagraph(spec, seed=0)
        net = ControllerNet(spec, seed=0)
        with pytest.raises(ValueError, match="reps"):
            profile_modules(graph, net, warmup=1, reps=0)

    def test_profile_produces_full_table(self):
        spec = tiny_spec()
        graph = build_metagraph(spec, seed=0, dtype=np.float32)
        net = ControllerNet(spec, seed=0, dtype=np.float32)
        table = profile_modules(graph, net, warmup=2, reps=30)
        table.validate_for(spec)
        assert all(e.mean_ms > 0 for e in table.entries.values())
        assert all(e.samples >= 27 for e in table.entries.values())

    def test_repeat_profiles_agree(self):
        spec = tiny_spec()
        graph = build_metagraph(spec, seed=0, dtype=np.float32)
        net = ControllerNet(spec, seed=0, dtype=np.float32)
        a = profile_modules(graph, net, warmup=3, reps=40)
        b = profile_modules(graph, net, warmup=3, reps=40)
        for key, ea in a.entries.items():
            eb = b.entries[key]
            spread = 3.0 * (max(ea.std_ms, eb.std_ms) / np.sqrt(ea.samples)) + 0.3 * max(ea.mean_ms, eb.mean_ms)
            assert abs(ea.mean_ms - eb.mean_ms) <= max(spread, 0.05), key

    def test_heavier_mbconv_costs_more(self):
        # measured on the build machine: a 5F-6K entry should exceed 3F-3K in the same cell
        spec = MetaGraphSpec.build(
            [16, 16], [1], 16, 2,
            kinds=("MBConv-3F-3K", "MBConv-5F-6K"), input_channels=1, input_size=32,
        )
        graph = build_metagraph(spec, seed=0, dtype=np.float32)
        net = ControllerNet(spec, seed=0, dtype=np.float32)
        table = profile_modules(graph, net, warmup=5, reps=60)
        assert table.entries[(0, "MBConv-5F-6K")].mean_ms > table.entries[(0, "MBConv-3F-3K")].mean_ms
