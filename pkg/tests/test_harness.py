"""Tests for experiment configuration, the roster, and bench orchestration."""

import csv

import numpy as np
import pytest

from twinbelt import baseline, controller, harness, massmodel


def _tiny_config(tmp_path, text=""):
    path = tmp_path / "cfg.ini"
    path.write_text(text)
    return harness.load_config(str(path))


class TestConfig:

    def test_defaults_without_file(self):
        cfg = harness.load_config()
        assert cfg == harness.ExperimentConfig()

    def test_hash_is_deterministic(self):
        assert (harness.load_config().config_hash()
                == harness.load_config().config_hash())

    def test_default_text_roundtrip(self, tmp_path):
        cfg = harness.load_config()
        path = tmp_path / "defaults.ini"
        path.write_text(harness.default_config_text())
        loaded = harness.load_config(str(path))
        assert loaded == cfg
        assert loaded.config_hash() == cfg.config_hash()

    def test_hash_ignores_artifact_paths(self, tmp_path):
        cfg = _tiny_config(tmp_path, "[paths]\nout = elsewhere\n")
        assert cfg.config_hash() == harness.ExperimentConfig().config_hash()

    def test_override_changes_hash(self, tmp_path):
        cfg = _tiny_config(tmp_path, "[roster]\nrepetitions = 2\n")
        assert cfg.roster.repetitions == 2
        assert cfg.config_hash() != harness.ExperimentConfig().config_hash()

    def test_float_tuple_coercion(self, tmp_path):
        cfg = _tiny_config(tmp_path, "[sim]\ngap_range = 0.05, 0.2\n")
        assert cfg.sim.gap_range == (0.05, 0.2)

    def test_int_tuple_coercion(self, tmp_path):
        cfg = _tiny_config(tmp_path, "[estimator]\nhidden = 64, 32\n")
        assert cfg.estimator.hidden == (64, 32)
        assert all(isinstance(h, int) for h in cfg.estimator.hidden)

    def test_unknown_section_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="unknown config section"):
            _tiny_config(tmp_path, "[typo]\nx = 1\n")

    def test_unknown_key_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="unknown key"):
            _tiny_config(tmp_path, "[roster]\nbogus = 1\n")

    def test_missing_file_rejected(self):
        with pytest.raises(FileNotFoundError):
            harness.load_config("/nonexistent/cfg.ini")

    def test_training_config_views(self):
        cfg = harness.ExperimentConfig()
        assert cfg.estimator.training_config().epochs == cfg.estimator.epochs
        assert (cfg.baseline.training_config().hidden
                == cfg.baseline.hidden)

    def test_artifact_paths_join_out_dir(self, tmp_path):
        cfg = _tiny_config(tmp_path, "[paths]\nout = results\n")
        assert cfg.artifact("force_map") == "results/force_map.csv"


@pytest.fixture(scope="module")
def roster():
    return harness.make_roster(harness.ExperimentConfig())


class TestRoster:

    def test_names(self, roster):
        assert set(roster) == {"A", "B", "C", "D"}

    def test_only_d_is_hazardous(self, roster):
        for name, dist in roster.items():
            hazard = massmodel.classify_hazard(dist)
            assert hazard.hazardous == (name == "D"), name

    def test_b_is_a_shifted_one_layer(self, roster):
        np.testing.assert_allclose(
            roster["B"].voxel_mass, np.roll(roster["A"].voxel_mass, 1, axis=0))

    def test_d_concentrates_in_the_near_end_volume(self, roster):
        hazard = massmodel.classify_hazard(roster["D"])
        assert hazard.triggering_volume == "U1"
        assert hazard.mass_fraction_in_volume >= massmodel.HAZARD_FRACTION

    def test_c_differs_from_a(self, roster):
        assert not np.allclose(roster["A"].voxel_mass,
                               roster["C"].voxel_mass)

    def test_deterministic(self, roster):
        again = harness.make_roster(harness.ExperimentConfig())
        for name in roster:
            np.testing.assert_array_equal(roster[name].voxel_mass,
                                          again[name].voxel_mass)


class TestRandomBatch:

    def test_count_and_hazard_status(self):
        boxes = harness.random_nonhazardous_batch(6, seed=7)
        assert len(boxes) == 6
        for dist in boxes:
            assert not massmodel.classify_hazard(dist).hazardous

    def test_seed_determinism(self):
        a = harness.random_nonhazardous_batch(3, seed=7)
        b = harness.random_nonhazardous_batch(3, seed=7)
        c = harness.random_nonhazardous_batch(3, seed=8)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.voxel_mass, y.voxel_mass)
        assert not np.allclose(a[0].voxel_mass, c[0].voxel_mass)


class TestEpisodeSetup:

    def test_reproducible(self):
        a = harness._episode_setup(0, harness.METHOD_PHYSICS, "A", 0)
        b = harness._episode_setup(0, harness.METHOD_PHYSICS, "A", 0)
        assert a == b

    def test_identity_changes_seed(self):
        seeds = {harness._episode_setup(0, method, dist, rep)[0]
                 for method in (harness.METHOD_PHYSICS,
                                harness.METHOD_BLACKBOX)
                 for dist in ("A", "B", "C", "D")
                 for rep in range(3)}
        assert len(seeds) == 2 * 4 * 3

    def test_pose_jitter_within_bounds(self):
        for rep in range(20):
            _, (x, y, theta) = harness._episode_setup(
                1, harness.METHOD_PHYSICS, harness.RANDOM_BATCH, rep)
            assert abs(x) <= 0.02 and abs(y) <= 0.01 and theta == 0.0


class TestBalanceBand:

    def test_empty(self):
        assert harness.balance_band(()) == ((), (), (), (), ())

    def test_known_values(self):
        # three traces of unequal length; step 1 has values (2, 4) ->
        # median 3, std 1; step 2 only the longest trace survives
        traces = ((1.0, 2.0, 5.0), (3.0, 4.0), (5.0,))
        steps, alive, med, lo, hi = harness.balance_band(traces)
        assert steps == (0, 1, 2)
        assert alive == (3, 2, 1)
        assert med[0] == 3.0 and med[1] == 3.0 and med[2] == 5.0
        assert hi[1] - med[1] == pytest.approx(1.0)
        assert med[1] - lo[1] == pytest.approx(1.0)
        assert lo[2] == hi[2] == 5.0


def _record(method=harness.METHOD_PHYSICS, dist="A", rep=0, outcome="Success",
            steps=10, err=0.01, reason="", adapt=0.0):
    return harness.EpisodeRecord(
        method=method, distribution=dist, repetition=rep, seed=rep,
        outcome=outcome, steps=steps, max_balance_error=err, reason=reason,
        wall_time=0.5, adapt_time=adapt)


def _synthetic_report(cells, records, traces=()):
    return harness.BenchReport(cells=tuple(cells), records=tuple(records),
                               balance_traces=tuple(traces),
                               config_hash="cafef00dcafef00d", bench_seed=0)


class TestAggregate:

    def test_cell_statistics(self):
        records = [_record(outcome="Success", steps=10, err=0.01),
                   _record(rep=1, outcome="Failure", steps=30, err=0.03),
                   _record(rep=2, outcome="AbortedHazard", steps=0, err=0.0)]
        cell = harness._aggregate(harness.METHOD_PHYSICS, "A", records)
        assert cell.episodes == 3
        assert cell.success_ratio == pytest.approx(1.0 / 3.0)
        assert cell.abort_count == 1
        assert cell.avg_steps == pytest.approx(40.0 / 3.0)
        assert cell.max_balance_error == 0.03

    def test_ratio_bounds_enforced(self):
        with pytest.raises(ValueError):
            harness.BenchCell(method="m", distribution="A", episodes=1,
                              success_ratio=1.5, abort_count=0, avg_steps=1.0,
                              max_balance_error=0.0, avg_wall_time=0.0,
                              avg_adapt_time=0.0)


class TestOrderingFlags:

    def _cell(self, method, dist, ratio=1.0, aborts=0, n=5):
        return harness.BenchCell(
            method=method, distribution=dist, episodes=n,
            success_ratio=ratio, abort_count=aborts, avg_steps=1.0,
            max_balance_error=0.0, avg_wall_time=0.0, avg_adapt_time=0.0)

    def test_clean_report_has_no_flags(self):
        report = _synthetic_report(
            [self._cell(harness.METHOD_PHYSICS, "C", ratio=0.8),
             self._cell(harness.METHOD_BLACKBOX, "C", ratio=0.2),
             self._cell(harness.METHOD_PHYSICS, "D", ratio=0.0, aborts=5)],
            [])
        assert harness.ordering_flags(report) == ()

    def test_physics_behind_on_c_is_flagged(self):
        report = _synthetic_report(
            [self._cell(harness.METHOD_PHYSICS, "C", ratio=0.2),
             self._cell(harness.METHOD_BLACKBOX, "C", ratio=0.8)],
            [])
        flags = harness.ordering_flags(report)
        assert len(flags) == 1 and "C" in flags[0]

    def test_unaborted_d_episode_is_flagged(self):
        report = _synthetic_report(
            [self._cell(harness.METHOD_PHYSICS, "D", ratio=0.0, aborts=3)],
            [])
        flags = harness.ordering_flags(report)
        assert len(flags) == 1 and "abort" in flags[0]


def _read_csv(path):
    comments, rows = [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                comments.append(line.strip())
            else:
                rows.append(line)
    return comments, list(csv.reader(rows))


class TestReportFiles:

    @pytest.fixture()
    def report(self):
        records = [
            _record(outcome="Success", steps=10),
            _record(rep=1, outcome="Failure", steps=30,
                    reason="support lost"),
            _record(method=harness.METHOD_BLACKBOX, outcome="Success",
                    steps=20, adapt=0.2),
            _record(dist=harness.RANDOM_BATCH, outcome="Success", steps=3),
        ]
        cells = [harness._aggregate(harness.METHOD_PHYSICS, "A", records[:2]),
                 harness._aggregate(harness.METHOD_BLACKBOX, "A",
                                    records[2:3]),
                 harness._aggregate(harness.METHOD_PHYSICS,
                                    harness.RANDOM_BATCH, records[3:])]
        return _synthetic_report(cells, records,
                                 traces=((0.01, 0.02), (0.03,)))

    def test_episode_rows_ship_every_record(self, tmp_path, report):
        path = tmp_path / "episodes.csv"
        harness.write_episode_csv(path, report)
        comments, rows = _read_csv(path)
        assert any("config_hash=cafef00dcafef00d" in c for c in comments)
        assert any("bench_seed=0" in c for c in comments)
        assert len(rows) == 1 + len(report.records)
        assert rows[0][:3] == ["method", "distribution", "repetition"]

    def test_summary_ratios_recompute_from_episode_rows(self, tmp_path,
                                                        report):
        episodes = tmp_path / "episodes.csv"
        summary = tmp_path / "summary.csv"
        harness.write_episode_csv(episodes, report)
        harness.write_summary_csv(summary, report)
        _, erows = _read_csv(episodes)
        _, srows = _read_csv(summary)
        eheader, srows_header = erows[0], srows[0]
        for srow in srows[1:]:
            cell = dict(zip(srows_header, srow))
            matching = [dict(zip(eheader, row)) for row in erows[1:]
                        if row[0] == cell["method"]
                        and row[1] == cell["distribution"]]
            assert len(matching) == int(cell["episodes"])
            successes = sum(r["outcome"] == controller.OUTCOME_SUCCESS
                            for r in matching)
            assert float(cell["success_ratio"]) == successes / len(matching)

    def test_summary_marks_online_adaptation(self, tmp_path, report):
        path = tmp_path / "summary.csv"
        harness.write_summary_csv(path, report)
        _, rows = _read_csv(path)
        header = rows[0]
        col = header.index("online_adaptation")
        by_method = {row[0]: row[col] for row in rows[1:]}
        assert by_method[harness.METHOD_PHYSICS] == "no"
        assert by_method[harness.METHOD_BLACKBOX] == "yes"

    def test_balance_band_file(self, tmp_path, report):
        path = tmp_path / "band.csv"
        harness.write_balance_band_csv(path, report)
        comments, rows = _read_csv(path)
        assert any("episodes=2" in c for c in comments)
        assert rows[0] == ["step", "episodes_running",
                           "median_balance_error", "band_lo", "band_hi"]
        assert len(rows) == 3      # header + longest trace (2 steps)
        assert int(rows[1][1]) == 2 and int(rows[2][1]) == 1

    def test_writes_are_byte_deterministic(self, tmp_path, report):
        for writer in (harness.write_episode_csv, harness.write_summary_csv,
                       harness.write_balance_band_csv):
            a, b = tmp_path / "a.csv", tmp_path / "b.csv"
            writer(a, report)
            writer(b, report)
            assert a.read_bytes() == b.read_bytes()

    def test_table_renders_all_cells(self, report):
        table = harness.format_bench_table(report)
        assert "cafef00dcafef00d" in table
        for cell in report.cells:
            assert cell.distribution in table
        assert "success" in table and "adapt [s]" in table


@pytest.fixture(scope="module")
def small_w_model(estimator_bundle, force_map):
    """A quick black-box model trained on roster box A."""
    _, est_model, _ = estimator_bundle
    fmap = force_map
    box_a = harness.make_roster(harness.ExperimentConfig())["A"]
    data = baseline.collect_random_transitions(box_a, 500, seed=1)
    ctrl, _ = baseline.collect_controller_transitions(
        box_a, est_model, fmap, 2, seed=100)
    model, _ = baseline.train_blackbox(
        data.concat(ctrl),
        baseline.BaselineTrainingConfig(hidden=(32,), epochs=15))
    return model


@pytest.fixture(scope="module")
def small_bench(estimator_bundle, force_map, small_w_model, tmp_path_factory):
    _, est_model, _ = estimator_bundle
    cfg_path = tmp_path_factory.mktemp("bench") / "cfg.ini"
    cfg_path.write_text("[roster]\nrepetitions = 1\nrandom_batch = 2\n")
    cfg = harness.load_config(str(cfg_path))
    report = harness.run_bench(cfg, est_model, force_map, small_w_model,
                               workers=1)
    return cfg, report


class TestRunBench:

    def test_row_and_cell_counts(self, small_bench):
        cfg, report = small_bench
        assert len(report.records) == 2 * 4 * 1 + 2
        assert len(report.cells) == 2 * 4 + 1
        assert len(report.balance_traces) == 2

    def test_every_method_distribution_pair_present(self, small_bench):
        _, report = small_bench
        keys = {(c.method, c.distribution) for c in report.cells}
        for dist in harness.FIXED_DISTRIBUTIONS:
            assert (harness.METHOD_PHYSICS, dist) in keys
            assert (harness.METHOD_BLACKBOX, dist) in keys
        assert (harness.METHOD_PHYSICS, harness.RANDOM_BATCH) in keys

    def test_cells_recompute_from_records(self, small_bench):
        _, report = small_bench
        for cell in report.cells:
            group = [r for r in report.records
                     if r.method == cell.method
                     and r.distribution == cell.distribution]
            assert cell == harness._aggregate(cell.method, cell.distribution,
                                              group)

    def test_physics_aborts_on_the_hazardous_box(self, small_bench):
        _, report = small_bench
        for record in report.records:
            if (record.method == harness.METHOD_PHYSICS
                    and record.distribution == "D"):
                assert record.outcome == controller.OUTCOME_ABORTED

    def test_blackbox_never_aborts(self, small_bench):
        _, report = small_bench
        for record in report.records:
            if record.method == harness.METHOD_BLACKBOX:
                assert record.outcome != controller.OUTCOME_ABORTED

    def test_adapt_time_only_for_blackbox(self, small_bench):
        _, report = small_bench
        for record in report.records:
            if record.method == harness.METHOD_PHYSICS:
                assert record.adapt_time == 0.0

    def test_report_carries_config_identity(self, small_bench):
        cfg, report = small_bench
        assert report.config_hash == cfg.config_hash()
        assert report.bench_seed == cfg.roster.bench_seed

    def test_workers_do_not_change_results(self, small_bench,
                                           estimator_bundle, force_map,
                                           small_w_model):
        cfg, serial = small_bench
        _, est_model, _ = estimator_bundle
        fmap = force_map
        parallel = harness.run_bench(cfg, est_model, fmap, small_w_model,
                                     workers=2)

        def decisions(report):
            return [(r.method, r.distribution, r.repetition, r.seed,
                     r.outcome, r.steps, r.max_balance_error, r.reason)
                    for r in report.records]

        assert decisions(parallel) == decisions(serial)
        assert parallel.balance_traces == serial.balance_traces

    def test_shared_model_is_not_mutated_by_adaptation(
            self, small_bench, estimator_bundle, force_map, small_w_model):
        # run_bench adapts a copy per episode; the caller's model object must
        # come back bit-identical
        before = [w.copy() for w in small_w_model.net.weights]
        cfg, _ = small_bench
        _, est_model, _ = estimator_bundle
        fmap = force_map
        harness.run_bench(cfg, est_model, fmap, small_w_model, workers=1)
        for w_before, w_after in zip(before, small_w_model.net.weights):
            np.testing.assert_array_equal(w_before, w_after)
