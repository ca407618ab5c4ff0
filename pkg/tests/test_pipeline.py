import datetime as dt
import json
from collections import Counter

import pytest

from autoct import cli, pipeline
from autoct.domain import TrialRecord
from autoct.pipeline import (
    ConfigError,
    CorruptRun,
    parse_config,
    render_shap_svg,
    stratified_sample,
)

from scenario import PLANTED


def records_of(labels):
    return [
        TrialRecord(nct_id=f"NCT{i:05d}", label=y, start_date=dt.date(2010, 1, 1))
        for i, y in enumerate(labels)
    ]


class TestStratifiedSample:
    def test_exact_proportions(self):
        records = records_of([1] * 600 + [0] * 400)
        sample = stratified_sample(records, 100, seed=3)
        counts = Counter(r.label for r in sample)
        assert counts == {1: 60, 0: 40}

    def test_remainder_tie_goes_to_lower_class(self):
        records = records_of([0, 0, 1, 1])
        sample = stratified_sample(records, 3, seed=3)
        counts = Counter(r.label for r in sample)
        assert counts == {0: 2, 1: 1}

    def test_same_seed_identical(self):
        records = records_of([0, 1] * 50)
        a = stratified_sample(records, 20, seed=9)
        b = stratified_sample(records, 20, seed=9)
        assert a == b

    def test_different_seed_differs(self):
        records = records_of([0, 1] * 200)
        a = stratified_sample(records, 40, seed=1)
        b = stratified_sample(records, 40, seed=2)
        assert a != b

    def test_quotas_never_exceed_class_sizes(self):
        # Largest-remainder quotas are bounded by the class counts whenever
        # n <= len(records), so sampling never raises across random shapes.
        import random

        rng = random.Random(4)
        for _ in range(200):
            n_pos, n_neg = rng.randrange(1, 40), rng.randrange(1, 40)
            records = records_of([1] * n_pos + [0] * n_neg)
            n = rng.randrange(1, len(records) + 1)
            sample = stratified_sample(records, n, seed=rng.randrange(1000))
            assert len(sample) == n


    def test_oversample_rejected(self):
        with pytest.raises(ConfigError):
            stratified_sample(records_of([0, 1]), 3, seed=0)


class TestConfig:
    def test_ini_round_trip(self, tmp_path, scenario_env):
        config = scenario_env.make_config(tmp_path / "out")
        config.write_ini(str(tmp_path / "c.ini"))
        parsed = parse_config(str(tmp_path / "c.ini"))
        assert parsed == config

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            parse_config("/nonexistent/config.ini")

    def test_missing_corpus_path_rejected_before_run_dir(self, tmp_path, scenario_env):
        config = scenario_env.make_config(tmp_path / "out")
        config.pubmed_index = str(tmp_path / "missing_index")
        with pytest.raises(ConfigError):
            pipeline.run(config)
        assert not (tmp_path / "out").exists()

    def test_unknown_backend_rejected(self, tmp_path, scenario_env):
        config = scenario_env.make_config(tmp_path / "out")
        config.llm_backend = "imaginary"
        with pytest.raises(ConfigError):
            config.validate_paths()


class TestEndToEnd:
    def test_recorded_run_reaches_planted_separator(self, scenario_env):
        report = scenario_env.record_report
        assert report.best["validation"]["roc_auc"] == 1.0
        assert report.best["test"]["roc_auc"] == 1.0
        tree = json.loads((scenario_env.record_dir / "tree.json").read_text())
        winners = [n for n in tree["nodes"] if n["score"] == 1.0]
        assert winners and min(w["id"] for w in winners) <= 3

    def test_planted_feature_is_top_importance(self, scenario_env):
        importances = scenario_env.record_report.feature_importances
        assert next(iter(importances)) == PLANTED

    def test_replay_is_deterministic_and_offline(self, scenario_env, no_network, tmp_path):
        report_a = pipeline.run(scenario_env.make_config(tmp_path / "a"))
        report_b = pipeline.run(scenario_env.make_config(tmp_path / "b"))
        assert report_a.llm_calls["cache_misses"] == 0
        assert report_b.llm_calls["cache_misses"] == 0
        for name in ("tree.json", "report.json", "report.txt", "scores_valid.csv", "scores_test.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        csvs_a = sorted(p.name for p in (tmp_path / "a" / "features").glob("*.csv"))
        csvs_b = sorted(p.name for p in (tmp_path / "b" / "features").glob("*.csv"))
        assert csvs_a == csvs_b
        for name in csvs_a:
            assert (tmp_path / "a" / "features" / name).read_bytes() == (
                tmp_path / "b" / "features" / name
            ).read_bytes()

    def test_kill_and_resume_matches_uninterrupted(self, scenario_env, no_network, tmp_path):
        control = pipeline.run(scenario_env.make_config(tmp_path / "control"))

        class Killed(Exception):
            pass

        def killer(tree):
            if tree.rollouts_done == 1:
                raise Killed()

        config = scenario_env.make_config(tmp_path / "victim")
        with pytest.raises(Killed):
            pipeline.run(config, on_rollout=killer)
        assert (tmp_path / "victim" / "tree.json").exists()
        assert not (tmp_path / "victim" / "report.json").exists()
        pipeline.run(config, resume=True)
        assert (tmp_path / "victim" / "report.json").read_bytes() == (
            tmp_path / "control" / "report.json"
        ).read_bytes()
        assert (tmp_path / "victim" / "tree.json").read_bytes() == (
            tmp_path / "control" / "tree.json"
        ).read_bytes()

    def test_rerun_without_resume_flag_rejected(self, scenario_env, no_network, tmp_path):
        config = scenario_env.make_config(tmp_path / "once")
        pipeline.run(config)
        with pytest.raises(ConfigError, match="resume"):
            pipeline.run(config)

    def test_no_leakage_in_tool_log(self, scenario_env):
        entries = [
            json.loads(line)
            for line in (scenario_env.record_dir / "tool_log.jsonl").read_text().splitlines()
        ]
        assert entries
        assert all(e["violations"] == 0 for e in entries)
        for e in entries:
            if e["bypassed_cutoff"]:
                continue
            cutoff = e["cutoff"]
            assert all(d < cutoff for d in e["returned_dates"])

    def test_search_phase_never_touches_test_trials(self, scenario_env):
        test_ids = {
            line.split(",")[0]
            for line in (scenario_env.record_dir / "samples" / "test.csv").read_text().splitlines()[1:]
        }
        entries = [
            json.loads(line)
            for line in (scenario_env.record_dir / "tool_log.jsonl").read_text().splitlines()
        ]
        search_subjects = {e["subject_nct_id"] for e in entries if e["phase"] == "search"}
        test_subjects = {e["subject_nct_id"] for e in entries if e["phase"] == "test"}
        assert search_subjects.isdisjoint(test_ids)
        assert test_subjects <= test_ids and test_subjects

    def test_metrics_recomputable_from_artifacts(self, scenario_env):
        from autoct.modeling import f1, pr_auc, roc_auc

        report = json.loads((scenario_env.record_dir / "report.json").read_text())
        for split, csv_name in (("validation", "scores_valid.csv"), ("test", "scores_test.csv")):
            rows = (scenario_env.record_dir / csv_name).read_text().splitlines()[1:]
            labels = [int(r.split(",")[1]) for r in rows]
            probs = [float(r.split(",")[2]) for r in rows]
            assert abs(roc_auc(probs, labels) - report["best"][split]["roc_auc"]) <= 1e-12
            assert abs(pr_auc(probs, labels) - report["best"][split]["pr_auc"]) <= 1e-12
            assert abs(f1(probs, labels) - report["best"][split]["f1"]) <= 1e-12

    def test_shap_local_accuracy_in_report(self, scenario_env):
        report = json.loads((scenario_env.record_dir / "report.json").read_text())
        assert report["shap"]
        for entry in report["shap"][:10]:
            assert 0.0 <= entry["probability"] <= 1.0
            assert entry["contributions"]


class TestReportCommand:
    def test_report_twice_byte_identical(self, scenario_env):
        a = pipeline.report(str(scenario_env.record_dir))
        b = pipeline.report(str(scenario_env.record_dir))
        assert a == b

    def test_report_lists_planted_feature_first(self, scenario_env):
        lines = pipeline.report(str(scenario_env.record_dir)).splitlines()
        first_importance = lines[lines.index("feature importances (selected model):") + 1]
        assert PLANTED in first_importance

    def test_trial_svg_emitted(self, scenario_env):
        report = json.loads((scenario_env.record_dir / "report.json").read_text())
        nct = report["shap"][0]["nct_id"]
        text = pipeline.report(str(scenario_env.record_dir), trial=nct)
        svg_path = scenario_env.record_dir / f"shap_{nct}.svg"
        assert svg_path.exists()
        content = svg_path.read_text()
        assert content.startswith("<svg") and nct in content
        again = pipeline.report(str(scenario_env.record_dir), trial=nct)
        assert svg_path.read_text() == content

    def test_unknown_trial_rejected(self, scenario_env):
        with pytest.raises(CorruptRun):
            pipeline.report(str(scenario_env.record_dir), trial="NCT0000000")

    def test_checkpointed_run_renders_progress(self, scenario_env, no_network, tmp_path):
        class Killed(Exception):
            pass

        def killer(tree):
            if tree.rollouts_done == 1:
                raise Killed()

        config = scenario_env.make_config(tmp_path / "partial")
        with pytest.raises(Killed):
            pipeline.run(config, on_rollout=killer)
        text = pipeline.report(str(tmp_path / "partial"))
        assert "run in progress" in text
        assert "rollouts done: 1" in text

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(CorruptRun):
            pipeline.report(str(tmp_path))

    def test_newer_format_version_rejected(self, scenario_env, tmp_path):
        import shutil

        run_dir = tmp_path / "newer"
        shutil.copytree(scenario_env.record_dir, run_dir)
        doc = json.loads((run_dir / "report.json").read_text())
        doc["format_version"] = 99
        (run_dir / "report.json").write_text(json.dumps(doc))
        with pytest.raises(CorruptRun, match="newer"):
            pipeline.report(str(run_dir))

    def test_tampered_plan_store_detected(self, scenario_env, tmp_path):
        import shutil

        run_dir = tmp_path / "tampered"
        shutil.copytree(scenario_env.record_dir, run_dir)
        victim = sorted((run_dir / "plans").glob("*.json"))[0]
        doc = json.loads(victim.read_text())
        next(iter(doc.values()))["feature_idea"] = "tampered"
        victim.write_text(json.dumps(doc))
        with pytest.raises(CorruptRun, match="hash mismatch"):
            pipeline.report(str(run_dir))

    def test_svg_renders_negative_and_positive_bars(self):
        entry = {
            "nct_id": "NCT123",
            "probability": 0.25,
            "contributions": [["good_feature", 0.8], ["bad_feature", -0.5]],
        }
        svg = render_shap_svg(entry)
        assert svg.count("<rect") == 2
        assert "good_feature" in svg and "bad_feature" in svg


class TestCli:
    def test_run_and_report_commands(self, scenario_env, no_network, tmp_path, capsys):
        config = scenario_env.make_config(tmp_path / "cli_run")
        config_path = tmp_path / "config.ini"
        config.write_ini(str(config_path))
        assert cli.main(["run", "--config", str(config_path)]) == 0
        out = capsys.readouterr().out
        assert "test roc_auc=1.0000" in out
        assert cli.main(["report", "--run", str(tmp_path / "cli_run")]) == 0
        assert "feature importances" in capsys.readouterr().out

    def test_config_error_exit_code_2_and_no_run_dir(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[data]\ntask_description = x\n")
        assert cli.main(["run", "--config", str(bad)]) == 2
        assert cli.main(["run", "--config", str(tmp_path / "missing.ini")]) == 2

    def test_replay_cache_miss_is_backend_error_exit_3(self, scenario_env, tmp_path):
        config = scenario_env.make_config(tmp_path / "missruns")
        config.cache_dir = str(tmp_path / "empty-cache")
        config_path = tmp_path / "config.ini"
        config.write_ini(str(config_path))
        assert cli.main(["run", "--config", str(config_path)]) == 3

    def test_ingest_command(self, tmp_path, capsys):
        corpus = tmp_path / "c.jsonl"
        corpus.write_text(
            '{"doc_id": "a", "source": "pubmed", "title": "t", "body": "b", "date": "2001-01-01"}\n'
        )
        assert cli.main(["ingest", "--corpus", str(corpus), "--out", str(tmp_path / "idx")]) == 0
        assert "ingested 1 documents" in capsys.readouterr().out
        assert cli.main(["ingest", "--corpus", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "idx2")]) == 2

    def test_cache_verify_run_dir(self, scenario_env, capsys):
        assert cli.main(["cache", "verify", str(scenario_env.record_dir)]) == 0
        assert "cache ok" in capsys.readouterr().out

    def test_cache_verify_bare_cache_dir(self, scenario_env, capsys):
        assert cli.main(["cache", "verify", str(scenario_env.cache_dir)]) == 0
        assert "cache ok" in capsys.readouterr().out

    def test_cache_verify_detects_corruption(self, scenario_env, tmp_path, capsys):
        import shutil

        cache_copy = tmp_path / "cache"
        shutil.copytree(scenario_env.cache_dir, cache_copy)
        victim = sorted(cache_copy.glob("*/*.json"))[0]
        doc = json.loads(victim.read_text())
        doc["request"]["system"] = "tampered"
        victim.write_text(json.dumps(doc))
        assert cli.main(["cache", "verify", str(cache_copy)]) == 1

    def test_resume_completed_run_is_stable(self, scenario_env, no_network, tmp_path):
        config = scenario_env.make_config(tmp_path / "done")
        config_path = tmp_path / "config.ini"
        config.write_ini(str(config_path))
        assert cli.main(["run", "--config", str(config_path)]) == 0
        before = (tmp_path / "done" / "report.json").read_bytes()
        assert cli.main(["run", "--config", str(config_path), "--resume", str(tmp_path / "done")]) == 0
        assert (tmp_path / "done" / "report.json").read_bytes() == before


class TestBackendFailure:
    def test_midrun_death_leaves_resumable_checkpoint(self, scenario_env, tmp_path):
        from autoct.llm import BackendError, LlmBackend

        class FailingAfter(LlmBackend):
            def __init__(self, inner, limit):
                self.inner, self.limit, self.calls = inner, limit, 0

            def complete(self, request):
                self.calls += 1
                if self.calls > self.limit:
                    raise BackendError("endpoint died")
                return self.inner.complete(request)

        config = scenario_env.make_config(tmp_path / "flaky")
        config.cache_dir = str(tmp_path / "flaky-cache")
        with pytest.raises(BackendError):
            pipeline.run(config, backend=FailingAfter(scenario_env.backend(), 1500))
        tree = json.loads((tmp_path / "flaky" / "tree.json").read_text())
        assert tree["rollouts_done"] >= 1  # partial results retained
        assert not (tmp_path / "flaky" / "report.json").exists()
        pipeline.run(config, backend=scenario_env.backend(), resume=True)
        assert (tmp_path / "flaky" / "report.json").read_bytes() == (
            scenario_env.record_dir / "report.json"
        ).read_bytes()


class TestLock:
    def test_live_lock_rejected(self, scenario_env, tmp_path):
        config = scenario_env.make_config(tmp_path / "locked")
        (tmp_path / "locked").mkdir()
        (tmp_path / "locked" / "lock").write_text("1")  # pid 1 is always alive
        with pytest.raises(pipeline.LockError):
            pipeline.run(config)

    def test_stale_lock_reclaimed(self, scenario_env, no_network, tmp_path):
        config = scenario_env.make_config(tmp_path / "stale")
        (tmp_path / "stale").mkdir()
        (tmp_path / "stale" / "lock").write_text("999999999")
        report = pipeline.run(config)
        assert report.best["test"]["roc_auc"] == 1.0
