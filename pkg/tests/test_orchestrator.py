"""End-to-end tests for the runner, pipeline, hashing, and self-test."""

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from testutil import PKG_ROOT
from repro.diagnoser import load_syscall_catalog, parse_syscall_trace
from repro.interposer import InterposerBuildError
from repro.orchestrator import (
    EXIT_CHILD_FAILURE,
    EXIT_DIVERGENCE,
    EXIT_NOT_REPRODUCIBLE,
    EXIT_OK,
    EXIT_USAGE,
    RunConfig,
    UsageError,
    diagnose_files,
    hash_paths,
    render_timing,
    run_command,
    run_pipeline,
    run_selftest,
    timing_report,
    verify_artifacts,
)
from repro.verifier import compare_runs, load_run_artifact, write_run_artifact

DATA = Path(__file__).parent / "data"
CHILD = (sys.executable, "-S", "-m", "repro", "selftest-child")


@pytest.fixture
def child_env(shim_path, monkeypatch):
    """Make the package importable for -S children the orchestrator spawns."""
    monkeypatch.setenv("PYTHONPATH", str(PKG_ROOT))
    return shim_path


def consumer_cmd(pattern, out=True):
    cmd = [*CHILD, "--pattern", pattern]
    if out:
        cmd += ["--out", "{artifact_dir}"]
    return tuple(cmd)


def write_artifact(path, predictions, losses=(1.5, 1.25), wall=2.5):
    n = len(predictions)
    write_run_artifact(
        path,
        task="classification",
        predictions=list(predictions),
        labels=[i % 3 for i in range(n)],
        losses=list(losses),
        epochs=len(losses),
        wall_seconds=wall,
        command=["toy"],
        started_at="2026-08-23T10:00:00+00:00",
        ended_at="2026-08-23T10:00:02+00:00",
    )
    return path


class TestRunCommand:
    def test_record_then_replay_is_reproducible(self, child_env, tmp_path):
        profiles = tmp_path / "profiles"
        rec = run_command(RunConfig(
            mode="record", profile_dir=profiles,
            command=consumer_cmd("g:24,u:12"),
            artifact_dir=tmp_path / "art-record",
        ))
        assert rec.exit_code == EXIT_OK
        rep = run_command(RunConfig(
            mode="replay", profile_dir=profiles,
            command=consumer_cmd("g:24,u:12"),
            artifact_dir=tmp_path / "art-replay",
        ))
        assert rep.exit_code == EXIT_OK
        report = compare_runs(
            load_run_artifact(tmp_path / "art-record"),
            load_run_artifact(tmp_path / "art-replay"),
        )
        assert report.reproducible

    def test_replay_requires_existing_profile_dir(self, tmp_path):
        with pytest.raises(UsageError, match="existing profile directory"):
            run_command(RunConfig(
                mode="replay", profile_dir=tmp_path / "nowhere",
                command=("true",),
            ))

    def test_replay_never_mutates_the_profile_dir(self, child_env, tmp_path):
        profiles = tmp_path / "profiles"
        run_command(RunConfig(
            mode="record", profile_dir=profiles,
            command=consumer_cmd("g:8,u:8", out=False),
        ))
        before = {p.name: p.read_bytes() for p in sorted(profiles.iterdir())}
        assert before
        rep = run_command(RunConfig(
            mode="replay", profile_dir=profiles,
            command=consumer_cmd("g:8,u:8", out=False),
        ))
        assert rep.exit_code == EXIT_OK
        after = {p.name: p.read_bytes() for p in sorted(profiles.iterdir())}
        assert after == before

    def test_child_failure_maps_to_exit_4(self, child_env, tmp_path):
        result = run_command(RunConfig(
            mode="off", profile_dir=tmp_path / "p",
            command=(sys.executable, "-c", "raise SystemExit(7)"),
        ))
        assert result.child_returncode == 7
        assert result.exit_code == EXIT_CHILD_FAILURE

    def test_divergent_replay_maps_to_exit_3(self, child_env, tmp_path):
        profiles = tmp_path / "profiles"
        run_command(RunConfig(
            mode="record", profile_dir=profiles,
            command=consumer_cmd("g:8", out=False),
        ))
        result = run_command(RunConfig(
            mode="replay", profile_dir=profiles,
            command=consumer_cmd("g:16", out=False),
        ))
        assert result.exit_code == EXIT_DIVERGENCE

    def test_empty_command_rejected(self, tmp_path):
        with pytest.raises(UsageError, match="no command"):
            run_command(RunConfig(mode="off", profile_dir=tmp_path, command=()))

    def test_unknown_mode_rejected(self, tmp_path):
        with pytest.raises(UsageError, match="unknown mode"):
            run_command(RunConfig(mode="blend", profile_dir=tmp_path,
                                  command=("true",)))

    def test_artifact_dir_exported_and_substituted(self, child_env, tmp_path):
        art = tmp_path / "artifacts"
        script = ("import os, pathlib, sys; "
                  "d = os.environ['REPRO_ARTIFACT_DIR']; "
                  "pathlib.Path(d, 'env.txt').write_text(d); "
                  "pathlib.Path(sys.argv[1], 'arg.txt').write_text(sys.argv[1])")
        result = run_command(RunConfig(
            mode="off", profile_dir=tmp_path / "p",
            command=(sys.executable, "-c", script, "{artifact_dir}"),
            artifact_dir=art,
        ))
        assert result.exit_code == EXIT_OK
        assert (art / "env.txt").read_text() == str(art)
        assert (art / "arg.txt").read_text() == str(art)

    def test_builtin_trace_in_record_mode(self, child_env, tmp_path, capsys):
        result = run_command(RunConfig(
            mode="record", profile_dir=tmp_path / "p",
            command=consumer_cmd("g:16,u:8", out=False),
            trace_enabled=True, tracer="builtin",
        ))
        assert result.exit_code == EXIT_OK
        assert result.trace_path is not None
        parsed = parse_syscall_trace(result.trace_path.read_text(),
                                     load_syscall_catalog())
        rules = {f.matched_rule for f in parsed.findings}
        assert rules == {"getrandom", "urandom-read"}
        assert "request log" in capsys.readouterr().err

    def test_builtin_trace_outside_record_mode_yields_none(self, child_env,
                                                           tmp_path, capsys):
        result = run_command(RunConfig(
            mode="off", profile_dir=tmp_path / "p",
            command=consumer_cmd("g:8", out=False),
            trace_enabled=True, tracer="builtin",
        ))
        assert result.exit_code == EXIT_OK
        assert result.trace_path is None
        assert "record mode" in capsys.readouterr().err


class TestVerifyArtifacts:
    def test_identical_runs_exit_zero(self, tmp_path, capsys):
        a = write_artifact(tmp_path / "a", [0, 1, 2] * 4)
        b = write_artifact(tmp_path / "b", [0, 1, 2] * 4)
        assert verify_artifacts(a, b) == EXIT_OK
        out = capsys.readouterr().out
        assert "verdict: REPRODUCIBLE" in out
        assert "NOT REPRODUCIBLE" not in out

    def test_wall_time_difference_alone_is_reproducible(self, tmp_path):
        a = write_artifact(tmp_path / "a", [0, 1, 2] * 4, wall=1.0)
        b = write_artifact(tmp_path / "b", [0, 1, 2] * 4, wall=9.0)
        assert verify_artifacts(a, b) == EXIT_OK

    def test_differing_runs_exit_one(self, tmp_path, capsys):
        a = write_artifact(tmp_path / "a", [0, 1, 2] * 4)
        b = write_artifact(tmp_path / "b", [0, 1, 2] * 3 + [1, 1, 2])
        assert verify_artifacts(a, b) == EXIT_NOT_REPRODUCIBLE
        assert "NOT REPRODUCIBLE" in capsys.readouterr().out

    def test_json_output_is_parseable(self, tmp_path, capsys):
        a = write_artifact(tmp_path / "a", [0, 1, 2] * 4)
        b = write_artifact(tmp_path / "b", [0, 1, 2] * 3 + [1, 1, 2])
        assert verify_artifacts(a, b, as_json=True) == EXIT_NOT_REPRODUCIBLE
        payload = json.loads(capsys.readouterr().out)
        assert payload["reproducible"] is False
        assert payload["schema_version"] == 1

    def test_missing_artifact_is_usage_error(self, tmp_path, capsys):
        a = write_artifact(tmp_path / "a", [0, 1, 2])
        assert verify_artifacts(a, tmp_path / "missing") == EXIT_USAGE
        assert capsys.readouterr().err


class TestDiagnoseFiles:
    def test_trace_only_fully_mitigable(self, capsys):
        rc = diagnose_files(DATA / "sample_trace.txt")
        assert rc == EXIT_OK
        out = capsys.readouterr().out
        assert "add to interception list" in out

    def test_blocker_profile_exits_one(self, capsys):
        rc = diagnose_files(DATA / "sample_trace.txt",
                            DATA / "sample_cprofile_blocker.txt")
        assert rc == EXIT_NOT_REPRODUCIBLE
        assert "not fully mitigable" in capsys.readouterr().out

    def test_missing_trace_is_usage_error(self, tmp_path, capsys):
        assert diagnose_files(tmp_path / "none.txt") == EXIT_USAGE
        assert "cannot read trace" in capsys.readouterr().err

    def test_invalid_catalog_is_usage_error(self, tmp_path, capsys):
        bad = tmp_path / "catalog.json"
        bad.write_text('{"schema_version": 99}')
        rc = diagnose_files(DATA / "sample_trace.txt",
                            syscall_catalog_path=bad)
        assert rc == EXIT_USAGE
        assert capsys.readouterr().err


class TestHashPaths:
    def test_known_digests(self, tmp_path, capsys):
        empty = tmp_path / "empty.bin"
        empty.write_bytes(b"")
        abc = tmp_path / "abc.txt"
        abc.write_bytes(b"abc")
        assert hash_paths([empty, abc], "sha1") == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == (
            f"sha1:a9993e364706816aba3e25717850c26c9cd0d89d  {abc}"
        )
        assert lines[1] == (
            f"sha1:da39a3ee5e6b4b0d3255bfef95601890afd80709  {empty}"
        )
        assert hash_paths([empty], "sha256") == EXIT_OK
        line = capsys.readouterr().out.strip()
        assert line.startswith(
            "sha256:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        )

    def test_directory_recursion_is_sorted_and_stable(self, tmp_path, capsys):
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "z.txt").write_bytes(b"z")
        (tmp_path / "a.txt").write_bytes(b"a")
        (tmp_path / "m.txt").write_bytes(b"m")
        assert hash_paths([tmp_path]) == EXIT_OK
        first = capsys.readouterr().out
        paths = [line.split("  ", 1)[1] for line in first.splitlines()]
        assert paths == sorted(paths)
        assert len(paths) == 3
        assert hash_paths([tmp_path]) == EXIT_OK
        assert capsys.readouterr().out == first

    def test_missing_path_is_usage_error(self, tmp_path, capsys):
        assert hash_paths([tmp_path / "ghost"]) == EXIT_USAGE
        assert capsys.readouterr().err

    def test_unknown_algorithm_rejected(self, tmp_path):
        with pytest.raises(UsageError, match="algorithm"):
            hash_paths([tmp_path], "md5")


class TestPipeline:
    def test_converges_on_entropy_consumer(self, child_env, tmp_path):
        work = tmp_path / "work"
        lines = []
        rc = run_pipeline(consumer_cmd("g:16,u:8"), work, max_iterations=3,
                          echo=lines.append)
        assert rc == EXIT_OK
        report = json.loads((work / "artifacts" / "report.json").read_text())
        assert report["reproducible"] is True
        assert report["iterations"] == 1
        assert set(report["intercepts"]) == {"getrandom", "urandom-read"}
        assert report["exit_code"] == EXIT_OK
        for tag in ("baseline-a", "baseline-b", "iter-1-record", "iter-1-replay"):
            assert (work / "artifacts" / tag / "eval.json").is_file()
        assert any("REPRODUCIBLE" in line for line in lines)

    def test_deterministic_command_needs_zero_iterations(self, child_env, tmp_path):
        work = tmp_path / "work"
        rc = run_pipeline(consumer_cmd(""), work, max_iterations=2,
                          echo=lambda _line: None)
        assert rc == EXIT_OK
        report = json.loads((work / "artifacts" / "report.json").read_text())
        assert report["reproducible"] is True
        assert report["iterations"] == 0
        assert report["intercepts"] == []

    def test_uncatalogued_entropy_source_is_not_mitigable(self, child_env, tmp_path):
        # The consumer's r-steps read a random device the catalog does not
        # name, so the loop mitigates the incidental getrandom traffic and
        # then stops with nothing left to try.
        work = tmp_path / "work"
        rc = run_pipeline(consumer_cmd("r:8"), work, max_iterations=2,
                          echo=lambda _line: None)
        assert rc == EXIT_NOT_REPRODUCIBLE
        report = json.loads((work / "artifacts" / "report.json").read_text())
        assert report["reproducible"] is False
        assert report["iterations"] == 2
        assert report["intercepts"] == ["getrandom"]
        assert any("no new interceptable sources" in line
                   for line in report["phases"])

    def test_failing_command_stops_with_exit_4(self, child_env, tmp_path):
        work = tmp_path / "work"
        rc = run_pipeline((sys.executable, "-c", "raise SystemExit(9)"),
                          work, max_iterations=1, echo=lambda _line: None)
        assert rc == EXIT_CHILD_FAILURE
        report = json.loads((work / "artifacts" / "report.json").read_text())
        assert report["exit_code"] == EXIT_CHILD_FAILURE
        assert report["reproducible"] is False

    def test_artifactless_command_stops_with_usage_error(self, child_env, tmp_path):
        work = tmp_path / "work"
        rc = run_pipeline((sys.executable, "-c", "pass"), work,
                          max_iterations=1, echo=lambda _line: None)
        assert rc == EXIT_USAGE
        report = json.loads((work / "artifacts" / "report.json").read_text())
        assert report["exit_code"] == EXIT_USAGE

    def test_bad_budget_rejected(self, tmp_path):
        with pytest.raises(UsageError, match="max-iters"):
            run_pipeline(("true",), tmp_path, max_iterations=0)

    def test_empty_command_rejected(self, tmp_path):
        with pytest.raises(UsageError, match="no command"):
            run_pipeline((), tmp_path, max_iterations=1)


class TestSelftest:
    def test_two_trials_pass(self, child_env):
        lines = []
        rc = run_selftest(trials=2, echo=lines.append)
        assert rc == EXIT_OK
        assert lines[-1] == "selftest: PASS (2 trials)"
        assert sum(line.endswith("ok") for line in lines) == 3  # 2 trials + tamper

    def test_unbuildable_shim_fails_cleanly(self, monkeypatch):
        import repro.orchestrator as orch

        def boom():
            raise InterposerBuildError("no compiler anywhere")

        monkeypatch.setattr(orch, "ensure_preload_library", boom)
        lines = []
        assert orch.run_selftest(trials=1, echo=lines.append) == EXIT_NOT_REPRODUCIBLE
        assert any("cannot build" in line for line in lines)


class TestTimingReport:
    def test_separated_samples(self):
        report = timing_report([1.0, 1.1, 0.9, 1.05], [2.0, 2.1, 1.9, 2.05])
        assert report.n_without == report.n_with == 4
        assert report.ratio == pytest.approx(2.0125 / 1.0125)
        assert report.delta == 1.0
        assert report.magnitude == "large"
        assert report.p_exact
        assert report.p_value == pytest.approx(2 / 70)

    def test_identical_samples(self):
        report = timing_report([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
        assert report.p_value == 1.0
        assert report.delta == 0.0
        assert report.magnitude == "negligible"
        assert report.ratio == 1.0

    def test_accepts_loaded_artifacts(self, tmp_path):
        a = load_run_artifact(write_artifact(tmp_path / "a", [0, 1, 2], wall=1.5))
        b = load_run_artifact(write_artifact(tmp_path / "b", [0, 1, 2], wall=1.6))
        c = load_run_artifact(write_artifact(tmp_path / "c", [0, 1, 2], wall=3.0))
        d = load_run_artifact(write_artifact(tmp_path / "d", [0, 1, 2], wall=3.1))
        report = timing_report([a, b], [c, d])
        assert report.ratio == pytest.approx(3.05 / 1.55)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError, match="two samples"):
            timing_report([1.0], [2.0, 2.1])

    def test_render_mentions_ratio_and_exactness(self):
        report = timing_report([1.0, 1.1], [1.4, 1.5])
        text = render_timing(report)
        assert "overhead ratio" in text
        assert "(exact)" in text
        assert text.endswith("\n")


class TestCliGrammar:
    def run_cli(self, *args, env=None):
        full_env = dict(os.environ)
        if env:
            full_env.update(env)
        return subprocess.run(
            [sys.executable, "-m", "repro", *args],
            capture_output=True, text=True, env=full_env, timeout=120,
        )

    def test_no_subcommand_is_usage_error(self):
        assert self.run_cli().returncode == EXIT_USAGE

    def test_unknown_subcommand_is_usage_error(self):
        assert self.run_cli("frobnicate").returncode == EXIT_USAGE

    def test_run_without_command_is_usage_error(self, tmp_path):
        proc = self.run_cli("run", "--mode", "off", "--dir", str(tmp_path))
        assert proc.returncode == EXIT_USAGE
        assert "command after --" in proc.stderr

    def test_separator_rejected_for_other_subcommands(self, tmp_path):
        proc = self.run_cli("verify", str(tmp_path), str(tmp_path), "--", "x")
        assert proc.returncode == EXIT_USAGE
        assert "does not take a command" in proc.stderr

    def test_bad_hash_algorithm_is_usage_error(self, tmp_path):
        proc = self.run_cli("hash", "--algo", "md5", str(tmp_path))
        assert proc.returncode == EXIT_USAGE

    def test_replay_with_missing_dir_is_usage_error(self, tmp_path):
        proc = self.run_cli(
            "run", "--mode", "replay", "--dir", str(tmp_path / "none"),
            "--", "true",
        )
        assert proc.returncode == EXIT_USAGE
        assert "existing profile directory" in proc.stderr

    def test_forced_strace_without_binary_is_usage_error(self, tmp_path):
        proc = self.run_cli(
            "run", "--mode", "off", "--dir", str(tmp_path), "--trace",
            "--", "true",
            env={"REPRO_TRACER": "strace", "PATH": "/definitely-missing"},
        )
        assert proc.returncode == EXIT_USAGE
        assert "strace" in proc.stderr

    def test_bad_rrr_strict_is_usage_error(self, tmp_path):
        proc = self.run_cli(
            "run", "--mode", "off", "--dir", str(tmp_path), "--", "true",
            env={"RRR_STRICT": "sometimes"},
        )
        assert proc.returncode == EXIT_USAGE
        assert "RRR_STRICT" in proc.stderr

    def test_bad_rrr_sources_is_usage_error(self, tmp_path):
        proc = self.run_cli(
            "run", "--mode", "off", "--dir", str(tmp_path), "--", "true",
            env={"RRR_SOURCES": "tea-leaves"},
        )
        assert proc.returncode == EXIT_USAGE
        assert "RRR_SOURCES" in proc.stderr

    def test_full_record_replay_verify_via_cli(self, child_env, tmp_path):
        profiles = tmp_path / "profiles"
        args = ["python3", "-S", "-m", "repro", "selftest-child",
                "--pattern", "g:12", "--out", "{artifact_dir}"]
        rec = self.run_cli(
            "run", "--mode", "record", "--dir", str(profiles),
            "--out", str(tmp_path / "a"), "--", *args,
        )
        assert rec.returncode == EXIT_OK, rec.stderr
        rep = self.run_cli(
            "run", "--mode", "replay", "--dir", str(profiles),
            "--out", str(tmp_path / "b"), "--", *args,
        )
        assert rep.returncode == EXIT_OK, rep.stderr
        ver = self.run_cli("verify", str(tmp_path / "a"), str(tmp_path / "b"))
        assert ver.returncode == EXIT_OK
        assert "verdict: REPRODUCIBLE" in ver.stdout
