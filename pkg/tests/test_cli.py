"""Command-line orchestration: exit codes, stage isolation, resumability."""

import json
import shutil

import pytest

from decompeval import cli, toycorpus

SPECS = {"decompilers": [
    {"id": "identity", "kind": "Identity"},
    {"id": "offbyone", "kind": "Mutator",
     "params": {"operator": "<", "replacement": "<="}},
]}


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    """Two fixtures at one level: enough to exercise every stage fast."""
    d = tmp_path_factory.mktemp("mini")
    toycorpus.generate_fixtures(d / "c")
    mpath = d / "c" / "manifest.json"
    body = json.loads(mpath.read_text())
    keep = {"abs_delta", "classify_byte"}
    body["functions"] = [f for f in body["functions"]
                         if f["symbol"] in keep]
    body["harnesses"] = {k: v for k, v in body["harnesses"].items()
                         if k in keep}
    body["opt_levels"] = ["O1"]
    mpath.write_text(json.dumps(body))
    specs = d / "decompilers.json"
    specs.write_text(json.dumps(SPECS))
    return mpath, specs


def invoke(*args):
    return cli.main([str(a) for a in args])


def test_unknown_stage_is_config_error(small_corpus, tmp_path):
    mpath, specs = small_corpus
    rc = invoke("run", "--manifest", mpath, "--decompilers", specs,
                "--out", tmp_path, "--stages", "validate,frobnicate")
    assert rc == 2


def test_missing_spec_file_is_config_error(small_corpus, tmp_path):
    mpath, _ = small_corpus
    rc = invoke("run", "--manifest", mpath,
                "--decompilers", tmp_path / "nope.json", "--out", tmp_path)
    assert rc == 2


def test_bad_parallel_is_config_error(small_corpus, tmp_path):
    mpath, specs = small_corpus
    rc = invoke("run", "--manifest", mpath, "--decompilers", specs,
                "--out", tmp_path, "--parallel", "0")
    assert rc == 2


def test_full_run_and_stage_isolation(small_corpus, tmp_path):
    mpath, specs = small_corpus
    out = tmp_path / "out"
    rc = invoke("run", "--manifest", mpath, "--decompilers", specs,
                "--out", out, "--mock-judge")
    assert rc == 0
    assert (out / "report.json").is_file()
    assert (out / "report.csv").is_file()
    assert (out / "report.md").is_file()
    assert (out / "radar.json").is_file()

    body = json.loads((out / "report.json").read_text())
    assert body["rsr"]["identity"]["O1"] == 1.0
    assert body["cer"]["identity"]["O1"] == 1.0

    # stage isolation: wipe recompile outputs, rerun only that stage
    for outcome in out.rglob("outcome.json"):
        outcome.unlink()
    rc = invoke("recompile", "--manifest", mpath, "--decompilers", specs,
                "--out", out)
    assert rc == 0
    outcomes = list(out.rglob("outcome.json"))
    assert len(outcomes) == 4  # 2 functions x 2 decompilers x 1 level
    # the recompile stage alone never rewrites reports
    assert json.loads((out / "report.json").read_text()) == body


def test_stage_subset(small_corpus, tmp_path):
    mpath, specs = small_corpus
    out = tmp_path / "out"
    rc = invoke("run", "--manifest", mpath, "--decompilers", specs,
                "--out", out, "--stages", "validate,build,decompile")
    assert rc == 0
    assert list(out.rglob("candidate.c"))
    assert not list(out.rglob("outcome.json"))
    assert not (out / "report.json").exists()


def test_resume_skips_recorded_stages(small_corpus, tmp_path):
    mpath, specs = small_corpus
    out = tmp_path / "out"
    assert invoke("run", "--manifest", mpath, "--decompilers", specs,
                  "--out", out, "--stages", "validate,build") == 0
    stamp = (out / "stages.json").read_text()
    # delete an artifact a real build stage would recreate; a resumed run
    # must skip the stage and leave it missing
    harness = next(out.rglob("harness"))
    shutil.rmtree(harness.parent)
    assert invoke("run", "--manifest", mpath, "--decompilers", specs,
                  "--out", out, "--stages", "validate,build",
                  "--resume") == 0
    assert (out / "stages.json").read_text() == stamp
    assert not harness.exists()


def test_stage_failure_exit_code(small_corpus, tmp_path):
    mpath, specs = small_corpus
    out = tmp_path / "out"
    # profiling without any prior stage outputs is a stage failure
    rc = invoke("profile", "--manifest", mpath, "--decompilers", specs,
                "--out", out)
    assert rc == 1


def test_platform_gate(monkeypatch):
    monkeypatch.setattr(cli.platform, "machine", lambda: "sparc64")
    with pytest.raises(cli.PlatformSkip):
        cli.check_platform()


def test_platform_skip_exit_code(small_corpus, tmp_path, monkeypatch):
    mpath, specs = small_corpus
    monkeypatch.setattr(cli.platform, "system", lambda: "Haiku")
    rc = invoke("build", "--manifest", mpath, "--decompilers", specs,
                "--out", tmp_path)
    assert rc == 3
