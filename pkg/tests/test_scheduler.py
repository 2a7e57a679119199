from __future__ import annotations

import random
from pathlib import Path

import pytest
import yaml
from hypothesis import given, strategies as st

from fabkit.config import DATA_DIR
from fabkit.errors import (
    ConfigError,
    HeterogeneousSpecs,
    JobIdParseFailed,
    MissingKey,
    NoSuchJob,
    PackUnsupported,
    SubmitRejected,
)
from fabkit.scheduler import (
    AdapterRegistry,
    JobSpec,
    SchedulerAdapter,
    cancel,
    format_hms,
    generate_script,
    job_variables,
    node_count,
    pack,
    parse_duration,
    status,
    submit,
)
from fabkit.templates import TemplateLibrary
from fabkit.transport import TransportEndpoint
from fabkit.transport.fake import FakeHost, FakeSession

ADAPTERS = ["slurm", "pbs", "fake", "fake_nopack"]
FIXTURES = DATA_DIR / "fixtures"
LIB = TemplateLibrary([DATA_DIR / "templates"])


def fixture(name):
    return yaml.safe_load((FIXTURES / f"{name}.yml").read_text())


@pytest.mark.parametrize("name", ADAPTERS)
def test_adapter_conformance(name):
    adapter = AdapterRegistry().get(name)
    fx = fixture(name)
    adapter.self_test()
    for case in fx["submit"]:
        assert adapter.extract_jobid(case["output"]) == case["jobid"]
    parsed = [(s.jobid, s.state) for s in adapter.parse_status(fx["status"]["output"])]
    assert parsed == [tuple(e) for e in fx["status"]["expected"]]
    assert adapter.cancel_unknown_pattern
    import re

    assert re.search(adapter.cancel_unknown_pattern, fx["cancel_unknown_stderr"])


def test_unparseable_status_line_is_unknown_not_dropped():
    adapter = AdapterRegistry().get("slurm")
    st_ = adapter.parse_status("12 RUNNING\ngarbage line with words\n")
    assert [s.state for s in st_] == ["running", "unknown"]


def test_adapter_validation():
    with pytest.raises(ConfigError):
        SchedulerAdapter.from_mapping({"name": "x"})
    good = yaml.safe_load((DATA_DIR / "adapters" / "fake.yml").read_text())
    good["state_map"] = {"Q": "sleeping"}
    with pytest.raises(ConfigError):
        SchedulerAdapter.from_mapping(good)


def test_commands_are_shell_quoted():
    adapter = AdapterRegistry().get("slurm")
    assert adapter.command("submit", script="/a b/job.sh") == "sbatch '/a b/job.sh'"


@pytest.mark.parametrize("text,seconds", [("45", 45), ("10:00", 600), ("1:00:00", 3600), ("2-01:00:00", 176400)])
def test_parse_duration(text, seconds):
    assert parse_duration(text) == seconds


def test_bad_duration():
    with pytest.raises(ConfigError):
        parse_duration("ten minutes")


def test_format_hms():
    assert format_hms(3725) == "01:02:05"
    assert format_hms(90000) == "25:00:00"


@given(st.integers(1, 10**6), st.integers(1, 512))
def test_node_count_is_ceiling(cores, cpn):
    nodes = node_count(cores, cpn)
    assert (nodes - 1) * cpn < cores <= nodes * cpn


def test_node_count_examples():
    assert node_count(64, 32) == 2
    assert node_count(65, 32) == 3
    assert node_count(1, 128) == 1
    with pytest.raises(ConfigError):
        node_count(4, 0)


def test_job_variables_need_corespernode():
    with pytest.raises(MissingKey):
        job_variables(JobSpec("c", "demo"), {})


def context(**extra):
    ctx = {"job_name": "fab_$config", "job_results": "/runs/x", "job_dispatch_extra": "", "corespernode": "32",
           "mpi_exec": "mpirun", "lammps_exec": "lmp", "lammps_input": "in.lammps"}
    ctx.update(extra)
    return ctx


def test_slurm_script_contents():
    spec = JobSpec("cg", "lammps", cores=64, wall_time=3600)
    text = generate_script(spec, AdapterRegistry().get("slurm"), context(), LIB).text
    assert "#SBATCH --nodes=2\n" in text
    assert "#SBATCH --ntasks=64\n" in text
    assert "#SBATCH --time=01:00:00\n" in text
    assert "#SBATCH --job-name=fab_cg\n" in text
    assert text.endswith("mpirun -n 64 lmp -in in.lammps\n")


def test_pack_sums_cores_and_stanzas():
    specs = [JobSpec("ens", "demo", cores=c, extra_vars={"replica_index": str(i)}) for i, c in enumerate([2, 3, 5], 1)]
    packed = pack(specs, AdapterRegistry().get("fake"))
    assert packed.cores == 10 and packed.replica_count == 3
    text = generate_script(packed, AdapterRegistry().get("fake"), context(corespernode="4"), LIB).text
    assert text.count(") &\n") == 3
    assert "cd RUNS/ens_1 || exit 1" in text and "cd RUNS/ens_3 || exit 1" in text
    assert text.endswith("wait\n")
    assert "cores=10 nodes=3" in text
    assert 'echo "demo ens on 5 cores"' in text


def test_pack_refusals():
    specs = [JobSpec("e", "demo"), JobSpec("e", "demo")]
    with pytest.raises(PackUnsupported):
        pack(specs, AdapterRegistry().get("pbs"))
    with pytest.raises(HeterogeneousSpecs):
        pack([JobSpec("e", "demo"), JobSpec("e", "lammps")], AdapterRegistry().get("fake"))
    with pytest.raises(HeterogeneousSpecs):
        pack([JobSpec("e", "demo", wall_time=60), JobSpec("e", "demo", wall_time=120)], AdapterRegistry().get("fake"))


@pytest.fixture
def session():
    host = FakeHost("sched", execute_jobs=False)
    host.mkdirs("/j")
    host.write("/j/job.sh", b"true\n")
    return FakeSession(TransportEndpoint("fake:sched", "fabuser"), host=host)


@pytest.mark.parametrize("name", ["slurm", "pbs", "fake"])
def test_submit_status_cancel_on_fake(session, name):
    adapter = AdapterRegistry().get(name)
    handle = submit(session, adapter, "/j/job.sh", machine="fake:sched")
    assert handle.results_dir == "/j"
    assert [s.state for s in status(session, adapter, handle.jobid)] == ["queued"]
    assert cancel(session, adapter, handle.jobid) == f"cancelled {handle.jobid}"
    with pytest.raises(NoSuchJob):
        cancel(session, adapter, handle.jobid)


def test_submit_rejected_and_unparseable(session):
    adapter = AdapterRegistry().get("slurm")
    with pytest.raises(SubmitRejected):
        submit(session, adapter, "/j/missing.sh")
    session.host.script("sbatch /j/job.sh", stdout="all good, no id here\n")
    with pytest.raises(JobIdParseFailed) as exc:
        submit(session, adapter, "/j/job.sh")
    assert "no id" in exc.value.stdout


def test_user_adapter_directory_overrides(tmp_path):
    data = yaml.safe_load((DATA_DIR / "adapters" / "fake.yml").read_text())
    data["supports_packing"] = False
    (tmp_path / "fake.yml").write_text(yaml.safe_dump(data))
    reg = AdapterRegistry([tmp_path, DATA_DIR / "adapters"])
    assert reg.get("fake").supports_packing is False
    assert "slurm" in reg.names()
