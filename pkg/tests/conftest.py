from __future__ import annotations

import io
import json
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from fabkit import cli
from fabkit.orchestrator import Orchestrator, Workspace
from fabkit.transport import fake

# Planted in every test's per-user machine layer; must never reach disk,
# a transcript or a log.  tests/test_acceptance.py drives the full scan.
SENTINEL_TOKEN = "SENTINEL-tok-7f3a9c1e"
SENTINEL_PASSWORD = "SENTINEL-pw-b8e24d05"
SENTINELS = (SENTINEL_TOKEN, SENTINEL_PASSWORD)
FAKE_MACHINES = ("fake:alpha", "fake:beta", "fake:slurm", "fake:pbs")


class StepClock:
    """Deterministic UTC clock: each call advances by ``step`` seconds."""

    def __init__(self, start=datetime(2024, 3, 1, 12, 0, 0, tzinfo=timezone.utc), step: float = 1.0):
        self.now = start
        self.step = timedelta(seconds=step)
        self.calls = 0

    def __call__(self) -> datetime:
        value = self.now
        self.now += self.step
        self.calls += 1
        return value


class RecordingSleep:
    def __init__(self, clock: StepClock | None = None):
        self.calls: list[float] = []
        self.clock = clock

    def __call__(self, seconds: float) -> None:
        self.calls.append(seconds)


def scan_for_sentinels(root: Path, skip: Path | None = None) -> list[str]:
    hits = []
    for path in Path(root).rglob("*"):
        if not path.is_file() or (skip is not None and skip in path.parents):
            continue
        data = path.read_bytes()
        if path.parent.name == "fake_hosts" and path.suffix == ".json":
            # persisted host state: the host's own env is where secrets are planted
            state = json.loads(data)
            state.pop("env", None)
            data = json.dumps(state).encode()
        hits += [f"{path}: {s}" for s in SENTINELS if s.encode() in data]
    return hits


def scan_fake_hosts() -> list[str]:
    hits = []
    for name, host in fake._HOSTS.items():
        for path, data in host.files.items():
            hits += [f"{name}:{path}: {s}" for s in SENTINELS if s.encode() in data]
    return hits


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    user_dir = tmp_path / "user_config"
    user_dir.mkdir()
    lines = []
    for m in FAKE_MACHINES:
        lines += [f'"{m}":', f"  api_token: {SENTINEL_TOKEN}", f"  ssh_password: {SENTINEL_PASSWORD}"]
    (user_dir / "machines_user.yml").write_text("\n".join(lines) + "\n", encoding="utf-8")
    monkeypatch.setenv("FABKIT_CONFIG_DIR", str(user_dir))
    monkeypatch.delenv("FABKIT_PLUGIN_PATH", raising=False)
    monkeypatch.delenv("FABKIT_ROOT", raising=False)
    fake.reset_fake_hosts()
    yield user_dir
    leaks = scan_for_sentinels(tmp_path, skip=user_dir) + scan_fake_hosts()
    fake.reset_fake_hosts()
    assert not leaks, "credential material leaked:\n" + "\n".join(leaks)


@pytest.fixture
def workspace(tmp_path) -> Workspace:
    root = tmp_path / "ws"
    demo = root / "config_files" / "demo"
    demo.mkdir(parents=True)
    (demo / "input.txt").write_text("demo input\n", encoding="utf-8")
    return Workspace(root)


@pytest.fixture
def registry(workspace):
    return cli.build_registry(workspace, plugin_paths=[cli.BUILTIN_PLUGINS])


@pytest.fixture
def make_fab(workspace, registry):
    made = []

    def factory(machine: str = "fake:alpha", *, clock=None, sleep=None) -> Orchestrator:
        fab = Orchestrator(workspace, machine, clock=clock or StepClock(), sleep=sleep or RecordingSleep(),
                           out=io.StringIO())
        made.append(fab)
        return fab

    yield factory
    for fab in made:
        fab.close()


@pytest.fixture
def fab(make_fab) -> Orchestrator:
    return make_fab()


def write_config(workspace: Workspace, name: str, files: dict[str, str], settings: str | None = None) -> Path:
    d = workspace.config_dir(name)
    d.mkdir(parents=True, exist_ok=True)
    for rel, text in files.items():
        (d / rel).parent.mkdir(parents=True, exist_ok=True)
        (d / rel).write_text(text, encoding="utf-8")
    if settings is not None:
        (d / "fabkit.yml").write_text(settings, encoding="utf-8")
    return d


# -- acceptance reporting -----------------------------------------------------

ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
