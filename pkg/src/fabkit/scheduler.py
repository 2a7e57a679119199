"""Batch-scheduler adapters.

An adapter is data, loaded from ``adapters/<name>.yml``: a header template
name, command patterns for submit/status/cancel, a packing flag and the
regular expressions used to read scheduler output.  Command patterns are
``str.format`` strings over ``script``, ``jobid`` and ``username``; values
are shell-quoted before substitution.
"""

from __future__ import annotations

import posixpath
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import yaml

from fabkit.config import DATA_DIR, ResolvedContext
from fabkit.errors import (
    ConfigError,
    HeterogeneousSpecs,
    JobIdParseFailed,
    MissingKey,
    NoSuchJob,
    PackUnsupported,
    SchedulerError,
    SubmitRejected,
)
from fabkit.templates import RenderedScript, TemplateLibrary, compose, render
from fabkit.transport import Session, quote

ADAPTER_DIR = DATA_DIR / "adapters"
JOB_STATES = ("queued", "running", "completed", "failed", "cancelled", "unknown")
REPLICA_ROOT = "RUNS"


def parse_duration(text: str | int) -> int:
    """Wall time in seconds from ``SS``, ``MM:SS``, ``HH:MM:SS`` or ``D-HH:MM:SS``."""
    s = str(text).strip()
    days = 0
    if "-" in s:
        d, s = s.split("-", 1)
        days = int(d)
    try:
        parts = [int(p) for p in s.split(":")]
    except ValueError:
        raise ConfigError(f"invalid wall time {text!r}") from None
    if len(parts) > 3 or any(p < 0 for p in parts):
        raise ConfigError(f"invalid wall time {text!r}")
    seconds = 0
    for p in parts:
        seconds = seconds * 60 + p
    return days * 86400 + seconds


def format_hms(seconds: int) -> str:
    h, rem = divmod(int(seconds), 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


def node_count(cores: int, corespernode: int) -> int:
    if corespernode < 1:
        raise ConfigError(f"corespernode must be >= 1, got {corespernode}")
    return -(-cores // corespernode)


@dataclass(frozen=True)
class JobSpec:
    config_name: str
    application: str
    cores: int = 1
    wall_time: int = 600
    replica_count: int = 1
    extra_vars: Mapping[str, Any] = field(default_factory=dict)
    replicas: tuple[Mapping[str, Any], ...] = ()

    def __post_init__(self):
        if self.cores < 1:
            raise ConfigError(f"cores must be >= 1, got {self.cores}")
        if self.replica_count < 1:
            raise ConfigError(f"replica_count must be >= 1, got {self.replica_count}")
        if self.wall_time <= 0:
            raise ConfigError(f"wall_time must be > 0, got {self.wall_time}")

    @property
    def packed(self) -> bool:
        return bool(self.replicas)

    @classmethod
    def from_context(cls, context: Mapping[str, Any], config_name: str | None = None, **overrides) -> "JobSpec":
        def need(key):
            if key not in context:
                raise MissingKey(key, getattr(context, "layers_searched", ()))
            return context[key]

        try:
            cores = int(need("cores"))
        except ValueError:
            raise ConfigError(f"cores must be an integer, got {context['cores']!r}") from None
        values = dict(
            config_name=config_name or str(need("config")),
            application=str(need("application")),
            cores=cores,
            wall_time=parse_duration(need("job_wall_time")),
        )
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class JobHandle:
    jobid: str
    machine: str
    results_dir: str
    submitted_at: datetime

    def __post_init__(self):
        if not self.jobid:
            raise SchedulerError("empty job id")
        if not posixpath.isabs(self.results_dir):
            raise SchedulerError(f"results_dir must be absolute, got {self.results_dir!r}")


@dataclass(frozen=True)
class JobStatus:
    jobid: str
    state: str
    raw_line: str


@dataclass(frozen=True)
class SchedulerAdapter:
    name: str
    header_template: str
    submit_command: str
    status_command: str
    cancel_command: str
    jobid_pattern: str
    status_pattern: str
    state_map: Mapping[str, str]
    supports_packing: bool = False
    status_skip: str | None = None
    cancel_unknown_pattern: str | None = None
    sample_submit_output: str = ""
    source: str | None = field(default=None, compare=False)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], source: str | None = None) -> "SchedulerAdapter":
        known = {f for f in cls.__dataclass_fields__ if f != "source"}
        missing = {"name", "header_template", "submit_command", "status_command", "cancel_command",
                   "jobid_pattern", "status_pattern", "state_map"} - set(data)
        if missing:
            raise ConfigError(f"adapter {source or data.get('name')}: missing keys {sorted(missing)}")
        values = {k: v for k, v in data.items() if k in known}
        values["state_map"] = {str(k): str(v) for k, v in values["state_map"].items()}
        bad = {v for v in values["state_map"].values() if v not in JOB_STATES}
        if bad:
            raise ConfigError(f"adapter {data['name']}: unknown states {sorted(bad)}")
        for key in ("jobid_pattern", "status_pattern", "status_skip", "cancel_unknown_pattern"):
            if values.get(key):
                re.compile(values[key])
        values["supports_packing"] = bool(values.get("supports_packing", False))
        return cls(source=source, **values)

    def command(self, kind: str, **values: str) -> str:
        pattern = {"submit": self.submit_command, "status": self.status_command, "cancel": self.cancel_command}[kind]
        return pattern.format(**{k: quote(str(v)) for k, v in values.items()})

    def extract_jobid(self, stdout: str) -> str | None:
        m = re.search(self.jobid_pattern, stdout, re.MULTILINE)
        return m.group(1) if m and m.group(1) else None

    def parse_status_line(self, line: str) -> JobStatus | None:
        """None for lines the adapter marks as noise (headers); unknown for garbage."""
        if not line.strip():
            return None
        if self.status_skip and re.search(self.status_skip, line):
            return None
        m = re.match(self.status_pattern, line)
        if not m:
            return JobStatus("", "unknown", line)
        state = self.state_map.get(m.group("state"), "unknown")
        return JobStatus(m.group("jobid"), state, line)

    def parse_status(self, output: str) -> list[JobStatus]:
        out = []
        for line in output.splitlines():
            st = self.parse_status_line(line)
            if st is not None:
                out.append(st)
        return out

    def self_test(self) -> str:
        jobid = self.extract_jobid(self.sample_submit_output)
        if not jobid:
            raise ConfigError(f"adapter {self.name}: jobid_pattern does not match its own sample output")
        return jobid


class AdapterRegistry:
    def __init__(self, dirs: Iterable[Path | str] = (ADAPTER_DIR,)):
        self.dirs = [Path(d) for d in dirs]
        self._cache: dict[str, SchedulerAdapter] = {}

    def append(self, directory: Path | str) -> None:
        if Path(directory) not in self.dirs:
            self.dirs.append(Path(directory))

    def names(self) -> list[str]:
        return sorted({p.stem for d in self.dirs if d.is_dir() for p in d.glob("*.yml")})

    def get(self, name: str) -> SchedulerAdapter:
        if name in self._cache:
            return self._cache[name]
        for d in self.dirs:
            path = d / f"{name}.yml"
            if path.is_file():
                data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
                adapter = SchedulerAdapter.from_mapping(data, str(path))
                self._cache[name] = adapter
                return adapter
        raise ConfigError(f"unknown scheduler adapter {name!r}; available: {', '.join(self.names())}")


def load_adapter(name: str) -> SchedulerAdapter:
    return AdapterRegistry().get(name)


def job_variables(spec: JobSpec, context: Mapping[str, Any]) -> dict[str, str]:
    """Variables derived from ``spec`` that header and body templates consume."""
    if "corespernode" not in context:
        raise MissingKey("corespernode", getattr(context, "layers_searched", ()))
    try:
        cpn = int(context["corespernode"])
    except ValueError:
        raise ConfigError(f"corespernode must be an integer, got {context['corespernode']!r}") from None
    values = {
        "config": spec.config_name,
        "application": spec.application,
        "cores": str(spec.cores),
        "corespernode": str(cpn),
        "nodes": str(node_count(spec.cores, cpn)),
        "wall_time_seconds": str(spec.wall_time),
        "wall_time_hms": format_hms(spec.wall_time),
        "replica_count": str(spec.replica_count),
    }
    values.update({k: str(v) for k, v in spec.extra_vars.items()})
    return values


def _layer(context: Mapping[str, Any], values: Mapping[str, str]) -> Mapping[str, Any]:
    if isinstance(context, ResolvedContext):
        return context.with_values(values, layer="job")
    merged = dict(context)
    merged.update(values)
    return merged


def replica_dir(config_name: str, index: int) -> str:
    return f"{REPLICA_ROOT}/{config_name}_{index}"


def generate_script(
    spec: JobSpec,
    adapter: SchedulerAdapter,
    context: Mapping[str, Any],
    library: TemplateLibrary | None = None,
) -> RenderedScript:
    """Header for ``adapter`` composed with the body for ``spec.application``.

    A packed spec gets one launch stanza per replica: a backgrounded
    subshell that enters ``RUNS/<config>_<i>`` and runs the body rendered
    with that replica's variables, followed by ``wait``.
    """
    library = library or TemplateLibrary([DATA_DIR / "templates"])
    header = library.load(adapter.header_template)
    body = library.load(spec.application)
    ctx = _layer(context, job_variables(spec, context))
    if not spec.packed:
        return compose(header, [body], ctx)

    head = render(header, ctx)
    stanzas = []
    used = set(head.inputs_used)
    for replica in spec.replicas:
        rvars = {k: str(v) for k, v in replica.items()}
        rctx = _layer(ctx, rvars)
        rendered = render(body, rctx)
        used |= rendered.inputs_used
        index = rvars["replica_index"]
        lines = rendered.text.rstrip("\n")
        stanzas.append(f"# replica {index}\n(\ncd {replica_dir(spec.config_name, int(index))} || exit 1\n{lines}\n) &\n")
    text = head.text + "\n" + "".join(stanzas) + "wait\n"
    return RenderedScript(text, frozenset(used), (header.name, body.name))


def submit(session: Session, adapter: SchedulerAdapter, script_remote_path: str, *, machine: str | None = None,
           now: datetime | None = None) -> JobHandle:
    result = session.exec(adapter.command("submit", script=script_remote_path))
    if result.exit_code != 0:
        raise SubmitRejected(f"{adapter.name} rejected {script_remote_path} (exit {result.exit_code})", result.stderr)
    jobid = adapter.extract_jobid(result.stdout)
    if not jobid:
        raise JobIdParseFailed(f"cannot find a job id in {adapter.name} submit output", result.stdout)
    return JobHandle(
        jobid=jobid,
        machine=machine or session.endpoint.host,
        results_dir=posixpath.dirname(script_remote_path),
        submitted_at=now or datetime.now(timezone.utc),
    )


def status(session: Session, adapter: SchedulerAdapter, jobid: str | None = None, user: str | None = None) -> list[JobStatus]:
    """One JobStatus per queue line; ``jobid`` filters locally."""
    username = user or session.endpoint.username or ""
    result = session.exec(adapter.command("status", username=username))
    if result.exit_code != 0:
        raise SchedulerError(f"{adapter.name} status query failed (exit {result.exit_code}): {result.stderr.strip()}")
    statuses = adapter.parse_status(result.stdout)
    if jobid is not None:
        statuses = [s for s in statuses if s.jobid == jobid]
    return statuses


def cancel(session: Session, adapter: SchedulerAdapter, jobid: str) -> str:
    result = session.exec(adapter.command("cancel", jobid=jobid))
    if result.exit_code != 0:
        text = result.stderr + result.stdout
        if adapter.cancel_unknown_pattern and re.search(adapter.cancel_unknown_pattern, text):
            raise NoSuchJob(f"{adapter.name}: no such job {jobid}")
        raise SchedulerError(f"{adapter.name}: cancel of {jobid} failed (exit {result.exit_code}): {text.strip()}")
    return f"cancelled {jobid}"


def pack(specs: Sequence[JobSpec], adapter: SchedulerAdapter) -> JobSpec:
    """Merge replica specs into one submission (raises PackUnsupported)."""
    if not specs:
        raise ConfigError("pack needs at least one spec")
    first = specs[0]
    for s in specs[1:]:
        if s.application != first.application or s.wall_time != first.wall_time:
            raise HeterogeneousSpecs(
                f"cannot pack {first.application}/{first.wall_time}s with {s.application}/{s.wall_time}s"
            )
    if not adapter.supports_packing:
        raise PackUnsupported(f"adapter {adapter.name} does not support packing")
    replicas = []
    for i, s in enumerate(specs, start=1):
        rvars = {k: str(v) for k, v in s.extra_vars.items()}
        rvars.setdefault("replica_index", str(i))
        rvars["cores"] = str(s.cores)
        replicas.append(rvars)
    return replace(
        first,
        cores=sum(s.cores for s in specs),
        replica_count=len(specs),
        extra_vars={},
        replicas=tuple(replicas),
    )
