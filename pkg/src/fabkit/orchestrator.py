"""End-to-end task implementations: staging, submission, monitoring, fetch.

One :class:`Orchestrator` instance corresponds to one invocation against one
machine.  It owns at most one session to that machine, reused for every
remote action, and records what it did in the session transcript and in an
invocation log under ``logs/``.
"""

from __future__ import annotations

import fnmatch
import logging
import os
import posixpath
import shutil
import subprocess
import sys
import tarfile
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence, TextIO

from fabkit import provenance
from fabkit.config import (
    CLI_LAYER,
    ConfigLayer,
    ResolvedContext,
    Scope,
    general_layer,
    load_layer,
    machines_file,
    resolve,
    user_config_dir,
)
from fabkit.errors import (
    BlackboxError,
    ConfigError,
    FabError,
    JobFailed,
    MissingKey,
    PackUnsupported,
    PreconditionError,
    SourceMissing,
    TransportError,
)
from fabkit.scheduler import (
    ADAPTER_DIR,
    AdapterRegistry,
    JobHandle,
    JobSpec,
    JobStatus,
    SchedulerAdapter,
    generate_script,
    job_variables,
    pack,
    replica_dir,
)
from fabkit import scheduler
from fabkit.templates import RenderedScript, Template, TemplateLibrary, expand_value, render
from fabkit.transport import Session, TranscriptEntry, TransportEndpoint, connect

log = logging.getLogger(__name__)

CORE_TEMPLATES = Path(__file__).parent / "data" / "templates"
TEMPLATE_SUFFIX = ".tmpl"
PROBLEM_CONFIG = "fabkit.yml"
SWEEP_DIR = "SWEEP"


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class Workspace:
    """Local directory conventions plus the search paths plugins extend."""

    root: Path
    template_dirs: list[Path] = field(default_factory=list)
    blackbox_dirs: list[Path] = field(default_factory=list)
    adapter_dirs: list[Path] = field(default_factory=list)
    plugin_layers: list[ConfigLayer] = field(default_factory=list)
    fake_state_dir: Path | None = None

    def __post_init__(self):
        self.root = Path(self.root).resolve()
        if not self.template_dirs:
            self.template_dirs = [self.root / "templates", CORE_TEMPLATES]
        if not self.blackbox_dirs:
            self.blackbox_dirs = [self.root / "blackbox"]
        if not self.adapter_dirs:
            self.adapter_dirs = [self.root / "adapters", ADAPTER_DIR]

    @property
    def config_files(self) -> Path:
        return self.root / "config_files"

    @property
    def results(self) -> Path:
        return self.root / "results"

    @property
    def archives(self) -> Path:
        return self.root / "archives"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    def add_plugin_paths(self, templates=(), blackbox=(), adapters=(), layer: ConfigLayer | None = None) -> None:
        for d in templates:
            if Path(d) not in self.template_dirs:
                self.template_dirs.append(Path(d))
        for d in blackbox:
            if Path(d) not in self.blackbox_dirs:
                self.blackbox_dirs.append(Path(d))
        for d in adapters:
            if Path(d) not in self.adapter_dirs:
                self.adapter_dirs.append(Path(d))
        if layer is not None:
            self.plugin_layers.append(layer)

    def config_dir(self, config_name: str) -> Path:
        return self.config_files / config_name

    def base_layers(self) -> list[ConfigLayer]:
        return [
            general_layer(),
            load_layer(machines_file(self.root), Scope.MACHINE),
            load_layer(user_config_dir() / "machines_user.yml", Scope.MACHINE_USER),
            *self.plugin_layers,
        ]


@dataclass
class RunResult:
    handle: JobHandle
    record: provenance.ProvenanceRecord
    remote_dir: str
    local_dir: Path
    context: ResolvedContext

    @property
    def results_dir_name(self) -> str:
        return self.record.results_dir_name


@dataclass
class EnsembleResult:
    handles: list[JobHandle]
    remote_dir: str
    replica_dirs: list[str]
    packed: bool
    local_dir: Path


@dataclass
class BuildStep:
    command: str
    exit_code: int
    stdout: str
    stderr: str


@dataclass
class BuildReport:
    steps: list[BuildStep]
    log_path: Path

    @property
    def ok(self) -> bool:
        return all(s.exit_code == 0 for s in self.steps)


@dataclass
class BlackboxResult:
    exit_code: int
    stdout: str
    stderr: str
    script: Path


@dataclass
class ColumnStats:
    name: str
    count: int
    mean: float
    min: float
    max: float


class Orchestrator:
    def __init__(
        self,
        workspace: Workspace,
        machine: str,
        *,
        clock: Callable[[], datetime] = utcnow,
        sleep: Callable[[float], None] = time.sleep,
        out: TextIO | None = None,
        session_options: Mapping[str, Any] | None = None,
    ):
        self.workspace = workspace
        self.machine = machine
        self.clock = clock
        self.sleep = sleep
        self.out = out if out is not None else sys.stdout
        self.session_options = dict(session_options or {})
        if workspace.fake_state_dir is not None:
            self.session_options.setdefault("state_dir", workspace.fake_state_dir)
        self._session: Session | None = None
        self._closed_transcripts: list[TranscriptEntry] = []
        self._log_path: Path | None = None
        self.adapters = AdapterRegistry(workspace.adapter_dirs)
        self.templates = TemplateLibrary(workspace.template_dirs)

    # -- context --------------------------------------------------------------

    def context(self, config_name: str | None = None, overrides: Mapping[str, Any] | None = None) -> ResolvedContext:
        layers = self.workspace.base_layers()
        if config_name:
            layers.append(load_layer(self.workspace.config_dir(config_name) / PROBLEM_CONFIG, Scope.PROBLEM))
        cli = dict(overrides or {})
        if config_name:
            cli.setdefault("config", config_name)
        ctx = resolve(layers, self.machine, cli)
        builtins = {"machine": self.machine}
        if "config" not in ctx:
            builtins["config"] = config_name or ""
        return ctx.with_values(builtins, layer="builtin")

    def expand(self, ctx: Mapping[str, Any], key: str) -> str:
        if key not in ctx:
            raise MissingKey(key, getattr(ctx, "layers_searched", ()))
        return expand_value(ctx, key)

    # -- session ----------------------------------------------------------------

    def endpoint(self, ctx: ResolvedContext) -> TransportEndpoint:
        host = ctx.get("remote") or self.machine
        return TransportEndpoint(
            host=str(host),
            username=str(ctx.get("username", "")),
            port=int(ctx.get("port", 22) or 22),
            key_path=ctx.get("key_path") or None,
            known_hosts=ctx.get("known_hosts") or None,
        )

    def session(self, ctx: ResolvedContext | None = None) -> Session:
        if self._session is None or self._session.state != "open":
            ctx = ctx if ctx is not None else self.context()
            sess = connect(self.endpoint(ctx), **self.session_options)
            sess.add_secrets(provenance.secret_values(ctx))
            if self._session is not None:
                self._closed_transcripts.extend(self._session.transcript)
            self._session = sess
        elif ctx is not None:
            self._session.add_secrets(provenance.secret_values(ctx))
        return self._session

    @property
    def transcript(self) -> list[TranscriptEntry]:
        live = self._session.transcript if self._session is not None else []
        return self._closed_transcripts + list(live)

    def close(self) -> None:
        if self._session is not None and self._session.state == "open":
            self._session.close()
        if self.transcript and self._log_path is not None:
            self.log("transcript:\n" + "\n".join("  " + e.line() for e in self.transcript))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def adapter(self, ctx: Mapping[str, Any]) -> SchedulerAdapter:
        if "scheduler" not in ctx:
            raise MissingKey("scheduler", getattr(ctx, "layers_searched", ()))
        return self.adapters.get(str(ctx["scheduler"]))

    # -- logging ----------------------------------------------------------------

    @property
    def log_path(self) -> Path:
        if self._log_path is None:
            stamp = provenance.format_timestamp(self.clock())
            self.workspace.logs.mkdir(parents=True, exist_ok=True)
            base = self.workspace.logs / f"fab_{stamp}_{provenance.sanitize(self.machine)}"
            path = base.with_suffix(".log")
            n = 1
            while path.exists():
                n += 1
                path = Path(f"{base}_{n}.log")
            path.touch()
            self._log_path = path
        return self._log_path

    def log(self, message: str) -> None:
        text = message.rstrip("\n")
        if self._session is not None:
            text = self._session.scrub(text)
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(f"[{self.clock().strftime('%Y-%m-%dT%H:%M:%SZ')}] {text}\n")
        log.debug(text)

    def echo(self, message: str = "") -> None:
        print(message, file=self.out)

    # -- staging helpers --------------------------------------------------------

    def _stage_local(self, sources: Sequence[Path], dest: Path, ctx: Mapping[str, Any]) -> None:
        """Copy ``sources`` (later ones overlay earlier) into ``dest``; render ``*.tmpl``."""
        dest.mkdir(parents=True, exist_ok=True)
        for src in sources:
            for dirpath, dirnames, filenames in os.walk(src):
                rel_dir = Path(dirpath).relative_to(src)
                if rel_dir == Path(".") and SWEEP_DIR in dirnames:
                    dirnames.remove(SWEEP_DIR)
                (dest / rel_dir).mkdir(parents=True, exist_ok=True)
                for name in filenames:
                    if rel_dir == Path(".") and name == PROBLEM_CONFIG:
                        continue
                    path = Path(dirpath) / name
                    if name.endswith(TEMPLATE_SUFFIX):
                        text = render(Template(str(path), path.read_text(encoding="utf-8")), ctx).text
                        (dest / rel_dir / name[: -len(TEMPLATE_SUFFIX)]).write_text(text, encoding="utf-8")
                    else:
                        shutil.copyfile(path, dest / rel_dir / name)

    def _unique_remote_dir(self, session: Session, runs_path: str, name: str) -> tuple[str, str]:
        candidate, n = name, 1
        while session.exists(posixpath.join(runs_path, candidate)):
            n += 1
            candidate = f"{name}_{n}"
        return candidate, posixpath.join(runs_path, candidate)

    def _prepare(self, config_name: str, input_dir: Path | None, kwargs: Mapping[str, Any]):
        ctx = self.context(config_name, kwargs)
        src = Path(input_dir) if input_dir is not None else self.workspace.config_dir(config_name)
        if not src.is_dir():
            raise PreconditionError(f"config directory not found: {src}", stage="resolve")
        adapter = self.adapter(ctx)
        self.templates.find(adapter.header_template)
        spec = JobSpec.from_context(ctx, config_name)
        self.templates.find(spec.application)
        runs_path = self.expand(ctx, "runs_path")
        script_name = str(ctx.get("script_name", "job.sh"))
        return ctx, src, adapter, spec, runs_path, script_name

    # -- run_job ----------------------------------------------------------------

    def run_job(self, config_name: str, *, input_dir: Path | str | None = None, **kwargs: Any) -> RunResult:
        """Stage ``config_files/<config_name>``, submit one job, record provenance."""
        stage = "resolve"
        try:
            ctx, src, adapter, spec, runs_path, script_name = self._prepare(config_name, input_dir, kwargs)
            stage = "connect"
            session = self.session(ctx)
            stage = "name"
            now = self.clock()
            name = provenance.name_results_dir(str(ctx["results_dir_pattern"]), ctx, now)
            name, remote_dir = self._unique_remote_dir(session, runs_path, name)
            run_ctx = ctx.with_values({"results_dir_name": name, "job_results": remote_dir}, layer="run")
            stage = "generate_script"
            job_ctx = run_ctx.with_values(job_variables(spec, run_ctx), layer="job")
            script = generate_script(spec, adapter, run_ctx, self.templates)
            with tempfile.TemporaryDirectory(prefix="fabstage_") as tmp:
                stage = "stage_inputs"
                self._stage_local([src], Path(tmp), job_ctx)
                session.put_tree(tmp, remote_dir)
            stage = "stage_script"
            script_path = posixpath.join(remote_dir, script_name)
            session.write_text(script_path, script.text)
            stage = "capture_env"
            remote_env = provenance.capture_remote_env(session, remote_dir=remote_dir)
            stage = "snapshot"
            snapshot = provenance.snapshot_text(job_ctx)
            session.write_text(posixpath.join(remote_dir, provenance.ENV_SNAPSHOT), snapshot)
            stage = "submit"
            handle = scheduler.submit(session, adapter, script_path, machine=self.machine, now=now)
            stage = "record"
            record = provenance.ProvenanceRecord(
                context_snapshot=snapshot, remote_env=remote_env, script_copy=script.text,
                results_dir_name=name, created_at=now, script_name=script_name,
                machine=self.machine, jobids=[handle.jobid],
            )
            session.write_text(posixpath.join(remote_dir, provenance.RECORD), record.record_text())
            local_dir = record.write_local(self.workspace.results / name)
        except FabError as exc:
            exc.stage = exc.stage or stage
            self.log(f"run_job {config_name} failed at stage {exc.stage}: {exc}")
            raise
        self.log(f"run_job {config_name}: submitted {handle.jobid} in {remote_dir}")
        return RunResult(handle, record, remote_dir, local_dir, job_ctx)

    # -- run_ensemble -----------------------------------------------------------

    def _replica_plan(self, config_name: str, replicas, replica_vars):
        base = self.workspace.config_dir(config_name)
        if not base.is_dir():
            raise PreconditionError(f"config directory not found: {base}", stage="resolve")
        if replica_vars is not None:
            return [([base], dict(v)) for v in replica_vars]
        if isinstance(replicas, int):
            if replicas < 1:
                raise PreconditionError(f"replica count must be >= 1, got {replicas}")
            return [([base], {}) for _ in range(replicas)]
        if replicas is None:
            sweep = base / SWEEP_DIR
            dirs = sorted(p for p in sweep.iterdir() if p.is_dir()) if sweep.is_dir() else []
            if not dirs:
                return [([base], {})]
        else:
            dirs = [Path(p) for p in replicas]
        plan = []
        for d in dirs:
            if not d.is_dir():
                raise PreconditionError(f"replica input directory not found: {d}", stage="resolve")
            plan.append(([base, d], {"replica_name": d.name}))
        return plan

    def run_ensemble(
        self,
        config_name: str,
        replicas: int | Sequence[Path | str] | None = None,
        *,
        replica_vars: Sequence[Mapping[str, Any]] | None = None,
        parallel: bool = False,
        **kwargs: Any,
    ) -> EnsembleResult:
        """Submit one job per replica, or a single packed job when the adapter allows it.

        All replicas are staged before anything is submitted.
        """
        plan = self._replica_plan(config_name, replicas, replica_vars)
        if len(plan) == 1 and not plan[0][1] and len(plan[0][0]) == 1:
            res = self.run_job(config_name, **kwargs)
            return EnsembleResult([res.handle], res.remote_dir, [res.remote_dir], False, res.local_dir)

        stage = "resolve"
        try:
            ctx, _, adapter, base_spec, runs_path, script_name = self._prepare(config_name, None, kwargs)
            specs = []
            for i, (_, rvars) in enumerate(plan, start=1):
                extra = {k: str(v) for k, v in rvars.items()}
                extra["replica_index"] = str(i)
                specs.append(JobSpec(base_spec.config_name, base_spec.application, base_spec.cores,
                                     base_spec.wall_time, 1, extra))
            try:
                packed = pack(specs, adapter)
            except PackUnsupported:
                packed = None
            stage = "connect"
            session = self.session(ctx)
            stage = "name"
            now = self.clock()
            name_ctx = ctx.with_values({"replica_count": str(len(plan))}, layer="run")
            name = provenance.name_results_dir(str(ctx["results_dir_pattern"]), name_ctx, now)
            name, remote_dir = self._unique_remote_dir(session, runs_path, name)
            # replica variables go into the snapshot so reissue can rebuild every script
            run_ctx = ctx.with_values({
                "results_dir_name": name, "job_results": remote_dir,
                "ensemble_cores": str(base_spec.cores),
                "ensemble_replicas": [dict(s.extra_vars) for s in specs],
            }, layer="run")

            stage = "generate_script"
            replica_remote = [posixpath.join(remote_dir, replica_dir(config_name, i)) for i in range(1, len(plan) + 1)]
            replica_ctx = []
            scripts = []
            for spec, rdir in zip(specs, replica_remote):
                rc = run_ctx.with_values({"job_results": rdir}, layer="run")
                rc = rc.with_values(job_variables(spec, rc), layer="job")
                replica_ctx.append(rc)
                if packed is None:
                    scripts.append(generate_script(spec, adapter, rc, self.templates))
            if packed is not None:
                top_ctx = run_ctx.with_values(job_variables(packed, run_ctx), layer="job")
                top_script = generate_script(packed, adapter, run_ctx, self.templates)

            stage = "stage_inputs"
            self._stage_replicas(session, plan, replica_ctx, replica_remote, parallel)

            stage = "stage_script"
            if packed is not None:
                session.write_text(posixpath.join(remote_dir, script_name), top_script.text)
            else:
                for rdir, script in zip(replica_remote, scripts):
                    session.write_text(posixpath.join(rdir, script_name), script.text)

            stage = "capture_env"
            remote_env = provenance.capture_remote_env(session, remote_dir=remote_dir)
            stage = "snapshot"
            if packed is not None:
                snap = provenance.snapshot_text(top_ctx)
                session.write_text(posixpath.join(remote_dir, provenance.ENV_SNAPSHOT), snap)
            else:
                for rdir, rc in zip(replica_remote, replica_ctx):
                    session.write_text(posixpath.join(rdir, provenance.REMOTE_ENV), remote_env)
                    session.write_text(posixpath.join(rdir, provenance.ENV_SNAPSHOT), provenance.snapshot_text(rc))
                snap = provenance.snapshot_text(run_ctx)
                session.write_text(posixpath.join(remote_dir, provenance.ENV_SNAPSHOT), snap)

            stage = "submit"
            if packed is not None:
                handles = [scheduler.submit(session, adapter, posixpath.join(remote_dir, script_name),
                                            machine=self.machine, now=now)]
                script_copy = top_script.text
            else:
                handles = [scheduler.submit(session, adapter, posixpath.join(rdir, script_name),
                                            machine=self.machine, now=now) for rdir in replica_remote]
                script_copy = scripts[0].text
            stage = "record"
            record = provenance.ProvenanceRecord(
                context_snapshot=snap, remote_env=remote_env, script_copy=script_copy,
                results_dir_name=name, created_at=now, script_name=script_name,
                machine=self.machine, jobids=[h.jobid for h in handles],
            )
            session.write_text(posixpath.join(remote_dir, provenance.RECORD), record.record_text())
            local_dir = record.write_local(self.workspace.results / name)
        except FabError as exc:
            exc.stage = exc.stage or stage
            self.log(f"run_ensemble {config_name} failed at stage {exc.stage}: {exc}")
            raise
        self.log(f"run_ensemble {config_name}: {len(plan)} replicas, {len(handles)} submission(s) in {remote_dir}")
        return EnsembleResult(handles, remote_dir, replica_remote, packed is not None, local_dir)

    def _stage_replicas(self, session: Session, plan, replica_ctx, replica_remote, parallel: bool) -> None:
        with tempfile.TemporaryDirectory(prefix="fabstage_") as tmp:
            staged = []
            for i, ((sources, _), rc) in enumerate(zip(plan, replica_ctx), start=1):
                local = Path(tmp) / str(i)
                self._stage_local(sources, local, rc)
                staged.append(local)
            if not parallel:
                for local, rdir in zip(staged, replica_remote):
                    session.put_tree(local, rdir)
                return

            def upload(pair):
                local, rdir = pair
                worker = connect(session.endpoint, **self.session_options)
                worker.add_secrets(session._secrets)
                try:
                    worker.put_tree(local, rdir)
                finally:
                    worker.state = "closed"
                return worker.transcript

            workers = min(8, len(staged))
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for entries in pool.map(upload, zip(staged, replica_remote)):
                    session.transcript.extend(entries)

    # -- reissue ----------------------------------------------------------------

    def reissue(self, results_dir: Path | str) -> tuple[JobHandle, str]:
        """Re-submit a results directory from its snapshot.

        Inputs in the directory are staged back into the original remote
        run directory and the script is regenerated from ``env.yml``.  An
        ensemble is resubmitted the way it first ran: one packed job, or one
        job per replica.  Returns the (first) new handle and the regenerated
        top-level script text.
        """
        local = Path(results_dir)
        if not local.is_absolute() and not local.exists():
            local = self.workspace.results / local
        if not (local / provenance.ENV_SNAPSHOT).is_file():
            raise PreconditionError(f"no {provenance.ENV_SNAPSHOT} in {local}")
        snap = provenance.load_snapshot(local)
        record = provenance.load_record(local) if (local / provenance.RECORD).is_file() else {}
        script_name = record.get("script_name") or str(snap.get("script_name", "job.sh"))
        adapter = self.adapter(snap)
        remote_dir = str(snap["job_results"])
        config_name = str(snap["config"])

        # (remote script path, script) pairs; the first is compared with the retained copy
        jobs: list[tuple[str, RenderedScript]] = []
        if "ensemble_replicas" in snap:
            base = JobSpec.from_context(snap, config_name, cores=int(snap["ensemble_cores"]))
            specs = [replace(base, extra_vars=dict(rv)) for rv in snap["ensemble_replicas"]]
            try:
                packed = pack(specs, adapter)
            except PackUnsupported:
                packed = None
            if packed is not None:
                jobs.append((posixpath.join(remote_dir, script_name), generate_script(packed, adapter, snap, self.templates)))
            else:
                for i, spec in enumerate(specs, start=1):
                    rdir = posixpath.join(remote_dir, replica_dir(config_name, i))
                    rc = snap.with_values({"job_results": rdir}, layer="run")
                    rc = rc.with_values(job_variables(spec, rc), layer="job")
                    jobs.append((posixpath.join(rdir, script_name), generate_script(spec, adapter, rc, self.templates)))
        else:
            spec = JobSpec.from_context(snap, config_name)
            jobs.append((posixpath.join(remote_dir, script_name), generate_script(spec, adapter, snap, self.templates)))

        retained = local / script_name
        if retained.is_file() and retained.read_text(encoding="utf-8") != jobs[0][1].text:
            raise PreconditionError(f"regenerated script differs from retained {retained}")
        session = self.session(self.context())
        for path, script in jobs[1:]:
            if session.exists(path) and session.read_text(path) != script.text:
                raise PreconditionError(f"regenerated script differs from retained {path}")
        skip = {provenance.ENV_SNAPSHOT, provenance.REMOTE_ENV, provenance.RECORD, script_name}
        with tempfile.TemporaryDirectory(prefix="fabstage_") as tmp:
            for path in local.rglob("*"):
                rel = path.relative_to(local)
                if path.is_file() and rel.as_posix() not in skip and path.name != ".fabkit_incomplete":
                    (Path(tmp) / rel).parent.mkdir(parents=True, exist_ok=True)
                    shutil.copyfile(path, Path(tmp) / rel)
            session.put_tree(tmp, remote_dir)
        for path, script in jobs:
            session.write_text(path, script.text)
        provenance.capture_remote_env(session, remote_dir=remote_dir)
        session.write_text(posixpath.join(remote_dir, provenance.ENV_SNAPSHOT), provenance.snapshot_text(snap))
        handles = [scheduler.submit(session, adapter, path, machine=self.machine, now=self.clock()) for path, _ in jobs]
        self.log(f"reissue {local.name}: submitted {', '.join(h.jobid for h in handles)}")
        return handles[0], jobs[0][1].text

    # -- queue ------------------------------------------------------------------

    def status(self, jobid: str | None = None) -> list[JobStatus]:
        ctx = self.context()
        return scheduler.status(self.session(ctx), self.adapter(ctx), jobid)

    @staticmethod
    def format_status(statuses: Sequence[JobStatus]) -> str:
        rows = [("JOBID", "STATE")] + [(s.jobid or "?", s.state) for s in statuses]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{width}}  {b}" for a, b in rows)

    def stat(self) -> str:
        report = self.format_status(self.status())
        self.echo(report)
        return report

    def monitor(self, interval: float | None = None, *, max_polls: int | None = None,
                max_failures: int | None = None) -> list[tuple[datetime, list[JobStatus] | None]]:
        """``stat`` every ``interval`` seconds until interrupted.

        Transport failures are reported and retried on the next tick; more
        than ``max_failures`` consecutive failures re-raise.
        """
        ctx = self.context()
        interval = float(interval if interval is not None else ctx.get("monitor_interval", 120))
        max_failures = int(max_failures if max_failures is not None else ctx.get("monitor_max_failures", 5))
        polls: list[tuple[datetime, list[JobStatus] | None]] = []
        failures = 0
        try:
            while max_polls is None or len(polls) < max_polls:
                if polls:
                    self.sleep(interval)
                stamp = self.clock()
                try:
                    statuses = self.status()
                except TransportError as exc:
                    failures += 1
                    polls.append((stamp, None))
                    self.echo(f"[{stamp:%Y-%m-%d %H:%M:%S}] poll failed ({failures}/{max_failures}): {exc}")
                    if self._session is not None:
                        self._closed_transcripts.extend(self._session.transcript)
                        self._session.state = "closed"
                        self._session = None
                    if failures > max_failures:
                        raise
                    continue
                failures = 0
                polls.append((stamp, statuses))
                self.echo(f"[{stamp:%Y-%m-%d %H:%M:%S}]")
                self.echo(self.format_status(statuses))
        except KeyboardInterrupt:
            self.echo("monitor interrupted")
        return polls

    def cancel(self, jobid: str) -> str:
        ctx = self.context()
        msg = scheduler.cancel(self.session(ctx), self.adapter(ctx), jobid)
        self.log(msg)
        return msg

    def wait(self, jobid: str, *, interval: float | None = None, timeout: float | None = None) -> None:
        """Poll until ``jobid`` leaves the queue."""
        ctx = self.context()
        interval = float(interval if interval is not None else ctx.get("monitor_interval", 120))
        limit = float(timeout if timeout is not None else ctx.get("wait_timeout", 86400))
        waited = 0.0
        while True:
            current = self.status(jobid)
            if not current:
                return
            if any(s.state in ("failed", "cancelled") for s in current):
                raise JobFailed(f"job {jobid} ended in state {current[0].state}")
            if waited >= limit:
                raise JobFailed(f"job {jobid} still {current[0].state} after {limit:g}s")
            self.sleep(interval)
            waited += interval

    # -- fetch / probe / cold -----------------------------------------------------

    def fetch_results(self, pattern: str | None = None) -> list[Path]:
        ctx = self.context()
        session = self.session(ctx)
        runs_path = self.expand(ctx, "runs_path")
        if not session.isdir(runs_path):
            raise SourceMissing(f"remote results root not found: {self.machine}:{runs_path}")
        fetched = []
        for name in session.listdir(runs_path):
            if pattern and not fnmatch.fnmatch(name, pattern):
                continue
            remote = posixpath.join(runs_path, name)
            if not session.isdir(remote):
                continue
            local = self.workspace.results / name
            session.get_tree(remote, local)
            fetched.append(local)
        self.log(f"fetch_results {pattern or '*'}: {len(fetched)} directories")
        return fetched

    def probe(self, module_name: str) -> list[str]:
        ctx = self.context()
        command = ctx.get("modules_command")
        if not command:
            raise ConfigError(f"machine {self.machine!r} defines no modules_command; cannot probe modules")
        result = self.session(ctx).exec(self.expand(ctx, "modules_command"))
        tokens = (result.stdout + "\n" + result.stderr).replace(",", " ").split()
        needle = module_name.lower()
        seen: dict[str, None] = {}
        for tok in tokens:
            if needle in tok.lower():
                seen.setdefault(tok, None)
        return list(seen)

    def cold(self, **kwargs: Any) -> BuildReport:
        """Stage a source tree and run the application's build recipe remotely."""
        ctx = self.context(None, kwargs)
        application = str(ctx.get("application"))
        source = Path(self.expand(ctx, "source_path")) if "source_path" in ctx else self.workspace.root / "sources" / application
        if not source.is_absolute():
            source = self.workspace.root / source
        if not source.is_dir():
            raise PreconditionError(f"source directory not found: {source}")
        recipe_name = str(ctx.get("build_template") or f"{application}_build")
        recipe = render(self.templates.load(recipe_name), ctx).text
        build_path = self.expand(ctx, "build_path")
        session = self.session(ctx)
        session.put_tree(source, build_path)
        steps: list[BuildStep] = []
        for line in recipe.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            res = session.exec(f"cd {shlex_quote(build_path)} && {line}")
            steps.append(BuildStep(line, res.exit_code, res.stdout, res.stderr))
            if res.exit_code != 0:
                break
        stamp = provenance.format_timestamp(self.clock())
        log_dir = self.workspace.logs
        log_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_dir / f"cold_{provenance.sanitize(application)}_{provenance.sanitize(self.machine)}_{stamp}.log"
        with open(log_path, "w", encoding="utf-8") as fh:
            for s in steps:
                fh.write(f"$ {s.command}\n[exit {s.exit_code}]\n{s.stdout}{s.stderr}")
        report = BuildReport(steps, log_path)
        self.log(f"cold {application}: {len(steps)} steps, {'ok' if report.ok else 'FAILED'}")
        return report

    # -- local tasks ------------------------------------------------------------

    def find_blackbox(self, script_name: str) -> Path:
        for d in self.workspace.blackbox_dirs:
            path = d / script_name
            if path.is_file():
                return path
        raise PreconditionError(
            f"blackbox script {script_name!r} not found; searched: "
            + ", ".join(str(d) for d in self.workspace.blackbox_dirs)
        )

    def blackbox(self, script_name: str, args: Sequence[str] = (), *, cwd: Path | str | None = None,
                 check: bool = False) -> BlackboxResult:
        script = self.find_blackbox(script_name)
        if script.suffix == ".py":
            argv = [sys.executable, str(script)]
        elif script.suffix == ".sh" or not os.access(script, os.X_OK):
            argv = ["bash", str(script)]
        else:
            argv = [str(script)]
        argv += [str(a) for a in args]
        workdir = Path(cwd) if cwd is not None else self.workspace.root
        proc = subprocess.run(argv, cwd=workdir, capture_output=True, text=True)
        self.log(f"blackbox {script_name} {' '.join(map(str, args))} -> exit {proc.returncode}\n{proc.stdout}{proc.stderr}")
        result = BlackboxResult(proc.returncode, proc.stdout, proc.stderr, script)
        if check and proc.returncode != 0:
            raise BlackboxError(f"blackbox {script_name} exited {proc.returncode}: {proc.stderr.strip()}", proc.returncode)
        return result

    def _local_results_path(self, name: str | Path) -> Path:
        path = Path(name)
        for candidate in (path, self.workspace.results / path, self.workspace.root / path):
            if candidate.exists():
                return candidate
        raise PreconditionError(f"not found: {name} (looked in {self.workspace.results} and {self.workspace.root})")

    def archive(self, results_dir: str | Path) -> Path:
        src = self._local_results_path(results_dir)
        if not src.is_dir():
            raise PreconditionError(f"not a directory: {src}")
        stamp = provenance.format_timestamp(self.clock())
        self.workspace.archives.mkdir(parents=True, exist_ok=True)
        base = self.workspace.archives / f"{src.name}_{stamp}"
        target, n = Path(f"{base}.tar.gz"), 1
        while target.exists():
            n += 1
            target = Path(f"{base}_{n}.tar.gz")
        with tarfile.open(target, "w:gz") as tar:
            for path in sorted(src.rglob("*")):
                if path.is_file():
                    tar.add(path, arcname=path.relative_to(src).as_posix(), recursive=False)
        self.log(f"archive {src} -> {target}")
        return target

    def analyze(self, results_file: str | Path) -> list[ColumnStats]:
        return analyze_file(self._local_results_path(results_file))


def shlex_quote(s: str) -> str:
    import shlex

    return shlex.quote(s)


def _number(tok: str) -> float | None:
    try:
        value = float(tok)
    except ValueError:
        return None
    return value


def analyze_file(path: Path) -> list[ColumnStats]:
    """Count/mean/min/max of every column that holds at least one number."""
    try:
        text = Path(path).read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise PreconditionError(f"cannot read {path}: {exc}") from None
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([t for t in line.replace(",", " ").split()])
    names: list[str] = []
    if rows and all(_number(t) is None for t in rows[0]) and len(rows) > 1:
        names = rows.pop(0)
    columns: dict[int, list[float]] = {}
    for row in rows:
        for i, tok in enumerate(row):
            v = _number(tok)
            if v is not None:
                columns.setdefault(i, []).append(v)
    stats = []
    for i in sorted(columns):
        vals = columns[i]
        stats.append(ColumnStats(names[i] if i < len(names) else f"col{i + 1}", len(vals),
                                 sum(vals) / len(vals), min(vals), max(vals)))
    return stats


def format_analysis(stats: Sequence[ColumnStats]) -> str:
    lines = [f"{len(stats)} numeric columns"]
    for s in stats:
        lines.append(f"{s.name}: count={s.count} mean={s.mean:.6g} min={s.min:.6g} max={s.max:.6g}")
    return "\n".join(lines)
