"""In-memory fake host used for desk-scale testing.

A :class:`FakeHost` holds a filesystem (path -> bytes), an ordered
environment, a table of scripted command responses, a module list and a
queue that speaks three scheduler dialects (slurm-like ``sbatch``/
``squeue``/``scancel``, pbs-like ``qsub``/``qstat``/``qdel`` and the native
``fake-submit``/``fake-queue``/``fake-cancel``).

Jobs advance one lifecycle step per queue listing: a listing reports the
current states and then moves queued jobs to running and running jobs to
finished.  Finishing a job optionally executes its script with ``bash`` in
a scratch copy of the job directory and syncs the results back.
"""

from __future__ import annotations

import base64
import json
import os
import posixpath
import re
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from fabkit.errors import PermissionDenied, SourceMissing, TransportDropped
from fabkit.transport import Session, TransportEndpoint

_STATE_WORDS = {
    "fake": {"queued": "QUEUED", "running": "RUNNING"},
    "slurm": {"queued": "PENDING", "running": "RUNNING"},
    "pbs": {"queued": "Q", "running": "R"},
}


@dataclass
class FakeJob:
    jobid: str
    script: str
    workdir: str
    dialect: str
    state: str = "queued"
    exit_code: int | None = None


@dataclass
class ScriptedResponse:
    pattern: str
    exit_code: int = 0
    stdout: str = ""
    stderr: str = ""
    regex: bool = False
    effect: Callable[["FakeHost"], None] | None = None

    def matches(self, command: str) -> bool:
        if self.regex:
            return re.fullmatch(self.pattern, command) is not None
        return command == self.pattern


@dataclass
class _Fault:
    op: str
    after: int
    match: str | None
    message: str
    seen: int = 0


class FakeHost:
    def __init__(
        self,
        name: str,
        *,
        env: dict[str, str] | None = None,
        modules: list[str] | None = None,
        modules_command: str = "module avail",
        username: str = "fabuser",
        execute_jobs: bool = True,
    ):
        self.name = name
        self.env: dict[str, str] = dict(env) if env is not None else {
            "PATH": "/usr/bin:/bin",
            "HOME": f"/home/{username}",
            "USER": username,
        }
        self.modules = list(modules or [])
        self.modules_command = modules_command
        self.username = username
        self.execute_jobs = execute_jobs
        self.files: dict[str, bytes] = {}
        self.dirs: set[str] = {"/"}
        self.jobs: dict[str, FakeJob] = {}
        self.responses: list[ScriptedResponse] = []
        self.readonly: set[str] = set()
        self.job_runner: Callable[["FakeHost", FakeJob], int] | None = None
        self._faults: list[_Fault] = []
        self._counter = 0
        self.lock = threading.RLock()
        self.mkdirs(self.env.get("HOME", "/"))

    # -- scripting ----------------------------------------------------------

    def script(self, pattern: str, stdout: str = "", stderr: str = "", exit_code: int = 0, *, regex: bool = False, effect=None) -> None:
        """Register a canned response; later registrations take priority."""
        self.responses.insert(0, ScriptedResponse(pattern, exit_code, stdout, stderr, regex, effect))

    def inject_drop(self, op: str, *, after: int = 0, match: str | None = None, message: str = "connection reset by peer") -> None:
        """Make the ``after``-th next matching ``op`` (exec, read, write) raise TransportDropped."""
        self._faults.append(_Fault(op, after, match, message))

    def _maybe_fail(self, op: str, subject: str) -> None:
        for fault in list(self._faults):
            if fault.op != op or (fault.match and fault.match not in subject):
                continue
            if fault.seen >= fault.after:
                self._faults.remove(fault)
                raise TransportDropped(f"{self.name}: {fault.message} during {op} {subject}")
            fault.seen += 1

    # -- filesystem ---------------------------------------------------------

    @staticmethod
    def norm(path: str, cwd: str = "/") -> str:
        return posixpath.normpath(posixpath.join(cwd, path)).replace("//", "/")

    def mkdirs(self, path: str) -> None:
        path = self.norm(path)
        parts = [p for p in path.split("/") if p]
        cur = ""
        for part in parts:
            cur = f"{cur}/{part}"
            if cur in self.files:
                raise PermissionDenied(f"{self.name}: {cur} exists and is not a directory")
            self.dirs.add(cur)

    def write(self, path: str, data: bytes) -> None:
        path = self.norm(path)
        parent = posixpath.dirname(path)
        if parent not in self.dirs:
            raise SourceMissing(f"{self.name}: no such directory {parent}")
        if any(path == r or path.startswith(r.rstrip("/") + "/") for r in self.readonly):
            raise PermissionDenied(f"{self.name}: permission denied: {path}")
        self.files[path] = bytes(data)

    def read(self, path: str) -> bytes:
        path = self.norm(path)
        try:
            return self.files[path]
        except KeyError:
            raise SourceMissing(f"{self.name}: no such file {path}") from None

    def listdir(self, path: str) -> list[str]:
        path = self.norm(path)
        if path not in self.dirs:
            raise SourceMissing(f"{self.name}: no such directory {path}")
        prefix = path.rstrip("/") + "/"
        names = set()
        for p in list(self.files) + list(self.dirs):
            if p.startswith(prefix) and p != path:
                names.add(p[len(prefix):].split("/", 1)[0])
        return sorted(names)

    def remove(self, path: str) -> None:
        path = self.norm(path)
        prefix = path.rstrip("/") + "/"
        self.files = {p: d for p, d in self.files.items() if p != path and not p.startswith(prefix)}
        self.dirs = {d for d in self.dirs if d != path and not d.startswith(prefix)} | {"/"}

    def tree(self, root: str = "/") -> dict[str, bytes]:
        root = self.norm(root)
        prefix = root.rstrip("/") + "/"
        return {p[len(prefix):]: d for p, d in sorted(self.files.items()) if p.startswith(prefix)}

    # -- command interpreter --------------------------------------------------

    def run(self, command: str) -> tuple[int, str, str]:
        with self.lock:
            self._maybe_fail("exec", command)
            return self._run_chain(command, self.env.get("HOME", "/"))

    def _run_chain(self, command: str, cwd: str) -> tuple[int, str, str]:
        for resp in self.responses:
            if resp.matches(command):
                if resp.effect is not None:
                    resp.effect(self)
                return resp.exit_code, resp.stdout, resp.stderr
        if command.strip() == self.modules_command:
            return 0, "".join(m + "\n" for m in self.modules), ""
        segments = _split_and(command)
        out_all, err_all = [], []
        code = 0
        for seg in segments:
            seg_cmd = " ".join(shlex.quote(t) for t in seg)
            hit = next((r for r in self.responses if r.matches(seg_cmd)), None)
            if hit is not None:
                if hit.effect is not None:
                    hit.effect(self)
                code, out, err = hit.exit_code, hit.stdout, hit.stderr
            elif seg and seg[0] == "cd":
                target = self.norm(seg[1] if len(seg) > 1 else self.env.get("HOME", "/"), cwd)
                if target not in self.dirs:
                    code, out, err = 1, "", f"cd: {target}: No such file or directory\n"
                else:
                    cwd, code, out, err = target, 0, "", ""
            else:
                code, out, err = self._builtin(seg, cwd)
            out_all.append(out)
            err_all.append(err)
            if code != 0:
                break
        return code, "".join(out_all), "".join(err_all)

    def _builtin(self, argv: list[str], cwd: str) -> tuple[int, str, str]:
        if not argv:
            return 0, "", ""
        cmd, args = argv[0], argv[1:]
        if cmd == "true":
            return 0, "", ""
        if cmd == "false":
            return 1, "", ""
        if cmd == "exit":
            return int(args[0]) if args else 0, "", ""
        if cmd == "echo":
            return 0, " ".join(args) + "\n", ""
        if cmd == "pwd":
            return 0, cwd + "\n", ""
        if cmd in ("env", "printenv") and not args:
            return 0, "".join(f"{k}={v}\n" for k, v in self.env.items()), ""
        if cmd == "mkdir":
            for a in args:
                if not a.startswith("-"):
                    self.mkdirs(self.norm(a, cwd))
            return 0, "", ""
        if cmd == "cat":
            try:
                return 0, b"".join(self.read(self.norm(a, cwd)) for a in args).decode(), ""
            except SourceMissing as exc:
                return 1, "", f"cat: {exc}\n"
        if cmd == "ls":
            target = self.norm(args[-1] if args else ".", cwd)
            if target not in self.dirs:
                return 2, "", f"ls: cannot access '{target}': No such file or directory\n"
            return 0, "".join(n + "\n" for n in self.listdir(target)), ""
        if cmd == "test" and len(args) == 2:
            path = self.norm(args[1], cwd)
            ok = {"-d": path in self.dirs, "-f": path in self.files, "-e": path in self.dirs or path in self.files}.get(args[0], False)
            return (0 if ok else 1), "", ""
        if cmd == "rm":
            for a in args:
                if not a.startswith("-"):
                    self.remove(self.norm(a, cwd))
            return 0, "", ""
        handler = _SCHEDULER_COMMANDS.get(cmd)
        if handler is not None:
            return handler(self, args, cwd)
        return 127, "", f"{cmd}: command not found\n"

    # -- scheduler ------------------------------------------------------------

    def submit(self, script: str, cwd: str, dialect: str) -> tuple[int, str, str]:
        path = self.norm(script, cwd)
        if path not in self.files:
            return 1, "", f"submit: cannot open {path}: No such file\n"
        self._counter += 1
        n = self._counter
        jobid = {"slurm": str(n), "pbs": f"{n}.fakepbs", "fake": f"fake-{n}"}[dialect]
        self.jobs[jobid] = FakeJob(jobid, path, posixpath.dirname(path), dialect)
        out = {
            "slurm": f"Submitted batch job {jobid}\n",
            "pbs": f"{jobid}\n",
            "fake": f"{jobid}\n",
        }[dialect]
        return 0, out, ""

    def active_jobs(self) -> list[FakeJob]:
        return [j for j in self.jobs.values() if j.state in ("queued", "running")]

    def queue(self, dialect: str, only: str | None = None) -> tuple[int, str, str]:
        lines = []
        if dialect == "pbs":
            lines.append("Job id            Name             User              Time Use S Queue")
            lines.append("----------------  ---------------- ----------------  -------- - -----")
        for job in self.active_jobs():
            if only and job.jobid != only:
                continue
            word = _STATE_WORDS[dialect][job.state]
            if dialect == "pbs":
                name = posixpath.basename(job.script)[:16]
                lines.append(f"{job.jobid:<17} {name:<16} {self.username:<17} 00:00:00 {word} batch")
            else:
                lines.append(f"{job.jobid} {word}")
        self.advance()
        if dialect == "pbs" and len(lines) == 2:
            lines = []
        return 0, "".join(line + "\n" for line in lines), ""

    def advance(self) -> None:
        """Move every active job one lifecycle step forward."""
        with self.lock:
            for job in list(self.jobs.values()):
                if job.state == "running":
                    job.exit_code = self._execute(job)
                    job.state = "completed" if job.exit_code == 0 else "failed"
                elif job.state == "queued":
                    job.state = "running"

    def run_all(self) -> None:
        while self.active_jobs():
            self.advance()

    def cancel(self, jobid: str, dialect: str) -> tuple[int, str, str]:
        job = self.jobs.get(jobid)
        if job is None or job.state not in ("queued", "running"):
            err = {
                "slurm": f"scancel: error: Kill job error on job id {jobid}: Invalid job id specified\n",
                "pbs": f"qdel: Unknown Job Id {jobid}\n",
                "fake": f"fake-cancel: no such job {jobid}\n",
            }[dialect]
            return (153 if dialect == "pbs" else 1), "", err
        job.state = "cancelled"
        return 0, ("" if dialect != "fake" else f"cancelled {jobid}\n"), ""

    def _execute(self, job: FakeJob) -> int:
        if self.job_runner is not None:
            return self.job_runner(self, job)
        if not self.execute_jobs:
            return 0
        with tempfile.TemporaryDirectory(prefix="fakejob_") as tmp:
            root = Path(tmp)
            before = self.tree(job.workdir)
            for rel, data in before.items():
                target = root / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(data)
            env = dict(self.env)
            env["PATH"] = ":".join(p for p in (self.env.get("PATH", ""), os.environ.get("PATH", "")) if p)
            env["HOME"] = tmp
            proc = subprocess.run(
                ["bash", posixpath.basename(job.script)],
                cwd=root, env=env, capture_output=True, timeout=600,
            )
            stem = posixpath.splitext(posixpath.basename(job.script))[0]
            (root / f"{stem}.{job.jobid}.out").write_bytes(proc.stdout)
            (root / f"{stem}.{job.jobid}.err").write_bytes(proc.stderr)
            for path in sorted(root.rglob("*")):
                rel = path.relative_to(root).as_posix()
                remote = posixpath.join(job.workdir, rel)
                if path.is_dir():
                    self.mkdirs(remote)
                else:
                    data = path.read_bytes()
                    if before.get(rel) != data:
                        self.mkdirs(posixpath.dirname(remote))
                        self.files[self.norm(remote)] = data
            return proc.returncode

    # -- persistence --------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name,
            "env": self.env,
            "modules": self.modules,
            "modules_command": self.modules_command,
            "username": self.username,
            "execute_jobs": self.execute_jobs,
            "counter": self._counter,
            "dirs": sorted(self.dirs),
            "files": {p: base64.b64encode(d).decode() for p, d in sorted(self.files.items())},
            "jobs": [vars(j) for j in self.jobs.values()],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FakeHost":
        data = json.loads(text)
        host = cls(data["name"], env=data["env"], modules=data["modules"], modules_command=data["modules_command"],
                   username=data["username"], execute_jobs=data["execute_jobs"])
        host._counter = data["counter"]
        host.dirs = set(data["dirs"])
        host.files = {p: base64.b64decode(d) for p, d in data["files"].items()}
        host.jobs = {j["jobid"]: FakeJob(**j) for j in data["jobs"]}
        return host


def _split_and(command: str) -> list[list[str]]:
    lexer = shlex.shlex(command, posix=True, punctuation_chars="&;|")
    lexer.whitespace_split = True
    segments: list[list[str]] = [[]]
    for tok in lexer:
        if tok == "&&":
            segments.append([])
        else:
            segments[-1].append(tok)
    return segments


def _opt(args: list[str], flag: str) -> str | None:
    if flag in args:
        i = args.index(flag)
        return args[i + 1] if i + 1 < len(args) else None
    return None


def _positional(args: list[str]) -> str | None:
    skip = False
    for a in args:
        if skip:
            skip = False
            continue
        if a.startswith("-"):
            skip = len(a) == 2
            continue
        return a
    return None


_SCHEDULER_COMMANDS = {
    "sbatch": lambda h, a, cwd: h.submit(a[-1], cwd, "slurm") if a else (1, "", "sbatch: no script\n"),
    "squeue": lambda h, a, cwd: h.queue("slurm", _opt(a, "-j")),
    "scancel": lambda h, a, cwd: h.cancel(a[-1], "slurm") if a else (1, "", "scancel: no job id\n"),
    "qsub": lambda h, a, cwd: h.submit(a[-1], cwd, "pbs") if a else (1, "", "qsub: no script\n"),
    "qstat": lambda h, a, cwd: h.queue("pbs", _positional(a)),
    "qdel": lambda h, a, cwd: h.cancel(a[-1], "pbs") if a else (1, "", "qdel: no job id\n"),
    "fake-submit": lambda h, a, cwd: h.submit(a[-1], cwd, "fake") if a else (1, "", "fake-submit: no script\n"),
    "fake-queue": lambda h, a, cwd: h.queue("fake", _positional(a)),
    "fake-cancel": lambda h, a, cwd: h.cancel(a[-1], "fake") if a else (1, "", "fake-cancel: no job id\n"),
}


# -- process-wide registry ---------------------------------------------------

_HOSTS: dict[str, FakeHost] = {}
_REGISTRY_LOCK = threading.Lock()


def get_fake_host(name: str, state_dir: str | os.PathLike | None = None) -> FakeHost:
    """Return the named fake host, creating (or loading from ``state_dir``) on first use."""
    name = name.split(":", 1)[1] if name.startswith("fake:") else name
    with _REGISTRY_LOCK:
        host = _HOSTS.get(name)
        if host is None:
            state = Path(state_dir) / f"{name}.json" if state_dir else None
            if state is not None and state.is_file():
                host = FakeHost.from_json(state.read_text(encoding="utf-8"))
            else:
                host = FakeHost(name)
            _HOSTS[name] = host
        return host


def reset_fake_hosts() -> None:
    with _REGISTRY_LOCK:
        _HOSTS.clear()


def save_fake_host(host: FakeHost, state_dir: str | os.PathLike) -> Path:
    path = Path(state_dir) / f"{host.name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with host.lock:
        path.write_text(host.to_json(), encoding="utf-8")
    return path


class FakeSession(Session):
    def __init__(self, endpoint: TransportEndpoint, *, host: FakeHost | None = None, state_dir=None, **_ignored):
        super().__init__(endpoint)
        self.host = host if host is not None else get_fake_host(endpoint.host, state_dir)
        self.state_dir = state_dir

    def _run(self, command):
        return self.host.run(command)

    def _write_bytes(self, path, data):
        with self.host.lock:
            self.host._maybe_fail("write", path)
            self.host.write(path, data)

    def _read_bytes(self, path):
        with self.host.lock:
            self.host._maybe_fail("read", path)
            return self.host.read(path)

    def _makedirs(self, path):
        with self.host.lock:
            self.host.mkdirs(path)

    def _isdir(self, path):
        return self.host.norm(path) in self.host.dirs

    def _isfile(self, path):
        return self.host.norm(path) in self.host.files

    def _listdir(self, path):
        with self.host.lock:
            return self.host.listdir(path)

    def close(self):
        if self.state == "open" and self.state_dir:
            save_fake_host(self.host, self.state_dir)
        super().close()
