"""Command execution and file transfer over SSH, a local shell, or a fake host.

All three backends share :class:`Session`; backends implement a handful of
primitive file operations and ``_run``.  Tree copies, transcript recording
and secret redaction live here so every backend behaves the same.
"""

from __future__ import annotations

import os
import posixpath
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from fabkit.errors import (
    PartialTransfer,
    SessionClosed,
    SourceMissing,
    TransportDropped,
    TransportError,
)

INCOMPLETE_MARKER = ".fabkit_incomplete"
REDACTED = "<redacted>"


@dataclass(frozen=True)
class TransportEndpoint:
    host: str
    username: str = ""
    port: int = 22
    key_path: str | None = None
    known_hosts: str | None = None

    @property
    def kind(self) -> str:
        if self.host.startswith("fake:"):
            return "fake"
        if self.host in ("localhost", "local"):
            return "local"
        return "ssh"

    def __str__(self) -> str:
        user = f"{self.username}@" if self.username and self.kind == "ssh" else ""
        return f"{user}{self.host}"


@dataclass(frozen=True)
class ExecResult:
    exit_code: int
    stdout: str = ""
    stderr: str = ""
    duration: float = 0.0  # milliseconds

    @property
    def ok(self) -> bool:
        return self.exit_code == 0


@dataclass(frozen=True)
class TranscriptEntry:
    kind: str  # exec | put | mkdir | get
    command: str
    exit_code: int = 0
    payload: bytes | None = field(default=None, repr=False, compare=False)

    def line(self) -> str:
        return f"{self.kind}\t{self.exit_code}\t{self.command}"


@dataclass
class TransferSummary:
    files: list[tuple[str, int]] = field(default_factory=list)
    directories: list[str] = field(default_factory=list)
    complete: bool = True
    error: str | None = None

    @property
    def total_bytes(self) -> int:
        return sum(n for _, n in self.files)


class Session(ABC):
    """An open channel to one endpoint.  Not safe for concurrent use."""

    def __init__(self, endpoint: TransportEndpoint):
        self.endpoint = endpoint
        self.state = "open"
        self.transcript: list[TranscriptEntry] = []
        self._secrets: set[str] = set()

    # -- bookkeeping ------------------------------------------------------

    def add_secrets(self, values: Iterable[str]) -> None:
        """Register values that must never be recorded in the transcript."""
        self._secrets.update(v for v in values if isinstance(v, str) and len(v) >= 4)

    def scrub(self, text: str) -> str:
        for secret in sorted(self._secrets, key=len, reverse=True):
            text = text.replace(secret, REDACTED)
        return text

    def _record(self, kind: str, command: str, exit_code: int = 0, payload: bytes | None = None) -> None:
        self.transcript.append(TranscriptEntry(kind, self.scrub(command), exit_code, payload))

    def _check_open(self) -> None:
        if self.state != "open":
            raise SessionClosed(f"session to {self.endpoint} is closed")

    def close(self) -> None:
        self.state = "closed"

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- backend primitives -----------------------------------------------

    @abstractmethod
    def _run(self, command: str) -> tuple[int, str, str]: ...

    @abstractmethod
    def _write_bytes(self, path: str, data: bytes) -> None: ...

    @abstractmethod
    def _read_bytes(self, path: str) -> bytes: ...

    @abstractmethod
    def _makedirs(self, path: str) -> None: ...

    @abstractmethod
    def _isdir(self, path: str) -> bool: ...

    @abstractmethod
    def _isfile(self, path: str) -> bool: ...

    @abstractmethod
    def _listdir(self, path: str) -> list[str]: ...

    # -- public operations --------------------------------------------------

    def exec(self, command: str) -> ExecResult:
        self._check_open()
        start = time.perf_counter()
        try:
            code, out, err = self._run(command)
        except TransportDropped:
            self._record("exec", command, -1)
            raise
        self._record("exec", command, code)
        return ExecResult(code, out, err, (time.perf_counter() - start) * 1000.0)

    def write_bytes(self, path: str, data: bytes) -> None:
        self._check_open()
        parent = posixpath.dirname(path)
        if parent and not self._isdir(parent):
            self.makedirs(parent)
        self._write_bytes(path, data)
        self._record("put", path, 0, bytes(data))

    def write_text(self, path: str, text: str) -> None:
        self.write_bytes(path, text.encode("utf-8"))

    def read_bytes(self, path: str) -> bytes:
        self._check_open()
        data = self._read_bytes(path)
        self._record("get", path)
        return data

    def read_text(self, path: str) -> str:
        return self.read_bytes(path).decode("utf-8")

    def makedirs(self, path: str) -> None:
        self._check_open()
        if not self._isdir(path):
            self._makedirs(path)
            self._record("mkdir", path)

    def exists(self, path: str) -> bool:
        self._check_open()
        return self._isdir(path) or self._isfile(path)

    def isdir(self, path: str) -> bool:
        self._check_open()
        return self._isdir(path)

    def isfile(self, path: str) -> bool:
        self._check_open()
        return self._isfile(path)

    def listdir(self, path: str) -> list[str]:
        self._check_open()
        return sorted(self._listdir(path))

    def walk_files(self, root: str) -> tuple[list[str], list[str]]:
        """Relative file and directory paths below ``root``, sorted."""
        files: list[str] = []
        dirs: list[str] = []
        pending = [""]
        while pending:
            rel = pending.pop()
            here = posixpath.join(root, rel) if rel else root
            for name in self._listdir(here):
                child = posixpath.join(rel, name) if rel else name
                if self._isdir(posixpath.join(root, child)):
                    dirs.append(child)
                    pending.append(child)
                else:
                    files.append(child)
        return sorted(files), sorted(dirs)

    def put_tree(self, local_dir: str | os.PathLike, remote_dir: str, *, delete_extraneous: bool = False) -> TransferSummary:
        """Copy a local directory tree to ``remote_dir`` (non-deleting by default)."""
        self._check_open()
        local = Path(local_dir)
        if not local.is_dir():
            raise SourceMissing(f"local directory not found: {local}")
        summary = TransferSummary()
        try:
            self.makedirs(remote_dir)
            for dirpath, dirnames, filenames in os.walk(local):
                dirnames.sort()
                rel_dir = Path(dirpath).relative_to(local).as_posix()
                rel_dir = "" if rel_dir == "." else rel_dir
                if rel_dir:
                    self.makedirs(posixpath.join(remote_dir, rel_dir))
                    summary.directories.append(rel_dir)
                for name in sorted(filenames):
                    rel = posixpath.join(rel_dir, name) if rel_dir else name
                    data = (Path(dirpath) / name).read_bytes()
                    self.write_bytes(posixpath.join(remote_dir, rel), data)
                    summary.files.append((rel, len(data)))
            if delete_extraneous:
                self._delete_extraneous(local, remote_dir)
        except TransportError as exc:
            summary.complete = False
            summary.error = str(exc)
            self._mark_incomplete_remote(remote_dir)
            raise PartialTransfer(f"upload to {self.endpoint}:{remote_dir} interrupted: {exc}", summary) from exc
        return summary

    def _delete_extraneous(self, local: Path, remote_dir: str) -> None:
        files, _ = self.walk_files(remote_dir)
        for rel in files:
            if not (local / rel).exists():
                self.exec(f"rm -f {quote(posixpath.join(remote_dir, rel))}")

    def _mark_incomplete_remote(self, remote_dir: str) -> None:
        try:
            if self._isdir(remote_dir):
                self._write_bytes(posixpath.join(remote_dir, INCOMPLETE_MARKER), b"upload interrupted\n")
        except Exception:  # best effort on an already-failing channel
            pass

    def get_tree(self, remote_dir: str, local_dir: str | os.PathLike) -> TransferSummary:
        """Copy ``remote_dir`` into ``local_dir``.

        On interruption the local tree receives an ``.fabkit_incomplete``
        marker and PartialTransfer is raised with the partial summary.
        """
        self._check_open()
        if not self._isdir(remote_dir):
            raise SourceMissing(f"remote directory not found: {self.endpoint}:{remote_dir}")
        local = Path(local_dir)
        local.mkdir(parents=True, exist_ok=True)
        marker = local / INCOMPLETE_MARKER
        summary = TransferSummary()
        try:
            files, dirs = self.walk_files(remote_dir)
            for rel in dirs:
                (local / rel).mkdir(parents=True, exist_ok=True)
                summary.directories.append(rel)
            for rel in files:
                data = self.read_bytes(posixpath.join(remote_dir, rel))
                target = local / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(data)
                summary.files.append((rel, len(data)))
        except TransportError as exc:
            summary.complete = False
            summary.error = str(exc)
            marker.write_text(f"download from {remote_dir} interrupted: {exc}\n", encoding="utf-8")
            raise PartialTransfer(f"download of {self.endpoint}:{remote_dir} interrupted: {exc}", summary) from exc
        if marker.exists() and INCOMPLETE_MARKER not in files:
            marker.unlink()
        return summary


def quote(s: str) -> str:
    import shlex

    return shlex.quote(s)


def connect(endpoint: TransportEndpoint | str, **options) -> Session:
    """Open a session to ``endpoint``.

    Fake endpoints never touch the network; ``localhost`` runs a local
    shell; anything else goes through SSH with key-based authentication.
    """
    if isinstance(endpoint, str):
        endpoint = TransportEndpoint(endpoint)
    if endpoint.kind == "fake":
        from fabkit.transport.fake import FakeSession

        return FakeSession(endpoint, **options)
    if endpoint.kind == "local":
        from fabkit.transport.local import LocalSession

        return LocalSession(endpoint)
    from fabkit.transport.ssh import SSHSession

    return SSHSession(endpoint, **options)


def replay(transcript: Iterable[TranscriptEntry], session: Session) -> None:
    """Re-apply every state-changing transcript entry to ``session``."""
    for entry in transcript:
        if entry.kind == "exec":
            session.exec(entry.command)
        elif entry.kind == "put":
            if entry.payload is None:
                raise TransportError(f"transcript entry for {entry.command} carries no payload")
            session.write_bytes(entry.command, entry.payload)
        elif entry.kind == "mkdir":
            session.makedirs(entry.command)


__all__ = [
    "ExecResult",
    "Session",
    "TranscriptEntry",
    "TransferSummary",
    "TransportEndpoint",
    "connect",
    "replay",
    "quote",
]
