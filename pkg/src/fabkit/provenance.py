"""Repeatability records written into every results directory.

Files (layout documented in docs/provenance.md):

``env.yml``
    the full context: every variable with its value, winning layer and
    source file.  Variables whose names look like credentials are redacted.
``remote_env.log``
    the remote ``env`` output, verbatim.
``<script_name>``
    the submission script exactly as staged.
``record.yml``
    job ids, timestamps and the tool version.
"""

from __future__ import annotations

import difflib
import posixpath
import re
import string
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

import yaml

from fabkit import __version__
from fabkit.config import ResolvedContext
from fabkit.errors import UnresolvedPlaceholder
from fabkit.transport import REDACTED, Session

ENV_SNAPSHOT = "env.yml"
REMOTE_ENV = "remote_env.log"
RECORD = "record.yml"
TIMESTAMP_FORMAT = "%Y%m%dT%H%M%S"

SECRET_NAME = re.compile(r"(key|token|password|passwd|secret|credential)", re.IGNORECASE)
_UNSAFE = re.compile(r"[\s/\\:]+")


def is_secret_name(name: str) -> bool:
    return bool(SECRET_NAME.search(name))


def secret_values(context: Mapping[str, Any]) -> list[str]:
    """Values of credential-like variables, for transcript scrubbing."""
    out = []
    for key, value in context.items():
        if is_secret_name(key) and isinstance(value, str) and value:
            out.append(value)
    return out


class _Dumper(yaml.SafeDumper):
    pass


def _str_presenter(dumper, data):
    style = "|" if "\n" in data else None
    return dumper.represent_scalar("tag:yaml.org,2002:str", data, style=style)


_Dumper.add_representer(str, _str_presenter)


def _dump(data) -> str:
    return yaml.dump(data, Dumper=_Dumper, sort_keys=False, default_flow_style=False, allow_unicode=True, width=10_000)


def snapshot_text(context: ResolvedContext) -> str:
    variables = {}
    for key, value in context.variables.items():
        variables[key] = {
            "value": REDACTED if is_secret_name(key) else value,
            "layer": context.provenance.get(key, "unknown"),
            "source": context.sources.get(key, context.provenance.get(key, "unknown")),
        }
    doc = {
        "tool_version": __version__,
        "layers": list(context.layers_searched),
        "variables": variables,
    }
    return "# fabkit context snapshot\n" + _dump(doc)


def snapshot_context(context: ResolvedContext, dest_dir: str | Path) -> Path:
    path = Path(dest_dir) / ENV_SNAPSHOT
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(snapshot_text(context), encoding="utf-8")
    return path


def load_snapshot(source: str | Path) -> ResolvedContext:
    """Reload ``env.yml`` (path, directory or text) into a ResolvedContext."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        path = Path(source)
        if path.is_dir():
            path = path / ENV_SNAPSHOT
        text = path.read_text(encoding="utf-8")
    else:
        text = source
    doc = yaml.safe_load(text) or {}
    entries = doc.get("variables") or {}
    variables = {k: v["value"] for k, v in entries.items()}
    provenance = {k: v["layer"] for k, v in entries.items()}
    sources = {k: v.get("source", v["layer"]) for k, v in entries.items()}
    return ResolvedContext(variables, provenance, tuple(doc.get("layers") or ()), sources)


def capture_remote_env(session: Session, dest_dir: str | Path | None = None, *, remote_dir: str | None = None) -> str:
    """Run ``env`` remotely and store the output verbatim.

    Written to ``dest_dir`` locally and/or ``remote_dir`` on the session's
    host.  Returns the captured text.
    """
    result = session.exec("env")
    if result.exit_code != 0:
        from fabkit.errors import RemoteCommandFailed

        raise RemoteCommandFailed(f"env failed on {session.endpoint} (exit {result.exit_code})", result)
    text = session.scrub(result.stdout)
    if dest_dir is not None:
        path = Path(dest_dir) / REMOTE_ENV
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    if remote_dir is not None:
        session.write_text(posixpath.join(remote_dir, REMOTE_ENV), text)
    return text


def env_diff(before: str, after: str) -> list[str]:
    """Changed lines between two captures, prefixed ``-`` (old) and ``+`` (new)."""
    out = []
    for line in difflib.ndiff(before.splitlines(), after.splitlines()):
        if line[:2] in ("- ", "+ "):
            out.append(line[0] + line[2:])
    return out


def format_timestamp(now: datetime) -> str:
    if now.tzinfo is not None:
        now = now.astimezone(timezone.utc)
    return now.strftime(TIMESTAMP_FORMAT)


def parse_timestamp(text: str) -> datetime:
    return datetime.strptime(text, TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)


def sanitize(value: Any) -> str:
    return _UNSAFE.sub("_", str(value))


@dataclass(frozen=True)
class NamePattern:
    """``str.format``-style pattern such as ``{config}_{machine}_{timestamp}``.

    Include ``{timestamp}`` for names that are unique across invocations.
    """

    pattern: str

    @property
    def fields(self) -> list[str]:
        return [f for _, f, _, _ in string.Formatter().parse(self.pattern) if f]

    def render(self, context: Mapping[str, Any], now: datetime) -> str:
        values = dict(context.items())
        values.setdefault("code_version", __version__)
        values["timestamp"] = format_timestamp(now)
        missing = [f for f in self.fields if f not in values]
        if missing:
            raise UnresolvedPlaceholder(missing, template=f"results_dir_pattern {self.pattern!r}")
        parts = []
        for literal, name, spec, conv in string.Formatter().parse(self.pattern):
            parts.append(literal)
            if name:
                value = values[name]
                if isinstance(value, (list, tuple)):
                    value = "-".join(map(str, value))
                parts.append(sanitize(format(value, spec) if spec else value))
        return "".join(parts)


def name_results_dir(pattern: NamePattern | str, context: Mapping[str, Any], now: datetime) -> str:
    if isinstance(pattern, str):
        pattern = NamePattern(pattern)
    return pattern.render(context, now)


@dataclass
class ProvenanceRecord:
    context_snapshot: str
    remote_env: str
    script_copy: str
    results_dir_name: str
    created_at: datetime
    script_name: str = "job.sh"
    tool_version: str = __version__
    machine: str = ""
    jobids: list[str] = field(default_factory=list)

    def record_text(self) -> str:
        return _dump({
            "results_dir_name": self.results_dir_name,
            "machine": self.machine,
            "script_name": self.script_name,
            "created_at": self.created_at.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
            "tool_version": self.tool_version,
            "jobids": list(self.jobids),
        })

    def files(self) -> dict[str, str]:
        return {
            ENV_SNAPSHOT: self.context_snapshot,
            REMOTE_ENV: self.remote_env,
            self.script_name: self.script_copy,
            RECORD: self.record_text(),
        }

    def write_local(self, dest_dir: str | Path) -> Path:
        dest = Path(dest_dir)
        dest.mkdir(parents=True, exist_ok=True)
        for name, text in self.files().items():
            (dest / name).write_text(text, encoding="utf-8")
        return dest

    def write_remote(self, session: Session, remote_dir: str) -> None:
        for name, text in self.files().items():
            session.write_text(posixpath.join(remote_dir, name), text)


def load_record(results_dir: str | Path) -> dict:
    return yaml.safe_load((Path(results_dir) / RECORD).read_text(encoding="utf-8")) or {}
