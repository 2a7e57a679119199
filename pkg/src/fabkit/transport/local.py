"""Local-shell backend: "remote" paths are plain local paths."""

from __future__ import annotations

import os
import subprocess
from pathlib import Path

from fabkit.errors import PermissionDenied, SourceMissing
from fabkit.transport import Session


class LocalSession(Session):
    shell = "/bin/bash"

    def _run(self, command):
        proc = subprocess.run([self.shell, "-c", command], capture_output=True, text=True)
        return proc.returncode, proc.stdout, proc.stderr

    def _write_bytes(self, path, data):
        target = Path(path)
        if not target.parent.is_dir():
            raise SourceMissing(f"no such directory {target.parent}")
        try:
            target.write_bytes(data)
        except PermissionError as exc:
            raise PermissionDenied(str(exc)) from None

    def _read_bytes(self, path):
        try:
            return Path(path).read_bytes()
        except FileNotFoundError:
            raise SourceMissing(f"no such file {path}") from None
        except PermissionError as exc:
            raise PermissionDenied(str(exc)) from None

    def _makedirs(self, path):
        try:
            os.makedirs(path, exist_ok=True)
        except PermissionError as exc:
            raise PermissionDenied(str(exc)) from None

    def _isdir(self, path):
        return os.path.isdir(path)

    def _isfile(self, path):
        return os.path.isfile(path)

    def _listdir(self, path):
        try:
            return os.listdir(path)
        except FileNotFoundError:
            raise SourceMissing(f"no such directory {path}") from None
