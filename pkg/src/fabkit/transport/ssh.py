"""SSH backend (paramiko): key authentication only, SFTP for files.

Host keys are checked against the user's known_hosts file.  A key that
differs from the recorded one is always fatal.  Unknown hosts are rejected
unless the user's ssh config sets ``StrictHostKeyChecking no`` or
``accept-new`` for that host.
"""

from __future__ import annotations

import logging
import os
import socket
import stat as stat_mod

import paramiko

from fabkit.errors import (
    AuthFailed,
    HostKeyMismatch,
    PermissionDenied,
    SourceMissing,
    TransportDropped,
    Unreachable,
)
from fabkit.transport import Session, TransportEndpoint

log = logging.getLogger(__name__)

DEFAULT_SSH_CONFIG = os.path.expanduser("~/.ssh/config")
DEFAULT_KNOWN_HOSTS = os.path.expanduser("~/.ssh/known_hosts")


def _lookup(endpoint: TransportEndpoint, config_path: str | None) -> dict:
    path = config_path or DEFAULT_SSH_CONFIG
    if not os.path.isfile(path):
        return {"hostname": endpoint.host}
    return paramiko.SSHConfig.from_path(path).lookup(endpoint.host)


def _load_key(paths: list[str], endpoint: TransportEndpoint) -> paramiko.PKey:
    """First readable private key among ``paths`` (any key type)."""
    for path in paths:
        if not os.path.isfile(path):
            continue
        try:
            return paramiko.PKey.from_path(path)
        except paramiko.PasswordRequiredException:
            raise AuthFailed(f"key {path} is passphrase-protected; load it into an ssh agent") from None
        except (paramiko.SSHException, OSError, ValueError) as exc:
            raise AuthFailed(f"cannot load private key {path}: {exc}") from None
    raise AuthFailed(f"no private key found for {endpoint} (tried {', '.join(paths)})")


class SSHSession(Session):
    def __init__(self, endpoint: TransportEndpoint, *, ssh_config: str | None = None, timeout: float = 15.0, **_ignored):
        super().__init__(endpoint)
        opts = _lookup(endpoint, ssh_config)
        hostname = opts.get("hostname", endpoint.host)
        port = int(opts.get("port", endpoint.port))
        username = endpoint.username or opts.get("user") or None
        key_files = [os.path.expanduser(endpoint.key_path)] if endpoint.key_path else [
            os.path.expanduser(p) for p in opts.get("identityfile", [])
        ]
        known_hosts = endpoint.known_hosts or opts.get("userknownhostsfile", DEFAULT_KNOWN_HOSTS).split()[0]
        known_hosts = os.path.expanduser(known_hosts)

        pkey = _load_key(key_files, endpoint) if key_files else None
        client = paramiko.SSHClient()
        if os.path.isfile(known_hosts):
            client.load_host_keys(known_hosts)
        strict = str(opts.get("stricthostkeychecking", "yes")).lower()
        if strict in ("no", "off", "accept-new"):
            client.set_missing_host_key_policy(paramiko.WarningPolicy())
        else:
            client.set_missing_host_key_policy(paramiko.RejectPolicy())
        try:
            client.connect(
                hostname,
                port=port,
                username=username,
                pkey=pkey,
                look_for_keys=pkey is None,
                allow_agent=pkey is None,
                password=None,
                passphrase=None,
                timeout=timeout,
                banner_timeout=timeout,
                auth_timeout=timeout,
            )
        except paramiko.BadHostKeyException as exc:
            client.close()
            raise HostKeyMismatch(
                f"host key for {hostname} does not match {known_hosts} "
                f"(got {exc.key.get_name()} {exc.key.get_fingerprint().hex()}); refusing to connect"
            ) from None
        except paramiko.PasswordRequiredException:
            client.close()
            raise AuthFailed(f"key for {endpoint} is passphrase-protected; load it into an ssh agent") from None
        except paramiko.AuthenticationException as exc:
            client.close()
            raise AuthFailed(f"key authentication to {endpoint} failed: {exc}") from None
        except paramiko.SSHException as exc:
            client.close()
            if "not found in known_hosts" in str(exc):
                raise HostKeyMismatch(f"{hostname} is not in {known_hosts}; refusing unknown host key") from None
            raise Unreachable(f"ssh negotiation with {endpoint} failed: {exc}") from None
        except (OSError, socket.timeout) as exc:
            client.close()
            raise Unreachable(f"cannot reach {hostname}:{port}: {exc}") from None
        self.client = client
        self._sftp: paramiko.SFTPClient | None = None

    @property
    def sftp(self) -> paramiko.SFTPClient:
        if self._sftp is None:
            try:
                self._sftp = self.client.open_sftp()
            except (paramiko.SSHException, OSError) as exc:
                raise TransportDropped(f"cannot open sftp channel to {self.endpoint}: {exc}") from None
        return self._sftp

    def _run(self, command):
        try:
            _, stdout, stderr = self.client.exec_command(command)
            out = stdout.read().decode("utf-8", "replace")
            err = stderr.read().decode("utf-8", "replace")
            code = stdout.channel.recv_exit_status()
        except (paramiko.SSHException, OSError, EOFError) as exc:
            raise TransportDropped(f"connection to {self.endpoint} dropped: {exc}") from None
        return code, out, err

    def _sftp_call(self, func, path, *args):
        try:
            return func(path, *args)
        except FileNotFoundError:
            raise SourceMissing(f"{self.endpoint}: no such file {path}") from None
        except PermissionError:
            raise PermissionDenied(f"{self.endpoint}: permission denied: {path}") from None
        except (paramiko.SSHException, EOFError, socket.error) as exc:
            raise TransportDropped(f"connection to {self.endpoint} dropped: {exc}") from None

    def _write_bytes(self, path, data):
        def put(p):
            with self.sftp.open(p, "wb") as fh:
                fh.write(data)
        self._sftp_call(put, path)

    def _read_bytes(self, path):
        def get(p):
            with self.sftp.open(p, "rb") as fh:
                return fh.read()
        return self._sftp_call(get, path)

    def _stat(self, path):
        try:
            return self.sftp.stat(path)
        except (FileNotFoundError, IOError):
            return None

    def _makedirs(self, path):
        parts = [p for p in path.split("/") if p]
        cur = "/" if path.startswith("/") else ""
        for part in parts:
            cur = os.path.join(cur, part) if cur else part
            if not self._isdir(cur):
                self._sftp_call(self.sftp.mkdir, cur)

    def _isdir(self, path):
        st = self._stat(path)
        return st is not None and stat_mod.S_ISDIR(st.st_mode or 0)

    def _isfile(self, path):
        st = self._stat(path)
        return st is not None and stat_mod.S_ISREG(st.st_mode or 0)

    def _listdir(self, path):
        return self._sftp_call(self.sftp.listdir, path)

    def close(self):
        if self.state == "open":
            if self._sftp is not None:
                self._sftp.close()
            self.client.close()
        super().close()
