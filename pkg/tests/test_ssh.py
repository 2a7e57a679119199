"""SSH backend against an in-process paramiko server on 127.0.0.1."""

from __future__ import annotations

import queue
import socket
import threading

import paramiko
import pytest

from fabkit.errors import AuthFailed, HostKeyMismatch, Unreachable
from fabkit.transport import TransportEndpoint
from fabkit.transport.ssh import SSHSession

USER = "fabuser"


class _Server(paramiko.ServerInterface):
    def __init__(self, allowed_key):
        self.allowed = allowed_key
        self.commands: "queue.Queue[str]" = queue.Queue()

    def get_allowed_auths(self, username):
        return "publickey"

    def check_auth_password(self, username, password):
        return paramiko.AUTH_FAILED

    def check_auth_publickey(self, username, key):
        ok = username == USER and key.get_base64() == self.allowed.get_base64()
        return paramiko.AUTH_SUCCESSFUL if ok else paramiko.AUTH_FAILED

    def check_channel_request(self, kind, chanid):
        return paramiko.OPEN_SUCCEEDED if kind == "session" else paramiko.OPEN_FAILED_ADMINISTRATIVELY_PROHIBITED

    def check_channel_exec_request(self, channel, command):
        self.commands.put(command.decode())
        return True


def _handle(transport: paramiko.Transport, server: _Server) -> None:
    while transport.is_active():
        channel = transport.accept(1)
        if channel is None:
            continue
        try:
            text = server.commands.get(timeout=5)
        except queue.Empty:
            channel.close()
            continue
        if text.startswith("echo "):
            channel.sendall((text[5:] + "\n").encode())
            channel.send_exit_status(0)
        else:
            channel.sendall_stderr(b"unsupported\n")
            channel.send_exit_status(127)
        channel.close()


class SSHFixture:
    def __init__(self, tmp_path):
        self.host_key = paramiko.ECDSAKey.generate()
        self.client_key = paramiko.ECDSAKey.generate()
        self.key_path = tmp_path / "id_ecdsa"
        self.client_key.write_private_key_file(str(self.key_path))
        self.sock = socket.socket()
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(8)
        self.port = self.sock.getsockname()[1]
        self.tmp = tmp_path
        self.transports = []
        self._stop = False
        threading.Thread(target=self._serve, daemon=True).start()

    def _serve(self):
        while not self._stop:
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            t = paramiko.Transport(conn)
            t.add_server_key(self.host_key)
            self.transports.append(t)
            handler = _Server(self.client_key)
            try:
                t.start_server(server=handler)
            except Exception:
                continue
            threading.Thread(target=_handle, args=(t, handler), daemon=True).start()

    def known_hosts(self, key) -> str:
        path = self.tmp / f"known_hosts_{key.get_fingerprint().hex()[:8]}"
        hk = paramiko.HostKeys()
        hk.add(f"[127.0.0.1]:{self.port}", key.get_name(), key)
        hk.save(str(path))
        return str(path)

    def endpoint(self, known_hosts, key_path=None) -> TransportEndpoint:
        return TransportEndpoint("127.0.0.1", USER, self.port, str(key_path or self.key_path), known_hosts)

    def close(self):
        self._stop = True
        self.sock.close()
        for t in self.transports:
            t.close()


@pytest.fixture
def server(tmp_path):
    srv = SSHFixture(tmp_path)
    yield srv
    srv.close()


def no_config(tmp_path):
    return str(tmp_path / "no_ssh_config")


def test_exec_with_matching_host_key(server, tmp_path):
    s = SSHSession(server.endpoint(server.known_hosts(server.host_key)), ssh_config=no_config(tmp_path), timeout=5)
    try:
        r = s.exec("echo hello")
        assert (r.exit_code, r.stdout) == (0, "hello\n")
        assert s.exec("rm -rf /").exit_code == 127
    finally:
        s.close()


def test_host_key_mismatch_is_fatal(server, tmp_path):
    impostor = paramiko.ECDSAKey.generate()
    with pytest.raises(HostKeyMismatch):
        SSHSession(server.endpoint(server.known_hosts(impostor)), ssh_config=no_config(tmp_path), timeout=5)


def test_unknown_host_rejected_by_default(server, tmp_path):
    empty = tmp_path / "empty_known_hosts"
    empty.write_text("")
    with pytest.raises(HostKeyMismatch):
        SSHSession(server.endpoint(str(empty)), ssh_config=no_config(tmp_path), timeout=5)


def test_wrong_key_fails_auth(server, tmp_path):
    other = paramiko.ECDSAKey.generate()
    path = tmp_path / "other_key"
    other.write_private_key_file(str(path))
    with pytest.raises(AuthFailed):
        SSHSession(server.endpoint(server.known_hosts(server.host_key), path), ssh_config=no_config(tmp_path), timeout=5)


def test_unreachable_port(tmp_path):
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    endpoint = TransportEndpoint("127.0.0.1", USER, port, None, str(tmp_path / "kh"))
    with pytest.raises(Unreachable):
        SSHSession(endpoint, ssh_config=no_config(tmp_path), timeout=2)
