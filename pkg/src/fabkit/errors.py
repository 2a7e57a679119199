"""Exception hierarchy.

Every error carries the process exit code it maps to.  The CLI prints
``<ClassName>: <message>`` on one line so outer scripts can match on the
class prefix.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_USER = 1
EXIT_REMOTE = 2
EXIT_SCHEDULER = 3


class FabError(Exception):
    exit_code = EXIT_USER

    def __init__(self, message: str = "", *, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def one_line(self) -> str:
        msg = " ".join(str(self).split())
        if self.stage:
            msg = f"[stage {self.stage}] {msg}"
        return f"{type(self).__name__}: {msg}"


# -- user / configuration errors (exit 1) ---------------------------------

class ConfigError(FabError):
    pass


class MissingFile(ConfigError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, *, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class UnknownMachine(ConfigError):
    pass


class MissingKey(ConfigError, KeyError):
    def __init__(self, key: str, layers_searched=()):
        self.key = key
        self.layers_searched = list(layers_searched)
        searched = ", ".join(self.layers_searched) or "none"
        super().__init__(f"variable {key!r} is not defined (layers searched: {searched})")

    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0])


class UsageError(ConfigError):
    pass


class PluginError(ConfigError):
    pass


class DuplicateTask(PluginError):
    pass


class TemplateError(ConfigError):
    pass


class TemplateNotFound(TemplateError):
    pass


class UnresolvedPlaceholder(TemplateError):
    def __init__(self, names, *, template: str | None = None):
        self.names = sorted(set(names))
        where = f" in template {template!r}" if template else ""
        super().__init__(f"unresolved placeholders{where}: {', '.join(self.names)}")
        self.template = template


class CyclicReference(TemplateError):
    pass


class PreconditionError(ConfigError):
    pass


class BlackboxError(FabError):
    """A local blackbox script failed; ``exit_code`` is the script's own."""

    def __init__(self, message: str, exit_code: int = EXIT_USER):
        super().__init__(message)
        self.exit_code = exit_code


# -- remote / transport errors (exit 2) -----------------------------------

class TransportError(FabError):
    exit_code = EXIT_REMOTE


class AuthFailed(TransportError):
    pass


class HostKeyMismatch(TransportError):
    pass


class Unreachable(TransportError):
    pass


class SessionClosed(TransportError):
    pass


class TransportDropped(TransportError):
    pass


class SourceMissing(TransportError):
    pass


class PermissionDenied(TransportError):
    pass


class PartialTransfer(TransportError):
    def __init__(self, message: str, summary=None):
        super().__init__(message)
        self.summary = summary


class RemoteCommandFailed(TransportError):
    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


# -- scheduler errors (exit 3) --------------------------------------------

class SchedulerError(FabError):
    exit_code = EXIT_SCHEDULER


class SubmitRejected(SchedulerError):
    def __init__(self, message: str, stderr: str = ""):
        super().__init__(message + (f"; stderr: {stderr.strip()}" if stderr.strip() else ""))
        self.stderr = stderr


class JobIdParseFailed(SchedulerError):
    def __init__(self, message: str, stdout: str = ""):
        super().__init__(f"{message}; stdout: {stdout!r}")
        self.stdout = stdout


class NoSuchJob(SchedulerError):
    pass


class PackUnsupported(SchedulerError):
    pass


class HeterogeneousSpecs(SchedulerError):
    pass


class JobFailed(SchedulerError):
    pass
