"""Text templates with ``$name`` / ``${name}`` placeholders.

``$$`` renders as a literal ``$``.  A ``$`` not followed by an identifier,
a brace or another ``$`` is left untouched, so shell fragments such as
``$(date)`` or ``$1`` survive rendering.  Shell variables that look like
identifiers must be written ``$$VAR``.

Values that themselves contain placeholders are expanded recursively, at
most ``MAX_DEPTH`` levels deep.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from fabkit.errors import CyclicReference, TemplateError, TemplateNotFound, UnresolvedPlaceholder

MAX_DEPTH = 8

_PATTERN = re.compile(
    r"\$(?:(?P<escaped>\$)|(?P<named>[A-Za-z_][A-Za-z0-9_]*)|\{(?P<braced>[A-Za-z_][A-Za-z0-9_]*)\})"
)


class TemplateKind(str, enum.Enum):
    SCHEDULER_HEADER = "scheduler_header"
    APPLICATION_BODY = "application_body"
    ENV_SETUP = "env_setup"
    GENERIC = "generic"


@dataclass(frozen=True)
class Template:
    name: str
    body: str
    kind: TemplateKind = TemplateKind.GENERIC
    path: Path | None = field(default=None, compare=False)

    @property
    def placeholders(self) -> frozenset[str]:
        return scan_placeholders(self)


@dataclass(frozen=True)
class RenderedScript:
    text: str
    inputs_used: frozenset[str] = frozenset()
    templates_used: tuple[str, ...] = ()


def _names(text: str) -> Iterable[str]:
    for m in _PATTERN.finditer(text):
        name = m.group("named") or m.group("braced")
        if name:
            yield name


def scan_placeholders(template: Template | str) -> frozenset[str]:
    body = template.body if isinstance(template, Template) else template
    return frozenset(_names(body))


def placeholders_in_value(value: Any) -> set[str]:
    if isinstance(value, str):
        return set(_names(value))
    if isinstance(value, (list, tuple)):
        out: set[str] = set()
        for v in value:
            out |= placeholders_in_value(v)
        return out
    return set()


def _as_text(name: str, value: Any) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (list, tuple)):
        return " ".join(_as_text(name, v) for v in value)
    if isinstance(value, (int, float)):
        return str(value)
    raise TemplateError(f"variable {name!r} holds a {type(value).__name__}, which cannot be rendered as text")


class _Expander:
    def __init__(self, context: Mapping[str, Any]):
        self.context = context
        self.used: set[str] = set()
        self.missing: set[str] = set()
        self._cache: dict[str, str] = {}

    def expand(self, text: str, depth: int, chain: tuple[str, ...] = ()) -> str:
        def sub(m: re.Match) -> str:
            if m.group("escaped"):
                return "$"
            name = m.group("named") or m.group("braced")
            self.used.add(name)
            if name not in self.context:
                self.missing.add(name)
                return m.group(0)
            return self.value(name, depth + 1, chain + (name,))

        return _PATTERN.sub(sub, text)

    def value(self, name: str, depth: int, chain: tuple[str, ...]) -> str:
        if name in self._cache:
            return self._cache[name]
        if depth > MAX_DEPTH:
            raise CyclicReference(
                f"reference expansion exceeded depth {MAX_DEPTH}: " + " -> ".join(chain)
            )
        out = self.expand(_as_text(name, self.context[name]), depth, chain)
        self._cache[name] = out
        return out


def _normalize(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


def render(template: Template | str, context: Mapping[str, Any]) -> RenderedScript:
    """Substitute every placeholder from ``context``.

    All missing names are reported in a single UnresolvedPlaceholder.
    """
    if isinstance(template, str):
        template = Template("<inline>", template)
    expander = _Expander(context)
    try:
        text = expander.expand(_normalize(template.body), 0)
    except TemplateError as exc:
        if isinstance(exc, CyclicReference):
            raise CyclicReference(f"{exc} (template {template.name!r})") from None
        raise
    if expander.missing:
        raise UnresolvedPlaceholder(expander.missing, template=template.name)
    return RenderedScript(text, frozenset(expander.used), (template.name,))


def expand_value(context: Mapping[str, Any], key: str) -> str:
    """Fully expanded text of one context variable."""
    return render(Template(f"${{{key}}}", f"${{{key}}}"), context).text


def _terminated(text: str) -> str:
    return text if not text or text.endswith("\n") else text + "\n"


def compose(header: Template, bodies: Sequence[Template], context: Mapping[str, Any]) -> RenderedScript:
    """Join a scheduler header and application bodies into one script.

    Output is ``header + "\\n" + body_1 + ... + body_n`` where every
    non-empty body is newline-terminated.
    """
    if header.kind is not TemplateKind.SCHEDULER_HEADER:
        raise TemplateError(f"template {header.name!r} is not a scheduler header")
    if not bodies:
        raise TemplateError("compose needs at least one body template")
    parts = [render(header, context)] + [render(b, context) for b in bodies]
    text = parts[0].text + "\n" + "".join(_terminated(p.text) for p in parts[1:])
    used = frozenset().union(*(p.inputs_used for p in parts))
    names = tuple(n for p in parts for n in p.templates_used)
    return RenderedScript(text, used, names)


def infer_kind(name: str) -> TemplateKind:
    if name.endswith("_header"):
        return TemplateKind.SCHEDULER_HEADER
    if name.endswith("_env"):
        return TemplateKind.ENV_SETUP
    return TemplateKind.APPLICATION_BODY


class TemplateLibrary:
    """Ordered search path of template directories; first match wins."""

    def __init__(self, dirs: Iterable[Path | str] = ()):
        self.dirs = [Path(d) for d in dirs]

    def append(self, directory: Path | str) -> None:
        path = Path(directory)
        if path not in self.dirs:
            self.dirs.append(path)

    def find(self, name: str) -> Path:
        for d in self.dirs:
            candidate = d / name
            if candidate.is_file():
                return candidate
        raise TemplateNotFound(
            f"template {name!r} not found; searched: {', '.join(str(d) for d in self.dirs) or 'nothing'}"
        )

    def load(self, name: str, kind: TemplateKind | None = None) -> Template:
        path = self.find(name)
        body = _normalize(path.read_text(encoding="utf-8"))
        return Template(name, body, kind or infer_kind(name), path)

    def __contains__(self, name: str) -> bool:
        return any((d / name).is_file() for d in self.dirs)
