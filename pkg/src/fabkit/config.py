"""Layered variable space.

Layers are loaded from YAML files and merged with a fixed precedence::

    general < machine < machine_user < domain < problem < cli

Later layers overwrite same-named keys wholesale.  Machine-scoped files are
keyed by machine name; their entries are stored flattened as
``<machine>.<key>`` and promoted to top level for the selected machine at
resolve time.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from fabkit.errors import CyclicReference, MissingFile, MissingKey, ParseError, UnknownMachine

DATA_DIR = Path(__file__).parent / "data"

CLI_LAYER = "cli"


class Scope(str, enum.Enum):
    GENERAL = "general"
    MACHINE = "machine"
    MACHINE_USER = "machine_user"
    DOMAIN = "domain"
    PROBLEM = "problem"

    @property
    def rank(self) -> int:
        return _RANK[self]

    @property
    def machine_sectioned(self) -> bool:
        return self in (Scope.MACHINE, Scope.MACHINE_USER)


_RANK = {s: i for i, s in enumerate(Scope)}


def _stringify(value: Any) -> Any:
    """Scalars become strings; lists and maps are converted recursively."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return [_stringify(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _stringify(v) for k, v in value.items()}
    return str(value)


def _check_key(key: Any, source: str) -> str:
    if not isinstance(key, str) or not key or any(c.isspace() for c in key):
        raise ParseError(f"invalid variable name {key!r} (must be non-empty, no whitespace)", path=source)
    return key


@dataclass(frozen=True)
class ConfigLayer:
    scope: Scope
    entries: dict[str, Any] = field(default_factory=dict)
    source: str = "cli"
    sections: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "scope", Scope(self.scope))
        for key in self.entries:
            _check_key(key, self.source)

    @classmethod
    def from_mapping(cls, scope: Scope | str, data: Mapping[str, Any], source: str = "<memory>") -> "ConfigLayer":
        scope = Scope(scope)
        entries: dict[str, Any] = {}
        sections: list[str] = []
        for key, value in data.items():
            key = _check_key(key if not isinstance(key, (int, float)) else str(key), source)
            if scope.machine_sectioned:
                value = {} if value is None else value
                if not isinstance(value, dict):
                    raise ParseError(f"machine section {key!r} must be a mapping", path=source)
                sections.append(key)
                for sub, subval in value.items():
                    entries[f"{key}.{_check_key(str(sub), source)}"] = _stringify(subval)
            else:
                entries[key] = _stringify(value)
        return cls(scope, entries, source, tuple(sections))

    def machines(self) -> list[str]:
        """Machines named in a machine-scoped layer, in file order."""
        seen: dict[str, None] = dict.fromkeys(self.sections)
        for key in self.entries:
            seen.setdefault(key.rsplit(".", 1)[0], None)
        return list(seen)

    def section(self, machine: str) -> dict[str, Any]:
        prefix = machine + "."
        return {k[len(prefix):]: v for k, v in self.entries.items() if k.startswith(prefix)}

    @property
    def label(self) -> str:
        return self.scope.value


def load_layer(path: str | os.PathLike, scope: Scope | str) -> ConfigLayer:
    """Read one YAML file into a layer.

    A missing file is fatal only for the machine-defaults scope; any other
    scope yields an empty layer.
    """
    scope = Scope(scope)
    path = Path(path)
    if not path.is_file():
        if scope is Scope.MACHINE:
            raise MissingFile(f"machine defaults file not found: {path}")
        return ConfigLayer(scope, {}, str(path))
    text = path.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else None
        raise ParseError(str(exc.problem or exc), path=path, line=line) from None
    except yaml.YAMLError as exc:
        raise ParseError(str(exc), path=path) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ParseError("top level must be a mapping", path=path, line=1)
    return ConfigLayer.from_mapping(scope, data, str(path))


@dataclass(frozen=True)
class ResolvedContext:
    """Flattened variable map plus the winning layer of every key."""

    variables: dict[str, Any]
    provenance: dict[str, str]
    layers_searched: tuple[str, ...] = ()
    sources: dict[str, str] = field(default_factory=dict, compare=False)

    def __getitem__(self, key: str) -> Any:
        return get(self, key)

    def __contains__(self, key: object) -> bool:
        return key in self.variables

    def __iter__(self):
        return iter(self.variables)

    def __len__(self) -> int:
        return len(self.variables)

    def get(self, key: str, default: Any = None) -> Any:
        return self.variables.get(key, default)

    def items(self):
        return self.variables.items()

    def with_values(self, values: Mapping[str, Any], layer: str = "derived") -> "ResolvedContext":
        """Return a new context with ``values`` layered on top."""
        variables = dict(self.variables)
        provenance = dict(self.provenance)
        sources = dict(self.sources)
        for key, value in values.items():
            _check_key(key, layer)
            variables[key] = _stringify(value)
            provenance[key] = layer
            sources[key] = layer
        searched = self.layers_searched if layer in self.layers_searched else (*self.layers_searched, layer)
        return ResolvedContext(variables, provenance, searched, sources)

    def as_layer(self, scope: Scope | str = Scope.GENERAL) -> ConfigLayer:
        return ConfigLayer(Scope(scope), dict(self.variables), "<context>")


def get(context: ResolvedContext, key: str) -> Any:
    try:
        return context.variables[key]
    except KeyError:
        raise MissingKey(key, context.layers_searched) from None


def resolve(
    layers: Iterable[ConfigLayer],
    machine: str | None,
    cli_overrides: Mapping[str, Any] | None = None,
    *,
    check_cycles: bool = True,
) -> ResolvedContext:
    """Merge ``layers`` for ``machine`` with last-writer-wins precedence.

    Layers are ordered by scope rank; layers of equal scope keep their
    input order.  ``machine=None`` skips machine selection (no machine
    layers are consulted).
    """
    ordered = sorted(layers, key=lambda layer: layer.scope.rank)
    if machine is not None:
        machine_layers = [l for l in ordered if l.scope is Scope.MACHINE]
        if not any(machine in l.machines() for l in machine_layers):
            known = sorted({m for l in machine_layers for m in l.machines()})
            raise UnknownMachine(f"unknown machine {machine!r}; known machines: {', '.join(known) or 'none'}")

    variables: dict[str, Any] = {}
    provenance: dict[str, str] = {}
    sources: dict[str, str] = {}
    searched: list[str] = []

    def apply(entries: Mapping[str, Any], label: str, source: str) -> None:
        if label not in searched:
            searched.append(label)
        for key, value in entries.items():
            variables[key] = value
            provenance[key] = label
            sources[key] = source

    for layer in ordered:
        if layer.scope.machine_sectioned:
            if machine is None:
                continue
            apply(layer.section(machine), layer.label, layer.source)
        else:
            apply(layer.entries, layer.label, layer.source)
    if cli_overrides:
        for key in cli_overrides:
            _check_key(key, CLI_LAYER)
        apply({k: _stringify(v) for k, v in cli_overrides.items()}, CLI_LAYER, CLI_LAYER)
    elif CLI_LAYER not in searched:
        searched.append(CLI_LAYER)

    if check_cycles:
        find_cycle(variables)
    return ResolvedContext(variables, provenance, tuple(searched), sources)


def find_cycle(variables: Mapping[str, Any]) -> None:
    """Raise CyclicReference if any value references itself transitively."""
    from fabkit.templates import placeholders_in_value

    graph = {k: [r for r in placeholders_in_value(v) if r in variables] for k, v in variables.items()}
    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(graph, WHITE)
    for start in graph:
        if color[start] != WHITE:
            continue
        stack = [(start, iter(graph[start]))]
        path = [start]
        color[start] = GREY
        while stack:
            node, children = stack[-1]
            for child in children:
                if color[child] == GREY:
                    cycle = path[path.index(child):] + [child]
                    raise CyclicReference("cyclic variable reference: " + " -> ".join(cycle))
                if color[child] == WHITE:
                    color[child] = GREY
                    path.append(child)
                    stack.append((child, iter(graph[child])))
                    break
            else:
                color[node] = BLACK
                path.pop()
                stack.pop()


def user_config_dir() -> Path:
    env = os.environ.get("FABKIT_CONFIG_DIR")
    if env:
        return Path(env)
    base = os.environ.get("XDG_CONFIG_HOME") or os.path.join(os.path.expanduser("~"), ".config")
    return Path(base) / "fabkit"


def machines_file(root: Path) -> Path:
    """machines.yml location: config dir override, then workspace, then packaged copy."""
    env = os.environ.get("FABKIT_CONFIG_DIR")
    for candidate in ([Path(env) / "machines.yml"] if env else []) + [Path(root) / "machines.yml"]:
        if candidate.is_file():
            return candidate
    return DATA_DIR / "machines.yml"


def general_layer() -> ConfigLayer:
    return load_layer(DATA_DIR / "defaults.yml", Scope.GENERAL)
