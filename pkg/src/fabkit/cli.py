"""``fab <machine> <task>[:<config>][,<arg>...][,<key>=<value>...]``

Only the first ``:`` separates the task from its arguments and only the
first ``=`` separates a key from its value, so ``wall_time=1:00:00`` works.
Arguments are comma-separated; values cannot contain commas.
"""

from __future__ import annotations

import argparse
import difflib
import importlib
import inspect
import importlib.util
import os
import shlex
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import yaml

from fabkit import __version__
from fabkit.config import ConfigLayer, Scope, load_layer
from fabkit.errors import DuplicateTask, FabError, PluginError, UsageError

PLUGIN_MANIFEST = "plugin.yml"
BUILTIN_PLUGINS = Path(__file__).parent / "plugins"
CORE_PLUGIN = "core"


@dataclass(frozen=True)
class Invocation:
    machine: str
    task: str
    positional: str | None = None
    args: tuple[str, ...] = ()
    kwargs: Mapping[str, str] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Invocation):
            return NotImplemented
        return (self.machine, self.task, self.positional, tuple(self.args), tuple(self.kwargs.items())) == (
            other.machine, other.task, other.positional, tuple(other.args), tuple(other.kwargs.items()))

    def __hash__(self):
        return hash((self.machine, self.task, self.positional, self.args, tuple(self.kwargs.items())))


def parse(argv: Sequence[str]) -> Invocation:
    """Parse ``[machine, task-spec, ...]`` (program name already removed).

    Extra argv words are joined with commas, so a shell-split
    ``run_job:cg_box, cores=64`` parses like the unsplit form.
    """
    if len(argv) < 2:
        raise UsageError("usage: fab <machine> <task>[:<config>][,key=value...]")
    machine = argv[0]
    spec = ",".join(argv[1:])
    task, sep, rest = spec.partition(":")
    if not task:
        raise UsageError(f"missing task name in {spec!r}")
    positional: str | None = None
    args: list[str] = []
    kwargs: dict[str, str] = {}
    if sep:
        segments = [s for s in rest.split(",") if s != ""]
        for i, seg in enumerate(segments):
            if "=" in seg:
                key, _, value = seg.partition("=")
                if not key:
                    raise UsageError(f"malformed parameter {seg!r}: missing key before '='")
                if key in kwargs:
                    raise UsageError(f"parameter {key!r} given twice")
                kwargs[key] = value
            elif kwargs:
                raise UsageError(f"positional argument {seg!r} after key=value parameters")
            elif i == 0:
                positional = seg
            else:
                args.append(seg)
    return Invocation(machine, task, positional, tuple(args), kwargs)


def format_spec(inv: Invocation) -> str:
    parts = []
    if inv.positional is not None:
        parts.append(inv.positional)
    elif inv.args:
        raise UsageError("extra arguments require a first positional argument")
    parts.extend(inv.args)
    parts.extend(f"{k}={v}" for k, v in inv.kwargs.items())
    for p in parts:
        if "," in p:
            raise UsageError(f"argument {p!r} contains ','")
    return inv.task + (":" + ",".join(parts) if parts else "")


def format_argv(inv: Invocation) -> list[str]:
    return [inv.machine, format_spec(inv)]


def format_command(inv: Invocation) -> str:
    return "fab " + " ".join(shlex.quote(a) for a in format_argv(inv))


def parse_command(command: str) -> Invocation:
    words = shlex.split(command)
    if words and words[0] == "fab":
        words = words[1:]
    return parse(words)


# -- registry ---------------------------------------------------------------

Handler = Callable[..., Any]


@dataclass(frozen=True)
class TaskEntry:
    name: str
    handler: Handler
    scope: str
    plugin: str
    help: str


@dataclass
class PluginInfo:
    name: str
    scope: str
    manifest: Path
    tasks: list[str]
    template_dirs: list[Path]
    blackbox_dirs: list[Path]
    adapter_dirs: list[Path]
    layer: ConfigLayer | None


class TaskRegistry:
    def __init__(self):
        self.entries: dict[str, TaskEntry] = {}
        self.plugins: list[PluginInfo] = []
        self._frozen = False

    def register(self, name: str, handler: Handler, *, scope: str = "general", plugin: str = CORE_PLUGIN,
                 help: str = "") -> TaskEntry:
        if self._frozen:
            raise PluginError("task registry is frozen")
        if name in self.entries:
            other = self.entries[name]
            raise DuplicateTask(f"task {name!r} from plugin {plugin!r} conflicts with the one from plugin {other.plugin!r}")
        entry = TaskEntry(name, handler, scope, plugin, help or (handler.__doc__ or "").strip().split("\n")[0])
        self.entries[name] = entry
        return entry

    def freeze(self) -> None:
        self._frozen = True

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> TaskEntry:
        return self.entries[name]

    def names(self) -> list[str]:
        return sorted(self.entries)

    def suggest(self, name: str) -> list[str]:
        return difflib.get_close_matches(name, self.names(), n=3, cutoff=0.5)

    def listing(self) -> str:
        width = max((len(n) for n in self.entries), default=4)
        lines = []
        for name in self.names():
            e = self.entries[name]
            lines.append(f"{name:<{width}}  [{e.plugin}/{e.scope}]  {e.help}")
        return "\n".join(lines)


def _load_handler_module(plugin_dir: Path, module: str):
    if module.endswith(".py") or "/" in module:
        path = (plugin_dir / module).resolve()
        if not path.is_file():
            raise PluginError(f"plugin module file not found: {path}")
        mod_name = f"fabkit_plugin_{plugin_dir.name}_{path.stem}"
        spec = importlib.util.spec_from_file_location(mod_name, path)
        mod = importlib.util.module_from_spec(spec)
        sys.modules[mod_name] = mod
        spec.loader.exec_module(mod)
        return mod
    return importlib.import_module(module)


def register_plugin(manifest_path: str | os.PathLike, registry: TaskRegistry, workspace=None) -> list[str]:
    """Register the tasks a plugin manifest declares; returns their names.

    The manifest's template, blackbox and adapter directories and config
    layer are added to ``workspace`` when one is given.
    """
    manifest_path = Path(manifest_path)
    plugin_dir = manifest_path.parent
    try:
        data = yaml.safe_load(manifest_path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise PluginError(f"cannot read plugin manifest {manifest_path}: {exc}") from None
    if not isinstance(data, dict):
        raise PluginError(f"plugin manifest {manifest_path} must be a mapping")
    name = str(data.get("name") or plugin_dir.name)
    scope = str(data.get("scope", "domain"))
    if scope not in (Scope.DOMAIN.value, Scope.PROBLEM.value):
        raise PluginError(f"plugin {name}: scope must be domain or problem, got {scope!r}")
    tasks = data.get("tasks") or {}
    module = None
    if tasks:
        if not data.get("module"):
            raise PluginError(f"plugin {name} declares tasks but no module")
        module = _load_handler_module(plugin_dir, str(data["module"]))

    def dirs(key: str) -> list[Path]:
        value = data.get(key)
        if not value:
            return []
        values = value if isinstance(value, list) else [value]
        return [(plugin_dir / v).resolve() for v in values]

    registered = []
    for task_name, spec in tasks.items():
        spec = spec or {}
        if isinstance(spec, str):
            spec = {"handler": spec}
        handler_name = spec.get("handler", task_name)
        handler = getattr(module, handler_name, None)
        if handler is None or not callable(handler):
            raise PluginError(f"plugin {name}: handler {handler_name!r} not found in {data['module']}")
        help_text = spec.get("help") or (handler.__doc__ or "").strip().split("\n")[0]
        registry.register(str(task_name), handler, scope=str(spec.get("scope", scope)), plugin=name, help=help_text)
        registered.append(str(task_name))

    layer = None
    if data.get("config"):
        layer = load_layer(plugin_dir / str(data["config"]), Scope(scope))
    info = PluginInfo(name, scope, manifest_path, registered, dirs("templates"), dirs("blackbox"), dirs("adapters"), layer)
    registry.plugins.append(info)
    if workspace is not None:
        workspace.add_plugin_paths(info.template_dirs, info.blackbox_dirs, info.adapter_dirs, layer)
    return registered


def plugin_search_path(root: Path) -> list[Path]:
    paths = [BUILTIN_PLUGINS, Path(root) / "plugins"]
    extra = os.environ.get("FABKIT_PLUGIN_PATH", "")
    paths += [Path(p) for p in extra.split(os.pathsep) if p]
    return paths


def discover_manifests(paths: Iterable[Path]) -> list[Path]:
    found = []
    for base in paths:
        if (base / PLUGIN_MANIFEST).is_file():
            found.append(base / PLUGIN_MANIFEST)
        elif base.is_dir():
            found.extend(sorted(base.glob(f"*/{PLUGIN_MANIFEST}")))
    seen, unique = set(), []
    for m in found:
        key = m.resolve()
        if key not in seen:
            seen.add(key)
            unique.append(m)
    return unique


def build_registry(workspace=None, *, plugin_paths: Iterable[Path] | None = None) -> TaskRegistry:
    from fabkit import tasks as core_tasks

    registry = TaskRegistry()
    core_tasks.register_core(registry)
    root = workspace.root if workspace is not None else Path.cwd()
    for manifest in discover_manifests(plugin_paths if plugin_paths is not None else plugin_search_path(root)):
        register_plugin(manifest, registry, workspace)
    registry.freeze()
    return registry


# -- dispatch ---------------------------------------------------------------

def dispatch(inv: Invocation, registry: TaskRegistry, factory: Callable[[str], Any], *, err=None) -> int:
    """Run ``inv`` and return the process exit code (errors are printed, not raised)."""
    from fabkit import tasks as core_tasks

    err = err if err is not None else sys.stderr
    fab = None
    try:
        fab = factory(inv.machine)
        if inv.task in registry:
            handler = registry[inv.task].handler
            call_args = (fab, inv.positional, *inv.args) if inv.positional is not None or inv.args else (fab,)
            try:
                inspect.signature(handler).bind(*call_args, **dict(inv.kwargs))
            except TypeError as exc:
                raise UsageError(f"{inv.task}: {exc}") from None
            code = handler(*call_args, **dict(inv.kwargs))
        elif inv.task in fab.templates:
            code = core_tasks.run_application(fab, inv.task, inv.positional, **dict(inv.kwargs))
        else:
            hint = registry.suggest(inv.task)
            msg = f"unknown task {inv.task!r}"
            if hint:
                msg += f"; did you mean {', '.join(hint)}?"
            msg += f" (registered: {', '.join(registry.names())})"
            raise UsageError(msg)
        return int(code or 0)
    except FabError as exc:
        print(exc.one_line(), file=err)
        if fab is not None:
            fab.log(exc.one_line())
        return exc.exit_code
    except KeyboardInterrupt:
        print("Interrupted", file=err)
        return 130
    finally:
        if fab is not None:
            fab.close()


def main(argv: Sequence[str] | None = None) -> int:
    from fabkit.orchestrator import Orchestrator, Workspace

    parser = argparse.ArgumentParser(prog="fab", description="Automate remote computational research tasks.")
    parser.add_argument("--root", default=os.environ.get("FABKIT_ROOT", "."),
                        help="workspace root holding config_files/, results/, plugins/ (default: cwd)")
    parser.add_argument("--list", action="store_true", help="list registered tasks and exit")
    parser.add_argument("--version", action="version", version=f"fab {__version__}")
    parser.add_argument("words", nargs="*", help="<machine> <task>[:<config>][,key=value...]")
    ns = parser.parse_args(argv)

    root = Path(ns.root)
    workspace = Workspace(root, fake_state_dir=root.resolve() / ".fabkit" / "fake_hosts")
    try:
        registry = build_registry(workspace)
    except FabError as exc:
        print(exc.one_line(), file=sys.stderr)
        return exc.exit_code
    if ns.list:
        print(registry.listing())
        return 0
    try:
        inv = parse(ns.words)
    except UsageError as exc:
        print(exc.one_line(), file=sys.stderr)
        print("registered tasks: " + ", ".join(registry.names()), file=sys.stderr)
        return exc.exit_code
    return dispatch(inv, registry, lambda machine: Orchestrator(workspace, machine))


if __name__ == "__main__":
    sys.exit(main())
