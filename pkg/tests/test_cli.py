from __future__ import annotations

import io
import textwrap

import pytest
from hypothesis import given, settings, strategies as st

from fabkit import cli
from fabkit.errors import DuplicateTask, PluginError, UsageError
from fabkit.orchestrator import Orchestrator, Workspace

from conftest import StepClock

IDENT = st.from_regex(r"[a-z_][a-z0-9_]{0,10}", fullmatch=True)
MACHINE = st.from_regex(r"[a-z][a-z0-9_.-]{0,8}(:[a-z0-9_-]{1,8})?", fullmatch=True)
ARG = st.from_regex(r"[A-Za-z0-9_./:@%+-]{1,12}", fullmatch=True)
VALUE = st.from_regex(r"[A-Za-z0-9_./:=@%+-]{0,12}", fullmatch=True)


@st.composite
def command_strings(draw):
    machine = draw(MACHINE)
    task = draw(IDENT)
    positional = draw(st.none() | ARG)
    args = draw(st.lists(ARG, max_size=3)) if positional is not None else []
    kwargs = draw(st.dictionaries(IDENT, VALUE, max_size=4))
    parts = ([positional] if positional is not None else []) + args + [f"{k}={v}" for k, v in kwargs.items()]
    spec = task + (":" + ",".join(parts) if parts else "")
    return f"fab {machine} {spec}", cli.Invocation(machine, task, positional, tuple(args), kwargs)


@settings(max_examples=300, deadline=None)
@given(command_strings())
def test_grammar_roundtrip(case):
    text, expected = case
    inv = cli.parse_command(text)
    assert inv == expected
    assert cli.format_command(inv) == text


def test_documented_literals():
    assert cli.parse(["exa", "lammps"]) == cli.Invocation("exa", "lammps")
    assert cli.parse(["exa", "probe:lammps"]) == cli.Invocation("exa", "probe", "lammps")


def test_only_first_colon_and_equals_split():
    inv = cli.parse(["m", "run_job:cfg,wall_time=1:00:00,flags=-DX=1"])
    assert inv.positional == "cfg"
    assert dict(inv.kwargs) == {"wall_time": "1:00:00", "flags": "-DX=1"}
    assert cli.parse(["m", "fetch:a:b"]).positional == "a:b"


def test_shell_split_words_rejoined():
    assert cli.parse(["m", "run_job:cfg,", "cores=64"]) == cli.parse(["m", "run_job:cfg,cores=64"])


@pytest.mark.parametrize("argv", [
    ["onlymachine"],
    ["m", ":cfg"],
    ["m", "t:a,=v"],
    ["m", "t:k=1,k=2"],
    ["m", "t:k=1,late"],
])
def test_malformed(argv):
    with pytest.raises(UsageError):
        cli.parse(argv)


def test_duplicate_task_names_both_plugins():
    reg = cli.TaskRegistry()
    reg.register("go", lambda fab: 0, plugin="one")
    with pytest.raises(DuplicateTask) as exc:
        reg.register("go", lambda fab: 0, plugin="two")
    assert "one" in str(exc.value) and "two" in str(exc.value)


def test_core_tasks_and_stats_plugin_registered(registry):
    names = set(registry.names())
    assert {"probe", "stat", "monitor", "fetch_results", "cancel", "analyze", "run_job", "run_ensemble",
            "blackbox", "archive", "cold", "reissue"} <= names
    assert {"ensemble_analyze", "ibi_run", "pmf_run", "gaussian_check"} <= names
    assert registry["ibi_run"].plugin == "stats" and registry["ibi_run"].scope == "domain"


def write_plugin(root, name="extra", body="def hello(fab, who='world'):\n    fab.echo(f'hello {who}')\n",
                 tasks="hello: {help: say hello}"):
    d = root / "plugins" / name
    d.mkdir(parents=True)
    (d / "handlers.py").write_text(body)
    (d / "plugin.yml").write_text(textwrap.dedent(f"""\
        name: {name}
        scope: problem
        module: handlers.py
        config: vars.yml
        tasks:
          {tasks}
        """))
    (d / "vars.yml").write_text("greeting_style: loud\n")
    return d


def test_plugin_from_workspace_dir(workspace):
    write_plugin(workspace.root)
    reg = cli.build_registry(workspace)
    assert reg["hello"].plugin == "extra" and reg["hello"].scope == "problem"
    fab = Orchestrator(workspace, "fake:alpha", out=io.StringIO())
    assert fab.context()["greeting_style"] == "loud"
    assert cli.dispatch(cli.parse(["fake:alpha", "hello:you"]), reg, lambda m: fab) == 0
    assert fab.out.getvalue() == "hello you\n"


def test_plugin_conflicting_with_core_is_rejected(workspace):
    write_plugin(workspace.root, name="clash", body="def stat(fab):\n    pass\n", tasks="stat: {}")
    with pytest.raises(DuplicateTask):
        cli.build_registry(workspace)


def test_plugin_missing_handler(workspace):
    write_plugin(workspace.root, name="broken", tasks="nothing_here: {}")
    with pytest.raises(PluginError):
        cli.build_registry(workspace)


def run_main(workspace, *words):
    out, err = io.StringIO(), io.StringIO()
    import contextlib

    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main(["--root", str(workspace.root), *words])
    return code, out.getvalue(), err.getvalue()


def test_main_end_to_end_state_persists(workspace):
    code, out, _ = run_main(workspace, "fake:alpha", "run_job:demo,cores=8")
    assert code == 0 and "submitted fake-1" in out
    code, out, _ = run_main(workspace, "fake:alpha", "stat")
    assert code == 0 and "fake-1" in out and "queued" in out


def test_application_fallback(workspace):
    code, out, _ = run_main(workspace, "fake:alpha", "demo")
    assert code == 0 and "submitted" in out


def test_unknown_task_suggests(workspace):
    code, _, err = run_main(workspace, "fake:alpha", "stta")
    assert code == 1
    assert err.startswith("UsageError:") and "did you mean stat" in err
    assert len(err.strip().splitlines()) == 1


def test_exit_codes_by_error_family(workspace):
    assert run_main(workspace, "nowhere", "stat")[0] == 1
    code, _, err = run_main(workspace, "fake:alpha", "cancel:fake-404")
    assert code == 3 and err.startswith("NoSuchJob:")
    code, _, err = run_main(workspace, "fake:alpha", "run_job:demo,bogus=1,application=missing_app")
    assert code == 1 and err.startswith("TemplateNotFound:")


def test_bad_handler_arguments_are_usage_errors(workspace):
    code, _, err = run_main(workspace, "fake:alpha", "stat:extra")
    assert code == 1 and err.startswith("UsageError:")


def test_blackbox_passes_extra_args(workspace):
    code, out, _ = run_main(workspace, "localhost", "blackbox:echo_args.sh,hello,world")
    assert code == 0 and out == "hello\nworld\n"


def test_list_and_version(workspace, capsys):
    code, out, _ = run_main(workspace, "--list")
    assert code == 0 and "run_ensemble" in out and "[stats/domain]" in out
    with pytest.raises(SystemExit):
        cli.main(["--version"])
    assert "fab" in capsys.readouterr().out
