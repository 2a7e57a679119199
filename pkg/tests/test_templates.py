from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from fabkit.errors import CyclicReference, TemplateError, UnresolvedPlaceholder
from fabkit.templates import (
    MAX_DEPTH,
    Template,
    TemplateKind,
    TemplateLibrary,
    compose,
    infer_kind,
    render,
    scan_placeholders,
)

from oracles import fixpoint_expand


def test_render_both_placeholder_forms():
    out = render("run $app on ${cores}cores", {"app": "lmp", "cores": "8"})
    assert out.text == "run lmp on 8cores"
    assert out.inputs_used == {"app", "cores"}


def test_dollar_escape_and_shell_fragments_survive():
    out = render("echo $$HOME $(date) $1 cost: 5$", {})
    assert out.text == "echo $HOME $(date) $1 cost: 5$"


def test_all_missing_names_reported_together():
    with pytest.raises(UnresolvedPlaceholder) as exc:
        render(Template("job", "$a $b ${c} $a"), {"b": "1"})
    assert set(exc.value.names) == {"a", "c"}
    assert "job" in str(exc.value)


def test_nested_values_expand():
    ctx = {"home_path": "/home/$username", "runs_path": "$home_path/runs", "username": "ann"}
    assert render("$runs_path", ctx).text == "/home/ann/runs"


def test_depth_cap():
    ctx = {f"v{i}": f"$v{i + 1}" for i in range(MAX_DEPTH + 2)}
    ctx[f"v{MAX_DEPTH + 2}"] = "end"
    with pytest.raises(CyclicReference):
        render("$v0", ctx)
    shallow = {f"v{i}": f"$v{i + 1}" for i in range(MAX_DEPTH - 1)}
    shallow[f"v{MAX_DEPTH - 1}"] = "end"
    assert render("$v0", shallow).text == "end"


def test_self_reference_is_cyclic():
    with pytest.raises(CyclicReference):
        render("$a", {"a": "x$a"})


def test_compose_layout():
    header = Template("h_header", "#!/bin/bash\n#X $cores", TemplateKind.SCHEDULER_HEADER)
    a = Template("a", "echo a")
    b = Template("b", "echo b\n")
    out = compose(header, [a, b], {"cores": "2"})
    assert out.text == "#!/bin/bash\n#X 2\necho a\necho b\n"
    assert out.templates_used == ("h_header", "a", "b")


def test_compose_requires_header_kind():
    with pytest.raises(TemplateError):
        compose(Template("a", "x"), [Template("b", "y")], {})


def test_crlf_normalised():
    assert render(Template("t", "a\r\nb\r\n"), {}).text == "a\nb\n"


def test_kind_inference():
    assert infer_kind("slurm_header") is TemplateKind.SCHEDULER_HEADER
    assert infer_kind("archer_env") is TemplateKind.ENV_SETUP
    assert infer_kind("lammps") is TemplateKind.APPLICATION_BODY


def test_library_first_match_wins(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    (a / "demo").write_text("from a\n")
    (b / "demo").write_text("from b\n")
    (b / "only_b").write_text("b\n")
    lib = TemplateLibrary([a, b])
    assert lib.load("demo").body == "from a\n"
    assert "only_b" in lib and "nothing" not in lib


# -- property: recursive expansion agrees with a fixpoint oracle -------------

NAMES = ["a", "b", "c", "d", "e"]
literal = st.text(alphabet="xyz -/.0123", min_size=0, max_size=4)
piece = st.one_of(literal, st.sampled_from(NAMES).map(lambda n: "${%s}" % n), st.just("$$"))
text_st = st.lists(piece, max_size=6).map("".join)


@settings(max_examples=400, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(NAMES), text_st), max_size=5), text_st)
def test_expansion_matches_fixpoint_oracle(pairs, body):
    # keep the reference graph acyclic: a value may only mention later names
    ctx = {}
    for name, value in pairs:
        allowed = NAMES[NAMES.index(name) + 1:]
        if all(n in allowed for n in scan_placeholders(value)):
            ctx[name] = value
    missing = scan_placeholders(body) - set(ctx)
    referenced = set()
    frontier = set(scan_placeholders(body)) & set(ctx)
    while frontier:
        referenced |= frontier
        frontier = {n for k in frontier for n in scan_placeholders(ctx[k])} - referenced
        missing |= frontier - set(ctx)
        frontier &= set(ctx)
    if missing:
        with pytest.raises(UnresolvedPlaceholder):
            render(body, ctx)
    else:
        assert render(body, ctx).text == fixpoint_expand(body, ctx)
