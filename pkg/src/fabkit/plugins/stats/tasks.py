"""Task handlers registered by the stats plugin manifest."""

from __future__ import annotations

import math
from pathlib import Path

import yaml

from fabkit.errors import PreconditionError, UsageError
from fabkit.plugins.stats import analysis, workflows


def _read_values(fab, source: str, value_file: str) -> analysis.EnsembleResult:
    """Values from a file (first column per line) or an ensemble directory (one file per replica)."""
    path = fab._local_results_path(source)
    if path.is_file():
        ids, values = [], []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values.append(float(line.split()[0]))
            except ValueError:
                raise PreconditionError(f"{path}:{lineno}: not a number: {line!r}") from None
            ids.append(str(len(ids) + 1))
        return analysis.EnsembleResult(tuple(values), tuple(ids))
    runs = path / "RUNS"
    replica_dirs = sorted((p for p in runs.iterdir() if p.is_dir()), key=_replica_key) if runs.is_dir() else []
    if not replica_dirs:
        raise PreconditionError(f"{path} is neither a values file nor an ensemble results directory")
    ids, values = [], []
    for d in replica_dirs:
        vf = d / value_file
        if not vf.is_file():
            raise PreconditionError(f"replica {d.name} has no {value_file}")
        tokens = [t for line in vf.read_text(encoding="utf-8").splitlines()
                  if line.strip() and not line.lstrip().startswith("#") for t in line.split()]
        if not tokens:
            raise PreconditionError(f"{vf} is empty")
        try:
            values.append(float(tokens[0]))
        except ValueError:
            raise PreconditionError(f"{vf}: not a number: {tokens[0]!r}") from None
        ids.append(d.name)
    return analysis.EnsembleResult(tuple(values), tuple(ids))


def _replica_key(path: Path):
    head, _, tail = path.name.rpartition("_")
    return (head, int(tail)) if tail.isdigit() else (path.name, 0)


def write_report(dest: Path, name: str, summary: analysis.BootstrapSummary, *, n: int, seed: int,
                 n_resamples: int, confidence: float) -> tuple[Path, Path]:
    values = {
        "n": n,
        "mean": summary.mean,
        "sigma": summary.sigma,
        "ci_lo": summary.ci_lo,
        "ci_hi": summary.ci_hi,
        "confidence": confidence,
        "n_resamples": n_resamples,
        "seed": seed,
    }
    dest.mkdir(parents=True, exist_ok=True)
    text_path = dest / f"{name}.txt"
    yaml_path = dest / f"{name}.yml"
    text_path.write_text(
        "ensemble analysis (percentile bootstrap of the mean)\n"
        f"n           {n}\n"
        f"mean        {summary.mean:.10g}\n"
        f"sigma       {summary.sigma:.10g}\n"
        f"ci          [{summary.ci_lo:.10g}, {summary.ci_hi:.10g}] at {confidence:g}\n"
        f"resamples   {n_resamples}\n"
        f"seed        {seed}\n",
        encoding="utf-8",
    )
    yaml_path.write_text(yaml.safe_dump(values, sort_keys=False), encoding="utf-8")
    return text_path, yaml_path


def ensemble_analyze(fab, source=None, n_resamples=None, confidence=None, seed=None, **kwargs):
    """Mean, sigma and bootstrap CI of replica values; writes a report next to the input."""
    if not source:
        raise UsageError("ensemble_analyze needs a values file or ensemble results directory")
    ctx = fab.context(None, kwargs)
    n_resamples = int(n_resamples if n_resamples is not None else ctx["bootstrap_resamples"])
    confidence = float(confidence if confidence is not None else ctx["bootstrap_confidence"])
    seed = int(seed if seed is not None else ctx["bootstrap_seed"])
    ens = _read_values(fab, source, str(ctx.get("ensemble_value_file", "value.dat")))
    summary = analysis.ensemble_analyze(ens.values, n_resamples, confidence, seed)
    path = fab._local_results_path(source)
    dest = path if path.is_dir() else path.parent
    text_path, _ = write_report(dest, str(ctx.get("ensemble_report", "ensemble_report")), summary,
                                n=len(ens.values), seed=seed, n_resamples=n_resamples, confidence=confidence)
    fab.out.write(text_path.read_text(encoding="utf-8"))
    fab.log(f"ensemble_analyze {source}: mean={summary.mean} ci=[{summary.ci_lo}, {summary.ci_hi}]")


def gaussian_check(fab, source=None, **kwargs):
    """Fit a Gaussian by moments and report its Kolmogorov-Smirnov distance."""
    if not source:
        raise UsageError("gaussian_check needs a values file or ensemble results directory")
    ctx = fab.context(None, kwargs)
    ens = _read_values(fab, source, str(ctx.get("ensemble_value_file", "value.dat")))
    fit = analysis.gaussian_check(ens.values)
    fab.echo(f"mu {fit.mu:.10g}")
    fab.echo(f"sigma {fit.sigma:.10g}")
    fab.echo(f"ks_statistic {fit.statistic:.6g}" + (" (degenerate: zero variance)" if fit.degenerate else ""))


def ibi_run(fab, config=None, max_iter=None, tol=None, update_script=None, **kwargs):
    """Iterative run/compare/update loop; exit 0 even when not converged."""
    if not config:
        raise UsageError("ibi_run needs a config name, e.g. ibi_run:cg_water,tol=0.01")
    tol_value = float(tol) if tol is not None else None
    if tol_value is not None and not math.isfinite(tol_value):
        raise UsageError(f"tol must be finite, got {tol}")
    result = workflows.ibi_run(fab, config, max_iter=int(max_iter) if max_iter is not None else None,
                               tol_mad=tol_value, update_script=update_script, **kwargs)
    state = "converged" if result.converged else "NOT converged"
    fab.echo(f"{state} after {len(result.history)} run(s); history: {result.root / workflows.HISTORY_FILE}")


def pmf_run(fab, config=None, *distances, **kwargs):
    """Submit one ensemble replica per distance (``pmf_run:cfg,1.0,1.5`` or ``distances=1.0:1.5``)."""
    if not config:
        raise UsageError("pmf_run needs a config name and distances")
    values = list(distances)
    if "distances" in kwargs:
        values.append(kwargs.pop("distances"))
    handles = workflows.pmf_run(fab, config, workflows.parse_distances(values), **kwargs)
    for h in handles:
        fab.echo(f"submitted {h.jobid} -> {fab.machine}:{h.results_dir}")
