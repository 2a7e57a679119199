"""Core task handlers (the general-scope command set).

Handlers receive the invocation's Orchestrator, then the positional
argument(s), then ``key=value`` parameters as strings.  Unrecognised
parameters become command-line context overrides.  The return value is the
process exit code (``None`` means 0).
"""

from __future__ import annotations

from fabkit.errors import EXIT_REMOTE, UsageError
from fabkit.orchestrator import format_analysis


def _truthy(value) -> bool:
    return str(value).lower() in ("1", "true", "yes", "on")


def probe(fab, module_name=None):
    """Probe the target host for modules whose name contains the argument."""
    if not module_name:
        raise UsageError("probe needs a module name, e.g. probe:lammps")
    matches = fab.probe(module_name)
    for m in matches:
        fab.echo(m)
    if not matches:
        fab.echo(f"no modules matching {module_name!r}")


def stat(fab):
    """Status report of jobs on the target host."""
    fab.stat()


def monitor(fab, interval=None, polls=None, max_failures=None):
    """Run stat every interval seconds (default 120) until interrupted."""
    fab.monitor(
        float(interval) if interval is not None else None,
        max_polls=int(polls) if polls is not None else None,
        max_failures=int(max_failures) if max_failures is not None else None,
    )


def fetch_results(fab, pattern=None):
    """Fetch results directories (optionally matching a glob) into results/."""
    paths = fab.fetch_results(pattern)
    for p in paths:
        fab.echo(str(p))


def cancel(fab, jobid=None):
    """Cancel a queued or running job."""
    if not jobid:
        raise UsageError("cancel needs a job id, e.g. cancel:12345")
    fab.echo(fab.cancel(jobid))


def analyze(fab, results_file=None):
    """Shallow per-column statistics of a results file."""
    if not results_file:
        raise UsageError("analyze needs a file, e.g. analyze:results/run1/out.dat")
    fab.echo(format_analysis(fab.analyze(results_file)))


def run_job(fab, config=None, **kwargs):
    """Stage a config directory and submit it as one job."""
    if not config:
        raise UsageError("run_job needs a config name, e.g. run_job:cg_box,cores=64")
    res = fab.run_job(config, **kwargs)
    fab.echo(f"submitted {res.handle.jobid} -> {fab.machine}:{res.remote_dir}")


def run_application(fab, application, config=None, **kwargs):
    res = fab.run_job(config or application, application=application, **kwargs)
    fab.echo(f"submitted {res.handle.jobid} -> {fab.machine}:{res.remote_dir}")


def run_ensemble(fab, config=None, replicas=None, parallel=None, **kwargs):
    """Submit an ensemble; packed into one job if the scheduler supports it."""
    if not config:
        raise UsageError("run_ensemble needs a config name")
    res = fab.run_ensemble(
        config,
        int(replicas) if replicas is not None else None,
        parallel=_truthy(parallel) if parallel is not None else False,
        **kwargs,
    )
    mode = "packed" if res.packed else "unpacked"
    fab.echo(f"{len(res.replica_dirs)} replicas, {len(res.handles)} submission(s) ({mode}) -> {res.remote_dir}")
    for h in res.handles:
        fab.echo(h.jobid)


def blackbox(fab, script=None, *args, **kwargs):
    """Run a local blackbox script with the given arguments."""
    if not script:
        raise UsageError("blackbox needs a script name, e.g. blackbox:analyse.sh,arg1")
    extra = [f"{k}={v}" for k, v in kwargs.items()]
    result = fab.blackbox(script, [*args, *extra])
    if result.stdout:
        fab.out.write(result.stdout)
    if result.stderr:
        fab.out.write(result.stderr)
    return result.exit_code


def archive(fab, results_dir=None):
    """Archive a local results directory into archives/."""
    if not results_dir:
        raise UsageError("archive needs a results directory")
    fab.echo(str(fab.archive(results_dir)))


def cold(fab, application=None, **kwargs):
    """Copy source to the remote machine and build it there."""
    if application:
        kwargs["application"] = application
    report = fab.cold(**kwargs)
    for step in report.steps:
        fab.echo(f"[exit {step.exit_code}] {step.command}")
    fab.echo(f"log: {report.log_path}")
    if not report.ok:
        failed = report.steps[-1]
        fab.echo(failed.stderr.rstrip())
        return EXIT_REMOTE


def reissue(fab, results_dir=None):
    """Re-submit a results directory from its context snapshot."""
    if not results_dir:
        raise UsageError("reissue needs a results directory name")
    handle, _ = fab.reissue(results_dir)
    fab.echo(f"submitted {handle.jobid} -> {fab.machine}:{handle.results_dir}")


CORE_TASKS = (probe, stat, monitor, fetch_results, cancel, analyze, run_job, run_ensemble, blackbox, archive, cold, reissue)


def register_core(registry) -> None:
    for handler in CORE_TASKS:
        registry.register(handler.__name__, handler, scope="general")
