"""Multi-job workflows built from orchestrator primitives.

``ibi_run``
    run -> wait -> fetch -> compare with a target curve -> blackbox update,
    repeated until the mean absolute difference drops below a tolerance.
``pmf_run``
    one ensemble with a replica per constrained distance.
"""

from __future__ import annotations

import glob
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from fabkit import provenance
from fabkit.errors import FabError, JobFailed, PreconditionError
from fabkit.plugins.stats.analysis import Curve, curve_distance, load_curve
from fabkit.scheduler import JobHandle

HISTORY_FILE = "history.yml"


class IterationAborted(FabError):
    """An IBI iteration failed; carries the iteration index and the cause."""

    def __init__(self, iteration: int, cause: FabError):
        super().__init__(f"iteration {iteration}: {cause.one_line()}")
        self.iteration = iteration
        self.cause = cause
        self.exit_code = cause.exit_code


@dataclass
class ConvergenceState:
    iteration: int
    current_curve: list[tuple[float, float]]
    target_curve: list[tuple[float, float]]
    mad: float
    msd: float
    converged: bool
    run_dir: str = ""
    jobid: str = ""

    def __post_init__(self):
        if self.iteration < 0 or self.mad < 0 or self.msd < 0:
            raise ValueError(f"invalid convergence state {self.iteration}/{self.mad}/{self.msd}")

    def summary(self) -> dict[str, Any]:
        return {"iteration": self.iteration, "mad": self.mad, "msd": self.msd, "converged": self.converged,
                "run_dir": self.run_dir, "jobid": self.jobid}


@dataclass
class IBIResult:
    history: list[ConvergenceState]
    converged: bool
    tolerance: float
    root: Path
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        """Index of the last iteration run (number of potential updates applied)."""
        return self.history[-1].iteration if self.history else 0


def write_history(root: Path, history: Sequence[ConvergenceState], tolerance: float, converged: bool) -> Path:
    path = root / HISTORY_FILE
    doc = {
        "tolerance": tolerance,
        "converged": converged,
        "iterations": [
            {**s.summary(), "curve": [list(p) for p in s.current_curve]} for s in history
        ],
    }
    path.write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
    return path


def _results_root(fab, prefix: str, config_name: str) -> Path:
    stamp = provenance.format_timestamp(fab.clock())
    base = fab.workspace.results / provenance.sanitize(f"{prefix}_{config_name}_{fab.machine}_{stamp}")
    root, n = base, 1
    while root.exists():
        n += 1
        root = Path(f"{base}_{n}")
    root.mkdir(parents=True)
    return root


def _fetch_run(fab, name: str) -> Path:
    fetched = fab.fetch_results(glob.escape(name))
    if not fetched:
        raise JobFailed(f"results directory {name} not found on {fab.machine}")
    return fetched[0]


def ibi_run(fab, config_name: str, *, max_iter: int | None = None, tol_mad: float | None = None,
            update_script: str | None = None, **kwargs: Any) -> IBIResult:
    """Iterate simulation and potential update until the produced curve matches the target.

    ``max_iter`` bounds the number of simulations.  Reaching it without
    converging is not an error; the result's ``converged`` flag is False.
    """
    ctx = fab.context(config_name, kwargs)
    max_iter = int(max_iter if max_iter is not None else ctx.get("ibi_max_iter", 20))
    tol = float(tol_mad if tol_mad is not None else ctx.get("ibi_tolerance", 0.01))
    update_script = str(update_script or ctx.get("ibi_update_script", ""))
    if max_iter < 1:
        raise PreconditionError(f"max_iter must be >= 1, got {max_iter}")
    if not math.isfinite(tol) or tol < 0:
        raise PreconditionError(f"tolerance must be a finite number >= 0, got {tol}")
    config_dir = fab.workspace.config_dir(config_name)
    target_path = config_dir / str(ctx["ibi_target"])
    potential_name = str(ctx["ibi_potential"])
    curve_name = str(ctx["ibi_curve"])
    if not target_path.is_file():
        raise PreconditionError(f"target curve not found: {target_path}")
    if not (config_dir / potential_name).is_file():
        raise PreconditionError(f"initial potential not found: {config_dir / potential_name}")
    if not update_script:
        raise PreconditionError("no update script given (update_script=... or ibi_update_script)")
    fab.find_blackbox(update_script)
    target: Curve = load_curve(target_path)

    root = _results_root(fab, "ibi", config_name)
    inputs = root / "inputs"
    current_input = inputs / "iter_0"
    shutil.copytree(config_dir, current_input, ignore=shutil.ignore_patterns("fabkit.yml", "SWEEP"))
    history: list[ConvergenceState] = []
    converged = False
    for k in range(max_iter):
        try:
            res = fab.run_job(config_name, input_dir=current_input, ibi_iteration=str(k), **kwargs)
            fab.wait(res.handle.jobid)
            local = _fetch_run(fab, res.results_dir_name)
            curve_path = local / curve_name
            if not curve_path.is_file():
                raise JobFailed(f"job {res.handle.jobid} produced no {curve_name} in {res.remote_dir}")
            curve = load_curve(curve_path)
            mad, msd = curve_distance(curve, target)
            converged = mad <= tol
            state = ConvergenceState(k, curve.pairs(), target.pairs(), mad, msd, converged,
                                     str(local), res.handle.jobid)
            history.append(state)
            write_history(root, history, tol, converged)
            fab.echo(f"ibi iteration {k}: mad={mad:.6g} msd={msd:.6g}{' converged' if converged else ''}")
            if converged or k + 1 == max_iter:
                break
            next_input = inputs / f"iter_{k + 1}"
            shutil.copytree(current_input, next_input)
            next_potential = next_input / potential_name
            next_potential.unlink()
            fab.blackbox(update_script, [str(curve_path), str(target_path), str(current_input / potential_name),
                                         str(next_potential)], check=True)
            if not next_potential.is_file():
                raise PreconditionError(f"update script {update_script} did not write {next_potential}")
            current_input = next_input
        except IterationAborted:
            raise
        except FabError as exc:
            write_history(root, history, tol, False)
            fab.log(f"ibi {config_name} aborted at iteration {k}: {exc.one_line()}")
            raise IterationAborted(k, exc) from exc
    write_history(root, history, tol, converged)
    fab.log(f"ibi {config_name}: {len(history)} runs, converged={converged}")
    return IBIResult(history, converged, tol, root)


def parse_distances(values: Sequence[Any]) -> list[float]:
    out = []
    try:
        for v in values:
            if isinstance(v, str):
                out.extend(float(p) for p in v.replace(":", " ").split())
            else:
                out.append(float(v))
    except ValueError as exc:
        raise PreconditionError(f"bad distance list: {exc}") from None
    return out


def check_distances(distances: Sequence[float]) -> None:
    if not distances:
        raise PreconditionError("pmf_run needs at least one distance")
    if any(not math.isfinite(d) for d in distances):
        raise PreconditionError("distances must be finite")
    for a, b in zip(distances, distances[1:]):
        if not b > a:
            raise PreconditionError(f"distances must be strictly increasing; {b:g} follows {a:g}")


def pmf_run(fab, config_name: str, distances: Sequence[float], **kwargs: Any) -> list[JobHandle]:
    """One replica per constrained distance, each seeing ``$distance`` in its inputs."""
    distances = [float(d) for d in distances]
    check_distances(distances)
    labels = [repr(d) for d in distances]
    if len(distances) == 1:
        return [fab.run_job(config_name, distance=labels[0], **kwargs).handle]
    res = fab.run_ensemble(config_name, replica_vars=[{"distance": s} for s in labels], **kwargs)
    return list(res.handles)
