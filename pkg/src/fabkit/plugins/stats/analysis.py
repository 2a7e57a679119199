"""Pure numerical helpers: percentile bootstrap, Gaussian fit, curve comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from fabkit.errors import PreconditionError

MIN_RESAMPLES = 100
MIN_GAUSSIAN_VALUES = 8


@dataclass(frozen=True)
class EnsembleResult:
    """One scalar per replica, e.g. a binding free energy."""

    values: tuple[float, ...]
    replica_ids: tuple[str, ...] = ()

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        ids = tuple(str(r) for r in self.replica_ids) or tuple(str(i) for i in range(1, len(values) + 1))
        if len(ids) != len(values):
            raise PreconditionError(f"{len(values)} values but {len(ids)} replica ids")
        bad = [r for r, v in zip(ids, values) if not math.isfinite(v)]
        if bad:
            raise PreconditionError(f"non-finite value for replica(s) {', '.join(bad)}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "replica_ids", ids)


class BootstrapSummary(NamedTuple):
    mean: float
    sigma: float
    ci_lo: float
    ci_hi: float


def _as_array(values: Sequence[float], minimum: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size < minimum:
        raise PreconditionError(f"need at least {minimum} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise PreconditionError("values must be finite")
    return arr


def bootstrap_means(values: Sequence[float], n_resamples: int, seed: int) -> np.ndarray:
    """Means of ``n_resamples`` resamples drawn with replacement.

    The resample indices depend only on ``seed``, ``n_resamples`` and the
    number of values, never on the values themselves.
    """
    arr = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, arr.size, size=(n_resamples, arr.size))
    return arr[idx].mean(axis=1)


def ensemble_analyze(values: Sequence[float], n_resamples: int = 1000, confidence: float = 0.95,
                     seed: int = 0) -> BootstrapSummary:
    """Mean, sample standard deviation and percentile-bootstrap CI of the mean."""
    arr = _as_array(values, 2)
    if not 0.0 < confidence < 1.0:
        raise PreconditionError(f"confidence must be in (0, 1), got {confidence}")
    if n_resamples < MIN_RESAMPLES:
        raise PreconditionError(f"n_resamples must be >= {MIN_RESAMPLES}, got {n_resamples}")
    mean = float(arr.mean())
    sigma = float(arr.std(ddof=1))
    if np.all(arr == arr[0]):
        return BootstrapSummary(float(arr[0]), 0.0, float(arr[0]), float(arr[0]))
    alpha = (1.0 - confidence) / 2.0
    lo, hi = np.percentile(bootstrap_means(arr, n_resamples, seed), [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return BootstrapSummary(mean, sigma, float(lo), float(hi))


@dataclass(frozen=True)
class GaussianFit:
    mu: float
    sigma: float
    statistic: float
    degenerate: bool = False


def normal_cdf(x, mu: float, sigma: float):
    z = (np.asarray(x, dtype=float) - mu) / (sigma * math.sqrt(2.0))
    return 0.5 * (1.0 + np.vectorize(math.erf)(z))


def gaussian_check(values: Sequence[float]) -> GaussianFit:
    """Moment fit plus the Kolmogorov-Smirnov distance to that fit (advisory)."""
    arr = _as_array(values, MIN_GAUSSIAN_VALUES)
    mu = float(arr.mean())
    sigma = float(arr.std(ddof=0))
    if sigma == 0.0:
        return GaussianFit(mu, 0.0, 1.0, degenerate=True)
    x = np.sort(arr)
    n = x.size
    cdf = normal_cdf(x, mu, sigma)
    upper = np.arange(1, n + 1) / n - cdf
    lower = cdf - np.arange(0, n) / n
    return GaussianFit(mu, sigma, float(max(upper.max(), lower.max())))


# -- curves -------------------------------------------------------------------

@dataclass(frozen=True)
class Curve:
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    source: str = ""

    def pairs(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.x, self.y)]


def parse_curve(text: str, source: str = "<text>") -> Curve:
    xs, ys = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise PreconditionError(f"{source}:{lineno}: expected two columns, got {line!r}")
        try:
            xs.append(float(parts[0]))
            ys.append(float(parts[1]))
        except ValueError:
            raise PreconditionError(f"{source}:{lineno}: non-numeric entry in {line!r}") from None
    if not xs:
        raise PreconditionError(f"{source}: no data points")
    return Curve(np.array(xs), np.array(ys), source)


def load_curve(path: str | Path) -> Curve:
    path = Path(path)
    if not path.is_file():
        raise PreconditionError(f"curve file not found: {path}")
    return parse_curve(path.read_text(encoding="utf-8"), str(path))


def format_curve(x: Sequence[float], y: Sequence[float], comment: str | None = None) -> str:
    lines = [f"# {comment}"] if comment else []
    lines += [f"{float(a):.17g} {float(b):.17g}" for a, b in zip(x, y)]
    return "\n".join(lines) + "\n"


def curve_distance(current: Curve, target: Curve) -> tuple[float, float]:
    """(mean absolute difference, mean squared difference) on a shared x grid."""
    if current.x.shape != target.x.shape or not np.allclose(current.x, target.x, rtol=1e-9, atol=1e-12):
        raise PreconditionError(
            f"curves {current.source or 'current'} and {target.source or 'target'} do not share x values"
        )
    diff = current.y - target.y
    return float(np.mean(np.abs(diff))), float(np.mean(diff * diff))
