"""Retrieval-rank metrics, significance tests and scaling-curve fits.

The relative retrieval rank of sample i is the fraction of the retrieval set
more cosine-similar to the predicted embedding than the true target (ties
count half). 0 means the true segment is retrieved first, 0.5 is chance.
The retrieval set is the entire evaluated split, not the training batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats as _stats

from .errors import InvalidSpecError
from .objective import cosine_similarity

EXACT_MWU_LIMIT = 400  # exact enumeration when n1*n2 <= this


def relative_ranks(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """rank_i = (#better + 0.5 #tied) / (N - 1) over the whole retrieval set."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    n = U.shape[0]
    if n < 2:
        raise InvalidSpecError("retrieval needs at least 2 samples")
    S = cosine_similarity(U, V).values
    diag = np.diag(S)[:, None]
    better = (S > diag).sum(axis=1)
    tied = (S == diag).sum(axis=1) - 1  # the diagonal ties with itself
    return (better + 0.5 * tied) / (n - 1)


@dataclass
class RetrievalReport:
    ranks: np.ndarray
    retrieval_set_size: int
    dataset_id: str = ""
    model_id: str = ""

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks, dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.ranks.mean())

    @property
    def median(self) -> float:
        return float(np.median(self.ranks))

    @property
    def sem(self) -> float:
        if self.ranks.size < 2:
            return float("nan")
        return float(self.ranks.std(ddof=1) / np.sqrt(self.ranks.size))

    def to_json(self) -> dict:
        return {"dataset_id": self.dataset_id, "model_id": self.model_id,
                "retrieval_set_size": self.retrieval_set_size,
                "mean": self.mean, "median": self.median, "sem": self.sem,
                "ranks": self.ranks.tolist()}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalReport":
        doc = json.loads(Path(path).read_text())
        return cls(ranks=np.array(doc["ranks"]),
                   retrieval_set_size=doc["retrieval_set_size"],
                   dataset_id=doc.get("dataset_id", ""),
                   model_id=doc.get("model_id", ""))

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        lines = ["index,relative_rank"] + [f"{i},{r}" for i, r in enumerate(self.ranks)]
        path.write_text("\n".join(lines) + "\n")
        return path


def evaluate(params, pairs, zscore_stats, dataset_id: str = "",
             model_id: str = "", batch_size: int = 512) -> RetrievalReport:
    """Forward all brain windows of one split and rank against its targets."""
    from .encoder import forward
    from .features import apply_zscore

    if len(pairs) == 0:
        raise InvalidSpecError("cannot evaluate an empty split")
    U = np.concatenate([forward(params, pairs.brain[i:i + batch_size])
                        for i in range(0, len(pairs), batch_size)], axis=0)
    V = apply_zscore(pairs.audio, zscore_stats)
    ranks = relative_ranks(U, V)
    return RetrievalReport(ranks=ranks, retrieval_set_size=len(pairs),
                           dataset_id=dataset_id or pairs.dataset_id,
                           model_id=model_id)


def delta_rank(report_a: RetrievalReport, report_b: RetrievalReport) -> float:
    """Difference of mean ranks (a minus b)."""
    return report_a.mean - report_b.mean


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------

def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """U for sample a, with ties counted half (midrank convention)."""
    greater = (a[:, None] > b[None, :]).sum()
    equal = (a[:, None] == b[None, :]).sum()
    return float(greater) + 0.5 * float(equal)


def _exact_two_sided(a: np.ndarray, b: np.ndarray) -> Fraction:
    """Exact permutation p-value, valid under ties.

    Dynamic program over the sorted pooled values: for each tie group we
    choose how many members belong to sample a, accumulating 2U (an integer)
    and the number of ways. p = min(1, 2 * min(P(U <= u), P(U >= u))).
    """
    n1, n2 = len(a), len(b)
    pooled = np.concatenate([a, b])
    values, counts = np.unique(pooled, return_counts=True)
    two_u_obs = int(round(2 * _u_statistic(a, b)))

    states: dict[tuple[int, int], int] = {(0, 0): 1}
    processed = 0
    for c in counts:
        c = int(c)
        new_states: dict[tuple[int, int], int] = {}
        for (k, two_u), ways in states.items():
            y_before = processed - k
            hi = min(c, n1 - k)
            for take in range(hi + 1):
                key = (k + take, two_u + 2 * take * y_before + take * (c - take))
                new_states[key] = new_states.get(key, 0) + ways * math.comb(c, take)
        states = new_states
        processed += c

    dist: dict[int, int] = {}
    for (k, two_u), ways in states.items():
        if k == n1:
            dist[two_u] = dist.get(two_u, 0) + ways
    total = sum(dist.values())
    le = sum(w for u, w in dist.items() if u <= two_u_obs)
    ge = sum(w for u, w in dist.items() if u >= two_u_obs)
    p = Fraction(2 * min(le, ge), total)
    return min(p, Fraction(1))


def _normal_two_sided(a: np.ndarray, b: np.ndarray, u: float) -> float:
    """Normal approximation with tie-corrected variance and continuity correction."""
    n1, n2 = len(a), len(b)
    n = n1 + n2
    pooled = np.concatenate([a, b])
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(((counts.astype(np.float64) ** 3) - counts).sum())
    var = (n1 * n2 / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return 1.0
    mu = n1 * n2 / 2.0
    z = (abs(u - mu) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return min(1.0, float(math.erfc(z / math.sqrt(2.0))))


def mann_whitney_u(a, b, exact_limit: int = EXACT_MWU_LIMIT) -> tuple[float, float]:
    """Two-tailed Mann-Whitney U test.

    Returns (U for sample a, two-sided p). Exact enumeration (tie-aware) when
    n1*n2 <= exact_limit, else the tie-corrected normal approximation with
    continuity correction. Identical pooled values give p = 1 by convention.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise InvalidSpecError("both samples must be nonempty")
    u = _u_statistic(a, b)
    if np.unique(np.concatenate([a, b])).size == 1:
        return u, 1.0
    if a.size * b.size <= exact_limit:
        return u, float(_exact_two_sided(a, b))
    return u, _normal_two_sided(a, b, u)


# ---------------------------------------------------------------------------
# scaling-curve fits
# ---------------------------------------------------------------------------

@dataclass
class ScalingFit:
    """OLS of y on ln x with the standard 95% confidence machinery."""

    points: list[tuple[float, float]]
    slope: float
    intercept: float
    se_slope: float
    se_intercept: float
    residual_scale: float      # sqrt(SSR / (n - 2))
    log_x_mean: float
    sxx: float
    t_crit: float

    @property
    def slope_ci95(self) -> tuple[float, float]:
        return (self.slope - self.t_crit * self.se_slope,
                self.slope + self.t_crit * self.se_slope)

    def predict(self, x: float) -> float:
        return self.intercept + self.slope * math.log(x)

    def band(self, x: float) -> tuple[float, float]:
        """95% confidence band for the mean response at x."""
        n = len(self.points)
        lx = math.log(x)
        half = self.t_crit * self.residual_scale * math.sqrt(
            1.0 / n + (lx - self.log_x_mean) ** 2 / self.sxx)
        y = self.predict(x)
        return y - half, y + half

    def to_json(self) -> dict:
        return {"points": [list(p) for p in self.points], "slope": self.slope,
                "intercept": self.intercept, "se_slope": self.se_slope,
                "se_intercept": self.se_intercept, "slope_ci95": list(self.slope_ci95),
                "residual_scale": self.residual_scale}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path


def fit_log_linear(points: list[tuple[float, float]]) -> ScalingFit:
    """Ordinary least squares of y on ln x, with 95% CI from the usual SE formula."""
    if len(points) < 3:
        raise InvalidSpecError("need at least 3 points to fit")
    x = np.array([p[0] for p in points], dtype=np.float64)
    y = np.array([p[1] for p in points], dtype=np.float64)
    if np.any(x <= 0):
        raise InvalidSpecError("x values must be positive")
    lx = np.log(x)
    if np.unique(lx).size < len(points):
        raise InvalidSpecError("x values must be distinct")
    n = len(points)
    mx = lx.mean()
    sxx = float(((lx - mx) ** 2).sum())
    slope = float(((lx - mx) * (y - y.mean())).sum() / sxx)
    intercept = float(y.mean() - slope * mx)
    resid = y - (intercept + slope * lx)
    ssr = float((resid ** 2).sum())
    dof = n - 2
    s = math.sqrt(max(ssr, 0.0) / dof)
    se_slope = s / math.sqrt(sxx)
    se_intercept = s * math.sqrt(1.0 / n + mx ** 2 / sxx)
    t_crit = float(_stats.t.ppf(0.975, dof))
    return ScalingFit(points=[(float(a), float(b)) for a, b in points],
                      slope=slope, intercept=intercept, se_slope=se_slope,
                      se_intercept=se_intercept, residual_scale=s,
                      log_x_mean=float(mx), sxx=sxx, t_crit=t_crit)
