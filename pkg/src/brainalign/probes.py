"""Linear decodability probes over embedding spaces.

Ridge regression with an intercept, 7 regularization strengths log-spaced in
[1e-3, 1e3] chosen per target by efficient leave-one-out error on each
training fold, evaluated by Pearson correlation on held-out folds of a
grouped 5-fold split (each group is one 30-second chunk, so no fold mixes
segments of a chunk).

Probed spaces: the brain-module embeddings, the audio feature vectors, and
the flattened raw windows (n_channels x 120 dims). Probed targets: recording
day, |hour - 12|, the mel/spectral centroid, and the voice flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSpecError
from .rng import philox

DEFAULT_ALPHAS = tuple(np.logspace(-3.0, 3.0, 7))
N_FOLDS = 5
PROBE_SPACES = ("brain", "audio", "raw")
PROBE_TARGETS = ("recording_day", "hour_from_noon", "mel_centroid", "voice_flag")
UMAP_EXPORT_HYPERPARAMS = {"n_neighbors": 50, "min_dist": 0.8, "metric": "cosine",
                           "n_components": 2}


def group_fold_assignments(groups: np.ndarray, k: int = N_FOLDS,
                           seed: int = 0) -> np.ndarray:
    """Fold index per row; whole groups are dealt round-robin after a seeded shuffle."""
    uniq = sorted(set(groups.tolist()))
    if len(uniq) < k:
        raise InvalidSpecError(f"need >= {k} distinct groups, got {len(uniq)}")
    order = list(uniq)
    philox(seed, 0xF07D).shuffle(order)
    fold_of = {g: i % k for i, g in enumerate(order)}
    return np.array([fold_of[g] for g in groups], dtype=np.int64)


def standardize(X: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance columns (variance floored for constants)."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), 1e-12)
    return (X - mean) / std


def ridge_fit(X: np.ndarray, y: np.ndarray, alpha: float) -> tuple[np.ndarray, float]:
    """Closed-form ridge with intercept (intercept not penalized)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    yc = y - ym
    d = X.shape[1]
    w = np.linalg.solve(Xc.T @ Xc + alpha * np.eye(d), Xc.T @ yc)
    return w, float(ym - xm @ w)


def _loo_mse_per_alpha(Xc: np.ndarray, yc: np.ndarray,
                       alphas: tuple[float, ...]) -> np.ndarray:
    """Efficient leave-one-out MSE of centered ridge, one value per alpha.

    Uses the SVD hat-matrix identity; the fitted intercept adds 1/n to every
    leverage.
    """
    n = Xc.shape[0]
    U, s, _ = np.linalg.svd(Xc, full_matrices=False)
    Uy = U.T @ yc
    U2 = U ** 2
    out = np.empty(len(alphas))
    for j, alpha in enumerate(alphas):
        shrink = s ** 2 / (s ** 2 + alpha)
        fitted = U @ (shrink * Uy)
        h = U2 @ shrink + 1.0 / n
        resid = (yc - fitted) / np.maximum(1.0 - h, 1e-12)
        out[j] = float(np.mean(resid ** 2))
    return out


def pearson_r(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


@dataclass
class RidgeCVResult:
    fold_r: list[float]            # NaN where the held-out target was constant
    alphas_chosen: list[float]
    n_folds: int

    @property
    def mean_r(self) -> float:
        finite = [r for r in self.fold_r if np.isfinite(r)]
        return float(np.mean(finite)) if finite else float("nan")


def ridge_cv(X: np.ndarray, y: np.ndarray, groups: np.ndarray,
             alphas: tuple[float, ...] = DEFAULT_ALPHAS, k: int = N_FOLDS,
             seed: int = 0) -> RidgeCVResult:
    """Grouped k-fold ridge with per-fold LOO alpha selection; X is standardized."""
    X = standardize(X)
    y = np.asarray(y, dtype=np.float64)
    groups = np.asarray(groups)
    if X.shape[0] != y.shape[0] or X.shape[0] != groups.shape[0]:
        raise InvalidSpecError("X, y and groups must agree in length")
    folds = group_fold_assignments(groups, k, seed)
    fold_r: list[float] = []
    chosen: list[float] = []
    for f in range(k):
        test = folds == f
        train = ~test
        Xtr, ytr = X[train], y[train]
        xm, ym = Xtr.mean(axis=0), ytr.mean()
        Xc, yc = Xtr - xm, ytr - ym
        mse = _loo_mse_per_alpha(Xc, yc, alphas)
        alpha = float(alphas[int(np.argmin(mse))])
        chosen.append(alpha)
        w, b = ridge_fit(Xtr, ytr, alpha)
        pred = X[test] @ w + b
        fold_r.append(pearson_r(pred, y[test]))
    return RidgeCVResult(fold_r=fold_r, alphas_chosen=chosen, n_folds=k)


def build_probe_matrix(params, pairs, space: str,
                       batch_size: int = 512) -> tuple[np.ndarray, dict, np.ndarray]:
    """(X, targets, groups) for one embedding space.

    `params` may be None for the non-model spaces. Targets with no finite
    values (e.g. missing voice labels) are omitted with a notice.
    """
    from .encoder import forward

    if space not in PROBE_SPACES:
        raise InvalidSpecError(f"unknown probe space {space!r}")
    if space == "brain":
        if params is None:
            raise InvalidSpecError("brain space needs encoder params")
        X = np.concatenate([forward(params, pairs.brain[i:i + batch_size])
                            for i in range(0, len(pairs), batch_size)], axis=0)
    elif space == "audio":
        X = np.asarray(pairs.audio, dtype=np.float64)
    else:
        X = pairs.brain.reshape(len(pairs), -1).astype(np.float64)

    targets = {
        "recording_day": pairs.day_index.astype(np.float64),
        "hour_from_noon": np.abs(pairs.hour - 12.0),
        "mel_centroid": pairs.centroid.astype(np.float64),
        "voice_flag": pairs.voice.astype(np.float64),
    }
    kept = {}
    for name, vals in targets.items():
        if np.any(np.isfinite(vals)):
            kept[name] = vals
    return X, kept, np.asarray(pairs.chunk_ids)


@dataclass
class ProbeReport:
    """mean/per-fold Pearson r for each (space, target) pair."""

    entries: list[dict] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def add(self, space: str, target: str, result: RidgeCVResult) -> None:
        self.entries.append({"space": space, "target": target,
                             "mean_r": result.mean_r, "fold_r": result.fold_r,
                             "alphas": result.alphas_chosen})

    def mean_r(self, space: str, target: str) -> float:
        for e in self.entries:
            if e["space"] == space and e["target"] == target:
                return e["mean_r"]
        raise KeyError((space, target))

    def to_json(self) -> dict:
        return {"entries": self.entries, "skipped": self.skipped}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    def save_csv(self, path: str | Path) -> Path:
        lines = ["space,target,fold,r,alpha"]
        for e in self.entries:
            for i, (r, a) in enumerate(zip(e["fold_r"], e["alphas"])):
                lines.append(f"{e['space']},{e['target']},{i},{r},{a}")
        Path(path).write_text("\n".join(lines) + "\n")
        return Path(path)


def probe_embedding_spaces(params, pairs, spaces=PROBE_SPACES,
                           targets=PROBE_TARGETS, alphas=DEFAULT_ALPHAS,
                           k: int = N_FOLDS, seed: int = 0) -> ProbeReport:
    """Run every requested (space, target) ridge probe on one split."""
    report = ProbeReport()
    for space in spaces:
        X, available, groups = build_probe_matrix(params, pairs, space)
        for target in targets:
            if target not in available:
                report.skipped.append(f"{space}/{target}: no finite target values")
                continue
            y = available[target]
            finite = np.isfinite(y)
            if not np.all(finite):
                X_t, y_t, g_t = X[finite], y[finite], groups[finite]
            else:
                X_t, y_t, g_t = X, y, groups
            result = ridge_cv(X_t, y_t, g_t, alphas=alphas, k=k, seed=seed)
            report.add(space, target, result)
    return report
