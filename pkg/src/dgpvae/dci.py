"""DCI disentanglement, completeness and informativeness.

The importance matrix ``R`` is latents x factors. Disentanglement uses row
entropies (base k), completeness column entropies (base m).
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

# inverse regularization strengths, strongest first
C_GRID = (0.001, 0.01, 0.1, 1.0, 10.0)
ALPHA_GRID = (1.0, 0.1, 0.01, 0.001, 0.0001)


class DciError(ValueError):
    pass


@dataclass
class ImportanceMatrix:
    R: np.ndarray
    scores: list[float | None] = field(default_factory=list)
    baselines: list[float | None] = field(default_factory=list)
    predictor: str = "lasso"
    factor_names: list[str] | None = None
    score_kind: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.R.ndim != 2:
            raise DciError(f"importance matrix must be 2-D, got shape {self.R.shape}")
        if np.any(self.R < 0):
            raise DciError("importance matrix entries must be non-negative")

    @property
    def undefined(self) -> list[int]:
        return [j for j, s in enumerate(self.scores) if s is None]


@dataclass
class DciScores:
    disentanglement: float
    completeness: float
    informativeness: list[float | None]
    baselines: list[float | None] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "disentanglement": self.disentanglement,
            "completeness": self.completeness,
            "informativeness": self.informativeness,
            "informativeness_baseline": self.baselines,
        }


def _entropy(p: np.ndarray, base: float, axis: int) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=axis) / np.log(base)


def disentanglement(R) -> float:
    """Importance-weighted mean of ``1 - H_k(row)``; all-zero rows are skipped."""
    R = R.R if isinstance(R, ImportanceMatrix) else np.asarray(R, dtype=np.float64)
    total = R.sum()
    if total <= 0:
        raise DciError("importance matrix is all zero")
    m, k = R.shape
    rows = R.sum(axis=1)
    keep = rows > 0
    P = R[keep] / rows[keep, None]
    d = 1.0 - _entropy(P, k, axis=1) if k > 1 else np.ones(keep.sum())
    rho = rows[keep] / total
    return float(np.clip(np.sum(rho * d), 0.0, 1.0))


def completeness_per_factor(R) -> np.ndarray:
    R = R.R if isinstance(R, ImportanceMatrix) else np.asarray(R, dtype=np.float64)
    m, k = R.shape
    cols = R.sum(axis=0)
    out = np.full(k, np.nan)
    keep = cols > 0
    if not np.all(keep):
        warnings.warn(f"importance columns {np.flatnonzero(~keep).tolist()} are all zero; excluded",
                      RuntimeWarning, stacklevel=2)
    P = R[:, keep] / cols[keep]
    out[keep] = 1.0 - _entropy(P, m, axis=0) if m > 1 else 1.0
    return out


def completeness(R) -> float:
    c = completeness_per_factor(R)
    if np.all(np.isnan(c)):
        raise DciError("importance matrix is all zero")
    return float(np.clip(np.nanmean(c), 0.0, 1.0))


def informativeness(imp: ImportanceMatrix) -> list[float | None]:
    return list(imp.scores)


def dci_scores(imp: ImportanceMatrix) -> DciScores:
    return DciScores(disentanglement(imp), completeness(imp), informativeness(imp), list(imp.baselines))


# predictors

def _split(n: int, n_train: int | float, rng: np.random.Generator):
    if isinstance(n_train, float):
        n_train = int(round(n * n_train))
    if not 1 <= n_train < n:
        raise DciError(f"invalid train size {n_train} for {n} samples")
    perm = rng.permutation(n)
    return perm[:n_train], perm[n_train:]


def _majority_accuracy(y_train, y_test) -> float:
    vals, counts = np.unique(y_train, return_counts=True)
    return float(np.mean(y_test == vals[np.argmax(counts)]))


def _l1_logistic(C, seed):
    # multinomial softmax: one monotone latent can still carve an ordinal factor into intervals
    from sklearn.linear_model import LogisticRegression

    return LogisticRegression(penalty="l1", C=C, solver="saga", random_state=seed, max_iter=2000, tol=1e-4)


def _fit_lasso_discrete(X, y, Xv, yv, seed):
    best = None
    for C in C_GRID:
        clf = _l1_logistic(C, seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            clf.fit(X, y)
        acc = clf.score(Xv, yv)
        if best is None or acc > best[0] + 1e-12:
            best = (acc, C)
    return best[1]


def _fit_lasso_continuous(X, y, Xv, yv, seed):
    from sklearn.linear_model import Lasso

    best = None
    for alpha in ALPHA_GRID:
        reg = Lasso(alpha=alpha, random_state=seed, max_iter=5000)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            reg.fit(X, y)
        r2 = reg.score(Xv, yv)
        if best is None or r2 > best[0] + 1e-12:
            best = (r2, alpha)
    return best[1]


def _importance_lasso(Xtr, ytr, Xte, yte, discrete, seed, rng):
    from sklearn.linear_model import Lasso

    fit_idx, val_idx = _split(len(ytr), 0.8, rng)
    if discrete:
        C = _fit_lasso_discrete(Xtr[fit_idx], ytr[fit_idx], Xtr[val_idx], ytr[val_idx], seed)
        clf = _l1_logistic(C, seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            clf.fit(Xtr, ytr)
        return np.abs(clf.coef_).sum(axis=0), float(clf.score(Xte, yte))
    alpha = _fit_lasso_continuous(Xtr[fit_idx], ytr[fit_idx], Xtr[val_idx], ytr[val_idx], seed)
    reg = Lasso(alpha=alpha, random_state=seed, max_iter=5000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reg.fit(Xtr, ytr)
    return np.abs(reg.coef_), float(reg.score(Xte, yte))


def _importance_gbt(Xtr, ytr, Xte, yte, discrete, seed, rng):
    from sklearn.ensemble import GradientBoostingClassifier, GradientBoostingRegressor

    cls = GradientBoostingClassifier if discrete else GradientBoostingRegressor
    model = cls(n_estimators=50, max_depth=1, random_state=seed)
    model.fit(Xtr, ytr)
    return np.asarray(model.feature_importances_), float(model.score(Xte, yte))


PREDICTORS = {"lasso": _importance_lasso, "gbt": _importance_gbt}


def fit_importance(latents, factors, predictor_kind: str = "lasso", split: int | float = 0.8,
                   seed: int = 0, discrete: Sequence[bool] | bool = True,
                   factor_names: Sequence[str] | None = None) -> ImportanceMatrix:
    """Fit one predictor per factor column and collect per-latent importances.

    Columns of ``R`` are normalized to sum to one. Factors that are constant on
    the training split get a zero column and a ``None`` score.
    """
    Z = np.asarray(latents, dtype=np.float64)
    Y = np.asarray(factors)
    if Z.ndim != 2 or Y.ndim != 2 or Z.shape[0] != Y.shape[0]:
        raise DciError(f"latents {Z.shape} and factors {Y.shape} must be (N, m) and (N, k)")
    if predictor_kind not in PREDICTORS:
        raise DciError(f"unknown predictor {predictor_kind!r}; choose from {sorted(PREDICTORS)}")
    m, k = Z.shape[1], Y.shape[1]
    if isinstance(discrete, bool):
        discrete = [discrete] * k
    rng = np.random.default_rng(seed)
    tr, te = _split(Z.shape[0], split, rng)
    mu, sd = Z[tr].mean(axis=0), Z[tr].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Zs = (Z - mu) / sd

    R = np.zeros((m, k))
    scores: list[float | None] = []
    baselines: list[float | None] = []
    kinds = []
    for j in range(k):
        y = Y[:, j]
        kinds.append("accuracy" if discrete[j] else "r2")
        if np.unique(y[tr]).size < 2:
            log.warning("factor %d is constant on the training split; informativeness undefined", j)
            scores.append(None)
            baselines.append(None)
            continue
        y = y.astype(np.int64) if discrete[j] else y.astype(np.float64)
        imp, score = PREDICTORS[predictor_kind](Zs[tr], y[tr], Zs[te], y[te], discrete[j], seed,
                                                np.random.default_rng([seed, j]))
        total = imp.sum()
        R[:, j] = imp / total if total > 0 else 0.0
        scores.append(score)
        baselines.append(_majority_accuracy(y[tr], y[te]) if discrete[j] else 0.0)
    return ImportanceMatrix(R, scores, baselines, predictor_kind,
                            list(factor_names) if factor_names is not None else None, kinds)


# concept grouping

@dataclass
class ConceptMap:
    features: list[str]
    groups: list[int]
    group_names: list[str]

    def __post_init__(self):
        if len(self.features) != len(self.groups):
            raise DciError("every feature needs exactly one concept group")
        if any(not 0 <= g < len(self.group_names) for g in self.groups):
            raise DciError("concept group id out of range")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]]) -> "ConceptMap":
        names: list[str] = []
        feats, groups = [], []
        for feat, concept in pairs:
            if feat in feats:
                raise DciError(f"feature {feat!r} mapped more than once")
            if concept not in names:
                names.append(concept)
            feats.append(feat)
            groups.append(names.index(concept))
        return cls(feats, groups, names)

    @classmethod
    def read_csv(cls, path) -> "ConceptMap":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        if rows and [c.strip().lower() for c in rows[0][:2]] == ["feature", "concept"]:
            rows = rows[1:]
        return cls.from_pairs([(r[0].strip(), r[1].strip()) for r in rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "concept"])
            for f, g in zip(self.features, self.groups):
                w.writerow([f, self.group_names[g]])


def grouped_importance(R_features, concept_map: ConceptMap, feature_names: Sequence[str] | None = None) -> ImportanceMatrix:
    """Merge feature columns into concept columns (sum, then normalize)."""
    R = R_features.R if isinstance(R_features, ImportanceMatrix) else np.asarray(R_features, dtype=np.float64)
    names = list(feature_names) if feature_names is not None else list(concept_map.features)
    if len(names) != R.shape[1]:
        raise DciError(f"{len(names)} feature names for {R.shape[1]} importance columns")
    lookup = dict(zip(concept_map.features, concept_map.groups))
    unmapped = [f for f in names if f not in lookup]
    if unmapped:
        raise DciError(f"features without a concept: {unmapped}")
    G = np.zeros((R.shape[0], len(concept_map.group_names)))
    for col, f in enumerate(names):
        G[:, lookup[f]] += R[:, col]
    sums = G.sum(axis=0)
    G = np.where(sums > 0, G / np.where(sums > 0, sums, 1.0), 0.0)
    return ImportanceMatrix(G, predictor=getattr(R_features, "predictor", "given"),
                            factor_names=list(concept_map.group_names))


# output

def write_importance(imp: ImportanceMatrix, scores: DciScores, json_path, csv_path, extra: dict | None = None) -> None:
    names = imp.factor_names or [f"factor{j}" for j in range(imp.R.shape[1])]
    payload = {
        "predictor": imp.predictor,
        "factor_names": names,
        "importance": imp.R.tolist(),
        **scores.to_dict(),
        **(extra or {}),
    }
    Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["latent", *names])
        for i, row in enumerate(imp.R):
            w.writerow([i, *(repr(float(v)) for v in row)])
