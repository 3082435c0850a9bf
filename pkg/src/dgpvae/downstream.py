"""Per-series linear classification of an outcome label from latent summaries."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import optimize
from scipy.special import expit
from scipy.stats import rankdata

L2 = 1e-3


class DownstreamError(ValueError):
    pass


def summarize_series(latent_means) -> np.ndarray:
    """Per-channel time mean followed by per-channel time std: (..., m, T) -> (..., 2m)."""
    z = np.asarray(latent_means, dtype=np.float64)
    return np.concatenate([z.mean(axis=-1), z.std(axis=-1)], axis=-1)


def auroc(scores, labels) -> float:
    """Mann-Whitney rank statistic; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise DownstreamError("AUROC needs both classes in the evaluation set")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _loss_and_grad(wb, X, y, l2):
    w, b = wb[:-1], wb[-1]
    s = X @ w + b
    # mean logistic loss, stable form
    loss = np.mean(np.logaddexp(0.0, s) - y * s) + 0.5 * l2 * (w @ w)
    r = (expit(s) - y) / len(y)
    return loss, np.concatenate([X.T @ r + l2 * w, [r.sum()]])


@dataclass
class EvalReport:
    auroc: float
    weights: list[float]
    bias: float
    split: dict
    seed: int
    converged: bool
    n_iter: int

    def to_dict(self) -> dict:
        return asdict(self)


def split_indices(n: int, seed: int, test_fraction: float = 0.2):
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def fit_linear_classifier(summaries, labels, split=None, seed: int = 0, l2: float = L2,
                          tol: float = 1e-6) -> EvalReport:
    """Fit an L2-regularized logistic model and report held-out AUROC.

    ``split`` is ``(train_idx, test_idx)``; by default an 80/20 series-level
    split drawn from ``seed``. Features are standardized on the train split.
    """
    X = np.asarray(summaries, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64)
    if split is None:
        split = split_indices(len(y), seed)
    tr, te = (np.asarray(s) for s in split)
    if np.intersect1d(tr, te).size:
        raise DownstreamError("train and test splits overlap")
    if np.unique(y[tr]).size < 2:
        raise DownstreamError("training split contains a single class")
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Xs = (X - mu) / sd
    res = optimize.minimize(
        _loss_and_grad, np.zeros(X.shape[1] + 1), args=(Xs[tr], y[tr], l2), jac=True,
        method="L-BFGS-B", options={"ftol": tol, "gtol": tol, "maxiter": 10_000},
    )
    w, b = res.x[:-1], res.x[-1]
    score = auroc(Xs[te] @ w + b, y[te])
    return EvalReport(
        auroc=score,
        weights=(w / sd).tolist(),
        bias=float(b - (mu / sd) @ w),
        split={"train": int(len(tr)), "test": int(len(te)), "level": "series"},
        seed=int(seed),
        converged=bool(res.success),
        n_iter=int(res.nit),
    )
