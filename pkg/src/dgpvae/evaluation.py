"""Glue between embeddings, ground truth and the metrics."""
from __future__ import annotations

import numpy as np

from .dci import ConceptMap, ImportanceMatrix, dci_scores, fit_importance, grouped_importance
from .downstream import EvalReport, fit_linear_classifier, summarize_series

DCI_TRAIN_POINTS = 8000
DCI_TEST_POINTS = 2000


def pool_time_steps(latents: np.ndarray, targets: np.ndarray, n_points: int | None, seed: int):
    """Flatten (n, m, T) / (n, k, T) into per-step pairs, optionally subsampled."""
    Z = np.swapaxes(latents, 1, 2).reshape(-1, latents.shape[1])
    Y = np.swapaxes(targets, 1, 2).reshape(-1, targets.shape[1])
    if n_points is not None and n_points < len(Z):
        pick = np.sort(np.random.default_rng(seed).choice(len(Z), size=n_points, replace=False))
        Z, Y = Z[pick], Y[pick]
    return Z, Y


def factor_importance(latents, indices, predictor: str = "lasso", seed: int = 0,
                      n_train: int = DCI_TRAIN_POINTS, n_test: int = DCI_TEST_POINTS,
                      factor_names=None) -> ImportanceMatrix:
    Z, Y = pool_time_steps(latents, indices, n_train + n_test, seed)
    split = n_train if len(Z) == n_train + n_test else 0.8
    return fit_importance(Z, Y, predictor, split=split, seed=seed, discrete=True, factor_names=factor_names)


def feature_importance(latents, observations, predictor: str = "lasso", seed: int = 0,
                       n_train: int = DCI_TRAIN_POINTS, n_test: int = DCI_TEST_POINTS) -> ImportanceMatrix:
    obs = np.swapaxes(observations.reshape(observations.shape[0], observations.shape[1], -1), 1, 2)
    Z, X = pool_time_steps(latents, obs, n_train + n_test, seed)
    split = n_train if len(Z) == n_train + n_test else 0.8
    return fit_importance(Z, X, predictor, split=split, seed=seed, discrete=False)


def grouped_dci(latents, observations, concept_map: ConceptMap, feature_names, predictor="lasso", seed=0):
    R_feat = feature_importance(latents, observations, predictor, seed)
    G = grouped_importance(R_feat, concept_map, feature_names)
    return G, dci_scores(G)


def downstream_auroc(latents, labels, seed: int = 0) -> EvalReport:
    return fit_linear_classifier(summarize_series(latents), labels, seed=seed)
