"""Gauss-Markov variational posterior with upper-bidiagonal precision factor.

For one latent channel, ``q(z) = N(m, (B^T B)^{-1})`` where ``B`` has entries
only on its diagonal and first superdiagonal. All functions accept tensors
with arbitrary leading batch axes (``(..., T)`` for means and diagonals,
``(..., T-1)`` for superdiagonals) and are differentiable through the tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor
from .kernels import GramMatrix

DIAG_FLOOR = 1e-4


def positive_diag(raw) -> Tensor:
    """Map unconstrained values to band diagonals: softplus(raw) + floor."""
    return ops.softplus(raw) + DIAG_FLOOR


@dataclass(frozen=True, eq=False)
class BandedCholesky:
    diag: Tensor
    superdiag: Tensor

    def __post_init__(self):
        d, s = as_tensor(self.diag), as_tensor(self.superdiag)
        object.__setattr__(self, "diag", d)
        object.__setattr__(self, "superdiag", s)
        T = d.shape[-1]
        if s.shape[-1] != T - 1:
            raise ValueError(f"superdiag length {s.shape[-1]} must be {T - 1}")
        if not np.all(d.data > 0):
            raise ValueError("band diagonal entries must be strictly positive")

    @property
    def T(self) -> int:
        return self.diag.shape[-1]

    def dense(self) -> np.ndarray:
        """The dense ``B`` (no gradient)."""
        T = self.T
        batch = np.broadcast_shapes(self.diag.shape[:-1], self.superdiag.shape[:-1])
        B = np.zeros(batch + (T, T))
        idx = np.arange(T)
        B[..., idx, idx] = self.diag.data
        if T > 1:
            B[..., idx[:-1], idx[1:]] = self.superdiag.data
        return B


@dataclass(frozen=True, eq=False)
class StructuredGaussian:
    mean: Tensor
    band: BandedCholesky

    def __post_init__(self):
        object.__setattr__(self, "mean", as_tensor(self.mean))
        if self.mean.shape[-1] != self.band.T:
            raise ValueError(f"mean length {self.mean.shape[-1]} != band size {self.band.T}")

    @property
    def T(self) -> int:
        return self.band.T

    def channel(self, j: int) -> "StructuredGaussian":
        """Select latent channel ``j`` from a (..., m, T) batch."""
        return StructuredGaussian(
            self.mean[..., j, :],
            BandedCholesky(self.band.diag[..., j, :], self.band.superdiag[..., j, :]),
        )

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(precision(self.band))


def precision(band: BandedCholesky) -> np.ndarray:
    """Tridiagonal ``B^T B`` as a dense array."""
    d, s = band.diag.data, band.superdiag.data
    T = band.T
    batch = np.broadcast_shapes(d.shape[:-1], s.shape[:-1])
    d = np.broadcast_to(d, batch + (T,))
    s = np.broadcast_to(s, batch + (T - 1,))
    lam = np.zeros(batch + (T, T))
    idx = np.arange(T)
    main = d**2
    main[..., 1:] += s**2
    lam[..., idx, idx] = main
    if T > 1:
        off = d[..., :-1] * s
        lam[..., idx[:-1], idx[1:]] = off
        lam[..., idx[1:], idx[:-1]] = off
    return lam


def sample(q: StructuredGaussian, rng: np.random.Generator | None = None, eps=None) -> Tensor:
    """Reparameterized draw ``m + B^{-1} eps``; pass ``eps`` to fix the noise."""
    if eps is None:
        if rng is None:
            raise ValueError("sample needs either rng or eps")
        eps = rng.standard_normal(np.broadcast_shapes(q.mean.shape, q.band.diag.shape))
    eps = as_tensor(eps)
    x = ops.bidiag_solve(q.band.diag, q.band.superdiag, ops.reshape(eps, eps.shape + (1,)))
    return q.mean + ops.reshape(x, x.shape[:-1])


def log_det_precision(band: BandedCholesky) -> Tensor:
    return 2.0 * ops.sum(ops.log(band.diag), axis=-1)


@dataclass(frozen=True, eq=False)
class PriorFactors:
    """Per-channel prior pieces reused across a batch: ``L^{-1}`` and ``log det K``.

    ``chol_inv`` has shape (m, T, T) (or (T, T) for a single channel)."""

    chol_inv: np.ndarray
    logdet: np.ndarray

    @classmethod
    def from_grams(cls, grams: Sequence[GramMatrix]) -> "PriorFactors":
        return cls(
            np.stack([g.chol_inv for g in grams]),
            np.array([g.logdet for g in grams]),
        )

    @classmethod
    def from_gram(cls, g: GramMatrix) -> "PriorFactors":
        return cls(g.chol_inv, np.asarray(g.logdet))


def _kl(q: StructuredGaussian, prior: PriorFactors) -> Tensor:
    T = q.T
    Linv = prior.chol_inv
    # Sigma_q = B^{-1} B^{-T}, so tr(K^{-1} Sigma_q) = ||L^{-1} B^{-1}||_F^2
    Binv = ops.bidiag_solve(q.band.diag, q.band.superdiag, np.eye(T))
    M = ops.matmul(Linv, Binv)
    trace = ops.sum(ops.square(M), axis=(-2, -1))
    white = ops.matmul(Linv, ops.reshape(q.mean, q.mean.shape + (1,)))
    quad = ops.sum(ops.square(white), axis=(-2, -1))
    return 0.5 * (trace + quad - T + prior.logdet + log_det_precision(q.band))


def kl_to_gp_prior(q: StructuredGaussian, prior: GramMatrix | PriorFactors) -> Tensor:
    """KL(q || N(0, K)) for one channel; leading batch axes are preserved."""
    if isinstance(prior, GramMatrix):
        prior = PriorFactors.from_gram(prior)
    if prior.chol_inv.shape[-1] != q.T:
        raise ValueError(f"prior dimension {prior.chol_inv.shape[-1]} != posterior length {q.T}")
    return _kl(q, prior)


def total_kl(q: StructuredGaussian, priors: Sequence[GramMatrix] | PriorFactors) -> Tensor:
    """Sum of per-channel KLs. ``q`` holds all channels on axis -2: (..., m, T)."""
    if not isinstance(priors, PriorFactors):
        priors = PriorFactors.from_grams(list(priors))
    m = q.mean.shape[-2]
    if priors.chol_inv.shape[0] != m:
        raise ValueError(f"{priors.chol_inv.shape[0]} priors for {m} channels")
    if priors.chol_inv.shape[-1] != q.T:
        raise ValueError(f"prior dimension {priors.chol_inv.shape[-1]} != posterior length {q.T}")
    return ops.sum(_kl(q, priors), axis=-1)

