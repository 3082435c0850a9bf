"""Stationary kernels, Gram matrices on the integer time grid, GP sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """A stationary kernel.

    ``kind`` is one of ``cauchy``, ``rbf``, ``constant``, ``sum``, ``scaled``.
    ``sum`` uses ``members``; ``scaled`` multiplies ``members[0]`` by ``weight``.
    """

    kind: str
    variance: float = 1.0
    length_scale: float | None = None
    weight: float = 1.0
    members: tuple["KernelSpec", ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind in ("cauchy", "rbf"):
            if self.length_scale is None or not self.length_scale > 0:
                raise KernelError(f"{self.kind} kernel needs length_scale > 0, got {self.length_scale}")
            if not self.variance > 0:
                raise KernelError(f"kernel variance must be > 0, got {self.variance}")
        elif self.kind == "constant":
            if not self.variance > 0:
                raise KernelError(f"kernel variance must be > 0, got {self.variance}")
        elif self.kind == "sum":
            if len(self.members) < 1:
                raise KernelError("sum kernel needs at least one member")
        elif self.kind == "scaled":
            if len(self.members) != 1 or not self.weight > 0:
                raise KernelError("scaled kernel needs exactly one member and weight > 0")
        else:
            raise KernelError(f"unknown kernel kind {self.kind!r}")

    @property
    def amplitude(self) -> float:
        """k(0): the marginal variance."""
        return float(eval_lag(self, np.zeros(1))[0])

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind in ("cauchy", "rbf", "constant"):
            d["variance"] = self.variance
        if self.length_scale is not None:
            d["length_scale"] = self.length_scale
        if self.kind == "scaled":
            d["weight"] = self.weight
        if self.members:
            d["members"] = [m.to_dict() for m in self.members]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        members = tuple(cls.from_dict(m) for m in d.get("members", ()))
        return cls(
            kind=d["kind"],
            variance=float(d.get("variance", 1.0)),
            length_scale=None if d.get("length_scale") is None else float(d["length_scale"]),
            weight=float(d.get("weight", 1.0)),
            members=members,
        )


def cauchy(length_scale: float, variance: float = 1.0) -> KernelSpec:
    return KernelSpec("cauchy", variance=variance, length_scale=length_scale)


def rbf(length_scale: float, variance: float = 1.0) -> KernelSpec:
    return KernelSpec("rbf", variance=variance, length_scale=length_scale)


def constant(variance: float = 1.0) -> KernelSpec:
    return KernelSpec("constant", variance=variance)


def rbf_plus_constant(length_scale: float, constant_weight: float = 0.1) -> KernelSpec:
    """Unit-variance mixture ``(1-w)·RBF + w·Constant``."""
    if not 0.0 <= constant_weight <= 1.0:
        raise KernelError(f"constant_weight must lie in [0, 1], got {constant_weight}")
    if constant_weight == 0.0:
        return rbf(length_scale)
    if constant_weight == 1.0:
        return constant()
    return KernelSpec("sum", members=(
        KernelSpec("scaled", weight=1.0 - constant_weight, members=(rbf(length_scale),)),
        KernelSpec("scaled", weight=constant_weight, members=(constant(),)),
    ))


def eval_lag(spec: KernelSpec, lag) -> np.ndarray:
    lag = np.asarray(lag, dtype=np.float64)
    if spec.kind == "cauchy":
        return spec.variance / (1.0 + (lag / spec.length_scale) ** 2)
    if spec.kind == "rbf":
        return spec.variance * np.exp(-0.5 * (lag / spec.length_scale) ** 2)
    if spec.kind == "constant":
        return np.full(lag.shape, spec.variance)
    if spec.kind == "sum":
        return sum(eval_lag(m, lag) for m in spec.members)
    return spec.weight * eval_lag(spec.members[0], lag)


def eval_kernel(spec: KernelSpec, tau: float, tau_prime: float) -> float:
    return float(eval_lag(spec, np.asarray(tau, dtype=float) - tau_prime))


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """Jittered Gram matrix ``K`` with its lower Cholesky factor."""

    K: np.ndarray
    jitter: float
    chol: np.ndarray

    @property
    def T(self) -> int:
        return self.K.shape[0]

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.log(np.diag(self.chol)).sum())

    @property
    def chol_inv(self) -> np.ndarray:
        return linalg.solve_triangular(self.chol, np.eye(self.T), lower=True)


def gram(spec: KernelSpec, T: int, jitter_start: float = 1e-8) -> GramMatrix:
    """Gram matrix on the grid ``0..T-1`` with geometrically escalated jitter."""
    if T < 1:
        raise KernelError(f"T must be >= 1, got {T}")
    idx = np.arange(T, dtype=np.float64)
    base = eval_lag(spec, idx[:, None] - idx[None, :])
    base = 0.5 * (base + base.T)
    limit = 1e-2 * spec.amplitude
    jitter = jitter_start
    while jitter <= limit:
        K = base + jitter * np.eye(T)
        try:
            L = linalg.cholesky(K, lower=True)
        except linalg.LinAlgError:
            jitter *= 10.0
            continue
        return GramMatrix(K=K, jitter=jitter, chol=L)
    raise KernelError(
        f"Gram matrix not positive definite with jitter up to {limit:g} (kernel badly conditioned)"
    )


@lru_cache(maxsize=256)
def cached_gram(spec: KernelSpec, T: int, jitter_start: float = 1e-8) -> GramMatrix:
    return gram(spec, T, jitter_start)


def sample_gp(g: GramMatrix, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``L @ eps``. With ``size`` returns an array of shape (size, T)."""
    if size is None:
        return g.chol @ rng.standard_normal(g.T)
    return (g.chol @ rng.standard_normal((g.T, size))).T
