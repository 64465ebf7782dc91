"""Feature maps and their exact steady-state statistics.

Autocorrelation matrices R(k) = E[psi(Z_0) psi(Z_k)'], autocovariances
Sigma(k) = R(k) - psi_bar psi_bar', baseline means, resolvent-form infinite
sums, and the search for a normalizing vector xi with xi'psi(z) = 1 on the
chain support.  All expectations are computed exactly from (P, varpi, Psi);
Monte-Carlo estimates of the same quantities live in the learner layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularResolvent
from .markov import FiniteChain

_COND_LIMIT = 1e12
_RANK_RTOL = 1e-10
_NORMALIZER_TOL = 1e-8


@dataclass(frozen=True)
class FeatureMap:
    """Linear-architecture feature map psi: Z -> R^d, stored as a |Z| x d matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if not np.all(np.isfinite(m)):
            raise ValueError("feature matrix must be finite")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_z(self) -> int:
        return self.matrix.shape[0]

    def eval(self, z: int) -> np.ndarray:
        return self.matrix[z]


@dataclass(frozen=True)
class BaselineMean:
    """Baseline pmf mu on Z together with its feature mean psi_bar_mu = Psi'mu."""

    mu: np.ndarray
    psi_bar_mu: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "psi_bar_mu", np.asarray(self.psi_bar_mu, dtype=float))
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-10:
            raise ValueError("mu must be a pmf")


@dataclass(frozen=True)
class NormalizerResult:
    """Least-squares solve of Psi_support xi = 1.

    ``xi`` is None when no exact solution exists (residual above tolerance).
    ``solution_dim`` is the dimension of the affine solution set when a
    solution exists (nullity of the support rows).
    """

    xi: np.ndarray | None
    residual: float
    solution_dim: int


def tabular_basis(n_z: int) -> FeatureMap:
    """Indicator basis: psi(z) = e_z."""
    return FeatureMap(np.eye(n_z))


def finite_poly_basis(n_states: int, n_actions: int) -> FeatureMap:
    """Basis psi(x, u) = [x, u, x*u] with 1-based state/action labels."""
    rows = []
    for x in range(1, n_states + 1):
        for u in range(1, n_actions + 1):
            rows.append([float(x), float(u), float(x * u)])
    return FeatureMap(np.asarray(rows))


def builtin_basis(name: str, n_states: int, n_actions: int) -> FeatureMap:
    """Look up a named basis for a finite model ("tabular" or "finite_poly")."""
    if name == "tabular":
        return tabular_basis(n_states * n_actions)
    if name == "finite_poly":
        return finite_poly_basis(n_states, n_actions)
    if name == "speedscale":
        raise ValueError("the speedscale basis is bound to the continuous "
                         "speed-scaling model (SpeedScalingModel.features)")
    raise ValueError(f"unknown basis {name!r} for finite models")


def feature_mean(chain: FiniteChain, psi: FeatureMap) -> np.ndarray:
    """psi_bar = Psi' varpi."""
    return psi.matrix.T @ chain.stationary


def feature_mean_under(mu: np.ndarray, psi: FeatureMap) -> np.ndarray:
    """psi_bar_mu with components <mu, psi_i>, i.e. Psi'mu."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-10:
        raise ValueError("mu must be a pmf")
    return psi.matrix.T @ mu


def baseline_mean(mu: np.ndarray, psi: FeatureMap) -> BaselineMean:
    return BaselineMean(mu=np.asarray(mu, dtype=float), psi_bar_mu=feature_mean_under(mu, psi))


def autocorrelation(chain: FiniteChain, psi: FeatureMap, k: int) -> np.ndarray:
    """R(k) = E[psi(Z_0) psi(Z_k)'] = Psi' D P^k Psi in steady state."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    d_psi = chain.stationary[:, None] * psi.matrix
    pk_psi = psi.matrix
    for _ in range(k):
        pk_psi = chain.transition @ pk_psi
    return d_psi.T @ pk_psi


def resolvent_sum(chain: FiniteChain, psi: FeatureMap, beta: float) -> np.ndarray:
    """Closed form of sum_{k>=0} beta^k R(k+1) = Psi' D P (I - beta P)^{-1} Psi."""
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    n = chain.n_z
    m = np.eye(n) - beta * chain.transition
    if np.linalg.cond(m) > _COND_LIMIT:
        raise SingularResolvent(f"I - {beta}*P is numerically singular")
    resolvent_psi = np.linalg.solve(m, psi.matrix)
    d_psi = chain.stationary[:, None] * psi.matrix
    return d_psi.T @ (chain.transition @ resolvent_psi)


@dataclass(frozen=True)
class FeatureStats:
    """Exact steady-state feature statistics of a chain."""

    r0: np.ndarray
    sigma0: np.ndarray
    psi_bar: np.ndarray
    rank_sigma0: int
    chain: FiniteChain
    psi: FeatureMap

    def resolvent_r(self, beta: float) -> np.ndarray:
        return resolvent_sum(self.chain, self.psi, beta)


def feature_stats(chain: FiniteChain, psi: FeatureMap) -> FeatureStats:
    r0 = autocorrelation(chain, psi, 0)
    psi_bar = feature_mean(chain, psi)
    sigma0 = r0 - np.outer(psi_bar, psi_bar)
    sv = np.linalg.svd(sigma0, compute_uv=False)
    tol = _RANK_RTOL * (sv[0] if sv.size and sv[0] > 0 else 1.0)
    rank = int(np.sum(sv > tol))
    return FeatureStats(r0=r0, sigma0=sigma0, psi_bar=psi_bar,
                        rank_sigma0=rank, chain=chain, psi=psi)


def find_normalizer(psi: FeatureMap, support: np.ndarray) -> NormalizerResult:
    """Minimum-norm least-squares solve of psi(z)'xi = 1 for z in the support.

    Returns xi only when the system is solved exactly (sup-norm residual below
    1e-8); a strictly positive-definite Sigma(0) rules this out, since any
    solution would satisfy xi'Sigma(0)xi = 0.
    """
    support = np.asarray(support, dtype=int)
    rows = psi.matrix[support]
    ones = np.ones(len(support))
    xi, _, rank, _ = np.linalg.lstsq(rows, ones, rcond=None)
    residual = float(np.max(np.abs(rows @ xi - ones))) if len(support) else 0.0
    if residual >= _NORMALIZER_TOL:
        return NormalizerResult(xi=None, residual=residual, solution_dim=0)
    return NormalizerResult(xi=xi, residual=residual,
                            solution_dim=psi.dim - int(rank))
