"""Exact finite-chain machinery.

State-action chains induced by a randomized stationary policy, their
stationary distributions, Poisson equations solved through the fundamental
matrix, discounted value functions, and the pair-state chain used by the
noise/bias analysis.  Everything here is deterministic linear algebra on
small dense matrices; simulation lives in :mod:`rtdlab.learner`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NotUnichain, SingularSystem

# Rank threshold (relative to the largest singular value) used to decide
# whether eigenvalue 1 of a stochastic matrix is simple.
_UNICHAIN_RTOL = 1e-8

# Condition-number ceiling beyond which linear solves are treated as singular.
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class FiniteMdp:
    """Finite MDP: per-action kernels ``kernel[u][x, x']`` and costs ``cost[x, u]``."""

    n_states: int
    n_actions: int
    kernel: np.ndarray  # shape (n_actions, n_states, n_states)
    cost: np.ndarray    # shape (n_states, n_actions)

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=float)
        cost = np.asarray(self.cost, dtype=float)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "cost", cost)
        if kernel.shape != (self.n_actions, self.n_states, self.n_states):
            raise ValueError(f"kernel shape {kernel.shape} inconsistent with sizes")
        if cost.shape != (self.n_states, self.n_actions):
            raise ValueError(f"cost shape {cost.shape} inconsistent with sizes")
        if np.any(kernel < 0):
            raise ValueError("kernel has negative entries")
        row_sums = kernel.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > 1e-12:
            raise ValueError("kernel rows must sum to 1 within 1e-12")
        if not np.all(np.isfinite(cost)):
            raise ValueError("cost must be finite")


@dataclass(frozen=True)
class RandomizedPolicy:
    """Randomized stationary policy: ``probs[x, u]`` is the chance of u in x."""

    probs: np.ndarray  # shape (n_states, n_actions)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        if np.any(probs < 0):
            raise ValueError("policy has negative probabilities")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must sum to 1 within 1e-12")

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class FiniteChain:
    """Markov chain on state-action pairs z = (x, u), flattened as z = x*|U| + u.

    ``transition[z, z'] = P_u(x, x') * policy(u' | x')`` for z = (x, u) and
    z' = (x', u').  ``stationary`` is the unique invariant pmf (assumption of a
    unichain).  Pair chains built by :func:`pair_chain` reuse this container
    with ``reachable`` flagging pairs of positive stationary mass.
    """

    transition: np.ndarray
    cost_vec: np.ndarray
    stationary: np.ndarray
    state_action_shape: tuple[int, int] | None = None
    reachable: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        c = np.asarray(self.cost_vec, dtype=float)
        pi = np.asarray(self.stationary, dtype=float)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "cost_vec", c)
        object.__setattr__(self, "stationary", pi)
        n = p.shape[0]
        if p.shape != (n, n) or c.shape != (n,) or pi.shape != (n,):
            raise ValueError("inconsistent chain dimensions")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1 within 1e-12")
        if np.max(np.abs(pi @ p - pi)) > 1e-10 or abs(pi.sum() - 1.0) > 1e-10:
            raise ValueError("stationary vector is not invariant within 1e-10")

    @property
    def n_z(self) -> int:
        return self.transition.shape[0]

    @property
    def support(self) -> np.ndarray:
        """Indices z with stationary mass > 0 (relative 1e-12 dust threshold)."""
        tol = 1e-12 * max(1.0, float(self.stationary.max()))
        return np.flatnonzero(self.stationary > tol)


@dataclass(frozen=True)
class PoissonSolution:
    """Average value ``eta`` and centered solution ``h`` of (I - P)h = g - eta*1."""

    eta: float
    h: np.ndarray


def _null_dimension(p: np.ndarray) -> int:
    """Dimension of the null space of (I - P), i.e. geometric multiplicity of eigenvalue 1."""
    sv = np.linalg.svd(np.eye(p.shape[0]) - p, compute_uv=False)
    tol = _UNICHAIN_RTOL * max(1.0, sv[0] if sv.size else 1.0)
    return int(np.sum(sv < tol))


def stationary_pmf(p: np.ndarray) -> np.ndarray:
    """Unique invariant pmf of a row-stochastic unichain matrix.

    Solves (P' - I) pi = 0 directly with one equation replaced by the
    normalization sum(pi) = 1.  The direct solve handles periodic chains,
    which power iteration would not.
    """
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    if _null_dimension(p) != 1:
        raise NotUnichain("eigenvalue 1 of P' has geometric multiplicity > 1")
    a = p.T - np.eye(n)
    a[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        pi = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise NotUnichain("stationary system singular") from exc
    if np.min(pi) < -1e-10:
        raise NotUnichain(f"stationary solve produced negative mass {np.min(pi):.3e}")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def build_chain(mdp: FiniteMdp, policy: RandomizedPolicy) -> FiniteChain:
    """State-action chain induced by running ``policy`` in ``mdp``.

    Pairs are flattened as z = x * n_actions + u.  The stationary pmf
    factorizes as varpi(x, u) = pi(x) * policy(u | x) with pi invariant for
    the state-level kernel, but it is computed directly on the pair chain.
    """
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy dimensions do not match the MDP")
    nx, nu = mdp.n_states, mdp.n_actions
    nz = nx * nu
    p = np.zeros((nz, nz))
    for x in range(nx):
        for u in range(nu):
            z = x * nu + u
            # Row: P_u(x, x') * policy(u' | x')
            p[z, :] = (mdp.kernel[u, x, :][:, None] * policy.probs).reshape(nz)
    cost = mdp.cost.reshape(nz)
    pi = stationary_pmf(p)
    return FiniteChain(transition=p, cost_vec=cost, stationary=pi,
                       state_action_shape=(nx, nu))


def fundamental_matrix(chain: FiniteChain) -> np.ndarray:
    """(I - P + 1 varpi')^{-1}, the fundamental matrix of the chain."""
    n = chain.n_z
    m = np.eye(n) - chain.transition + np.outer(np.ones(n), chain.stationary)
    if np.linalg.cond(m) > _COND_LIMIT:
        raise SingularSystem("fundamental matrix is numerically singular")
    return np.linalg.inv(m)


def solve_poisson(chain: FiniteChain, g: np.ndarray) -> PoissonSolution:
    """Solve (I - P) h = g - eta*1 with eta = varpi'g and varpi'h = 0.

    Centering is automatic: applying varpi' to the fundamental-matrix system
    annihilates the (I - P) part and leaves varpi'h = 0.
    """
    g = np.asarray(g, dtype=float)
    eta = float(chain.stationary @ g)
    h = fundamental_matrix(chain) @ (g - eta)
    return PoissonSolution(eta=eta, h=h)


def poisson_solve_columns(chain: FiniteChain, g_cols: np.ndarray) -> np.ndarray:
    """Column-wise Poisson solves: each column of ``g_cols`` is centered and solved.

    Returns H with (I - P) H[:, j] = g_cols[:, j] - mean_j and varpi'H = 0.
    """
    g_cols = np.asarray(g_cols, dtype=float)
    means = chain.stationary @ g_cols
    return fundamental_matrix(chain) @ (g_cols - means)


def discounted_q(chain: FiniteChain, gamma: float) -> np.ndarray:
    """Discounted value Q = (I - gamma*P)^{-1} c for 0 <= gamma < 1."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    n = chain.n_z
    return np.linalg.solve(np.eye(n) - gamma * chain.transition, chain.cost_vec)


def pair_chain(chain: FiniteChain) -> FiniteChain:
    """Chain on consecutive pairs (z, z'), flattened as z * n_z + z'.

    Kernel: Phat[(z, z'), (z'', z''')] = 1{z'' = z'} P(z', z''').  Stationary:
    varpi_hat(z, z') = varpi(z) P(z, z').  Pairs of zero mass are retained so
    dimensions do not depend on the policy; they are flagged via ``reachable``.
    """
    n = chain.n_z
    p = chain.transition
    phat4 = np.zeros((n, n, n, n))
    idx = np.arange(n)
    phat4[:, idx, idx, :] = p[idx, :]
    phat = phat4.reshape(n * n, n * n)
    pi_hat = (chain.stationary[:, None] * p).reshape(n * n)
    cost = np.repeat(chain.cost_vec, n)  # cost of the leading coordinate
    tol = 1e-12 * max(1.0, float(pi_hat.max()))
    return FiniteChain(transition=phat, cost_vec=cost, stationary=pi_hat,
                       reachable=pi_hat > tol)


def load_model(path: str | Path) -> tuple[FiniteMdp, RandomizedPolicy, np.ndarray | None]:
    """Read an MDP + policy (and optional explicit feature matrix) from JSON.

    Expected keys: n_states, n_actions, kernel[u][x][x'], cost[x][u],
    policy[x][u]; optional features[z][i] with rows ordered z = (x, u)
    lexicographically.  Probabilities are validated on load.
    """
    with open(path) as fh:
        raw = json.load(fh)
    mdp = FiniteMdp(
        n_states=int(raw["n_states"]),
        n_actions=int(raw["n_actions"]),
        kernel=np.asarray(raw["kernel"], dtype=float),
        cost=np.asarray(raw["cost"], dtype=float),
    )
    policy = RandomizedPolicy(probs=np.asarray(raw["policy"], dtype=float))
    features = None
    if "features" in raw:
        features = np.asarray(raw["features"], dtype=float)
        if features.shape[0] != mdp.n_states * mdp.n_actions:
            raise ValueError("feature matrix must have one row per state-action pair")
    return mdp, policy, features


def save_model(path: str | Path, mdp: FiniteMdp, policy: RandomizedPolicy,
               features: np.ndarray | None = None) -> None:
    """Inverse of :func:`load_model`."""
    payload = {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "kernel": mdp.kernel.tolist(),
        "cost": mdp.cost.tolist(),
        "policy": policy.probs.tolist(),
    }
    if features is not None:
        payload["features"] = np.asarray(features, dtype=float).tolist()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
