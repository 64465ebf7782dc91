"""Asymptotic covariance, bias, and baseline-weight sensitivity.

Everything here lives in the lam = 0 regime, where the driving Markov state
is the consecutive pair phi = (z, z') and the update is linear:

    f(theta, phi) = A(phi) theta + b(phi),
    A(phi) = psi(z)[-psi(z) + gamma psi(z')]'
             - delta_r psi_bar psi_bar'      (fixed_relative_td0)
             - delta_r psi(z) psi_bar'       (varpi_relative_td0)
    b(phi) = c(z) psi(z).

The noise covariance Sigma_Delta is the two-sided autocorrelation sum of the
stationary zero-mean sequence Delta_n = f(theta_star, Phi_n), evaluated
exactly through the pair-chain Poisson equation, and the optimal asymptotic
covariance is Sigma_theta = A_bar^{-1} Sigma_Delta A_bar^{-T}.  The
asymptotic bias under step size alpha_n = n^{-rho} is
(1/(1-rho)) A_bar^{-1} Upsilon_bar with
Upsilon_bar = E[(A - A_hat)(A theta_star + b)], A_hat the matrix Poisson
solution of (I - P_hat) A_hat = A - A_bar.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import NonZeroMean, SingularSystem, UnsupportedLambda
from .features import FeatureMap, feature_mean
from .markov import FiniteChain, pair_chain, poisson_solve_columns
from .meanflow import b_bar as mean_b_bar

VARIANT_TD0 = "td0"
# baseline applied as the deterministic matrix -delta_r psi_bar psi_bar'
VARIANT_FIXED_RELATIVE = "fixed_relative_td0"
# baseline applied through the temporal-difference scalar: the correction
# rides the update direction psi(z), as in the adaptive algorithm once its
# baseline estimate has converged
VARIANT_VARPI_LIMIT = "varpi_relative_td0"

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class NoiseModel:
    """Pair-state coefficients of the linear update and their steady means."""

    a_of_phi: np.ndarray      # (n_pair, d, d)
    b_of_phi: np.ndarray      # (n_pair, d)
    theta_star: np.ndarray
    a_bar: np.ndarray
    b_bar: np.ndarray
    gamma: float
    delta_r: float
    variant: str

    @property
    def delta_of_phi(self) -> np.ndarray:
        """Stationary noise Delta(phi) = A(phi) theta_star + b(phi)."""
        return self.a_of_phi @ self.theta_star + self.b_of_phi


@dataclass(frozen=True)
class AsymptoticsReport:
    sigma_delta: np.ndarray
    sigma_theta_star: np.ndarray
    bias: np.ndarray
    upsilon_bar: np.ndarray
    rho: float


@dataclass(frozen=True)
class SensitivityReport:
    """Derivatives in the baseline weight at delta_r = 0 (fixed variant).

    ``d_sigma`` and ``d_bias`` carry the full derivatives, with the noise
    terms ``sigma_delta_prime`` and ``upsilon_bar_prime`` evaluated exactly
    (they do not vanish: the stationary point moves with delta_r, dragging
    the stationary noise law along).  ``d_sigma_frozen_noise`` and
    ``d_bias_frozen_noise`` are the values obtained by forcing those noise
    derivatives to zero, kept for comparison.  ``a_inv_prime_outer_residual``
    is the max-norm gap between (A_bar^{-1})' and the outer product
    phi_bar phi_bar' with phi_bar = A_bar^{-1} psi_bar, which coincide only
    for symmetric A_bar.
    """

    d_theta_star: np.ndarray
    d_a_bar: np.ndarray
    d_a_inv: np.ndarray
    d_sigma: np.ndarray
    d_bias: np.ndarray
    sigma_delta_prime: np.ndarray
    upsilon_bar_prime: np.ndarray
    d_sigma_frozen_noise: np.ndarray
    d_bias_frozen_noise: np.ndarray
    a_inv_prime_outer_residual: float


def build_noise_model(chain: FiniteChain, psi: FeatureMap, gamma: float,
                      delta_r: float, variant: str = VARIANT_TD0,
                      lam: float = 0.0) -> NoiseModel:
    """Per-pair A(phi), b(phi) and the stationary point theta_star.

    Only lam = 0 admits the pair-state representation; any other value is
    rejected.
    """
    if lam != 0.0:
        raise UnsupportedLambda("noise model requires the lam = 0 pair representation")
    if variant not in (VARIANT_TD0, VARIANT_FIXED_RELATIVE, VARIANT_VARPI_LIMIT):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == VARIANT_TD0 and delta_r != 0.0:
        raise ValueError("variant td0 requires delta_r = 0")
    n = chain.n_z
    mat = psi.matrix
    # A[(z, z')] = psi(z) (-psi(z) + gamma psi(z'))'
    a = (mat[:, None, :, None] * (-mat[:, None, None, :] + gamma * mat[None, :, None, :]))
    a = a.reshape(n * n, psi.dim, psi.dim)
    if variant == VARIANT_FIXED_RELATIVE:
        psi_bar = feature_mean(chain, psi)
        a = a - delta_r * np.outer(psi_bar, psi_bar)[None, :, :]
    elif variant == VARIANT_VARPI_LIMIT:
        psi_bar = feature_mean(chain, psi)
        # correction -delta_r psi(z) psi_bar' theta rides the update direction
        lead = np.repeat(mat, n, axis=0)  # psi(z) per pair (z, z')
        a = a - delta_r * lead[:, :, None] * psi_bar[None, None, :]
    b = np.broadcast_to((chain.cost_vec[:, None] * mat)[:, None, :],
                        (n, n, psi.dim)).reshape(n * n, psi.dim)
    pi_hat = (chain.stationary[:, None] * chain.transition).reshape(n * n)
    a_bar = np.einsum("p,pij->ij", pi_hat, a)
    b_mean = pi_hat @ b
    b_exact = mean_b_bar(chain, psi, gamma, 0.0)
    if np.max(np.abs(b_mean - b_exact)) > 1e-10:
        raise AssertionError("pair-averaged b disagrees with closed form")
    if np.linalg.cond(a_bar) > _COND_LIMIT:
        raise SingularSystem("mean-flow matrix is singular; no stationary point")
    theta_star = -np.linalg.solve(a_bar, b_mean)
    return NoiseModel(a_of_phi=a, b_of_phi=b, theta_star=theta_star,
                      a_bar=a_bar, b_bar=b_mean, gamma=gamma,
                      delta_r=delta_r, variant=variant)


def sigma_delta(noise: NoiseModel, pair: FiniteChain) -> np.ndarray:
    """Two-sided autocorrelation sum of Delta via the pair-chain Poisson equation.

    With H_hat the centered solution of (I - P_hat) H_hat = Delta,

        Sigma_Delta = E[Delta H_hat'] + E[H_hat Delta'] - E[Delta Delta'];

    the output is symmetrized to remove roundoff asymmetry.
    """
    delta = noise.delta_of_phi
    mean = pair.stationary @ delta
    if np.max(np.abs(mean)) > 1e-8:
        raise NonZeroMean(f"Delta has stationary mean {np.max(np.abs(mean)):.3e}")
    h_hat = poisson_solve_columns(pair, delta)
    w = pair.stationary[:, None] * delta
    cross = w.T @ h_hat
    r0 = w.T @ delta
    sig = cross + cross.T - r0
    return 0.5 * (sig + sig.T)


def sigma_theta_star(a_bar: np.ndarray, sigma_d: np.ndarray) -> np.ndarray:
    """Optimal averaged covariance A_bar^{-1} Sigma_Delta A_bar^{-T}."""
    if np.linalg.cond(a_bar) > _COND_LIMIT:
        raise SingularSystem("A_bar is not invertible")
    inv = np.linalg.inv(a_bar)
    return inv @ sigma_d @ inv.T


def matrix_poisson(noise: NoiseModel, pair: FiniteChain) -> np.ndarray:
    """Componentwise solution of (I - P_hat) A_hat = A - A_bar with E[A_hat] = 0."""
    n_pair = noise.a_of_phi.shape[0]
    d = noise.a_of_phi.shape[1]
    rhs = (noise.a_of_phi - noise.a_bar).reshape(n_pair, d * d)
    a_hat = poisson_solve_columns(pair, rhs)
    resid = rhs - (pair.stationary @ rhs) - (a_hat - pair.transition @ a_hat)
    if np.max(np.abs(resid)) > 1e-9:
        raise SingularSystem("matrix Poisson plug-back residual too large")
    return a_hat.reshape(n_pair, d, d)


def upsilon_bar(noise: NoiseModel, pair: FiniteChain,
                a_hat: np.ndarray | None = None) -> np.ndarray:
    """Upsilon_bar = E[(A(phi) - A_hat(phi)) (A(phi) theta_star + b(phi))]."""
    if a_hat is None:
        a_hat = matrix_poisson(noise, pair)
    delta = noise.delta_of_phi
    return np.einsum("p,pij,pj->i", pair.stationary, noise.a_of_phi - a_hat, delta)


def asymptotic_bias(noise: NoiseModel, pair: FiniteChain, rho: float) -> np.ndarray:
    """Bias limit of (E[theta_n] - theta_star)/alpha_n for alpha_n = n^{-rho}."""
    if not 0.5 < rho < 1.0:
        raise ValueError("rho must lie in (1/2, 1)")
    ups = upsilon_bar(noise, pair)
    return np.linalg.solve(noise.a_bar, ups) / (1.0 - rho)


def asymptotics_report(chain: FiniteChain, psi: FeatureMap, gamma: float,
                       delta_r: float, rho: float,
                       variant: str = VARIANT_FIXED_RELATIVE,
                       pair: FiniteChain | None = None) -> AsymptoticsReport:
    """One-stop exact report: Sigma_Delta, Sigma_theta, bias, Upsilon_bar."""
    if pair is None:
        pair = pair_chain(chain)
    noise = build_noise_model(chain, psi, gamma, delta_r, variant)
    sig_d = sigma_delta(noise, pair)
    sig_t = sigma_theta_star(noise.a_bar, sig_d)
    ups = upsilon_bar(noise, pair)
    bias = np.linalg.solve(noise.a_bar, ups) / (1.0 - rho)
    return AsymptoticsReport(sigma_delta=sig_d, sigma_theta_star=sig_t,
                             bias=bias, upsilon_bar=ups, rho=rho)


class ReportCache:
    """Keyed cache of asymptotics reports for one (chain, psi).

    Reads are lock-free on the underlying dict; insertion is serialized so
    concurrent sweep workers can share an instance.
    """

    def __init__(self, chain: FiniteChain, psi: FeatureMap):
        self._chain = chain
        self._psi = psi
        self._pair = pair_chain(chain)
        self._store: dict[tuple, AsymptoticsReport] = {}
        self._lock = threading.Lock()

    def get(self, gamma: float, delta_r: float, rho: float,
            variant: str) -> AsymptoticsReport:
        key = (float(gamma), 0.0, float(delta_r), float(rho), variant)
        hit = self._store.get(key)
        if hit is not None:
            return hit
        rep = asymptotics_report(self._chain, self._psi, gamma, delta_r, rho,
                                 variant, self._pair)
        with self._lock:
            return self._store.setdefault(key, rep)


def report_payload(report: AsymptoticsReport, gamma: float, lam: float,
                   delta_r: float, variant: str) -> dict:
    """JSON-ready view of a report with its parameter metadata."""
    return {
        "sigma_delta": report.sigma_delta.tolist(),
        "sigma_theta_star": report.sigma_theta_star.tolist(),
        "bias": report.bias.tolist(),
        "upsilon_bar": report.upsilon_bar.tolist(),
        "gamma": gamma,
        "lambda": lam,
        "delta_r": delta_r,
        "rho": report.rho,
        "variant": variant,
    }


def sensitivity(chain: FiniteChain, psi: FeatureMap, gamma: float, rho: float,
                pair: FiniteChain | None = None) -> SensitivityReport:
    """Closed-form derivatives at delta_r = 0 for the fixed relative variant.

    Base quantities are those of plain one-step TD.  With s = psi_bar'theta_star
    and phi_bar = A_bar^{-1} psi_bar:

        A_bar'        = -psi_bar psi_bar'
        (A_bar^{-1})' = -A_bar^{-1} A_bar' A_bar^{-1}
        theta_star'   = -A_bar^{-1} A_bar' theta_star = s phi_bar
        Delta'(phi)   = s (A(phi) - A_bar) phi_bar

    Sigma_Delta' follows by differentiating the Poisson representation of the
    two-sided sum (the derivative H_hat' solves the same Poisson system with
    input Delta'), and Upsilon_bar' = E[(A - A_hat) Delta'].  The covariance
    and bias derivatives are then

        Sigma_theta' = A_bar^{-1} Sigma_Delta' A_bar^{-T}
                       - A_bar^{-1} A_bar' Sigma_theta - [A_bar^{-1} A_bar' Sigma_theta]'
        bias'        = A_bar^{-1} [ -A_bar' bias + Upsilon_bar'/(1 - rho) ].
    """
    if pair is None:
        pair = pair_chain(chain)
    noise = build_noise_model(chain, psi, gamma, 0.0, VARIANT_TD0)
    a_bar = noise.a_bar
    a_inv = np.linalg.inv(a_bar)
    psi_bar = feature_mean(chain, psi)
    theta_star = noise.theta_star
    d = psi.dim

    d_a_bar = -np.outer(psi_bar, psi_bar)
    d_a_inv = -a_inv @ d_a_bar @ a_inv
    d_theta = -a_inv @ d_a_bar @ theta_star
    phi_bar = a_inv @ psi_bar
    outer_residual = float(np.max(np.abs(d_a_inv - np.outer(phi_bar, phi_bar))))

    s = float(psi_bar @ theta_star)
    delta = noise.delta_of_phi
    delta_prime = s * ((noise.a_of_phi - a_bar) @ phi_bar)

    h_hat = poisson_solve_columns(pair, delta)
    h_hat_prime = poisson_solve_columns(pair, delta_prime)
    w = pair.stationary
    cross = (w[:, None] * delta_prime).T @ h_hat + (w[:, None] * delta).T @ h_hat_prime
    r0_prime = (w[:, None] * delta_prime).T @ delta
    sig_d_prime = cross + cross.T - (r0_prime + r0_prime.T)

    sig_d = sigma_delta(noise, pair)
    sig_t = sigma_theta_star(a_bar, sig_d)
    a_hat = matrix_poisson(noise, pair)
    ups = upsilon_bar(noise, pair, a_hat)
    bias = a_inv @ ups / (1.0 - rho)
    ups_prime = np.einsum("p,pij,pj->i", w, noise.a_of_phi - a_hat, delta_prime)

    correction = a_inv @ d_a_bar @ sig_t
    d_sigma = a_inv @ sig_d_prime @ a_inv.T - correction - correction.T
    d_sigma_frozen = -correction - correction.T
    d_bias = a_inv @ (-d_a_bar @ bias + ups_prime / (1.0 - rho))
    d_bias_frozen = a_inv @ (-d_a_bar @ bias)

    return SensitivityReport(
        d_theta_star=d_theta, d_a_bar=d_a_bar, d_a_inv=d_a_inv,
        d_sigma=d_sigma, d_bias=d_bias,
        sigma_delta_prime=sig_d_prime, upsilon_bar_prime=ups_prime,
        d_sigma_frozen_noise=d_sigma_frozen, d_bias_frozen_noise=d_bias_frozen,
        a_inv_prime_outer_residual=outer_residual,
    )
