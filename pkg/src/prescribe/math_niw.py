"""Closed-form Normal-Inverse-Wishart mathematics.

Conventions
-----------
``L`` parameterizes the *precision* scale of the Inverse-Wishart part::

    inv(Psi) = nu * L @ L.T          E[Lambda] = nu**2 * L @ L.T

so the centered second moment carried by the sufficient statistics is
``inv(L @ L.T) / nu**2``, which is (approximately) the covariance of ``y``.

The multivariate gamma/digamma helpers use a half-argument convention::

    mv_digamma(x, N)  = sum_n digamma((x - n + 1) / 2)
    mv_lngamma(x, N)  = N(N-1)/4 * ln(pi) + sum_n gammaln((x + 1 - n) / 2)

i.e. the textbook ``psi_N(x / 2)`` and ``ln Gamma_N(x / 2)``. The closed forms
below therefore evaluate them at ``nu`` wherever the textbook formula reads
``psi_N(nu / 2)``.

``mode`` selects how those special functions are evaluated: ``"exact"`` uses
:mod:`scipy.special`, ``"approx"`` the Stirling-type large-argument forms and
``"auto"`` (default) uses the approximations unless some term argument drops
below one, where they are inaccurate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy import linalg
from scipy.special import digamma, gammaln

from .errors import DomainError, IndefiniteMatrixError, NumericalError

logger = logging.getLogger(__name__)

Mode = Literal["auto", "approx", "exact"]
Recovery = Literal["eq4", "algorithm"]

JITTER_LADDER: tuple[float, ...] = (0.0, 1e-10, 1e-8, 1e-6)
LN_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class NIWParams:
    """Normal-Inverse-Wishart belief ``(mu0, kappa, nu, L)``.

    ``L`` is lower triangular with a strictly positive diagonal; see the
    module docstring for the precision-scale convention.
    """

    mu0: np.ndarray
    kappa: float
    nu: float
    L: np.ndarray

    def __post_init__(self):
        mu0 = np.asarray(self.mu0, dtype=float).reshape(-1)
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "nu", float(self.nu))
        n = mu0.shape[0]
        if L.shape != (n, n):
            raise ValueError(f"L has shape {L.shape}, expected {(n, n)}")
        if not self.kappa > 0:
            raise DomainError(f"kappa must be positive, got {self.kappa}")
        if not self.nu >= n:
            raise DomainError(f"nu must be >= N={n}, got {self.nu}")
        if np.any(np.triu(L, 1) != 0):
            raise ValueError("L must be lower triangular")
        if not np.all(np.diag(L) > 0):
            raise DomainError("diagonal of L must be strictly positive")
        if not (np.all(np.isfinite(mu0)) and np.all(np.isfinite(L))):
            raise NumericalError("NIW parameters must be finite")

    @property
    def dim(self) -> int:
        return self.mu0.shape[0]

    @property
    def precision_scale(self) -> np.ndarray:
        """``inv(Psi) = nu * L @ L.T``."""
        return self.nu * self.L @ self.L.T

    @property
    def scale(self) -> np.ndarray:
        """The Inverse-Wishart scale matrix ``Psi``."""
        Linv = _tri_inverse(self.L)
        return Linv.T @ Linv / self.nu

    def logdet_2nuLLt(self) -> float:
        """``ln|2 nu L L^T|``, equal to ``-ln|Psi / 2|``."""
        return self.dim * np.log(2.0 * self.nu) + 2.0 * float(np.sum(np.log(np.diag(self.L))))


@dataclass(frozen=True)
class SufficientStats:
    """Natural-parameter statistics ``(chi1, chi2)`` with evidence ``nu_out``."""

    chi1: np.ndarray
    chi2: np.ndarray
    nu_out: float

    def __post_init__(self):
        chi1 = np.asarray(self.chi1, dtype=float).reshape(-1)
        chi2 = np.atleast_2d(np.asarray(self.chi2, dtype=float))
        object.__setattr__(self, "chi1", chi1)
        object.__setattr__(self, "chi2", chi2)
        object.__setattr__(self, "nu_out", float(self.nu_out))
        if chi2.shape != (chi1.shape[0],) * 2:
            raise ValueError(f"chi2 has shape {chi2.shape}, expected {(chi1.shape[0],) * 2}")
        if self.nu_out < 0:
            raise DomainError(f"evidence must be non-negative, got {self.nu_out}")

    @property
    def dim(self) -> int:
        return self.chi1.shape[0]

    def centered(self) -> np.ndarray:
        """``chi2 - chi1 chi1^T``."""
        return self.chi2 - np.outer(self.chi1, self.chi1)


@dataclass(frozen=True)
class PredictiveT:
    """Multivariate Student-t posterior predictive."""

    dof: float
    location: np.ndarray
    shape: np.ndarray

    @property
    def dim(self) -> int:
        return self.location.shape[0]

    def logpdf(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        d = np.atleast_2d(x) - self.location
        n, df = self.dim, self.dof
        chol = cholesky_psd(self.shape)
        sol = linalg.solve_triangular(chol, d.T, lower=True)
        maha = np.sum(sol**2, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out = (
            gammaln(0.5 * (df + n))
            - gammaln(0.5 * df)
            - 0.5 * n * np.log(df * np.pi)
            - 0.5 * logdet
            - 0.5 * (df + n) * np.log1p(maha / df)
        )
        return float(out[0]) if single else out

    def entropy(self) -> float:
        n, df = self.dim, self.dof
        _, logdet = np.linalg.slogdet(self.shape)
        return float(
            0.5 * logdet
            + 0.5 * n * np.log(df * np.pi)
            + gammaln(0.5 * df)
            - gammaln(0.5 * (df + n))
            + 0.5 * (df + n) * (digamma(0.5 * (df + n)) - digamma(0.5 * df))
        )


# --------------------------------------------------------------------------
# special functions

def _term_args(x: float, n_dim: int) -> np.ndarray:
    return (x + 1.0 - np.arange(1, n_dim + 1)) / 2.0


def _check_domain(x: float, n_dim: int, name: str) -> np.ndarray:
    args = _term_args(x, n_dim)
    if not np.all(args > 0):
        raise DomainError(f"{name}: need x > N - 1 = {n_dim - 1}, got x={x}")
    return args


def mv_lngamma_approx(x: float, n_dim: int) -> float:
    """Large-argument approximation of the multivariate log-gamma.

    Evaluates ``N(N-1)/4 ln(2 pi) + 1/2 sum_n [ln 2pi - (x+1-n) + (x-n) ln((x+1-n)/2)]``.
    """
    args = _check_domain(x, n_dim, "mv_lngamma_approx")
    n = np.arange(1, n_dim + 1)
    terms = LN_2PI - (x + 1.0 - n) + (x - n) * np.log(args)
    return float(n_dim * (n_dim - 1) / 4.0 * LN_2PI + 0.5 * np.sum(terms))


def mv_digamma_approx(x: float, n_dim: int) -> float:
    """``sum_n ln((x - n + 1) / 2)``."""
    args = _check_domain(x, n_dim, "mv_digamma_approx")
    return float(np.sum(np.log(args)))


def mv_lngamma(x: float, n_dim: int) -> float:
    """Exact multivariate log-gamma (half-argument convention)."""
    args = _check_domain(x, n_dim, "mv_lngamma")
    return float(n_dim * (n_dim - 1) / 4.0 * np.log(np.pi) + np.sum(gammaln(args)))


def mv_digamma(x: float, n_dim: int) -> float:
    """Exact multivariate digamma (half-argument convention)."""
    args = _check_domain(x, n_dim, "mv_digamma")
    return float(np.sum(digamma(args)))


def _use_exact(x: float, n_dim: int, mode: Mode) -> bool:
    if mode not in ("auto", "approx", "exact"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "auto":
        return bool(np.any(_term_args(x, n_dim) < 1.0))
    return mode == "exact"


def _lngamma_n(x: float, n_dim: int, mode: Mode) -> float:
    if _use_exact(x, n_dim, mode):
        return mv_lngamma(x, n_dim)
    # the exact definition carries ln(pi) in the prefix, keep the two branches consistent
    return mv_lngamma_approx(x, n_dim) - n_dim * (n_dim - 1) / 4.0 * np.log(2.0)


def _digamma_n(x: float, n_dim: int, mode: Mode) -> float:
    if _use_exact(x, n_dim, mode):
        return mv_digamma(x, n_dim)
    return mv_digamma_approx(x, n_dim)


def _weighted_digamma_n(nu: float, n_dim: int, mode: Mode) -> float:
    """``(nu + N + 1)/2 * psi_N(nu/2)`` using ``u psi(u) ~ u ln u - 1/2`` when approximating."""
    args = _check_domain(nu, n_dim, "entropy")
    coef = 0.5 * (nu + n_dim + 1.0)
    if _use_exact(nu, n_dim, mode):
        return float(coef * np.sum(digamma(args)))
    rest = coef - args
    return float(np.sum(args * np.log(args) - 0.5 + rest * np.log(args)))


# --------------------------------------------------------------------------
# linear algebra

def _tri_inverse(L: np.ndarray) -> np.ndarray:
    return linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)


def cholesky_psd(M, jitter_ladder: Sequence[float] = JITTER_LADDER) -> np.ndarray:
    """Lower Cholesky factor of ``M + eps I`` for the first ``eps`` in the ladder that works."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-10 * scale):
        raise ValueError("matrix is not symmetric")
    M = 0.5 * (M + M.T)
    eye = np.eye(M.shape[0])
    for eps in jitter_ladder:
        try:
            L = np.linalg.cholesky(M + eps * eye)
        except np.linalg.LinAlgError:
            continue
        if eps:
            logger.info("cholesky succeeded with jitter %g", eps)
        return L
    raise IndefiniteMatrixError(f"matrix not positive definite after jitter ladder {tuple(jitter_ladder)}")


# --------------------------------------------------------------------------
# closed forms

def niw_expected_loglik(y, p: NIWParams, mode: Mode = "auto") -> float:
    """``E_{(mu, Sigma) ~ NIW}[ln N(y | mu, Sigma)]``.

    The trace identities give
    ``1/2 [-(y-mu0)^T nu^2 L L^T (y-mu0) - N/kappa + ln|2 nu L L^T| + psi_N(nu/2) - N ln 2pi]``;
    with the model's coupling ``kappa = 2 nu`` the second term is ``N / (2 nu)``.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape != p.mu0.shape:
        raise ValueError(f"y has shape {y.shape}, expected {p.mu0.shape}")
    n = p.dim
    d = p.L.T @ (y - p.mu0)
    quad = p.nu**2 * float(d @ d)
    return 0.5 * (
        -quad - n / p.kappa + p.logdet_2nuLLt() + _digamma_n(p.nu, n, mode) - n * LN_2PI
    )


def niw_entropy(p: NIWParams, mode: Mode = "auto") -> float:
    """Differential entropy of the Inverse-Wishart factor of the NIW.

    ``-(N+1)/2 ln|2 nu L L^T| + ln Gamma_N(nu/2) - (nu+N+1)/2 psi_N(nu/2) + nu N / 2``.
    """
    n = p.dim
    return (
        -0.5 * (n + 1) * p.logdet_2nuLLt()
        + _lngamma_n(p.nu, n, mode)
        - _weighted_digamma_n(p.nu, n, mode)
        + 0.5 * p.nu * n
    )


def niw_joint_entropy(p: NIWParams, mode: Mode = "auto") -> float:
    """Entropy of the full NIW: Inverse-Wishart part plus ``E[H(N(mu0, Sigma/kappa))]``."""
    n = p.dim
    e_logdet_sigma = -p.logdet_2nuLLt() - _digamma_n(p.nu, n, mode)
    gaussian = 0.5 * n * (LN_2PI + 1.0) - 0.5 * n * np.log(p.kappa) + 0.5 * e_logdet_sigma
    return niw_entropy(p, mode) + gaussian


def sufficient_stats_from_params(p: NIWParams, evidence: float | None = None) -> SufficientStats:
    """``chi1 = mu0``, ``chi2 = mu0 mu0^T + L^{-T} L^{-1} / nu^2``.

    ``evidence`` overrides the reported ``nu_out`` (the mixing weight used by
    :func:`bayes_update`); by default it is ``p.nu``.
    """
    Linv = _tri_inverse(p.L)
    if not np.all(np.isfinite(Linv)):
        raise NumericalError("L is singular")
    centered = Linv.T @ Linv / p.nu**2
    chi2 = np.outer(p.mu0, p.mu0) + centered
    return SufficientStats(p.mu0.copy(), 0.5 * (chi2 + chi2.T), p.nu if evidence is None else evidence)


def params_from_sufficient_stats(
    s: SufficientStats, nu: float | None = None, recovery: Recovery = "eq4"
) -> NIWParams:
    """Invert :func:`sufficient_stats_from_params`.

    ``recovery="algorithm"`` reproduces the literal training-loop assembly
    ``L = chol(C nu^2) nu`` instead, which is *not* the inverse map; it is kept
    for comparison only.
    """
    nu = s.nu_out if nu is None else float(nu)
    C = s.centered()
    if recovery == "eq4":
        R = cholesky_psd(C)
        Rinv = _tri_inverse(R)
        L = cholesky_psd(Rinv.T @ Rinv) / nu
    elif recovery == "algorithm":
        L = cholesky_psd(C * nu**2) * nu
    else:
        raise ValueError(f"unknown recovery {recovery!r}")
    return NIWParams(s.chi1.copy(), 2.0 * nu, nu, L)


def mix_sufficient_stats(prior: SufficientStats, out: SufficientStats) -> SufficientStats:
    """Conjugate update ``chi_post = (n_prior chi_prior + nu_out chi_out) / (n_prior + nu_out)``.

    Evaluated as a convex combination so that zero evidence returns the prior
    bit-for-bit. The returned ``nu_out`` is the accumulated count ``n_prior + nu_out``.
    """
    if prior.dim != out.dim:
        raise ValueError(f"dimension mismatch: {prior.dim} vs {out.dim}")
    if not prior.nu_out > 0:
        raise DomainError("prior evidence must be positive")
    total = prior.nu_out + out.nu_out
    a = out.nu_out / total
    chi1 = prior.chi1 + a * (out.chi1 - prior.chi1)
    chi2 = prior.chi2 + a * (out.chi2 - prior.chi2)
    return SufficientStats(chi1, chi2, total)


def posterior_evidence(nu, nu_prior, n_dim: int):
    """Band-limited posterior evidence ``N nu / (nu + nu_prior) + N`` in ``[N, 2N]``."""
    return n_dim * nu / (nu + nu_prior) + n_dim


def bayes_update(prior: SufficientStats, out: SufficientStats, recovery: Recovery = "eq4") -> NIWParams:
    """Posterior NIW from a prior and a decoder observation.

    The statistics are mixed with weights ``prior.nu_out`` and ``out.nu_out``;
    the posterior degrees of freedom come from :func:`posterior_evidence` and
    ``kappa = 2 nu``.
    """
    post = mix_sufficient_stats(prior, out)
    nu_tilde = posterior_evidence(out.nu_out, prior.nu_out, prior.dim)
    return params_from_sufficient_stats(post, nu=nu_tilde, recovery=recovery)


def predictive_t(p: NIWParams) -> PredictiveT:
    """Student-t posterior predictive ``t_{nu-N+1}(mu0, (1+kappa)/(kappa (nu-N+1)) Psi)``."""
    dof = p.nu - p.dim + 1.0
    if not dof > 0:
        raise DomainError(f"predictive degrees of freedom must be positive, got {dof}")
    shape = (1.0 + p.kappa) / (p.kappa * dof) * p.scale
    return PredictiveT(dof, p.mu0.copy(), 0.5 * (shape + shape.T))
