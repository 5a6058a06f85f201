"""Batched, differentiable versions of the NIW closed forms in :mod:`prescribe.math_niw`.

Shapes: ``mu0 (B, N)``, ``nu``/``kappa`` ``(B,)``, ``L (B, N, N)``. Special
functions follow the same half-argument convention and ``mode`` rules.
"""
from __future__ import annotations

import math

import torch

from .errors import IndefiniteMatrixError
from .math_niw import JITTER_LADDER

LN_2PI = math.log(2.0 * math.pi)


def _args(nu: torch.Tensor, n_dim: int) -> torch.Tensor:
    n = torch.arange(1, n_dim + 1, dtype=nu.dtype, device=nu.device)
    return (nu.unsqueeze(-1) + 1.0 - n) / 2.0


def _exact_mask(args: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "exact":
        return torch.ones(args.shape[:-1], dtype=torch.bool, device=args.device)
    if mode == "approx":
        return torch.zeros(args.shape[:-1], dtype=torch.bool, device=args.device)
    if mode == "auto":
        return (args < 1.0).any(dim=-1)
    raise ValueError(f"unknown mode {mode!r}")


def lngamma_n(nu: torch.Tensor, n_dim: int, mode: str = "auto") -> torch.Tensor:
    args = _args(nu, n_dim)
    prefix = n_dim * (n_dim - 1) / 4.0 * math.log(math.pi)
    exact = torch.lgamma(args).sum(-1)
    x = nu.unsqueeze(-1)
    n = args.new_tensor(range(1, n_dim + 1))
    approx = 0.5 * (LN_2PI - (x + 1.0 - n) + (x - n) * torch.log(args)).sum(-1)
    return prefix + torch.where(_exact_mask(args, mode), exact, approx)


def digamma_n(nu: torch.Tensor, n_dim: int, mode: str = "auto") -> torch.Tensor:
    args = _args(nu, n_dim)
    exact = torch.digamma(args).sum(-1)
    approx = torch.log(args).sum(-1)
    return torch.where(_exact_mask(args, mode), exact, approx)


def weighted_digamma_n(nu: torch.Tensor, n_dim: int, mode: str = "auto") -> torch.Tensor:
    args = _args(nu, n_dim)
    coef = 0.5 * (nu.unsqueeze(-1) + n_dim + 1.0)
    exact = (coef * torch.digamma(args)).sum(-1)
    log_args = torch.log(args)
    approx = (args * log_args - 0.5 + (coef - args) * log_args).sum(-1)
    return torch.where(_exact_mask(args, mode), exact, approx)


def logdet_2nuLLt(nu: torch.Tensor, L: torch.Tensor) -> torch.Tensor:
    n_dim = L.shape[-1]
    diag = torch.diagonal(L, dim1=-2, dim2=-1)
    return n_dim * torch.log(2.0 * nu) + 2.0 * torch.log(diag).sum(-1)


def expected_loglik(y, mu0, kappa, nu, L, mode: str = "auto") -> torch.Tensor:
    """Per-row expected Gaussian log-likelihood; all inputs share the leading batch axis."""
    n_dim = mu0.shape[-1]
    d = torch.einsum("bij,bi->bj", L, y - mu0)
    quad = nu**2 * (d**2).sum(-1)
    return 0.5 * (-quad - n_dim / kappa + logdet_2nuLLt(nu, L) + digamma_n(nu, n_dim, mode) - n_dim * LN_2PI)


def iw_entropy(nu, L, mode: str = "auto") -> torch.Tensor:
    n_dim = L.shape[-1]
    return (
        -0.5 * (n_dim + 1) * logdet_2nuLLt(nu, L)
        + lngamma_n(nu, n_dim, mode)
        - weighted_digamma_n(nu, n_dim, mode)
        + 0.5 * nu * n_dim
    )


def predictive_entropy(kappa, nu, L) -> torch.Tensor:
    """Entropy of the Student-t posterior predictive."""
    n_dim = L.shape[-1]
    dof = nu - n_dim + 1.0
    diag = torch.diagonal(L, dim1=-2, dim2=-1)
    # shape = (1+kappa)/(kappa dof) * inv(nu L L^T)
    logdet_shape = (
        n_dim * torch.log((1.0 + kappa) / (kappa * dof)) - n_dim * torch.log(nu) - 2.0 * torch.log(diag).sum(-1)
    )
    half = 0.5 * (dof + n_dim)
    return (
        0.5 * logdet_shape
        + 0.5 * n_dim * torch.log(dof * math.pi)
        + torch.lgamma(0.5 * dof)
        - torch.lgamma(half)
        + half * (torch.digamma(half) - torch.digamma(0.5 * dof))
    )


def cholesky_jitter(M: torch.Tensor, ladder=JITTER_LADDER) -> torch.Tensor:
    """Batched Cholesky with the same deterministic jitter ladder as :func:`math_niw.cholesky_psd`."""
    eye = torch.eye(M.shape[-1], dtype=M.dtype, device=M.device)
    M = 0.5 * (M + M.transpose(-1, -2))
    result = None
    pending = None
    for eps in ladder:
        L, info = torch.linalg.cholesky_ex(M + eps * eye)
        ok = info == 0
        if result is None:
            result, pending = L, ~ok
        else:
            take = pending & ok
            result = torch.where(take[..., None, None], L, result)
            pending = pending & ~ok
        if not pending.any():
            return result
    raise IndefiniteMatrixError(f"{int(pending.sum())} matrices not positive definite after jitter ladder")


def tri_inverse(L: torch.Tensor) -> torch.Tensor:
    eye = torch.eye(L.shape[-1], dtype=L.dtype, device=L.device).expand_as(L)
    return torch.linalg.solve_triangular(L, eye, upper=False)
