"""Model: set encoder, radial-flow evidence, linear decoder and posterior assembly.

All tensors are float64. A forward pass maps a batch of perturbation keys to a
posterior NIW belief per key::

    z      = encoder(ids, control profile)
    nu     = exp(min(log p_flow(z), bound) + ln N)            evidence
    a      = nu / (nu + nu_prior)                             mixing weight
    nu~    = N + N a                                          posterior dof in [N, 2N)
    mu     = mu_prior + a (mu_out - mu_prior)
    C      = (1-a) C_prior + a C_out + a (1-a) d d^T           centered second moment
    L      = chol(inv(C)) / nu~,  kappa = 2 nu~

``a`` is evaluated as ``sigmoid(log nu - ln nu_prior)`` so that vanishing
evidence returns the prior exactly instead of through ``0/0``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import _io
from . import _torch_niw as tn
from .edistance import BandMap
from .errors import DataFormatError, DomainError, NumericalError
from .math_niw import NIWParams, cholesky_psd

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_FORMAT = "prescribe-checkpoint/1"
MAX_LOG_EVIDENCE = 700.0


@dataclass
class ModelConfig:
    n_dim: int = 10
    latent_dim: int = 64
    hidden_dim: int = 64
    flow_layers: int = 10
    n_genes: int = 200
    embed_dim: int = 64
    leaky_slope: float = 0.01
    nu_prior: float = 0.5
    kappa_prior: float = 1.0
    density_bound: float = 30.0
    diag_floor: float = 1e-6
    mode: str = "auto"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# components

class Encoder(nn.Module):
    """Permutation-invariant set encoder over a frozen gene-embedding table."""

    def __init__(self, embed_table: torch.Tensor, vocabulary: Sequence[str], n_genes: int,
                 hidden_dim: int, latent_dim: int, slope: float = 0.01):
        super().__init__()
        self.vocabulary = list(vocabulary)
        self.index = {g: i for i, g in enumerate(self.vocabulary)}
        if len(self.index) != len(self.vocabulary):
            raise ValueError("duplicate perturbation ids in vocabulary")
        self.register_buffer("embed_table", embed_table.to(DTYPE))
        S = embed_table.shape[1]
        self.f11 = nn.Linear(S, hidden_dim, dtype=DTYPE)
        self.f12 = nn.Sequential(
            nn.Linear(n_genes, hidden_dim, dtype=DTYPE), nn.LeakyReLU(slope), nn.Linear(hidden_dim, hidden_dim, dtype=DTYPE)
        )
        self.f13 = nn.Linear(hidden_dim, hidden_dim, dtype=DTYPE)
        self.f2 = nn.Sequential(
            nn.Linear(hidden_dim, hidden_dim, dtype=DTYPE), nn.LeakyReLU(slope), nn.Linear(hidden_dim, hidden_dim, dtype=DTYPE)
        )
        self.f_out = nn.Linear(hidden_dim, latent_dim, dtype=DTYPE)

    def ids_to_index(self, keys: Sequence[Sequence[str]]) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded ``(B, K)`` index matrix of sorted ids and its 0/1 mask."""
        if not keys:
            raise DomainError("empty batch")
        width = max(len(k) for k in keys)
        idx = torch.zeros(len(keys), max(width, 1), dtype=torch.long)
        mask = torch.zeros(len(keys), max(width, 1), dtype=DTYPE)
        for b, ids in enumerate(keys):
            if len(ids) == 0:
                raise DomainError("perturbation set must contain at least one id")
            for j, g in enumerate(sorted(ids)):
                try:
                    idx[b, j] = self.index[g]
                except KeyError:
                    raise KeyError(f"unknown perturbation id {g!r}") from None
                mask[b, j] = 1.0
        return idx, mask

    def single(self, idx: torch.Tensor, control: torch.Tensor) -> torch.Tensor:
        """``h = f13(f11(e) + f12(control))`` for every index in ``idx``."""
        return self.f13(self.f11(self.embed_table[idx]) + self.f12(control))

    def forward(self, keys: Sequence[Sequence[str]], control: torch.Tensor) -> torch.Tensor:
        idx, mask = self.ids_to_index(keys)
        h = self.single(idx, control) * mask[..., None]
        s = h.sum(dim=1)
        return self.f_out(s + self.f2(s))


def _inv_softplus(x: float) -> float:
    return x + math.log(-math.expm1(-x))


class RadialFlow(nn.Module):
    """One radial layer ``f(z) = z + beta h(r) (z - z0)``, ``h = 1/(alpha + r)``.

    ``alpha = softplus(a_raw) > 0`` and ``beta = -alpha + softplus(b_raw) > -alpha``
    keep the map invertible. The default raw parameters give the identity.
    """

    def __init__(self, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.dim = dim
        self.z0 = nn.Parameter(torch.randn(dim, generator=generator, dtype=DTYPE) / math.sqrt(dim))
        self.alpha_raw = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.beta_raw = nn.Parameter(torch.full((), _inv_softplus(math.log(2.0)), dtype=DTYPE))

    def coefficients(self) -> tuple[torch.Tensor, torch.Tensor]:
        alpha = F.softplus(self.alpha_raw)
        return alpha, -alpha + F.softplus(self.beta_raw)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        alpha, beta = self.coefficients()
        diff = z - self.z0
        r = torch.linalg.vector_norm(diff, dim=-1)
        h = 1.0 / (alpha + r)
        bh = beta * h
        out = z + bh[..., None] * diff
        logdet = (self.dim - 1) * torch.log1p(bh) + torch.log1p(bh - beta * h**2 * r)
        return out, logdet


class Flow(nn.Module):
    """Stack of radial layers over a standard Gaussian base."""

    def __init__(self, dim: int, n_layers: int, generator: torch.Generator | None = None):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(RadialFlow(dim, generator) for _ in range(n_layers))

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        total = torch.zeros(z.shape[:-1], dtype=z.dtype)
        for layer in self.layers:
            alpha, beta = layer.coefficients()
            if not bool(beta >= -alpha):
                raise NumericalError("radial flow layer violates beta >= -alpha")
            z, logdet = layer(z)
            total = total + logdet
        base = -0.5 * (z**2).sum(-1) - 0.5 * self.dim * tn.LN_2PI
        return base + total


class Decoder(nn.Module):
    """One linear layer to ``N`` mean entries plus the row-wise lower triangle of ``L``."""

    def __init__(self, latent_dim: int, n_dim: int, diag_floor: float = 1e-6):
        super().__init__()
        self.n_dim = n_dim
        self.diag_floor = diag_floor
        self.linear = nn.Linear(latent_dim, n_dim + n_dim * (n_dim + 1) // 2, dtype=DTYPE)
        rows, cols = torch.tril_indices(n_dim, n_dim)
        self.register_buffer("rows", rows, persistent=False)
        self.register_buffer("cols", cols, persistent=False)

    def unpack(self, out: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n = self.n_dim
        mu = out[..., :n]
        tri = out[..., n:]
        diag = self.rows == self.cols
        tri = torch.where(diag, F.softplus(tri) + self.diag_floor, tri)
        L = torch.zeros(out.shape[:-1] + (n, n), dtype=out.dtype)
        return mu, _fill_tril(L, tri, self.rows, self.cols)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.unpack(self.linear(z))

    def init_null_state(self, mu: torch.Tensor, L: torch.Tensor, weight_scale: float = 0.1) -> None:
        """Bias the outputs towards ``(mu, L)`` at ``z = 0`` and shrink the weights."""
        with torch.no_grad():
            raw = L[self.rows, self.cols].clone()
            d = self.rows == self.cols
            raw[d] = torch.tensor([_inv_softplus(float(v) - self.diag_floor) for v in raw[d]], dtype=DTYPE)
            self.linear.bias.copy_(torch.cat([mu, raw]))
            self.linear.weight.mul_(weight_scale)


def _fill_tril(L: torch.Tensor, values: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    flat = L.reshape(-1, L.shape[-2] * L.shape[-1])
    pos = rows * L.shape[-1] + cols
    flat = flat.index_copy(1, pos, values.reshape(-1, values.shape[-1]))
    return flat.reshape(L.shape)


# ---------------------------------------------------------------------------
# functional entry points

def encode_single(pert_id: str, control_profile, encoder: Encoder) -> torch.Tensor:
    """Per-id embedding ``h`` (hidden width)."""
    idx, _ = encoder.ids_to_index([[pert_id]])
    return encoder.single(idx[0, 0], _as_tensor(control_profile))


def encode_set(pert_ids: Sequence[str], control_profile, encoder: Encoder) -> torch.Tensor:
    """Latent ``z`` of a perturbation set; ids are summed in sorted order."""
    if len(pert_ids) == 0:
        raise DomainError("perturbation set must contain at least one id")
    return encoder([list(pert_ids)], _as_tensor(control_profile))[0]


def flow_log_density(z, flow: Flow) -> torch.Tensor:
    return flow.log_prob(_as_tensor(z))


def log_evidence(log_density: torch.Tensor, n_dim: int, bound: float | None = None) -> torch.Tensor:
    """``min(log p, bound) + ln N``, clamped to at most 700 before any exponentiation."""
    if bound is not None:
        log_density = torch.clamp(log_density, max=bound)
    out = log_density + math.log(n_dim)
    if bool((out > MAX_LOG_EVIDENCE).any()):
        logger.warning("log evidence clamped to %g", MAX_LOG_EVIDENCE)
        out = torch.clamp(out, max=MAX_LOG_EVIDENCE)
    return out


def evidence(z, flow: Flow, n_dim: int, bound: float | None = None) -> torch.Tensor:
    """``nu = exp(log p_flow(z) + ln N)``."""
    return torch.exp(log_evidence(flow_log_density(z, flow), n_dim, bound))


def posterior_evidence(nu, nu_prior: float, n_dim: int):
    """``N nu / (nu + nu_prior) + N``."""
    return n_dim * nu / (nu + nu_prior) + n_dim


def decode(z, decoder: Decoder) -> tuple[torch.Tensor, torch.Tensor]:
    return decoder(_as_tensor(z))


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


# ---------------------------------------------------------------------------
# model

@dataclass
class ForwardOutput:
    z: torch.Tensor
    log_density: torch.Tensor
    log_nu: torch.Tensor  # pre-band evidence, log scale
    weight: torch.Tensor  # a = nu / (nu + nu_prior)
    nu_tilde: torch.Tensor
    kappa: torch.Tensor
    mu: torch.Tensor
    L: torch.Tensor
    mu_out: torch.Tensor
    L_out: torch.Tensor
    entropy: torch.Tensor  # predictive (Student-t) entropy
    h_tilde: torch.Tensor
    pseudo_e: torch.Tensor
    keys: list = field(default_factory=list)

    def posterior(self, i: int) -> NIWParams:
        return NIWParams(self.mu[i].detach().numpy(), float(self.kappa[i]), float(self.nu_tilde[i]),
                         self.L[i].detach().numpy())


class PrescribeModel(nn.Module):
    def __init__(self, config: ModelConfig, vocabulary: Sequence[str], embed_table,
                 prior_mean, prior_cov, control_profile, pca: dict | None = None):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(int(config.seed))
        table = _as_tensor(embed_table)
        if table.shape[0] != len(vocabulary):
            raise ValueError("embedding table rows must match the vocabulary")
        # nn.Linear draws from the global generator; seed it locally for reproducible init
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(config.seed))
            self.encoder = Encoder(table, vocabulary, config.n_genes, config.hidden_dim, config.latent_dim,
                                   config.leaky_slope)
            self.flow = Flow(config.latent_dim, config.flow_layers, gen)
            self.decoder = Decoder(config.latent_dim, config.n_dim, config.diag_floor)
        N = config.n_dim
        prior_mean, prior_cov = _as_tensor(prior_mean), _as_tensor(prior_cov)
        if prior_mean.shape != (N,) or prior_cov.shape != (N, N):
            raise ValueError("prior shapes do not match n_dim")
        self.register_buffer("prior_mean", prior_mean)
        self.register_buffer("prior_cov", 0.5 * (prior_cov + prior_cov.T))
        self.register_buffer("control_profile", _as_tensor(control_profile))
        self.register_buffer("band", torch.tensor([math.nan, math.nan], dtype=DTYPE))
        self.pca = pca
        null_nu = 1.5 * N
        L_null = _prec_chol(self.prior_cov[None], torch.tensor([null_nu], dtype=DTYPE))[0]
        self.decoder.init_null_state(self.prior_mean, L_null)

    # -- band -------------------------------------------------------------
    @property
    def entropy_band(self) -> BandMap | None:
        lo, hi = (float(v) for v in self.band)
        return BandMap(lo, hi, self.config.n_dim) if math.isfinite(lo) and hi > lo else None

    def set_entropy_band(self, band: BandMap | None) -> None:
        with torch.no_grad():
            self.band.copy_(torch.tensor([math.nan, math.nan] if band is None else [band.lo, band.hi], dtype=DTYPE))

    def band_entropy(self, entropy: torch.Tensor) -> torch.Tensor:
        N = self.config.n_dim
        lo, hi = self.band[0], self.band[1]
        if not bool(torch.isfinite(lo)) or not bool(hi > lo):
            return torch.full_like(entropy, 1.5 * N)
        return torch.clamp(N + N * (entropy - lo) / (hi - lo), N, 2 * N)

    # -- forward ------------------------------------------------------------
    def forward(self, keys: Sequence[Sequence[str]], log_density_override: torch.Tensor | None = None) -> ForwardOutput:
        cfg = self.config
        N = cfg.n_dim
        keys = [tuple(sorted(k)) for k in keys]
        z = self.encoder(keys, self.control_profile)
        logp = self.flow.log_prob(z) if log_density_override is None else log_density_override
        log_nu = log_evidence(logp, N, cfg.density_bound)
        a = torch.sigmoid(log_nu - math.log(cfg.nu_prior))
        nu_tilde = N + N * a
        mu_out, L_out = self.decoder(z)
        mu, L = assemble_posterior(self.prior_mean, self.prior_cov, mu_out, L_out, a, nu_tilde)
        kappa = 2.0 * nu_tilde
        ent = tn.predictive_entropy(kappa, nu_tilde, L)
        h_tilde = self.band_entropy(ent)
        return ForwardOutput(z, logp, log_nu, a, nu_tilde, kappa, mu, L, mu_out, L_out, ent, h_tilde,
                             2.0 * nu_tilde - h_tilde, list(keys))

    @torch.no_grad()
    def predict(self, keys: Sequence[Sequence[str]]) -> dict[str, np.ndarray]:
        out = self.forward(keys)
        return {
            "mu": out.mu.numpy().copy(),
            "nu_tilde": out.nu_tilde.numpy().copy(),
            "h_tilde": out.h_tilde.numpy().copy(),
            "pseudo_e": out.pseudo_e.numpy().copy(),
            "entropy": out.entropy.numpy().copy(),
            "log_density": out.log_density.numpy().copy(),
        }

    # -- persistence ----------------------------------------------------------
    def to_checkpoint(self, extra: dict | None = None) -> dict:
        state = {k: v.detach().numpy().tolist() for k, v in self.state_dict().items()}
        return {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "vocabulary": self.encoder.vocabulary,
            "state": state,
            "pca": self.pca,
            **(extra or {}),
        }

    def save(self, path, extra: dict | None = None, prov: dict | None = None) -> Path:
        doc = self.to_checkpoint(extra)
        doc["provenance"] = prov if prov is not None else _io.provenance(asdict(self.config), self.config.seed)
        _io.write_json(Path(path), doc)
        return Path(path)

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "PrescribeModel":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise DataFormatError(f"unsupported checkpoint format {doc.get('format')!r}")
        cfg = ModelConfig.from_dict(doc["config"])
        st = doc["state"]
        model = cls(cfg, doc["vocabulary"], st["encoder.embed_table"], st["prior_mean"], st["prior_cov"],
                    st["control_profile"], pca=doc.get("pca"))
        tensors = {k: torch.tensor(v, dtype=DTYPE) for k, v in st.items()}
        model.load_state_dict(tensors)
        return model

    @classmethod
    def load(cls, path) -> "PrescribeModel":
        return cls.from_checkpoint(_io.read_json(Path(path)))


def _prec_chol(C: torch.Tensor, nu: torch.Tensor) -> torch.Tensor:
    """``chol(inv(C)) / nu`` batched."""
    R = tn.cholesky_jitter(C)
    Rinv = tn.tri_inverse(R)
    P = Rinv.transpose(-1, -2) @ Rinv
    return tn.cholesky_jitter(P) / nu[..., None, None]


def assemble_posterior(prior_mean, prior_cov, mu_out, L_out, a, nu_tilde):
    """Mix prior and decoder statistics with weight ``a``; returns posterior ``(mu, L)``."""
    Linv = tn.tri_inverse(L_out)
    C_out = Linv.transpose(-1, -2) @ Linv / nu_tilde[..., None, None] ** 2
    delta = mu_out - prior_mean
    w = a[..., None, None]
    C = (1.0 - w) * prior_cov + w * C_out + (w * (1.0 - w)) * delta[..., :, None] * delta[..., None, :]
    mu = prior_mean + a[..., None] * delta
    return mu, _prec_chol(C, nu_tilde)


# ---------------------------------------------------------------------------
# construction from a dataset

def prior_from_controls(control_pca) -> tuple[np.ndarray, np.ndarray]:
    """Control mean and covariance in PCA space (the prior statistics)."""
    X = np.asarray(control_pca, dtype=float)
    mean = X.mean(axis=0)
    cov = np.cov(X, rowvar=False, bias=True).reshape(X.shape[1], X.shape[1])
    cholesky_psd(cov)
    return mean, cov


def random_embeddings(vocabulary: Sequence[str], width: int = 64, seed: int = 0) -> np.ndarray:
    """Seeded Gaussian stand-in for pretrained gene embeddings."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((len(vocabulary), width))


def build_model(dataset, config: ModelConfig) -> PrescribeModel:
    """Model with prior, control profile and embeddings taken from a prepared dataset."""
    from .data import split_key

    if dataset.pca is None:
        raise ValueError("dataset has no fitted PCA; call data.prepare() first")
    vocab = sorted({g for k in dataset.perturbations() for g in split_key(k)})
    if dataset.embeddings is not None:
        missing = [g for g in vocab if g not in dataset.embeddings]
        if missing:
            raise KeyError(f"no embedding for perturbation ids {missing[:5]}")
        table = np.array([dataset.embeddings[g] for g in vocab])
    else:
        table = random_embeddings(vocab, config.embed_dim, config.seed)
    cfg = ModelConfig.from_dict({**asdict(config), "embed_dim": table.shape[1], "n_genes": dataset.n_genes,
                                 "n_dim": dataset.pca.n_components})
    mean, cov = prior_from_controls(dataset.project(dataset.controls))
    return PrescribeModel(cfg, vocab, table, mean, cov, dataset.control_mean, pca=dataset.pca.to_dict())
