"""Inducing points in the embedding space and the stochastic ELBO.

The model object :class:`TLVMOGP` bundles embedder, latents, kernel, inducing
state and likelihood; :func:`elbo_minibatch` evaluates the doubly-stochastic
estimator for one batch of observations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .diffmath import DTYPE, chol_solve, cholesky, log_det_from_chol, tri_solve
from .embedder import Architecture, Embedder
from .kernel import KernelHyperparams, inv_softplus, rbf_diag, rbf_gram, softplus
from .latent import LatentState

BOUNDS = ("standard", "tighter")


class InducingState(nn.Module):
    """``q(u) = N(m, S)`` at locations ``Z`` with ``S = L L^T``, ``L`` lower-triangular."""

    def __init__(self, Z: np.ndarray | torch.Tensor, whiten: bool = False):
        super().__init__()
        Z = torch.as_tensor(np.asarray(Z, dtype=float), dtype=DTYPE)
        if Z.ndim != 2 or Z.shape[0] < 1:
            raise ValueError("need at least one inducing location")
        M = Z.shape[0]
        self.Z = nn.Parameter(Z.clone())
        self.q_mu = nn.Parameter(torch.zeros(M, dtype=DTYPE))
        self.q_sqrt = nn.Parameter(torch.eye(M, dtype=DTYPE))
        self.whiten = whiten

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    def S_factor(self) -> torch.Tensor:
        return torch.tril(self.q_sqrt)


@dataclass
class BoundOptions:
    kind: str = "standard"
    mc_samples: int = 1
    spherical_v: float = 1.0

    def __post_init__(self):
        if self.kind not in BOUNDS:
            raise ValueError(f"bound kind must be one of {BOUNDS}")
        if self.mc_samples < 1 or self.spherical_v <= 0:
            raise ValueError("need mc_samples >= 1 and spherical_v > 0")


def _kzz_chol(ind: InducingState, hyp: KernelHyperparams, jitter: float) -> torch.Tensor:
    Kzz = rbf_gram(ind.Z, ind.Z, hyp)
    return cholesky(Kzz, jitter, name="K_ZZ")


def marginal_qf_batch(
    xtilde: torch.Tensor,
    ind: InducingState,
    hyp: KernelHyperparams,
    jitter: float = 0.0,
    Lz: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mean, variance and Nystrom residual of ``q(f(x))`` for rows of ``xtilde``.

    Variance is ``d + k^T K^{-1} S K^{-1} k`` with ``d = k_xx - k^T K^{-1} k``.
    """
    if Lz is None:
        Lz = _kzz_chol(ind, hyp, jitter)
    Kzx = rbf_gram(ind.Z, xtilde, hyp)
    A = tri_solve(Lz, Kzx)
    d = (rbf_diag(xtilde, hyp) - (A * A).sum(0)).clamp_min(0.0)
    if ind.whiten:
        proj = A
    else:
        proj = tri_solve(Lz.mT, A, upper=True)
    mean = proj.T @ ind.q_mu
    B = ind.S_factor().T @ proj
    var = d + (B * B).sum(0)
    return mean, var, d


def marginal_qf(xtilde, ind: InducingState, hyp: KernelHyperparams, jitter: float = 0.0):
    """``(mu, sigma^2)`` for a single embedded point."""
    xtilde = torch.as_tensor(xtilde, dtype=DTYPE).reshape(1, -1)
    mean, var, _ = marginal_qf_batch(xtilde, ind, hyp, jitter)
    return mean[0], var[0]


def kl_u(ind: InducingState, hyp: KernelHyperparams, jitter: float = 0.0,
         Lz: torch.Tensor | None = None) -> torch.Tensor:
    """``KL[N(m, S) || N(0, K_ZZ)]`` (or against ``N(0, I)`` when whitened)."""
    M = ind.num_inducing
    Ls = ind.S_factor()
    logdet_s = log_det_from_chol(Ls)
    if ind.whiten:
        return 0.5 * ((Ls * Ls).sum() + ind.q_mu @ ind.q_mu - M - logdet_s)
    if Lz is None:
        Lz = _kzz_chol(ind, hyp, jitter)
    A = tri_solve(Lz, Ls)
    a = tri_solve(Lz, ind.q_mu)
    return 0.5 * ((A * A).sum() + a @ a - M + log_det_from_chol(Lz) - logdet_s)


def _r_minus_log1p(r: torch.Tensor) -> torch.Tensor:
    # r - log1p(r) cancels to zero for r below ~1e-8; use the series there
    small = r < 1e-4
    rs = torch.where(small, r, torch.zeros_like(r))
    series = rs * rs * (0.5 - rs / 3.0 + rs * rs / 4.0)
    return torch.where(small, series, r - torch.log1p(r))


def gaussian_correction(d, noise) -> torch.Tensor:
    """``0.5 * sum(d / noise - log(1 + d / noise))``, the tighter-bound gap."""
    d = torch.as_tensor(d, dtype=DTYPE)
    if bool((d < 0).any()):
        raise ValueError("Nystrom residuals must be non-negative")
    return 0.5 * _r_minus_log1p(d / noise).sum()


def nongaussian_tighter_terms(v, count: float) -> torch.Tensor:
    """``(count / 2)(1 + log v - v)`` for a spherical variance inflation ``v``."""
    v = torch.as_tensor(v, dtype=DTYPE)
    if bool(v <= 0):
        raise ValueError("spherical v must be positive")
    return 0.5 * count * (1.0 + torch.log(v) - v)


@dataclass
class Batch:
    """Observations to evaluate plus the bookkeeping needed for unbiased scaling.

    ``outputs`` is the output mini-batch whose latent KL terms are included.
    ``lik_scale`` multiplies the summed expected log-likelihood.
    """

    n: np.ndarray
    p: np.ndarray
    y: np.ndarray
    outputs: np.ndarray
    lik_scale: float = 1.0
    kl_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)


class TLVMOGP(nn.Module):
    """Embedder, latents, base kernel, inducing points and likelihood in one module."""

    def __init__(
        self,
        X: np.ndarray,
        embedder: Embedder,
        latent: LatentState,
        kernel: KernelHyperparams,
        inducing: InducingState,
        likelihood: nn.Module,
        bound: BoundOptions | None = None,
        jitter: float = 1e-6,
        n_train: int | None = None,
    ):
        super().__init__()
        self.register_buffer("X", torch.as_tensor(np.asarray(X, dtype=float), dtype=DTYPE))
        self.embedder = embedder
        self.latent = latent
        self.kernel = kernel
        self.inducing = inducing
        self.likelihood = likelihood
        self.bound = bound or BoundOptions()
        self.jitter = float(jitter)
        self.n_train = n_train if n_train is not None else self.n_inputs * self.n_outputs
        self.raw_v = nn.Parameter(
            torch.tensor(inv_softplus(self.bound.spherical_v), dtype=DTYPE),
            requires_grad=self.uses_spherical_v,
        )

    @property
    def n_inputs(self) -> int:
        return self.X.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.latent.n_outputs

    @property
    def latent_dim(self) -> int:
        return self.latent.dim

    @property
    def uses_spherical_v(self) -> bool:
        return self.bound.kind == "tighter" and self.likelihood.kind != "gaussian"

    @property
    def spherical_v(self) -> torch.Tensor:
        return softplus(self.raw_v)

    def embed_pairs(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return self.embedder(x, h)

    def kzz_chol(self) -> torch.Tensor:
        return _kzz_chol(self.inducing, self.kernel, self.jitter)


def _marginals(model: TLVMOGP, n: np.ndarray, p: np.ndarray, eps: torch.Tensor, Lz: torch.Tensor):
    """Marginals for every (sample, pair): tensors of shape ``(J, B)``."""
    h = model.latent.sample(eps) if model.latent_dim else eps
    x = model.X[torch.as_tensor(n)]
    hb = h[:, torch.as_tensor(p)]
    J, B = hb.shape[0], hb.shape[1]
    xt = model.embed_pairs(x.unsqueeze(0).expand(J, B, x.shape[-1]), hb)
    mean, var, d = marginal_qf_batch(xt.reshape(J * B, -1), model.inducing, model.kernel, Lz=Lz)
    return mean.reshape(J, B), var.reshape(J, B), d.reshape(J, B)


def elbo_terms(model: TLVMOGP, batch: Batch, eps: torch.Tensor) -> dict[str, torch.Tensor]:
    """Scaled components of the mini-batch ELBO.

    ``eps`` has shape ``(J, P, D_H)``: one standard-normal draw per output and
    MC sample, so every output in the batch shares its latent sample.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    eps = torch.as_tensor(eps, dtype=DTYPE)
    if eps.ndim != 3 or eps.shape[1] != model.n_outputs or eps.shape[2] != model.latent_dim:
        raise ValueError(
            f"noise must have shape (J, {model.n_outputs}, {model.latent_dim}), got {tuple(eps.shape)}"
        )
    Lz = model.kzz_chol()
    mean, var, d = _marginals(model, batch.n, batch.p, eps, Lz)
    y = torch.as_tensor(batch.y, dtype=DTYPE)
    lik = model.likelihood
    terms: dict[str, torch.Tensor] = {}
    if model.uses_spherical_v:
        v = model.spherical_v
        var = var + (v - 1.0) * d
        terms["spherical"] = nongaussian_tighter_terms(v, model.n_train)
    V = lik.inner_expectation(y, mean, var)
    terms["expected_loglik"] = batch.lik_scale * V.mean(0).sum()
    if model.bound.kind == "tighter" and lik.kind == "gaussian":
        delta = 0.5 * _r_minus_log1p(d / lik.noise)
        terms["correction"] = batch.lik_scale * delta.mean(0).sum()
    terms["kl_u"] = kl_u(model.inducing, model.kernel, Lz=Lz)
    if model.latent_dim:
        kl_h = model.latent.kl()[torch.as_tensor(batch.outputs)]
        terms["kl_latent"] = batch.kl_scale * kl_h.sum()
    else:
        terms["kl_latent"] = torch.zeros((), dtype=DTYPE)
    return terms


def combine_terms(terms: dict[str, torch.Tensor]) -> torch.Tensor:
    total = terms["expected_loglik"] - terms["kl_u"] - terms["kl_latent"]
    for extra in ("correction", "spherical"):
        if extra in terms:
            total = total + terms[extra]
    return total


def elbo_minibatch(model: TLVMOGP, batch: Batch, eps: torch.Tensor) -> torch.Tensor:
    """Unbiased estimate of the full-data ELBO from one mini-batch."""
    return combine_terms(elbo_terms(model, batch, eps))


def full_batch(n: np.ndarray, p: np.ndarray, y: np.ndarray, n_outputs: int) -> Batch:
    return Batch(n=np.asarray(n), p=np.asarray(p), y=np.asarray(y, dtype=float),
                 outputs=np.arange(n_outputs), lik_scale=1.0, kl_scale=1.0)


def elbo_full(model: TLVMOGP, n, p, y, eps) -> torch.Tensor:
    """Full-data ELBO with the given latent noise."""
    return elbo_minibatch(model, full_batch(n, p, y, model.n_outputs), eps)


def build_model(
    X: np.ndarray,
    n_outputs: int,
    arch: Architecture,
    likelihood: nn.Module,
    n_inducing: int,
    rng: np.random.Generator,
    prior_mean: np.ndarray | None = None,
    prior_scale: float = 1.0,
    dense_latent: bool = False,
    bound: BoundOptions | None = None,
    jitter: float = 1e-6,
    n_train: int | None = None,
    obs_pairs: tuple[np.ndarray, np.ndarray] | None = None,
    init_lengthscale: float = 1.0,
    init_outputscale: float = 1.0,
    inducing_noise: float = 0.05,
    whiten: bool = True,
) -> TLVMOGP:
    """Initialise a model: inducing points start at embedded training pairs plus noise."""
    X = np.asarray(X, dtype=float)
    embedder = Embedder(arch, rng=rng)
    latent = LatentState(n_outputs, arch.latent_dim, prior_mean=prior_mean,
                         prior_scale=prior_scale, dense=dense_latent, rng=rng)
    kernel = KernelHyperparams(arch.embed_dim, init_lengthscale, init_outputscale)

    if obs_pairs is None:
        nn_, pp_ = np.meshgrid(np.arange(len(X)), np.arange(n_outputs), indexing="ij")
        obs_pairs = (nn_.ravel(), pp_.ravel())
    n_obs = len(obs_pairs[0])
    idx = rng.choice(n_obs, size=n_inducing, replace=n_inducing > n_obs)
    x0 = torch.as_tensor(X[obs_pairs[0][idx]], dtype=DTYPE)
    h0 = latent.prior_mean[torch.as_tensor(obs_pairs[1][idx])]
    with torch.no_grad():
        was_training = embedder.training
        embedder.eval()
        Z = embedder(x0, h0).numpy()
        embedder.train(was_training)
    Z = Z + inducing_noise * rng.standard_normal(Z.shape)
    inducing = InducingState(Z, whiten=whiten)
    if not whiten:
        # start at q(u) = p(u); an identity S against an ill-conditioned K_ZZ inflates variances
        with torch.no_grad():
            inducing.q_sqrt.copy_(_kzz_chol(inducing, kernel, jitter))
    return TLVMOGP(X, embedder, latent, kernel, inducing, likelihood,
                   bound=bound, jitter=jitter, n_train=n_train)


def exact_gp_log_marginal(K: np.ndarray, y: np.ndarray, noise: float) -> float:
    """``log N(y | 0, K + noise I)`` by dense Cholesky (reference value)."""
    n = len(y)
    C = K + noise * np.eye(n)
    L = np.linalg.cholesky(C)
    a = np.linalg.solve(L, y)
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi))
