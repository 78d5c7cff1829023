"""Per-output latent vectors: Gaussian priors, variational posteriors, sampling and KL."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .diffmath import DTYPE


class LatentState(nn.Module):
    """``q(h_p) = N(m_p, Sigma_p)`` against ``p(h_p) = N(mu0_p, s0^2 I)`` for ``P`` outputs.

    Sigma_p is diagonal (stored as log standard deviations) unless ``dense`` is
    set, in which case a lower-triangular factor with log-diagonal is learned.
    """

    def __init__(
        self,
        n_outputs: int,
        dim: int,
        prior_mean: np.ndarray | None = None,
        prior_scale: float = 1.0,
        dense: bool = False,
        init_std: float = 0.1,
        init_noise: float = 0.01,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if prior_scale <= 0:
            raise ValueError("prior scale must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_outputs = n_outputs
        self.dim = dim
        self.dense = dense
        self.prior_scale = float(prior_scale)
        if prior_mean is None:
            prior_mean = np.zeros((n_outputs, dim))
        prior_mean = np.asarray(prior_mean, dtype=float).reshape(n_outputs, dim)
        self.register_buffer("prior_mean", torch.as_tensor(prior_mean, dtype=DTYPE))
        self.mean = nn.Parameter(
            torch.as_tensor(prior_mean + init_noise * rng.standard_normal((n_outputs, dim)), dtype=DTYPE)
        )
        log_std = torch.full((n_outputs, dim), math.log(init_std), dtype=DTYPE)
        if dense:
            raw = torch.zeros(n_outputs, dim, dim, dtype=DTYPE)
            raw.diagonal(dim1=-2, dim2=-1).copy_(log_std)
            self.raw_tril = nn.Parameter(raw)
        else:
            self.log_std = nn.Parameter(log_std)

    def scale_tril(self) -> torch.Tensor:
        """``(P, D, D)`` lower-triangular factors of Sigma_p."""
        if self.dense:
            raw = torch.tril(self.raw_tril, diagonal=-1)
            return raw + torch.diag_embed(torch.exp(torch.diagonal(self.raw_tril, dim1=-2, dim2=-1)))
        return torch.diag_embed(torch.exp(self.log_std))

    def covariance(self) -> torch.Tensor:
        L = self.scale_tril()
        return L @ L.mT

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        """Reparametrised draws ``m_p + L_p eps`` for noise of shape ``(..., P, D)``."""
        if self.dense:
            return self.mean + (self.scale_tril() @ eps.unsqueeze(-1)).squeeze(-1)
        return self.mean + torch.exp(self.log_std) * eps

    def kl(self) -> torch.Tensor:
        """``KL[q(h_p) || p(h_p)]`` for every output, shape ``(P,)``."""
        s2 = self.prior_scale ** 2
        D = self.dim
        if self.dense:
            L = self.scale_tril()
            trace = (L * L).sum((-2, -1))
            logdet = 2.0 * torch.diagonal(self.raw_tril, dim1=-2, dim2=-1).sum(-1)
        else:
            trace = torch.exp(2.0 * self.log_std).sum(-1)
            logdet = 2.0 * self.log_std.sum(-1)
        maha = ((self.mean - self.prior_mean) ** 2).sum(-1)
        return 0.5 * ((trace + maha) / s2 - D + D * math.log(s2) - logdet)


def sample_latent(p: int, eps: torch.Tensor, state: LatentState) -> torch.Tensor:
    """Single reparametrised draw for output ``p`` from noise of shape ``(D,)``."""
    if not 0 <= p < state.n_outputs:
        raise IndexError(f"output index {p} out of range for {state.n_outputs} outputs")
    if state.dense:
        return state.mean[p] + state.scale_tril()[p] @ eps
    return state.mean[p] + torch.exp(state.log_std[p]) * eps


def kl_latent(p: int, state: LatentState) -> torch.Tensor:
    if not 0 <= p < state.n_outputs:
        raise IndexError(f"output index {p} out of range for {state.n_outputs} outputs")
    return state.kl()[p]
