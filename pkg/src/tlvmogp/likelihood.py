"""Observation models and the inner expected log-likelihood under a Gaussian marginal."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .diffmath import DTYPE
from .kernel import inv_softplus, softplus

LOG_2PI = math.log(2.0 * math.pi)


class GaussianLik(nn.Module):
    kind = "gaussian"

    def __init__(self, noise: float = 0.1):
        super().__init__()
        self.raw_noise = nn.Parameter(torch.tensor(inv_softplus(noise), dtype=DTYPE))

    @property
    def noise(self) -> torch.Tensor:
        return softplus(self.raw_noise)

    def inner_expectation(self, y, mu, var):
        return gaussian_inner_expectation(y, mu, var, self)

    def predictive_log_density(self, y, mu, var):
        s2 = var + self.noise
        return -0.5 * (LOG_2PI + torch.log(s2) + (y - mu) ** 2 / s2)

    def predictive_mean(self, mu):
        return mu


class ZinbLik(nn.Module):
    """Zero-inflated negative binomial with Michaelis-Menten zero inflation.

    ``km`` and ``scale`` are fixed; the dispersion is trainable unless
    ``train_dispersion`` is off.
    """

    kind = "zinb"

    def __init__(
        self,
        dispersion: float = 1.0,
        km: float = 0.1,
        scale: float = 1.0,
        n_nodes: int = 20,
        train_dispersion: bool = True,
    ):
        super().__init__()
        if dispersion <= 0 or km < 0 or scale <= 0 or n_nodes < 1:
            raise ValueError("need dispersion > 0, km >= 0, scale > 0, n_nodes >= 1")
        self.km = float(km)
        self.scale = float(scale)
        self.n_nodes = int(n_nodes)
        self.raw_dispersion = nn.Parameter(
            torch.tensor(inv_softplus(dispersion), dtype=DTYPE), requires_grad=train_dispersion
        )
        x, w = np.polynomial.hermite.hermgauss(self.n_nodes)
        self.register_buffer("gh_x", torch.as_tensor(x * math.sqrt(2.0), dtype=DTYPE))
        self.register_buffer("gh_w", torch.as_tensor(w / w.sum(), dtype=DTYPE))

    @property
    def dispersion(self) -> torch.Tensor:
        return softplus(self.raw_dispersion)

    def inner_expectation(self, y, mu, var):
        return nongaussian_inner_expectation(y, mu, var, self)

    def predictive_log_density(self, y, mu, var):
        # plug-in mean of q(f); variance is ignored
        return zinb_logpmf(y, zinb_link(mu, self.scale), self)

    def predictive_mean(self, mu):
        return zinb_moments(zinb_link(mu, self.scale), self)[0]


def gaussian_inner_expectation(y, mu, var, lik: GaussianLik) -> torch.Tensor:
    """``E_{N(f | mu, var)} log N(y | f, noise) = log N(y | mu, noise) - var / (2 noise)``."""
    s2 = lik.noise
    return -0.5 * (LOG_2PI + torch.log(s2) + (y - mu) ** 2 / s2) - 0.5 * var / s2


def zinb_link(f, scale: float = 1.0) -> torch.Tensor:
    """NB mean ``scale * softplus(f)``."""
    return scale * softplus(torch.as_tensor(f, dtype=DTYPE))


def _as_counts(y) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=DTYPE)
    if bool((y < 0).any()):
        raise ValueError("ZINB observations must be non-negative counts")
    return y


def nb_logpmf(y, m, alpha) -> torch.Tensor:
    """Mean-dispersion negative binomial log-pmf via log-gamma."""
    r = 1.0 / alpha
    log1p_am = torch.log1p(alpha * m)
    return (
        torch.lgamma(y + r)
        - torch.lgamma(r)
        - torch.lgamma(y + 1.0)
        - r * log1p_am
        + y * (torch.log(alpha * m) - log1p_am)
    )


def zinb_logpmf(y, m, lik: ZinbLik) -> torch.Tensor:
    y = _as_counts(y)
    m = torch.as_tensor(m, dtype=DTYPE)
    alpha = lik.dispersion
    log_nb = nb_logpmf(y, m, alpha)
    if lik.km == 0.0:
        return log_nb
    log_km = math.log(lik.km)
    log_norm = torch.log(lik.km + m)
    log_nonzero = torch.log(m) - log_norm + log_nb
    log_zero = torch.logaddexp(torch.full_like(log_nb, log_km), torch.log(m) + log_nb) - log_norm
    return torch.where(y == 0, log_zero, log_nonzero)


def zero_inflation(m, lik: ZinbLik) -> torch.Tensor:
    m = torch.as_tensor(m, dtype=DTYPE)
    if lik.km == 0.0:
        return torch.zeros_like(m)
    return lik.km / (lik.km + m)


def zinb_moments(m, lik: ZinbLik) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean ``(1 - psi) m`` and variance ``m (1 - psi) (1 + m (alpha + psi))``."""
    m = torch.as_tensor(m, dtype=DTYPE)
    psi = zero_inflation(m, lik)
    alpha = lik.dispersion
    mean = (1.0 - psi) * m
    var = m * (1.0 - psi) * (1.0 + m * (alpha + psi))
    return mean, var


def nongaussian_inner_expectation(y, mu, var, lik: ZinbLik) -> torch.Tensor:
    """Gauss-Hermite estimate of ``E_{N(f | mu, var)} log ZINB(y | link(f))``.

    The centre value is subtracted before summing so a zero variance returns
    the plug-in log-pmf exactly.
    """
    y = torch.as_tensor(y, dtype=DTYPE)
    mu = torch.as_tensor(mu, dtype=DTYPE)
    var = torch.as_tensor(var, dtype=DTYPE)
    centre = zinb_logpmf(y, zinb_link(mu, lik.scale), lik)
    sd = torch.sqrt(var.clamp_min(1e-300)) * (var > 0)
    f = mu.unsqueeze(-1) + sd.unsqueeze(-1) * lik.gh_x
    vals = zinb_logpmf(y.unsqueeze(-1), zinb_link(f, lik.scale), lik)
    return centre + ((vals - centre.unsqueeze(-1)) * lik.gh_w).sum(-1)


def make_likelihood(kind: str, **kwargs) -> nn.Module:
    if kind == "gaussian":
        return GaussianLik(noise=kwargs.get("noise", 0.1))
    if kind == "zinb":
        return ZinbLik(
            dispersion=kwargs.get("dispersion", 1.0),
            km=kwargs.get("km", 0.1),
            scale=kwargs.get("scale", 1.0),
            n_nodes=kwargs.get("n_nodes", 20),
            train_dispersion=kwargs.get("train_dispersion", True),
        )
    raise ValueError(f"unknown likelihood {kind!r}")
