"""Residual embedding network with per-layer spectral normalisation.

``Embedder`` maps the concatenation ``[x, h]`` to the embedding space where the
base kernel lives. Three variants are supported:

* ``rcnn``       residual blocks ``g(z) = z + tanh(W z + b)`` with each ``W``
                 rescaled so its leading singular value is at most ``c``
* ``identity``   the raw concatenation
* ``blockwise``  ``[x / ell_x, h / ell_h]`` (recovers the separable LV-MOGP kernel)
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .diffmath import DTYPE
from .kernel import inv_softplus, softplus

VARIANTS = ("rcnn", "identity", "blockwise")
ACTIVATIONS = {"tanh": torch.tanh}


class ConfigurationError(ValueError):
    pass


def _normalize(v: torch.Tensor) -> torch.Tensor:
    n = torch.linalg.vector_norm(v)
    return v / n if n > 0 else v


def power_iteration(W: torch.Tensor, v: torch.Tensor, n_iter: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Run ``n_iter`` alternating steps from right vector ``v``; returns ``(sigma, u, v)``.

    Vectors are detached; ``sigma = u^T W v`` stays differentiable in ``W``.
    """
    if n_iter < 1:
        raise ValueError("need at least one power iteration")
    Wd = W.detach()
    v = v.detach()
    for _ in range(n_iter):
        u = _normalize(Wd @ v)
        v = _normalize(Wd.T @ u)
    sigma = u @ W @ v
    return sigma, u, v


def spectral_normalise(
    W: torch.Tensor, c: float, n_iter: int, v: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Rescale ``W`` to leading singular value ``c`` when its estimate exceeds ``c``.

    Returns ``(W_normalised, u, v)`` with the updated power vectors.
    """
    if c <= 0:
        raise ValueError("spectral norm bound must be positive")
    if v.shape[0] != W.shape[1] or not bool(v.abs().sum() > 0):
        raise ValueError("right power vector must be nonzero with one entry per column of W")
    sigma, u, v = power_iteration(W, v, n_iter)
    if float(sigma.detach()) <= c:
        return W, u, v
    return W * (c / sigma), u, v


@dataclass
class Architecture:
    variant: str = "rcnn"
    input_dim: int = 1
    latent_dim: int = 0
    embed_dim: int = 0
    n_blocks: int = 3
    sn_bound: float = 1.0
    spectral_norm: bool = True
    power_iters: int = 1
    activation: str = "tanh"
    entry_bound: float = 1.0

    def __post_init__(self):
        if self.embed_dim == 0:
            self.embed_dim = self.input_dim + self.latent_dim

    def to_dict(self) -> dict:
        return asdict(self)


class Embedder(nn.Module):
    def __init__(self, arch: Architecture, rng: np.random.Generator | None = None):
        super().__init__()
        if arch.variant not in VARIANTS:
            raise ConfigurationError(f"unknown embedder variant {arch.variant!r}")
        if arch.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {arch.activation!r}")
        if arch.sn_bound <= 0 or arch.power_iters < 1:
            raise ConfigurationError("sn_bound must be positive and power_iters >= 1")
        self.arch = arch
        rng = rng if rng is not None else np.random.default_rng(0)
        d_in = arch.input_dim + arch.latent_dim
        d_t = arch.embed_dim

        if arch.variant in ("identity", "blockwise") and d_t != d_in:
            raise ConfigurationError(
                f"{arch.variant} embedder needs embed_dim == input_dim + latent_dim ({d_in}), got {d_t}"
            )

        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        if arch.variant == "blockwise":
            self.raw_scale_x = nn.Parameter(torch.full((arch.input_dim,), inv_softplus(1.0), dtype=DTYPE))
            self.raw_scale_h = nn.Parameter(torch.full((arch.latent_dim,), inv_softplus(1.0), dtype=DTYPE))
        if arch.variant != "rcnn":
            return

        if d_t != d_in:
            self.entry = nn.Parameter(
                torch.as_tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_t, d_in)), dtype=DTYPE)
            )
            self.register_buffer("entry_v", torch.as_tensor(_unit(rng, d_in), dtype=DTYPE))
            self.register_buffer("entry_u", torch.as_tensor(_unit(rng, d_t), dtype=DTYPE))
        else:
            self.entry = None
        for l in range(arch.n_blocks):
            W = rng.normal(0.0, 1.0 / np.sqrt(d_t), size=(d_t, d_t))
            self.weights.append(nn.Parameter(torch.as_tensor(W, dtype=DTYPE)))
            self.biases.append(nn.Parameter(torch.zeros(d_t, dtype=DTYPE)))
            self.register_buffer(f"v_{l}", torch.as_tensor(_unit(rng, d_t), dtype=DTYPE))
            self.register_buffer(f"u_{l}", torch.as_tensor(_unit(rng, d_t), dtype=DTYPE))
        # eval-mode forwards reuse the stored vectors, so they must start converged
        self.refresh_power_vectors(50)

    @property
    def scale_x(self) -> torch.Tensor:
        return softplus(self.raw_scale_x)

    @property
    def scale_h(self) -> torch.Tensor:
        return softplus(self.raw_scale_h)

    def _normalised(self, W: torch.Tensor, c: float, u_name: str, v_name: str, n_iter: int | None):
        """Spectrally normalise ``W``; updates the stored vectors only when ``n_iter`` is given."""
        v = getattr(self, v_name)
        if n_iter is None:
            u = getattr(self, u_name)
            sigma = u @ W @ v
            Wn = W if float(sigma.detach()) <= c else W * (c / sigma)
            return Wn
        Wn, u, v = spectral_normalise(W, c, n_iter, v)
        with torch.no_grad():
            getattr(self, u_name).copy_(u)
            getattr(self, v_name).copy_(v)
        return Wn

    def _n_iter(self) -> int | None:
        return self.arch.power_iters if self.training else None

    def effective_weights(self, n_iter: int | None) -> tuple[torch.Tensor | None, list[torch.Tensor]]:
        """Entry map and block weights; ``n_iter=None`` reuses the stored power vectors."""
        arch = self.arch
        entry = None
        if self.entry is not None:
            entry = self.entry
            if arch.spectral_norm:
                entry = self._normalised(entry, arch.entry_bound, "entry_u", "entry_v", n_iter)
        blocks = []
        for l, W in enumerate(self.weights):
            if arch.spectral_norm:
                W = self._normalised(W, arch.sn_bound, f"u_{l}", f"v_{l}", n_iter)
            blocks.append(W)
        return entry, blocks

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        """Embed rows of ``x`` paired with rows of ``h`` (leading dims broadcast)."""
        arch = self.arch
        if x.shape[-1] != arch.input_dim or h.shape[-1] != arch.latent_dim:
            raise ConfigurationError(
                f"expected input dims ({arch.input_dim}, {arch.latent_dim}), "
                f"got ({x.shape[-1]}, {h.shape[-1]})"
            )
        shape = torch.broadcast_shapes(x.shape[:-1], h.shape[:-1])
        x = x.expand(*shape, x.shape[-1])
        h = h.expand(*shape, h.shape[-1])
        if arch.variant == "blockwise":
            return torch.cat([x / self.scale_x, h / self.scale_h], dim=-1)
        z = torch.cat([x, h], dim=-1)
        if arch.variant == "identity":
            return z
        act = ACTIVATIONS[arch.activation]
        entry, blocks = self.effective_weights(self._n_iter())
        if entry is not None:
            z = z @ entry.T
        for W, b in zip(blocks, self.biases):
            z = z + act(z @ W.T + b)
        return z

    @torch.no_grad()
    def refresh_power_vectors(self, n_iter: int = 50) -> None:
        """Run extra power iterations on the stored vectors (post-training audit)."""
        if self.arch.variant == "rcnn" and self.arch.spectral_norm:
            self.effective_weights(n_iter=n_iter)

    @torch.no_grad()
    def entry_norm(self) -> float:
        """Operator norm of the (normalised) entry map; 1 when the entry map is the identity."""
        if self.arch.variant != "rcnn" or self.entry is None:
            return 1.0
        entry, _ = self.effective_weights(n_iter=None)
        return float(torch.linalg.matrix_norm(entry, ord=2))


def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def lipschitz_envelope(arch: Architecture) -> tuple[float, float]:
    """Bi-Lipschitz bounds ``((1 - c)^L, (1 + c)^L)`` of the residual stack.

    The lower bound is vacuous (zero) once ``c >= 1``.
    """
    if arch.variant != "rcnn":
        raise ConfigurationError("Lipschitz envelope only applies to the rcnn variant")
    c, L = arch.sn_bound, arch.n_blocks
    lower = (1.0 - c) ** L if c < 1 else 0.0
    return lower, (1.0 + c) ** L
