"""Adam training loop with mini-batching over inputs and outputs.

Random streams are derived from the seed with ``numpy.random.SeedSequence``
keyed on ``(seed, stream, epoch, step)`` and fed to Philox generators:

* ``(seed, 0)``               model initialisation
* ``(seed, 1, epoch, step)``  batch selection and reparametrisation noise

so every step is reproducible on its own. One epoch is
``ceil(|observed| / (N_b * P_b))`` steps.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import TrainConfig
from .data import Dataset
from .diffmath import DTYPE, GradReport, grad_check
from .embedder import Architecture
from .likelihood import make_likelihood
from .svgp import TLVMOGP, Batch, BoundOptions, build_model, elbo_full, elbo_minibatch

INIT_STREAM = 0
STEP_STREAM = 1


class DivergenceError(RuntimeError):
    pass


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


@dataclass
class TrainHistory:
    elbo: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    param_norm: list[float] = field(default_factory=list)
    steps_per_epoch: int = 0

    def __len__(self) -> int:
        return len(self.elbo)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "elbo", "seconds"])
            for i, (e, s) in enumerate(zip(self.elbo, self.seconds)):
                w.writerow([i + 1, format(e, ".17g"), format(s, ".6f")])


def sample_batch(ds: Dataset, n_b: int, p_b: int, rng: np.random.Generator,
                 table: np.ndarray | None = None) -> Batch:
    """Draw a mini-batch with scaling factors that keep the ELBO estimate unbiased.

    Fully observed data: the cross product of ``n_b`` uniform inputs and ``p_b``
    uniform outputs, likelihood scaled by ``NP / (n_b p_b)``.

    Missing data: ``n_b * p_b`` observed pairs drawn uniformly from the observed
    set, likelihood scaled by ``NP / (n_b p_b) * N_train / (NP)``; the latent KL
    uses an independent uniform output batch of size ``p_b``.
    """
    if ds.n_obs == 0:
        raise ValueError("dataset has no observations")
    N, P = ds.N, ds.P
    if not (1 <= n_b <= N and 1 <= p_b <= P):
        raise ValueError(f"batch sizes must satisfy 1 <= N_b <= {N} and 1 <= P_b <= {P}")
    outputs = np.sort(rng.choice(P, size=p_b, replace=False))
    kl_scale = P / p_b
    if ds.fully_observed:
        if table is None:
            table = ds.obs_index()
        inputs = np.sort(rng.choice(N, size=n_b, replace=False))
        rows = table[np.ix_(inputs, outputs)].ravel()
        lik_scale = (N * P) / (n_b * p_b)
    else:
        k = min(n_b * p_b, ds.n_obs)
        rows = np.sort(rng.choice(ds.n_obs, size=k, replace=False))
        lik_scale = ds.n_obs / k
    return Batch(n=ds.n[rows], p=ds.p[rows], y=ds.y[rows], outputs=outputs,
                 lik_scale=lik_scale, kl_scale=kl_scale)


def batch_sizes(ds: Dataset, cfg: TrainConfig) -> tuple[int, int]:
    n_b = cfg.batch_inputs or ds.N
    p_b = cfg.batch_outputs or ds.P
    if n_b > ds.N or p_b > ds.P:
        raise ValueError(f"batch sizes ({n_b}, {p_b}) exceed dataset size ({ds.N}, {ds.P})")
    return n_b, p_b


def architecture_from_config(cfg: TrainConfig, input_dim: int) -> Architecture:
    return Architecture(
        variant=cfg.variant, input_dim=input_dim, latent_dim=cfg.latent_dim,
        embed_dim=cfg.embed_dim, n_blocks=cfg.n_blocks, sn_bound=cfg.sn_bound,
        spectral_norm=cfg.spectral_norm, power_iters=cfg.power_iters,
        activation=cfg.activation, entry_bound=cfg.entry_bound,
    )


def model_from_config(ds: Dataset, cfg: TrainConfig) -> TLVMOGP:
    """Deterministically initialised model for ``ds`` under ``cfg``."""
    rng = stream(cfg.seed, INIT_STREAM)
    lik = make_likelihood(cfg.likelihood, noise=cfg.noise, dispersion=cfg.dispersion, km=cfg.km,
                          scale=cfg.scale, n_nodes=cfg.quad_nodes,
                          train_dispersion=cfg.train_dispersion)
    prior_mean = ds.prior_mean
    if prior_mean is not None and prior_mean.shape[1] != cfg.latent_dim:
        raise ValueError(
            f"outputs.csv gives {prior_mean.shape[1]} prior-mean columns but model.latent_dim is {cfg.latent_dim}"
        )
    return build_model(
        ds.X, ds.P, architecture_from_config(cfg, ds.D_X), lik, cfg.n_inducing, rng,
        prior_mean=prior_mean, prior_scale=cfg.prior_scale, dense_latent=cfg.dense_latent,
        bound=BoundOptions(cfg.bound, cfg.mc_samples, cfg.spherical_v), jitter=cfg.jitter,
        n_train=ds.n_obs, obs_pairs=(ds.n, ds.p), init_lengthscale=cfg.init_lengthscale,
        init_outputscale=cfg.init_outputscale, whiten=cfg.whiten,
    )


def parameter_norm(model: torch.nn.Module) -> float:
    with torch.no_grad():
        return math.sqrt(sum(float((p * p).sum()) for p in model.parameters()))


def train(ds: Dataset, cfg: TrainConfig, model: TLVMOGP | None = None,
          callback=None) -> tuple["ModelCheckpoint", TrainHistory]:
    """Maximise the mini-batch ELBO with Adam; returns the final checkpoint and history."""
    from .checkpoint import ModelCheckpoint

    if ds.n_obs == 0:
        raise ValueError("cannot train on an empty dataset")
    n_b, p_b = batch_sizes(ds, cfg)
    if model is None:
        model = model_from_config(ds, cfg)
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    steps = math.ceil(ds.n_obs / (n_b * p_b))
    table = ds.obs_index() if ds.fully_observed else None
    history = TrainHistory(steps_per_epoch=steps)
    J, P, D_H = cfg.mc_samples, ds.P, cfg.latent_dim

    global_step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total = 0.0
        for step in range(steps):
            rng = stream(cfg.seed, STEP_STREAM, epoch, step)
            batch = sample_batch(ds, n_b, p_b, rng, table)
            eps = torch.as_tensor(rng.standard_normal((J, P, D_H)), dtype=DTYPE)
            opt.zero_grad()
            elbo = elbo_minibatch(model, batch, eps)
            if not torch.isfinite(elbo):
                raise DivergenceError(
                    f"non-finite ELBO at step {global_step} (epoch {epoch + 1}); "
                    f"parameter norm {parameter_norm(model):.6g}"
                )
            (-elbo).backward()
            opt.step()
            total += float(elbo.detach())
            global_step += 1
        history.elbo.append(total / steps)
        history.seconds.append(time.perf_counter() - t0)
        history.param_norm.append(parameter_norm(model))
        if callback is not None:
            callback(epoch, history)

    model.embedder.refresh_power_vectors(50)
    model.eval()
    ckpt = ModelCheckpoint(model=model, config=cfg, input_ids=list(ds.input_ids),
                           output_ids=list(ds.output_ids))
    return ckpt, history


@torch.no_grad()
def randomise_variational(model: TLVMOGP, rng: np.random.Generator, spread: float = 0.5) -> None:
    """Move ``q(u)`` and the latent means away from the prior.

    At ``q(u) = p(u)`` the marginals of ``f`` do not depend on the embedding, so
    gradient checks there would not exercise the network.
    """
    ind = model.inducing
    M = ind.num_inducing
    ind.q_mu.copy_(torch.as_tensor(rng.normal(0.0, 1.0, M), dtype=DTYPE))
    noise = np.tril(rng.normal(0.0, 0.1, (M, M)), -1) + np.diag(rng.uniform(0.3, 0.6, M))
    ind.q_sqrt.copy_(torch.as_tensor(noise, dtype=DTYPE))
    lat = model.latent
    if lat.dim:
        lat.mean.add_(torch.as_tensor(rng.normal(0.0, spread, tuple(lat.mean.shape)), dtype=DTYPE))


def gradcheck_suite(ds: Dataset, cfg: TrainConfig, n_inputs: int = 3, n_outputs: int = 2,
                    n_inducing: int = 2, max_blocks: int = 2,
                    step: float = 1e-3, order: int = 4) -> dict[str, GradReport]:
    """Finite-difference check of the full ELBO on a subsampled model, per bound kind.

    Keeps the first ``n_inputs`` inputs and ``n_outputs`` outputs. The model runs
    in eval mode so spectral normalisation reuses fixed power vectors and the
    objective is a deterministic function of the parameters.
    """
    small = ds.restrict(np.arange(min(n_inputs, ds.N)), np.arange(min(n_outputs, ds.P)))
    if small.n_obs == 0:
        raise ValueError("subsampled dataset has no observations")
    reports = {}
    for bound in ("standard", "tighter"):
        sub = cfg.with_overrides({"n_inducing": n_inducing, "bound": bound,
                                  "n_blocks": min(cfg.n_blocks, max_blocks)})
        model = model_from_config(small, sub)
        model.eval()
        rng = stream(cfg.seed, STEP_STREAM, 0, 0)
        randomise_variational(model, rng)
        eps = torch.as_tensor(rng.standard_normal((sub.mc_samples, small.P, sub.latent_dim)), dtype=DTYPE)
        params = [p for p in model.parameters() if p.requires_grad]
        reports[bound] = grad_check(lambda: elbo_full(model, small.n, small.p, small.y, eps), params, step, order)
    return reports
