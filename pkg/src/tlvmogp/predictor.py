"""Predictive mixtures over sampled latents, test NLL and MSE."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffmath import DTYPE
from .svgp import TLVMOGP, marginal_qf_batch

PRIOR_MODE_VARIANCE = 0.1


class MissingLatentError(KeyError):
    pass


@dataclass
class MixturePrediction:
    """Equal-weight Gaussian mixture over ``f`` per test point; arrays are ``(S, B)``."""

    means: torch.Tensor
    variances: torch.Tensor
    likelihood: nn.Module

    @property
    def n_samples(self) -> int:
        return self.means.shape[0]

    def mixture_mean(self) -> torch.Tensor:
        return self.means.mean(0)

    def mixture_variance(self) -> torch.Tensor:
        m = self.mixture_mean()
        return (self.variances + self.means ** 2).mean(0) - m ** 2

    @torch.no_grad()
    def point_prediction(self) -> torch.Tensor:
        """Predictive mean of the observation: mixture mean, or mixture-averaged ZINB mean."""
        return self.likelihood.predictive_mean(self.means).mean(0)

    @torch.no_grad()
    def observation_variance(self) -> torch.Tensor:
        lik = self.likelihood
        if lik.kind == "gaussian":
            return self.mixture_variance() + lik.noise
        from .likelihood import zinb_link, zinb_moments
        mean_s, var_s = zinb_moments(zinb_link(self.means, lik.scale), lik)
        return var_s.mean(0) + mean_s.var(0, unbiased=False)


@torch.no_grad()
def predict(
    model: TLVMOGP,
    x: np.ndarray | torch.Tensor,
    p: np.ndarray | None,
    n_samples: int = 20,
    rng: np.random.Generator | None = None,
    prior_mode: bool = False,
    prior_mean: np.ndarray | None = None,
    chunk: int = 4096,
) -> MixturePrediction:
    """Sample ``S`` latents per test point and return the Gaussian mixture over ``f``.

    Without ``prior_mode`` latents come from ``q(h_p)``. With it, latents are
    drawn from ``N(mu0, 0.1 I)`` where ``mu0`` is ``prior_mean`` (one row per
    point, for outputs never seen in training) or the stored prior mean of ``p``.
    """
    if n_samples < 1:
        raise ValueError("need at least one prediction sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE).reshape(-1, model.X.shape[1])
    B, D_H, P = x.shape[0], model.latent_dim, model.n_outputs
    was_training = model.training
    model.eval()
    try:
        if prior_mode:
            if prior_mean is None:
                if p is None:
                    raise MissingLatentError("prior mode needs output indices or explicit prior means")
                p = np.asarray(p)
                _check_outputs(p, P)
                mu0 = model.latent.prior_mean[torch.as_tensor(p)]
            else:
                mu0 = torch.as_tensor(np.asarray(prior_mean, dtype=float), dtype=DTYPE).reshape(B, D_H)
            eps = torch.as_tensor(rng.standard_normal((n_samples, B, D_H)), dtype=DTYPE)
            h = mu0 + math.sqrt(PRIOR_MODE_VARIANCE) * eps
        else:
            if p is None:
                raise MissingLatentError("output indices are required outside prior mode")
            p = np.asarray(p)
            _check_outputs(p, P)
            eps = torch.as_tensor(rng.standard_normal((n_samples, P, D_H)), dtype=DTYPE)
            h = (model.latent.sample(eps) if D_H else eps)[:, torch.as_tensor(p)]
        Lz = model.kzz_chol()
        means, variances = [], []
        for start in range(0, B, chunk):
            xs = x[start:start + chunk]
            hs = h[:, start:start + chunk]
            xt = model.embed_pairs(xs.unsqueeze(0).expand(n_samples, *xs.shape), hs)
            mu, var, _ = marginal_qf_batch(xt.reshape(-1, xt.shape[-1]), model.inducing, model.kernel, Lz=Lz)
            means.append(mu.reshape(n_samples, -1))
            variances.append(var.reshape(n_samples, -1))
    finally:
        model.train(was_training)
    return MixturePrediction(torch.cat(means, 1), torch.cat(variances, 1), model.likelihood)


def _check_outputs(p: np.ndarray, P: int) -> None:
    bad = (p < 0) | (p >= P)
    if bad.any():
        raise MissingLatentError(f"no trained latent for output index {int(p[bad][0])}; use prior mode")


@torch.no_grad()
def test_nll(pred: MixturePrediction, y) -> torch.Tensor:
    """Per-point ``log S - logsumexp_s log q(y | h_s)`` with a max shift."""
    y = torch.as_tensor(np.asarray(y, dtype=float), dtype=DTYPE)
    logp = pred.likelihood.predictive_log_density(y, pred.means, pred.variances).numpy()
    top = logp.max(0)
    top = np.where(np.isfinite(top), top, 0.0)
    shifted = np.exp(logp - top)
    # exactly rounded sums make the result invariant to component order and duplication
    S = logp.shape[0]
    mean = np.array([math.fsum(col) / S for col in shifted.T])
    return torch.as_tensor(-(top + np.log(mean)), dtype=DTYPE)


def mse(pred_means, ys) -> float:
    a = np.asarray(pred_means, dtype=float)
    b = np.asarray(ys, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


@dataclass
class Evaluation:
    n: np.ndarray
    p: np.ndarray
    y: np.ndarray
    pred_mean: np.ndarray
    pred_var: np.ndarray
    nll: np.ndarray

    @property
    def mse(self) -> float:
        return mse(self.pred_mean, self.y)

    @property
    def mean_nll(self) -> float:
        return float(np.mean(self.nll))


def evaluate(model: TLVMOGP, x: np.ndarray, p: np.ndarray, y: np.ndarray, n_samples: int = 20,
             rng: np.random.Generator | None = None, prior_mode: bool = False,
             prior_mean: np.ndarray | None = None) -> Evaluation:
    pred = predict(model, x, p, n_samples, rng, prior_mode=prior_mode, prior_mean=prior_mean)
    nll = test_nll(pred, y)
    return Evaluation(
        n=np.arange(len(y)), p=np.asarray(p), y=np.asarray(y, dtype=float),
        pred_mean=pred.point_prediction().numpy(), pred_var=pred.observation_variance().numpy(),
        nll=nll.numpy(),
    )


PREDICT_STREAM = 2


def align_dataset(ckpt, ds, prior_mode: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Inputs, checkpoint output indices and (prior mode) per-point prior means for ``ds``.

    Output ids are matched by name against the checkpoint. Outside prior mode an
    unseen id is an error; in prior mode its prior mean comes from the dataset's
    ``outputs.csv`` (or zeros when absent).
    """
    index = ckpt.output_index()
    x = ds.X[ds.n]
    ids = [ds.output_ids[j] for j in ds.p]
    unknown = sorted({oid for oid in ids if oid not in index})
    if not prior_mode:
        if unknown:
            raise MissingLatentError(f"output {unknown[0]!r} has no trained latent; use prior mode")
        return x, np.array([index[oid] for oid in ids], dtype=np.int64), None
    model = ckpt.model
    D_H = model.latent_dim
    stored = model.latent.prior_mean.detach().numpy()
    mu0 = np.zeros((len(ids), D_H))
    for row, (oid, j) in enumerate(zip(ids, ds.p)):
        if ds.prior_mean is not None:
            if ds.prior_mean.shape[1] != D_H:
                raise ValueError(f"outputs.csv has {ds.prior_mean.shape[1]} prior-mean columns, model expects {D_H}")
            mu0[row] = ds.prior_mean[j]
        elif oid in index:
            mu0[row] = stored[index[oid]]
    p = np.array([index.get(oid, -1) for oid in ids], dtype=np.int64)
    return x, p, mu0


def evaluate_dataset(ckpt, ds, n_samples: int | None = None, prior_mode: bool = False) -> Evaluation:
    """Evaluate a checkpoint on every observation of ``ds`` (deterministic given the config seed)."""
    from .trainer import stream

    n_samples = n_samples or ckpt.config.eval_samples
    x, p, mu0 = align_dataset(ckpt, ds, prior_mode)
    rng = stream(ckpt.config.seed, PREDICT_STREAM)
    ev = evaluate(ckpt.model, x, p, ds.y, n_samples, rng, prior_mode=prior_mode, prior_mean=mu0)
    ev.n, ev.p = ds.n.copy(), ds.p.copy()
    return ev
