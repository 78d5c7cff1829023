"""Small model builders shared by the tests."""
import numpy as np
import torch

from tlvmogp.config import TrainConfig
from tlvmogp.data import Dataset, SynthSpec, generate_synthetic
from tlvmogp.trainer import model_from_config, randomise_variational, stream


def grid_dataset(N=3, P=2, D_X=1, seed=0, missing=(), counts=False):
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(0, 3, size=(N, D_X)), axis=0)
    nn_, pp_ = np.meshgrid(np.arange(N), np.arange(P), indexing="ij")
    n, p = nn_.ravel(), pp_.ravel()
    keep = np.array([(a, b) not in set(missing) for a, b in zip(n, p)], dtype=bool)
    n, p = n[keep], p[keep]
    y = rng.poisson(3.0, size=len(n)).astype(float) if counts else rng.normal(size=len(n))
    return Dataset(X, [f"x{i}" for i in range(N)], [f"p{j}" for j in range(P)], n, p, y)


def toy_model(likelihood="gaussian", bound="standard", N=3, P=2, M=2, D_H=2, L=2, seed=0,
              missing=(), randomise=True, **overrides):
    """Model in eval mode at a randomised variational state, its data and latent noise."""
    ds = grid_dataset(N, P, seed=seed, missing=missing, counts=likelihood == "zinb")
    cfg = TrainConfig(likelihood=likelihood, bound=bound, n_inducing=M, latent_dim=D_H,
                      n_blocks=L, seed=seed, **overrides)
    model = model_from_config(ds, cfg)
    model.eval()
    rng = stream(seed, 9)
    if randomise:
        randomise_variational(model, rng)
    eps = torch.as_tensor(rng.standard_normal((cfg.mc_samples, P, D_H)))
    return model, ds, eps


def synthetic(seed=0, **kw):
    ds, truth = generate_synthetic(SynthSpec(**kw), seed)
    return ds, truth
