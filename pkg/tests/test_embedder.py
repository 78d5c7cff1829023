import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from tlvmogp.diffmath import grad_check
from tlvmogp.embedder import (Architecture, ConfigurationError, Embedder, lipschitz_envelope,
                              power_iteration, spectral_normalise)
from tlvmogp.kernel import KernelHyperparams, inv_softplus, rbf_gram


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=float))


def top_sv(W):
    return float(np.linalg.svd(np.asarray(W), compute_uv=False)[0])


# spectral normalisation

def test_identity_below_bound_unchanged():
    W = torch.eye(2)
    Wn, _, _ = spectral_normalise(W, 2.0, 5, t([1.0, 0.3]))
    assert torch.equal(Wn, W)


def test_diagonal_rescaled():
    Wn, _, _ = spectral_normalise(t(np.diag([3.0, 1.0])), 1.0, 10, t([0.6, 0.8]))
    assert torch.allclose(Wn, t(np.diag([1.0, 1.0 / 3.0])), atol=1e-12)


def test_rectangular_against_svd(rng):
    W = t(rng.normal(size=(5, 4)))
    Wn, _, _ = spectral_normalise(W, 0.5, 50, t(rng.normal(size=4)))
    assert abs(top_sv(Wn) - 0.5) < 1e-6


def test_zero_matrix_returned_unchanged():
    W = torch.zeros(3, 3)
    Wn, _, _ = spectral_normalise(W, 1.0, 3, t([1.0, 0.0, 0.0]))
    assert torch.equal(Wn, W)


def test_spectral_normalise_preconditions():
    with pytest.raises(ValueError):
        spectral_normalise(torch.eye(2), 0.0, 1, t([1.0, 0.0]))
    with pytest.raises(ValueError):
        spectral_normalise(torch.eye(2), 1.0, 1, torch.zeros(2))
    with pytest.raises(ValueError):
        spectral_normalise(torch.eye(2), 1.0, 1, t([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        power_iteration(torch.eye(2), t([1.0, 0.0]), 0)


def _gapped_matrix(rng, m, n):
    while True:
        W = rng.normal(size=(m, n))
        s = np.linalg.svd(W, compute_uv=False)
        if len(s) == 1 or s[0] >= 1.01 * s[1]:
            return W


@given(st.integers(1, 32), st.integers(1, 32), st.floats(0.05, 5.0), st.integers(0, 2**31 - 1))
def test_power_iteration_converges_to_svd(m, n, c, seed):
    rng = np.random.default_rng(seed)
    W = _gapped_matrix(rng, m, n)
    ref = top_sv(W)
    v0 = t(rng.normal(size=n))
    errs = []
    for T in (1, 5, 50, 2000):
        sigma, _, _ = power_iteration(t(W), v0, T)
        # the Rayleigh-type estimate never overshoots the top singular value
        assert float(sigma) <= ref * (1 + 1e-12)
        errs.append((ref - float(sigma)) / ref)
    assert all(b <= a + 1e-13 for a, b in zip(errs, errs[1:]))
    # a 1% gap shrinks the error by 0.99^(4T); 2000 steps is ample
    assert errs[-1] < 1e-6
    Wn, _, _ = spectral_normalise(t(W), c, 2000, v0)
    assert top_sv(Wn) <= c + 1e-6


def test_sigma_gradient_treats_vectors_as_constants(rng):
    W = t(rng.normal(size=(4, 3))).requires_grad_(True)
    sigma, u, v = power_iteration(W, t(rng.normal(size=3)), 30)
    (g,) = torch.autograd.grad(sigma, W)
    assert torch.allclose(g, torch.outer(u, v), atol=1e-14)
    assert not u.requires_grad and not v.requires_grad


# embedding variants

def test_identity_variant():
    emb = Embedder(Architecture("identity", input_dim=2, latent_dim=1))
    assert torch.equal(emb(t([1.0, 2.0]), t([3.0])), t([1.0, 2.0, 3.0]))


def test_identity_variant_rejects_other_width():
    with pytest.raises(ConfigurationError):
        Embedder(Architecture("identity", input_dim=2, latent_dim=1, embed_dim=5))


def test_blockwise_variant():
    emb = Embedder(Architecture("blockwise", input_dim=1, latent_dim=1))
    with torch.no_grad():
        emb.raw_scale_x.fill_(inv_softplus(2.0))
        emb.raw_scale_h.fill_(inv_softplus(3.0))
    assert torch.allclose(emb(t([2.0]), t([3.0])), t([1.0, 1.0]), atol=1e-15)


def test_zero_residual_branches_pass_input_through(rng):
    emb = Embedder(Architecture("rcnn", input_dim=2, latent_dim=2, n_blocks=3), rng)
    with torch.no_grad():
        for W, b in zip(emb.weights, emb.biases):
            W.zero_()
            b.zero_()
    x, h = t(rng.normal(size=(5, 2))), t(rng.normal(size=(5, 2)))
    assert torch.equal(emb(x, h), torch.cat([x, h], -1))


def test_unknown_variant_and_activation():
    with pytest.raises(ConfigurationError):
        Embedder(Architecture("mlp"))
    with pytest.raises(ConfigurationError):
        Embedder(Architecture(activation="relu6"))
    with pytest.raises(ConfigurationError):
        Embedder(Architecture(sn_bound=0.0))


def test_dimension_mismatch_at_forward():
    emb = Embedder(Architecture(input_dim=1, latent_dim=2))
    with pytest.raises(ConfigurationError):
        emb(torch.zeros(3, 2), torch.zeros(3, 2))


def test_broadcasting_over_leading_dims(rng):
    emb = Embedder(Architecture(input_dim=1, latent_dim=2, n_blocks=2), rng)
    emb.eval()
    x = t(rng.normal(size=(4, 1)))
    h = t(rng.normal(size=(3, 1, 2)))
    out = emb(x, h)
    assert out.shape == (3, 4, 3)
    assert torch.allclose(out[1, 2], emb(x[2], h[1, 0]))


def test_entry_map_present_only_when_needed(rng):
    assert Embedder(Architecture(input_dim=1, latent_dim=2)).entry is None
    emb = Embedder(Architecture(input_dim=1, latent_dim=2, embed_dim=16, entry_bound=0.7), rng)
    assert emb.entry.shape == (16, 3)
    assert emb.entry_norm() <= 0.7 + 1e-6


def test_weight_initialisation_scale():
    emb = Embedder(Architecture(input_dim=20, latent_dim=20, n_blocks=1, spectral_norm=False),
                   np.random.default_rng(0))
    W = emb.weights[0].detach().numpy()
    assert abs(W.std() - 1 / np.sqrt(40)) < 0.01
    assert float(emb.biases[0].detach().abs().max()) == 0.0


def test_training_mode_updates_power_vectors(rng):
    emb = Embedder(Architecture(input_dim=1, latent_dim=1, n_blocks=1, sn_bound=0.1), rng)
    with torch.no_grad():
        emb.v_0.copy_(t([1.0, 0.0]))
    before = emb.v_0.clone()
    emb.train()
    emb(torch.zeros(1), torch.zeros(1))
    assert not torch.equal(before, emb.v_0)
    emb.eval()
    frozen = emb.v_0.clone()
    emb(torch.zeros(1), torch.zeros(1))
    assert torch.equal(frozen, emb.v_0)


def test_embedding_gradients(rng):
    emb = Embedder(Architecture(input_dim=1, latent_dim=2, embed_dim=4, n_blocks=2, sn_bound=0.5), rng)
    emb.eval()
    x = t(rng.normal(size=(3, 1))).requires_grad_(True)
    h = t(rng.normal(size=(3, 2))).requires_grad_(True)
    params = [x, h, emb.entry, *emb.weights, *emb.biases]
    assert grad_check(lambda: (emb(x, h) ** 2).sum(), params).passed(1e-5)


# Lipschitz envelope

def test_envelope_values():
    assert lipschitz_envelope(Architecture(sn_bound=0.5, n_blocks=2)) == pytest.approx((0.25, 2.25))
    assert lipschitz_envelope(Architecture(sn_bound=1.5, n_blocks=3)) == pytest.approx((0.0, 15.625))
    assert lipschitz_envelope(Architecture(sn_bound=0.005, n_blocks=3))[1] == pytest.approx(1.005 ** 3)
    assert lipschitz_envelope(Architecture(sn_bound=0.005, n_blocks=3))[1] == pytest.approx(1.01507, abs=1e-5)


def test_envelope_not_applicable():
    with pytest.raises(ConfigurationError):
        lipschitz_envelope(Architecture("identity"))


@given(st.floats(0.05, 2.0), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_random_embedder_respects_envelope(c, L, seed):
    rng = np.random.default_rng(seed)
    arch = Architecture(input_dim=2, latent_dim=1, n_blocks=L, sn_bound=c)
    emb = Embedder(arch, rng)
    emb.eval()
    with torch.no_grad():
        for b in emb.biases:
            b.copy_(t(rng.normal(size=3)))
        a, b = t(rng.normal(size=(200, 3)) * 2), t(rng.normal(size=(200, 3)) * 2)
        fa, fb = emb(a[:, :2], a[:, 2:]), emb(b[:, :2], b[:, 2:])
    ratio = (torch.linalg.vector_norm(fa - fb, dim=-1) / torch.linalg.vector_norm(a - b, dim=-1)).numpy()
    lo, hi = lipschitz_envelope(arch)
    assert ratio.max() <= hi + 1e-9
    assert ratio.min() >= lo - 1e-9


# separable special case

def test_blockwise_rbf_factorises(rng):
    emb = Embedder(Architecture("blockwise", input_dim=2, latent_dim=3))
    lx, lh = np.array([0.6, 1.7]), np.array([0.9, 0.4, 2.2])
    with torch.no_grad():
        emb.raw_scale_x.copy_(t([inv_softplus(v) for v in lx]))
        emb.raw_scale_h.copy_(t([inv_softplus(v) for v in lh]))
    x, xp = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
    h, hp = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    k = rbf_gram(emb(t(x), t(h)), emb(t(xp), t(hp)), KernelHyperparams(5)).detach().numpy()
    kx = np.exp(-0.5 * (((x[:, None] - xp[None]) / lx) ** 2).sum(-1))
    kh = np.exp(-0.5 * (((h[:, None] - hp[None]) / lh) ** 2).sum(-1))
    assert np.abs(k - kx * kh).max() < 1e-12


def test_architecture_round_trip():
    arch = Architecture(input_dim=3, latent_dim=2)
    assert arch.embed_dim == 5
    assert Architecture(**arch.to_dict()) == arch
