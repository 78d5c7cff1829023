import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from tlvmogp.diffmath import cholesky, grad_check, tri_solve
from tlvmogp.kernel import KernelHyperparams, inv_softplus, nystrom_diag, rbf_diag, rbf_gram, softplus


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=float))


def test_zero_distance_gives_outputscale():
    hyp = KernelHyperparams(2)
    assert float(rbf_gram(t([[0.3, -1.0]]), t([[0.3, -1.0]]), hyp).detach()) == pytest.approx(1.0, abs=1e-15)


def test_hand_evaluated_value():
    hyp = KernelHyperparams(1, lengthscale=0.5)
    # |z - z'|^2 / l^2 = 0.5 / 0.25 = 2
    k = rbf_gram(t([[0.0]]), t([[math.sqrt(0.5)]]), hyp)
    assert float(k.detach()) == pytest.approx(math.exp(-1.0), rel=1e-14)


def test_ard_closed_form(rng):
    ls = np.array([0.7, 1.9, 0.3])
    hyp = KernelHyperparams(3)
    with torch.no_grad():
        hyp.raw_lengthscale.copy_(t([inv_softplus(v) for v in ls]))
        hyp.raw_outputscale.fill_(inv_softplus(2.5))
    A, B = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    ref = 2.5 * np.exp(-0.5 * (((A[:, None] - B[None]) / ls) ** 2).sum(-1))
    assert np.allclose(rbf_gram(t(A), t(B), hyp).detach().numpy(), ref, rtol=1e-13, atol=0)


@given(st.floats(0.1, 10.0), st.integers(0, 2**31 - 1))
def test_joint_rescaling_invariance(factor, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    h1 = KernelHyperparams(2, lengthscale=0.8)
    h2 = KernelHyperparams(2, lengthscale=0.8 * factor)
    K1 = rbf_gram(t(A), t(B), h1)
    K2 = rbf_gram(t(A * factor), t(B * factor), h2)
    assert torch.allclose(K1, K2, rtol=1e-10, atol=1e-300)


@given(st.integers(1, 50), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_gram_is_positive_definite(n, d, seed):
    rng = np.random.default_rng(seed)
    A = np.unique(np.round(rng.normal(size=(n, d)), 6), axis=0)
    K = rbf_gram(t(A), t(A), KernelHyperparams(d)).detach()
    assert torch.allclose(K, K.T)
    assert ((K > 0) & (K <= 1.0)).all()
    _, info = torch.linalg.cholesky_ex(K + 1e-8 * torch.eye(len(A)))
    assert int(info) == 0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        rbf_gram(t([[1.0, 2.0]]), t([[1.0]]), KernelHyperparams(2))


def test_hyperparameters_positive():
    hyp = KernelHyperparams(3)
    with torch.no_grad():
        hyp.raw_lengthscale.fill_(-40.0)
        hyp.raw_outputscale.fill_(-40.0)
    assert (hyp.lengthscale > 0).all() and hyp.outputscale > 0


@given(st.floats(1e-6, 50.0))
def test_inverse_softplus_round_trip(y):
    assert float(softplus(torch.tensor(inv_softplus(y)))) == pytest.approx(y, rel=1e-12)


def test_inverse_softplus_domain():
    with pytest.raises(ValueError):
        inv_softplus(0.0)


def test_rbf_diag():
    hyp = KernelHyperparams(2, outputscale=1.7)
    assert torch.allclose(rbf_diag(torch.zeros(4, 2), hyp), torch.full((4,), 1.7))


# Nystrom residual

def _chol(Z, hyp, jitter=0.0):
    return cholesky(rbf_gram(Z, Z, hyp), jitter)


def test_nystrom_zero_at_inducing_point():
    hyp = KernelHyperparams(2)
    Z = t([[0.0, 0.0], [1.0, 0.5], [-1.0, 2.0]])
    d = nystrom_diag(Z[1:2], Z, hyp, _chol(Z, hyp))
    assert float(d.detach()) == pytest.approx(0.0, abs=1e-14)


def test_nystrom_hand_value():
    hyp = KernelHyperparams(1)
    Z = t([[0.0]])
    x = t([[math.sqrt(2.0)]])  # k = exp(-1)
    d = nystrom_diag(x, Z, hyp, _chol(Z, hyp))
    assert float(d.detach()) == pytest.approx(1 - math.exp(-2.0), rel=1e-13)


def test_nystrom_requires_inducing_points():
    hyp = KernelHyperparams(1)
    with pytest.raises(ValueError):
        nystrom_diag(t([[0.0]]), torch.zeros(0, 1), hyp, torch.zeros(0, 0))


@given(st.integers(1, 8), st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_nystrom_nonnegative_before_clamp(M, n, seed):
    rng = np.random.default_rng(seed)
    hyp = KernelHyperparams(2)
    Z = t(rng.normal(size=(M, 2)) * 2)
    X = t(np.vstack([rng.normal(size=(n, 2)) * 2, Z.numpy()]))
    L = _chol(Z, hyp, 1e-10)
    A = tri_solve(L, rbf_gram(Z, X, hyp))
    raw = (rbf_diag(X, hyp) - (A * A).sum(0)).detach()
    assert raw.min() >= -1e-10
    clamped = nystrom_diag(X, Z, hyp, L).detach()
    assert (clamped - raw).abs().max() <= 1e-10


def test_gram_and_nystrom_gradients(rng):
    hyp = KernelHyperparams(2, lengthscale=0.9, outputscale=1.3)
    A = t(rng.normal(size=(3, 2))).requires_grad_(True)
    Z = t(rng.normal(size=(2, 2))).requires_grad_(True)
    params = [A, Z, hyp.raw_lengthscale, hyp.raw_outputscale]

    def gram_loss():
        return (rbf_gram(A, Z, hyp) ** 2).sum() + rbf_gram(A, A, hyp).sum()

    def nys_loss():
        L = cholesky(rbf_gram(Z, Z, hyp), 1e-8)
        return (nystrom_diag(A, Z, hyp, L) ** 2).sum()

    assert grad_check(gram_loss, params).passed(1e-5)
    assert grad_check(nys_loss, params).passed(1e-5)
