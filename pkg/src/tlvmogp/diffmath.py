"""Dense float64 linear algebra on torch tensors plus a finite-difference gradient checker.

Every loss in the package is built from torch operations so reverse-mode
gradients come from autograd; :func:`grad_check` is the independent arbiter.
"""
from __future__ import annotations

import math

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

DTYPE = torch.float64

MAX_JITTER_FRACTION = 1e-4


class FactorizationError(RuntimeError):
    pass


class SingularSystemError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    pass


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def cholesky(A: torch.Tensor, jitter: float = 0.0, name: str = "matrix") -> torch.Tensor:
    """Lower Cholesky factor of ``A + jitter * I`` with bounded jitter escalation.

    If the first attempt fails, jitter restarts at ``max(jitter, 1e-8 * mean(diag(A)))``
    and doubles while it stays at or below ``1e-4 * mean(diag(A))``.
    """
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name}: expected a square matrix, got shape {tuple(A.shape)}")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    Ad = A.detach()
    scale = float(Ad.abs().max()) if Ad.numel() else 0.0
    if scale > 0 and float((Ad - Ad.mT).abs().max()) > 1e-10 * scale:
        raise ValueError(f"{name} is not symmetric")
    n = A.shape[0]
    eye = torch.eye(n, dtype=A.dtype)
    L, info = torch.linalg.cholesky_ex(A + jitter * eye if jitter else A)
    if int(info) == 0:
        return L
    mean_diag = float(torch.diagonal(Ad).abs().mean()) if n else 1.0
    cap = max(jitter, MAX_JITTER_FRACTION * mean_diag)
    current = max(jitter, 1e-8 * mean_diag)
    tried = current
    while current <= cap:
        L, info = torch.linalg.cholesky_ex(A + current * eye)
        if int(info) == 0:
            return L
        tried = current
        current *= 2.0
    raise FactorizationError(f"{name} is not positive definite even with jitter {tried:.3e}")


def tri_solve(L: torch.Tensor, B: torch.Tensor, upper: bool = False) -> torch.Tensor:
    """Solve ``L X = B`` for triangular ``L`` (lower unless ``upper``)."""
    diag = torch.diagonal(L)
    if bool((diag == 0).any()):
        raise SingularSystemError("triangular system has a zero pivot")
    squeeze = B.ndim == 1
    if squeeze:
        B = B.unsqueeze(-1)
    X = torch.linalg.solve_triangular(L, B, upper=upper)
    return X.squeeze(-1) if squeeze else X


def chol_solve(L: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """``K^{-1} B`` given the lower factor ``L`` of ``K``."""
    return tri_solve(L.mT, tri_solve(L, B), upper=True)


def log_det_from_chol(L: torch.Tensor) -> torch.Tensor:
    return 2.0 * torch.log(torch.diagonal(L).abs()).sum()


@dataclass
class GradReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    per_param: list[tuple[float, float]]

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    loss: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-5,
    order: int = 2,
) -> GradReport:
    """Compare autograd gradients with central differences on every entry of ``params``.

    ``loss`` is called with no arguments and must read the current values of
    ``params``; entries are perturbed in place and restored afterwards.
    Relative error is ``|analytic - fd| / max(|fd|, 1e-8)``.

    ``order=4`` uses the five-point stencil, whose O(h^4) truncation error
    permits steps large enough to keep cancellation noise away from small
    gradient entries of large objectives.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    # (offset, weight) applied to f(x + k h) - f(x - k h)
    stencil = {2: ((1, 0.5),), 4: ((1, 8 / 12), (2, -1 / 12))}[order]
    params = list(params)
    value = loss()
    if not torch.isfinite(value).all():
        raise EvaluationError(f"loss is not finite at the check point: {float(value.detach())}")
    grads = torch.autograd.grad(value, params, allow_unused=True)

    per_param = []
    n_checked = 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g.detach()
            flat = p.view(-1)
            fd = torch.empty(flat.numel(), dtype=DTYPE)
            for i in range(flat.numel()):
                orig = flat[i].item()
                acc = 0.0
                for k, w in stencil:
                    flat[i] = orig + k * step
                    up = float(loss())
                    flat[i] = orig - k * step
                    down = float(loss())
                    flat[i] = orig
                    if not (math.isfinite(up) and math.isfinite(down)):
                        raise EvaluationError(f"loss is not finite near entry {i}")
                    acc += w * (up - down)
                fd[i] = acc / step
            a = analytic.reshape(-1)
            abs_err = (a - fd).abs()
            rel_err = abs_err / fd.abs().clamp_min(1e-8)
            per_param.append((float(rel_err.max()) if fd.numel() else 0.0,
                              float(abs_err.max()) if fd.numel() else 0.0))
            n_checked += fd.numel()

    return GradReport(
        max_rel_error=max((r for r, _ in per_param), default=0.0),
        max_abs_error=max((a for _, a in per_param), default=0.0),
        n_checked=n_checked,
        per_param=per_param,
    )
