# numerics.py
"""
Tensor arithmetic for the generators and the discriminator.

torch does the heavy lifting (reverse-mode autograd, Adam); this module pins
float64 everywhere and adds the contracts the training code relies on:
shape checks, finiteness checks, a single backward per recorded forward,
an optimizer step that refuses NaN gradients, and a finite-difference
gradient checker.
"""
import logging
import random
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from errors import ContractError, DimensionError, NumericError

# =========================
# KONFIG
# =========================
DTYPE = torch.float64
torch.set_default_dtype(DTYPE)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

LOG = logging.getLogger("fairgen.numerics")

_CONSUMED = "_fairgen_backward_done"


# =========================
# SEEDING
# =========================
def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch; identical seed -> identical tape replay."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) % (2**63))
    return gen


# =========================
# PRIMITIVES
# =========================
def as_tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def _check_axis(x: torch.Tensor, axis: int) -> None:
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise DimensionError(f"axis {axis} invalid for shape {tuple(x.shape)}")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    _check_axis(x, axis)
    check_finite(x, "softmax input")
    # torch subtracts the row max internally
    return torch.softmax(x, dim=axis)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    _check_axis(x, axis)
    check_finite(x, "log_softmax input")
    return torch.log_softmax(x, dim=axis)


def gather_rows(table: torch.Tensor, ids: Sequence[int]) -> torch.Tensor:
    """Embedding lookup; backward scatters additively into `table`."""
    idx = torch.as_tensor(list(ids) if not torch.is_tensor(ids) else ids, dtype=torch.long)
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")
    return F.embedding(idx.reshape(-1), table).reshape(*idx.shape, table.shape[1])


def backward(loss: torch.Tensor) -> None:
    """Populate .grad on every requires_grad leaf; a loss can be consumed once."""
    if loss.numel() != 1 or loss.dim() != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, _CONSUMED, False):
        raise ContractError("backward already ran for this loss")
    check_finite(loss.detach(), "loss")
    loss.backward()
    setattr(loss, _CONSUMED, True)


# =========================
# OPTIMIZER
# =========================
def make_adam(params: Iterable[torch.nn.Parameter], lr: float) -> torch.optim.Adam:
    params = [p for p in params if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_step(optimizer: torch.optim.Optimizer) -> None:
    """One bias-corrected Adam update; refused when any gradient is NaN/inf."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericError("non-finite gradient, optimizer step refused")
    optimizer.step()


def grad_norm(params: Iterable[torch.Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.detach() ** 2).sum())
    return total ** 0.5


# =========================
# GRADIENT CHECK
# =========================
def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-5) -> float:
    """
    Max elementwise relative error between autograd and central differences
    (f(x+h) - f(x-h)) / 2h. Relative error uses max(1, |a|, |n|) as scale.
    """
    x0 = x.detach().clone().to(DTYPE)
    xg = x0.clone().requires_grad_(True)
    out = f(xg)
    if out.numel() != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    analytic = torch.zeros_like(x0)
    if out.requires_grad:
        (g,) = torch.autograd.grad(out.reshape(()), xg, allow_unused=True)
        if g is not None:
            analytic = g.detach()

    numeric = torch.zeros_like(x0)
    flat = numeric.view(-1)
    with torch.no_grad():
        for i in range(x0.numel()):
            xp = x0.clone()
            xm = x0.clone()
            xp.view(-1)[i] += h
            xm.view(-1)[i] -= h
            flat[i] = (f(xp).reshape(()) - f(xm).reshape(())) / (2 * h)

    scale = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=1.0)
    err = ((analytic - numeric).abs() / scale).max() if x0.numel() else torch.tensor(0.0)
    return float(err)
