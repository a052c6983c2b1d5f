#  Copyright (c) 2020 Robert Lieck
"""
Reverse-mode gradients for the attack pipeline and a finite-difference harness to verify them.

Gradients are recorded by torch.autograd: every tensor produced by the pipeline (synthesis, mixing, room transform,
features, detector, losses) carries its backward rule, so a tensor with a `grad_fn` is the pipeline's DiffNode.
"""
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch

from .audio import DTYPE
from .util import ContractError, NumericError

# the value/backward-rule pair of the pipeline is a torch tensor
DiffNode = torch.Tensor


@dataclass(frozen=True)
class GradReport:
    param: str
    analytic: float
    numeric: float

    @property
    def rel_error(self):
        return relative_error(self.analytic, self.numeric)


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


###############
# differentiable helpers
###############

def clip(x, lo=None, hi=None):
    """Clamp `x` into [lo, hi]; the subgradient is 0 at the bounds themselves (inactive branch at ties)."""
    inside = torch.ones_like(x, dtype=torch.bool)
    bounded = x.detach()
    if lo is not None:
        inside = inside & (x > lo)
        bounded = bounded.clamp_min(lo)
    if hi is not None:
        inside = inside & (x < hi)
        bounded = bounded.clamp_max(hi)
    return torch.where(inside, x, bounded)


#######
# gradients
#######

def grad(loss, params):
    """
    Gradient of a scalar loss with respect to named parameters.
    :param loss: scalar tensor
    :param params: mapping name -> leaf tensor with requires_grad
    :return: dict name -> gradient tensor (zeros for parameters the loss does not reach)
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ContractError(f"Loss must be a scalar tensor, got shape {getattr(loss, 'shape', type(loss))}")
    if not torch.isfinite(loss):
        raise NumericError(f"Loss is not finite ({loss.item()})")
    names = list(params)
    tensors = [params[name] for name in names]
    if not loss.requires_grad:
        return {name: torch.zeros_like(t) for name, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {name: torch.zeros_like(t) if g is None else g for name, t, g in zip(names, tensors, grads)}


def check_gradients(f, params, eps=1e-4, bounds=None):
    """
    Compare autograd gradients of `f` with finite differences, one report per scalar parameter.
    Differences are central; a step that would leave `bounds` is cut at the bound (one-sided at the bound itself).
    :param f: callable taking a dict name -> tensor and returning a scalar tensor
    :param params: dict name -> array-like values at which to check
    :param eps: finite-difference step
    :param bounds: optional dict name -> (lo, hi) of the domain of `f`
    :return: list of GradReport named `name[index]`
    """
    if eps <= 0:
        raise ContractError(f"Finite-difference step must be positive, got {eps}")
    bounds = bounds or {}
    values = {name: np.array(value, dtype=np.float64).reshape(-1) for name, value in params.items()}

    def evaluate(vals, requires_grad=False):
        tensors = {name: torch.tensor(v, dtype=DTYPE, requires_grad=requires_grad) for name, v in vals.items()}
        out = f(tensors)
        if not torch.isfinite(out).all():
            raise NumericError(f"Function value is not finite at {vals}")
        return out, tensors

    loss, tensors = evaluate(values, requires_grad=True)
    analytic = grad(loss, tensors)

    reports = []
    for name, value in values.items():
        lo, hi = bounds.get(name, (-np.inf, np.inf))
        for idx in range(len(value)):
            plus = {k: v.copy() for k, v in values.items()}
            minus = {k: v.copy() for k, v in values.items()}
            plus[name][idx] = min(value[idx] + eps, hi)
            minus[name][idx] = max(value[idx] - eps, lo)
            step = plus[name][idx] - minus[name][idx]
            if step <= 0:
                raise ContractError(f"No room for a finite difference of {name}[{idx}] inside {(lo, hi)}")
            with torch.no_grad():
                numeric = (evaluate(plus)[0].item() - evaluate(minus)[0].item()) / step
            reports.append(GradReport(param=f"{name}[{idx}]",
                                      analytic=float(analytic[name].reshape(-1)[idx]),
                                      numeric=numeric))
    return reports


def reports_to_frame(reports):
    return pd.DataFrame([dict(param=r.param, analytic=r.analytic, numeric=r.numeric, rel_error=r.rel_error)
                         for r in reports], columns=["param", "analytic", "numeric", "rel_error"])
