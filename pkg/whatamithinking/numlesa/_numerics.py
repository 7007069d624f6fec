from typing import Callable, Mapping
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F

from ._errors import ShapeError, NonScalarError, DomainError

__all__ = [
    "Tensor",
    "Grad",
    "as_tensor",
    "matmul",
    "add",
    "scale",
    "transpose",
    "row_softmax",
    "layer_norm",
    "gelu",
    "l2_normalize",
    "assert_finite",
    "backward",
    "grad_check",
    "MIN_GRAD_COORDS",
]

logger = logging.getLogger(__name__)

MIN_GRAD_COORDS = 64

Tensor = torch.Tensor
Grad = dict[str, Tensor]


def as_tensor(data, dtype: torch.dtype = torch.float64) -> Tensor:
    return torch.as_tensor(data, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("add", a.shape, b.shape) from None
    return a + b


def scale(a: Tensor, factor: float | Tensor) -> Tensor:
    """Multiply by a scalar, or scale each row of ``a`` by one entry of ``factor``."""
    if not isinstance(factor, Tensor) or factor.dim() == 0:
        return a * factor
    if factor.shape != a.shape[:-1]:
        raise ShapeError("scale", a.shape, factor.shape)
    return a * factor.unsqueeze(-1)


def transpose(a: Tensor) -> Tensor:
    if a.dim() < 2:
        raise ShapeError("transpose", a.shape, ())
    return a.transpose(-2, -1)


def row_softmax(a: Tensor, mask: Tensor | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get zero weight."""
    if mask is not None:
        try:
            torch.broadcast_shapes(a.shape, mask.shape)
        except RuntimeError:
            raise ShapeError("row_softmax", a.shape, mask.shape) from None
        a = a.masked_fill(~mask, float("-inf"))
    return torch.softmax(a, dim=-1)


def layer_norm(
    x: Tensor,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = 1e-12,
) -> Tensor:
    for name, param in (("weight", weight), ("bias", bias)):
        if param is not None and param.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm {name}", x.shape, param.shape)
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def l2_normalize(x: Tensor, dim: int = -1) -> Tensor:
    """Unit-normalize every slice along ``dim``; all-zero slices stay zero."""
    norm = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
    return x / norm.clamp_min(torch.finfo(x.dtype).tiny)


def assert_finite(x: Tensor, what: str) -> Tensor:
    if not torch.isfinite(x).all():
        raise DomainError(f"{what} contains non-finite entries")
    return x


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> Grad:
    """Reverse-mode gradients of a scalar for every parameter it depends on."""
    if loss.numel() != 1 or loss.dim() > 0:
        raise NonScalarError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = [name for name, param in params.items() if param.requires_grad]
    grads = torch.autograd.grad(
        loss, [params[_] for _ in names], allow_unused=True, retain_graph=True
    )
    return {name: grad for name, grad in zip(names, grads) if grad is not None}


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    n_coords: int = 64,
    seed: int = 0,
    analytic: Grad | None = None,
    floor: float = 1e-3,
) -> float:
    """Largest relative error between autodiff and central differences.

    ``f`` is re-evaluated after each coordinate of ``params`` is nudged in
    place. The relative error is ``|a - n| / max(|a|, |n|, floor)`` so that
    coordinates with vanishing gradients are judged on absolute error. Parameters
    with at least ``MIN_GRAD_COORDS`` coordinates must be sampled at least that
    many times.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, not {eps}")
    total = sum(param.numel() for param in params.values())
    if n_coords < MIN_GRAD_COORDS <= total:
        raise ValueError(
            f"n_coords={n_coords} checks too few of {total} coordinates; use at least {MIN_GRAD_COORDS}"
        )
    if analytic is None:
        with torch.enable_grad():
            analytic = backward(f(), params)
    coords = [
        (name, i) for name, param in params.items() for i in range(param.numel())
    ]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        picked = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[_] for _ in sorted(picked)]
    worst = 0.0
    with torch.no_grad():
        for name, i in coords:
            flat = params[name].view(-1)
            original = flat[i].item()
            flat[i] = original + eps
            plus = f().item()
            flat[i] = original - eps
            minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * eps)
            grad = analytic.get(name)
            exact = 0.0 if grad is None else grad.reshape(-1)[i].item()
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            if not math.isfinite(error):
                return math.inf
            worst = max(worst, error)
    logger.debug("grad check over %d coordinates: max relative error %.3e", len(coords), worst)
    return worst
