from typing import Mapping
from pathlib import Path
import logging
import math

import torch
from torch import nn
import torch.nn.functional as F

from ._common import Empty
from ._struct import struct
from ._errors import DomainError
from ._codec import serialize, deserialize, unstructure
from ._numerics import Tensor

__all__ = [
    "LossBreakdown",
    "mlm_loss",
    "number_loss_mse",
    "number_loss_logscaled",
    "combined_fixed",
    "combined_uncertainty",
    "grad_ratio",
    "stationary_sigmas",
    "UncertaintyWeights",
    "LossLog",
    "read_loss_log",
]

logger = logging.getLogger(__name__)


@struct
class LossBreakdown:
    l1: float
    l2: float
    l_tilde2: float
    combined: float
    sigma1: float = 1.0
    sigma2: float = 1.0
    w1: float = 0.5
    w2: float = 0.5

    def is_finite(self) -> bool:
        return all(
            math.isfinite(_)
            for _ in (self.l1, self.l2, self.l_tilde2, self.combined, self.sigma1, self.sigma2)
        )


def _select(values: Tensor, positions: Tensor) -> Tensor:
    """Rows of ``values`` at the True entries of the boolean ``positions`` mask."""
    if positions.dtype != torch.bool:
        raise TypeError("positions must be a boolean mask")
    if not positions.any():
        raise DomainError("loss needs at least one masked position")
    return values[positions]


def mlm_loss(
    logits: Tensor,
    y1: Tensor,
    positions: Tensor,
    class_weights: Tensor | None = None,
) -> Tensor:
    """Mean cross-entropy of ``y1`` at the masked positions.

    ``y1`` lists the target ids in the order ``positions.nonzero()`` visits
    them. With ``class_weights`` the mean is weighted by target class.
    """
    selected = _select(logits, positions)
    return F.cross_entropy(selected, y1, weight=class_weights)


def number_loss_mse(f2: Tensor, y2: Tensor, positions: Tensor) -> Tensor:
    selected = _select(f2, positions)
    return torch.mean((selected - y2) ** 2)


def number_loss_logscaled(f2: Tensor, y2: Tensor, positions: Tensor) -> Tensor:
    """Mean of (log(y2+1) - log(f2+1))^2 over the masked positions."""
    selected = _select(f2, positions)
    if (selected <= -1).any():
        raise DomainError("number predictions must stay above -1 for the log-scaled loss")
    if (y2 < 0).any():
        raise DomainError("number targets must be non-negative for the log-scaled loss")
    return torch.mean((torch.log1p(y2) - torch.log1p(selected)) ** 2)


def combined_fixed(l1, l_tilde2):
    return 0.5 * l1 + 0.5 * l_tilde2


def combined_uncertainty(l1, l2, sigma1, sigma2):
    """l1/sigma1^2 + l2/(2 sigma2^2) + log sigma1 + log sigma2."""
    for name, sigma in (("sigma1", sigma1), ("sigma2", sigma2)):
        if (torch.as_tensor(sigma) <= 0).any():
            raise DomainError(f"{name} must be positive, not {sigma}")
    if isinstance(sigma1, Tensor) or isinstance(sigma2, Tensor):
        log = torch.log
    else:
        log = math.log
    return l1 / sigma1**2 + l2 / (2 * sigma2**2) + log(sigma1) + log(sigma2)


def grad_ratio(f2: float, y2: float) -> float | type[Empty]:
    """|dL~2/df2| / |dL2/df2| for one sample; ``Empty`` when f2 == y2."""
    if f2 <= -1:
        raise DomainError(f"f2 must exceed -1, not {f2}")
    if f2 == y2:
        return Empty
    return abs(math.log((f2 + 1) / (y2 + 1)) / ((f2 + 1) * (f2 - y2)))


def stationary_sigmas(l1: float, l2: float) -> tuple[float, float]:
    """Minimizers of the uncertainty-weighted loss in sigma for fixed task losses."""
    return math.sqrt(2 * l1), math.sqrt(l2)


class UncertaintyWeights(nn.Module):
    """Trainable noise scales kept as log sigma so they stay positive."""

    def __init__(self, dtype: torch.dtype = torch.float64) -> None:
        super().__init__()
        self.log_sigma1 = nn.Parameter(torch.zeros((), dtype=dtype))
        self.log_sigma2 = nn.Parameter(torch.zeros((), dtype=dtype))

    def sigmas(self) -> tuple[Tensor, Tensor]:
        return self.log_sigma1.exp(), self.log_sigma2.exp()

    def forward(self, l1: Tensor, l2: Tensor) -> Tensor:
        sigma1, sigma2 = self.sigmas()
        return combined_uncertainty(l1, l2, sigma1, sigma2)


class LossLog:
    """Append-only json-lines record of per-step losses.

    ``keep_through`` drops records past that step from an existing log, so a
    resumed run does not repeat the steps of an epoch that never finished.
    """

    def __init__(self, path: str | Path, keep_through: int | None = None) -> None:
        self.path = Path(path)
        if keep_through is not None and self.path.exists():
            kept = [
                line
                for line in self.path.read_bytes().splitlines()
                if line and deserialize(line)["step"] <= keep_through
            ]
            self.path.write_bytes(b"".join(line + b"\n" for line in kept))
        self._file = open(self.path, "ab")

    def write(self, step: int, breakdown: LossBreakdown, **extra) -> None:
        record = {"step": step, **unstructure(breakdown), **extra}
        self._file.write(serialize(record) + b"\n")

    def flush(self) -> None:
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "LossLog":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def read_loss_log(path: str | Path) -> list[Mapping]:
    return [deserialize(line) for line in Path(path).read_bytes().splitlines() if line]
