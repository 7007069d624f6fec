from typing import Literal
from enum import Enum
import hashlib

__all__ = [
    "Empty",
    "Label",
    "LABELS",
    "N_CLASSES",
    "IGNORE_INDEX",
    "VALUE_MIN",
    "VALUE_MAX",
    "T_Mode",
    "T_LossMode",
    "T_CosimTarget",
    "T_Precision",
    "mode_flags",
    "stable_hash",
]


class EmptyMeta(type):
    def __repr__(cls):
        return "<Empty>"

    def __bool__(cls):
        return False


class Empty(metaclass=EmptyMeta): ...


T_Mode = Literal["plain", "lesa", "xval", "lesa_xval"]
T_LossMode = Literal["fixed", "uncertainty"]
T_CosimTarget = Literal["scores", "probs"]
T_Precision = Literal["float32", "float64"]

# numbers observed in the notes span this range
VALUE_MIN = 1e-4
VALUE_MAX = 1e5

# target id skipped by every token-level loss
IGNORE_INDEX = -100


class Label(Enum):
    """The eight numeric classes. Declaration order is the class index."""

    O = "O"
    CP = "Cp"
    FC = "FC"
    D = "D"
    SO2 = "SO2"
    AGPR = "AGPR"
    G = "G"
    CIA_CIV = "CIA/CIV"

    @property
    def index(self) -> int:
        return _label_index[self]

    @classmethod
    def from_index(cls, index: int) -> "Label":
        return LABELS[index]


LABELS: tuple[Label, ...] = tuple(Label)
N_CLASSES = len(LABELS)
_label_index = {label: i for i, label in enumerate(LABELS)}


def mode_flags(mode: T_Mode) -> tuple[bool, bool]:
    """Return (lesa_enabled, xval_enabled) for a training mode."""
    match mode:
        case "plain":
            return False, False
        case "lesa":
            return True, False
        case "xval":
            return False, True
        case "lesa_xval":
            return True, True
        case _:
            raise ValueError(f"unknown mode {mode!r}")


def stable_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
