from typing import Iterable, Sequence, Iterator
import logging

import numpy as np
import torch

from ._common import IGNORE_INDEX, Label
from ._struct import struct
from ._errors import LabelError
from ._numtok import (
    PAD_ID,
    TokenSequence,
    Vocab,
    encode,
    label_tokens,
    mask_for_mlm,
)
from ._numerics import Tensor

__all__ = [
    "Example",
    "Batch",
    "encode_notes",
    "collate",
    "iter_batches",
    "masked_batches",
]

logger = logging.getLogger(__name__)


@struct(frozen=True)
class Example:
    seq: TokenSequence
    labels: tuple[int, ...] | None = None


@struct(eq=False)
class Batch:
    ids: Tensor  # (B, L) long
    values: Tensor  # (B, L)
    attention_mask: Tensor  # (B, L) bool
    mlm_positions: Tensor | None = None  # (B, L) bool
    y1: Tensor | None = None  # (N,) long, row-major over mlm_positions
    y2: Tensor | None = None  # (N,)
    labels: Tensor | None = None  # (B, L) long, IGNORE_INDEX off targets

    @property
    def n_masked(self) -> int:
        return 0 if self.mlm_positions is None else int(self.mlm_positions.sum())


def encode_notes(
    notes: Iterable, vocab: Vocab, max_length: int, with_labels: bool = False
) -> list[Example]:
    """Encode notes, truncated to ``max_length`` tokens, optionally with NUM labels."""
    examples = []
    for note in notes:
        seq = encode(note.text, vocab, max_length=max_length)
        labels = None
        if with_labels:
            for span in note.spans:
                if not isinstance(span.label, Label):
                    raise LabelError(f"note {note.id} has a span at {span.start} without a class")
            labels = label_tokens(seq, note)
        examples.append(Example(seq=seq, labels=labels))
    return examples


def collate(examples: Sequence[Example], dtype: torch.dtype = torch.float64) -> Batch:
    """Right-pad a list of examples into one batch."""
    width = max(len(_.seq) for _ in examples)
    n = len(examples)
    ids = torch.full((n, width), PAD_ID, dtype=torch.long)
    values = torch.ones((n, width), dtype=dtype)
    has_mask = any(_.seq.mask_positions for _ in examples)
    positions = torch.zeros((n, width), dtype=torch.bool) if has_mask else None
    labels = None
    if examples[0].labels is not None:
        labels = torch.full((n, width), IGNORE_INDEX, dtype=torch.long)
    y1, y2 = [], []
    for row, example in enumerate(examples):
        seq = example.seq
        length = len(seq)
        ids[row, :length] = torch.tensor(seq.ids, dtype=torch.long)
        values[row, :length] = torch.tensor(seq.values, dtype=dtype)
        if positions is not None and seq.mask_positions:
            positions[row, list(seq.mask_positions)] = True
            y1.extend(seq.y1)
            y2.extend(seq.y2)
        if labels is not None:
            labels[row, :length] = torch.tensor(example.labels, dtype=torch.long)
    return Batch(
        ids=ids,
        values=values,
        attention_mask=ids != PAD_ID,
        mlm_positions=positions,
        y1=torch.tensor(y1, dtype=torch.long) if positions is not None else None,
        y2=torch.tensor(y2, dtype=dtype) if positions is not None else None,
        labels=labels,
    )


def iter_batches(
    examples: Sequence[Example],
    batch_size: int,
    rng: np.random.Generator | None = None,
    dtype: torch.dtype = torch.float64,
) -> Iterator[Batch]:
    """Batches in order, or shuffled when a generator is given."""
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield collate([examples[i] for i in order[start : start + batch_size]], dtype)


def masked_batches(
    examples: Sequence[Example],
    batch_size: int,
    rate: float,
    rng: np.random.Generator,
    shuffle: bool = True,
    dtype: torch.dtype = torch.float64,
) -> list[Batch]:
    """MLM batches drawn from ``rng``; batches where nothing got masked are dropped."""
    masked = [Example(seq=mask_for_mlm(_.seq, rate, rng)) for _ in examples]
    batches = []
    skipped = 0
    for batch in iter_batches(masked, batch_size, rng if shuffle else None, dtype):
        if batch.n_masked:
            batches.append(batch)
        else:
            skipped += 1
    if skipped:
        logger.debug("dropped %d batches without masked positions", skipped)
    return batches
