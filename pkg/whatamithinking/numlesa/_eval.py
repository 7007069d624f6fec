from typing import Sequence, Iterable
from collections import Counter
from pathlib import Path
import csv
import logging
import math

import numpy as np
import torch

from ._common import Label, LABELS, N_CLASSES, IGNORE_INDEX
from ._struct import struct
from ._errors import ShapeError, ProbeError, VocabError
from ._codec import dumps
from ._numtok import (
    MASK_ID,
    NUM_ID,
    UNK_ID,
    TokenSequence,
    Vocab,
    encode,
    normalize_mask_surfaces,
    tokenize,
)
from ._batch import Example, collate, encode_notes, iter_batches
from ._model import Encoder
from ._numerics import Tensor, l2_normalize

__all__ = [
    "RunMetrics",
    "ScatterPair",
    "SimilarityMatrix",
    "ProbeResult",
    "f1_per_class",
    "confusion_matrix",
    "span_predictions",
    "predict_labels",
    "evaluate_classifier",
    "completion_probe",
    "export_scatter",
    "pearson_log",
    "compare_embeddings",
    "write_metrics",
    "write_scatter",
    "write_similarity",
    "format_metrics_table",
]

logger = logging.getLogger(__name__)

DEFAULT_PROBE = "Patient en détresse respiratoire, gradient VG-VD ad <mask> mmgh."


@struct
class RunMetrics:
    per_class_f1: dict[Label, float]
    macro_f1: float
    # rows are gold classes, columns predictions, counted over NUM tokens
    confusion: tuple[tuple[int, ...], ...]
    seed: int | None = None
    per_class_std: dict[Label, float] | None = None
    macro_f1_std: float | None = None
    n_seeds: int = 1


@struct(frozen=True)
class ScatterPair:
    truth: float
    predicted: float
    label: Label


@struct
class SimilarityMatrix:
    terms: tuple[str, ...]
    matrix: tuple[tuple[float, ...], ...]

    def mean_diagonal(self) -> float:
        return float(np.mean([self.matrix[i][i] for i in range(len(self.terms))]))


@struct
class ProbeResult:
    text: str
    position: int
    top: tuple[tuple[str, float], ...]
    value: float


def _aligned(pred: Sequence[int], gold: Sequence[int], op: str) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=int)
    gold = np.asarray(gold, dtype=int)
    if pred.shape != gold.shape:
        raise ShapeError(op, pred.shape, gold.shape)
    keep = gold != IGNORE_INDEX
    return pred[keep], gold[keep]


def f1_per_class(
    pred: Sequence[int], gold: Sequence[int], exclude_o: bool = False
) -> tuple[dict[Label, float], float]:
    """Per-class F1 over class indices plus their unweighted mean.

    Positions whose gold is IGNORE_INDEX are skipped. A class with no true
    positive scores 0. The mean runs over all eight classes unless
    ``exclude_o``.
    """
    pred, gold = _aligned(pred, gold, "f1_per_class")
    scores = {}
    for label in LABELS:
        c = label.index
        right = int(np.sum((pred == c) & (gold == c)))
        found = int(np.sum(pred == c))
        origin = int(np.sum(gold == c))
        precision = right / found if found else 0.0
        recall = right / origin if origin else 0.0
        total = precision + recall
        scores[label] = 2 * precision * recall / total if total else 0.0
    averaged = [f1 for label, f1 in scores.items() if not (exclude_o and label is Label.O)]
    return scores, math.fsum(averaged) / len(averaged)


def confusion_matrix(pred: Sequence[int], gold: Sequence[int]) -> np.ndarray:
    pred, gold = _aligned(pred, gold, "confusion_matrix")
    matrix = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(matrix, (gold, pred), 1)
    return matrix


def span_predictions(seq: TokenSequence, note, pred: Sequence[int]) -> list[tuple[int, int]]:
    """(gold, predicted) class per gold span.

    A span takes its gold class only when every one of its NUM tokens was
    predicted correctly; otherwise it takes the most frequent wrong class.
    Spans truncated out of the sequence are skipped.
    """
    pairs = []
    for span in note.spans:
        gold = (span.label or Label.O).index
        predicted = [
            int(pred[i])
            for i, (id, (start, end)) in enumerate(zip(seq.ids, seq.offsets))
            if id == NUM_ID and span.start <= start and end <= span.end
        ]
        if not predicted:
            continue
        wrong = [_ for _ in predicted if _ != gold]
        if wrong:
            pairs.append((gold, Counter(wrong).most_common(1)[0][0]))
        else:
            pairs.append((gold, gold))
    return pairs


@torch.no_grad()
def predict_labels(
    model: Encoder, examples: Sequence[Example], batch_size: int = 32
) -> list[np.ndarray]:
    model.eval()
    predictions = []
    for batch in iter_batches(examples, batch_size, dtype=model.config.dtype):
        output = model(batch.ids, batch.values, batch.attention_mask)
        argmax = model.head_classify(output.hidden).argmax(dim=-1).numpy()
        lengths = batch.attention_mask.sum(dim=-1).tolist()
        predictions.extend(row[:length] for row, length in zip(argmax, lengths))
    return predictions


def evaluate_classifier(
    model: Encoder,
    notes: Sequence,
    vocab: Vocab,
    exclude_o: bool = False,
    batch_size: int = 32,
    seed: int | None = None,
) -> RunMetrics:
    """Span-level F1 and NUM-token confusion of the classifier head on ``notes``."""
    examples = encode_notes(notes, vocab, model.config.max_length, with_labels=True)
    predictions = predict_labels(model, examples, batch_size)
    span_gold, span_pred, token_gold, token_pred = [], [], [], []
    for note, example, pred in zip(notes, examples, predictions):
        for gold, predicted in span_predictions(example.seq, note, pred):
            span_gold.append(gold)
            span_pred.append(predicted)
        token_gold.extend(example.labels)
        token_pred.extend(pred.tolist())
    per_class, macro = f1_per_class(span_pred, span_gold, exclude_o)
    confusion = confusion_matrix(token_pred, token_gold)
    return RunMetrics(
        per_class_f1=per_class,
        macro_f1=macro,
        confusion=tuple(tuple(int(_) for _ in row) for row in confusion),
        seed=seed,
    )


@torch.no_grad()
def completion_probe(model: Encoder, vocab: Vocab, text: str = DEFAULT_PROBE, k: int = 5) -> ProbeResult:
    """Top-k language-model tokens and the number-head value at the single masked slot."""
    text = normalize_mask_surfaces(text)
    seq = encode(text, vocab, max_length=model.config.max_length)
    positions = [i for i, id in enumerate(seq.ids) if id == MASK_ID]
    if len(positions) != 1:
        raise ProbeError(f"probe text needs exactly one mask, found {len(positions)}")
    (position,) = positions
    model.eval()
    batch = collate([Example(seq=seq)], model.config.dtype)
    output = model(batch.ids, batch.values, batch.attention_mask)
    probs = torch.softmax(model.head_lm(output.hidden)[0, position], dim=-1)
    top = torch.topk(probs, min(k, probs.shape[-1]))
    value = float(model.head_num(output.hidden)[0, position])
    return ProbeResult(
        text=text,
        position=position,
        top=tuple(
            (vocab.token(int(i)), float(p)) for p, i in zip(top.values, top.indices)
        ),
        value=value,
    )


@torch.no_grad()
def export_scatter(model: Encoder, notes: Sequence, vocab: Vocab) -> list[ScatterPair]:
    """Predicted vs true value at each gold NUM token, masking one token at a time."""
    if not model.config.xval_enabled:
        raise ProbeError("number predictions need a model with value-scaled embeddings")
    model.eval()
    tiny = torch.finfo(model.config.dtype).tiny
    pairs = []
    for example in encode_notes(notes, vocab, model.config.max_length, with_labels=True):
        seq = example.seq
        targets = [i for i, label in enumerate(example.labels) if label != IGNORE_INDEX]
        if not targets:
            continue
        batch = collate([example] * len(targets), model.config.dtype)
        rows = torch.arange(len(targets))
        columns = torch.tensor(targets)
        batch.ids[rows, columns] = MASK_ID
        batch.values[rows, columns] = 1.0
        output = model(batch.ids, batch.values, batch.attention_mask)
        predicted = model.head_num(output.hidden)[rows, columns].clamp_min(tiny)
        for i, value in zip(targets, predicted.tolist()):
            pairs.append(
                ScatterPair(
                    truth=seq.values[i], predicted=value, label=Label.from_index(example.labels[i])
                )
            )
    return pairs


def pearson_log(pairs: Iterable[ScatterPair]) -> float:
    """Pearson correlation of log truth against log prediction."""
    truth, predicted = zip(*((_.truth, _.predicted) for _ in pairs))
    return float(np.corrcoef(np.log(truth), np.log(predicted))[0, 1])


def _term_ids(vocab: Vocab, terms: Sequence[str]) -> list[list[int]]:
    ids = [[vocab.id(_.surface) for _ in tokenize(term)] for term in terms]
    missing = [term for term, term_ids in zip(terms, ids) if not term_ids or UNK_ID in term_ids]
    if missing:
        raise VocabError(f"terms out of vocabulary: {missing}")
    return ids


def compare_embeddings(
    reference: Tensor, candidate: Tensor, vocab: Vocab, terms: Sequence[str]
) -> SimilarityMatrix:
    """Cosine of reference term i against candidate term j, over token-embedding tables.

    A term's embedding is the mean of its tokens' rows.
    """
    if reference.shape != candidate.shape:
        raise ShapeError("compare_embeddings", reference.shape, candidate.shape)
    ids = _term_ids(vocab, terms)
    with torch.no_grad():
        ref = torch.stack([reference[_].mean(dim=0) for _ in ids])
        cand = torch.stack([candidate[_].mean(dim=0) for _ in ids])
        matrix = (l2_normalize(ref) @ l2_normalize(cand).T).clamp(-1.0, 1.0)
    return SimilarityMatrix(
        terms=tuple(terms), matrix=tuple(tuple(row) for row in matrix.tolist())
    )


def write_metrics(path: str | Path, metrics: RunMetrics) -> None:
    Path(path).write_bytes(dumps(metrics))


def write_scatter(path: str | Path, pairs: Iterable[ScatterPair]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(["truth", "predicted", "label"])
        for pair in pairs:
            writer.writerow([repr(pair.truth), repr(pair.predicted), pair.label.value])


def write_similarity(path: str | Path, similarity: SimilarityMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(["term", *similarity.terms])
        for term, row in zip(similarity.terms, similarity.matrix):
            writer.writerow([term, *(f"{_:.6f}" for _ in row)])


def format_metrics_table(metrics: RunMetrics) -> str:
    """Per-class F1 as aligned text, four decimals, with std when aggregated."""
    lines = []
    for label in (*LABELS, None):
        name = "macro" if label is None else label.value
        value = metrics.macro_f1 if label is None else metrics.per_class_f1[label]
        std = metrics.macro_f1_std if label is None else (
            None if metrics.per_class_std is None else metrics.per_class_std[label]
        )
        lines.append(f"{name:>8}  {value:.4f}" + ("" if std is None else f" ± {std:.4f}"))
    return "\n".join(lines)
