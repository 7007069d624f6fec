from typing import Annotated, Any, Iterable, Mapping, Sequence, TypeVar
from functools import cache
from importlib import resources
from pathlib import Path
import logging
import math

import numpy as np
import regex

from ._common import Label, LABELS, N_CLASSES, VALUE_MIN, VALUE_MAX
from ._struct import struct, field
from ._constraints import Value
from ._pointers import Pointer
from ._issues import (
    BaseIssue,
    NumberIssue,
    OrderIssue,
    SumIssue,
    MissingFieldIssue,
    InvariantIssue,
)
from ._errors import ValidationError, CorpusParseError, StratificationError, LabelError
from ._codec import validate, deserialize, serialize, dumps, convert
from ._numtok import NumberSpan, detect_numbers

__all__ = [
    "DEFAULT_CLASS_MIX",
    "DEFAULT_VALUE_RANGES",
    "CORPUS_SCHEMA",
    "CORPUS_VERSION",
    "ClassLabel",
    "AnnotatedNote",
    "CorpusSpec",
    "load_class_labels",
    "load_terms",
    "generate_corpus",
    "generate_unannotated",
    "split_corpus",
    "class_counts",
    "inverse_frequency_weights",
    "class_weights",
    "save_corpus",
    "load_corpus",
]

logger = logging.getLogger(__name__)

K = TypeVar("K")

CORPUS_SCHEMA = "numlesa.corpus"
CORPUS_VERSION = 1

DEFAULT_CLASS_MIX = {
    Label.O: 0.70,
    Label.CP: 0.04,
    Label.FC: 0.05,
    Label.D: 0.05,
    Label.SO2: 0.04,
    Label.AGPR: 0.04,
    Label.G: 0.04,
    Label.CIA_CIV: 0.04,
}
# ranges overlap across classes, so magnitude alone does not decide the class
DEFAULT_VALUE_RANGES = {
    Label.O: (0.5, 500.0),
    Label.CP: (10.0, 80.0),
    Label.FC: (60.0, 220.0),
    Label.D: (VALUE_MIN, VALUE_MAX),
    Label.SO2: (40.0, 100.0),
    Label.AGPR: (1.0, 10.0),
    Label.G: (2.0, 130.0),
    Label.CIA_CIV: (1.0, 40.0),
}

_SLOT = regex.compile(r"\{([vrtw])\}")


def _data_bytes(name: str) -> bytes:
    return (resources.files("whatamithinking.numlesa") / "_data" / name).read_bytes()


@struct(frozen=True)
class ClassLabel:
    id: Label
    keywords: tuple[str, ...]


def load_class_labels(path: str | Path | None = None) -> tuple[ClassLabel, ...]:
    """Read the keyword lists describing each class, in class-index order."""
    data = deserialize(_data_bytes("labels.json") if path is None else Path(path).read_bytes())
    keywords = convert(data, dict[Label, tuple[str, ...]])
    missing = [label.value for label in LABELS if label not in keywords]
    if missing:
        raise LabelError(f"no keywords given for classes {missing}")
    for label, words in keywords.items():
        if label is not Label.O and len(words) < 2:
            raise LabelError(f"class {label.value} needs at least two keywords, got {list(words)}")
    return tuple(ClassLabel(id=label, keywords=keywords[label]) for label in LABELS)


def load_terms(path: str | Path | None = None) -> list[str]:
    data = deserialize(_data_bytes("terms.json") if path is None else Path(path).read_bytes())
    return convert(data, list[str])


@cache
def _template_bank() -> dict[str, Any]:
    return deserialize(_data_bytes("templates.json"))


@struct(frozen=True)
class AnnotatedNote:
    id: str
    text: str
    spans: tuple[NumberSpan, ...] = ()

    def _validate_(self, pointer: Pointer) -> list[BaseIssue]:
        issues = []
        prev_end = 0
        for i, span in enumerate(self.spans):
            spointer = pointer / "spans" / i
            if span.start < prev_end:
                issues.append(
                    OrderIssue(
                        value=span.start,
                        pointer=spointer / "start",
                        message="spans must be sorted and must not overlap",
                    )
                )
            if span.end > len(self.text):
                issues.append(
                    NumberIssue(
                        value=span.end,
                        pointer=spointer / "end",
                        comparator="le",
                        limit=len(self.text),
                    )
                )
                continue
            parsed = detect_numbers(self.text[span.start : span.end])
            if len(parsed) != 1 or parsed[0].values != span.values:
                issues.append(
                    InvariantIssue(
                        value=self.text[span.start : span.end],
                        pointer=spointer / "values",
                        message=f"span text does not parse to {list(span.values)}",
                    )
                )
            prev_end = span.end
        return issues


@struct
class CorpusSpec:
    n_notes: Annotated[int, Value("ge", 1)] = 2000
    seed: Annotated[int, Value("ge", 0)] = 0
    class_mix: dict[Label, Annotated[float, Value("ge", 0.0), Value("le", 1.0)]] = field(
        default_factory=lambda: dict(DEFAULT_CLASS_MIX)
    )
    value_ranges: dict[Label, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_VALUE_RANGES)
    )
    noise_rate: Annotated[float, Value("ge", 0.0), Value("le", 1.0)] = 0.3
    clauses_per_note: tuple[
        Annotated[int, Value("ge", 1)], Annotated[int, Value("ge", 1)]
    ] = (3, 7)
    # notes without spans, used only by stage A
    n_unannotated: Annotated[int, Value("ge", 0)] = 4000

    def _validate_(self, pointer: Pointer) -> list[BaseIssue]:
        issues: list[BaseIssue] = []
        total = math.fsum(self.class_mix.values())
        if abs(total - 1.0) > 1e-9:
            issues.append(
                SumIssue(
                    value=total, pointer=pointer / "class_mix", expected=1.0, tolerance=1e-9
                )
            )
        for label in LABELS:
            rpointer = pointer / "value_ranges" / label.value
            if label not in self.value_ranges:
                if self.class_mix.get(label, 0.0) > 0.0:
                    issues.append(MissingFieldIssue(value=None, pointer=rpointer))
                continue
            lo, hi = self.value_ranges[label]
            if not lo < hi:
                issues.append(
                    OrderIssue(value=(lo, hi), pointer=rpointer, message="lo must be below hi")
                )
            if lo < VALUE_MIN:
                issues.append(
                    NumberIssue(value=lo, pointer=rpointer / 0, comparator="ge", limit=VALUE_MIN)
                )
            if hi > VALUE_MAX:
                issues.append(
                    NumberIssue(value=hi, pointer=rpointer / 1, comparator="le", limit=VALUE_MAX)
                )
        lo, hi = self.clauses_per_note
        if lo > hi:
            issues.append(
                OrderIssue(
                    value=(lo, hi),
                    pointer=pointer / "clauses_per_note",
                    message="minimum clause count exceeds the maximum",
                )
            )
        return issues

    def probabilities(self) -> np.ndarray:
        return np.array([self.class_mix.get(label, 0.0) for label in LABELS])


def _format_value(value: float, decimals: int | None, comma: bool) -> str:
    significant = decimals is None
    if significant:
        # keep four significant digits without scientific notation
        decimals = min(4, max(0, 3 - math.floor(math.log10(value))))
    text = f"{value:.{decimals}f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    if float(text) < VALUE_MIN and not significant:
        return _format_value(value, None, comma)
    return text.replace(".", ",") if comma else text


class _NoteWriter:
    """Renders one note, remembering where each rendered number landed."""

    def __init__(self, rng: np.random.Generator, spec: CorpusSpec, fragment: bool) -> None:
        self.rng = rng
        self.spec = spec
        self.fragment = fragment
        self.style = "fragment" if fragment else "full"
        self.parts: list[str] = []
        self.offset = 0
        self.slots: list[tuple[int, int, tuple[float, ...], Label]] = []

    def write(self, text: str) -> None:
        self.parts.append(text)
        self.offset += len(text)

    def scramble_case(self, text: str) -> str:
        if not self.fragment:
            return text
        words = []
        for word in text.split(" "):
            roll = self.rng.random()
            if roll < 0.1:
                word = word.upper()
            elif roll < 0.2:
                word = word.lower()
            words.append(word)
        return " ".join(words)

    def sample(self, label: Label) -> tuple[str, float]:
        lo, hi = self.spec.value_ranges[label]
        decimals = _template_bank()["decimals"][label.value]
        if decimals == 0:
            value = float(self.rng.integers(math.ceil(lo), math.floor(hi) + 1))
        elif decimals is None:
            value = math.exp(self.rng.uniform(math.log(lo), math.log(hi)))
        else:
            value = self.rng.uniform(lo, hi)
        comma = decimals != 0 and self.rng.random() < 0.5
        text = _format_value(value, decimals, comma)
        return text, float(text.replace(",", "."))

    def clause(self, label: Label) -> None:
        templates = _template_bank()["clauses"][label.value][self.style]
        template = templates[self.rng.integers(len(templates))]
        pos = 0
        for slot in _SLOT.finditer(template):
            self.write(self.scramble_case(template[pos : slot.start()]))
            match slot.group(1):
                case "v":
                    n, delimiter = 1, ""
                case "r":
                    n, delimiter = 2, "-"
                case "t":
                    n, delimiter = 3, "-"
                case "w":
                    n, delimiter = 2, "+"
            rendered = [self.sample(label) for _ in range(n)]
            if slot.group(1) == "r":
                rendered.sort(key=lambda _: _[1])
            literal = delimiter.join(text for text, _ in rendered)
            self.slots.append(
                (self.offset, self.offset + len(literal), tuple(v for _, v in rendered), label)
            )
            self.write(literal)
            pos = slot.end()
        self.write(self.scramble_case(template[pos:]))

    def filler(self) -> None:
        fillers = _template_bank()["fillers"][self.style]
        self.write(self.scramble_case(fillers[self.rng.integers(len(fillers))]))

    def separator(self) -> None:
        if self.fragment:
            self.write(" " if self.rng.random() < 0.6 else ", ")
        else:
            self.write(". ")

    def note(self, id: str, labels: Sequence[Label], annotated: bool) -> AnnotatedNote:
        for i, label in enumerate(labels):
            if i:
                self.separator()
            if self.rng.random() < 0.25:
                self.filler()
                self.separator()
            self.clause(label)
        if not self.fragment:
            self.write(".")
        text = "".join(self.parts)
        if not annotated:
            return AnnotatedNote(id=id, text=text)
        detected = detect_numbers(text)
        if [(_.start, _.end, _.values) for _ in detected] != [
            (start, end, values) for start, end, values, _ in self.slots
        ]:
            raise LabelError(f"template bank produced a note whose numbers cannot be aligned: {text!r}")
        spans = tuple(
            NumberSpan(
                start=span.start, end=span.end, values=span.values, unit=span.unit, label=label
            )
            for span, (_, _, _, label) in zip(detected, self.slots)
        )
        return AnnotatedNote(id=id, text=text, spans=spans)


def _generate(
    spec: CorpusSpec, n_notes: int, stream: int, prefix: str, annotated: bool
) -> list[AnnotatedNote]:
    validate(spec)
    rng = np.random.default_rng([spec.seed, stream])
    probabilities = spec.probabilities()
    lo, hi = spec.clauses_per_note
    notes = []
    for i in range(n_notes):
        fragment = bool(rng.random() < spec.noise_rate)
        n_clauses = int(rng.integers(lo, hi + 1))
        labels = [LABELS[_] for _ in rng.choice(N_CLASSES, size=n_clauses, p=probabilities)]
        writer = _NoteWriter(rng, spec, fragment)
        notes.append(writer.note(f"{prefix}-{i:05d}", labels, annotated))
    return notes


def generate_corpus(spec: CorpusSpec) -> list[AnnotatedNote]:
    """Annotated notes; a pure function of ``spec``."""
    notes = _generate(spec, spec.n_notes, 0, "note", annotated=True)
    logger.info(
        "generated %d annotated notes with %d spans",
        len(notes),
        sum(len(_.spans) for _ in notes),
    )
    return notes


def generate_unannotated(spec: CorpusSpec) -> list[AnnotatedNote]:
    """Span-free notes for stage A, drawn from a stream independent of the annotated one."""
    notes = _generate(spec, spec.n_unannotated, 1, "unannotated", annotated=False)
    logger.info("generated %d unannotated notes", len(notes))
    return notes


def class_counts(corpus: Iterable[AnnotatedNote]) -> dict[Label, int]:
    counts = dict.fromkeys(LABELS, 0)
    for note in corpus:
        for span in note.spans:
            counts[span.label or Label.O] += 1
    return counts


def inverse_frequency_weights(counts: Mapping[K, int]) -> dict[K, float]:
    """Weights proportional to 1/count, scaled so their mean is one."""
    inverse = {key: 1.0 / count for key, count in counts.items()}
    mean = math.fsum(inverse.values()) / len(inverse)
    return {key: value / mean for key, value in inverse.items()}


def class_weights(train: Iterable[AnnotatedNote]) -> dict[Label, float]:
    counts = class_counts(train)
    absent = [label.value for label, count in counts.items() if count == 0]
    if absent:
        raise LabelError(f"classes absent from the training split: {absent}")
    return inverse_frequency_weights(counts)


def split_corpus(
    corpus: Sequence[AnnotatedNote],
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> tuple[list[AnnotatedNote], list[AnnotatedNote], list[AnnotatedNote]]:
    """Stratified note-level split into (train, validation, test).

    Notes are assigned greedily, rarest class first, to the split that still
    needs the most spans of that class. Each split keeps the corpus order.
    """
    if len(ratios) != 3 or min(ratios) < 0 or abs(math.fsum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, not {ratios}")
    totals = class_counts(corpus)
    short = [label.value for label, count in totals.items() if count < 3]
    if short:
        raise StratificationError(f"classes with fewer than 3 spans cannot be stratified: {short}")

    n = len(corpus)
    sizes = [round(ratios[0] * n), round(ratios[1] * n)]
    capacity = np.array(sizes + [n - sum(sizes)])
    per_note = np.zeros((n, N_CLASSES))
    for i, note in enumerate(corpus):
        for span in note.spans:
            per_note[i, (span.label or Label.O).index] += 1
    total = np.array([totals[label] for label in LABELS], dtype=float)
    desired = np.outer(np.asarray(ratios), total)

    rarity = np.where(per_note > 0, total, np.inf).min(axis=1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    order = order[np.argsort(rarity[order], kind="stable")]

    assignment = np.empty(n, dtype=int)
    for i in order:
        present = np.flatnonzero(per_note[i])
        if len(present):
            rarest = present[np.argmin(total[present])]
            score = desired[:, rarest]
        else:
            score = capacity.astype(float)
        open_splits = [s for s in range(3) if capacity[s] > 0]
        best = max(open_splits, key=lambda s: (score[s], capacity[s], -s))
        assignment[i] = best
        capacity[best] -= 1
        desired[best] -= per_note[i]

    splits = tuple([note for note, s in zip(corpus, assignment) if s == k] for k in range(3))
    logger.info("split %d notes into %d/%d/%d", n, *map(len, splits))
    return splits


def save_corpus(path: str | Path, corpus: Iterable[AnnotatedNote]) -> None:
    """Write a schema header line followed by one json record per note."""
    with open(path, "wb") as file:
        file.write(serialize({"schema": CORPUS_SCHEMA, "version": CORPUS_VERSION}) + b"\n")
        for note in corpus:
            file.write(dumps(note) + b"\n")


def _describe(exc: ValidationError) -> str:
    return "; ".join(f"{_.issue_type} at {_.pointer}" for _ in exc.issues)


def load_corpus(path: str | Path) -> list[AnnotatedNote]:
    lines = Path(path).read_bytes().split(b"\n")
    if lines and not lines[-1]:
        lines.pop()
    if not lines:
        return []
    try:
        header = deserialize(lines[0])
    except ValidationError as exc:
        raise CorpusParseError(f"unreadable header ({_describe(exc)})", 1) from exc
    if not isinstance(header, dict) or header.get("schema") != CORPUS_SCHEMA:
        raise CorpusParseError(f"expected a {CORPUS_SCHEMA!r} header record", 1)
    if header.get("version") != CORPUS_VERSION:
        raise CorpusParseError(f"unsupported corpus version {header.get('version')!r}", 1)
    notes = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise CorpusParseError("blank record", lineno)
        try:
            notes.append(convert(deserialize(line), AnnotatedNote))
        except ValidationError as exc:
            raise CorpusParseError(_describe(exc), lineno) from exc
    return notes
