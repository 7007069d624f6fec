from typing import Annotated, Iterable, TYPE_CHECKING
from collections import Counter
from pathlib import Path
import logging

import numpy as np
import regex
from lru import LRU

from ._common import Label, IGNORE_INDEX, VALUE_MIN, VALUE_MAX, stable_hash
from ._struct import struct, field, replace
from ._constraints import Value, Length
from ._issues import BaseIssue, OrderIssue
from ._pointers import Pointer
from ._errors import VocabError

if TYPE_CHECKING:
    from ._corpus import AnnotatedNote

__all__ = [
    "RESERVED_TOKENS",
    "PAD_ID",
    "CLS_ID",
    "MASK_ID",
    "UNK_ID",
    "NUM_ID",
    "NUM_SURFACE",
    "NumberSpan",
    "Token",
    "Vocab",
    "TokenSequence",
    "detect_numbers",
    "substitute_placeholders",
    "normalize_mask_surfaces",
    "tokenize",
    "build_vocab",
    "save_vocab",
    "load_vocab",
    "encode",
    "decode",
    "label_tokens",
    "mask_for_mlm",
]

logger = logging.getLogger(__name__)

RESERVED_TOKENS = ("[PAD]", "[CLS]", "[MASK]", "[UNK]", "[NUM]")
PAD_ID, CLS_ID, MASK_ID, UNK_ID, NUM_ID = range(len(RESERVED_TOKENS))
NUM_SURFACE = "NUM"

# a number may not be glued to a preceding word, so codes like G1P2 stay words.
# components joined by - or + form ranges (50-65), scores (8-8-8) and terms (37+6).
_NUMBER = regex.compile(
    r"""
    (?<![\w.,])
    (?P<comp>\d+(?:[.,]\d+)?)
    (?:[-+](?P<comp>\d+(?:[.,]\d+)?))*
    (?P<unit>%|°C?|[^\W\d_]+(?:/[^\W\d_]+)*)?
    (?!\w)
    """,
    regex.VERBOSE,
)
_WORD = regex.compile(
    r"""
    \[(?:PAD|CLS|MASK|UNK|NUM)\]
    | (?<!\w)NUM(?!\w)
    | \w+(?:[-/'’]\w+)*
    | [^\w\s]
    """,
    regex.VERBOSE,
)
_MASK_ALIASES = regex.compile(r"<mask>|⟨mask⟩", regex.IGNORECASE)


@struct(frozen=True)
class NumberSpan:
    """A numeric literal inside a note.

    ``start``/``end`` cover the digits and their separators only; an attached
    unit is reported in ``unit`` and stays outside the span.
    """

    start: Annotated[int, Value("ge", 0)]
    end: Annotated[int, Value("gt", 0)]
    values: Annotated[
        tuple[Annotated[float, Value("ge", VALUE_MIN), Value("le", VALUE_MAX)], ...],
        Length("ge", 1),
    ]
    unit: str | None = None
    label: Label | None = None

    def _validate_(self, pointer: Pointer) -> list[BaseIssue]:
        if self.start >= self.end:
            return [
                OrderIssue(
                    value=(self.start, self.end),
                    pointer=pointer / "end",
                    message="span end must come after its start",
                )
            ]
        return []


@struct(frozen=True, slots=True)
class Token:
    surface: str
    start: int
    end: int
    value: float | None = None


def _parse_component(text: str) -> float:
    return float(text.replace(",", "."))


def _scan(text: str):
    """Yield (start, end, components, unit) for each numeric literal, left to right.

    ``components`` is a list of (start, end, value) per number inside the literal.
    """
    for match in _NUMBER.finditer(text):
        spans = match.spans("comp")
        components = [
            (s, e, _parse_component(c)) for (s, e), c in zip(spans, match.captures("comp"))
        ]
        yield match.start(), spans[-1][1], components, match.group("unit")


_detect_cache = LRU(8192)


def detect_numbers(text: str) -> list[NumberSpan]:
    try:
        return list(_detect_cache[text])
    except KeyError:
        pass
    spans = tuple(
        NumberSpan(
            start=start,
            end=end,
            values=tuple(v for _, _, v in components),
            unit=unit,
        )
        for start, end, components, unit in _scan(text)
    )
    _detect_cache[text] = spans
    return list(spans)


def substitute_placeholders(text: str) -> tuple[str, list[float]]:
    """Replace every number with the NUM surface and keep the values in order.

    Only digits are rewritten, so ``"100-110"`` becomes ``"NUM-NUM"`` and units,
    delimiters and whitespace survive untouched. Use the ``offsets`` of
    ``encode`` to map a placeholder back to its source characters.
    """
    parts = []
    values = []
    pos = 0
    for _, _, components, _ in _scan(text):
        for start, end, value in components:
            parts.append(text[pos:start])
            parts.append(NUM_SURFACE)
            values.append(value)
            pos = end
    parts.append(text[pos:])
    return "".join(parts), values


def normalize_mask_surfaces(text: str) -> str:
    return _MASK_ALIASES.sub("[MASK]", text)


def _words(text: str, pos: int, endpos: int) -> Iterable[Token]:
    for match in _WORD.finditer(text, pos, endpos):
        surface = match.group()
        if surface == NUM_SURFACE:
            surface = "[NUM]"
        yield Token(surface=surface, start=match.start(), end=match.end())


def tokenize(text: str) -> list[Token]:
    """Split text into word and punctuation tokens with one ``[NUM]`` per number."""
    tokens = []
    pos = 0
    for start, end, components, _ in _scan(text):
        tokens.extend(_words(text, pos, start))
        prev_end = None
        for cstart, cend, value in components:
            if prev_end is not None:
                tokens.append(
                    Token(surface=text[prev_end:cstart], start=prev_end, end=cstart)
                )
            tokens.append(Token(surface="[NUM]", start=cstart, end=cend, value=value))
            prev_end = cend
        pos = end
    tokens.extend(_words(text, pos, len(text)))
    return tokens


@struct(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def _post_init_(self) -> None:
        if self.tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise VocabError("vocabulary must start with the reserved tokens")
        index = {token: i for i, token in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise VocabError("vocabulary tokens must be unique")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token(self, id: int) -> str:
        if not 0 <= id < len(self.tokens):
            raise VocabError(f"token id {id} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[id]

    @property
    def digest(self) -> str:
        return stable_hash("\n".join(self.tokens).encode("utf-8"))


def build_vocab(corpus: Iterable["AnnotatedNote | str"], cap: int = 4096) -> Vocab:
    """Keep the ``cap`` most frequent tokens, ties broken lexicographically."""
    if cap < len(RESERVED_TOKENS):
        raise VocabError(
            f"vocabulary cap {cap} is smaller than the {len(RESERVED_TOKENS)} reserved tokens"
        )
    counts = Counter()
    n_texts = 0
    for note in corpus:
        text = note if isinstance(note, str) else note.text
        counts.update(
            token.surface
            for token in tokenize(text)
            if token.surface not in RESERVED_TOKENS
        )
        n_texts += 1
    if n_texts == 0:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda _: (-_[1], _[0]))
    kept = tuple(token for token, _ in ranked[: cap - len(RESERVED_TOKENS)])
    logger.debug("vocabulary keeps %d of %d distinct tokens", len(kept), len(counts))
    return Vocab(tokens=RESERVED_TOKENS + kept)


def save_vocab(path: str | Path, vocab: Vocab) -> None:
    """One token per line; the line number is the id."""
    Path(path).write_text("".join(f"{token}\n" for token in vocab.tokens), encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocab(tokens=tuple(tokens))


@struct(frozen=True)
class TokenSequence:
    """An encoded note.

    ``values`` is aligned with ``ids`` and is 1.0 wherever no number sits.
    ``offsets`` maps each token back to characters of the source text; the
    leading ``[CLS]`` maps to ``(0, 0)``.
    """

    ids: tuple[int, ...]
    values: tuple[float, ...]
    offsets: tuple[tuple[int, int], ...]
    mask_positions: tuple[int, ...] = ()
    y1: tuple[int, ...] = ()
    y2: tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.ids)


def encode(
    text: str,
    vocab: Vocab,
    values: Iterable[float] | None = None,
    max_length: int | None = None,
) -> TokenSequence:
    """Encode text with ``[CLS]`` prepended.

    Digits in the text become ``[NUM]`` tokens carrying their value. Text that
    was already substituted can pass its saved ``values``; they are consumed by
    the ``NUM`` surfaces in order, and any surface without one gets 1.0.
    """
    supplied = iter(values or ())
    ids = [CLS_ID]
    token_values = [1.0]
    offsets = [(0, 0)]
    for token in tokenize(text):
        ids.append(vocab.id(token.surface))
        if token.surface == "[NUM]":
            token_values.append(
                token.value if token.value is not None else next(supplied, 1.0)
            )
        else:
            token_values.append(1.0)
        offsets.append((token.start, token.end))
    if max_length is not None and len(ids) > max_length:
        del ids[max_length:], token_values[max_length:], offsets[max_length:]
    return TokenSequence(ids=tuple(ids), values=tuple(token_values), offsets=tuple(offsets))


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    surfaces = []
    for id in ids:
        token = vocab.token(id)
        if id == PAD_ID or id == CLS_ID:
            continue
        surfaces.append(NUM_SURFACE if id == NUM_ID else token)
    return " ".join(surfaces)


def label_tokens(seq: TokenSequence, note: "AnnotatedNote") -> tuple[int, ...]:
    """Class index for every ``[NUM]`` token inside a gold span, IGNORE_INDEX elsewhere."""
    labels = []
    spans = note.spans
    j = 0
    for id, (start, end) in zip(seq.ids, seq.offsets):
        if id != NUM_ID:
            labels.append(IGNORE_INDEX)
            continue
        while j < len(spans) and spans[j].end <= start:
            j += 1
        if j < len(spans) and spans[j].start <= start and end <= spans[j].end:
            labels.append((spans[j].label or Label.O).index)
        else:
            labels.append(IGNORE_INDEX)
    return tuple(labels)


def mask_for_mlm(
    seq: TokenSequence, rate: float = 0.15, seed: int | np.random.Generator = 0
) -> TokenSequence:
    """Mask each position other than [CLS]/[PAD] independently with probability ``rate``.

    Masked ids become [MASK] and their input value resets to 1.0 so the number
    cannot leak through the value channel. ``y1``/``y2`` hold the original id
    and value of each masked position.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must lie strictly between 0 and 1, not {rate}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.asarray(seq.ids)
    draws = rng.random(len(ids))
    eligible = (ids != CLS_ID) & (ids != PAD_ID)
    positions = np.flatnonzero(eligible & (draws < rate))
    masked_ids = list(seq.ids)
    masked_values = list(seq.values)
    for i in positions:
        masked_ids[i] = MASK_ID
        masked_values[i] = 1.0
    return replace(
        seq,
        ids=tuple(masked_ids),
        values=tuple(masked_values),
        mask_positions=tuple(int(_) for _ in positions),
        y1=tuple(seq.ids[i] for i in positions),
        y2=tuple(seq.values[i] for i in positions),
    )
