"""Attribute-based instruction generation and filter semantics.

Ten fixed templates over text attributes (length, letter containment,
casing, numeric content, explicit word lists). Each instruction renders to
a canonical English string, parses back exactly, and induces a pure
predicate over transcriptions used to select supervision targets.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from enum import Enum

from textspotter.annotations import AnnotationSet, TextInstance

MAX_TRANSCRIPTION_LEN = 25
MAX_SAMPLED_WORDS = 3


class TemplateId(Enum):
    ALL_TEXT = "all_text"
    LENGTH_EQ = "length_eq"
    CONTAINS_LETTER = "contains_letter"
    STARTS_WITH_LETTER = "starts_with_letter"
    ENDS_WITH_LETTER = "ends_with_letter"
    STARTS_CAPITAL = "starts_capital"
    ALL_UPPERCASE = "all_uppercase"
    ALL_LOWERCASE = "all_lowercase"
    NUMERIC_ONLY = "numeric_only"
    RECOGNIZE_WORDS = "recognize_words"


# parameter_kind per template: none | "n" (positive integer) | "c" (single
# ASCII letter) | "words" (non-empty word list)
TEMPLATE_PARAM_KIND = {
    TemplateId.ALL_TEXT: "none",
    TemplateId.LENGTH_EQ: "n",
    TemplateId.CONTAINS_LETTER: "c",
    TemplateId.STARTS_WITH_LETTER: "c",
    TemplateId.ENDS_WITH_LETTER: "c",
    TemplateId.STARTS_CAPITAL: "none",
    TemplateId.ALL_UPPERCASE: "none",
    TemplateId.ALL_LOWERCASE: "none",
    TemplateId.NUMERIC_ONLY: "none",
    TemplateId.RECOGNIZE_WORDS: "words",
}

_FIXED_RENDERINGS = {
    TemplateId.ALL_TEXT: "Recognize all text",
    TemplateId.STARTS_CAPITAL: "Recognize the text that starts with a capital letter",
    TemplateId.ALL_UPPERCASE: "Recognize the text in uppercase",
    TemplateId.ALL_LOWERCASE: "Recognize the text in lowercase",
    TemplateId.NUMERIC_ONLY: "Recognize the text that contains only digits",
}

_LENGTH_RE = re.compile(r"^Recognize text of length ([1-9]\d*)$")
_CONTAINS_RE = re.compile(r"^Recognize the text that contains the letter ([A-Za-z])$")
_STARTS_RE = re.compile(r"^Recognize the text that starts with the letter ([A-Za-z])$")
_ENDS_RE = re.compile(r"^Recognize the text that ends with the letter ([A-Za-z])$")
# word lists are comma-space separated; words themselves never contain spaces
_WORDS_RE = re.compile(r"^Recognize the words? (.+)$")


class InvalidParameterError(ValueError):
    """Parameters do not match the template's parameter kind."""


class ParameterOutOfRangeError(ValueError):
    """Integer parameter outside [1, MAX_TRANSCRIPTION_LEN]."""


@dataclass(frozen=True)
class Instruction:
    """A template id plus concrete parameters and the canonical rendering."""

    template_id: TemplateId
    n: int | None = None
    c: str | None = None
    words: tuple[str, ...] | None = None
    canonical_text: str = field(default="", compare=False)

    @property
    def is_all_text(self) -> bool:
        return self.template_id is TemplateId.ALL_TEXT


def _render(template_id: TemplateId, n, c, words) -> str:
    if template_id in _FIXED_RENDERINGS:
        return _FIXED_RENDERINGS[template_id]
    if template_id is TemplateId.LENGTH_EQ:
        return f"Recognize text of length {n}"
    if template_id is TemplateId.CONTAINS_LETTER:
        return f"Recognize the text that contains the letter {c}"
    if template_id is TemplateId.STARTS_WITH_LETTER:
        return f"Recognize the text that starts with the letter {c}"
    if template_id is TemplateId.ENDS_WITH_LETTER:
        return f"Recognize the text that ends with the letter {c}"
    if template_id is TemplateId.RECOGNIZE_WORDS:
        noun = "word" if len(words) == 1 else "words"
        return f"Recognize the {noun} " + ", ".join(words)
    raise AssertionError(template_id)


def instantiate_template(
    template_id: TemplateId,
    n: int | None = None,
    c: str | None = None,
    words: list[str] | tuple[str, ...] | None = None,
) -> Instruction:
    """Build an Instruction, validating parameters against the template."""
    kind = TEMPLATE_PARAM_KIND[template_id]
    given = {k for k, v in (("n", n), ("c", c), ("words", words)) if v is not None}
    expected = set() if kind == "none" else {kind}
    if given != expected:
        raise InvalidParameterError(
            f"template {template_id.value} expects parameter kind '{kind}', got {sorted(given) or 'none'}"
        )
    if kind == "n":
        if not isinstance(n, int) or isinstance(n, bool):
            raise InvalidParameterError(f"n must be an integer, got {n!r}")
        if not (1 <= n <= MAX_TRANSCRIPTION_LEN):
            raise ParameterOutOfRangeError(
                f"n={n} outside [1, {MAX_TRANSCRIPTION_LEN}]"
            )
    if kind == "c":
        if not (isinstance(c, str) and len(c) == 1 and c.isascii() and c.isalpha()):
            raise InvalidParameterError(f"c must be a single ASCII letter, got {c!r}")
    if kind == "words":
        words = tuple(words)
        if not words:
            raise InvalidParameterError("word list must be non-empty")
        for w in words:
            if not w or any(ch.isspace() for ch in w):
                raise InvalidParameterError(f"invalid word {w!r}: empty or contains whitespace")
    return Instruction(
        template_id=template_id,
        n=n,
        c=c,
        words=words,
        canonical_text=_render(template_id, n, c, words),
    )


def parse_instruction(text: str) -> Instruction:
    """Inverse of the canonical rendering. Raises ValueError on unknown text."""
    for tid, rendering in _FIXED_RENDERINGS.items():
        if text == rendering:
            return instantiate_template(tid)
    if m := _LENGTH_RE.match(text):
        return instantiate_template(TemplateId.LENGTH_EQ, n=int(m.group(1)))
    if m := _CONTAINS_RE.match(text):
        return instantiate_template(TemplateId.CONTAINS_LETTER, c=m.group(1))
    if m := _STARTS_RE.match(text):
        return instantiate_template(TemplateId.STARTS_WITH_LETTER, c=m.group(1))
    if m := _ENDS_RE.match(text):
        return instantiate_template(TemplateId.ENDS_WITH_LETTER, c=m.group(1))
    if m := _WORDS_RE.match(text):
        return instantiate_template(
            TemplateId.RECOGNIZE_WORDS, words=m.group(1).split(", ")
        )
    raise ValueError(f"not a canonical instruction: {text!r}")


def predicate_holds(instruction: Instruction, transcription: str) -> bool:
    """Whether a transcription satisfies the instruction.

    Total over all strings; the empty string satisfies only ALL_TEXT.
    Letter templates match case-insensitively, casing templates are
    inherently case-sensitive, word lists match exactly.
    """
    t = transcription
    tid = instruction.template_id
    if tid is TemplateId.ALL_TEXT:
        return True
    if not t:
        return False
    if tid is TemplateId.LENGTH_EQ:
        return len(t) == instruction.n
    if tid is TemplateId.CONTAINS_LETTER:
        return instruction.c.lower() in t.lower()
    if tid is TemplateId.STARTS_WITH_LETTER:
        return t[0].lower() == instruction.c.lower()
    if tid is TemplateId.ENDS_WITH_LETTER:
        return t[-1].lower() == instruction.c.lower()
    if tid is TemplateId.STARTS_CAPITAL:
        return "A" <= t[0] <= "Z"
    if tid is TemplateId.ALL_UPPERCASE:
        letters = [ch for ch in t if ("a" <= ch <= "z") or ("A" <= ch <= "Z")]
        return bool(letters) and all("A" <= ch <= "Z" for ch in letters)
    if tid is TemplateId.ALL_LOWERCASE:
        letters = [ch for ch in t if ("a" <= ch <= "z") or ("A" <= ch <= "Z")]
        return bool(letters) and all("a" <= ch <= "z" for ch in letters)
    if tid is TemplateId.NUMERIC_ONLY:
        return all("0" <= ch <= "9" for ch in t)
    if tid is TemplateId.RECOGNIZE_WORDS:
        return t in instruction.words
    raise AssertionError(tid)


def filter_instances(
    instruction: Instruction, annotations: AnnotationSet
) -> list[TextInstance]:
    """Non-don't-care instances satisfying the instruction, input order kept."""
    return [
        inst
        for inst in annotations.instances
        if not inst.dont_care and predicate_holds(instruction, inst.transcription)
    ]


def _candidate_instructions(transcriptions: list[str]) -> list[Instruction]:
    """All instantiable instructions with a non-empty target set.

    Parameters are drawn from annotation content only, so every candidate
    accepts at least one of the given transcriptions by construction.
    """
    out = [instantiate_template(TemplateId.ALL_TEXT)]

    lengths = sorted({len(t) for t in transcriptions if 1 <= len(t) <= MAX_TRANSCRIPTION_LEN})
    out.extend(instantiate_template(TemplateId.LENGTH_EQ, n=n) for n in lengths)

    contained = sorted({ch.lower() for t in transcriptions for ch in t if ch.isascii() and ch.isalpha()})
    out.extend(instantiate_template(TemplateId.CONTAINS_LETTER, c=c) for c in contained)

    initials = sorted({t[0].lower() for t in transcriptions if t and t[0].isascii() and t[0].isalpha()})
    out.extend(instantiate_template(TemplateId.STARTS_WITH_LETTER, c=c) for c in initials)

    finals = sorted({t[-1].lower() for t in transcriptions if t and t[-1].isascii() and t[-1].isalpha()})
    out.extend(instantiate_template(TemplateId.ENDS_WITH_LETTER, c=c) for c in finals)

    for tid in (
        TemplateId.STARTS_CAPITAL,
        TemplateId.ALL_UPPERCASE,
        TemplateId.ALL_LOWERCASE,
        TemplateId.NUMERIC_ONLY,
    ):
        inst = instantiate_template(tid)
        if any(predicate_holds(inst, t) for t in transcriptions):
            out.append(inst)
    return out


def sample_instruction(annotations: AnnotationSet, seed: int) -> Instruction:
    """Deterministically sample an instruction with a non-empty target set.

    A template is drawn uniformly among the ten, then parameters come from
    the annotation content. Templates that cannot select any instance of
    this annotation set are excluded up front, so the filtered target set
    is non-empty whenever at least one non-don't-care instance exists.
    Empty or all-don't-care annotation sets yield ALL_TEXT.
    """
    transcriptions = [
        inst.transcription
        for inst in annotations.instances
        if not inst.dont_care and inst.transcription
    ]
    if not transcriptions:
        return instantiate_template(TemplateId.ALL_TEXT)

    rng = random.Random(seed)
    candidates = _candidate_instructions(transcriptions)
    available = sorted({c.template_id.value for c in candidates})
    # word-list template always applies; it is built lazily below
    available.append(TemplateId.RECOGNIZE_WORDS.value)
    chosen = TemplateId(rng.choice(available))

    if chosen is TemplateId.RECOGNIZE_WORDS:
        # words must be space-free to round-trip through the canonical text
        vocab = sorted({t for t in transcriptions if not any(ch.isspace() for ch in t)})
        if not vocab:
            return instantiate_template(TemplateId.ALL_TEXT)
        k = rng.randint(1, min(MAX_SAMPLED_WORDS, len(vocab)))
        return instantiate_template(
            TemplateId.RECOGNIZE_WORDS, words=rng.sample(vocab, k)
        )
    return rng.choice([c for c in candidates if c.template_id is chosen])
