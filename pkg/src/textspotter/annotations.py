"""Shared annotation types: a text instance and a per-image annotation set."""

from __future__ import annotations

from dataclasses import dataclass, field

DONT_CARE_SENTINEL = "###"


@dataclass(frozen=True)
class TextInstance:
    """One annotated or predicted text object.

    cx, cy are normalized center coordinates in [0, 1]. A don't-care
    instance is kept in the annotation set but excluded from supervision
    and never penalized at evaluation time.
    """

    cx: float
    cy: float
    transcription: str
    dont_care: bool = False

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"center ({self.cx}, {self.cy}) outside [0,1]^2")
        if self.transcription == "" and not self.dont_care:
            raise ValueError("empty transcription only allowed on don't-care instances")


@dataclass
class AnnotationSet:
    """All text instances annotated on one image."""

    instances: list[TextInstance] = field(default_factory=list)
    image_id: str = ""

    def care_instances(self) -> list[TextInstance]:
        return [inst for inst in self.instances if not inst.dont_care]

    def __len__(self) -> int:
        return len(self.instances)
