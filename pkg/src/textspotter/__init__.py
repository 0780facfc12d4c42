"""Instruction-conditioned scene text spotting at desk scale.

A small end-to-end stack: attribute-based instruction generation from OCR
annotations, a token codec for point+transcription sequences, a toy
encoder-decoder with cross-attention fusion of image and instruction
features, a synthetic bitmap-text renderer, and point-based spotting /
scene-text VQA evaluation.
"""

from textspotter.annotations import AnnotationSet, TextInstance
from textspotter.codec import TokenSequence, Vocabulary, build_vocabulary
from textspotter.instructions import (
    Instruction,
    TemplateId,
    filter_instances,
    instantiate_template,
    parse_instruction,
    predicate_holds,
    sample_instruction,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet",
    "Instruction",
    "TemplateId",
    "TextInstance",
    "TokenSequence",
    "Vocabulary",
    "build_vocabulary",
    "filter_instances",
    "instantiate_template",
    "parse_instruction",
    "predicate_holds",
    "sample_instruction",
]
