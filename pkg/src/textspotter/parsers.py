"""Parsers for real ground-truth formats: ICDAR quads, polygons, VQA JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass

from textspotter.annotations import DONT_CARE_SENTINEL, AnnotationSet, TextInstance
from textspotter.evaluation import normalize_answer


@dataclass
class VqaSample:
    image_id: str
    question: str
    answers: list[str]  # normalized


def _make_instance(xs, ys, transcription, width, height) -> TextInstance | None:
    cx = sum(xs) / len(xs) / width
    cy = sum(ys) / len(ys) / height
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
        return None
    dont_care = transcription == DONT_CARE_SENTINEL
    if not transcription and not dont_care:
        return None
    return TextInstance(cx=cx, cy=cy, transcription=transcription, dont_care=dont_care)


def parse_icdar_gt(
    text_content: str, image_width: int, image_height: int, image_id: str = ""
) -> tuple[AnnotationSet, int]:
    """Parse "x1,y1,...,x4,y4,transcription" lines.

    The center is the mean of the four vertices normalized by the image
    size; "###" marks don't-care. Malformed lines (wrong field count,
    non-numeric coordinates, out-of-bounds center, empty transcription)
    are skipped and counted. A UTF-8 BOM is tolerated.
    """
    instances: list[TextInstance] = []
    skipped = 0
    for raw in text_content.lstrip("﻿").splitlines():
        line = raw.strip().lstrip("﻿")
        if not line:
            continue
        parts = line.split(",", 8)
        if len(parts) != 9:
            skipped += 1
            continue
        try:
            coords = [float(v) for v in parts[:8]]
        except ValueError:
            skipped += 1
            continue
        inst = _make_instance(coords[0::2], coords[1::2], parts[8], image_width, image_height)
        if inst is None:
            skipped += 1
            continue
        instances.append(inst)
    return AnnotationSet(instances=instances, image_id=image_id), skipped


def parse_polygon_gt(
    text_content: str, image_width: int, image_height: int, image_id: str = ""
) -> tuple[AnnotationSet, int]:
    """Parse "x1,y1,...,xk,yk,transcription" polygon lines (k >= 3 points).

    The center is the vertex centroid. Records with an odd coordinate
    count, fewer than six coordinates, or non-numeric coordinates are
    skipped and counted.
    """
    instances: list[TextInstance] = []
    skipped = 0
    for raw in text_content.lstrip("﻿").splitlines():
        line = raw.strip().lstrip("﻿")
        if not line:
            continue
        parts = line.split(",")
        if len(parts) < 7:
            skipped += 1
            continue
        transcription = parts[-1]
        try:
            coords = [float(v) for v in parts[:-1]]
        except ValueError:
            skipped += 1
            continue
        if len(coords) % 2 or len(coords) < 6:
            skipped += 1
            continue
        inst = _make_instance(coords[0::2], coords[1::2], transcription, image_width, image_height)
        if inst is None:
            skipped += 1
            continue
        instances.append(inst)
    return AnnotationSet(instances=instances, image_id=image_id), skipped


def parse_vqa_annotations(json_content: str) -> tuple[list[VqaSample], int]:
    """Parse a JSON array of {image_id, question, answers} records.

    Answers are normalized with the shared VQA normalization. Records
    missing a question or with an empty answers array are skipped and
    counted.
    """
    data = json.loads(json_content)
    if not isinstance(data, list):
        raise ValueError("VQA annotations must be a JSON array")
    samples: list[VqaSample] = []
    skipped = 0
    for rec in data:
        if not isinstance(rec, dict):
            skipped += 1
            continue
        question = rec.get("question")
        answers = rec.get("answers")
        if not question or not isinstance(question, str):
            skipped += 1
            continue
        if not isinstance(answers, list) or not answers or not all(isinstance(a, str) for a in answers):
            skipped += 1
            continue
        samples.append(
            VqaSample(
                image_id=str(rec.get("image_id", "")),
                question=question,
                answers=[normalize_answer(a) for a in answers],
            )
        )
    return samples, skipped
