"""Batched greedy inference over a dataset plus the prediction file format.

Prediction files are JSON lines of {"image_id": ..., "instances":
[{"x": ..., "y": ..., "transcription": ...}]} with normalized coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from textspotter.annotations import TextInstance
from textspotter.codec import (
    FRAME_LEN,
    Vocabulary,
    decode_spotting,
    tokenize_instruction,
)
from textspotter.data import DatasetRecord
from textspotter.model import SpottingModel, greedy_decode_batch

DEFAULT_MAX_DECODE_LEN = 2 + 6 * FRAME_LEN  # room to overshoot small scenes


@dataclass
class ImagePrediction:
    image_id: str
    instances: list[TextInstance]
    malformed: int = 0


def predict_records(
    model: SpottingModel,
    records: list[DatasetRecord],
    instruction_texts: list[str],
    vocab: Vocabulary,
    batch_size: int = 32,
    max_len: int = DEFAULT_MAX_DECODE_LEN,
) -> list[ImagePrediction]:
    """Greedy-decode every record with its paired instruction text."""
    if len(records) != len(instruction_texts):
        raise ValueError("records and instruction_texts must align")
    model.eval()
    out: list[ImagePrediction] = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        instrs = instruction_texts[start : start + batch_size]
        images = torch.from_numpy(
            np.stack([rec.load_image() for rec in chunk])
        ).float().unsqueeze(1)
        token_lists = [tokenize_instruction(text, vocab) for text in instrs]
        li = max(len(t) for t in token_lists)
        instr = torch.full((len(chunk), li), vocab.pad_id, dtype=torch.long)
        mask = torch.ones((len(chunk), li), dtype=torch.bool)
        for i, ids in enumerate(token_lists):
            instr[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
            mask[i, : len(ids)] = False
        sequences = greedy_decode_batch(model, images, instr, max_len, vocab, mask)
        for rec, seq in zip(chunk, sequences):
            instances, malformed = decode_spotting(seq, vocab)
            out.append(
                ImagePrediction(
                    image_id=rec.image_id, instances=instances, malformed=malformed
                )
            )
    return out


def write_predictions(path, predictions: list[ImagePrediction]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for pred in predictions:
            record = {
                "image_id": pred.image_id,
                "instances": [
                    {"x": t.cx, "y": t.cy, "transcription": t.transcription}
                    for t in pred.instances
                ],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_predictions(path) -> list[ImagePrediction]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            instances = [
                TextInstance(
                    cx=r["x"], cy=r["y"], transcription=r["transcription"]
                )
                for r in rec["instances"]
            ]
            out.append(ImagePrediction(image_id=rec["image_id"], instances=instances))
    return out
