"""Synthetic scene-text rendering and training-triple construction.

Images are square grayscale canvases with words stamped from the built-in
5x7 bitmap font at non-overlapping positions, plus additive uniform noise.
Every sample is a pure function of (config, index), so datasets are
reproducible and shardable across workers.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from textspotter.annotations import AnnotationSet, TextInstance
from textspotter.codec import TokenSequence, Vocabulary, encode_spotting
from textspotter.glyphs import GLYPH_ROWS, supported_characters, word_stamp
from textspotter.instructions import Instruction, filter_instances, sample_instruction

PLACEMENT_TRIES = 40

INDEX_NAME = "index.jsonl"
MANIFEST_NAME = "manifest.json"
IMAGE_DIR = "images"


@dataclass(frozen=True)
class SyntheticConfig:
    canvas_size: int = 64
    lexicon: tuple[str, ...] = ()
    instances_min: int = 1
    instances_max: int = 3
    glyph_size: int = 10  # character cell width in pixels, multiple of 5
    noise_level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.lexicon:
            raise ValueError("lexicon must be non-empty")
        if self.glyph_size < 5 or self.glyph_size % 5:
            raise ValueError("glyph_size must be a positive multiple of 5")
        if not 0 <= self.instances_min <= self.instances_max:
            raise ValueError("invalid instances_per_image range")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")
        charset = set(supported_characters())
        for word in self.lexicon:
            if not word or any(ch not in charset for ch in word):
                raise ValueError(f"lexicon word {word!r} has unsupported characters")
        max_len = max(len(w) for w in self.lexicon)
        if self.glyph_size * max_len > self.canvas_size:
            raise ValueError("glyph_size * max word length exceeds canvas_size")
        scale = self.scale
        if (6 * max_len - 1) * scale > self.canvas_size or GLYPH_ROWS * scale > self.canvas_size:
            raise ValueError("longest lexicon word does not fit the canvas")

    @property
    def scale(self) -> int:
        return self.glyph_size // 5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lexicon"] = list(self.lexicon)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        d["lexicon"] = tuple(d["lexicon"])
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    annotations: AnnotationSet
    source: str = "synthetic"


@dataclass
class TrainingTriple:
    instruction: Instruction
    image_id: str
    target_sequence: TokenSequence


def _boxes_overlap(a, b, margin: int) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return (
        ax < bx + bw + margin
        and bx < ax + aw + margin
        and ay < by + bh + margin
        and by < ay + ah + margin
    )


def render_sample(config: SyntheticConfig, index: int) -> Sample:
    """Render one sample deterministically from (config.seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    size = config.canvas_size
    canvas = np.zeros((size, size), dtype=np.float32)
    scale = config.scale

    n = int(rng.integers(config.instances_min, config.instances_max + 1))
    placed: list[tuple[int, int, int, int]] = []
    instances: list[TextInstance] = []
    for _ in range(n):
        word = config.lexicon[int(rng.integers(len(config.lexicon)))]
        stamp = word_stamp(word, scale)
        h, w = stamp.shape
        for _ in range(PLACEMENT_TRIES):
            x = int(rng.integers(0, size - w + 1))
            y = int(rng.integers(0, size - h + 1))
            box = (x, y, w, h)
            if not any(_boxes_overlap(box, other, scale) for other in placed):
                canvas[y : y + h, x : x + w] = stamp
                placed.append(box)
                instances.append(
                    TextInstance(
                        cx=(x + w / 2) / size,
                        cy=(y + h / 2) / size,
                        transcription=word,
                    )
                )
                break
        # on placement failure the instance is dropped

    if config.noise_level > 0:
        noise = rng.uniform(-config.noise_level, config.noise_level, canvas.shape)
        canvas = np.clip(canvas + noise.astype(np.float32), 0.0, 1.0)

    return Sample(
        image=canvas,
        annotations=AnnotationSet(instances=instances, image_id=f"synth-{index:06d}"),
        source="synthetic",
    )


def make_training_triple(
    sample: Sample, seed: int, vocab: Vocabulary, shuffle=None
) -> TrainingTriple:
    """Pair a sampled instruction with its filtered, encoded target."""
    instruction = sample_instruction(sample.annotations, seed)
    targets = filter_instances(instruction, sample.annotations)
    return TrainingTriple(
        instruction=instruction,
        image_id=sample.annotations.image_id,
        target_sequence=encode_spotting(targets, vocab, shuffle=shuffle),
    )


# --- dataset directory layout -------------------------------------------------


def _instance_record(inst: TextInstance) -> dict:
    return {
        "cx": inst.cx,
        "cy": inst.cy,
        "transcription": inst.transcription,
        "dont_care": inst.dont_care,
    }


def _instance_from_record(rec: dict) -> TextInstance:
    return TextInstance(
        cx=rec["cx"],
        cy=rec["cy"],
        transcription=rec["transcription"],
        dont_care=rec.get("dont_care", False),
    )


def write_dataset(config: SyntheticConfig, num_images: int, out_dir: str) -> str:
    """Render and persist a dataset: PNGs, a JSONL index, and a manifest."""
    image_dir = os.path.join(out_dir, IMAGE_DIR)
    os.makedirs(image_dir, exist_ok=True)
    index_path = os.path.join(out_dir, INDEX_NAME)
    with open(index_path, "w", encoding="utf-8") as index:
        for i in range(num_images):
            sample = render_sample(config, i)
            name = f"{sample.annotations.image_id}.png"
            pixels = np.round(sample.image * 255).astype(np.uint8)
            Image.fromarray(pixels, mode="L").save(os.path.join(image_dir, name))
            record = {
                "image_id": sample.annotations.image_id,
                "file": f"{IMAGE_DIR}/{name}",
                "instances": [_instance_record(t) for t in sample.annotations.instances],
            }
            index.write(json.dumps(record, sort_keys=True) + "\n")
    manifest = {
        "format_version": 1,
        "num_images": num_images,
        "synthetic_config": config.to_dict(),
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return index_path


@dataclass
class DatasetRecord:
    image_id: str
    image_path: str
    annotations: AnnotationSet

    def load_image(self) -> np.ndarray:
        with Image.open(self.image_path) as img:
            return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def load_dataset(root: str) -> list[DatasetRecord]:
    index_path = os.path.join(root, INDEX_NAME)
    records = []
    with open(index_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            instances = [_instance_from_record(r) for r in rec["instances"]]
            records.append(
                DatasetRecord(
                    image_id=rec["image_id"],
                    image_path=os.path.join(root, rec["file"]),
                    annotations=AnnotationSet(instances=instances, image_id=rec["image_id"]),
                )
            )
    return records


def load_manifest(root: str) -> dict:
    with open(os.path.join(root, MANIFEST_NAME), encoding="utf-8") as f:
        return json.load(f)
