"""Training loop: instruction-conditioned teacher forcing over a dataset.

Every epoch re-samples one instruction per image (or pins ALL_TEXT when
instruction conditioning is off), filters the annotations with it, and
encodes the surviving instances as the target sequence. Batches are
grouped by target length to avoid padding waste; all randomness is derived
from the run seed, so identical configs reproduce identical loss curves.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np
import torch

from textspotter.codec import Vocabulary, encode_spotting, tokenize_instruction
from textspotter.data import DatasetRecord
from textspotter.instructions import (
    TemplateId,
    filter_instances,
    instantiate_template,
    sample_instruction,
)
from textspotter.model import (
    Batch,
    ModelConfig,
    NumericalError,
    SpottingModel,
    build_model,
    set_text_encoder_frozen,
    train_step,
)


@dataclass
class TrainSettings:
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    seed: int = 0
    instruction_mode: str = "on"  # "on" | "off"
    freeze_text_encoder: bool = False
    shuffle_target_order: bool = False
    log_every: int = 50

    def __post_init__(self):
        if self.instruction_mode not in ("on", "off"):
            raise ValueError("instruction_mode must be 'on' or 'off'")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")


@dataclass
class TrainResult:
    losses: list[float]  # one entry per step
    steps_done: int
    epochs_done: int
    # one record per training triple: image_id, instruction, target_transcriptions
    instruction_log: list[dict] = field(default_factory=list)
    aborted: bool = False


def _mix_seed(seed: int, epoch: int, index: int) -> int:
    return ((seed * 1_000_003 + epoch) * 1_000_003 + index) % (2**63)


def _preload_images(records: list[DatasetRecord]) -> torch.Tensor:
    stack = np.stack([rec.load_image() for rec in records])
    return torch.from_numpy(stack).float().unsqueeze(1)  # (N, 1, H, W)


def make_batch(
    images: torch.Tensor,
    instruction_ids: list[list[int]],
    target_ids: list[list[int]],
    vocab: Vocabulary,
) -> Batch:
    """Pad instructions and targets to the batch maximum and build weights."""
    bsz = images.shape[0]
    li = max(len(t) for t in instruction_ids)
    lt = max(len(t) for t in target_ids)
    instr = torch.full((bsz, li), vocab.pad_id, dtype=torch.long)
    instr_mask = torch.ones((bsz, li), dtype=torch.bool)
    tgt = torch.full((bsz, lt), vocab.pad_id, dtype=torch.long)
    weights = torch.zeros((bsz, lt))
    for i, ids in enumerate(instruction_ids):
        instr[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        instr_mask[i, : len(ids)] = False
    for i, ids in enumerate(target_ids):
        tgt[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        weights[i, 1 : len(ids)] = 1.0  # SOS is never predicted
    return Batch(
        images=images,
        instruction_token_ids=instr,
        target_token_ids=tgt,
        target_weights=weights,
        instruction_padding_mask=instr_mask,
    )


class Trainer:
    def __init__(
        self,
        records: list[DatasetRecord],
        model_cfg: ModelConfig,
        settings: TrainSettings,
        vocab: Vocabulary,
        log=print,
    ):
        if not records:
            raise ValueError("training dataset is empty")
        self.records = records
        self.settings = settings
        self.vocab = vocab
        self.log = log
        self.model = build_model(model_cfg, seed=settings.seed)
        set_text_encoder_frozen(self.model, settings.freeze_text_encoder)
        self.optimizer = torch.optim.AdamW(
            [p for p in self.model.parameters() if p.requires_grad],
            lr=settings.learning_rate,
            weight_decay=settings.weight_decay,
        )
        self.images = _preload_images(records)
        self._all_text = instantiate_template(TemplateId.ALL_TEXT)

    def _epoch_examples(self, epoch: int, rng: random.Random):
        """Materialize (index, instruction_ids, target_ids, instruction_text)."""
        s = self.settings
        examples = []
        for idx, rec in enumerate(self.records):
            if s.instruction_mode == "on":
                instruction = sample_instruction(
                    rec.annotations, _mix_seed(s.seed, epoch, idx)
                )
            else:
                instruction = self._all_text
            targets = filter_instances(instruction, rec.annotations)
            shuffle = (
                random.Random(_mix_seed(s.seed, epoch, idx) ^ 0x5EED)
                if s.shuffle_target_order
                else None
            )
            seq = encode_spotting(targets, self.vocab, shuffle=shuffle)
            examples.append(
                (
                    idx,
                    tokenize_instruction(instruction.canonical_text, self.vocab),
                    seq.tokens,
                    {
                        "image_id": rec.image_id,
                        "instruction": instruction.canonical_text,
                        "target_transcriptions": [t.transcription for t in targets],
                    },
                )
            )
        # group by target length to limit padding, then shuffle batch order
        order = list(range(len(examples)))
        rng.shuffle(order)
        order.sort(key=lambda i: len(examples[i][2]))
        batches = [
            order[i : i + s.batch_size] for i in range(0, len(order), s.batch_size)
        ]
        rng.shuffle(batches)
        return examples, batches

    def train(self) -> TrainResult:
        s = self.settings
        rng = random.Random(s.seed)
        torch.manual_seed(_mix_seed(s.seed, 0, 0))
        result = TrainResult(losses=[], steps_done=0, epochs_done=0)
        self.result = result  # reachable even if a step aborts
        self.best_loss = math.inf
        self.best_state = None
        epoch = 0
        while result.steps_done < s.steps:
            examples, batches = self._epoch_examples(epoch, rng)
            result.instruction_log.extend(ex[3] for ex in examples)
            for batch_indices in batches:
                chosen = [examples[i] for i in batch_indices]
                batch = make_batch(
                    self.images[[c[0] for c in chosen]],
                    [c[1] for c in chosen],
                    [c[2] for c in chosen],
                    self.vocab,
                )
                loss = train_step(self.model, batch, self.optimizer)
                result.losses.append(loss)
                result.steps_done += 1
                if s.log_every and result.steps_done % s.log_every == 0:
                    window = result.losses[-s.log_every :]
                    mean = sum(window) / len(window)
                    self.log(f"step {result.steps_done}/{s.steps} loss {mean:.4f}")
                    if mean < self.best_loss:
                        self.best_loss = mean
                        self.best_state = {
                            k: v.detach().clone()
                            for k, v in self.model.state_dict().items()
                        }
                if result.steps_done >= s.steps:
                    break
            epoch += 1
            result.epochs_done = epoch
        return result


def train_model(
    records: list[DatasetRecord],
    model_cfg: ModelConfig,
    settings: TrainSettings,
    vocab: Vocabulary,
    log=print,
) -> tuple[SpottingModel, TrainResult]:
    trainer = Trainer(records, model_cfg, settings, vocab, log=log)
    result = trainer.train()
    return trainer.model, result
