"""Toy-scale instruction-conditioned spotting network.

Encoder-decoder over token sequences: a convolutional patch embedder plus
transformer encoder for the image, a character-level transformer encoder
for the instruction, a single cross-attention fusion step (visual queries
over instruction keys/values), and an autoregressive transformer decoder
over the fused memory.

Attention is implemented directly (no fused kernels) so that masked
positions contribute exactly zero: causality and the fusion identity hold
with bitwise equality, which the test suite asserts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from textspotter.codec import CapacityError, TokenSequence, Vocabulary

CHECKPOINT_FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    """Loss or parameters left the finite range during training."""


class VocabularyMismatchError(ValueError):
    """Checkpoint was produced with a different vocabulary."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    encoder_layers: int = 3
    decoder_layers: int = 3
    instruction_encoder_layers: int = 2
    image_size: int = 64
    patch_size: int = 8
    patch_embed_dim: int = 32
    max_sequence_length: int = 1622  # >= 2 + 60*27 covers full spotting capacity
    max_instruction_length: int = 64
    vocab_size: int = 1099
    dropout: float = 0.1
    ffn_dim: int = 0  # 0 -> 2*d_model

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.patch_size & (self.patch_size - 1):
            raise ValueError("patch_size must be a power of two")
        if self.vocab_size < 6:
            raise ValueError("vocab_size too small")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim else 2 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Attention(nn.Module):
    """Multi-head attention with explicit masking.

    `attn_mask` is additive (0 or -inf) with shape (Lq, Lk);
    `key_padding_mask` is boolean (B, Lk) with True marking padding.
    """

    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, keyvalue, attn_mask=None, key_padding_mask=None):
        bsz, lq, _ = query.shape
        lk = keyvalue.shape[1]

        def split(x, length):
            return x.view(bsz, length, self.n_heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(query), lq)
        k = split(self.k_proj(keyvalue), lk)
        v = split(self.v_proj(keyvalue), lk)

        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores + attn_mask
        if key_padding_mask is not None:
            scores = scores.masked_fill(
                key_padding_mask[:, None, None, :], float("-inf")
            )
        attn = torch.softmax(scores, dim=-1)
        attn = self.dropout(attn)
        out = (attn @ v).transpose(1, 2).reshape(bsz, lq, -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, width: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, width)
        self.fc2 = nn.Linear(width, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_width, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        x = x + self.dropout(self.attn(h, h, key_padding_mask=key_padding_mask))
        x = x + self.dropout(self.ffn(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    """Pre-norm causal self-attention + cross-attention block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_width, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, causal_mask):
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, attn_mask=causal_mask))
        x = x + self.dropout(self.cross_attn(self.norm2(x), memory))
        x = x + self.dropout(self.ffn(self.norm3(x)))
        return x


class ImageEncoder(nn.Module):
    """Strided conv patch embedder + learned grid positions + transformer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        steps = int(math.log2(cfg.patch_size))
        convs = []
        in_ch = 1
        for i in range(steps):
            out_ch = cfg.d_model if i == steps - 1 else cfg.patch_embed_dim * (2**i)
            convs.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1))
            if i != steps - 1:
                convs.append(nn.GELU())
            in_ch = out_ch
        self.patch_embed = nn.Sequential(*convs)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.grid_size**2, cfg.d_model))
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)
        self.grid_size = cfg.grid_size

    def forward(self, images):
        feats = self.patch_embed(images)  # (B, d, Hg, Wg)
        bsz, d, hg, wg = feats.shape
        if hg * wg != self.pos_embed.shape[0]:
            raise ValueError(
                f"image produces a {hg}x{wg} grid, expected {self.grid_size}x{self.grid_size}"
            )
        x = feats.flatten(2).transpose(1, 2)  # (B, Hg*Wg, d)
        x = self.dropout(x + self.pos_embed)
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class InstructionEncoder(nn.Module):
    """Character-level transformer over instruction tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_instruction_length, cfg.d_model))
        self.layers = nn.ModuleList(
            EncoderLayer(cfg) for _ in range(cfg.instruction_encoder_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, token_ids, padding_mask=None):
        if token_ids.ndim != 2 or token_ids.shape[1] == 0:
            raise ValueError("instruction token batch must be non-empty (B, L>=1)")
        if token_ids.shape[1] > self.pos_embed.shape[0]:
            raise ValueError(
                f"instruction length {token_ids.shape[1]} exceeds "
                f"max_instruction_length {self.pos_embed.shape[0]}"
            )
        x = self.embed(token_ids) + self.pos_embed[: token_ids.shape[1]]
        x = self.dropout(x)
        for layer in self.layers:
            x = layer(x, key_padding_mask=padding_mask)
        return self.norm(x)


class Fusion(nn.Module):
    """Visual queries attend over instruction features; residual + norm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, visual, instruction, instruction_padding_mask=None):
        if visual.shape[-1] != instruction.shape[-1]:
            raise ValueError("visual and instruction features must share d_model")
        attended = self.attn(visual, instruction, key_padding_mask=instruction_padding_mask)
        return self.norm(visual + attended)


class SpottingModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.instruction_encoder = InstructionEncoder(cfg)
        self.fusion = Fusion(cfg)
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.dec_pos_embed = nn.Parameter(torch.zeros(cfg.max_sequence_length, cfg.d_model))
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(cfg) for _ in range(cfg.decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(cfg.d_model)
        self.output_proj = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.dropout = nn.Dropout(cfg.dropout)
        self._init_weights()

    def _init_weights(self):
        for emb in (self.token_embed, self.instruction_encoder.embed):
            nn.init.normal_(emb.weight, std=0.02)
        for pos in (
            self.dec_pos_embed,
            self.instruction_encoder.pos_embed,
            self.image_encoder.pos_embed,
        ):
            nn.init.normal_(pos, std=0.02)
        # near-uniform initial distribution so untrained loss ~= ln(vocab)
        nn.init.normal_(self.output_proj.weight, std=0.02)
        nn.init.zeros_(self.output_proj.bias)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) pixels -> (B, grid*grid, d_model) features."""
        return self.image_encoder(images)

    def encode_instruction(self, token_ids, padding_mask=None) -> torch.Tensor:
        return self.instruction_encoder(token_ids, padding_mask)

    def fuse(self, visual, instruction, instruction_padding_mask=None) -> torch.Tensor:
        return self.fusion(visual, instruction, instruction_padding_mask)

    def build_memory(self, images, instruction_tokens, instruction_padding_mask=None):
        visual = self.encode_image(images)
        instr = self.encode_instruction(instruction_tokens, instruction_padding_mask)
        return self.fuse(visual, instr, instruction_padding_mask)

    def decode(self, memory, token_ids) -> torch.Tensor:
        """Next-token logits at every input position."""
        length = token_ids.shape[1]
        if length > self.cfg.max_sequence_length:
            raise CapacityError(
                f"sequence length {length} exceeds max_sequence_length "
                f"{self.cfg.max_sequence_length}"
            )
        x = self.token_embed(token_ids) + self.dec_pos_embed[:length]
        x = self.dropout(x)
        causal = torch.full(
            (length, length), float("-inf"), dtype=x.dtype, device=x.device
        ).triu(1)
        for layer in self.decoder_layers:
            x = layer(x, memory, causal)
        return self.output_proj(self.decoder_norm(x))

    def forward(self, images, instruction_tokens, decoder_tokens, instruction_padding_mask=None):
        memory = self.build_memory(images, instruction_tokens, instruction_padding_mask)
        return self.decode(memory, decoder_tokens)


def build_model(cfg: ModelConfig, seed: int = 0) -> SpottingModel:
    """Construct a model with seeded, reproducible initialization."""
    torch.manual_seed(seed)
    return SpottingModel(cfg)


def set_text_encoder_frozen(model: SpottingModel, frozen: bool) -> None:
    """Freeze or unfreeze the instruction encoder (embeddings included)."""
    for p in model.instruction_encoder.parameters():
        p.requires_grad_(not frozen)


def forward_teacher_forced(model: SpottingModel, batch: "Batch") -> torch.Tensor:
    """Logits (B, L, vocab); position i sees target tokens 0..i only."""
    return model(
        batch.images,
        batch.instruction_token_ids,
        batch.target_token_ids,
        batch.instruction_padding_mask,
    )


@dataclass
class Batch:
    """One training batch.

    target_weights holds 1.0 where a target token is supervised and 0.0 on
    positions after EOS (batch padding) and on the leading SOS. In-frame
    PAD tokens are part of the target language and stay supervised.
    """

    images: torch.Tensor  # (B, 1, H, W)
    instruction_token_ids: torch.Tensor  # (B, Li)
    target_token_ids: torch.Tensor  # (B, Lt)
    target_weights: torch.Tensor  # (B, Lt)
    instruction_padding_mask: torch.Tensor | None = None  # (B, Li), True = pad


def sequence_loss(logits, targets, weights) -> torch.Tensor:
    """Weighted mean negative log-likelihood over supervised positions.

    Tensors are aligned: logits[:, i] scores targets[:, i] with weight
    weights[:, i]. Raises on an all-zero weight mask.
    """
    if logits.shape[:2] != targets.shape or targets.shape != weights.shape:
        raise ValueError("logits/targets/weights shapes disagree")
    total_weight = weights.sum()
    if total_weight.item() == 0:
        raise ValueError("all-zero weights: loss mean undefined")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (nll * weights).sum() / total_weight


def batch_loss(model: SpottingModel, batch: Batch) -> torch.Tensor:
    """Teacher-forced loss: logits at i predict target token i+1."""
    logits = forward_teacher_forced(model, batch)
    return sequence_loss(
        logits[:, :-1], batch.target_token_ids[:, 1:], batch.target_weights[:, 1:]
    )


def train_step(model: SpottingModel, batch: Batch, optimizer) -> float:
    """One optimization step; aborts with diagnostics on non-finite loss."""
    model.train()
    loss = batch_loss(model, batch)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(
            f"non-finite loss {value} (batch of {batch.images.shape[0]}, "
            f"target length {batch.target_token_ids.shape[1]})"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericalError(f"non-finite parameter {name} after optimizer step")
    return value


@torch.no_grad()
def greedy_decode_batch(
    model: SpottingModel,
    images: torch.Tensor,
    instruction_tokens: torch.Tensor,
    max_len: int,
    vocab: Vocabulary,
    instruction_padding_mask=None,
) -> list[TokenSequence]:
    """Greedy decoding for a batch; each output starts with SOS and stops
    at EOS or when the total length reaches max_len."""
    if max_len > model.cfg.max_sequence_length:
        raise CapacityError("max_len exceeds max_sequence_length")
    model.eval()
    bsz = images.shape[0]
    memory = model.build_memory(images, instruction_tokens, instruction_padding_mask)
    tokens = torch.full((bsz, 1), vocab.sos_id, dtype=torch.long, device=images.device)
    finished = torch.zeros(bsz, dtype=torch.bool)
    while tokens.shape[1] < max_len and not bool(finished.all()):
        logits = model.decode(memory, tokens)
        next_tok = logits[:, -1].argmax(dim=-1)
        next_tok = torch.where(
            finished, torch.full_like(next_tok, vocab.pad_id), next_tok
        )
        tokens = torch.cat([tokens, next_tok[:, None]], dim=1)
        finished |= next_tok == vocab.eos_id
    out = []
    for row in tokens.tolist():
        seq = [row[0]]
        for tok in row[1:]:
            seq.append(tok)
            if tok == vocab.eos_id:
                break
        out.append(TokenSequence(tokens=seq, kind="spotting"))
    return out


def greedy_decode(
    model: SpottingModel,
    image: torch.Tensor,
    instruction_tokens: list[int],
    max_len: int,
    vocab: Vocabulary,
) -> TokenSequence:
    """Single-image greedy decode; `image` is (H, W) or (1, H, W)."""
    if image.ndim == 2:
        image = image[None]
    instr = torch.tensor([instruction_tokens], dtype=torch.long)
    return greedy_decode_batch(model, image[None], instr, max_len, vocab)[0]


def save_checkpoint(
    path,
    model: SpottingModel,
    vocab: Vocabulary,
    seed: int,
    extra: dict | None = None,
) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_config": model.cfg.to_dict(),
            "vocab_manifest": vocab.to_manifest(),
            "state_dict": model.state_dict(),
            "seed": seed,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(
    path, expected_vocab: Vocabulary | None = None
) -> tuple[SpottingModel, Vocabulary, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    vocab = Vocabulary.from_manifest(payload["vocab_manifest"])
    if expected_vocab is not None and vocab.to_manifest() != expected_vocab.to_manifest():
        raise VocabularyMismatchError(
            "checkpoint vocabulary differs from the expected vocabulary"
        )
    cfg = ModelConfig.from_dict(payload["model_config"])
    model = SpottingModel(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, vocab, payload
