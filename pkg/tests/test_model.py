import math
import random

import numpy as np
import pytest
import torch

from textspotter.codec import build_vocabulary, tokenize_instruction
from textspotter.model import (
    Batch,
    ModelConfig,
    NumericalError,
    VocabularyMismatchError,
    batch_loss,
    build_model,
    forward_teacher_forced,
    greedy_decode,
    greedy_decode_batch,
    load_checkpoint,
    save_checkpoint,
    sequence_loss,
    set_text_encoder_frozen,
    train_step,
)
from textspotter.training import make_batch


def tiny_config(vocab, **overrides):
    base = dict(
        d_model=16,
        n_heads=2,
        encoder_layers=1,
        decoder_layers=1,
        instruction_encoder_layers=1,
        image_size=16,
        patch_size=8,
        patch_embed_dim=8,
        max_sequence_length=48,
        max_instruction_length=32,
        vocab_size=vocab.size,
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(vocab, cfg, bsz=2, tgt_len=12, seed=0):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(bsz, 1, cfg.image_size, cfg.image_size, generator=g)
    instr = torch.tensor([tokenize_instruction("Recognize all text", vocab)] * bsz)
    tgt = torch.randint(0, cfg.vocab_size, (bsz, tgt_len), generator=g)
    tgt[:, 0] = vocab.sos_id
    weights = torch.ones(bsz, tgt_len)
    weights[:, 0] = 0.0
    return Batch(
        images=images,
        instruction_token_ids=instr,
        target_token_ids=tgt,
        target_weights=weights,
    )


@pytest.fixture(scope="module")
def setup():
    vocab = build_vocabulary()
    cfg = tiny_config(vocab)
    model = build_model(cfg, seed=0)
    model.eval()
    return vocab, cfg, model


# --- encoders ------------------------------------------------------------------


def test_image_encoder_shape(setup):
    vocab, cfg, model = setup
    feats = model.encode_image(torch.rand(3, 1, 16, 16))
    assert feats.shape == (3, 4, cfg.d_model)  # 16/8 = 2x2 grid


def test_image_encoder_grid_arithmetic(vocab):
    cfg = ModelConfig(
        d_model=16, n_heads=2, encoder_layers=1, decoder_layers=1,
        instruction_encoder_layers=1, image_size=64, patch_size=8,
        patch_embed_dim=8, max_sequence_length=32, vocab_size=vocab.size, dropout=0.0,
    )
    model = build_model(cfg, seed=0).eval()
    feats = model.encode_image(torch.rand(1, 1, 64, 64))
    assert feats.shape == (1, 64, 16)  # 8x8 grid of d_model vectors


def test_image_encoder_deterministic_and_finite(setup):
    _, _, model = setup
    img = torch.rand(1, 1, 16, 16)
    a = model.encode_image(img)
    b = model.encode_image(img.clone())
    assert torch.equal(a, b)
    z = model.encode_image(torch.zeros(1, 1, 16, 16))
    assert torch.isfinite(z).all()


def test_image_encoder_rejects_wrong_size(setup):
    _, _, model = setup
    with pytest.raises(ValueError):
        model.encode_image(torch.rand(1, 1, 32, 32))


def test_instruction_encoder_shape_and_determinism(setup):
    vocab, cfg, model = setup
    ids = torch.tensor([tokenize_instruction("Recognize all text", vocab)])
    out = model.encode_instruction(ids)
    assert out.shape == (1, ids.shape[1], cfg.d_model)
    assert torch.equal(out, model.encode_instruction(ids.clone()))


def test_instruction_encoder_rejects_empty(setup):
    _, _, model = setup
    with pytest.raises(ValueError):
        model.encode_instruction(torch.zeros(1, 0, dtype=torch.long))


def test_instruction_encoder_receives_gradient(setup):
    vocab, cfg, _ = setup
    model = build_model(cfg, seed=1)
    model.train()
    batch = random_batch(vocab, cfg)
    loss = batch_loss(model, batch)
    loss.backward()
    norms = [
        p.grad.norm().item()
        for p in model.instruction_encoder.parameters()
        if p.grad is not None
    ]
    assert norms and sum(norms) > 0


def test_freeze_text_encoder(setup):
    vocab, cfg, _ = setup
    model = build_model(cfg, seed=1)
    set_text_encoder_frozen(model, True)
    assert all(not p.requires_grad for p in model.instruction_encoder.parameters())
    assert model.token_embed.weight.requires_grad
    set_text_encoder_frozen(model, False)
    assert all(p.requires_grad for p in model.instruction_encoder.parameters())


# --- fusion ----------------------------------------------------------------------


def test_fuse_preserves_visual_shape(setup):
    vocab, cfg, model = setup
    v = model.encode_image(torch.rand(2, 1, 16, 16))
    t = model.encode_instruction(
        torch.tensor([tokenize_instruction("Recognize all text", vocab)] * 2)
    )
    fused = model.fuse(v, t)
    assert fused.shape == v.shape


def test_fuse_zeroed_projection_is_instruction_independent(setup):
    vocab, cfg, _ = setup
    model = build_model(cfg, seed=3).eval()
    with torch.no_grad():
        model.fusion.attn.out_proj.weight.zero_()
        model.fusion.attn.out_proj.bias.zero_()
    img = torch.rand(1, 1, 16, 16)
    v = model.encode_image(img)
    t1 = model.encode_instruction(torch.tensor([tokenize_instruction("Recognize all text", vocab)]))
    t2 = model.encode_instruction(torch.tensor([tokenize_instruction("Recognize text of length 9", vocab)]))
    f1 = model.fuse(v, t1)
    f2 = model.fuse(v, t2)
    assert torch.equal(f1, f2)
    assert torch.equal(f1, model.fusion.norm(v))


def test_fuse_depends_on_instruction_generically(setup):
    vocab, cfg, _ = setup
    model = build_model(cfg, seed=4).eval()
    img = torch.rand(1, 1, 16, 16)
    v = model.encode_image(img)
    t1 = model.encode_instruction(torch.tensor([tokenize_instruction("Recognize all text", vocab)]))
    t2 = model.encode_instruction(torch.tensor([tokenize_instruction("Recognize text of length 9", vocab)]))
    diff = (model.fuse(v, t1) - model.fuse(v, t2)).abs().max().item()
    assert diff > 0


def test_fuse_dim_mismatch(setup):
    _, _, model = setup
    with pytest.raises(ValueError):
        model.fuse(torch.rand(1, 4, 16), torch.rand(1, 3, 8))


# --- teacher forcing ---------------------------------------------------------------


def test_logits_shape(setup):
    vocab, cfg, model = setup
    batch = random_batch(vocab, cfg, bsz=3, tgt_len=10)
    logits = forward_teacher_forced(model, batch)
    assert logits.shape == (3, 10, cfg.vocab_size)


def test_causality_exact(setup):
    vocab, cfg, model = setup
    rng = random.Random(0)
    for trial in range(10):
        batch = random_batch(vocab, cfg, bsz=2, tgt_len=14, seed=trial)
        with torch.no_grad():
            base = forward_teacher_forced(model, batch)
            j = rng.randint(0, 12)
            mutated = batch.target_token_ids.clone()
            mutated[:, j + 1] = (mutated[:, j + 1] + 11) % cfg.vocab_size
            batch2 = Batch(
                images=batch.images,
                instruction_token_ids=batch.instruction_token_ids,
                target_token_ids=mutated,
                target_weights=batch.target_weights,
            )
            out = forward_teacher_forced(model, batch2)
        assert torch.equal(base[:, : j + 1], out[:, : j + 1])
        assert not torch.equal(base[:, j + 1 :], out[:, j + 1 :])


def test_over_length_rejected(setup):
    vocab, cfg, model = setup
    batch = random_batch(vocab, cfg, tgt_len=cfg.max_sequence_length + 1)
    with pytest.raises(ValueError):
        forward_teacher_forced(model, batch)


def test_eval_mode_deterministic(setup):
    vocab, cfg, model = setup
    batch = random_batch(vocab, cfg)
    with torch.no_grad():
        a = forward_teacher_forced(model, batch)
        b = forward_teacher_forced(model, batch)
    assert torch.equal(a, b)


# --- loss ---------------------------------------------------------------------------


def test_loss_uniform_logits_is_log_vocab():
    logits = torch.zeros(2, 5, 100)
    targets = torch.randint(0, 100, (2, 5))
    weights = torch.ones(2, 5)
    loss = sequence_loss(logits, targets, weights)
    assert loss.item() == pytest.approx(math.log(100), rel=1e-6)


def test_loss_perfect_logits_tends_to_zero():
    targets = torch.randint(0, 50, (2, 6))
    logits = torch.full((2, 6, 50), -100.0)
    logits.scatter_(-1, targets.unsqueeze(-1), 100.0)
    weights = torch.ones(2, 6)
    assert sequence_loss(logits, targets, weights).item() < 1e-6


def test_loss_matches_independent_nll():
    g = torch.Generator().manual_seed(7)
    logits = torch.randn(3, 8, 40, generator=g)
    targets = torch.randint(0, 40, (3, 8), generator=g)
    weights = (torch.rand(3, 8, generator=g) > 0.3).float()

    total = 0.0
    denom = 0.0
    for b in range(3):
        for i in range(8):
            row = logits[b, i]
            log_z = torch.logsumexp(row, dim=0).item()
            log_p = row[targets[b, i]].item() - log_z
            total += -weights[b, i].item() * log_p
            denom += weights[b, i].item()
    oracle = total / denom
    assert sequence_loss(logits, targets, weights).item() == pytest.approx(oracle, abs=1e-6)


def test_loss_weighting_ignores_padding():
    logits = torch.randn(1, 4, 10)
    targets = torch.randint(0, 10, (1, 4))
    weights = torch.tensor([[1.0, 1.0, 0.0, 0.0]])
    masked = sequence_loss(logits, targets, weights)
    manual = sequence_loss(logits[:, :2], targets[:, :2], weights[:, :2])
    assert masked.item() == pytest.approx(manual.item(), rel=1e-6)


def test_loss_all_zero_weights_rejected():
    with pytest.raises(ValueError):
        sequence_loss(torch.randn(1, 3, 5), torch.zeros(1, 3, dtype=torch.long), torch.zeros(1, 3))


def test_loss_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        sequence_loss(torch.randn(1, 3, 5), torch.zeros(1, 4, dtype=torch.long), torch.zeros(1, 4))


# --- training step ---------------------------------------------------------------------


def test_train_step_updates_and_stays_finite(setup):
    vocab, cfg, _ = setup
    model = build_model(cfg, seed=5)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    batch = random_batch(vocab, cfg)
    before = [p.detach().clone() for p in model.parameters()]
    loss = train_step(model, batch, opt)
    assert math.isfinite(loss)
    assert any(
        not torch.equal(b, p.detach()) for b, p in zip(before, model.parameters())
    )
    assert all(torch.isfinite(p).all() for p in model.parameters())


def test_train_step_zero_lr_is_identity(setup):
    vocab, cfg, _ = setup
    model = build_model(cfg, seed=6)
    opt = torch.optim.AdamW(model.parameters(), lr=0.0, weight_decay=0.01)
    batch = random_batch(vocab, cfg)
    before = [p.detach().clone() for p in model.parameters()]
    train_step(model, batch, opt)
    for b, p in zip(before, model.parameters()):
        assert torch.equal(b, p.detach())


def test_train_step_aborts_on_nonfinite_loss(setup):
    vocab, cfg, _ = setup
    model = build_model(cfg, seed=7)
    with torch.no_grad():
        model.output_proj.weight.fill_(float("nan"))
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    with pytest.raises(NumericalError):
        train_step(model, random_batch(vocab, cfg), opt)


def test_training_deterministic_given_seed(setup):
    vocab, cfg, _ = setup

    def run():
        torch.manual_seed(42)
        model = build_model(cfg, seed=11)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        losses = [train_step(model, random_batch(vocab, cfg, seed=s), opt) for s in range(3)]
        return losses

    assert run() == run()


# --- gradient check (small sample; the acceptance suite runs the full one) -------------


def test_gradients_match_finite_differences(setup):
    vocab, cfg, _ = setup
    from conftest import finite_difference_gradcheck

    model = build_model(cfg, seed=8).double()
    model.eval()  # dropout off: loss must be deterministic for FD
    batch = random_batch(vocab, cfg, bsz=1, tgt_len=8)
    batch = Batch(
        images=batch.images.double(),
        instruction_token_ids=batch.instruction_token_ids,
        target_token_ids=batch.target_token_ids,
        target_weights=batch.target_weights.double(),
    )
    rel = finite_difference_gradcheck(
        model, lambda: batch_loss(model, batch), n_coords=120, seed=0
    )
    assert rel < 1e-3


# --- greedy decoding -----------------------------------------------------------------------


def test_greedy_decode_contract(setup):
    vocab, cfg, model = setup
    instr = tokenize_instruction("Recognize all text", vocab)
    seq = greedy_decode(model, torch.rand(16, 16), instr, max_len=20, vocab=vocab)
    assert seq.tokens[0] == vocab.sos_id
    assert len(seq) <= 20
    if vocab.eos_id in seq.tokens:
        assert seq.tokens.index(vocab.eos_id) == len(seq) - 1


def test_greedy_decode_deterministic(setup):
    vocab, cfg, model = setup
    instr = tokenize_instruction("Recognize all text", vocab)
    img = torch.rand(16, 16)
    a = greedy_decode(model, img, instr, 16, vocab)
    b = greedy_decode(model, img, instr, 16, vocab)
    assert a.tokens == b.tokens


def test_greedy_decode_batch_matches_single(setup):
    vocab, cfg, model = setup
    instr = tokenize_instruction("Recognize all text", vocab)
    imgs = torch.rand(3, 1, 16, 16)
    batched = greedy_decode_batch(
        model, imgs, torch.tensor([instr] * 3), 16, vocab
    )
    for i in range(3):
        single = greedy_decode(model, imgs[i, 0], instr, 16, vocab)
        assert batched[i].tokens == single.tokens


def test_greedy_decode_respects_max_sequence_length(setup):
    vocab, cfg, model = setup
    instr = tokenize_instruction("Recognize all text", vocab)
    with pytest.raises(ValueError):
        greedy_decode(model, torch.rand(16, 16), instr, cfg.max_sequence_length + 1, vocab)


# --- checkpointing ----------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, setup):
    vocab, cfg, model = setup
    path = tmp_path / "ck.pt"
    save_checkpoint(path, model, vocab, seed=123, extra={"note": "test"})
    loaded, loaded_vocab, payload = load_checkpoint(path, expected_vocab=vocab)
    assert payload["seed"] == 123 and payload["extra"]["note"] == "test"
    assert loaded_vocab == vocab
    batch = random_batch(vocab, cfg)
    with torch.no_grad():
        assert torch.equal(
            forward_teacher_forced(model, batch), forward_teacher_forced(loaded, batch)
        )


def test_checkpoint_vocab_mismatch_refused(tmp_path, setup):
    vocab, cfg, model = setup
    path = tmp_path / "ck.pt"
    save_checkpoint(path, model, vocab, seed=0)
    other = build_vocabulary(charset="abc")
    with pytest.raises(VocabularyMismatchError):
        load_checkpoint(path, expected_vocab=other)


def test_model_build_is_seed_deterministic(setup):
    vocab, cfg, _ = setup
    a = build_model(cfg, seed=9)
    b = build_model(cfg, seed=9)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(image_size=60, patch_size=8)
    with pytest.raises(ValueError):
        ModelConfig(patch_size=6)
