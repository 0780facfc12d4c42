import random

import numpy as np
import pytest
import torch

from textspotter.codec import build_vocabulary

CHARSET = "".join(chr(c) for c in range(33, 127))

LEXICON = (
    "SALE", "open", "STOP", "Cafe", "exit", "Menu", "2024", "shop",
    "TAXI", "Park", "fish", "GOLD", "beer", "Wine", "tea", "Bus",
    "May", "sun", "Hot", "ice",
)


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary()


def random_word(rng: random.Random, min_len=1, max_len=12) -> str:
    return "".join(rng.choice(CHARSET) for _ in range(rng.randint(min_len, max_len)))


def finite_difference_gradcheck(
    model, loss_fn, fraction=None, n_coords=None, seed=0, h=1e-5
):
    """Norm-wise relative error between autograd and central differences.

    Samples coordinates uniformly over all trainable parameters: either a
    fixed count (n_coords) or a fraction of the total. loss_fn must be a
    deterministic closure over the model (dropout disabled).
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    params = [p for p in model.parameters() if p.requires_grad and p.grad is not None]
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    if n_coords is None:
        n_coords = max(1, int(total * fraction))
    rng = random.Random(seed)
    picks = sorted(rng.sample(range(total), min(n_coords, total)))

    offsets = []
    acc = 0
    for s in sizes:
        offsets.append(acc)
        acc += s

    analytic = []
    numeric = []
    with torch.no_grad():
        pi = 0
        for global_idx in picks:
            while global_idx >= offsets[pi] + sizes[pi]:
                pi += 1
            local = global_idx - offsets[pi]
            flat = params[pi].view(-1)
            grad_flat = params[pi].grad.view(-1)
            orig = flat[local].item()
            step = h * max(1.0, abs(orig))
            flat[local] = orig + step
            loss_plus = loss_fn().item()
            flat[local] = orig - step
            loss_minus = loss_fn().item()
            flat[local] = orig
            numeric.append((loss_plus - loss_minus) / (2 * step))
            analytic.append(grad_flat[local].item())
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)
