"""Shared fixtures-as-functions for the trainer and acceptance tests."""
import numpy as np
import torch

from topicsg.captioner import Captioner
from topicsg.core import Box, RelationalCaption, SceneObject, SceneRecord, Vocabulary, tokenize
from topicsg.features import ModelConfig, synth_features

SMALL_WORDS = {"a": "det", "man": "noun", "dog": "noun", "red": "adj", "holding": "verb", "near": "verb"}
GRAD_DIMS = dict(d_v=4, d_l=3, d_h=3, d_a=2, d_e=2, d_u=3, d_s=2, d_sem=2, d_tr=4, heads=2, enc_layers=1, dec_layers=1)


def small_vocab() -> Vocabulary:
    return Vocabulary(list(SMALL_WORDS), SMALL_WORDS)


def two_object_record(vocab: Vocabulary) -> SceneRecord:
    objs = (
        SceneObject(0, Box(40, 50, 30, 40), vocab.index("man"), (vocab.index("red"),)),
        SceneObject(1, Box(90, 60, 50, 30), vocab.index("dog")),
    )
    rels = (
        RelationalCaption(0, 1, tuple(tokenize("red man holding dog", vocab))),
        RelationalCaption(1, 0, tuple(tokenize("dog near red man", vocab))),
    )
    return SceneRecord("two", objs, rels, tuple(tokenize("a man holding a dog", vocab)), (True, False))


def grad_setup(backbone: str = "updown", seed: int = 0):
    vocab = small_vocab()
    cfg = ModelConfig(**GRAD_DIMS, backbone=backbone, seed=seed)
    rec = two_object_record(vocab)
    model = Captioner(cfg, len(vocab)).double()
    # move off the small uniform init so every nonlinearity is exercised
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.as_tensor(rng.uniform(-0.3, 0.3, size=p.shape)))
    return vocab, cfg, rec.for_training(), synth_features(rec, cfg), model


def fd_check(module: torch.nn.Module, loss_fn, h: float = 1e-4, max_entries: int | None = None, seed: int = 0):
    """Worst relative error per named parameter between autograd and central differences.

    Relative error is ``max|fd - an| / max(max|fd|, max|an|)``, with parameters
    whose gradient is identically zero reported as 0 when fd agrees to 1e-9.
    """
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    out = {}
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        analytic = p.grad.detach().clone().reshape(-1)
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and idx.size > max_entries:
            idx = rng.choice(idx, size=max_entries, replace=False)
        fd = np.empty(idx.size)
        with torch.no_grad():
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                fd[k] = (up - down) / (2 * h)
        an = analytic[torch.as_tensor(idx)].numpy()
        scale = max(np.abs(fd).max(), np.abs(an).max())
        err = np.abs(fd - an).max()
        out[name] = err / scale if scale > 1e-9 else err
    return out


# one line per acceptance criterion, echoed in the terminal summary by conftest
ACCEPTANCE_LINES: list[str] = []
