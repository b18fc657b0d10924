"""Attention distillation: pooled object attention, second-order pair attention,
the query-key importance head, and the KL objective tying them together."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .captioner import AttentionTrace, init_uniform
from .features import ConfigError, FeatureSet

FEATURE_MODES = ("U", "SO", "SOU", "SOUS")
POOLING_MODES = ("max", "mean")


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def log_softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


@dataclass
class PooledAttention:
    gamma: np.ndarray
    object_ids: list[int]
    pooling_mode: str
    mask_applied: bool

    def value(self, obj_id: int) -> float:
        try:
            return float(self.gamma[self.object_ids.index(obj_id)])
        except ValueError:
            raise KeyError(f"object {obj_id} has no pooled attention") from None


def pool_attention(trace: AttentionTrace, mode: str = "max", noun_mask: Sequence[bool] | None = None) -> PooledAttention:
    """Pool ``alpha`` over time per object, optionally only over unmasked (noun) steps."""
    mode = mode.lower()
    if mode not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    alpha = np.asarray(trace.alpha, dtype=np.float64)
    if noun_mask is not None:
        keep = np.asarray(noun_mask, dtype=bool)
        if keep.shape != (alpha.shape[1],):
            raise ValueError(f"noun mask has length {keep.size}, trace has {alpha.shape[1]} steps")
        if not keep.any():
            raise ValueError("empty pooling window")
        alpha = alpha[:, keep]
    elif alpha.shape[1] == 0:
        raise ValueError("empty pooling window")
    gamma = alpha.max(axis=1) if mode == "max" else alpha.mean(axis=1)
    return PooledAttention(gamma, list(trace.attended_ids), mode, noun_mask is not None)


def assemble_second_order(pooled: PooledAttention, pairs) -> tuple[np.ndarray, np.ndarray]:
    """``delta_ij = gamma_i + gamma_j`` per listed pair and ``beta = softmax(delta)``."""
    try:
        delta = np.array([pooled.value(i) + pooled.value(j) for i, j in pairs], dtype=np.float64)
    except KeyError as e:
        raise ValueError(f"pair references unknown object: {e}") from None
    if delta.size == 0:
        raise ValueError("no pairs to assemble")
    return delta, softmax(delta)


def kl_loss(eta, beta, return_grad: bool = False):
    """``KL(eta || beta)`` in nats; with ``return_grad`` also d/ds where ``eta = softmax(s)``."""
    eta = np.asarray(eta, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if eta.shape != beta.shape:
        raise ValueError(f"length mismatch: eta {eta.shape} vs beta {beta.shape}")
    log_ratio = np.log(eta) - np.log(beta)
    kl = float(np.dot(eta, log_ratio))
    if not return_grad:
        return kl
    return kl, eta * (log_ratio - kl)


def kl_from_logits(s: torch.Tensor, log_beta: torch.Tensor) -> torch.Tensor:
    """Differentiable ``KL(softmax(s) || beta)`` computed in log space."""
    log_eta = torch.log_softmax(s, dim=0)
    return (log_eta.exp() * (log_eta - log_beta)).sum()


class ImportanceHead(nn.Module):
    """Query ``f([...pair features...])`` against key ``g(v_bar)``, scaled by ``sqrt(d_s)``."""

    def __init__(self, d_l: int, d_s: int, d_sem: int, vocab_size: int, feature_mode: str = "SOUS", seed: int = 0):
        super().__init__()
        if feature_mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {feature_mode!r}")
        self.feature_mode = feature_mode
        self.d_s = d_s
        n_blocks = {"U": 1, "SO": 2, "SOU": 3, "SOUS": 3}[feature_mode]
        query_dim = n_blocks * d_l + (2 * d_sem if feature_mode == "SOUS" else 0)
        self.f = nn.Linear(query_dim, d_s)
        self.g = nn.Linear(d_l, d_s)
        if feature_mode == "SOUS":
            self.sem = nn.Embedding(vocab_size, d_sem)
        init_uniform(self, seed)

    def query_input(self, visual, union, categories, si, oi, ui) -> torch.Tensor:
        mode = self.feature_mode
        parts = []
        if mode != "U":
            parts += [visual[si], visual[oi]]
        if mode != "SO":
            parts.append(union[ui])
        if mode == "SOUS":
            if not hasattr(self, "sem"):
                raise ConfigError("SOUS features need a category embedding table")
            parts += [self.sem(categories[si]), self.sem(categories[oi])]
        return torch.cat(parts, dim=1)

    def forward(self, visual, union, global_feature, categories, si, oi, ui) -> torch.Tensor:
        """Raw scores ``s`` for the pairs given by index tensors (subject, object, union column)."""
        q = self.f(self.query_input(visual, union, categories, si, oi, ui))
        k = self.g(global_feature)
        return q @ k / math.sqrt(self.d_s)


def pair_indices(fs: FeatureSet, pairs) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    si = torch.tensor([fs.obj_index(i) for i, _ in pairs], dtype=torch.long)
    oi = torch.tensor([fs.obj_index(j) for _, j in pairs], dtype=torch.long)
    ui = torch.tensor([fs.pair_index(p) for p in pairs], dtype=torch.long)
    return si, oi, ui


@torch.no_grad()
def importance_scores(fs: FeatureSet, pairs, head: ImportanceHead) -> tuple[np.ndarray, np.ndarray]:
    """``(s, eta)`` for ``pairs``; ``fs`` must already carry projected features."""
    if fs.visual_proj is None:
        raise ValueError("FeatureSet has no projected features; call project_features first")
    dtype = head.f.weight.dtype
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
    si, oi, ui = pair_indices(fs, pairs)
    s = head(t(fs.visual_proj.T), t(fs.union_proj.T), t(fs.global_feature),
             torch.tensor(fs.categories, dtype=torch.long), si, oi, ui)
    s = s.double().numpy()
    return s, softmax(s)


def rank_relations(pairs, scores) -> list[tuple[tuple[int, int], float]]:
    """Pairs by descending score; ties resolve to the lexicographically smaller (subject, object)."""
    order = sorted(range(len(pairs)), key=lambda k: (-float(scores[k]), tuple(pairs[k])))
    return [(tuple(pairs[k]), float(scores[k])) for k in order]


def inspect_dump(image_id: str, pooled: PooledAttention, pairs, delta, beta, s, eta, likelihoods,
                 trace: AttentionTrace | None = None, words: list[str] | None = None) -> dict:
    out = {
        "image_id": image_id,
        "object_ids": list(pooled.object_ids),
        "gamma": [float(x) for x in pooled.gamma],
        "pooling": pooled.pooling_mode,
        "pairs": [list(p) for p in pairs],
        "delta": [float(x) for x in delta],
        "beta": [float(x) for x in beta],
        "s": [float(x) for x in s],
        "eta": [float(x) for x in eta],
        "likelihoods": [float(x) for x in likelihoods],
    }
    if trace is not None:
        out["alpha"] = np.asarray(trace.alpha).tolist()
        out["caption_words"] = words if words is not None else list(trace.words)
    return out


def write_inspect(dump: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dump, indent=1) + "\n")
