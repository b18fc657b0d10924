"""Shared captioning module with two backbones.

Both backbones decode image captions (attending over every object) and
relational captions (attending over subject, object and their union
feature), and both expose the per-word object attention that feeds
attention distillation.

``updown``
    attention LSTM + additive attention + language LSTM.
``transformer``
    encoder over all objects, decoder with masked self-attention and
    cross-attention; the exported attention is the head-averaged
    cross-attention of one decoder layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import BOS_IDX, EOS_IDX, PAD_IDX
from .features import GEOMETRY_PROJ_DIM, ConfigError, FeatureSet, ModelConfig, project_visual, union_feature

T_MAX = 20
DEFAULT_BEAM = 3


class DecodeError(ValueError):
    """Bad decoding request (unknown ids, invalid beam width, missing state)."""


@dataclass
class AttentionTrace:
    """Object attention per emitted word: ``alpha`` is ``n_attended x T``."""

    alpha: np.ndarray
    words: list[int]
    attended_ids: list

    def __post_init__(self):
        if self.alpha.shape != (len(self.attended_ids), len(self.words)):
            raise ValueError(f"alpha shape {self.alpha.shape} does not match "
                             f"{len(self.attended_ids)} attended x {len(self.words)} words")


@dataclass
class DecodeResult:
    words: list[int]
    trace: AttentionTrace
    log_likelihood: float


@dataclass
class Memory:
    """What a decoder attends over, batched: ``feats`` is ``B x N x d``."""

    feats: torch.Tensor
    mean: torch.Tensor


@dataclass
class DecodeState:
    backbone: str
    h1: torch.Tensor | None = None
    c1: torch.Tensor | None = None
    h2: torch.Tensor | None = None
    c2: torch.Tensor | None = None
    prefix: list = field(default_factory=list)


class UpDownDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, cfg.d_e)
        self.att_lstm = nn.LSTMCell(cfg.d_h + cfg.d_l + cfg.d_e, cfg.d_h)
        self.lang_lstm = nn.LSTMCell(cfg.d_l + cfg.d_h, cfg.d_h)
        self.att_v = nn.Linear(cfg.d_l, cfg.d_a, bias=False)
        self.att_h = nn.Linear(cfg.d_h, cfg.d_a, bias=False)
        self.att_w = nn.Linear(cfg.d_a, 1, bias=False)
        self.out = nn.Linear(cfg.d_h, vocab_size)
        self.d_h = cfg.d_h

    def init_state(self, batch: int, like: torch.Tensor) -> DecodeState:
        z = like.new_zeros(batch, self.d_h)
        return DecodeState("updown", z, z, z, z)

    def step(self, state: DecodeState, prev_word: torch.Tensor, mem: Memory, proj_mem=None):
        e = self.embed(prev_word)
        h1, c1 = self.att_lstm(torch.cat([state.h2, mem.mean, e], dim=1), (state.h1, state.c1))
        if proj_mem is None:
            proj_mem = self.att_v(mem.feats)
        z = self.att_w(torch.tanh(proj_mem + self.att_h(h1)[:, None, :])).squeeze(-1)
        alpha = torch.softmax(z, dim=1)
        attended = torch.bmm(alpha[:, None, :], mem.feats).squeeze(1)
        h2, c2 = self.lang_lstm(torch.cat([attended, h1], dim=1), (state.h2, state.c2))
        logprobs = F.log_softmax(self.out(h2), dim=1)
        return DecodeState("updown", h1, c1, h2, c2), logprobs, alpha, attended

    def teacher_forced(self, mem: Memory, inputs: torch.Tensor):
        """``inputs`` is ``B x T`` (BOS-shifted); returns ``B x T x V`` log-probs and ``B x N x T`` attention."""
        B, T = inputs.shape
        state = self.init_state(B, mem.feats)
        proj = self.att_v(mem.feats)
        lps, alphas = [], []
        for t in range(T):
            state, lp, a, _ = self.step(state, inputs[:, t], mem, proj)
            lps.append(lp)
            alphas.append(a)
        return torch.stack(lps, 1), torch.stack(alphas, 2)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, scale: float | None = None):
        super().__init__()
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.heads = heads
        self.scale = scale if scale is not None else math.sqrt(d // heads)

    def weights(self, query: torch.Tensor, key: torch.Tensor, causal: bool = False) -> torch.Tensor:
        """Per-head attention ``B x H x Tq x Tk``; each row is a distribution over keys."""
        B, Tq, d = query.shape
        Tk = key.shape[1]
        dh = d // self.heads
        q = self.q(query).view(B, Tq, self.heads, dh).transpose(1, 2)
        k = self.k(key).view(B, Tk, self.heads, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / self.scale
        if causal:
            mask = torch.ones(Tq, Tk, dtype=torch.bool, device=query.device).triu(1)
            logits = logits.masked_fill(mask, float("-inf"))
        return torch.softmax(logits, dim=-1)

    def forward(self, query, key, causal=False):
        B, Tq, d = query.shape
        w = self.weights(query, key, causal)
        v = self.v(key).view(B, key.shape[1], self.heads, d // self.heads).transpose(1, 2)
        out = (w @ v).transpose(1, 2).reshape(B, Tq, d)
        return self.o(out), w


class EncoderLayer(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads)
        self.ff1 = nn.Linear(d, 2 * d)
        self.ff2 = nn.Linear(2 * d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x):
        x = self.norm1(x + self.attn(x, x)[0])
        return self.norm2(x + self.ff2(F.relu(self.ff1(x))))


class DecoderLayer(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, heads)
        # cross-attention logits are scaled by sqrt(d_tr), not sqrt(d_head)
        self.cross_attn = MultiHeadAttention(d, heads, scale=math.sqrt(d))
        self.ff1 = nn.Linear(d, 2 * d)
        self.ff2 = nn.Linear(2 * d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)

    def forward(self, x, mem):
        e_star = self.norm1(x + self.self_attn(x, x, causal=True)[0])
        ca, w = self.cross_attn(e_star, mem)
        x = self.norm2(e_star + ca)
        return self.norm3(x + self.ff2(F.relu(self.ff1(x)))), w


def _positions(T: int, d: int, like: torch.Tensor) -> torch.Tensor:
    pos = torch.arange(T, dtype=like.dtype)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=like.dtype) * (-math.log(10000.0) / d))
    pe = like.new_zeros(T, d)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


class TransformerDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        self.d = cfg.d_tr
        self.in_proj = nn.Linear(cfg.d_l, cfg.d_tr)
        self.encoder = nn.ModuleList(EncoderLayer(cfg.d_tr, cfg.heads) for _ in range(cfg.enc_layers))
        self.embed = nn.Embedding(vocab_size, cfg.d_tr)
        self.layers = nn.ModuleList(DecoderLayer(cfg.d_tr, cfg.heads) for _ in range(cfg.dec_layers))
        self.out = nn.Linear(cfg.d_tr, vocab_size)
        self.attn_layer = cfg.attn_layer
        if not -cfg.dec_layers <= cfg.attn_layer < cfg.dec_layers:
            raise ConfigError(f"attn_layer {cfg.attn_layer} out of range for {cfg.dec_layers} decoder layers")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``B x n x d_l`` projected object features to encoder output ``V*``."""
        h = self.in_proj(x)
        for layer in self.encoder:
            h = layer(h)
        return h

    def teacher_forced(self, mem: Memory, inputs: torch.Tensor):
        B, T = inputs.shape
        x = self.embed(inputs) * math.sqrt(self.d) + _positions(T, self.d, mem.feats)
        weights = []
        for layer in self.layers:
            x, w = layer(x, mem.feats)
            weights.append(w)
        alpha = weights[self.attn_layer].mean(dim=1).transpose(1, 2)
        return F.log_softmax(self.out(x), dim=-1), alpha


def transformer_cross_attention(memory: torch.Tensor, queries: torch.Tensor, attn: MultiHeadAttention,
                                per_head: bool = False):
    """Head-averaged cross-attention ``n x T`` of ``queries`` (``T x d_tr``) over ``memory`` (``n x d_tr``).

    Columns are distributions over the ``n`` memory slots.
    """
    if memory.shape[-1] % attn.heads:
        raise ConfigError(f"d_tr={memory.shape[-1]} is not divisible by heads={attn.heads}")
    w = attn.weights(queries[None], memory[None])[0]  # H x T x n
    alpha = w.mean(dim=0).T
    return (alpha, w.transpose(1, 2)) if per_head else alpha


class Captioner(nn.Module):
    """Feature projections plus one decoding backbone, all parameters named."""

    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.visual = nn.Linear(cfg.d_v, cfg.d_l)
        self.geometry = nn.Linear(6, GEOMETRY_PROJ_DIM)
        self.union = nn.Linear(cfg.d_u + GEOMETRY_PROJ_DIM, cfg.d_l)
        if cfg.backbone == "updown":
            self.decoder = UpDownDecoder(cfg, vocab_size)
        else:
            self.decoder = TransformerDecoder(cfg, vocab_size)
        init_uniform(self, cfg.seed)

    @property
    def backbone(self) -> str:
        return self.cfg.backbone

    def _tensor(self, a) -> torch.Tensor:
        p = self.visual.weight
        return torch.as_tensor(np.asarray(a), dtype=p.dtype, device=p.device)

    def encode(self, fs: FeatureSet) -> dict[str, torch.Tensor]:
        """Projected object features (``n x d_l``), their mean, and projected union features (``P x d_l``)."""
        vp = project_visual(self._tensor(fs.visual), self.visual.weight, self.visual.bias).T
        up = union_feature(self._tensor(fs.union_raw), self._tensor(fs.geometry), self.union.weight,
                           self.union.bias, self.geometry.weight, self.geometry.bias).T
        return {"visual": vp, "global": vp.mean(dim=0), "union": up}

    def image_memory(self, enc) -> Memory:
        feats = enc["visual"][None] if self.backbone == "updown" else self._vstar(enc)[None]
        return Memory(feats, feats.mean(dim=1))

    def _vstar(self, enc) -> torch.Tensor:
        if "vstar" not in enc:
            enc["vstar"] = self.decoder.encode(enc["visual"][None])[0]
        return enc["vstar"]

    def relation_memory(self, enc, fs: FeatureSet, pairs) -> Memory:
        si = [fs.obj_index(i) for i, _ in pairs]
        oi = [fs.obj_index(j) for _, j in pairs]
        ui = [fs.pair_index(p) for p in pairs]
        if self.backbone == "updown":
            v = enc["visual"]
            uni = enc["union"][ui]
        else:
            v = self._vstar(enc)
            uni = self.decoder.in_proj(enc["union"][ui])
        feats = torch.stack([v[si], v[oi], uni], dim=1)
        return Memory(feats, feats.mean(dim=1))

    def teacher_forced(self, mem: Memory, inputs: torch.Tensor):
        return self.decoder.teacher_forced(mem, inputs)

    def export_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().astype(np.float64) for k, v in self.named_parameters()}


def init_uniform(module: nn.Module, seed: int) -> None:
    """Weights ~ U(-0.1, 0.1) in parameter-name order; biases 0; layer-norm gains 1."""
    gen = torch.Generator().manual_seed(seed)
    norms = {name for name, m in module.named_modules() if isinstance(m, nn.LayerNorm)}
    with torch.no_grad():
        for name, p in module.named_parameters():
            owner, _, leaf = name.rpartition(".")
            if owner in norms:
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf.startswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul(0.2).sub(0.1).to(p.dtype))


def _pad(seqs: list[list[int]], like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """BOS-shifted inputs and padded targets, both ``B x T``."""
    T = max(len(s) for s in seqs)
    inputs = torch.full((len(seqs), T), PAD_IDX, dtype=torch.long, device=like.device)
    targets = torch.full((len(seqs), T), PAD_IDX, dtype=torch.long, device=like.device)
    for b, s in enumerate(seqs):
        inputs[b, 0] = BOS_IDX
        if len(s) > 1:
            inputs[b, 1:len(s)] = torch.tensor(s[:-1])
        targets[b, :len(s)] = torch.tensor(s)
    return inputs, targets


def sequence_logprobs(model: Captioner, mem: Memory, seqs: list[list[int]]):
    """Teacher-forced ``sum_t log p(w_t | w_<t)`` per sequence (differentiable) and the attention ``B x N x T``."""
    if any(len(s) == 0 for s in seqs):
        raise DecodeError("cannot score an empty word sequence")
    inputs, targets = _pad(seqs, mem.feats)
    lp, alpha = model.teacher_forced(mem, inputs)
    tok = lp.gather(2, targets[:, :, None]).squeeze(2)
    lengths = torch.tensor([len(s) for s in seqs], device=lp.device)
    valid = torch.arange(targets.shape[1], device=lp.device)[None, :] < lengths[:, None]
    return (tok * valid).sum(dim=1), alpha


def ud_step(model: Captioner, state: DecodeState | None, prev_word, mem: Memory):
    """One Up-Down decoding step: ``(state', word distribution, alpha_t, attended feature)``."""
    if model.backbone != "updown":
        raise DecodeError("ud_step requires the updown backbone")
    if state is None or state.backbone != "updown" or state.h1 is None:
        raise DecodeError("decoder state is not initialized; use init_state()")
    prev = torch.as_tensor(prev_word, dtype=torch.long).reshape(-1)
    state, lp, alpha, attended = model.decoder.step(state, prev, mem)
    return state, lp.exp(), alpha, attended


def init_state(model: Captioner, batch: int = 1) -> DecodeState:
    if model.backbone == "updown":
        return model.decoder.init_state(batch, model.visual.weight)
    return DecodeState("transformer")


def _greedy(model: Captioner, mem: Memory, max_len: int) -> list[list[int]]:
    B = mem.feats.shape[0]
    done = torch.zeros(B, dtype=torch.bool)
    words = []
    if model.backbone == "updown":
        state = init_state(model, B)
        proj = model.decoder.att_v(mem.feats)
        prev = torch.full((B,), BOS_IDX, dtype=torch.long)
        for _ in range(max_len):
            state, lp, _, _ = model.decoder.step(state, prev, mem, proj)
            prev = lp.argmax(dim=1)
            words.append(prev)
            done |= prev == EOS_IDX
            if done.all():
                break
    else:
        seq = torch.full((B, 1), BOS_IDX, dtype=torch.long)
        for _ in range(max_len):
            lp, _ = model.decoder.teacher_forced(mem, seq)
            nxt = lp[:, -1].argmax(dim=1)
            words.append(nxt)
            seq = torch.cat([seq, nxt[:, None]], dim=1)
            done |= nxt == EOS_IDX
            if done.all():
                break
    out = torch.stack(words, 1).tolist()
    return [s[: s.index(EOS_IDX) + 1] if EOS_IDX in s else s for s in out]


def _step_logprobs(model: Captioner, mem: Memory, prefixes: list[list[int]]) -> torch.Tensor:
    """Next-word log-probs for each prefix (prefixes exclude BOS); memory is shared."""
    k = len(prefixes)
    m = Memory(mem.feats.expand(k, -1, -1), mem.mean.expand(k, -1))
    inputs = torch.tensor([[BOS_IDX] + p for p in prefixes], dtype=torch.long)
    with torch.no_grad():
        lp, _ = model.teacher_forced(m, inputs)
    return lp[:, -1]


def beam_search(model: Captioner, mem: Memory, k: int = DEFAULT_BEAM, max_len: int = T_MAX) -> list[int]:
    """Beam search over one memory; ties resolve to the lower token index."""
    if k < 1:
        raise DecodeError(f"beam width must be >= 1, got {k}")
    beams: list[tuple[float, list[int]]] = [(0.0, [])]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_len):
        lp = _step_logprobs(model, mem, [seq for _, seq in beams]).double().cpu().numpy()
        cands = [(score + lp[bi, w], w, bi) for bi, (score, _) in enumerate(beams) for w in range(lp.shape[1])]
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt = []
        for score, w, bi in cands[:k]:
            seq = beams[bi][1] + [w]
            (finished if w == EOS_IDX else nxt).append((score, seq))
        beams = nxt
        best_done = max((s for s, _ in finished), default=-math.inf)
        if not beams or max(s for s, _ in beams) <= best_done:
            break
    pool = finished or beams
    return min(pool, key=lambda c: (-c[0], c[1]))[1]


def _run(model: Captioner, mem: Memory, seqs, attended_ids) -> list[DecodeResult]:
    ll, alpha = sequence_logprobs(model, mem, seqs)
    out = []
    for b, s in enumerate(seqs):
        a = alpha[b, :, : len(s)].detach().cpu().double().numpy()
        out.append(DecodeResult(list(s), AttentionTrace(a, list(s), list(attended_ids[b])), float(ll[b])))
    return out


def _decode(model: Captioner, mem: Memory, mode: str, gt, beam: int, max_len: int, attended_ids):
    B = mem.feats.shape[0]
    if mode == "teacher_forced":
        if gt is None:
            raise DecodeError("teacher_forced mode needs ground-truth words")
        seqs = gt
    elif mode == "greedy":
        seqs = _greedy(model, mem, max_len)
    elif mode == "beam":
        if beam < 1:
            raise DecodeError(f"beam width must be >= 1, got {beam}")
        seqs = [beam_search(model, Memory(mem.feats[b:b + 1], mem.mean[b:b + 1]), beam, max_len) for b in range(B)]
    else:
        raise DecodeError(f"unknown decoding mode {mode!r}")
    return _run(model, mem, [list(s) for s in seqs], attended_ids)


@torch.no_grad()
def decode_image_caption(model: Captioner, fs: FeatureSet, mode: str = "greedy", words=None,
                         beam: int = DEFAULT_BEAM, max_len: int = T_MAX) -> DecodeResult:
    """Caption the whole image; the trace has one row per object."""
    mem = model.image_memory(model.encode(fs))
    gt = None if words is None else [list(words)]
    return _decode(model, mem, mode, gt, beam, max_len, [fs.object_ids])[0]


@torch.no_grad()
def decode_relational_captions(model: Captioner, fs: FeatureSet, pairs, mode: str = "greedy", words=None,
                               beam: int = DEFAULT_BEAM, max_len: int = T_MAX) -> list[DecodeResult]:
    """Batched relational captioning; each trace has rows (subject, object, union)."""
    pairs = [tuple(p) for p in pairs]
    for i, j in pairs:
        if i == j:
            raise DecodeError(f"subject and object must differ, got ({i}, {j})")
        if i not in fs.object_ids or j not in fs.object_ids:
            raise DecodeError(f"{fs.image_id}: unknown object id in pair ({i}, {j})")
    if not pairs:
        return []
    mem = model.relation_memory(model.encode(fs), fs, pairs)
    gt = None if words is None else [list(w) for w in words]
    ids = [(i, j, (i, j)) for i, j in pairs]
    return _decode(model, mem, mode, gt, beam, max_len, ids)


def decode_relational_caption(model: Captioner, fs: FeatureSet, subject_id: int, object_id: int,
                              mode: str = "greedy", words=None, beam: int = DEFAULT_BEAM,
                              max_len: int = T_MAX) -> DecodeResult:
    return decode_relational_captions(model, fs, [(subject_id, object_id)], mode,
                                      None if words is None else [words], beam, max_len)[0]
