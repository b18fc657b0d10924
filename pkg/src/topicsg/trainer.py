"""Two-stage training.

Stage 1 fits the shared captioner on image captions plus relational
captions (lambda-weighted). Stage 2 freezes it, collects per-word object
attention on each training caption, and fits the importance head to the
assembled pair attention with a KL objective. The ``label`` variant of
stage 2 instead uses the importance flags with a logistic loss and serves
as an upper bound.

Stage 1 and distill-mode stage 2 only ever see :class:`TrainingScene`
objects, which have no importance flags.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .captioner import Captioner, decode_image_caption, sequence_logprobs
from .checkpoint import params_digest
from .core import SceneRecord, TrainingScene, Vocabulary
from .distill import ImportanceHead, assemble_second_order, kl_from_logits, pair_indices, pool_attention
from .features import ConfigError, FeatureSet, ModelConfig
from .synth import pos_labels

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Divergence or unusable training data."""


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.7
    lr_stage1: float = 3e-3
    lr_stage2: float = 1e-3
    epochs_stage1: int = 8
    epochs_stage2: int = 20
    batch_size: int = 1
    seed: int = 0
    optimizer: str = "adam"
    clip_norm: float = 5.0
    supervision_mode: str = "distill"
    feature_mode: str = "SOUS"
    pooling: str = "max"
    mask_non_nouns: bool = False
    attention_source: str = "teacher"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.supervision_mode not in ("distill", "label"):
            raise ConfigError(f"unknown supervision mode {self.supervision_mode!r}")
        if self.pooling not in ("max", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.feature_mode not in ("U", "SO", "SOU", "SOUS"):
            raise ConfigError(f"unknown feature mode {self.feature_mode!r}")
        if self.attention_source not in ("teacher", "greedy"):
            raise ConfigError(f"unknown attention source {self.attention_source!r}")


@dataclass
class TrainReport:
    stage: str
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _optimizer(params, lr: float, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr)


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int, image_id: str):
    if not torch.isfinite(loss):
        raise TrainingError(f"{stage}: non-finite loss at epoch {epoch} step {step} (image {image_id})")


def mixed_ce_loss(model: Captioner, scene: TrainingScene, fs: FeatureSet, lam: float, parts: bool = False):
    """Teacher-forced image-caption CE plus ``lam`` times the mean relational-caption CE."""
    enc = model.encode(fs)
    ll_img, _ = sequence_logprobs(model, model.image_memory(enc), [list(scene.image_caption)])
    image_ce = -ll_img.sum()
    if scene.relations:
        mem = model.relation_memory(enc, fs, [r.pair for r in scene.relations])
        ll_rel, _ = sequence_logprobs(model, mem, [list(r.words) for r in scene.relations])
        rel_ce = -ll_rel.mean()
    else:
        rel_ce = image_ce.new_zeros(())
    loss = image_ce + lam * rel_ce
    return (loss, image_ce, rel_ce) if parts else loss


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for k in range(0, n, batch_size):
        yield order[k:k + batch_size]


def train_stage1(scenes: Sequence[TrainingScene], features: Sequence[FeatureSet], vocab_size: int,
                 model_config: ModelConfig, config: TrainConfig, model: Captioner | None = None):
    if not scenes:
        raise TrainingError("stage1: empty dataset")
    scenes = [s.for_training() if isinstance(s, SceneRecord) else s for s in scenes]
    t0 = time.perf_counter()
    torch.manual_seed(config.seed)
    model = model or Captioner(replace(model_config, seed=config.seed), vocab_size)
    model.train()
    opt = _optimizer(model.parameters(), config.lr_stage1, config)
    rng = np.random.default_rng(config.seed)
    report = TrainReport("stage1")
    step = 0
    for epoch in range(1, config.epochs_stage1 + 1):
        sums = np.zeros(3)
        for batch in _batches(len(scenes), config.batch_size, rng):
            opt.zero_grad()
            for k in batch:
                loss, img, rel = mixed_ce_loss(model, scenes[k], features[k], config.lam, parts=True)
                _check_finite(loss, "stage1", epoch, step, scenes[k].image_id)
                (loss / len(batch)).backward()
                sums += [img.item(), rel.item(), loss.item()]
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            opt.step()
            step += 1
        n = len(scenes)
        rec = {"epoch": epoch, "image_ce": sums[0] / n, "relational_ce": sums[1] / n, "combined": sums[2] / n}
        report.epochs.append(rec)
        log.info("stage1 epoch %d: %s", epoch, rec)
    model.eval()
    report.final = dict(report.epochs[-1])
    report.seconds = time.perf_counter() - t0
    return model, report


@dataclass
class DistillExample:
    """Frozen-captioner outputs for one image, ready for head training."""

    image_id: str
    visual: torch.Tensor
    union: torch.Tensor
    global_feature: torch.Tensor
    categories: torch.Tensor
    pairs: list[tuple[int, int]]
    index: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    log_beta: torch.Tensor
    beta: np.ndarray
    gamma: np.ndarray


@torch.no_grad()
def collect_attention(model: Captioner, scene: TrainingScene, fs: FeatureSet, source: str = "teacher"):
    if source == "teacher":
        return decode_image_caption(model, fs, "teacher_forced", words=scene.image_caption).trace
    return decode_image_caption(model, fs, "greedy").trace


def relation_pairs(scene: TrainingScene) -> list[tuple[int, int]]:
    return list(dict.fromkeys(r.pair for r in scene.relations))


@torch.no_grad()
def prepare_distillation(scenes: Sequence[TrainingScene], features: Sequence[FeatureSet], model: Captioner,
                         vocab: Vocabulary, config: TrainConfig) -> list[DistillExample]:
    mask_of = pos_labels(vocab) if config.mask_non_nouns else None
    out = []
    for scene, fs in zip(scenes, features):
        pairs = relation_pairs(scene)
        if not pairs:
            continue
        enc = model.encode(fs)
        trace = collect_attention(model, scene, fs, config.attention_source)
        mask = mask_of(trace.words) if mask_of else None
        pooled = pool_attention(trace, config.pooling, mask)
        _, beta = assemble_second_order(pooled, pairs)
        out.append(DistillExample(
            scene.image_id, enc["visual"].detach(), enc["union"].detach(), enc["global"].detach(),
            torch.tensor(fs.categories, dtype=torch.long), pairs, pair_indices(fs, pairs),
            torch.as_tensor(np.log(beta), dtype=enc["visual"].dtype), beta, pooled.gamma,
        ))
    return out


def make_head(model: Captioner, vocab_size: int, config: TrainConfig) -> ImportanceHead:
    cfg = model.cfg
    head = ImportanceHead(cfg.d_l, cfg.d_s, cfg.d_sem, vocab_size, config.feature_mode, seed=config.seed)
    return head.to(model.visual.weight.dtype)


def head_scores(head: ImportanceHead, ex: DistillExample) -> torch.Tensor:
    return head(ex.visual, ex.union, ex.global_feature, ex.categories, *ex.index)


def stage2_kl(head: ImportanceHead, ex: DistillExample) -> torch.Tensor:
    return kl_from_logits(head_scores(head, ex), ex.log_beta)


def _fit_head(head, examples, targets, loss_fn, config: TrainConfig, stage: str, steps: int | None = None):
    t0 = time.perf_counter()
    torch.manual_seed(config.seed)
    opt = _optimizer(head.parameters(), config.lr_stage2, config)
    rng = np.random.default_rng(config.seed)
    report = TrainReport(stage)
    epochs = config.epochs_stage2 if steps is None else math.ceil(steps / max(len(examples), 1))
    step = 0
    for epoch in range(1, epochs + 1):
        total = 0.0
        seen = 0
        for batch in _batches(len(examples), config.batch_size, rng):
            if steps is not None and step >= steps:
                break
            opt.zero_grad()
            for k in batch:
                loss = loss_fn(head, examples[k], targets[k])
                _check_finite(loss, stage, epoch, step, examples[k].image_id)
                (loss / len(batch)).backward()
                total += loss.item()
                seen += 1
            torch.nn.utils.clip_grad_norm_(head.parameters(), config.clip_norm)
            opt.step()
            step += 1
        report.epochs.append({"epoch": epoch, "loss": total / max(seen, 1)})
    report.seconds = time.perf_counter() - t0
    return report


def train_stage2(scenes: Sequence[TrainingScene], features: Sequence[FeatureSet], captioner: Captioner,
                 vocab: Vocabulary, config: TrainConfig, steps: int | None = None,
                 examples: list[DistillExample] | None = None):
    """Distill caption attention into the importance head; the captioner is left untouched."""
    scenes = [s.for_training() if isinstance(s, SceneRecord) else s for s in scenes]
    digest = params_digest(captioner)
    for p in captioner.parameters():
        p.requires_grad_(False)
    try:
        if examples is None:
            examples = prepare_distillation(scenes, features, captioner, vocab, config)
        if not examples:
            raise TrainingError("stage2: no scene has relations to distill")
        head = make_head(captioner, len(vocab), config)
        report = _fit_head(head, examples, [None] * len(examples), lambda h, ex, _: stage2_kl(h, ex),
                           config, "stage2", steps)
        for e in report.epochs:
            e["kl"] = e.pop("loss")
        with torch.no_grad():
            report.final = {"kl": float(np.mean([stage2_kl(head, ex).item() for ex in examples]))}
    finally:
        for p in captioner.parameters():
            p.requires_grad_(True)
    if params_digest(captioner) != digest:
        raise TrainingError("stage2 modified the frozen captioner")
    head.eval()
    return head, report


def train_stage2_label(records: Sequence[SceneRecord], features: Sequence[FeatureSet], captioner: Captioner,
                       vocab: Vocabulary, config: TrainConfig, steps: int | None = None):
    """Upper-bound head trained on importance flags with a logistic loss on raw scores."""
    examples, targets = [], []
    by_id = {}
    for rec in records:
        flags = {}
        for r, f in zip(rec.relations, rec.important_flags):
            flags[r.pair] = flags.get(r.pair, False) or bool(f)
        by_id[rec.image_id] = flags
    if not any(any(v.values()) for v in by_id.values()):
        raise TrainingError("degenerate supervision: no positive importance flags")
    digest = params_digest(captioner)
    for p in captioner.parameters():
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            for rec, fs in zip(records, features):
                pairs = relation_pairs(rec)
                if not pairs:
                    continue
                enc = captioner.encode(fs)
                dtype = enc["visual"].dtype
                examples.append(DistillExample(
                    rec.image_id, enc["visual"], enc["union"], enc["global"],
                    torch.tensor(fs.categories, dtype=torch.long), pairs, pair_indices(fs, pairs),
                    torch.zeros(len(pairs), dtype=dtype), np.full(len(pairs), 1 / len(pairs)), np.zeros(fs.n),
                ))
                targets.append(torch.tensor([float(by_id[rec.image_id][p]) for p in pairs], dtype=dtype))
        head = make_head(captioner, len(vocab), config)
        loss_fn = lambda h, ex, y: F.binary_cross_entropy_with_logits(head_scores(h, ex), y)
        report = _fit_head(head, examples, targets, loss_fn, config, "stage2-label", steps)
        for e in report.epochs:
            e["bce"] = e.pop("loss")
        with torch.no_grad():
            report.final = {"bce": float(np.mean([loss_fn(head, ex, y).item() for ex, y in zip(examples, targets)]))}
    finally:
        for p in captioner.parameters():
            p.requires_grad_(True)
    if params_digest(captioner) != digest:
        raise TrainingError("stage2-label modified the frozen captioner")
    head.eval()
    return head, report
