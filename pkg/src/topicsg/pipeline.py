"""Topic scene graph generation: caption the image, caption every ordered
object pair, and rank the pairs by learned importance or by sentence likelihood."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .captioner import Captioner, decode_image_caption, decode_relational_captions
from .core import TrainingScene, Vocabulary, detokenize, strip_eos
from .distill import ImportanceHead, assemble_second_order, importance_scores, pool_attention, rank_relations
from .evaluation import PredictedRelation, Prediction
from .features import FeatureSet, all_pairs, project_features

RANK_STRATEGIES = ("eta", "likelihood", "beta_oracle")


@dataclass
class SceneGraph:
    """Everything computed for one image before ranking."""

    image_id: str
    caption: list[int]
    pairs: list[tuple[int, int]]
    words: list[list[int]]
    likelihoods: np.ndarray
    s: np.ndarray | None
    eta: np.ndarray | None


@torch.no_grad()
def build_scene_graph(captioner: Captioner, head: ImportanceHead | None, fs: FeatureSet) -> SceneGraph:
    pairs = all_pairs(fs.object_ids)
    image = decode_image_caption(captioner, fs, "greedy")
    rels = decode_relational_captions(captioner, fs, pairs, "greedy")
    s = eta = None
    if head is not None:
        project_features(fs, captioner.export_numpy())
        s, eta = importance_scores(fs, pairs, head)
    return SceneGraph(fs.image_id, image.words, pairs, [r.words for r in rels],
                      np.array([r.log_likelihood for r in rels]), s, eta)


def beta_oracle_scores(captioner: Captioner, scene: TrainingScene, fs: FeatureSet, pairs, pooling: str = "max"):
    """Pair attention assembled from the ground-truth caption; evaluation tooling only."""
    trace = decode_image_caption(captioner, fs, "teacher_forced", words=scene.image_caption).trace
    return assemble_second_order(pool_attention(trace, pooling), pairs)[1]


def to_prediction(graph: SceneGraph, scene: TrainingScene, vocab: Vocabulary, rank: str = "eta",
                  topk: int | None = None, scores=None) -> Prediction:
    if scores is None:
        if rank == "eta":
            if graph.eta is None:
                raise ValueError("eta ranking needs an importance head")
            scores = graph.eta
        elif rank == "likelihood":
            scores = graph.likelihoods
        else:
            raise ValueError(f"unknown ranking strategy {rank!r}")
    boxes = {o.id: o.box for o in scene.objects}
    words = dict(zip(graph.pairs, graph.words))
    ranked = rank_relations(graph.pairs, scores)
    if topk is not None:
        ranked = ranked[:topk]
    rels = [PredictedRelation(boxes[i], boxes[j], detokenize(words[(i, j)], vocab).split(), score, (i, j))
            for (i, j), score in ranked]
    return Prediction(scene.image_id, rels, detokenize(strip_eos(graph.caption), vocab).split())


def generate(captioner: Captioner, head: ImportanceHead | None, scenes, features, vocab: Vocabulary,
             rank: str = "eta", topk: int | None = None) -> list[Prediction]:
    if rank not in RANK_STRATEGIES:
        raise ValueError(f"unknown ranking strategy {rank!r}")
    out = []
    for scene, fs in zip(scenes, features):
        graph = build_scene_graph(captioner, head if rank == "eta" else None, fs)
        scores = beta_oracle_scores(captioner, scene, fs, graph.pairs) if rank == "beta_oracle" else None
        out.append(to_prediction(graph, scene, vocab, rank, topk, scores))
    return out
